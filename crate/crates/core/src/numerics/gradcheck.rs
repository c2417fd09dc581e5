//! Central finite-difference oracle for graph gradients.
//!
//! Only the forward path is used to form the numeric estimate, so it stays
//! independent of the backward implementation it is compared against.

use super::{Graph, NumericsError, Tensor, Var};

/// Relative error `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` per input, comparing the
/// analytic gradient `a` with central differences `n` of step `h`.
///
/// Inputs with more than `max_coords` elements are checked on an evenly
/// strided subset of coordinates.
pub fn check<F>(
    inputs: &[Tensor<f64>],
    build: F,
    h: f64,
    max_coords: usize,
) -> Result<Vec<f64>, NumericsError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let n = input.numel();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for j in (0..n).step_by(stride) {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            diff += (analytic[j] - numeric).powi(2);
            na += analytic[j].powi(2);
            nn += numeric.powi(2);
        }
        let scale = na.sqrt().max(nn.sqrt());
        errors.push(if scale < 1e-12 { diff.sqrt() } else { diff.sqrt() / scale });
    }
    Ok(errors)
}
