//! Parameter bundles for the layers both networks are assembled from.

use super::{BoundParams, ConvGeom, Graph, Init, NumericsError, ParamId, ParamStore, Scalar, Var};

/// Whether batch norm uses batch statistics (and records running-stat
/// updates) or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    transposed: bool,
}

impl Conv {
    /// Weights `[C_out, C_in, kh, kw]`, Kaiming-uniform over `C_in·kh·kw`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        (c_in, c_out): (usize, usize),
        geom: ConvGeom,
        bias: bool,
    ) -> Result<Self, NumericsError> {
        let fan_in = c_in * geom.kh * geom.kw;
        let weight = store.add(
            &format!("{name}.weight"),
            &[c_out, c_in, geom.kh, geom.kw],
            Init::KaimingUniform { fan_in },
        )?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), &[c_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            geom,
            transposed: false,
        })
    }

    /// Transposed convolution, weights `[C_in, C_out, kh, kw]`.
    pub fn new_transposed<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        (c_in, c_out): (usize, usize),
        geom: ConvGeom,
        bias: bool,
    ) -> Result<Self, NumericsError> {
        let fan_in = c_out * geom.kh * geom.kw;
        let weight = store.add(
            &format!("{name}.weight"),
            &[c_in, c_out, geom.kh, geom.kw],
            Init::KaimingUniform { fan_in },
        )?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), &[c_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            geom,
            transposed: true,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var, NumericsError> {
        let b = self.bias.map(|b| p.var(b));
        if self.transposed {
            g.conv_transpose2d(x, p.var(self.weight), b, self.geom)
        } else {
            g.conv2d(x, p.var(self.weight), b, self.geom)
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self, NumericsError> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), &[channels], Init::Constant(1.0))?,
            beta: store.add(&format!("{name}.beta"), &[channels], Init::Zeros)?,
            running_mean: store.add_buffer(&format!("{name}.running_mean"), &[channels], 0.0)?,
            running_var: store.add_buffer(&format!("{name}.running_var"), &[channels], 1.0)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        p: &BoundParams,
        x: Var,
        mode: Mode,
    ) -> Result<Var, NumericsError> {
        let (gamma, beta) = (p.var(self.gamma), p.var(self.beta));
        match mode {
            Mode::Train => g.batch_norm_train(x, gamma, beta, Some((self.running_mean, self.running_var))),
            Mode::Eval => g.batch_norm_eval(
                x,
                gamma,
                beta,
                store.get(self.running_mean).data(),
                store.get(self.running_var).data(),
            ),
        }
    }
}

/// Convolution followed by batch norm (the convolution carries no bias).
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBn {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: (usize, usize),
        geom: ConvGeom,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            conv: Conv::new(store, &format!("{name}.conv"), channels, geom, false)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), channels.1)?,
        })
    }

    pub fn new_transposed<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: (usize, usize),
        geom: ConvGeom,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            conv: Conv::new_transposed(store, &format!("{name}.conv"), channels, geom, false)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), channels.1)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        p: &BoundParams,
        x: Var,
        mode: Mode,
    ) -> Result<Var, NumericsError> {
        let y = self.conv.forward(g, p, x)?;
        self.bn.forward(g, store, p, y, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn eval_mode_uses_running_stats() {
        let mut store = ParamStore::<f64>::new(1);
        let bn = BatchNorm::new(&mut store, "bn", 2).unwrap();
        store.get_mut(bn.running_mean).data_mut().copy_from_slice(&[1.0, -1.0]);
        store.get_mut(bn.running_var).data_mut().copy_from_slice(&[4.0, 1.0]);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.input(Tensor::from_vec(&[1, 2, 1, 1], vec![3.0, -1.0]).unwrap());
        let y = bn.forward(&mut g, &store, &p, x, Mode::Eval).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 2.0 / (4.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        assert!(d[1].abs() < 1e-12);
        assert!(g.bn_updates.is_empty());
    }

    #[test]
    fn transposed_conv_inverts_downsample_shape() {
        let mut store = ParamStore::<f32>::new(2);
        let geom = ConvGeom::new((4, 4), (2, 2), (1, 1));
        let down = ConvBn::new(&mut store, "down", (3, 5), geom).unwrap();
        let up = ConvBn::new_transposed(&mut store, "up", (5, 3), geom).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.input(Tensor::zeros(&[2, 3, 8, 12]));
        let h = down.forward(&mut g, &store, &p, x, Mode::Train).unwrap();
        assert_eq!(g.value(h).shape(), &[2, 5, 4, 6]);
        let y = up.forward(&mut g, &store, &p, h, Mode::Train).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3, 8, 12]);
        assert_eq!(g.bn_updates.len(), 2);
    }
}
