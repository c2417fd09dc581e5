use std::sync::Arc;

use rayon::prelude::*;

use super::kernels::{
    adaptive_pool_bounds, conv2d_sample, conv2d_sample_backward, conv_t_sample,
    conv_t_sample_backward,
};
use super::params::ParamId;
use super::{gemm, shape_err, NumericsError, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kernel, stride and zero padding of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        Self {
            kh: kernel.0,
            kw: kernel.1,
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
        }
    }

    /// `⌊(H + 2p − k)/s⌋ + 1` per axis.
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.ph - self.kh) / self.sh + 1,
            (w + 2 * self.pw - self.kw) / self.sw + 1,
        )
    }

    fn fits(&self, h: usize, w: usize) -> bool {
        h + 2 * self.ph >= self.kh && w + 2 * self.pw >= self.kw && self.sh > 0 && self.sw > 0
    }

    /// Output size of the transposed convolution: `(H − 1)·s − 2p + k`.
    pub fn transposed_dims(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ho = ((h - 1) * self.sh + self.kh).checked_sub(2 * self.ph)?;
        let wo = ((w - 1) * self.sw + self.kw).checked_sub(2 * self.pw)?;
        Some((ho, wo))
    }
}

/// Running-statistic update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub(crate) struct BnUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op<T> {
    Input,
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    GraphConv {
        x: Var,
        w: Var,
        adj: Arc<Vec<T>>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Film {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Tanh {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    MeanLast {
        x: Var,
    },
    AdaptivePoolLast {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    MaskLoss {
        pred: Var,
        target: Tensor<T>,
        weights: Tensor<T>,
    },
    WeightedSum {
        x: Var,
        w: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operator tape. Nodes are appended in evaluation order, which is a valid
/// topological order by construction.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    pub(crate) bn_updates: Vec<BnUpdate>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node that needs one.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn par_samples<T: Scalar, F>(out: &mut [T], per_sample: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if per_sample == 0 {
        return;
    }
    out.par_chunks_mut(per_sample)
        .enumerate()
        .for_each(|(n, chunk)| f(n, chunk));
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Constant input: no gradient is propagated into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Differentiable leaf (parameter or input under test).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    ) -> Result<Var, NumericsError> {
        let [n, c, h, wd] = self.value(x).dims4()?;
        let [co, ci, kh, kw] = self.value(w).dims4()?;
        if ci != c || kh != geom.kh || kw != geom.kw || !geom.fits(h, wd) {
            return Err(shape_err(
                "conv2d",
                format!(
                    "input {:?}, weight {:?}, geom {geom:?}",
                    self.value(x).shape(),
                    self.value(w).shape()
                ),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [co] {
                return Err(shape_err("conv2d", "bias shape"));
            }
        }
        let (ho, wo) = geom.out_dims(h, wd);
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        {
            let xs = self.value(x).data();
            let ws = self.value(w).data();
            let bs = b.map(|b| self.value(b).data());
            par_samples(out.data_mut(), co * ho * wo, |i, y| {
                let xi = &xs[i * c * h * wd..(i + 1) * c * h * wd];
                conv2d_sample(xi, (c, h, wd), ws, bs, co, &geom, y);
            });
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, needs))
    }

    /// Transposed convolution with weights `[C_in, C_out, kh, kw]`; the exact
    /// adjoint of [`Graph::conv2d`] under the same geometry.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    ) -> Result<Var, NumericsError> {
        let [n, c, h, wd] = self.value(x).dims4()?;
        let [ci, co, kh, kw] = self.value(w).dims4()?;
        let dims = geom.transposed_dims(h, wd);
        let ok = ci == c
            && kh == geom.kh
            && kw == geom.kw
            && dims.is_some_and(|(ho, wo)| geom.fits(ho, wo) && geom.out_dims(ho, wo) == (h, wd));
        if !ok {
            return Err(shape_err(
                "conv_transpose2d",
                format!(
                    "input {:?}, weight {:?}, geom {geom:?}",
                    self.value(x).shape(),
                    self.value(w).shape()
                ),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [co] {
                return Err(shape_err("conv_transpose2d", "bias shape"));
            }
        }
        let (ho, wo) = dims.expect("checked");
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        {
            let xs = self.value(x).data();
            let ws = self.value(w).data();
            let bs = b.map(|b| self.value(b).data());
            par_samples(out.data_mut(), co * ho * wo, |i, y| {
                let xi = &xs[i * c * h * wd..(i + 1) * c * h * wd];
                conv_t_sample(xi, c, (h, wd), (co, ho, wo), ws, bs, &geom, y);
            });
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, geom }, needs))
    }

    /// Spatial graph aggregation `x' = Â·x·W` on `[N, C, T, V]` features with
    /// weights `[C', C]` and a pre-normalized `V×V` adjacency.
    pub fn graph_conv(&mut self, x: Var, w: Var, adj: Arc<Vec<T>>) -> Result<Var, NumericsError> {
        let [n, c, t, v] = self.value(x).dims4()?;
        let wshape = self.value(w).shape().to_vec();
        if wshape.len() != 2 || wshape[1] != c || adj.len() != v * v {
            return Err(shape_err(
                "graph_conv",
                format!("input {:?}, weight {wshape:?}, adjacency {}", self.value(x).shape(), adj.len()),
            ));
        }
        let co = wshape[0];
        let mut out = Tensor::zeros(&[n, co, t, v]);
        {
            let xs = self.value(x).data();
            let ws = self.value(w).data();
            let a = adj.as_slice();
            par_samples(out.data_mut(), co * t * v, |i, y| {
                let xi = &xs[i * c * t * v..(i + 1) * c * t * v];
                let mut z = vec![T::zero(); co * t * v];
                gemm(co, c, t * v, ws, false, xi, false, &mut z, T::zero());
                gemm(co * t, v, v, &z, false, a, true, y, T::zero());
            });
        }
        let needs = self.ng(x) || self.ng(w);
        Ok(self.push(out, Op::GraphConv { x, w, adj }, needs))
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize), NumericsError> {
        let shape = self.value(x).shape();
        if shape.len() < 2 {
            return Err(shape_err("batch_norm", "rank < 2"));
        }
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err("batch_norm", "gamma/beta must be [C]"));
        }
        Ok((n, c, s))
    }

    /// Batch norm with batch statistics. When `stats` is given, the new
    /// running mean and unbiased variance of the batch are recorded for the
    /// parameter store to blend in after the step.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(ParamId, ParamId)>,
    ) -> Result<Var, NumericsError> {
        let (n, c, s) = self.bn_dims(x, gamma, beta)?;
        let m = (n * s) as f64;
        let xs = self.value(x).data();
        let mut means = vec![0.0f64; c];
        let mut vars = vec![0.0f64; c];
        for ch in 0..c {
            let mut acc = 0.0f64;
            for i in 0..n {
                for v in &xs[(i * c + ch) * s..(i * c + ch + 1) * s] {
                    acc += v.to_f64_lossy();
                }
            }
            let mean = acc / m;
            let mut sq = 0.0f64;
            for i in 0..n {
                for v in &xs[(i * c + ch) * s..(i * c + ch + 1) * s] {
                    let d = v.to_f64_lossy() - mean;
                    sq += d * d;
                }
            }
            means[ch] = mean;
            vars[ch] = sq / m;
        }
        let inv_std: Vec<T> = vars
            .iter()
            .map(|v| T::from_f64_lossy(1.0 / (v + BN_EPS).sqrt()))
            .collect();
        let (xhat, out) = self.bn_apply(x, gamma, beta, (n, c, s), &means, &inv_std);
        if let Some((mean_id, var_id)) = stats {
            let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            self.bn_updates.push(BnUpdate {
                mean_id,
                var_id,
                mean: means,
                var: vars.iter().map(|v| v * unbiased).collect(),
            });
        }
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            needs,
        ))
    }

    /// Batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<Var, NumericsError> {
        let (n, c, s) = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batch_norm", "running stats must be [C]"));
        }
        let means: Vec<f64> = running_mean.iter().map(|v| v.to_f64_lossy()).collect();
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|v| T::from_f64_lossy(1.0 / (v.to_f64_lossy() + BN_EPS).sqrt()))
            .collect();
        let (xhat, out) = self.bn_apply(x, gamma, beta, (n, c, s), &means, &inv_std);
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
            needs,
        ))
    }

    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        (n, c, s): (usize, usize, usize),
        means: &[f64],
        inv_std: &[T],
    ) -> (Vec<T>, Tensor<T>) {
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = Tensor::zeros(self.value(x).shape());
        let od = out.data_mut();
        for i in 0..n {
            for ch in 0..c {
                let mean = T::from_f64_lossy(means[ch]);
                let r = (i * c + ch) * s..(i * c + ch + 1) * s;
                for j in r {
                    let h = (xs[j] - mean) * inv_std[ch];
                    xhat[j] = h;
                    od[j] = g[ch] * h + b[ch];
                }
            }
        }
        (xhat, out)
    }

    /// `out[n,c,f,t] = γ[n,c,0,t]·x[n,c,f,t] + β[n,c,0,t]`.
    pub fn film(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericsError> {
        let [n, c, f, t] = self.value(x).dims4()?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [n, c, 1, t] {
                return Err(shape_err(
                    "film",
                    format!(
                        "features {:?} vs modulation {:?}",
                        self.value(x).shape(),
                        self.value(p).shape()
                    ),
                ));
            }
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = Tensor::zeros(&[n, c, f, t]);
        let od = out.data_mut();
        for nc in 0..n * c {
            for fi in 0..f {
                let base = (nc * f + fi) * t;
                for ti in 0..t {
                    od[base + ti] = g[nc * t + ti] * xs[base + ti] + b[nc * t + ti];
                }
            }
        }
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(out, Op::Film { x, gamma, beta }, needs))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::from_f64_lossy(slope);
        let out = self.map(x, |v| if v > T::zero() { v } else { v * slope });
        let needs = self.ng(x);
        self.push(out, Op::LeakyRelu { x, slope }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.map(x, T::tanh);
        let needs = self.ng(x);
        self.push(out, Op::Tanh { x }, needs)
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let src = self.value(x);
        let data = src.data().iter().map(|v| f(*v)).collect();
        Tensor::from_vec(src.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape(), data)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    /// Concatenation along the channel axis (axis 1).
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(shape_err("concat", format!("{sa:?} vs {sb:?}")));
        }
        let n = sa[0];
        let s: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1], sb[1]);
        let mut shape = sa.clone();
        shape[1] = ca + cb;
        let mut data = Vec::with_capacity(n * (ca + cb) * s);
        for i in 0..n {
            data.extend_from_slice(&self.value(a).data()[i * ca * s..(i + 1) * ca * s]);
            data.extend_from_slice(&self.value(b).data()[i * cb * s..(i + 1) * cb * s]);
        }
        let out = Tensor::from_vec(&shape, data)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Concat { a, b }, needs))
    }

    /// Mean over the last axis, kept as a size-1 axis.
    pub fn mean_last(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        let len = *shape.last().expect("rank >= 1");
        let inv = T::one() / T::from_usize(len).expect("len");
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(len)
            .map(|c| c.iter().fold(T::zero(), |a, v| a + *v) * inv)
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = 1;
        let out = Tensor::from_vec(&out_shape, data).expect("shape");
        let needs = self.ng(x);
        self.push(out, Op::MeanLast { x }, needs)
    }

    /// Adaptive average pooling of the last axis to `out_len` bins.
    pub fn adaptive_avg_pool_last(&mut self, x: Var, out_len: usize) -> Result<Var, NumericsError> {
        let shape = self.value(x).shape().to_vec();
        let len = *shape.last().ok_or_else(|| shape_err("adaptive_pool", "rank 0"))?;
        if len == 0 || out_len == 0 {
            return Err(shape_err("adaptive_pool", "empty axis"));
        }
        let mut data = Vec::with_capacity(self.value(x).numel() / len * out_len);
        for row in self.value(x).data().chunks(len) {
            for i in 0..out_len {
                let (s, e) = adaptive_pool_bounds(i, len, out_len);
                let sum = row[s..e].iter().fold(T::zero(), |a, v| a + *v);
                data.push(sum / T::from_usize(e - s).expect("len"));
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank") = out_len;
        let out = Tensor::from_vec(&out_shape, data)?;
        let needs = self.ng(x);
        Ok(self.push(out, Op::AdaptivePoolLast { x }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let out = self.value(x).clone().reshape(shape)?;
        let needs = self.ng(x);
        Ok(self.push(out, Op::Reshape { x }, needs))
    }

    /// Weighted complex-mask loss on `[N, 2, F, T]` predictions (real and
    /// imaginary planes) against constant targets with `[N, 1, F, T]` weights:
    /// summed over bins, averaged over the batch.
    pub fn mask_loss(
        &mut self,
        pred: Var,
        target: Tensor<T>,
        weights: Tensor<T>,
    ) -> Result<Var, NumericsError> {
        let [n, two, f, t] = self.value(pred).dims4()?;
        if two != 2 || target.shape() != self.value(pred).shape() || weights.shape() != [n, 1, f, t] {
            return Err(shape_err(
                "mask_loss",
                format!(
                    "pred {:?}, target {:?}, weights {:?}",
                    self.value(pred).shape(),
                    target.shape(),
                    weights.shape()
                ),
            ));
        }
        let p = self.value(pred).data();
        let tg = target.data();
        let g = weights.data();
        let plane = f * t;
        let mut total = T::zero();
        for i in 0..n {
            let mut acc = T::zero();
            for j in 0..plane {
                let re = (i * 2) * plane + j;
                let im = (i * 2 + 1) * plane + j;
                let dr = p[re] - tg[re];
                let di = p[im] - tg[im];
                acc += g[i * plane + j] * (dr * dr + di * di);
            }
            total += acc;
        }
        total /= T::from_usize(n).expect("n");
        let needs = self.ng(pred);
        Ok(self.push(
            Tensor::scalar(total),
            Op::MaskLoss {
                pred,
                target,
                weights,
            },
            needs,
        ))
    }

    /// `Σ w ⊙ x` with a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, w: Tensor<T>) -> Result<Var, NumericsError> {
        if w.shape() != self.value(x).shape() {
            return Err(shape_err("weighted_sum", "weight shape"));
        }
        let s = self.value(x).dot(&w);
        let needs = self.ng(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, w }, needs))
    }

    /// Reverse-mode sweep from a scalar node, visiting nodes in exact reverse
    /// recording order.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>, NumericsError> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let keep = matches!(node.op, Op::Leaf);
            let dy = match if keep {
                grads[idx].as_ref().map(|g| g.data().to_vec())
            } else {
                grads[idx].take().map(Tensor::into_data)
            } {
                Some(d) => d,
                None => continue,
            };
            self.backward_node(&node.op, &node.value, &dy, &mut grads)?;
        }
        Ok(Grads { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Vec<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(&g) {
                    *e += *x;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_vec(self.value(v).shape(), g).expect("grad shape"));
            }
        }
    }

    fn backward_node(
        &self,
        op: &Op<T>,
        value: &Tensor<T>,
        dy: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<(), NumericsError> {
        match op {
            Op::Input | Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let [n, c, h, wd] = self.value(*x).dims4()?;
                let co = self.value(*w).shape()[0];
                let (ho, wo) = geom.out_dims(h, wd);
                let (xs, ws) = (self.value(*x).data(), self.value(*w).data());
                let need_dx = self.ng(*x);
                let per: Vec<(Option<Vec<T>>, Vec<T>)> = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        conv2d_sample_backward(
                            &xs[i * c * h * wd..(i + 1) * c * h * wd],
                            (c, h, wd),
                            ws,
                            co,
                            geom,
                            &dy[i * co * ho * wo..(i + 1) * co * ho * wo],
                            need_dx,
                        )
                    })
                    .collect();
                self.finish_conv(grads, *x, *w, *b, per, dy, n, co, ho * wo);
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let [n, c, h, wd] = self.value(*x).dims4()?;
                let [_, co, ho, wo] = value.dims4()?;
                let (xs, ws) = (self.value(*x).data(), self.value(*w).data());
                let need_dx = self.ng(*x);
                let per: Vec<(Option<Vec<T>>, Vec<T>)> = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        conv_t_sample_backward(
                            &xs[i * c * h * wd..(i + 1) * c * h * wd],
                            c,
                            (h, wd),
                            (co, ho, wo),
                            ws,
                            geom,
                            &dy[i * co * ho * wo..(i + 1) * co * ho * wo],
                            need_dx,
                        )
                    })
                    .collect();
                self.finish_conv(grads, *x, *w, *b, per, dy, n, co, ho * wo);
            }
            Op::GraphConv { x, w, adj } => {
                let [n, c, t, v] = self.value(*x).dims4()?;
                let co = self.value(*w).shape()[0];
                let (xs, ws) = (self.value(*x).data(), self.value(*w).data());
                let a = adj.as_slice();
                let need_dx = self.ng(*x);
                let per: Vec<(Option<Vec<T>>, Vec<T>)> = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let dyi = &dy[i * co * t * v..(i + 1) * co * t * v];
                        let xi = &xs[i * c * t * v..(i + 1) * c * t * v];
                        let mut dz = vec![T::zero(); co * t * v];
                        gemm(co * t, v, v, dyi, false, a, false, &mut dz, T::zero());
                        let mut dw = vec![T::zero(); co * c];
                        gemm(co, t * v, c, &dz, false, xi, true, &mut dw, T::zero());
                        let dx = need_dx.then(|| {
                            let mut dx = vec![T::zero(); c * t * v];
                            gemm(c, co, t * v, ws, true, &dz, false, &mut dx, T::zero());
                            dx
                        });
                        (dx, dw)
                    })
                    .collect();
                self.finish_conv(grads, *x, *w, None, per, dy, n, co, t * v);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = self.value(*x).shape();
                let (n, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let g = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); dy.len()];
                let m = T::from_usize(n * s).expect("count");
                for ch in 0..c {
                    let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
                    for i in 0..n {
                        for j in (i * c + ch) * s..(i * c + ch + 1) * s {
                            sum_dy += dy[j];
                            sum_dy_xhat += dy[j] * xhat[j];
                        }
                    }
                    dgamma[ch] = sum_dy_xhat;
                    dbeta[ch] = sum_dy;
                    let scale = g[ch] * inv_std[ch];
                    for i in 0..n {
                        for j in (i * c + ch) * s..(i * c + ch + 1) * s {
                            dx[j] = if *train {
                                scale * (dy[j] - sum_dy / m - xhat[j] * sum_dy_xhat / m)
                            } else {
                                scale * dy[j]
                            };
                        }
                    }
                }
                self.accum(grads, *x, dx);
                self.accum(grads, *gamma, dgamma);
                self.accum(grads, *beta, dbeta);
            }
            Op::Film { x, gamma, beta } => {
                let [n, c, f, t] = self.value(*x).dims4()?;
                let xs = self.value(*x).data();
                let g = self.value(*gamma).data();
                let mut dx = vec![T::zero(); dy.len()];
                let mut dg = vec![T::zero(); n * c * t];
                let mut db = vec![T::zero(); n * c * t];
                for nc in 0..n * c {
                    for fi in 0..f {
                        let base = (nc * f + fi) * t;
                        for ti in 0..t {
                            let d = dy[base + ti];
                            dx[base + ti] = g[nc * t + ti] * d;
                            dg[nc * t + ti] += d * xs[base + ti];
                            db[nc * t + ti] += d;
                        }
                    }
                }
                self.accum(grads, *x, dx);
                self.accum(grads, *gamma, dg);
                self.accum(grads, *beta, db);
            }
            Op::LeakyRelu { x, slope } => {
                let xs = self.value(*x).data();
                let dx = xs
                    .iter()
                    .zip(dy)
                    .map(|(v, d)| if *v > T::zero() { *d } else { *d * *slope })
                    .collect();
                self.accum(grads, *x, dx);
            }
            Op::Tanh { x } => {
                let dx = value
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(y, d)| *d * (T::one() - *y * *y))
                    .collect();
                self.accum(grads, *x, dx);
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, dy.to_vec());
                self.accum(grads, *b, dy.to_vec());
            }
            Op::Concat { a, b } => {
                let sa = self.value(*a).shape();
                let sb = self.value(*b).shape();
                let n = sa[0];
                let s: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1], sb[1]);
                let mut da = Vec::with_capacity(n * ca * s);
                let mut db = Vec::with_capacity(n * cb * s);
                for i in 0..n {
                    let base = i * (ca + cb) * s;
                    da.extend_from_slice(&dy[base..base + ca * s]);
                    db.extend_from_slice(&dy[base + ca * s..base + (ca + cb) * s]);
                }
                self.accum(grads, *a, da);
                self.accum(grads, *b, db);
            }
            Op::MeanLast { x } => {
                let len = *self.value(*x).shape().last().expect("rank");
                let inv = T::one() / T::from_usize(len).expect("len");
                let dx = dy
                    .iter()
                    .flat_map(|d| std::iter::repeat_n(*d * inv, len))
                    .collect();
                self.accum(grads, *x, dx);
            }
            Op::AdaptivePoolLast { x } => {
                let len = *self.value(*x).shape().last().expect("rank");
                let out_len = *value.shape().last().expect("rank");
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (drow, grow) in dx.chunks_mut(len).zip(dy.chunks(out_len)) {
                    for (i, g) in grow.iter().enumerate() {
                        let (s, e) = adaptive_pool_bounds(i, len, out_len);
                        let share = *g / T::from_usize(e - s).expect("len");
                        for d in &mut drow[s..e] {
                            *d += share;
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::Reshape { x } => self.accum(grads, *x, dy.to_vec()),
            Op::MaskLoss {
                pred,
                target,
                weights,
            } => {
                let [n, _, f, t] = self.value(*pred).dims4()?;
                let plane = f * t;
                let p = self.value(*pred).data();
                let tg = target.data();
                let g = weights.data();
                let scale = dy[0] * T::from_f64_lossy(2.0) / T::from_usize(n).expect("n");
                let mut dp = vec![T::zero(); p.len()];
                for i in 0..n {
                    for part in 0..2 {
                        for j in 0..plane {
                            let k = (i * 2 + part) * plane + j;
                            dp[k] = scale * g[i * plane + j] * (p[k] - tg[k]);
                        }
                    }
                }
                self.accum(grads, *pred, dp);
            }
            Op::WeightedSum { x, w } => {
                let dx = w.data().iter().map(|v| *v * dy[0]).collect();
                self.accum(grads, *x, dx);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_conv(
        &self,
        grads: &mut [Option<Tensor<T>>],
        x: Var,
        w: Var,
        b: Option<Var>,
        per: Vec<(Option<Vec<T>>, Vec<T>)>,
        dy: &[T],
        n: usize,
        co: usize,
        plane: usize,
    ) {
        let mut dw = vec![T::zero(); self.value(w).numel()];
        let mut dx = Vec::with_capacity(self.value(x).numel());
        for (dxi, dwi) in per {
            for (a, v) in dw.iter_mut().zip(&dwi) {
                *a += *v;
            }
            if let Some(d) = dxi {
                dx.extend(d);
            }
        }
        if self.ng(x) {
            self.accum(grads, x, dx);
        }
        self.accum(grads, w, dw);
        if let Some(b) = b {
            let mut db = vec![T::zero(); co];
            for i in 0..n {
                for (o, d) in db.iter_mut().enumerate() {
                    let base = (i * co + o) * plane;
                    *d += dy[base..base + plane].iter().fold(T::zero(), |a, v| a + *v);
                }
            }
            self.accum(grads, b, db);
        }
    }
}
