//! Per-sample compute kernels shared by the graph operators.

use super::graph::ConvGeom;
use super::{gemm, NumericsError, Scalar};

/// Unfolds one `[C, H, W]` image into `[C·kh·kw, Ho·Wo]` columns.
pub(crate) fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, g: &ConvGeom, col: &mut [T]) {
    let (ho, wo) = g.out_dims(h, w);
    let p = ho * wo;
    debug_assert_eq!(col.len(), c * g.kh * g.kw * p);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * p;
                let dst = &mut col[row..row + p];
                for oh in 0..ho {
                    let ih = (oh * g.sh + ki) as isize - g.ph as isize;
                    let out_row = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, o) in out_row.iter_mut().enumerate() {
                        let iw = (ow * g.sw + kj) as isize - g.pw as isize;
                        *o = if iw < 0 || iw >= w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into a zeroed `[C, H, W]` image.
pub(crate) fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, g: &ConvGeom, x: &mut [T]) {
    let (ho, wo) = g.out_dims(h, w);
    let p = ho * wo;
    x.fill(T::zero());
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * p;
                let src = &col[row..row + p];
                for oh in 0..ho {
                    let ih = (oh * g.sh + ki) as isize - g.ph as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, v) in src[oh * wo..(oh + 1) * wo].iter().enumerate() {
                        let iw = (ow * g.sw + kj) as isize - g.pw as isize;
                        if iw >= 0 && iw < w as isize {
                            dst[iw as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of one sample: `y[Co, Ho·Wo] = W[Co, Ci·kh·kw] · col`.
pub(crate) fn conv2d_sample<T: Scalar>(
    x: &[T],
    dims: (usize, usize, usize),
    weight: &[T],
    bias: Option<&[T]>,
    c_out: usize,
    g: &ConvGeom,
    y: &mut [T],
) {
    let (c, h, w) = dims;
    let (ho, wo) = g.out_dims(h, w);
    let k = c * g.kh * g.kw;
    let p = ho * wo;
    let mut col = vec![T::zero(); k * p];
    im2col(x, c, h, w, g, &mut col);
    gemm(c_out, k, p, weight, false, &col, false, y, T::zero());
    if let Some(b) = bias {
        for (co, bv) in b.iter().enumerate() {
            for v in &mut y[co * p..(co + 1) * p] {
                *v += *bv;
            }
        }
    }
}

/// Returns `(dx, dW)` for one sample; `db` is accumulated by the caller.
pub(crate) fn conv2d_sample_backward<T: Scalar>(
    x: &[T],
    dims: (usize, usize, usize),
    weight: &[T],
    c_out: usize,
    g: &ConvGeom,
    dy: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>) {
    let (c, h, w) = dims;
    let (ho, wo) = g.out_dims(h, w);
    let k = c * g.kh * g.kw;
    let p = ho * wo;
    let mut col = vec![T::zero(); k * p];
    im2col(x, c, h, w, g, &mut col);
    let mut dw = vec![T::zero(); c_out * k];
    gemm(c_out, p, k, dy, false, &col, true, &mut dw, T::zero());
    let dx = need_dx.then(|| {
        gemm(k, c_out, p, weight, true, dy, false, &mut col, T::zero());
        let mut dx = vec![T::zero(); c * h * w];
        col2im(&col, c, h, w, g, &mut dx);
        dx
    });
    (dx, dw)
}

/// Transposed convolution of one sample `x[Ci, H, W]` with weights stored
/// `[Ci, Co, kh, kw]`, producing `[Co, Ho', Wo']` where the forward
/// convolution geometry `g` maps `(Ho', Wo')` back to `(H, W)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_t_sample<T: Scalar>(
    x: &[T],
    c_in: usize,
    in_hw: (usize, usize),
    out_chw: (usize, usize, usize),
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
    y: &mut [T],
) {
    let (c_out, ho, wo) = out_chw;
    let k = c_out * g.kh * g.kw;
    let p = in_hw.0 * in_hw.1;
    let mut col = vec![T::zero(); k * p];
    gemm(k, c_in, p, weight, true, x, false, &mut col, T::zero());
    col2im(&col, c_out, ho, wo, g, y);
    if let Some(b) = bias {
        let plane = ho * wo;
        for (co, bv) in b.iter().enumerate() {
            for v in &mut y[co * plane..(co + 1) * plane] {
                *v += *bv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_t_sample_backward<T: Scalar>(
    x: &[T],
    c_in: usize,
    in_hw: (usize, usize),
    out_chw: (usize, usize, usize),
    weight: &[T],
    g: &ConvGeom,
    dy: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>) {
    let (c_out, ho, wo) = out_chw;
    let k = c_out * g.kh * g.kw;
    let p = in_hw.0 * in_hw.1;
    let mut col = vec![T::zero(); k * p];
    im2col(dy, c_out, ho, wo, g, &mut col);
    let mut dw = vec![T::zero(); c_in * k];
    gemm(c_in, p, k, x, false, &col, true, &mut dw, T::zero());
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); c_in * p];
        gemm(c_in, k, p, weight, false, &col, false, &mut dx, T::zero());
        dx
    });
    (dx, dw)
}

/// `Â = D̃^{-1/2} (A + I) D̃^{-1/2}` for a symmetric `V×V` adjacency.
pub fn normalize_adjacency(adj: &[f64], v: usize) -> Result<Vec<f64>, NumericsError> {
    if adj.len() != v * v {
        return Err(super::shape_err(
            "normalize_adjacency",
            format!("expected {v}x{v}, got {} entries", adj.len()),
        ));
    }
    for i in 0..v {
        for j in (i + 1)..v {
            if adj[i * v + j] != adj[j * v + i] {
                return Err(NumericsError::NotSymmetric(i, j));
            }
        }
    }
    let mut a = adj.to_vec();
    for i in 0..v {
        a[i * v + i] += 1.0;
    }
    let inv_sqrt_deg: Vec<f64> = (0..v)
        .map(|i| 1.0 / a[i * v..(i + 1) * v].iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..v {
        for j in 0..v {
            a[i * v + j] *= inv_sqrt_deg[i] * inv_sqrt_deg[j];
        }
    }
    Ok(a)
}

/// Half-open input range `[start, end)` averaged into adaptive-pool bin `i`.
pub fn adaptive_pool_bounds(i: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let start = i * in_len / out_len;
    let end = ((i + 1) * in_len).div_ceil(out_len);
    (start, end.max(start + 1))
}
