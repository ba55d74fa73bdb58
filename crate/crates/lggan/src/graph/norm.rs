//! Normalization, pooling, and the spectral weight rescaling used by every
//! convolution in the generators and discriminators.

use super::{Data, GradFn, Tensor};
use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, IxDyn};

const INSTANCE_NORM_EPS: f32 = 1e-5;

struct InstanceNormGrad {
    xhat: Data,
    inv_std: Vec<f32>, // one per (n, c) plane, row-major
}

impl GradFn for InstanceNormGrad {
    fn backward(&self, grad: &Data, parents: &[Tensor]) -> Vec<Option<Data>> {
        let gamma = parents[1].data();
        let shape = grad.shape();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let m = h * w;
        let mut dx = ArrayD::<f32>::zeros(grad.raw_dim());
        let mut dgamma = Array1::<f32>::zeros(c);
        let mut dbeta = Array1::<f32>::zeros(c);
        let g_s = grad.as_slice().expect("contiguous gradient");
        let xhat_s = self.xhat.as_slice().unwrap();
        let dx_s = dx.as_slice_mut().unwrap();
        for plane in 0..n * c {
            let ci = plane % c;
            let g = gamma[[ci]];
            let inv_std = self.inv_std[plane];
            let base = plane * m;
            let mut sum_dy = 0.0f32;
            let mut sum_dy_xhat = 0.0f32;
            for o in base..base + m {
                sum_dy += g_s[o];
                sum_dy_xhat += g_s[o] * xhat_s[o];
            }
            dgamma[ci] += sum_dy_xhat;
            dbeta[ci] += sum_dy;
            let mean_dy = sum_dy / m as f32;
            let mean_dy_xhat = sum_dy_xhat / m as f32;
            let k = g * inv_std;
            for o in base..base + m {
                dx_s[o] = k * (g_s[o] - mean_dy - xhat_s[o] * mean_dy_xhat);
            }
        }
        vec![
            Some(dx),
            Some(dgamma.into_dyn()),
            Some(dbeta.into_dyn()),
        ]
    }
    fn name(&self) -> &'static str {
        "instance_norm"
    }
}

/// Instance normalization: each `(sample, channel)` plane is standardized
/// over its spatial extent, then scaled and shifted by per-channel `gamma`
/// and `beta`.
pub fn instance_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let xd = x.data();
    let shape = xd.shape().to_vec();
    assert_eq!(shape.len(), 4, "instance_norm: expected NCHW input");
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert_eq!(gamma.shape(), vec![c], "instance_norm: gamma shape");
    assert_eq!(beta.shape(), vec![c], "instance_norm: beta shape");
    let m = h * w;
    let gd = gamma.data();
    let bd = beta.data();

    let mut xhat = ArrayD::<f32>::zeros(xd.raw_dim());
    let mut out = ArrayD::<f32>::zeros(xd.raw_dim());
    let mut inv_std = Vec::with_capacity(n * c);
    let x_s = xd.as_slice().expect("contiguous input");
    let xhat_s = xhat.as_slice_mut().unwrap();
    let out_s = out.as_slice_mut().unwrap();
    for plane in 0..n * c {
        let ci = plane % c;
        let base = plane * m;
        let vals = &x_s[base..base + m];
        let mean = vals.iter().sum::<f32>() / m as f32;
        let var = vals.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / m as f32;
        let is = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
        inv_std.push(is);
        let (g, b) = (gd[[ci]], bd[[ci]]);
        for (o, &v) in vals.iter().enumerate() {
            let xh = (v - mean) * is;
            xhat_s[base + o] = xh;
            out_s[base + o] = g * xh + b;
        }
    }
    drop(xd);
    Tensor::from_op(
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(InstanceNormGrad { xhat, inv_std }),
    )
}

struct LinearGrad;
impl GradFn for LinearGrad {
    fn backward(&self, grad: &Data, parents: &[Tensor]) -> Vec<Option<Data>> {
        let x = parents[0].data();
        let w = parents[1].data();
        let g = grad.view().into_dimensionality::<Ix2>().unwrap();
        let x2 = x.view().into_dimensionality::<Ix2>().unwrap();
        let w2 = w.view().into_dimensionality::<Ix2>().unwrap();
        let dx = g.dot(&w2).into_dyn();
        let dw = g.t().dot(&x2).into_dyn();
        let db = g.sum_axis(Axis(0)).into_dyn();
        vec![Some(dx), Some(dw), Some(db)]
    }
    fn name(&self) -> &'static str {
        "linear"
    }
}

/// Fully connected layer: `[N, F] × [O, F]ᵀ + [O] → [N, O]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let xd = x.data();
    let wd = weight.data();
    assert_eq!(xd.ndim(), 2, "linear: expected [N, F] input");
    assert_eq!(wd.ndim(), 2, "linear: expected [O, F] weight");
    assert_eq!(xd.shape()[1], wd.shape()[1], "linear: feature mismatch");
    assert_eq!(bias.shape(), vec![wd.shape()[0]], "linear: bias shape");
    let x2 = xd.view().into_dimensionality::<Ix2>().unwrap();
    let w2 = wd.view().into_dimensionality::<Ix2>().unwrap();
    let mut out = x2.dot(&w2.t());
    let bd = bias.data();
    for mut row in out.rows_mut() {
        for (o, v) in row.iter_mut().enumerate() {
            *v += bd[[o]];
        }
    }
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone(), weight.clone(), bias.clone()],
        Box::new(LinearGrad),
    )
}

struct MaskedAvgPoolGrad {
    counts: Array2<f32>, // [N, c] mask populations, clamped to ≥ 1
}

impl GradFn for MaskedAvgPoolGrad {
    fn backward(&self, grad: &Data, parents: &[Tensor]) -> Vec<Option<Data>> {
        let f = parents[0].data();
        let masks = parents[1].data();
        let (n, ch, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2], f.shape()[3]);
        let c = masks.shape()[1];
        let mut df = ArrayD::<f32>::zeros(f.raw_dim());
        for ni in 0..n {
            let m_mat = masks
                .index_axis(Axis(0), ni)
                .into_shape_with_order((c, h * w))
                .unwrap()
                .to_owned();
            let mut g_scaled = grad
                .index_axis(Axis(0), ni)
                .into_shape_with_order((c, ch))
                .unwrap()
                .to_owned();
            for (i, mut row) in g_scaled.rows_mut().into_iter().enumerate() {
                row /= self.counts[[ni, i]];
            }
            let dfi = g_scaled.t().dot(&m_mat); // [ch, h*w]
            df.index_axis_mut(Axis(0), ni)
                .assign(&dfi.into_shape_with_order((ch, h, w)).unwrap());
        }
        vec![Some(df), None]
    }
    fn name(&self) -> &'static str {
        "masked_avg_pool"
    }
}

/// Average-pool features under each mask: `features` `[N, C, H, W]` and
/// binary `masks` `[N, c, H, W]` produce `[N, c, C]`, where entry
/// `(n, i, :)` is the mean feature vector over mask `i`'s support. Empty
/// masks pool to the zero vector. Masks are treated as data, not as a
/// differentiable input.
pub fn masked_avg_pool(features: &Tensor, masks: &Tensor) -> Tensor {
    let fd = features.data();
    let md = masks.data();
    let fs = fd.shape();
    let ms = md.shape();
    assert_eq!(fs.len(), 4, "masked_avg_pool: expected NCHW features");
    assert_eq!(ms.len(), 4, "masked_avg_pool: expected NcHW masks");
    assert_eq!(fs[0], ms[0], "masked_avg_pool: batch mismatch");
    assert_eq!(&fs[2..], &ms[2..], "masked_avg_pool: spatial mismatch");
    let (n, ch, h, w) = (fs[0], fs[1], fs[2], fs[3]);
    let c = ms[1];
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[n, c, ch]));
    let mut counts = Array2::<f32>::zeros((n, c));
    for ni in 0..n {
        let f_mat = fd
            .index_axis(Axis(0), ni)
            .into_shape_with_order((ch, h * w))
            .unwrap()
            .to_owned();
        let m_mat = md
            .index_axis(Axis(0), ni)
            .into_shape_with_order((c, h * w))
            .unwrap()
            .to_owned();
        let mut pooled = m_mat.dot(&f_mat.t()); // [c, ch]
        for (i, mut row) in pooled.rows_mut().into_iter().enumerate() {
            let cnt = m_mat.row(i).sum().max(1.0);
            counts[[ni, i]] = cnt;
            row /= cnt;
        }
        out.index_axis_mut(Axis(0), ni).assign(&pooled);
    }
    Tensor::from_op(
        out,
        vec![features.clone(), masks.clone()],
        Box::new(MaskedAvgPoolGrad { counts }),
    )
}

struct SoftmaxChannelsGrad {
    out: Data,
}

impl GradFn for SoftmaxChannelsGrad {
    fn backward(&self, grad: &Data, _parents: &[Tensor]) -> Vec<Option<Data>> {
        let y = &self.out;
        let shape = y.shape();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let mut dx = ArrayD::<f32>::zeros(y.raw_dim());
        for ni in 0..n {
            for yy in 0..h {
                for xx in 0..w {
                    let mut dot = 0.0f32;
                    for ci in 0..c {
                        dot += grad[[ni, ci, yy, xx]] * y[[ni, ci, yy, xx]];
                    }
                    for ci in 0..c {
                        dx[[ni, ci, yy, xx]] =
                            y[[ni, ci, yy, xx]] * (grad[[ni, ci, yy, xx]] - dot);
                    }
                }
            }
        }
        vec![Some(dx)]
    }
    fn name(&self) -> &'static str {
        "softmax_channels"
    }
}

/// Softmax across the channel axis at every spatial position, so the
/// channels form a convex combination per pixel.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let xd = x.data();
    let shape = xd.shape().to_vec();
    assert_eq!(shape.len(), 4, "softmax_channels: expected NCHW input");
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = ArrayD::<f32>::zeros(xd.raw_dim());
    for ni in 0..n {
        for yy in 0..h {
            for xx in 0..w {
                let mut mx = f32::NEG_INFINITY;
                for ci in 0..c {
                    mx = mx.max(xd[[ni, ci, yy, xx]]);
                }
                let mut denom = 0.0f32;
                for ci in 0..c {
                    let e = (xd[[ni, ci, yy, xx]] - mx).exp();
                    out[[ni, ci, yy, xx]] = e;
                    denom += e;
                }
                for ci in 0..c {
                    out[[ni, ci, yy, xx]] /= denom;
                }
            }
        }
    }
    Tensor::from_op(
        out.clone(),
        vec![x.clone()],
        Box::new(SoftmaxChannelsGrad { out }),
    )
}

struct SpectralScaleGrad {
    u: Array1<f32>,
    v: Array1<f32>,
    sigma: f32,
}

impl GradFn for SpectralScaleGrad {
    fn backward(&self, grad: &Data, parents: &[Tensor]) -> Vec<Option<Data>> {
        let w = parents[0].data();
        let rows = w.shape()[0];
        let cols = w.len() / rows;
        let g_mat = grad.view().into_shape_with_order((rows, cols)).unwrap();
        let w_mat = w.view().into_shape_with_order((rows, cols)).unwrap();
        // d(W/σ)/dW with σ = uᵀWv and u, v held fixed:
        //   G/σ − (Σ G ⊙ W/σ)/σ · u vᵀ
        let trace: f32 = g_mat
            .iter()
            .zip(w_mat.iter())
            .map(|(&g, &wv)| g * wv / self.sigma)
            .sum();
        let mut dw = Array2::<f32>::zeros((rows, cols));
        for r in 0..rows {
            for c in 0..cols {
                dw[[r, c]] =
                    g_mat[[r, c]] / self.sigma - trace / self.sigma * self.u[r] * self.v[c];
            }
        }
        let dw = dw.into_shape_with_order(w.raw_dim()).unwrap();
        vec![Some(dw)]
    }
    fn name(&self) -> &'static str {
        "spectral_scale"
    }
}

/// Divide a weight by its leading singular value estimated from the fixed
/// power-iteration vectors `u`, `v`: output `W / (uᵀ W v)`. The estimate
/// vectors are treated as constants, matching the usual training
/// approximation for spectrally normalized layers. The weight is viewed as
/// a matrix with its first axis as rows and everything else flattened.
pub fn spectral_scale(weight: &Tensor, u: &Array1<f32>, v: &Array1<f32>) -> Tensor {
    let wd = weight.data();
    let rows = wd.shape()[0];
    let cols = wd.len() / rows;
    assert_eq!(u.len(), rows, "spectral_scale: u length");
    assert_eq!(v.len(), cols, "spectral_scale: v length");
    let w_mat = wd.view().into_shape_with_order((rows, cols)).unwrap();
    let sigma = u.dot(&w_mat.dot(v)).max(1e-12);
    let out = &*wd / sigma;
    Tensor::from_op(
        out,
        vec![weight.clone()],
        Box::new(SpectralScaleGrad {
            u: u.clone(),
            v: v.clone(),
            sigma,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::testutil::{check_grad, probe, rand_data};
    use approx::assert_relative_eq;

    #[test]
    fn instance_norm_standardizes_planes() {
        let x = Tensor::constant(rand_data(&[2, 3, 4, 4], 80));
        let gamma = Tensor::constant(ArrayD::ones(IxDyn(&[3])));
        let beta = Tensor::constant(ArrayD::zeros(IxDyn(&[3])));
        let y = instance_norm(&x, &gamma, &beta);
        let yd = y.data();
        for n in 0..2 {
            for c in 0..3 {
                let mut mean = 0.0f32;
                let mut var = 0.0f32;
                for i in 0..4 {
                    for j in 0..4 {
                        mean += yd[[n, c, i, j]];
                    }
                }
                mean /= 16.0;
                for i in 0..4 {
                    for j in 0..4 {
                        var += (yd[[n, c, i, j]] - mean).powi(2);
                    }
                }
                var /= 16.0;
                assert_relative_eq!(mean, 0.0, epsilon = 1e-5);
                assert_relative_eq!(var, 1.0, epsilon = 1e-3);
            }
        }
    }

    #[test]
    fn instance_norm_grads() {
        let x = Tensor::parameter(rand_data(&[1, 2, 3, 3], 81));
        let gamma = Tensor::parameter(rand_data(&[2], 82));
        let beta = Tensor::parameter(rand_data(&[2], 83));
        check_grad(&x, |x| probe(&instance_norm(x, &gamma, &beta), 84), 1e-2, 3e-2);
        check_grad(&gamma, |g| probe(&instance_norm(&x, g, &beta), 84), 1e-2, 2e-2);
        check_grad(&beta, |b| probe(&instance_norm(&x, &gamma, b), 84), 1e-2, 2e-2);
    }

    #[test]
    fn linear_matches_manual() {
        let x = Tensor::parameter(rand_data(&[2, 3], 85));
        let w = Tensor::parameter(rand_data(&[4, 3], 86));
        let b = Tensor::parameter(rand_data(&[4], 87));
        let y = linear(&x, &w, &b);
        for n in 0..2 {
            for o in 0..4 {
                let mut acc = b.data()[[o]];
                for f in 0..3 {
                    acc += x.data()[[n, f]] * w.data()[[o, f]];
                }
                assert_relative_eq!(y.data()[[n, o]], acc, epsilon = 1e-5);
            }
        }
        check_grad(&x, |x| probe(&linear(x, &w, &b), 88), 1e-2, 2e-2);
        check_grad(&w, |w| probe(&linear(&x, w, &b), 88), 1e-2, 2e-2);
        check_grad(&b, |b| probe(&linear(&x, &w, b), 88), 1e-2, 2e-2);
    }

    #[test]
    fn masked_pool_matches_bruteforce() {
        let f = Tensor::parameter(rand_data(&[2, 5, 4, 4], 90));
        let mut m = ArrayD::<f32>::zeros(IxDyn(&[2, 3, 4, 4]));
        // Disjoint rectangles plus one empty mask (class 2 in sample 0).
        for y in 0..4 {
            for x in 0..4 {
                m[[0, usize::from(y >= 2), y, x]] = 1.0;
                m[[1, 2, y, x]] = 1.0;
            }
        }
        let masks = Tensor::constant(m.clone());
        let out = masked_avg_pool(&f, &masks);
        assert_eq!(out.shape(), vec![2, 3, 5]);
        for n in 0..2 {
            for i in 0..3 {
                for ch in 0..5 {
                    let mut s = 0.0f32;
                    let mut cnt = 0.0f32;
                    for y in 0..4 {
                        for x in 0..4 {
                            if m[[n, i, y, x]] > 0.0 {
                                s += f.data()[[n, ch, y, x]];
                                cnt += 1.0;
                            }
                        }
                    }
                    let want = if cnt > 0.0 { s / cnt } else { 0.0 };
                    assert_relative_eq!(out.data()[[n, i, ch]], want, epsilon = 1e-5);
                }
            }
        }
        check_grad(&f, |f| probe(&masked_avg_pool(f, &masks), 91), 1e-2, 2e-2);
    }

    #[test]
    fn softmax_channels_is_convex() {
        let x = Tensor::parameter(rand_data(&[1, 3, 2, 2], 92));
        let y = softmax_channels(&x);
        let yd = y.data();
        for i in 0..2 {
            for j in 0..2 {
                let s: f32 = (0..3).map(|c| yd[[0, c, i, j]]).sum();
                assert_relative_eq!(s, 1.0, epsilon = 1e-5);
                for c in 0..3 {
                    assert!(yd[[0, c, i, j]] >= 0.0 && yd[[0, c, i, j]] <= 1.0);
                }
            }
        }
        check_grad(&x, |x| probe(&softmax_channels(x), 93), 1e-2, 2e-2);
    }

    #[test]
    fn spectral_scale_divides_by_rayleigh_quotient() {
        let w = Tensor::parameter(rand_data(&[3, 2, 3, 3], 94));
        let mut u = Array1::<f32>::zeros(3);
        let mut v = Array1::<f32>::zeros(18);
        // Arbitrary fixed unit vectors.
        u[0] = 0.6;
        u[1] = 0.8;
        v[3] = 1.0;
        let y = spectral_scale(&w, &u, &v);
        let w_mat = w
            .data()
            .view()
            .into_shape_with_order((3, 18))
            .unwrap()
            .to_owned();
        let sigma = u.dot(&w_mat.dot(&v));
        for (a, b) in y.data().iter().zip(w.data().iter()) {
            assert_relative_eq!(*a, b / sigma, epsilon = 1e-5);
        }
        check_grad(&w, |w| probe(&spectral_scale(w, &u, &v), 95), 1e-2, 3e-2);
    }
}
