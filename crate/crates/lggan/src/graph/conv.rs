//! 2-D convolution and transposed convolution.
//!
//! Both directions lower to a single sgemm per sample via im2col/col2im.
//! The two rearrangements are adjoint as linear maps, which is what makes
//! the backward passes below correct: the gradient of a gather is a
//! scatter-add and vice versa.

use super::{Data, GradFn, Tensor};
use ndarray::{Array2, Array3, ArrayD, ArrayView2, ArrayView3, Axis, Ix3, IxDyn};

/// Number of kernel placements along one axis.
fn grid(extent: usize, k: usize, s: usize, p: usize) -> usize {
    (extent + 2 * p - k) / s + 1
}

/// Grid positions whose tap `g·s + k_off − p` stays inside `[0, extent)`,
/// as an inclusive range (empty ranges come out with lo > hi).
fn valid_grid_range(g: usize, extent: usize, k_off: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if k_off >= p { 0 } else { (p - k_off).div_ceil(s) };
    let hi_raw = extent as isize - 1 + p as isize - k_off as isize;
    if hi_raw < 0 {
        return (1, 0);
    }
    (lo, (hi_raw as usize / s).min(g.saturating_sub(1)))
}

/// Gather kernel windows of `im` `[C, H, W]` into columns `[C·k·k, GH·GW]`.
/// Out-of-bounds taps (from padding) read as zero. Everything is flat slice
/// arithmetic: this runs once per convolution per sample and dominates the
/// non-gemm cost of a training step.
fn im2col(im: &ArrayView3<f32>, k: usize, s: usize, p: usize) -> Array2<f32> {
    let (c, h, w) = im.dim();
    let (gh, gw) = (grid(h, k, s, p), grid(w, k, s, p));
    let mut cols = Array2::<f32>::zeros((c * k * k, gh * gw));
    let src = im.to_slice().expect("contiguous image");
    let dst = cols.as_slice_mut().unwrap();
    let ncols = gh * gw;
    for ci in 0..c {
        for ki in 0..k {
            let (gy_lo, gy_hi) = valid_grid_range(gh, h, ki, s, p);
            for kj in 0..k {
                let (gx_lo, gx_hi) = valid_grid_range(gw, w, kj, s, p);
                if gx_lo > gx_hi {
                    continue;
                }
                let row_base = ((ci * k + ki) * k + kj) * ncols;
                for gy in gy_lo..=gy_hi {
                    let y = gy * s + ki - p;
                    let src_row = (ci * h + y) * w;
                    let dst_row = row_base + gy * gw;
                    if s == 1 {
                        let x0 = gx_lo + kj - p;
                        let len = gx_hi + 1 - gx_lo;
                        dst[dst_row + gx_lo..dst_row + gx_lo + len]
                            .copy_from_slice(&src[src_row + x0..src_row + x0 + len]);
                    } else {
                        for gx in gx_lo..=gx_hi {
                            dst[dst_row + gx] = src[src_row + gx * s + kj - p];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image
/// `[C, H, W]`, with the kernel grid `(gh, gw)` given explicitly.
fn col2im(
    cols: &ArrayView2<f32>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    gh: usize,
    gw: usize,
) -> Array3<f32> {
    let mut im = Array3::<f32>::zeros((c, h, w));
    let src = cols.to_slice().expect("contiguous columns");
    let dst = im.as_slice_mut().unwrap();
    let ncols = gh * gw;
    for ci in 0..c {
        for ki in 0..k {
            let (gy_lo, gy_hi) = valid_grid_range(gh, h, ki, s, p);
            for kj in 0..k {
                let (gx_lo, gx_hi) = valid_grid_range(gw, w, kj, s, p);
                if gx_lo > gx_hi {
                    continue;
                }
                let row_base = ((ci * k + ki) * k + kj) * ncols;
                for gy in gy_lo..=gy_hi {
                    let y = gy * s + ki - p;
                    let dst_row = (ci * h + y) * w;
                    let src_row = row_base + gy * gw;
                    for gx in gx_lo..=gx_hi {
                        dst[dst_row + gx * s + kj - p] += src[src_row + gx];
                    }
                }
            }
        }
    }
    im
}

fn sample(x: &Data, n: usize) -> ArrayView3<'_, f32> {
    x.index_axis(Axis(0), n).into_dimensionality::<Ix3>().unwrap()
}

struct Conv2dGrad {
    stride: usize,
    padding: usize,
}

impl GradFn for Conv2dGrad {
    fn backward(&self, grad: &Data, parents: &[Tensor]) -> Vec<Option<Data>> {
        let (s, p) = (self.stride, self.padding);
        let x = parents[0].data();
        let wd = parents[1].data();
        let (n, ic, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oc, k) = (wd.shape()[0], wd.shape()[2]);
        let (gh, gw) = (grid(h, k, s, p), grid(w, k, s, p));
        let w_mat = wd
            .view()
            .into_shape_with_order((oc, ic * k * k))
            .unwrap();

        let mut dx = ArrayD::<f32>::zeros(x.raw_dim());
        let mut dw_mat = Array2::<f32>::zeros((oc, ic * k * k));
        let mut db = ndarray::Array1::<f32>::zeros(oc);
        for i in 0..n {
            let g_mat = sample(grad, i)
                .into_shape_with_order((oc, gh * gw))
                .unwrap();
            // Columns are cheap to rebuild relative to the gemms they feed.
            let cols = im2col(&sample(&x, i), k, s, p);
            dw_mat += &g_mat.dot(&cols.t());
            let dcols = w_mat.t().dot(&g_mat);
            let dxi = col2im(&dcols.view(), ic, h, w, k, s, p, gh, gw);
            dx.index_axis_mut(Axis(0), i).assign(&dxi);
            for o in 0..oc {
                db[o] += g_mat.row(o).sum();
            }
        }
        let dw = dw_mat.into_shape_with_order(IxDyn(&[oc, ic, k, k])).unwrap();
        vec![Some(dx), Some(dw), Some(db.into_dyn())]
    }
    fn name(&self) -> &'static str {
        "conv2d"
    }
}

/// Strided 2-D convolution. `x` is `[N, IC, H, W]`, `weight` is
/// `[OC, IC, k, k]`, `bias` is `[OC]`; output is `[N, OC, GH, GW]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Tensor {
    let xd = x.data();
    let wd = weight.data();
    let xs = xd.shape();
    let ws = wd.shape();
    assert_eq!(xs.len(), 4, "conv2d: expected NCHW input");
    assert_eq!(ws.len(), 4, "conv2d: expected OIkk weight");
    assert_eq!(ws[2], ws[3], "conv2d: kernel must be square");
    assert_eq!(xs[1], ws[1], "conv2d: channel mismatch");
    assert_eq!(bias.shape(), vec![ws[0]], "conv2d: bias shape");
    let (n, ic, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (oc, k) = (ws[0], ws[2]);
    assert!(
        h + 2 * padding >= k && w + 2 * padding >= k,
        "conv2d: kernel larger than padded input"
    );
    let (gh, gw) = (grid(h, k, stride, padding), grid(w, k, stride, padding));
    let w_mat = wd.view().into_shape_with_order((oc, ic * k * k)).unwrap();
    let bd = bias.data();

    let mut out = ArrayD::<f32>::zeros(IxDyn(&[n, oc, gh, gw]));
    for i in 0..n {
        let cols = im2col(&sample(&xd, i), k, stride, padding);
        let mut o_mat = w_mat.dot(&cols);
        for (r, mut row) in o_mat.rows_mut().into_iter().enumerate() {
            row += bd[[r]];
        }
        out.index_axis_mut(Axis(0), i).assign(
            &o_mat
                .into_shape_with_order((oc, gh, gw))
                .unwrap(),
        );
    }
    Tensor::from_op(
        out,
        vec![x.clone(), weight.clone(), bias.clone()],
        Box::new(Conv2dGrad { stride, padding }),
    )
}

struct ConvTranspose2dGrad {
    stride: usize,
    padding: usize,
}

impl GradFn for ConvTranspose2dGrad {
    fn backward(&self, grad: &Data, parents: &[Tensor]) -> Vec<Option<Data>> {
        let (s, p) = (self.stride, self.padding);
        let x = parents[0].data();
        let wd = parents[1].data();
        let (n, ic, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oc, k) = (wd.shape()[1], wd.shape()[2]);
        let w_mat = wd.view().into_shape_with_order((ic, oc * k * k)).unwrap();

        let mut dx = ArrayD::<f32>::zeros(x.raw_dim());
        let mut dw_mat = Array2::<f32>::zeros((ic, oc * k * k));
        let mut db = ndarray::Array1::<f32>::zeros(oc);
        for i in 0..n {
            let gi = sample(grad, i);
            // The forward scattered columns out; the gradient gathers them
            // back. The kernel grid over the output is exactly H×W again.
            let dcols = im2col(&gi, k, s, p);
            let x_mat = sample(&x, i).into_shape_with_order((ic, h * w)).unwrap();
            dx.index_axis_mut(Axis(0), i).assign(
                &w_mat
                    .dot(&dcols)
                    .into_shape_with_order((ic, h, w))
                    .unwrap(),
            );
            dw_mat += &x_mat.dot(&dcols.t());
            for o in 0..oc {
                db[o] += gi.index_axis(Axis(0), o).sum();
            }
        }
        let dw = dw_mat.into_shape_with_order(IxDyn(&[ic, oc, k, k])).unwrap();
        vec![Some(dx), Some(dw), Some(db.into_dyn())]
    }
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }
}

/// Strided transposed convolution (fractional upsampling). `x` is
/// `[N, IC, H, W]`, `weight` is `[IC, OC, k, k]`, `bias` is `[OC]`; output
/// is `[N, OC, (H−1)·s − 2p + k + op, …]` with `op = output_padding < s`.
pub fn conv_transpose2d(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Tensor {
    let xd = x.data();
    let wd = weight.data();
    let xs = xd.shape();
    let ws = wd.shape();
    assert_eq!(xs.len(), 4, "conv_transpose2d: expected NCHW input");
    assert_eq!(ws.len(), 4, "conv_transpose2d: expected IOkk weight");
    assert_eq!(ws[2], ws[3], "conv_transpose2d: kernel must be square");
    assert_eq!(xs[1], ws[0], "conv_transpose2d: channel mismatch");
    assert!(
        output_padding < stride,
        "conv_transpose2d: output_padding must be < stride"
    );
    let (n, ic, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (oc, k) = (ws[1], ws[2]);
    assert_eq!(bias.shape(), vec![oc], "conv_transpose2d: bias shape");
    let oh = (h - 1) * stride + k + output_padding - 2 * padding;
    let ow = (w - 1) * stride + k + output_padding - 2 * padding;
    let w_mat = wd.view().into_shape_with_order((ic, oc * k * k)).unwrap();
    let bd = bias.data();

    let mut out = ArrayD::<f32>::zeros(IxDyn(&[n, oc, oh, ow]));
    for i in 0..n {
        let x_mat = sample(&xd, i).into_shape_with_order((ic, h * w)).unwrap();
        let cols = w_mat.t().dot(&x_mat);
        let mut oi = col2im(&cols.view(), oc, oh, ow, k, stride, padding, h, w);
        for (o, mut plane) in oi.axis_iter_mut(Axis(0)).enumerate() {
            plane += bd[[o]];
        }
        out.index_axis_mut(Axis(0), i).assign(&oi);
    }
    Tensor::from_op(
        out,
        vec![x.clone(), weight.clone(), bias.clone()],
        Box::new(ConvTranspose2dGrad { stride, padding }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::testutil::{check_grad, probe, rand_data};
    use approx::assert_relative_eq;

    fn conv2d_bruteforce(
        x: &Data,
        w: &Data,
        b: &Data,
        s: usize,
        p: usize,
    ) -> ArrayD<f32> {
        let (n, ic, h, wx) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oc, k) = (w.shape()[0], w.shape()[2]);
        let (gh, gw) = (grid(h, k, s, p), grid(wx, k, s, p));
        let mut out = ArrayD::<f32>::zeros(IxDyn(&[n, oc, gh, gw]));
        for ni in 0..n {
            for o in 0..oc {
                for gy in 0..gh {
                    for gx in 0..gw {
                        let mut acc = b[[o]];
                        for c in 0..ic {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let y = (gy * s + ki) as isize - p as isize;
                                    let xx = (gx * s + kj) as isize - p as isize;
                                    if y < 0 || y as usize >= h || xx < 0 || xx as usize >= wx {
                                        continue;
                                    }
                                    acc += x[[ni, c, y as usize, xx as usize]]
                                        * w[[o, c, ki, kj]];
                                }
                            }
                        }
                        out[[ni, o, gy, gx]] = acc;
                    }
                }
            }
        }
        out
    }

    fn conv_transpose2d_bruteforce(
        x: &Data,
        w: &Data,
        b: &Data,
        s: usize,
        p: usize,
        op: usize,
    ) -> ArrayD<f32> {
        let (n, ic, h, wx) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oc, k) = (w.shape()[1], w.shape()[2]);
        let oh = (h - 1) * s + k + op - 2 * p;
        let ow = (wx - 1) * s + k + op - 2 * p;
        let mut out = ArrayD::<f32>::zeros(IxDyn(&[n, oc, oh, ow]));
        for ni in 0..n {
            for o in 0..oc {
                for y in 0..oh {
                    for xx in 0..ow {
                        out[[ni, o, y, xx]] = b[[o]];
                    }
                }
            }
            for c in 0..ic {
                for iy in 0..h {
                    for ix in 0..wx {
                        for o in 0..oc {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let y = (iy * s + ki) as isize - p as isize;
                                    let xx = (ix * s + kj) as isize - p as isize;
                                    if y < 0 || y as usize >= oh || xx < 0 || xx as usize >= ow {
                                        continue;
                                    }
                                    out[[ni, o, y as usize, xx as usize]] +=
                                        x[[ni, c, iy, ix]] * w[[c, o, ki, kj]];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_bruteforce() {
        for &(k, s, p) in &[(3usize, 1usize, 1usize), (3, 2, 1), (4, 2, 1), (1, 1, 0)] {
            let x = rand_data(&[2, 3, 6, 6], 30 + k as u64);
            let w = rand_data(&[4, 3, k, k], 31 + s as u64);
            let b = rand_data(&[4], 32 + p as u64);
            let got = conv2d(
                &Tensor::constant(x.clone()),
                &Tensor::constant(w.clone()),
                &Tensor::constant(b.clone()),
                s,
                p,
            );
            let want = conv2d_bruteforce(&x, &w, &b, s, p);
            assert_eq!(got.shape(), want.shape().to_vec());
            for (a, e) in got.data().iter().zip(want.iter()) {
                assert_relative_eq!(a, e, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn conv_transpose2d_matches_bruteforce() {
        for &(k, s, p, op) in &[(3usize, 2usize, 1usize, 1usize), (3, 1, 1, 0), (4, 2, 1, 0)] {
            let x = rand_data(&[2, 3, 4, 4], 40 + k as u64);
            let w = rand_data(&[3, 2, k, k], 41 + s as u64);
            let b = rand_data(&[2], 42);
            let got = conv_transpose2d(
                &Tensor::constant(x.clone()),
                &Tensor::constant(w.clone()),
                &Tensor::constant(b.clone()),
                s,
                p,
                op,
            );
            let want = conv_transpose2d_bruteforce(&x, &w, &b, s, p, op);
            assert_eq!(got.shape(), want.shape().to_vec());
            for (a, e) in got.data().iter().zip(want.iter()) {
                assert_relative_eq!(a, e, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn transpose_conv_doubles_spatial_size() {
        // stride 2, kernel 3, padding 1, output padding 1: 4×4 → 8×8.
        let x = Tensor::constant(rand_data(&[1, 2, 4, 4], 50));
        let w = Tensor::constant(rand_data(&[2, 5, 3, 3], 51));
        let b = Tensor::constant(rand_data(&[5], 52));
        let y = conv_transpose2d(&x, &w, &b, 2, 1, 1);
        assert_eq!(y.shape(), vec![1, 5, 8, 8]);
    }

    #[test]
    fn conv2d_grads() {
        let x = Tensor::parameter(rand_data(&[1, 2, 5, 5], 60));
        let w = Tensor::parameter(rand_data(&[3, 2, 3, 3], 61));
        let b = Tensor::parameter(rand_data(&[3], 62));
        check_grad(&x, |x| probe(&conv2d(x, &w, &b, 2, 1), 63), 1e-2, 2e-2);
        check_grad(&w, |w| probe(&conv2d(&x, w, &b, 2, 1), 63), 1e-2, 2e-2);
        check_grad(&b, |b| probe(&conv2d(&x, &w, b, 2, 1), 63), 1e-2, 2e-2);
    }

    #[test]
    fn conv_transpose2d_grads() {
        let x = Tensor::parameter(rand_data(&[1, 3, 3, 3], 70));
        let w = Tensor::parameter(rand_data(&[3, 2, 3, 3], 71));
        let b = Tensor::parameter(rand_data(&[2], 72));
        let f = |x: &Tensor, w: &Tensor, b: &Tensor| {
            probe(&conv_transpose2d(x, w, b, 2, 1, 1), 73)
        };
        check_grad(&x, |x| f(x, &w, &b), 1e-2, 2e-2);
        check_grad(&w, |w| f(&x, w, &b), 1e-2, 2e-2);
        check_grad(&b, |b| f(&x, &w, b), 1e-2, 2e-2);
    }
}
