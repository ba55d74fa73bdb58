//! Elementwise ops, shape ops, and scalar losses.

use super::{Data, GradFn, Tensor};
use ndarray::{concatenate, ArrayD, Axis, IxDyn, Slice};

struct AddGrad;
impl GradFn for AddGrad {
    fn backward(&self, grad: &Data, _parents: &[Tensor]) -> Vec<Option<Data>> {
        vec![Some(grad.clone()), Some(grad.clone())]
    }
    fn name(&self) -> &'static str {
        "add"
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let data = &*a.data() + &*b.data();
    Tensor::from_op(data, vec![a.clone(), b.clone()], Box::new(AddGrad))
}

struct SubGrad;
impl GradFn for SubGrad {
    fn backward(&self, grad: &Data, _parents: &[Tensor]) -> Vec<Option<Data>> {
        vec![Some(grad.clone()), Some(-grad.clone())]
    }
    fn name(&self) -> &'static str {
        "sub"
    }
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    let data = &*a.data() - &*b.data();
    Tensor::from_op(data, vec![a.clone(), b.clone()], Box::new(SubGrad))
}

struct MulGrad;
impl GradFn for MulGrad {
    fn backward(&self, grad: &Data, parents: &[Tensor]) -> Vec<Option<Data>> {
        let da = grad * &*parents[1].data();
        let db = grad * &*parents[0].data();
        vec![Some(da), Some(db)]
    }
    fn name(&self) -> &'static str {
        "mul"
    }
}

/// Hadamard product of same-shape tensors.
pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
    let data = &*a.data() * &*b.data();
    Tensor::from_op(data, vec![a.clone(), b.clone()], Box::new(MulGrad))
}

struct ScaleGrad {
    k: f32,
}
impl GradFn for ScaleGrad {
    fn backward(&self, grad: &Data, _parents: &[Tensor]) -> Vec<Option<Data>> {
        vec![Some(grad * self.k)]
    }
    fn name(&self) -> &'static str {
        "scale"
    }
}

pub fn scale(a: &Tensor, k: f32) -> Tensor {
    let data = &*a.data() * k;
    Tensor::from_op(data, vec![a.clone()], Box::new(ScaleGrad { k }))
}

struct MulBroadcastGrad;
impl GradFn for MulBroadcastGrad {
    fn backward(&self, grad: &Data, parents: &[Tensor]) -> Vec<Option<Data>> {
        let x = parents[0].data();
        let m = parents[1].data();
        let dx = grad * &m.broadcast(grad.raw_dim()).unwrap();
        // dm sums the per-channel products back into the single channel.
        let mut dm = ArrayD::<f32>::zeros(m.raw_dim());
        let prod = grad * &*x;
        for lane in prod.axis_iter(Axis(1)) {
            let mut target = dm.index_axis_mut(Axis(1), 0);
            target += &lane;
        }
        vec![Some(dx), Some(dm)]
    }
    fn name(&self) -> &'static str {
        "mul_broadcast"
    }
}

/// Multiply `[N, C, H, W]` by a single-channel map `[N, 1, H, W]`,
/// broadcasting over channels. Used for mask filtering and weighted fusion.
pub fn mul_broadcast(x: &Tensor, m: &Tensor) -> Tensor {
    let xs = x.shape();
    let ms = m.shape();
    assert_eq!(xs.len(), 4, "mul_broadcast: expected NCHW input");
    assert_eq!(
        (ms[0], ms[1], ms[2], ms[3]),
        (xs[0], 1, xs[2], xs[3]),
        "mul_broadcast: map must be [N, 1, H, W] matching the input"
    );
    let data = &*x.data() * &m.data().broadcast(IxDyn(&xs)).unwrap();
    Tensor::from_op(data, vec![x.clone(), m.clone()], Box::new(MulBroadcastGrad))
}

struct ReluGrad;
impl GradFn for ReluGrad {
    fn backward(&self, grad: &Data, parents: &[Tensor]) -> Vec<Option<Data>> {
        let x = parents[0].data();
        let mut dx = grad.clone();
        dx.zip_mut_with(&x, |g, &v| {
            if v <= 0.0 {
                *g = 0.0;
            }
        });
        vec![Some(dx)]
    }
    fn name(&self) -> &'static str {
        "relu"
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().mapv(|v| v.max(0.0));
    Tensor::from_op(data, vec![x.clone()], Box::new(ReluGrad))
}

struct LeakyReluGrad {
    slope: f32,
}
impl GradFn for LeakyReluGrad {
    fn backward(&self, grad: &Data, parents: &[Tensor]) -> Vec<Option<Data>> {
        let x = parents[0].data();
        let mut dx = grad.clone();
        let slope = self.slope;
        dx.zip_mut_with(&x, |g, &v| {
            if v <= 0.0 {
                *g *= slope;
            }
        });
        vec![Some(dx)]
    }
    fn name(&self) -> &'static str {
        "leaky_relu"
    }
}

pub fn leaky_relu(x: &Tensor, slope: f32) -> Tensor {
    let data = x.data().mapv(|v| if v > 0.0 { v } else { slope * v });
    Tensor::from_op(data, vec![x.clone()], Box::new(LeakyReluGrad { slope }))
}

struct TanhGrad {
    out: Data,
}
impl GradFn for TanhGrad {
    fn backward(&self, grad: &Data, _parents: &[Tensor]) -> Vec<Option<Data>> {
        let mut dx = grad.clone();
        dx.zip_mut_with(&self.out, |g, &y| *g *= 1.0 - y * y);
        vec![Some(dx)]
    }
    fn name(&self) -> &'static str {
        "tanh"
    }
}

pub fn tanh(x: &Tensor) -> Tensor {
    let data = x.data().mapv(f32::tanh);
    Tensor::from_op(
        data.clone(),
        vec![x.clone()],
        Box::new(TanhGrad { out: data }),
    )
}

struct SumListGrad;
impl GradFn for SumListGrad {
    fn backward(&self, grad: &Data, parents: &[Tensor]) -> Vec<Option<Data>> {
        parents.iter().map(|_| Some(grad.clone())).collect()
    }
    fn name(&self) -> &'static str {
        "sum_list"
    }
}

/// Elementwise sum of equally shaped tensors.
pub fn sum_list(ts: &[Tensor]) -> Tensor {
    assert!(!ts.is_empty(), "sum_list: empty input");
    let shape = ts[0].shape();
    for t in ts {
        assert_eq!(t.shape(), shape, "sum_list: shape mismatch");
    }
    let mut data = ts[0].data().clone();
    for t in &ts[1..] {
        data += &*t.data();
    }
    Tensor::from_op(data, ts.to_vec(), Box::new(SumListGrad))
}

struct ReshapeGrad {
    from: Vec<usize>,
}
impl GradFn for ReshapeGrad {
    fn backward(&self, grad: &Data, _parents: &[Tensor]) -> Vec<Option<Data>> {
        let g = grad
            .to_owned()
            .into_shape_with_order(IxDyn(&self.from))
            .expect("reshape backward");
        vec![Some(g)]
    }
    fn name(&self) -> &'static str {
        "reshape"
    }
}

pub fn reshape(x: &Tensor, shape: &[usize]) -> Tensor {
    let from = x.shape();
    let data = x
        .data()
        .clone()
        .into_shape_with_order(IxDyn(shape))
        .unwrap_or_else(|_| panic!("reshape: cannot view {:?} as {:?}", from, shape));
    Tensor::from_op(data, vec![x.clone()], Box::new(ReshapeGrad { from }))
}

struct ConcatChannelsGrad {
    widths: Vec<usize>,
}
impl GradFn for ConcatChannelsGrad {
    fn backward(&self, grad: &Data, _parents: &[Tensor]) -> Vec<Option<Data>> {
        let mut out = Vec::with_capacity(self.widths.len());
        let mut start = 0;
        for &w in &self.widths {
            let piece = grad
                .slice_axis(Axis(1), Slice::from(start..start + w))
                .to_owned();
            out.push(Some(piece));
            start += w;
        }
        out
    }
    fn name(&self) -> &'static str {
        "concat_channels"
    }
}

/// Concatenate NCHW tensors along the channel axis.
pub fn concat_channels(ts: &[Tensor]) -> Tensor {
    assert!(!ts.is_empty(), "concat_channels: empty input");
    let datas: Vec<_> = ts.iter().map(|t| t.data().clone()).collect();
    let views: Vec<_> = datas.iter().map(|d| d.view()).collect();
    // `concatenate` does not promise standard layout, but downstream ops
    // (and checkpointing) rely on it, so normalize here.
    let data = concatenate(Axis(1), &views)
        .expect("concat_channels: incompatible shapes")
        .as_standard_layout()
        .into_owned();
    let widths = ts.iter().map(|t| t.shape()[1]).collect();
    Tensor::from_op(data, ts.to_vec(), Box::new(ConcatChannelsGrad { widths }))
}

struct SliceChannelsGrad {
    from: usize,
    full: Vec<usize>,
}
impl GradFn for SliceChannelsGrad {
    fn backward(&self, grad: &Data, _parents: &[Tensor]) -> Vec<Option<Data>> {
        let mut dx = ArrayD::<f32>::zeros(IxDyn(&self.full));
        let width = grad.shape()[1];
        dx.slice_axis_mut(Axis(1), Slice::from(self.from..self.from + width))
            .assign(grad);
        vec![Some(dx)]
    }
    fn name(&self) -> &'static str {
        "slice_channels"
    }
}

/// Channels `from..to` of an NCHW tensor.
pub fn slice_channels(x: &Tensor, from: usize, to: usize) -> Tensor {
    let full = x.shape();
    assert!(from < to && to <= full[1], "slice_channels: bad range");
    let data = x
        .data()
        .slice_axis(Axis(1), Slice::from(from..to))
        .to_owned();
    Tensor::from_op(
        data,
        vec![x.clone()],
        Box::new(SliceChannelsGrad { from, full }),
    )
}

struct L1LossGrad {
    weights: Option<Vec<f32>>,
}
impl GradFn for L1LossGrad {
    fn backward(&self, grad: &Data, parents: &[Tensor]) -> Vec<Option<Data>> {
        let g = grad.iter().next().copied().unwrap();
        let a = parents[0].data();
        let b = parents[1].data();
        let n = a.shape()[0];
        let per_sample = a.len() / n;
        let mut da = (&*a - &*b).mapv(|d| {
            if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        let scale = g / (n as f32 * per_sample as f32);
        match &self.weights {
            Some(w) => {
                for (i, mut lane) in da.axis_iter_mut(Axis(0)).enumerate() {
                    lane.mapv_inplace(|v| v * w[i] * scale);
                }
            }
            None => da.mapv_inplace(|v| v * scale),
        }
        let db = -da.clone();
        vec![Some(da), Some(db)]
    }
    fn name(&self) -> &'static str {
        "l1_loss"
    }
}

/// Mean absolute error over every element, with an optional per-sample
/// weight applied before the batch mean: `(1/N) Σ_n w_n · mean|a_n − b_n|`.
pub fn l1_loss(a: &Tensor, b: &Tensor, per_sample_weights: Option<&[f32]>) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "l1_loss: shape mismatch");
    let ad = a.data();
    let bd = b.data();
    let n = ad.shape()[0];
    let per_sample = ad.len() / n;
    if let Some(w) = per_sample_weights {
        assert_eq!(w.len(), n, "l1_loss: weight count != batch size");
    }
    let mut total = 0.0f32;
    for (i, (la, lb)) in ad
        .axis_iter(Axis(0))
        .zip(bd.axis_iter(Axis(0)))
        .enumerate()
    {
        let mut s = 0.0f32;
        ndarray::Zip::from(&la).and(&lb).for_each(|&x, &y| {
            s += (x - y).abs();
        });
        let w = per_sample_weights.map_or(1.0, |w| w[i]);
        total += w * s / per_sample as f32;
    }
    let value = total / n as f32;
    Tensor::from_op(
        ArrayD::from_elem(IxDyn(&[]), value),
        vec![a.clone(), b.clone()],
        Box::new(L1LossGrad {
            weights: per_sample_weights.map(|w| w.to_vec()),
        }),
    )
}

struct BceWithLogitsGrad {
    target: f32,
}
impl GradFn for BceWithLogitsGrad {
    fn backward(&self, grad: &Data, parents: &[Tensor]) -> Vec<Option<Data>> {
        let g = grad.iter().next().copied().unwrap();
        let z = parents[0].data();
        let n = z.len() as f32;
        let t = self.target;
        let dz = z.mapv(|v| (sigmoid(v) - t) * g / n);
        vec![Some(dz)]
    }
    fn name(&self) -> &'static str {
        "bce_with_logits"
    }
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

/// Mean binary cross-entropy of logits against a constant 0/1 target, in the
/// numerically stable `max(z,0) − z·t + ln(1+e^{−|z|})` form.
pub fn bce_with_logits_mean(logits: &Tensor, target: f32) -> Tensor {
    let z = logits.data();
    let n = z.len() as f32;
    let total: f32 = z
        .iter()
        .map(|&v| v.max(0.0) - v * target + (-v.abs()).exp().ln_1p())
        .sum();
    Tensor::from_op(
        ArrayD::from_elem(IxDyn(&[]), total / n),
        vec![logits.clone()],
        Box::new(BceWithLogitsGrad { target }),
    )
}

struct FilteredCeGrad {
    valid: Data, // [N, c]
}
impl GradFn for FilteredCeGrad {
    fn backward(&self, grad: &Data, parents: &[Tensor]) -> Vec<Option<Data>> {
        let g = grad.iter().next().copied().unwrap();
        let logits = parents[0].data();
        let (n, c) = (logits.shape()[0], logits.shape()[1]);
        let mut dl = ArrayD::<f32>::zeros(logits.raw_dim());
        for s in 0..n {
            for i in 0..c {
                let h = self.valid[[s, i]];
                if h == 0.0 {
                    continue; // exactly zero gradient for void branches
                }
                let row: Vec<f32> = (0..c).map(|k| logits[[s, i, k]]).collect();
                let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let denom: f32 = row.iter().map(|&v| (v - m).exp()).sum();
                for k in 0..c {
                    let p = (row[k] - m).exp() / denom;
                    let delta = if k == i { 1.0 } else { 0.0 };
                    dl[[s, i, k]] = h * (p - delta) * g / n as f32;
                }
            }
        }
        vec![Some(dl), None]
    }
    fn name(&self) -> &'static str {
        "filtered_cross_entropy"
    }
}

/// Cross-entropy over per-class branch logits `[N, c, c]` where branch `i`'s
/// ground-truth label is class `i`, filtered by the validity indicator
/// `[N, c]` (1 = class present) and averaged over the batch. Branches with
/// indicator 0 contribute neither loss nor gradient.
pub fn filtered_cross_entropy(logits: &Tensor, valid: &Tensor) -> Tensor {
    let l = logits.data();
    let v = valid.data();
    let shape = l.shape().to_vec();
    assert_eq!(shape.len(), 3, "filtered_cross_entropy: expected [N, c, c]");
    assert_eq!(shape[1], shape[2], "filtered_cross_entropy: logits not square");
    assert_eq!(v.shape(), &shape[..2], "filtered_cross_entropy: indicator shape");
    let (n, c) = (shape[0], shape[1]);
    let mut total = 0.0f32;
    for s in 0..n {
        for i in 0..c {
            let h = v[[s, i]];
            if h == 0.0 {
                continue;
            }
            let row: Vec<f32> = (0..c).map(|k| l[[s, i, k]]).collect();
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f32>().ln();
            total += h * (lse - row[i]);
        }
    }
    let value = total / n as f32;
    Tensor::from_op(
        ArrayD::from_elem(IxDyn(&[]), value),
        vec![logits.clone(), valid.clone()],
        Box::new(FilteredCeGrad {
            valid: v.to_owned(),
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::testutil::{check_grad, probe, rand_data, rand_data_off_zero};
    use approx::assert_relative_eq;
    use ndarray::IxDyn;

    #[test]
    fn add_mul_scale_grads() {
        let p = Tensor::parameter(rand_data(&[2, 3, 4, 4], 1));
        let k = Tensor::constant(rand_data(&[2, 3, 4, 4], 2));
        check_grad(
            &p,
            |p| probe(&add(&mul(p, &k), &scale(p, 0.5)), 3),
            1e-2,
            2e-2,
        );
    }

    #[test]
    fn broadcast_mul_matches_manual() {
        let x = Tensor::parameter(rand_data(&[1, 2, 2, 2], 4));
        let m = Tensor::constant(rand_data(&[1, 1, 2, 2], 5));
        let y = mul_broadcast(&x, &m);
        for c in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    assert_relative_eq!(
                        y.data()[[0, c, i, j]],
                        x.data()[[0, c, i, j]] * m.data()[[0, 0, i, j]]
                    );
                }
            }
        }
        check_grad(&x, |x| probe(&mul_broadcast(x, &m), 6), 1e-2, 2e-2);
        let m2 = Tensor::parameter(rand_data(&[1, 1, 2, 2], 7));
        let x2 = Tensor::constant(rand_data(&[1, 2, 2, 2], 8));
        check_grad(&m2, |m2| probe(&mul_broadcast(&x2, m2), 9), 1e-2, 2e-2);
    }

    #[test]
    fn activations_grads() {
        // Inputs bounded away from the relu kink so the central difference
        // never straddles it.
        let p = Tensor::parameter(rand_data_off_zero(&[2, 2, 3, 3], 10));
        check_grad(&p, |p| probe(&relu(p), 11), 1e-2, 2e-2);
        check_grad(&p, |p| probe(&leaky_relu(p, 0.2), 11), 1e-2, 2e-2);
        check_grad(&p, |p| probe(&tanh(p), 11), 1e-2, 2e-2);
    }

    #[test]
    fn concat_slice_roundtrip() {
        let a = Tensor::parameter(rand_data(&[1, 2, 2, 2], 12));
        let b = Tensor::constant(rand_data(&[1, 3, 2, 2], 13));
        let cat = concat_channels(&[a.clone(), b.clone()]);
        assert_eq!(cat.shape(), vec![1, 5, 2, 2]);
        let back = slice_channels(&cat, 0, 2);
        assert_eq!(&*back.data(), &*a.data());
        check_grad(
            &a,
            |a| probe(&concat_channels(&[a.clone(), b.clone()]), 14),
            1e-2,
            2e-2,
        );
        check_grad(&a, |a| probe(&slice_channels(a, 1, 2), 14), 1e-2, 2e-2);
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let z = Tensor::constant(ArrayD::zeros(IxDyn(&[1, 1, 4, 4])));
        let l = bce_with_logits_mean(&z, 1.0);
        assert_relative_eq!(l.item(), std::f32::consts::LN_2, epsilon = 1e-6);
        let l0 = bce_with_logits_mean(&z, 0.0);
        assert_relative_eq!(l0.item(), std::f32::consts::LN_2, epsilon = 1e-6);
    }

    #[test]
    fn bce_grad() {
        let p = Tensor::parameter(rand_data(&[1, 1, 3, 3], 15));
        check_grad(&p, |p| bce_with_logits_mean(p, 1.0), 1e-2, 2e-2);
        check_grad(&p, |p| bce_with_logits_mean(p, 0.0), 1e-2, 2e-2);
    }

    #[test]
    fn uniform_logits_ce_is_ln_c() {
        // One valid branch, uniform logits over c=4 classes.
        let logits = Tensor::constant(ArrayD::zeros(IxDyn(&[1, 4, 4])));
        let mut h = ArrayD::zeros(IxDyn(&[1, 4]));
        h[[0, 1]] = 1.0;
        let l = filtered_cross_entropy(&logits, &Tensor::constant(h));
        assert_relative_eq!(l.item(), 4.0f32.ln(), epsilon = 1e-6);
    }

    #[test]
    fn all_void_ce_is_zero() {
        let logits = Tensor::parameter(rand_data(&[2, 3, 3], 16));
        let h = Tensor::constant(ArrayD::zeros(IxDyn(&[2, 3])));
        let l = filtered_cross_entropy(&logits, &h);
        assert_eq!(l.item(), 0.0);
        logits.zero_grad();
        l.backward();
        // Requires grad but every branch filtered: gradient is exactly zero.
        let g = logits.grad().unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn filtered_ce_grad() {
        let p = Tensor::parameter(rand_data(&[2, 3, 3], 17));
        let mut h = ArrayD::zeros(IxDyn(&[2, 3]));
        h[[0, 0]] = 1.0;
        h[[0, 2]] = 1.0;
        h[[1, 1]] = 1.0;
        let h = Tensor::constant(h);
        check_grad(&p, |p| filtered_cross_entropy(p, &h), 1e-2, 2e-2);
    }

    #[test]
    fn weighted_l1_masks_samples() {
        let a = Tensor::parameter(rand_data(&[3, 2, 2, 2], 18));
        let b = Tensor::constant(rand_data(&[3, 2, 2, 2], 19));
        let w = [1.0, 0.0, 2.0];
        let l = l1_loss(&a, &b, Some(&w));
        // Manual evaluation.
        let mut expect = 0.0f32;
        for n in 0..3 {
            let mut s = 0.0;
            for c in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        s += (a.data()[[n, c, i, j]] - b.data()[[n, c, i, j]]).abs();
                    }
                }
            }
            expect += w[n] * s / 8.0;
        }
        expect /= 3.0;
        assert_relative_eq!(l.item(), expect, epsilon = 1e-6);
        a.zero_grad();
        l.backward();
        let g = a.grad().unwrap();
        // Weight-0 sample gets exactly zero gradient.
        assert!(g.index_axis(Axis(0), 1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn l1_grad() {
        // Differences bounded away from zero keep |·| differentiable at
        // every probed point.
        let a = Tensor::parameter(rand_data_off_zero(&[2, 2, 2, 2], 25));
        let b = Tensor::constant(ArrayD::zeros(IxDyn(&[2, 2, 2, 2])));
        check_grad(&a, |a| l1_loss(a, &b, None), 1e-2, 2e-2);
        check_grad(&a, |a| l1_loss(a, &b, Some(&[0.5, 2.0])), 1e-2, 2e-2);
    }

    #[test]
    fn sum_list_matches_bruteforce() {
        let ts: Vec<Tensor> = (0..4)
            .map(|i| Tensor::parameter(rand_data(&[1, 3, 2, 2], 20 + i)))
            .collect();
        let s = sum_list(&ts);
        let mut expect = ts[0].data().clone();
        for t in &ts[1..] {
            expect += &*t.data();
        }
        assert_eq!(&*s.data(), &expect);
    }
}
