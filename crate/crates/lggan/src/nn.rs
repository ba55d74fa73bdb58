//! Layers, weight initialization, and the optimizer.
//!
//! Layers own their parameters as graph tensors and expose them through
//! [`Module`], which walks the tree and assigns stable dotted names — the
//! names double as checkpoint keys and optimizer state keys. The
//! power-iteration vectors of spectrally normalized layers are non-trainable
//! tensors reported as buffers so they persist across checkpoints, keeping
//! resumed runs bit-identical to uninterrupted ones.

use crate::graph::{
    add, conv2d, conv_transpose2d, instance_norm, linear, relu, spectral_scale, Data, Tensor,
};
use ndarray::{Array1, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Walks a layer tree collecting named tensors.
pub trait Module {
    /// Trainable tensors, with stable dotted names under `prefix`.
    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>);
    /// Non-trainable state tensors (power-iteration estimates).
    fn buffers(&self, _prefix: &str, _out: &mut Vec<(String, Tensor)>) {}
}

/// Convenience: collect all parameters of a module.
pub fn collect_params(m: &dyn Module, prefix: &str) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.params(prefix, &mut out);
    out
}

/// Convenience: collect all buffers of a module.
pub fn collect_buffers(m: &dyn Module, prefix: &str) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.buffers(prefix, &mut out);
    out
}

/// Zero-mean Gaussian weights with the given standard deviation.
pub fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], mean: f32, std: f32) -> Data {
    let dist = Normal::new(mean, std).expect("finite std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

fn l2_normalized(x: Array1<f32>) -> Array1<f32> {
    let norm = x.dot(&x).sqrt().max(1e-12);
    x / norm
}

fn unit_vector(rng: &mut ChaCha8Rng, len: usize) -> Array1<f32> {
    let dist = Normal::new(0.0f32, 1.0).unwrap();
    l2_normalized(Array1::from_shape_fn(len, |_| dist.sample(rng)))
}

/// One power-iteration update of the leading singular vector estimates of
/// `w` viewed as `[rows, cols]`: `v ← normalize(Wᵀu)`, `u ← normalize(Wv)`.
fn power_iterate(w: &Data, u: &mut Array1<f32>, v: &mut Array1<f32>) {
    let rows = w.shape()[0];
    let cols = w.len() / rows;
    let w_mat = w.view().into_shape_with_order((rows, cols)).unwrap();
    *v = l2_normalized(w_mat.t().dot(u));
    *u = l2_normalized(w_mat.dot(v));
}

/// Shared state and behavior of the spectral reparameterization, used by
/// both convolution directions.
struct SpectralState {
    u: Tensor,
    v: Tensor,
}

impl SpectralState {
    /// How many power iterations to run at construction. A freshly drawn
    /// `u, v` pair gives a near-arbitrary `uᵀWv` — possibly close to zero,
    /// which would blow the scaled weight up on a forward pass that happens
    /// before any training step. A short warm-up converges the pair onto
    /// the leading singular direction of the initial weight.
    const WARMUP_ITERATIONS: usize = 8;

    fn new(rng: &mut ChaCha8Rng, weight: &Data) -> Self {
        let rows = weight.shape()[0];
        let cols = weight.len() / rows;
        let mut u = unit_vector(rng, rows);
        let mut v = unit_vector(rng, cols);
        for _ in 0..Self::WARMUP_ITERATIONS {
            power_iterate(weight, &mut u, &mut v);
        }
        SpectralState {
            u: Tensor::constant(u.into_dyn()),
            v: Tensor::constant(v.into_dyn()),
        }
    }

    /// Scaled weight `W/σ`. In training mode the singular vector estimates
    /// are refreshed by one power iteration first.
    fn scaled(&self, weight: &Tensor, train: bool) -> Tensor {
        let mut u = Array1::from_iter(self.u.data().iter().copied());
        let mut v = Array1::from_iter(self.v.data().iter().copied());
        if train {
            power_iterate(&weight.data(), &mut u, &mut v);
            self.u.set_data(u.clone().into_dyn());
            self.v.set_data(v.clone().into_dyn());
        }
        spectral_scale(weight, &u, &v)
    }
}

/// Strided convolution, optionally spectrally normalized.
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    spectral: Option<SpectralState>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        spectral: bool,
    ) -> Self {
        let weight = Tensor::parameter(normal_init(rng, &[out_ch, in_ch, kernel, kernel], 0.0, 0.02));
        let bias = Tensor::parameter(ArrayD::zeros(IxDyn(&[out_ch])));
        let spectral = spectral.then(|| SpectralState::new(rng, &weight.data()));
        Conv2d { weight, bias, spectral, stride, padding }
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        let w = match &self.spectral {
            Some(s) => s.scaled(&self.weight, train),
            None => self.weight.clone(),
        };
        conv2d(x, &w, &self.bias, self.stride, self.padding)
    }
}

impl Module for Conv2d {
    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
    fn buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        if let Some(s) = &self.spectral {
            out.push((format!("{prefix}.u"), s.u.clone()));
            out.push((format!("{prefix}.v"), s.v.clone()));
        }
    }
}

/// Strided transposed convolution, optionally spectrally normalized.
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
    spectral: Option<SpectralState>,
    stride: usize,
    padding: usize,
    output_padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        spectral: bool,
    ) -> Self {
        let weight = Tensor::parameter(normal_init(rng, &[in_ch, out_ch, kernel, kernel], 0.0, 0.02));
        let bias = Tensor::parameter(ArrayD::zeros(IxDyn(&[out_ch])));
        let spectral = spectral.then(|| SpectralState::new(rng, &weight.data()));
        ConvTranspose2d { weight, bias, spectral, stride, padding, output_padding }
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        let w = match &self.spectral {
            Some(s) => s.scaled(&self.weight, train),
            None => self.weight.clone(),
        };
        conv_transpose2d(x, &w, &self.bias, self.stride, self.padding, self.output_padding)
    }
}

impl Module for ConvTranspose2d {
    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
    fn buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        if let Some(s) = &self.spectral {
            out.push((format!("{prefix}.u"), s.u.clone()));
            out.push((format!("{prefix}.v"), s.v.clone()));
        }
    }
}

/// Per-channel affine instance normalization.
pub struct InstanceNorm2d {
    gamma: Tensor,
    beta: Tensor,
}

impl InstanceNorm2d {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        InstanceNorm2d {
            gamma: Tensor::parameter(normal_init(rng, &[channels], 1.0, 0.02)),
            beta: Tensor::parameter(ArrayD::zeros(IxDyn(&[channels]))),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        instance_norm(x, &self.gamma, &self.beta)
    }
}

impl Module for InstanceNorm2d {
    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

/// Fully connected layer.
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, in_features: usize, out_features: usize) -> Self {
        Linear {
            weight: Tensor::parameter(normal_init(rng, &[out_features, in_features], 0.0, 0.02)),
            bias: Tensor::parameter(ArrayD::zeros(IxDyn(&[out_features]))),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        linear(x, &self.weight, &self.bias)
    }
}

impl Module for Linear {
    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Residual block: two 3×3 convolutions with instance norm, relu between,
/// and an identity skip. Keeps channel count and spatial size.
pub struct ResBlock {
    conv1: Conv2d,
    norm1: InstanceNorm2d,
    conv2: Conv2d,
    norm2: InstanceNorm2d,
}

impl ResBlock {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize, spectral: bool) -> Self {
        ResBlock {
            conv1: Conv2d::new(rng, channels, channels, 3, 1, 1, spectral),
            norm1: InstanceNorm2d::new(rng, channels),
            conv2: Conv2d::new(rng, channels, channels, 3, 1, 1, spectral),
            norm2: InstanceNorm2d::new(rng, channels),
        }
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        let h = relu(&self.norm1.forward(&self.conv1.forward(x, train)));
        let h = self.norm2.forward(&self.conv2.forward(&h, train));
        add(x, &h)
    }
}

impl Module for ResBlock {
    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv1.params(&format!("{prefix}.conv1"), out);
        self.norm1.params(&format!("{prefix}.norm1"), out);
        self.conv2.params(&format!("{prefix}.conv2"), out);
        self.norm2.params(&format!("{prefix}.norm2"), out);
    }
    fn buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv1.buffers(&format!("{prefix}.conv1"), out);
        self.conv2.buffers(&format!("{prefix}.conv2"), out);
    }
}

const ADAM_EPS: f32 = 1e-8;

/// Adam with per-parameter moment estimates, stepping every parameter it
/// was built over. Moment vectors are part of checkpoint state.
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    t: u64,
    params: Vec<(String, Tensor)>,
    m: Vec<Data>,
    v: Vec<Data>,
}

impl Adam {
    pub fn new(params: Vec<(String, Tensor)>, lr: f32, beta1: f32, beta2: f32) -> Self {
        let m = params
            .iter()
            .map(|(_, p)| ArrayD::zeros(IxDyn(&p.shape())))
            .collect();
        let v = params
            .iter()
            .map(|(_, p)| ArrayD::zeros(IxDyn(&p.shape())))
            .collect();
        Adam { lr, beta1, beta2, t: 0, params, m, v }
    }

    pub fn zero_grad(&self) {
        for (_, p) in &self.params {
            p.zero_grad();
        }
    }

    /// Apply one update from the gradients currently stored on the
    /// parameters. Parameters that received no gradient are left alone.
    pub fn step(&mut self) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, p)) in self.params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(&g).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(&g).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            let mut data = p.data().clone();
            ndarray::Zip::from(&mut data)
                .and(&*m)
                .and(&*v)
                .for_each(|x, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *x -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
                });
            p.set_data(data);
        }
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    /// Step counter and moment vectors, in parameter order.
    pub fn state(&self) -> (u64, &[Data], &[Data]) {
        (self.t, &self.m, &self.v)
    }

    pub fn load_state(&mut self, t: u64, m: Vec<Data>, v: Vec<Data>) {
        assert_eq!(m.len(), self.params.len(), "optimizer state length");
        assert_eq!(v.len(), self.params.len(), "optimizer state length");
        for (i, (name, p)) in self.params.iter().enumerate() {
            assert_eq!(
                m[i].shape(),
                p.data().shape(),
                "optimizer state shape for {name}"
            );
            assert_eq!(v[i].shape(), p.data().shape(), "optimizer state shape for {name}");
        }
        self.t = t;
        self.m = m;
        self.v = v;
    }
}
