//! Pixel-wise fusion of the global and local images. A small decoder
//! predicts a two-channel weight map from the shared features; a softmax
//! across the two channels guarantees the weights are positive and sum to
//! one at every pixel, so the fused image is a per-pixel convex blend.

use crate::graph::{add, mul_broadcast, relu, slice_channels, softmax_channels, Tensor};
use crate::nn::{Conv2d, ConvTranspose2d, InstanceNorm2d, Module};
use rand_chacha::ChaCha8Rng;

/// Two ×2 transpose-convolution stages (4nf → 128 → 64) and a 1×1
/// projection to two channels. The inner widths are fixed regardless of
/// `nf`.
pub struct WeightMapGenerator {
    up1: ConvTranspose2d,
    up1_norm: InstanceNorm2d,
    up2: ConvTranspose2d,
    up2_norm: InstanceNorm2d,
    project: Conv2d,
    project_norm: InstanceNorm2d,
}

impl WeightMapGenerator {
    pub fn new(rng: &mut ChaCha8Rng, nf: usize) -> Self {
        WeightMapGenerator {
            up1: ConvTranspose2d::new(rng, 4 * nf, 128, 3, 2, 1, 1, true),
            up1_norm: InstanceNorm2d::new(rng, 128),
            up2: ConvTranspose2d::new(rng, 128, 64, 3, 2, 1, 1, true),
            up2_norm: InstanceNorm2d::new(rng, 64),
            project: Conv2d::new(rng, 64, 2, 1, 1, 0, true),
            project_norm: InstanceNorm2d::new(rng, 2),
        }
    }

    /// Predict the global and local weight maps, each `[N, 1, H, W]`, from
    /// `[N, 4·nf, H/4, W/4]` shared features.
    pub fn forward(&self, e: &Tensor, train: bool) -> (Tensor, Tensor) {
        let mut f = relu(&self.up1_norm.forward(&self.up1.forward(e, train)));
        f = relu(&self.up2_norm.forward(&self.up2.forward(&f, train)));
        f = relu(&self.project_norm.forward(&self.project.forward(&f, train)));
        let weights = softmax_channels(&f);
        let w_global = slice_channels(&weights, 0, 1);
        let w_local = slice_channels(&weights, 1, 2);
        (w_global, w_local)
    }
}

impl Module for WeightMapGenerator {
    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.up1.params(&format!("{prefix}.up1"), out);
        self.up1_norm.params(&format!("{prefix}.up1_norm"), out);
        self.up2.params(&format!("{prefix}.up2"), out);
        self.up2_norm.params(&format!("{prefix}.up2_norm"), out);
        self.project.params(&format!("{prefix}.project"), out);
        self.project_norm.params(&format!("{prefix}.project_norm"), out);
    }
    fn buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.up1.buffers(&format!("{prefix}.up1"), out);
        self.up2.buffers(&format!("{prefix}.up2"), out);
        self.project.buffers(&format!("{prefix}.project"), out);
    }
}

/// Blend the two candidate images with their weight maps:
/// `W_g ⊙ global + W_l ⊙ local`.
pub fn fuse(global: &Tensor, local: &Tensor, w_global: &Tensor, w_local: &Tensor) -> Tensor {
    add(
        &mul_broadcast(global, w_global),
        &mul_broadcast(local, w_local),
    )
}
