//! Image-level generation branch: decodes shared features into one full
//! image in a single shot.

use crate::graph::{relu, tanh, Tensor};
use crate::nn::{Conv2d, ConvTranspose2d, InstanceNorm2d, Module, ResBlock};
use rand_chacha::ChaCha8Rng;

/// `r` residual blocks at the bottleneck, two ×2 transpose-convolution
/// upsampling stages (4nf → 2nf → nf), and a 3×3 projection to RGB with a
/// tanh squashing all values into [-1, 1].
pub struct GlobalGenerator {
    blocks: Vec<ResBlock>,
    up1: ConvTranspose2d,
    up1_norm: InstanceNorm2d,
    up2: ConvTranspose2d,
    up2_norm: InstanceNorm2d,
    to_rgb: Conv2d,
}

impl GlobalGenerator {
    pub fn new(rng: &mut ChaCha8Rng, nf: usize, r: usize) -> Self {
        GlobalGenerator {
            blocks: (0..r).map(|_| ResBlock::new(rng, 4 * nf, true)).collect(),
            up1: ConvTranspose2d::new(rng, 4 * nf, 2 * nf, 3, 2, 1, 1, true),
            up1_norm: InstanceNorm2d::new(rng, 2 * nf),
            up2: ConvTranspose2d::new(rng, 2 * nf, nf, 3, 2, 1, 1, true),
            up2_norm: InstanceNorm2d::new(rng, nf),
            to_rgb: Conv2d::new(rng, nf, 3, 3, 1, 1, true),
        }
    }

    /// Decode `[N, 4·nf, H/4, W/4]` features to an `[N, 3, H, W]` image.
    pub fn forward(&self, e: &Tensor, train: bool) -> Tensor {
        let mut f = e.clone();
        for b in &self.blocks {
            f = b.forward(&f, train);
        }
        f = relu(&self.up1_norm.forward(&self.up1.forward(&f, train)));
        f = relu(&self.up2_norm.forward(&self.up2.forward(&f, train)));
        tanh(&self.to_rgb.forward(&f, train))
    }
}

impl Module for GlobalGenerator {
    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&format!("{prefix}.res{i}"), out);
        }
        self.up1.params(&format!("{prefix}.up1"), out);
        self.up1_norm.params(&format!("{prefix}.up1_norm"), out);
        self.up2.params(&format!("{prefix}.up2"), out);
        self.up2_norm.params(&format!("{prefix}.up2_norm"), out);
        self.to_rgb.params(&format!("{prefix}.to_rgb"), out);
    }
    fn buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.buffers(&format!("{prefix}.res{i}"), out);
        }
        self.up1.buffers(&format!("{prefix}.up1"), out);
        self.up2.buffers(&format!("{prefix}.up2"), out);
        self.to_rgb.buffers(&format!("{prefix}.to_rgb"), out);
    }
}
