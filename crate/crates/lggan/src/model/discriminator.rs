//! Patch discriminators. Each one scores overlapping receptive fields
//! rather than whole images, producing a grid of logits; real/fake
//! supervision is applied to every grid cell.

use crate::graph::{add, bce_with_logits_mean, leaky_relu, scale, Tensor};
use crate::nn::{Conv2d, InstanceNorm2d, Module};
use rand_chacha::ChaCha8Rng;

const LEAK: f32 = 0.2;

/// Four ×2 downsampling convolutions (nf_d → 2nf_d → 4nf_d → 8nf_d) with
/// leaky relu, instance norm on all but the first, then a 3×3 projection to
/// a single logit channel. A 64×64 input yields a 4×4 logit grid.
pub struct PatchDiscriminator {
    stage1: Conv2d,
    stage2: Conv2d,
    norm2: InstanceNorm2d,
    stage3: Conv2d,
    norm3: InstanceNorm2d,
    stage4: Conv2d,
    norm4: InstanceNorm2d,
    head: Conv2d,
}

impl PatchDiscriminator {
    pub fn new(rng: &mut ChaCha8Rng, in_ch: usize, nf_d: usize) -> Self {
        PatchDiscriminator {
            stage1: Conv2d::new(rng, in_ch, nf_d, 4, 2, 1, true),
            stage2: Conv2d::new(rng, nf_d, 2 * nf_d, 4, 2, 1, true),
            norm2: InstanceNorm2d::new(rng, 2 * nf_d),
            stage3: Conv2d::new(rng, 2 * nf_d, 4 * nf_d, 4, 2, 1, true),
            norm3: InstanceNorm2d::new(rng, 4 * nf_d),
            stage4: Conv2d::new(rng, 4 * nf_d, 8 * nf_d, 4, 2, 1, true),
            norm4: InstanceNorm2d::new(rng, 8 * nf_d),
            head: Conv2d::new(rng, 8 * nf_d, 1, 3, 1, 1, true),
        }
    }

    /// Score `[N, C_in, H, W]` inputs as an `[N, 1, H/16, W/16]` logit grid.
    pub fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        let mut f = leaky_relu(&self.stage1.forward(x, train), LEAK);
        f = leaky_relu(&self.norm2.forward(&self.stage2.forward(&f, train)), LEAK);
        f = leaky_relu(&self.norm3.forward(&self.stage3.forward(&f, train)), LEAK);
        f = leaky_relu(&self.norm4.forward(&self.stage4.forward(&f, train)), LEAK);
        self.head.forward(&f, train)
    }
}

impl Module for PatchDiscriminator {
    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.stage1.params(&format!("{prefix}.stage1"), out);
        self.stage2.params(&format!("{prefix}.stage2"), out);
        self.norm2.params(&format!("{prefix}.norm2"), out);
        self.stage3.params(&format!("{prefix}.stage3"), out);
        self.norm3.params(&format!("{prefix}.norm3"), out);
        self.stage4.params(&format!("{prefix}.stage4"), out);
        self.norm4.params(&format!("{prefix}.norm4"), out);
        self.head.params(&format!("{prefix}.head"), out);
    }
    fn buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.stage1.buffers(&format!("{prefix}.stage1"), out);
        self.stage2.buffers(&format!("{prefix}.stage2"), out);
        self.stage3.buffers(&format!("{prefix}.stage3"), out);
        self.stage4.buffers(&format!("{prefix}.stage4"), out);
        self.head.buffers(&format!("{prefix}.head"), out);
    }
}

/// Discriminator objective: real patches pushed toward 1, fake patches
/// toward 0, averaged so each side carries half the weight.
pub fn d_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Tensor {
    let real_term = bce_with_logits_mean(real_logits, 1.0);
    let fake_term = bce_with_logits_mean(fake_logits, 0.0);
    scale(&add(&real_term, &fake_term), 0.5)
}

/// Non-saturating generator objective: fake patches pushed toward 1.
pub fn g_loss(fake_logits: &Tensor) -> Tensor {
    bce_with_logits_mean(fake_logits, 1.0)
}

/// Both adversarial losses from one pair of logit grids.
pub fn gan_losses(real_logits: &Tensor, fake_logits: &Tensor) -> (Tensor, Tensor) {
    (d_loss(real_logits, fake_logits), g_loss(fake_logits))
}
