//! Parameter-sharing encoder feeding the global, local, and weight-map
//! branches.

use super::ModelError;
use crate::graph::{relu, Tensor};
use crate::nn::{Conv2d, InstanceNorm2d, Module, ResBlock};
use rand_chacha::ChaCha8Rng;

/// Stem convolution, two ×2 downsampling stages (nf → 2nf → 4nf), then `r`
/// residual blocks. Output spatial size is the input divided by exactly 4,
/// which the upsampling branches rely on to restore the original
/// resolution.
pub struct Encoder {
    stem: Conv2d,
    stem_norm: InstanceNorm2d,
    down1: Conv2d,
    down1_norm: InstanceNorm2d,
    down2: Conv2d,
    down2_norm: InstanceNorm2d,
    blocks: Vec<ResBlock>,
}

impl Encoder {
    pub fn new(rng: &mut ChaCha8Rng, in_ch: usize, nf: usize, r: usize) -> Self {
        Encoder {
            stem: Conv2d::new(rng, in_ch, nf, 3, 1, 1, true),
            stem_norm: InstanceNorm2d::new(rng, nf),
            down1: Conv2d::new(rng, nf, 2 * nf, 3, 2, 1, true),
            down1_norm: InstanceNorm2d::new(rng, 2 * nf),
            down2: Conv2d::new(rng, 2 * nf, 4 * nf, 3, 2, 1, true),
            down2_norm: InstanceNorm2d::new(rng, 4 * nf),
            blocks: (0..r).map(|_| ResBlock::new(rng, 4 * nf, true)).collect(),
        }
    }

    /// Encode `[N, C_in, H, W]` to `[N, 4·nf, H/4, W/4]`.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor, ModelError> {
        let shape = x.shape();
        let (h, w) = (shape[2], shape[3]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(ModelError::IndivisibleSize { h, w });
        }
        let mut f = relu(&self.stem_norm.forward(&self.stem.forward(x, train)));
        f = relu(&self.down1_norm.forward(&self.down1.forward(&f, train)));
        f = relu(&self.down2_norm.forward(&self.down2.forward(&f, train)));
        for b in &self.blocks {
            f = b.forward(&f, train);
        }
        Ok(f)
    }
}

impl Module for Encoder {
    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.stem.params(&format!("{prefix}.stem"), out);
        self.stem_norm.params(&format!("{prefix}.stem_norm"), out);
        self.down1.params(&format!("{prefix}.down1"), out);
        self.down1_norm.params(&format!("{prefix}.down1_norm"), out);
        self.down2.params(&format!("{prefix}.down2"), out);
        self.down2_norm.params(&format!("{prefix}.down2_norm"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&format!("{prefix}.res{i}"), out);
        }
    }
    fn buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.stem.buffers(&format!("{prefix}.stem"), out);
        self.down1.buffers(&format!("{prefix}.down1"), out);
        self.down2.buffers(&format!("{prefix}.down2"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.buffers(&format!("{prefix}.res{i}"), out);
        }
    }
}
