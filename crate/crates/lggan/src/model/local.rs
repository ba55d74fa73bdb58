//! Class-level generation branch: one small decoder head per semantic
//! class, each working only on the features under that class's mask.

use crate::config::LocalVariant;
use crate::graph::{
    add, concat_channels, l1_loss, mul_broadcast, relu, slice_channels, sum_list, tanh, Tensor,
};
use crate::nn::{Conv2d, ConvTranspose2d, InstanceNorm2d, Module};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

/// Two-convolution head that turns masked features into one class image.
struct ClassBranch {
    conv1: Conv2d,
    norm1: InstanceNorm2d,
    conv2: Conv2d,
}

impl ClassBranch {
    fn new(rng: &mut ChaCha8Rng, nf: usize) -> Self {
        ClassBranch {
            conv1: Conv2d::new(rng, nf, nf, 3, 1, 1, true),
            norm1: InstanceNorm2d::new(rng, nf),
            conv2: Conv2d::new(rng, nf, 3, 3, 1, 1, true),
        }
    }

    fn forward(&self, f: &Tensor, train: bool) -> Tensor {
        let h = relu(&self.norm1.forward(&self.conv1.forward(f, train)));
        tanh(&self.conv2.forward(&h, train))
    }
}

impl Module for ClassBranch {
    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv1.params(&format!("{prefix}.conv1"), out);
        self.norm1.params(&format!("{prefix}.norm1"), out);
        self.conv2.params(&format!("{prefix}.conv2"), out);
    }
    fn buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv1.buffers(&format!("{prefix}.conv1"), out);
        self.conv2.buffers(&format!("{prefix}.conv2"), out);
    }
}

/// Shared upsampling trunk plus `c` class branches, combined either by
/// elementwise sum or by a learned 3×3 convolution over the stacked class
/// images.
pub struct LocalGenerator {
    up1: ConvTranspose2d,
    up1_norm: InstanceNorm2d,
    up2: ConvTranspose2d,
    up2_norm: InstanceNorm2d,
    branches: Vec<ClassBranch>,
    variant: LocalVariant,
    combine_conv: Option<Conv2d>,
}

impl LocalGenerator {
    pub fn new(rng: &mut ChaCha8Rng, nf: usize, c: usize, variant: LocalVariant) -> Self {
        LocalGenerator {
            up1: ConvTranspose2d::new(rng, 4 * nf, 2 * nf, 3, 2, 1, 1, true),
            up1_norm: InstanceNorm2d::new(rng, 2 * nf),
            up2: ConvTranspose2d::new(rng, 2 * nf, nf, 3, 2, 1, 1, true),
            up2_norm: InstanceNorm2d::new(rng, nf),
            branches: (0..c).map(|_| ClassBranch::new(rng, nf)).collect(),
            variant,
            combine_conv: match variant {
                LocalVariant::Add => None,
                LocalVariant::Conv => Some(Conv2d::new(rng, 3 * c, 3, 3, 1, 1, true)),
            },
        }
    }

    pub fn class_count(&self) -> usize {
        self.branches.len()
    }

    /// Decode `[N, 4·nf, H/4, W/4]` shared features back to full-resolution
    /// `[N, nf, H, W]` features, ready for mask filtering.
    pub fn upsample_features(&self, e: &Tensor, train: bool) -> Tensor {
        let f = relu(&self.up1_norm.forward(&self.up1.forward(e, train)));
        relu(&self.up2_norm.forward(&self.up2.forward(&f, train)))
    }

    /// Run class `i`'s head on its filtered features, yielding an
    /// `[N, 3, H, W]` image in [-1, 1].
    pub fn generate_class_image(&self, filtered: &Tensor, i: usize, train: bool) -> Tensor {
        self.branches[i].forward(filtered, train)
    }

    /// Merge the per-class images into one local image, using whichever
    /// combination scheme this generator was built with.
    pub fn combine(&self, per_class: &[Tensor], train: bool) -> Tensor {
        assert_eq!(per_class.len(), self.branches.len());
        match self.variant {
            LocalVariant::Add => combine_local_add(per_class),
            LocalVariant::Conv => {
                let conv = self.combine_conv.as_ref().expect("conv variant has a combiner");
                let stacked = concat_channels(per_class);
                tanh(&conv.forward(&stacked, train))
            }
        }
    }
}

impl Module for LocalGenerator {
    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.up1.params(&format!("{prefix}.up1"), out);
        self.up1_norm.params(&format!("{prefix}.up1_norm"), out);
        self.up2.params(&format!("{prefix}.up2"), out);
        self.up2_norm.params(&format!("{prefix}.up2_norm"), out);
        for (i, b) in self.branches.iter().enumerate() {
            b.params(&format!("{prefix}.class{i}"), out);
        }
        if let Some(conv) = &self.combine_conv {
            conv.params(&format!("{prefix}.combine"), out);
        }
    }
    fn buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.up1.buffers(&format!("{prefix}.up1"), out);
        self.up2.buffers(&format!("{prefix}.up2"), out);
        for (i, b) in self.branches.iter().enumerate() {
            b.buffers(&format!("{prefix}.class{i}"), out);
        }
        if let Some(conv) = &self.combine_conv {
            conv.buffers(&format!("{prefix}.combine"), out);
        }
    }
}

/// Restrict shared features to each class: `F_i = M_i ⊙ f`, one tensor per
/// class channel in `masks` (`[N, c, H, W]`).
pub fn filter_class_features(f: &Tensor, masks: &Tensor) -> Vec<Tensor> {
    let c = masks.shape()[1];
    (0..c)
        .map(|i| mul_broadcast(f, &slice_channels(masks, i, i + 1)))
        .collect()
}

/// Elementwise sum of the per-class images.
pub fn combine_local_add(per_class: &[Tensor]) -> Tensor {
    sum_list(per_class)
}

/// Reconstruction loss for the class branches: each class image is compared
/// against the mask-restricted ground truth, and classes absent from a
/// sample (weight 0 in `valid`) contribute nothing — neither loss nor
/// gradient.
pub fn masked_l1_loss(
    per_class: &[Tensor],
    target: &Tensor,
    masks: &Tensor,
    valid: &Array2<f32>,
) -> Tensor {
    assert_eq!(per_class.len(), valid.ncols());
    let mut total: Option<Tensor> = None;
    for (i, pred) in per_class.iter().enumerate() {
        let mask = slice_channels(masks, i, i + 1);
        let masked_target = mul_broadcast(target, &mask);
        let weights: Vec<f32> = valid.column(i).iter().copied().collect();
        let term = l1_loss(pred, &masked_target, Some(&weights));
        total = Some(match total {
            Some(t) => add(&t, &term),
            None => term,
        });
    }
    total.expect("class count is at least one")
}
