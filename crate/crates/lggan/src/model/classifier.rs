//! Classification head over the mask-filtered features: each class's
//! features are pooled under that class's own mask, then one shared linear
//! layer predicts which class the pooled vector came from. Because the
//! target for slot `i` is always class `i`, the cross entropy pushes the
//! filtered features of different classes apart.

use crate::graph::{concat_channels, filtered_cross_entropy, masked_avg_pool, reshape,
                   slice_channels, Tensor};
use crate::nn::{Linear, Module};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

/// Average each class's filtered features over its own mask region:
/// `filtered[i]` is `[N, nf, H, W]`, `masks` is `[N, c, H, W]`, and the
/// result packs the pooled vectors into `[N, c, nf]`. Pixels outside the
/// mask contribute nothing; an empty mask pools to a zero vector.
pub fn semantic_avg_pool(filtered: &[Tensor], masks: &Tensor) -> Tensor {
    let c = masks.shape()[1];
    assert_eq!(filtered.len(), c, "one filtered tensor per class");
    let pooled: Vec<Tensor> = (0..c)
        .map(|i| masked_avg_pool(&filtered[i], &slice_channels(masks, i, i + 1)))
        .collect();
    concat_channels(&pooled)
}

/// One fully connected layer shared by every class slot.
pub struct Classifier {
    fc: Linear,
    nf: usize,
    c: usize,
}

impl Classifier {
    pub fn new(rng: &mut ChaCha8Rng, nf: usize, c: usize) -> Self {
        Classifier { fc: Linear::new(rng, nf, c), nf, c }
    }

    /// Map pooled features `[N, c, nf]` to per-slot logits `[N, c, c]`.
    pub fn classify(&self, pooled: &Tensor) -> Tensor {
        let shape = pooled.shape();
        assert_eq!(shape[1], self.c, "pooled class count mismatch");
        assert_eq!(shape[2], self.nf, "pooled feature width mismatch");
        let n = shape[0];
        let flat = reshape(pooled, &[n * self.c, self.nf]);
        let logits = reshape(&self.fc.forward(&flat), &[n, self.c, self.c]);
        logits
    }

    /// Cross entropy over the slots that are actually present in each
    /// sample; absent slots are skipped entirely.
    pub fn loss(&self, logits: &Tensor, valid: &Array2<f32>) -> Tensor {
        let valid_t = Tensor::constant(valid.clone().into_dyn());
        filtered_cross_entropy(logits, &valid_t)
    }
}

impl Module for Classifier {
    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.fc.params(&format!("{prefix}.fc"), out);
    }
}
