//! The full generation model: a shared encoder feeding an image-level
//! generator, a set of class-level generators, a classification head that
//! keeps class features discriminative, and a learned pixel-wise fusion of
//! the two candidate images. Which branches exist is decided by the
//! configured setup; absent branches have no parameters at all.

pub mod classifier;
pub mod discriminator;
pub mod encoder;
pub mod fusion;
pub mod global;
pub mod local;

pub use classifier::{semantic_avg_pool, Classifier};
pub use discriminator::{d_loss, g_loss, gan_losses, PatchDiscriminator};
pub use encoder::Encoder;
pub use fusion::{fuse, WeightMapGenerator};
pub use global::GlobalGenerator;
pub use local::{combine_local_add, filter_class_features, masked_l1_loss, LocalGenerator};

use crate::config::{ModelConfig, Setup};
use crate::data::{Batch, DataError, Mode};
use crate::graph::{add, concat_channels, scale, Tensor};
use crate::nn::Module;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input size {h}×{w} is not divisible by 4")]
    IndivisibleSize { h: usize, w: usize },
    #[error("batch does not match the model's mode: {0}")]
    ModeMismatch(&'static str),
    #[error("batch has {got} class channels but the model expects {expected}")]
    ClassCountMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Everything one generator forward pass produces. Branches that the
/// configured setup leaves out are `None` / empty.
pub struct GeneratorOutputs {
    /// Image-level candidate `I^G`, `[N, 3, H, W]`.
    pub global_image: Tensor,
    /// Per-class images `I^L_i`, one `[N, 3, H, W]` tensor per class.
    pub per_class: Vec<Tensor>,
    /// Combined class-level candidate `I^L`.
    pub local_image: Option<Tensor>,
    /// Mask-filtered features `F_i`, one `[N, nf, H, W]` tensor per class.
    pub filtered: Vec<Tensor>,
    /// The binary masks used for filtering, `[N, c, H, W]`.
    pub masks: Option<Tensor>,
    /// Classification logits `[N, c, c]`.
    pub logits: Option<Tensor>,
    /// Fusion weight maps `(W_g, W_l)`, each `[N, 1, H, W]`.
    pub weights: Option<(Tensor, Tensor)>,
    /// The image the model actually outputs, `[N, 3, H, W]`.
    pub fused: Tensor,
}

pub struct LgGan {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub global: GlobalGenerator,
    pub local: Option<LocalGenerator>,
    pub classifier: Option<Classifier>,
    pub fusion: Option<WeightMapGenerator>,
    /// Scores (layout, image) pairs; used in both modes.
    pub d_semantic: PatchDiscriminator,
    /// Scores (conditioning image, output image) pairs; cross-view only.
    pub d_image: Option<PatchDiscriminator>,
}

impl LgGan {
    /// Build all branches the config calls for. The config must satisfy
    /// [`ModelConfig::validate`].
    pub fn new(config: &ModelConfig, rng: &mut ChaCha8Rng) -> LgGan {
        config
            .validate()
            .expect("model construction requires a valid config");
        let c = config.c;
        let nf = config.nf;
        let encoder = Encoder::new(rng, config.encoder_in_channels(), nf, config.r);
        let global = GlobalGenerator::new(rng, nf, config.r);
        let local = config
            .has_local()
            .then(|| LocalGenerator::new(rng, nf, c, config.local_variant));
        let classifier = config.has_classifier().then(|| Classifier::new(rng, nf, c));
        let fusion = config.has_fusion().then(|| WeightMapGenerator::new(rng, nf));
        let d_semantic = PatchDiscriminator::new(rng, c + 3, config.nf_d);
        let d_image = matches!(config.mode, Mode::CrossView)
            .then(|| PatchDiscriminator::new(rng, 6, config.nf_d));
        LgGan {
            config: config.clone(),
            encoder,
            global,
            local,
            classifier,
            fusion,
            d_semantic,
            d_image,
        }
    }

    /// The generator-side network input: the one-hot layout, with the
    /// conditioning photo stacked in front of it in cross-view mode.
    pub fn input_tensor(&self, batch: &Batch) -> Result<Tensor, ModelError> {
        let layout = Tensor::constant(batch.onehot.clone());
        match (self.config.mode, &batch.cond) {
            (Mode::Semantic, None) => Ok(layout),
            (Mode::CrossView, Some(cond)) => {
                let cond = Tensor::constant(cond.clone());
                Ok(concat_channels(&[cond, layout]))
            }
            (Mode::Semantic, Some(_)) => Err(ModelError::ModeMismatch(
                "semantic-mode model given conditioning images",
            )),
            (Mode::CrossView, None) => Err(ModelError::ModeMismatch(
                "cross-view model needs conditioning images",
            )),
        }
    }

    /// Run the full generator side on a batch.
    pub fn generate(&self, batch: &Batch, train: bool) -> Result<GeneratorOutputs, ModelError> {
        let got_c = batch.onehot.shape()[1];
        if got_c != self.config.c {
            return Err(ModelError::ClassCountMismatch {
                got: got_c,
                expected: self.config.c,
            });
        }
        let x = self.input_tensor(batch)?;
        let e = self.encoder.forward(&x, train)?;
        let global_image = self.global.forward(&e, train);

        let mut outputs = GeneratorOutputs {
            fused: global_image.clone(),
            global_image,
            per_class: Vec::new(),
            local_image: None,
            filtered: Vec::new(),
            masks: None,
            logits: None,
            weights: None,
        };

        let Some(local) = &self.local else {
            return Ok(outputs);
        };

        let f = local.upsample_features(&e, train);
        let fshape = f.shape();
        let masks = Tensor::constant(batch.masks_at(fshape[2], fshape[3])?);
        let filtered = filter_class_features(&f, &masks);
        let per_class: Vec<Tensor> = filtered
            .iter()
            .enumerate()
            .map(|(i, fi)| local.generate_class_image(fi, i, train))
            .collect();
        let local_image = local.combine(&per_class, train);

        if let Some(clf) = &self.classifier {
            let pooled = semantic_avg_pool(&filtered, &masks);
            outputs.logits = Some(clf.classify(&pooled));
        }

        outputs.fused = match &self.fusion {
            Some(weight_gen) => {
                let (w_g, w_l) = weight_gen.forward(&e, train);
                let fused = fuse(&outputs.global_image, &local_image, &w_g, &w_l);
                outputs.weights = Some((w_g, w_l));
                fused
            }
            // Without the learned weight maps the two candidates are
            // averaged with equal weight.
            None => scale(&add(&outputs.global_image, &local_image), 0.5),
        };
        outputs.per_class = per_class;
        outputs.local_image = Some(local_image);
        outputs.filtered = filtered;
        outputs.masks = Some(masks);
        Ok(outputs)
    }

    /// All generator-side parameters (encoder and every generation branch),
    /// under stable dotted names.
    pub fn generator_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.encoder.params("encoder", &mut out);
        self.global.params("global", &mut out);
        if let Some(l) = &self.local {
            l.params("local", &mut out);
        }
        if let Some(c) = &self.classifier {
            c.params("classifier", &mut out);
        }
        if let Some(f) = &self.fusion {
            f.params("fusion", &mut out);
        }
        out
    }

    /// All discriminator-side parameters.
    pub fn discriminator_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.d_semantic.params("d_semantic", &mut out);
        if let Some(d) = &self.d_image {
            d.params("d_image", &mut out);
        }
        out
    }

    /// Every parameter in the model.
    pub fn all_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.generator_params();
        out.extend(self.discriminator_params());
        out
    }

    /// Every non-parameter state tensor (spectral-norm power-iteration
    /// vectors), under the same naming scheme as the parameters.
    pub fn all_buffers(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.encoder.buffers("encoder", &mut out);
        self.global.buffers("global", &mut out);
        if let Some(l) = &self.local {
            l.buffers("local", &mut out);
        }
        if let Some(f) = &self.fusion {
            f.buffers("fusion", &mut out);
        }
        self.d_semantic.buffers("d_semantic", &mut out);
        if let Some(d) = &self.d_image {
            d.buffers("d_image", &mut out);
        }
        out
    }

    /// Which setup this model was built for.
    pub fn setup(&self) -> Setup {
        self.config.setup
    }
}
