//! Alternating adversarial training: one discriminator update on detached
//! fakes, then one generator update scored by the freshly updated
//! discriminators. The full run is deterministic — batch order is derived
//! from (seed, epoch), and nothing else draws randomness after
//! initialization — so equal seeds give bit-identical loss trajectories.

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, ModelConfig};
use crate::data::{Batch, PairedSample};
use crate::graph::{add, concat_channels, filtered_cross_entropy, l1_loss, scale, Tensor};
use crate::model::{d_loss, g_loss, masked_l1_loss, GeneratorOutputs, LgGan, ModelError};
use crate::nn::Adam;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("training diverged: {term} loss is {value} at step {step}")]
    NonFinite { term: &'static str, value: f32, step: u64 },
    #[error("cannot train on an empty dataset")]
    EmptyDataset,
}

/// Every scalar produced by one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// Steps completed so far (1 after the first step).
    pub step: u64,
    /// Loss of the layout-conditioned discriminator.
    pub d_semantic: f32,
    /// Loss of the image-conditioned discriminator (cross-view only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_image: Option<f32>,
    /// Adversarial generator term, summed over active discriminators.
    pub g_adv: f32,
    /// Per-class reconstruction term (0 when the local branch is absent).
    pub l1_local: f32,
    /// Classification term (0 when the classifier is absent).
    pub ce: f32,
    /// Reconstruction term on the final output image.
    pub l1_fused: f32,
    /// The weighted sum actually backpropagated.
    pub g_total: f32,
}

/// The generator objective with its per-term breakdown. Terms whose branch
/// is disabled by the setup report exactly 0.0 and add no graph nodes.
pub struct GeneratorLoss {
    pub total: Tensor,
    pub g_adv: f32,
    pub l1_local: f32,
    pub ce: f32,
    pub l1_fused: f32,
}

/// Assemble the weighted generator objective from one forward pass.
/// `fake_logits` holds the active discriminators' scores of the live (not
/// detached) fused image — one entry in semantic mode, two in cross-view.
pub fn total_generator_loss(
    config: &ModelConfig,
    outputs: &GeneratorOutputs,
    batch: &Batch,
    fake_logits: &[Tensor],
) -> GeneratorLoss {
    let target = Tensor::constant(batch.target.clone());
    let mut terms: Vec<Tensor> = Vec::new();

    let mut adv: Option<Tensor> = None;
    for logits in fake_logits {
        let term = g_loss(logits);
        adv = Some(match adv {
            Some(a) => add(&a, &term),
            None => term,
        });
    }
    let g_adv = adv.as_ref().map_or(0.0, Tensor::item);
    if let Some(a) = adv {
        terms.push(scale(&a, config.lambda_gan));
    }

    let mut l1_local = 0.0;
    if !outputs.per_class.is_empty() {
        let masks = outputs.masks.as_ref().expect("local branch produced masks");
        let term = masked_l1_loss(&outputs.per_class, &target, masks, &batch.valid);
        l1_local = term.item();
        terms.push(scale(&term, config.lambda_l1_local));
    }

    let mut ce = 0.0;
    if let Some(logits) = &outputs.logits {
        let valid = Tensor::constant(batch.valid.clone().into_dyn());
        let term = filtered_cross_entropy(logits, &valid);
        ce = term.item();
        terms.push(scale(&term, config.lambda_ce));
    }

    let fused_term = l1_loss(&outputs.fused, &target, None);
    let l1_fused = fused_term.item();
    terms.push(scale(&fused_term, config.lambda_l1_fused));

    let mut total = terms[0].clone();
    for t in &terms[1..] {
        total = add(&total, t);
    }
    GeneratorLoss { total, g_adv, l1_local, ce, l1_fused }
}

/// Owns the model and both optimizers for the duration of a run.
pub struct Trainer {
    pub model: LgGan,
    g_opt: Adam,
    d_opt: Adam,
    step: u64,
}

impl Trainer {
    pub fn new(model: LgGan) -> Trainer {
        let cfg = &model.config;
        let g_opt = Adam::new(model.generator_params(), cfg.lr, cfg.beta1, cfg.beta2);
        let d_opt = Adam::new(model.discriminator_params(), cfg.lr, cfg.beta1, cfg.beta2);
        Trainer { model, g_opt, d_opt, step: 0 }
    }

    /// Resume exactly where a checkpoint left off.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Trainer, CheckpointError> {
        let (model, g_opt, d_opt) = ckpt.restore()?;
        Ok(Trainer { model, g_opt, d_opt, step: ckpt.step })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, &self.g_opt, &self.d_opt, self.step)
    }

    /// Steps completed so far.
    pub fn global_step(&self) -> u64 {
        self.step
    }

    fn check_finite(&self, term: &'static str, value: f32) -> Result<f32, TrainError> {
        if value.is_finite() {
            Ok(value)
        } else {
            Err(TrainError::NonFinite { term, value, step: self.step })
        }
    }

    /// One alternating update on a batch: discriminators first (on the
    /// detached fused image), then the generator side against the updated
    /// discriminators.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossRecord, TrainError> {
        let outputs = self.model.generate(batch, true)?;
        let layout = Tensor::constant(batch.onehot.clone());
        let target = Tensor::constant(batch.target.clone());
        let fake = outputs.fused.detach();
        let cond = batch.cond.as_ref().map(|c| Tensor::constant(c.clone()));

        // Discriminator side. The fake image is detached, so no gradient
        // can reach the generator from here.
        self.d_opt.zero_grad();
        let real_sem = self
            .model
            .d_semantic
            .forward(&concat_channels(&[layout.clone(), target.clone()]), true);
        let fake_sem = self
            .model
            .d_semantic
            .forward(&concat_channels(&[layout.clone(), fake.clone()]), true);
        let d_sem = d_loss(&real_sem, &fake_sem);
        let d_semantic = self.check_finite("d_semantic", d_sem.item())?;
        let mut d_total = d_sem;
        let mut d_image = None;
        if let Some(di) = &self.model.d_image {
            let cond = cond.as_ref().expect("cross-view batch was validated");
            let real_img = di.forward(&concat_channels(&[cond.clone(), target]), true);
            let fake_img = di.forward(&concat_channels(&[cond.clone(), fake]), true);
            let d_img = d_loss(&real_img, &fake_img);
            d_image = Some(self.check_finite("d_image", d_img.item())?);
            d_total = add(&d_total, &d_img);
        }
        d_total.backward();
        self.d_opt.step();

        // Generator side, scored by the discriminators as they now stand.
        self.g_opt.zero_grad();
        let mut fake_logits = vec![self
            .model
            .d_semantic
            .forward(&concat_channels(&[layout, outputs.fused.clone()]), true)];
        if let Some(di) = &self.model.d_image {
            let cond = cond.as_ref().expect("cross-view batch was validated");
            fake_logits.push(di.forward(
                &concat_channels(&[cond.clone(), outputs.fused.clone()]),
                true,
            ));
        }
        let loss = total_generator_loss(&self.model.config, &outputs, batch, &fake_logits);
        let g_adv = self.check_finite("g_adv", loss.g_adv)?;
        let l1_local = self.check_finite("l1_local", loss.l1_local)?;
        let ce = self.check_finite("ce", loss.ce)?;
        let l1_fused = self.check_finite("l1_fused", loss.l1_fused)?;
        let g_total = self.check_finite("g_total", loss.total.item())?;
        loss.total.backward();
        self.g_opt.step();

        self.step += 1;
        Ok(LossRecord {
            step: self.step,
            d_semantic,
            d_image,
            g_adv,
            l1_local,
            ce,
            l1_fused,
            g_total,
        })
    }
}

/// Where a full run puts its artifacts and how often.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    /// Save a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
    /// Append a loss record every this many steps.
    pub log_every: u64,
}

/// What [`train`] leaves behind.
#[derive(Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub last_record: Option<LossRecord>,
}

/// The sample order for one epoch, derived only from the run seed and the
/// epoch index so that resumption can reconstruct it.
fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

#[derive(Serialize)]
struct LogLine<'a> {
    epoch: u64,
    #[serde(flatten)]
    record: &'a LossRecord,
}

/// Run the configured number of epochs over the dataset, writing periodic
/// checkpoints and a line-delimited loss log.
pub fn train(
    config: &ModelConfig,
    dataset: &[PairedSample],
    opts: &TrainOptions,
) -> Result<TrainSummary, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    std::fs::create_dir_all(&opts.out_dir)?;
    let loss_log = opts.out_dir.join("losses.jsonl");
    let mut log = BufWriter::new(File::create(&loss_log)?);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trainer = Trainer::new(LgGan::new(config, &mut rng));

    let n = dataset.len();
    let batch_size = config.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch_size) as u64;
    let total_steps = config.epochs as u64 * steps_per_epoch;

    let mut order = Vec::new();
    let mut last_record = None;
    for step in 0..total_steps {
        let epoch = step / steps_per_epoch;
        let pos = (step % steps_per_epoch) as usize;
        if pos == 0 {
            order = epoch_order(config.seed, epoch, n);
        }
        let lo = pos * batch_size;
        let hi = (lo + batch_size).min(n);
        let samples: Vec<&PairedSample> = order[lo..hi].iter().map(|&i| &dataset[i]).collect();
        let batch = Batch::from_samples(&samples);

        let record = trainer.train_step(&batch)?;
        let done = step + 1 == total_steps;
        if record.step % opts.log_every.max(1) == 0 || done {
            serde_json::to_writer(&mut log, &LogLine { epoch, record: &record })
                .map_err(|e| TrainError::Io(e.into()))?;
            log.write_all(b"\n")?;
        }
        if opts.checkpoint_every > 0 && record.step % opts.checkpoint_every == 0 && !done {
            let path = opts.out_dir.join(format!("checkpoint-{:06}.bin", record.step));
            trainer.checkpoint().save(&path)?;
        }
        last_record = Some(record);
    }
    log.flush()?;

    let final_checkpoint = opts.out_dir.join("checkpoint-final.bin");
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainSummary {
        steps: total_steps,
        final_checkpoint,
        loss_log,
        last_record,
    })
}

/// Convenience for tests and the overfit gate: run `steps` steps over the
/// dataset with the configured batching, returning every record.
pub fn run_steps(
    trainer: &mut Trainer,
    dataset: &[PairedSample],
    steps: u64,
) -> Result<Vec<LossRecord>, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let config = trainer.model.config.clone();
    let n = dataset.len();
    let batch_size = config.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch_size) as u64;
    let mut order = Vec::new();
    let mut records = Vec::with_capacity(steps as usize);
    let start = trainer.global_step();
    for step in start..start + steps {
        let epoch = step / steps_per_epoch;
        let pos = (step % steps_per_epoch) as usize;
        if pos == 0 || order.is_empty() {
            order = epoch_order(config.seed, epoch, n);
        }
        let lo = pos * batch_size;
        let hi = (lo + batch_size).min(n);
        let samples: Vec<&PairedSample> = order[lo..hi].iter().map(|&i| &dataset[i]).collect();
        let batch = Batch::from_samples(&samples);
        records.push(trainer.train_step(&batch)?);
    }
    Ok(records)
}

/// Path helper shared by the CLI: the checkpoint a finished run leaves
/// behind.
pub fn final_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoint-final.bin")
}
