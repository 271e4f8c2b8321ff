//! Forward masking process, the masked-denoising objectives and the
//! training loop.
//!
//! Training uses a continuous corruption time `t ~ U(0, 1)`; the discrete
//! step count only appears at decoding time.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    init_params, loss_and_grads, AttentionMode, ModelConfig, Parameters, TrainExample,
};
use crate::numerics::{adam_step, OptimizerState, RngState};
use crate::vocab::MASK;

/// Survival probability `α(t)` of a token at corruption time `t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSchedule {
    /// `α(t) = 1 − t`
    #[default]
    Linear,
}

impl MaskSchedule {
    pub fn alpha(&self, t: f32) -> f32 {
        match self {
            MaskSchedule::Linear => 1.0 - t.clamp(0.0, 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingObjective {
    /// A masked position predicts its own clean token.
    Identity,
    /// Position `i` predicts the clean token at `i + 1` when `i + 1` is masked.
    Shift,
    /// Clean teacher-forced next-token prediction under a causal mask.
    Autoregressive,
}

impl TrainingObjective {
    pub fn required_attention(&self) -> AttentionMode {
        match self {
            TrainingObjective::Autoregressive => AttentionMode::Causal,
            _ => AttentionMode::Bidirectional,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// `1 / max(t, 0.01)` per loss position.
    #[default]
    InverseT,
    Uniform,
}

pub const T_FLOOR: f32 = 0.01;

/// A clean training sequence; positions before `prompt_len` are never corrupted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConditionalSequence {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionSample {
    pub x0: Vec<u32>,
    pub xt: Vec<u32>,
    pub t: f32,
    pub masked_positions: Vec<usize>,
}

/// Independently replace each position `>= eligible_from` by `MASK` with
/// probability `1 − α(t)`.
pub fn forward_corrupt(
    x0: &[u32],
    eligible_from: usize,
    t: f32,
    schedule: MaskSchedule,
    rng: &mut RngState,
) -> CorruptionSample {
    let keep = schedule.alpha(t) as f64;
    let mut xt = x0.to_vec();
    let mut masked_positions = Vec::new();
    for (i, tok) in xt.iter_mut().enumerate().skip(eligible_from) {
        if rng.next_f64() >= keep {
            *tok = MASK;
            masked_positions.push(i);
        }
    }
    CorruptionSample {
        x0: x0.to_vec(),
        xt,
        t,
        masked_positions,
    }
}

/// Loss rows and targets for one corrupted sequence under `objective`.
pub fn build_example(
    sample: &CorruptionSample,
    prompt_len: usize,
    objective: TrainingObjective,
    weighting: LossWeighting,
) -> Result<TrainExample> {
    let s = sample.x0.len();
    let w = match weighting {
        LossWeighting::InverseT => 1.0 / sample.t.max(T_FLOOR),
        LossWeighting::Uniform => 1.0,
    };
    let mut targets = vec![0u32; s];
    let loss_positions: Vec<usize> = match objective {
        TrainingObjective::Identity => {
            for &i in &sample.masked_positions {
                targets[i] = sample.x0[i];
            }
            sample.masked_positions.clone()
        }
        TrainingObjective::Shift => {
            if s < 2 {
                return Err(Error::Config(
                    "shift objective needs sequences of length >= 2".into(),
                ));
            }
            let mut pos = Vec::new();
            for &i in &sample.masked_positions {
                if i >= 1 {
                    targets[i - 1] = sample.x0[i];
                    pos.push(i - 1);
                }
            }
            pos
        }
        TrainingObjective::Autoregressive => {
            if s < 2 {
                return Err(Error::Config(
                    "autoregressive objective needs sequences of length >= 2".into(),
                ));
            }
            let start = prompt_len.saturating_sub(1);
            for i in start..s - 1 {
                targets[i] = sample.x0[i + 1];
            }
            (start..s - 1).collect()
        }
    };
    let weight = if objective == TrainingObjective::Autoregressive {
        1.0
    } else {
        w
    };
    Ok(TrainExample {
        input: sample.xt.clone(),
        loss_positions,
        targets,
        weights: vec![weight; s],
    })
}

pub struct TrainingBatch {
    pub examples: Vec<TrainExample>,
    pub samples: Vec<CorruptionSample>,
    pub prompt_lens: Vec<usize>,
    /// Masked positions over corruptible positions, across the batch.
    pub masked_fraction: f32,
}

/// Sample `batch_size` sequences, corrupt them and build loss rows.
///
/// A batch whose loss set comes out empty is redrawn from the same stream.
pub fn training_batch(
    corpus: &[ConditionalSequence],
    batch_size: usize,
    objective: TrainingObjective,
    schedule: MaskSchedule,
    weighting: LossWeighting,
    rng: &mut RngState,
) -> Result<TrainingBatch> {
    if corpus.is_empty() || batch_size == 0 {
        return Err(Error::Config(
            "training needs a non-empty corpus and batch".into(),
        ));
    }
    loop {
        let mut examples = Vec::with_capacity(batch_size);
        let mut samples = Vec::with_capacity(batch_size);
        let mut prompt_lens = Vec::with_capacity(batch_size);
        let (mut masked, mut eligible) = (0usize, 0usize);
        for _ in 0..batch_size {
            let seq = &corpus[rng.below(corpus.len() as u64) as usize];
            let sample = if objective == TrainingObjective::Autoregressive {
                CorruptionSample {
                    x0: seq.tokens.clone(),
                    xt: seq.tokens.clone(),
                    t: 0.0,
                    masked_positions: Vec::new(),
                }
            } else {
                let t = rng.next_f64() as f32;
                forward_corrupt(&seq.tokens, seq.prompt_len, t, schedule, rng)
            };
            masked += sample.masked_positions.len();
            eligible += seq.tokens.len() - seq.prompt_len;
            examples.push(build_example(
                &sample,
                seq.prompt_len,
                objective,
                weighting,
            )?);
            samples.push(sample);
            prompt_lens.push(seq.prompt_len);
        }
        if examples.iter().any(|e| !e.loss_positions.is_empty()) {
            return Ok(TrainingBatch {
                examples,
                samples,
                prompt_lens,
                masked_fraction: if eligible == 0 {
                    0.0
                } else {
                    masked as f32 / eligible as f32
                },
            });
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup: usize,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    pub min_lr_fraction: f32,
    /// Global gradient-norm clip; `0` disables.
    pub grad_clip: f32,
    pub weighting: LossWeighting,
    pub schedule: MaskSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 3e-3,
            warmup: 100,
            min_lr_fraction: 0.1,
            grad_clip: 1.0,
            weighting: LossWeighting::InverseT,
            schedule: MaskSchedule::Linear,
        }
    }
}

impl TrainConfig {
    fn lr_at(&self, step: usize) -> f32 {
        if step < self.warmup {
            return self.lr * (step + 1) as f32 / self.warmup as f32;
        }
        let span = (self.steps - self.warmup).max(1) as f32;
        let progress = ((step - self.warmup) as f32 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f32::consts::PI * progress).cos());
        self.lr * (self.min_lr_fraction + (1.0 - self.min_lr_fraction) * cos)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f32,
    pub masked_fraction: f32,
}

pub struct TrainOutcome {
    pub params: Parameters<f32>,
    pub curve: Vec<LossPoint>,
}

/// Train from scratch. Deterministic for a given `rng` seed.
pub fn train(
    model: &ModelConfig,
    objective: TrainingObjective,
    corpus: &[ConditionalSequence],
    hyper: &TrainConfig,
    rng: &RngState,
) -> Result<TrainOutcome> {
    train_with_progress(model, objective, corpus, hyper, rng, |_| {})
}

pub fn train_with_progress(
    model: &ModelConfig,
    objective: TrainingObjective,
    corpus: &[ConditionalSequence],
    hyper: &TrainConfig,
    rng: &RngState,
    mut progress: impl FnMut(&LossPoint),
) -> Result<TrainOutcome> {
    model.validate()?;
    if model.attention != objective.required_attention() {
        return Err(Error::Config(format!(
            "{objective:?} objective needs {:?} attention, model has {:?}",
            objective.required_attention(),
            model.attention
        )));
    }
    if let Some(s) = corpus.iter().find(|s| s.tokens.len() > model.max_seq) {
        return Err(Error::Config(format!(
            "corpus sequence of length {} exceeds max_seq {}",
            s.tokens.len(),
            model.max_seq
        )));
    }
    if hyper.steps == 0 || hyper.lr <= 0.0 {
        return Err(Error::Config("steps and lr must be positive".into()));
    }
    let mut params = init_params::<f32>(model, &rng.split(1))?;
    let mut opt = OptimizerState::new(&params.tensors(), hyper.lr);
    let data_rng = rng.split(2);
    let mut curve = Vec::with_capacity(hyper.steps);
    for step in 0..hyper.steps {
        let mut step_rng = data_rng.split(step as u64);
        let batch = training_batch(
            corpus,
            hyper.batch_size,
            objective,
            hyper.schedule,
            hyper.weighting,
            &mut step_rng,
        )?;
        let (loss, mut grads) = loss_and_grads(&params, &batch.examples).map_err(|e| match e {
            Error::Divergence(m) => Error::Divergence(format!("step {step}: {m}")),
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("step {step}: loss {loss}")));
        }
        if hyper.grad_clip > 0.0 {
            let norm = grads
                .tensors()
                .iter()
                .map(|t| t.sum_sq())
                .sum::<f32>()
                .sqrt();
            if !norm.is_finite() {
                return Err(Error::Divergence(format!(
                    "step {step}: gradient norm {norm}"
                )));
            }
            if norm > hyper.grad_clip {
                let k = hyper.grad_clip / norm;
                grads.tensors_mut().into_iter().for_each(|t| t.scale(k));
            }
        }
        opt.lr = hyper.lr_at(step);
        adam_step(&mut params.tensors_mut(), &grads.tensors(), &mut opt)
            .map_err(|e| Error::Divergence(format!("step {step}: {e}")))?;
        let point = LossPoint {
            step,
            loss,
            masked_fraction: batch.masked_fraction,
        };
        progress(&point);
        curve.push(point);
    }
    Ok(TrainOutcome { params, curve })
}

/// `step,loss,masked_fraction`
pub fn write_loss_csv(curve: &[LossPoint], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "step,loss,masked_fraction").unwrap();
    for p in curve {
        writeln!(out, "{},{},{}", p.step, p.loss, p.masked_fraction).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
