//! Inference strategies that emit a full per-step trace.
//!
//! - [`Strategy::BlockSemiAr`]: the generation region is split into blocks
//!   decoded left to right; inside the active block the most confident
//!   masked positions are unmasked, each predicted from its own row.
//! - [`Strategy::AnyPositionShift`]: every masked position is a candidate
//!   each step and is predicted from the row of its left neighbour.
//! - [`Strategy::Autoregressive`]: greedy left-to-right generation with a
//!   causal model.
//!
//! Unmasking is monotone: a position is never re-masked.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, AttentionMode, ForwardOutput, ModelConfig, Parameters};
use crate::numerics::{softmax_in_place, DenseMatrix, RngState};
use crate::sinkmetrics::column_sums;
use crate::vocab::{EOS, MASK, PAD};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask_flags: Vec<bool>,
    pub prompt_len: usize,
}

impl TokenSequence {
    /// `prompt` followed by `gen_len` masked positions.
    pub fn for_generation(prompt: &[u32], gen_len: usize) -> Self {
        let mut ids = prompt.to_vec();
        ids.extend(std::iter::repeat(MASK).take(gen_len));
        let mut mask_flags = vec![false; prompt.len()];
        mask_flags.extend(std::iter::repeat(true).take(gen_len));
        Self {
            ids,
            mask_flags,
            prompt_len: prompt.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn generated(&self) -> &[u32] {
        &self.ids[self.prompt_len..]
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.mask_flags.len() || self.prompt_len > self.ids.len() {
            return Err(Error::Format(
                "token sequence fields disagree in length".into(),
            ));
        }
        if self.mask_flags[..self.prompt_len].iter().any(|&m| m) {
            return Err(Error::Format("prompt position flagged as masked".into()));
        }
        if let Some(i) = (0..self.ids.len()).find(|&i| (self.ids[i] == MASK) != self.mask_flags[i])
        {
            return Err(Error::Format(format!(
                "position {i}: MASK id and mask flag disagree"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "block")]
    BlockSemiAr,
    #[serde(rename = "shift")]
    AnyPositionShift,
    #[serde(rename = "ar")]
    Autoregressive,
    /// Score-only traces imported from elsewhere; cannot be decoded.
    #[serde(rename = "external")]
    External,
}

impl Strategy {
    pub fn tag(&self) -> u8 {
        match self {
            Strategy::BlockSemiAr => 0,
            Strategy::AnyPositionShift => 1,
            Strategy::Autoregressive => 2,
            Strategy::External => 255,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        Some(match t {
            0 => Strategy::BlockSemiAr,
            1 => Strategy::AnyPositionShift,
            2 => Strategy::Autoregressive,
            255 => Strategy::External,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::BlockSemiAr => "block",
            Strategy::AnyPositionShift => "shift",
            Strategy::Autoregressive => "ar",
            Strategy::External => "external",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capture {
    /// Column scores only.
    #[default]
    Scores,
    /// Column scores plus full attention maps.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub gen_len: usize,
    pub block_size: usize,
    /// Denoising step budget (ignored by autoregressive decoding).
    pub total_steps: usize,
    /// 0 means greedy.
    pub temperature: f32,
    pub seed: u64,
    pub capture: Capture,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::BlockSemiAr,
            gen_len: 32,
            block_size: 8,
            total_steps: 32,
            temperature: 0.0,
            seed: 0,
            capture: Capture::Scores,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnmaskEvent {
    pub position: usize,
    pub token: u32,
    /// Row whose logits predicted this position.
    pub source: usize,
    pub confidence: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadCapture {
    pub layer: usize,
    pub head: usize,
    /// Column sums over the active region, zero-padded to the sequence length.
    pub scores: Vec<f32>,
    pub map: Option<DenseMatrix<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Number of leading positions the forward pass ran over.
    pub active_len: usize,
    /// Token ids at the start of the step.
    pub ids: Vec<u32>,
    /// Mask flags at the start of the step.
    pub mask_flags: Vec<bool>,
    pub unmasked: Vec<UnmaskEvent>,
    /// Layer-major, then head.
    pub heads: Vec<HeadCapture>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeTrace {
    pub config: DecodeConfig,
    pub seq_len: usize,
    pub prompt_len: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub steps: Vec<StepRecord>,
    pub final_sequence: TokenSequence,
}

/// A forward pass the decoders can drive. Implementations must return
/// captured attention for every layer and head.
pub trait StepModel {
    fn model_config(&self) -> &ModelConfig;
    fn step_forward(&mut self, step: usize, tokens: &[u32]) -> Result<ForwardOutput>;
}

/// Plain, uninstrumented forward passes.
pub struct PlainModel<'a>(pub &'a Parameters<f32>);

impl StepModel for PlainModel<'_> {
    fn model_config(&self) -> &ModelConfig {
        &self.0.config
    }

    fn step_forward(&mut self, _step: usize, tokens: &[u32]) -> Result<ForwardOutput> {
        forward(self.0, tokens, true, None)
    }
}

/// Greedy argmax and max-probability confidence of one logit row, with
/// `MASK` excluded from the output vocabulary.
fn predict_row(row: &[f32], temperature: f32, rng: &mut RngState) -> (u32, f32) {
    let mut probs = row.to_vec();
    if let Some(m) = probs.get_mut(MASK as usize) {
        *m = f32::NEG_INFINITY;
    }
    softmax_in_place(&mut probs).expect("finite logits");
    let mut best = 0usize;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    let confidence = probs[best];
    if temperature <= 0.0 {
        return (best as u32, confidence);
    }
    let mut tempered: Vec<f32> = row.iter().map(|&x| x / temperature).collect();
    if let Some(m) = tempered.get_mut(MASK as usize) {
        *m = f32::NEG_INFINITY;
    }
    softmax_in_place(&mut tempered).expect("finite logits");
    let u = rng.next_f64() as f32;
    let mut acc = 0.0;
    for (i, &p) in tempered.iter().enumerate() {
        acc += p;
        if u < acc {
            return (i as u32, confidence);
        }
    }
    let last = tempered.iter().rposition(|&p| p > 0.0).unwrap_or(best);
    (last as u32, confidence)
}

/// A masked position and the logit row that predicts it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Candidate {
    pub position: usize,
    pub source: usize,
}

/// Pick the `k` most confident candidates.
///
/// Confidence is the maximum softmax probability of the source row; ties go
/// to the lower position. With temperature 0 the token is the argmax.
pub fn confidence_select(
    logits: &DenseMatrix<f32>,
    candidates: &[Candidate],
    k: usize,
    temperature: f32,
    rng: &mut RngState,
) -> Result<Vec<UnmaskEvent>> {
    if k > candidates.len() {
        return Err(Error::Schedule(format!(
            "asked to unmask {k} positions from {} candidates",
            candidates.len()
        )));
    }
    let mut scored: Vec<UnmaskEvent> = candidates
        .iter()
        .map(|c| {
            let (token, confidence) = predict_row(logits.row(c.source), temperature, rng);
            UnmaskEvent {
                position: c.position,
                token,
                source: c.source,
                confidence,
            }
        })
        .collect();
    scored.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.position.cmp(&b.position))
    });
    scored.truncate(k);
    Ok(scored)
}

fn quota(remaining: usize, remaining_steps: usize) -> usize {
    remaining.div_ceil(remaining_steps)
}

fn capture_heads(
    out: &ForwardOutput,
    seq_len: usize,
    capture: Capture,
) -> Result<Vec<HeadCapture>> {
    let tensors = out
        .attention
        .as_ref()
        .ok_or_else(|| Error::Config("step model returned no attention capture".into()))?;
    tensors
        .iter()
        .map(|t| {
            let active = t.scores.rows();
            let mut scores = column_sums(&t.scores)?;
            scores.resize(seq_len, 0.0);
            let map = (capture == Capture::Full).then(|| {
                let mut m = DenseMatrix::zeros(seq_len, seq_len);
                m.add_submatrix(0, 0, &t.scores);
                m
            });
            debug_assert!(active <= seq_len);
            Ok(HeadCapture {
                layer: t.layer,
                head: t.head,
                scores,
                map,
            })
        })
        .collect()
}

fn check_fits(cfg: &ModelConfig, prompt: &[u32], dc: &DecodeConfig) -> Result<()> {
    if dc.gen_len == 0 {
        return Err(Error::Config("gen_len must be positive".into()));
    }
    let s = prompt.len() + dc.gen_len;
    if s > cfg.max_seq {
        return Err(Error::Config(format!(
            "prompt {} + gen_len {} exceeds max_seq {}",
            prompt.len(),
            dc.gen_len,
            cfg.max_seq
        )));
    }
    if let Some(t) = prompt
        .iter()
        .find(|&&t| t == MASK || t as usize >= cfg.vocab_size)
    {
        return Err(Error::Config(format!("prompt contains invalid token {t}")));
    }
    Ok(())
}

/// Steps per block for a block schedule, validating feasibility.
pub fn block_schedule(dc: &DecodeConfig) -> Result<usize> {
    if dc.block_size == 0 || dc.gen_len % dc.block_size != 0 {
        return Err(Error::Config(format!(
            "block_size {} must divide gen_len {}",
            dc.block_size, dc.gen_len
        )));
    }
    let n_blocks = dc.gen_len / dc.block_size;
    if dc.total_steps == 0 || dc.total_steps % n_blocks != 0 {
        return Err(Error::Config(format!(
            "total_steps {} must split evenly over {n_blocks} blocks",
            dc.total_steps
        )));
    }
    let per_block = dc.total_steps / n_blocks;
    if per_block > dc.block_size {
        return Err(Error::Config(format!(
            "{per_block} steps per block exceeds block size {}",
            dc.block_size
        )));
    }
    Ok(per_block)
}

struct Run<'m, M: StepModel> {
    model: &'m mut M,
    seq: TokenSequence,
    steps: Vec<StepRecord>,
    capture: Capture,
    rng: RngState,
}

impl<M: StepModel> Run<'_, M> {
    fn step(
        &mut self,
        active_len: usize,
        k: usize,
        temperature: f32,
        candidates: impl FnOnce(&TokenSequence) -> Vec<Candidate>,
    ) -> Result<Vec<UnmaskEvent>> {
        let t = self.steps.len();
        let out = self.model.step_forward(t, &self.seq.ids[..active_len])?;
        let heads = capture_heads(&out, self.seq.len(), self.capture)?;
        let cands = candidates(&self.seq);
        let mut step_rng = self.rng.split(t as u64);
        let events = confidence_select(&out.logits, &cands, k, temperature, &mut step_rng)?;
        self.steps.push(StepRecord {
            step: t,
            active_len,
            ids: self.seq.ids.clone(),
            mask_flags: self.seq.mask_flags.clone(),
            unmasked: events.clone(),
            heads,
        });
        for e in &events {
            self.seq.ids[e.position] = e.token;
            self.seq.mask_flags[e.position] = false;
        }
        Ok(events)
    }
}

/// Decode with any [`StepModel`], dispatching on `dc.strategy`.
pub fn decode<M: StepModel>(
    model: &mut M,
    prompt: &[u32],
    dc: &DecodeConfig,
) -> Result<DecodeTrace> {
    let cfg = model.model_config().clone();
    cfg.validate()?;
    check_fits(&cfg, prompt, dc)?;
    let expected_mode = match dc.strategy {
        Strategy::Autoregressive => AttentionMode::Causal,
        Strategy::External => {
            return Err(Error::Config("external traces cannot be decoded".into()))
        }
        _ => AttentionMode::Bidirectional,
    };
    if cfg.attention != expected_mode {
        return Err(Error::Config(format!(
            "{} decoding needs a {:?} model",
            dc.strategy.name(),
            expected_mode
        )));
    }
    let p = prompt.len();
    let mut run = Run {
        model,
        seq: TokenSequence::for_generation(prompt, dc.gen_len),
        steps: Vec::new(),
        capture: dc.capture,
        rng: RngState::new(dc.seed),
    };
    let s = run.seq.len();
    let temp = dc.temperature;
    match dc.strategy {
        Strategy::BlockSemiAr => {
            let per_block = block_schedule(dc)?;
            for b in 0..dc.gen_len / dc.block_size {
                let block = p + b * dc.block_size..p + (b + 1) * dc.block_size;
                for s_in in 0..per_block {
                    let remaining = block.clone().filter(|&i| run.seq.mask_flags[i]).count();
                    let k = quota(remaining, per_block - s_in);
                    let range = block.clone();
                    run.step(s, k, temp, |seq| {
                        range
                            .filter(|&i| seq.mask_flags[i])
                            .map(|i| Candidate {
                                position: i,
                                source: i,
                            })
                            .collect()
                    })?;
                }
            }
        }
        Strategy::AnyPositionShift => {
            if dc.total_steps == 0 || dc.total_steps > dc.gen_len {
                return Err(Error::Config(format!(
                    "total_steps {} must be in 1..={}",
                    dc.total_steps, dc.gen_len
                )));
            }
            if p == 0 {
                return Err(Error::Schedule(
                    "position 0 has no left neighbour to predict it under the shift objective"
                        .into(),
                ));
            }
            for t in 0..dc.total_steps {
                let remaining = run.seq.mask_flags.iter().filter(|&&m| m).count();
                let k = quota(remaining, dc.total_steps - t);
                run.step(s, k, temp, |seq| {
                    (1..seq.len())
                        .filter(|&i| seq.mask_flags[i])
                        .map(|i| Candidate {
                            position: i,
                            source: i - 1,
                        })
                        .collect()
                })?;
            }
        }
        Strategy::Autoregressive => {
            if p == 0 {
                return Err(Error::Config(
                    "autoregressive decoding needs a non-empty prompt".into(),
                ));
            }
            for t in 0..dc.gen_len {
                let pos = p + t;
                let events = run.step(pos, 1, temp, |_| {
                    vec![Candidate {
                        position: pos,
                        source: pos - 1,
                    }]
                })?;
                if events[0].token == EOS {
                    for i in pos + 1..s {
                        run.seq.ids[i] = PAD;
                        run.seq.mask_flags[i] = false;
                    }
                    break;
                }
            }
        }
        Strategy::External => unreachable!(),
    }
    Ok(DecodeTrace {
        config: dc.clone(),
        seq_len: s,
        prompt_len: p,
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        vocab_size: cfg.vocab_size,
        steps: run.steps,
        final_sequence: run.seq,
    })
}

pub fn decode_block_semi_ar(
    params: &Parameters<f32>,
    prompt: &[u32],
    dc: &DecodeConfig,
) -> Result<DecodeTrace> {
    expect_strategy(dc, Strategy::BlockSemiAr)?;
    decode(&mut PlainModel(params), prompt, dc)
}

pub fn decode_any_position_shift(
    params: &Parameters<f32>,
    prompt: &[u32],
    dc: &DecodeConfig,
) -> Result<DecodeTrace> {
    expect_strategy(dc, Strategy::AnyPositionShift)?;
    decode(&mut PlainModel(params), prompt, dc)
}

pub fn decode_autoregressive(
    params: &Parameters<f32>,
    prompt: &[u32],
    dc: &DecodeConfig,
) -> Result<DecodeTrace> {
    expect_strategy(dc, Strategy::Autoregressive)?;
    decode(&mut PlainModel(params), prompt, dc)
}

fn expect_strategy(dc: &DecodeConfig, s: Strategy) -> Result<()> {
    if dc.strategy != s {
        return Err(Error::Config(format!(
            "decode config selects {}, expected {}",
            dc.strategy.name(),
            s.name()
        )));
    }
    Ok(())
}

/// Every decoding invariant that `trace` violates, as human-readable lines.
///
/// Checks monotone unmasking, that unmasked positions were masked at step
/// start, per-step quotas, block containment, shift sources, and a fully
/// unmasked final generation region.
pub fn invariant_violations(trace: &DecodeTrace) -> Vec<String> {
    let mut v = Vec::new();
    let dc = &trace.config;
    let p = trace.prompt_len;
    let s = trace.seq_len;
    let per_block = if dc.strategy == Strategy::BlockSemiAr {
        block_schedule(dc).ok()
    } else {
        None
    };
    let mut total = 0usize;
    for (t, rec) in trace.steps.iter().enumerate() {
        if rec.step != t {
            v.push(format!("step {t}: recorded index {}", rec.step));
        }
        let next_flags = trace
            .steps
            .get(t + 1)
            .map(|r| &r.mask_flags)
            .unwrap_or(&trace.final_sequence.mask_flags);
        for i in 0..s {
            if !rec.mask_flags[i] && next_flags[i] {
                v.push(format!("step {t}: position {i} re-masked"));
            }
        }
        for e in &rec.unmasked {
            if !rec.mask_flags[e.position] {
                v.push(format!("step {t}: position {} was not masked", e.position));
            }
            if next_flags[e.position] {
                v.push(format!(
                    "step {t}: position {} still masked after unmasking",
                    e.position
                ));
            }
        }
        let remaining = rec.mask_flags.iter().filter(|&&m| m).count();
        let n = rec.unmasked.len();
        total += n;
        match dc.strategy {
            Strategy::BlockSemiAr => {
                if let Some(pb) = per_block {
                    let b = t / pb;
                    let block = p + b * dc.block_size..p + (b + 1) * dc.block_size;
                    let in_block = block.clone().filter(|&i| rec.mask_flags[i]).count();
                    let q = quota(in_block, pb - t % pb);
                    if n != q {
                        v.push(format!("step {t}: {n} unmasked, quota {q}"));
                    }
                    for e in &rec.unmasked {
                        if !block.contains(&e.position) {
                            v.push(format!(
                                "step {t}: position {} outside active block {block:?}",
                                e.position
                            ));
                        }
                        if e.source != e.position {
                            v.push(format!(
                                "step {t}: identity source {} != {}",
                                e.source, e.position
                            ));
                        }
                    }
                } else {
                    v.push("infeasible block schedule".into());
                }
            }
            Strategy::AnyPositionShift => {
                let q = quota(remaining, dc.total_steps.saturating_sub(t).max(1));
                if n != q {
                    v.push(format!("step {t}: {n} unmasked, quota {q}"));
                }
                for e in &rec.unmasked {
                    if e.source + 1 != e.position {
                        v.push(format!(
                            "step {t}: shift source {} for position {}",
                            e.source, e.position
                        ));
                    }
                }
            }
            Strategy::Autoregressive => {
                if n != 1 || rec.unmasked[0].position != p + t {
                    v.push(format!(
                        "step {t}: autoregressive step must append position {}",
                        p + t
                    ));
                }
                if rec.active_len != p + t {
                    v.push(format!(
                        "step {t}: active length {} != {}",
                        rec.active_len,
                        p + t
                    ));
                }
            }
            Strategy::External => {}
        }
    }
    let fin = &trace.final_sequence;
    if fin.mask_flags.iter().any(|&m| m) || fin.ids.iter().any(|&i| i == MASK) {
        v.push("final sequence still has masked positions".into());
    }
    let early_stop = dc.strategy == Strategy::Autoregressive
        && trace
            .steps
            .last()
            .is_some_and(|r| r.unmasked.first().is_some_and(|e| e.token == EOS));
    if dc.strategy != Strategy::External && total != dc.gen_len && !early_stop {
        v.push(format!(
            "{total} positions unmasked in total, gen_len {}",
            dc.gen_len
        ));
    }
    v
}
