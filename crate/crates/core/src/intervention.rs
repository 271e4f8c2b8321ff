//! Top-K sink masking during generation.
//!
//! Each step runs twice. Pass 1 captures clean attention and ranks positions
//! by their column score averaged over all layers and heads. Pass 2 re-runs
//! the step with attention logits toward the top-K positions set to `-inf`,
//! and its logits drive unmasking.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoding::{DecodeConfig, StepModel};
use crate::error::{Error, Result};
use crate::evalharness::{evaluate, EvalResult, Example, TableEntry};
use crate::model::{
    forward, AttentionMode, AttentionTensor, ForwardOutput, KeepOneFallback, LogitOverride,
    ModelConfig, OverrideRule, Parameters,
};
use crate::sinkmetrics::column_sums;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskPolicy {
    /// Number of sinks masked per step; 0 is the control run.
    pub top_k: usize,
    /// Never mask prompt positions.
    pub protect_prompt: bool,
    /// Rank and mask per (layer, head) instead of globally.
    pub per_head: bool,
}

/// Positions ranked by mean column score across all heads; ties go to the
/// lower position.
pub fn rank_sinks_global(atts: &[AttentionTensor<f32>]) -> Result<Vec<usize>> {
    let first = atts
        .first()
        .ok_or_else(|| Error::Config("no attention tensors to rank".into()))?;
    let s = first.scores.cols();
    let mut mean = vec![0.0f64; s];
    for a in atts {
        if a.scores.cols() != s {
            return Err(Error::Shape("attention tensors disagree in width".into()));
        }
        for (m, x) in mean.iter_mut().zip(column_sums(&a.scores)?) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= atts.len() as f64);
    Ok(rank_by(&mean))
}

fn rank_by(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Forward with attention toward `positions` suppressed in every layer and head.
pub fn apply_sink_mask(
    params: &Parameters<f32>,
    tokens: &[u32],
    positions: &[usize],
) -> Result<ForwardOutput> {
    forward(
        params,
        tokens,
        true,
        Some(&LogitOverride::mask_keys(positions)),
    )
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepMaskLog {
    pub step: usize,
    /// Masked positions, strongest first. For per-head policies this is the
    /// union over heads in first-seen order.
    pub positions: Vec<usize>,
    /// Rows that kept one key because every visible key was masked.
    pub fallbacks: Vec<KeepOneFallback>,
}

/// A [`StepModel`] that applies a [`MaskPolicy`] with two passes per step.
pub struct SinkMaskingModel<'a> {
    params: &'a Parameters<f32>,
    policy: MaskPolicy,
    prompt_len: usize,
    log: Vec<StepMaskLog>,
}

impl<'a> SinkMaskingModel<'a> {
    pub fn new(params: &'a Parameters<f32>, policy: MaskPolicy, prompt_len: usize) -> Self {
        Self {
            params,
            policy,
            prompt_len,
            log: Vec::new(),
        }
    }

    pub fn log(&self) -> &[StepMaskLog] {
        &self.log
    }

    pub fn into_log(self) -> Vec<StepMaskLog> {
        self.log
    }

    fn pick(&self, ranking: Vec<usize>) -> Vec<usize> {
        ranking
            .into_iter()
            .filter(|&j| !(self.policy.protect_prompt && j < self.prompt_len))
            .take(self.policy.top_k)
            .collect()
    }
}

impl StepModel for SinkMaskingModel<'_> {
    fn model_config(&self) -> &ModelConfig {
        &self.params.config
    }

    fn step_forward(&mut self, step: usize, tokens: &[u32]) -> Result<ForwardOutput> {
        if self.policy.top_k == 0 {
            self.log.push(StepMaskLog {
                step,
                positions: Vec::new(),
                fallbacks: Vec::new(),
            });
            return forward(self.params, tokens, true, None);
        }
        if self.policy.top_k > self.params.config.max_seq {
            return Err(Error::Config(format!(
                "top_k {} exceeds max_seq {}",
                self.policy.top_k, self.params.config.max_seq
            )));
        }
        let clean = forward(self.params, tokens, true, None)?;
        let atts = clean.attention.as_deref().unwrap_or_default();
        let (rules, positions) = if self.policy.per_head {
            let mut rules = Vec::new();
            let mut union: Vec<usize> = Vec::new();
            for a in atts {
                let sums: Vec<f64> = column_sums(&a.scores)?.into_iter().map(f64::from).collect();
                let keys = self.pick(rank_by(&sums));
                for &k in &keys {
                    if !union.contains(&k) {
                        union.push(k);
                    }
                }
                rules.push(OverrideRule {
                    layer: Some(a.layer),
                    head: Some(a.head),
                    queries: None,
                    keys,
                });
            }
            (LogitOverride { rules }, union)
        } else {
            let keys = self.pick(rank_sinks_global(atts)?);
            (LogitOverride::mask_keys(&keys), keys)
        };
        let out = forward(self.params, tokens, true, Some(&rules))?;
        self.log.push(StepMaskLog {
            step,
            positions,
            fallbacks: out.fallbacks.clone(),
        });
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterventionReport {
    pub task: String,
    pub model_id: String,
    pub policy: MaskPolicy,
    pub decode: DecodeConfig,
    pub baseline: f64,
    pub ablated: f64,
    pub n_examples: usize,
    /// Per example, per step.
    pub mask_log: Vec<Vec<StepMaskLog>>,
}

/// Baseline and ablated accuracy for one policy.
pub fn ablation_run(
    params: &Parameters<f32>,
    task: &str,
    model_id: &str,
    examples: &[Example],
    dc: &DecodeConfig,
    policy: &MaskPolicy,
) -> Result<InterventionReport> {
    let base = evaluate(params, task, model_id, examples, dc, None)?;
    Ok(report_from(
        &base,
        &evaluate(params, task, model_id, examples, dc, Some(policy))?,
        dc,
        policy,
    ))
}

/// One baseline shared by several K values.
pub fn ablation_sweep(
    params: &Parameters<f32>,
    task: &str,
    model_id: &str,
    examples: &[Example],
    dc: &DecodeConfig,
    base_policy: &MaskPolicy,
    ks: &[usize],
) -> Result<Vec<InterventionReport>> {
    let base = evaluate(params, task, model_id, examples, dc, None)?;
    ks.iter()
        .map(|&k| {
            let policy = MaskPolicy {
                top_k: k,
                ..base_policy.clone()
            };
            let abl = evaluate(params, task, model_id, examples, dc, Some(&policy))?;
            Ok(report_from(&base, &abl, dc, &policy))
        })
        .collect()
}

fn report_from(
    base: &EvalResult,
    abl: &EvalResult,
    dc: &DecodeConfig,
    policy: &MaskPolicy,
) -> InterventionReport {
    InterventionReport {
        task: base.task.clone(),
        model_id: base.model_id.clone(),
        policy: policy.clone(),
        decode: dc.clone(),
        baseline: base.accuracy,
        ablated: abl.accuracy,
        n_examples: base.n,
        mask_log: abl.records.iter().map(|r| r.mask_log.clone()).collect(),
    }
}

/// `task,strategy,top_k,baseline,ablated,n_examples,seed`
pub fn reports_csv(reports: &[InterventionReport]) -> String {
    let mut s = String::from("task,strategy,top_k,baseline,ablated,n_examples,seed\n");
    for r in reports {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.task,
            r.decode.strategy.name(),
            r.policy.top_k,
            r.baseline,
            r.ablated,
            r.n_examples,
            r.decode.seed
        )
        .unwrap();
    }
    s
}

/// `example,step,rank,position`
pub fn mask_log_csv(report: &InterventionReport) -> String {
    let mut s = String::from("example,step,rank,position\n");
    for (e, steps) in report.mask_log.iter().enumerate() {
        for st in steps {
            for (rank, p) in st.positions.iter().enumerate() {
                writeln!(s, "{e},{},{rank},{p}", st.step).unwrap();
            }
        }
    }
    s
}

/// Table cells for a set of reports: one unmasked row per (task, model)
/// plus one row per K > 0.
pub fn table_entries(reports: &[InterventionReport]) -> Vec<TableEntry> {
    let mut out: Vec<TableEntry> = Vec::new();
    for r in reports {
        let base = TableEntry {
            task: r.task.clone(),
            column: r.model_id.clone(),
            top_k: None,
            accuracy: r.baseline,
            n: r.n_examples,
        };
        if !out.contains(&base) {
            out.push(base);
        }
        if r.policy.top_k > 0 {
            out.push(TableEntry {
                top_k: Some(r.policy.top_k),
                accuracy: r.ablated,
                ..out.last().unwrap().clone()
            });
        }
    }
    out
}

pub fn write_reports(dir: &Path, reports: &[InterventionReport]) -> Result<()> {
    let p = dir.join("ablation.csv");
    std::fs::write(&p, reports_csv(reports)).map_err(|e| Error::io(&p, e))?;
    let table = crate::evalharness::compare_table(&table_entries(reports));
    let p = dir.join("ablation_table.md");
    std::fs::write(&p, &table.markdown).map_err(|e| Error::io(&p, e))?;
    let p = dir.join("ablation_table.csv");
    std::fs::write(&p, &table.csv).map_err(|e| Error::io(&p, e))?;
    for r in reports {
        let p = dir.join(format!("mask_log_{}_k{}.csv", r.model_id, r.policy.top_k));
        std::fs::write(&p, mask_log_csv(r)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Markdown run summary: the comparison table, accuracy drop per model at
/// K=1, and whether causal models dropped at least as much as bidirectional
/// ones. The direction is an observation, not a check.
pub fn robustness_summary(
    reports: &[InterventionReport],
    modes: &[(String, AttentionMode)],
) -> String {
    let mut s = crate::evalharness::compare_table(&table_entries(reports)).markdown;
    let drop_at_1 = |id: &str| {
        reports
            .iter()
            .find(|r| r.model_id == id && r.policy.top_k == 1)
            .map(|r| r.baseline - r.ablated)
    };
    s.push('\n');
    for (id, mode) in modes {
        if let Some(d) = drop_at_1(id) {
            writeln!(s, "- {id} ({mode:?}): accuracy drop at K=1 = {d:+.3}").unwrap();
        }
    }
    let worst = |m: AttentionMode| {
        modes
            .iter()
            .filter(|(_, x)| *x == m)
            .filter_map(|(id, _)| drop_at_1(id))
            .reduce(f64::max)
    };
    match (
        worst(AttentionMode::Causal),
        worst(AttentionMode::Bidirectional),
    ) {
        (Some(arm), Some(dlm)) => writeln!(
            s,
            "- expected direction (causal drop >= bidirectional drop at K=1): {}",
            if arm >= dlm {
                "observed"
            } else {
                "not observed"
            }
        )
        .unwrap(),
        _ => writeln!(
            s,
            "- expected direction: needs one causal and one bidirectional model"
        )
        .unwrap(),
    }
    s
}
