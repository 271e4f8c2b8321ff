//! Cumulative attention scores, sink detection and trajectory analysis.
//!
//! Scores are column sums `s_j = Σ_i A_ij` of a row-stochastic map, so a
//! uniform map gives `s_j = 1` and the scores of one map total `S`. Position
//! `j` is a sink when `s_j > mean_{k≠j} s_k + ε`.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::decoding::DecodeTrace;
use crate::error::{Error, Result};
use crate::model::AttentionTensor;
use crate::numerics::DenseMatrix;

pub const DEFAULT_EPSILON: f64 = 3.0;
const ROW_TOLERANCE: f64 = 1e-4;

/// Column sums of a row-stochastic map, accumulated in f64.
pub fn column_sums(att: &DenseMatrix<f32>) -> Result<Vec<f32>> {
    let mut acc = vec![0.0f64; att.cols()];
    for i in 0..att.rows() {
        let row = att.row(i);
        let mut total = 0.0f64;
        for (a, &x) in acc.iter_mut().zip(row) {
            if !(x >= 0.0) || !x.is_finite() {
                return Err(Error::MalformedAttention(format!("row {i} has entry {x}")));
            }
            *a += x as f64;
            total += x as f64;
        }
        if (total - 1.0).abs() > ROW_TOLERANCE {
            return Err(Error::MalformedAttention(format!(
                "row {i} sums to {total}"
            )));
        }
    }
    Ok(acc.into_iter().map(|x| x as f32).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ColumnScore {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub position: usize,
    pub score: f32,
}

pub fn cumulative_scores(att: &AttentionTensor<f32>, step: usize) -> Result<Vec<ColumnScore>> {
    Ok(column_sums(&att.scores)?
        .into_iter()
        .enumerate()
        .map(|(position, score)| ColumnScore {
            step,
            layer: att.layer,
            head: att.head,
            position,
            score,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sink {
    pub position: usize,
    pub score: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SinkSet {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub epsilon: f64,
    /// Descending score, ties by position.
    pub sinks: Vec<Sink>,
}

/// Positions satisfying the sink predicate, strongest first.
pub fn detect_sinks(scores: &[f32], epsilon: f64) -> Result<Vec<Sink>> {
    let s = scores.len();
    if s < 2 {
        return Err(Error::UndefinedMean(s));
    }
    if epsilon.is_nan() {
        return Err(Error::Config("epsilon is NaN".into()));
    }
    let mut out: Vec<Sink> = (0..s)
        .filter(|&j| {
            let others: f64 = (0..s).filter(|&k| k != j).map(|k| scores[k] as f64).sum();
            scores[j] as f64 > others / (s - 1) as f64 + epsilon
        })
        .map(|j| Sink {
            position: j,
            score: scores[j],
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.position.cmp(&b.position))
    });
    Ok(out)
}

/// One (step, layer, head) score vector of a trace, restricted to the
/// positions the forward pass actually ran over.
#[derive(Clone, Copy, Debug)]
pub struct Cell<'a> {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub scores: &'a [f32],
}

pub fn cells(trace: &DecodeTrace) -> impl Iterator<Item = Cell<'_>> {
    trace.steps.iter().flat_map(|rec| {
        rec.heads.iter().map(move |h| Cell {
            step: rec.step,
            layer: h.layer,
            head: h.head,
            scores: &h.scores[..rec.active_len.min(h.scores.len())],
        })
    })
}

pub fn trace_scores(trace: &DecodeTrace) -> Vec<ColumnScore> {
    cells(trace)
        .flat_map(|c| {
            c.scores
                .iter()
                .enumerate()
                .map(move |(position, &score)| ColumnScore {
                    step: c.step,
                    layer: c.layer,
                    head: c.head,
                    position,
                    score,
                })
        })
        .collect()
}

/// Sink sets for every cell of a trace, in step/layer/head order.
///
/// A cell with a single active position (an autoregressive step over a
/// one-token prefix) has no defined comparison mean and gets an empty set.
pub fn trace_sink_sets(trace: &DecodeTrace, epsilon: f64) -> Result<Vec<SinkSet>> {
    let cells: Vec<Cell> = cells(trace).collect();
    cells
        .par_iter()
        .map(|c| {
            Ok(SinkSet {
                step: c.step,
                layer: c.layer,
                head: c.head,
                epsilon,
                sinks: if c.scores.len() < 2 {
                    Vec::new()
                } else {
                    detect_sinks(c.scores, epsilon)?
                },
            })
        })
        .collect()
}

/// Per-layer scores averaged over heads, for head-aggregated analyses.
pub fn head_mean_scores(trace: &DecodeTrace, step: usize, layer: usize) -> Option<Vec<f32>> {
    let rec = trace.steps.get(step)?;
    let heads: Vec<&[f32]> = rec
        .heads
        .iter()
        .filter(|h| h.layer == layer)
        .map(|h| &h.scores[..rec.active_len])
        .collect();
    if heads.is_empty() {
        return None;
    }
    let n = heads.len() as f64;
    Some(
        (0..rec.active_len)
            .map(|j| (heads.iter().map(|h| h[j] as f64).sum::<f64>() / n) as f32)
            .collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub epsilon: f64,
    pub fraction: f64,
}

/// Fraction of positions flagged at each ε, averaged over all cells with at
/// least two positions.
pub fn epsilon_sweep(traces: &[DecodeTrace], grid: &[f64]) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        return Err(Error::Config("empty epsilon grid".into()));
    }
    let cells: Vec<Cell> = traces
        .iter()
        .flat_map(cells)
        .filter(|c| c.scores.len() >= 2)
        .collect();
    if cells.is_empty() {
        return Err(Error::Config("no attention cells to sweep".into()));
    }
    grid.iter()
        .map(|&epsilon| {
            let total: f64 = cells
                .par_iter()
                .map(|c| Ok(detect_sinks(c.scores, epsilon)?.len() as f64 / c.scores.len() as f64))
                .collect::<Result<Vec<f64>>>()?
                .iter()
                .sum();
            Ok(SweepPoint {
                epsilon,
                fraction: total / cells.len() as f64,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryEvent {
    Appeared { step: usize, position: usize },
    Moved { step: usize, from: usize, to: usize },
    Vanished { step: usize, position: usize },
    Persisted { step: usize, position: usize },
}

impl TrajectoryEvent {
    pub fn step(&self) -> usize {
        match *self {
            TrajectoryEvent::Appeared { step, .. }
            | TrajectoryEvent::Moved { step, .. }
            | TrajectoryEvent::Vanished { step, .. }
            | TrajectoryEvent::Persisted { step, .. } => step,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            TrajectoryEvent::Appeared { position, .. } => format!("appeared:{position}"),
            TrajectoryEvent::Moved { from, to, .. } => format!("moved:{from}->{to}"),
            TrajectoryEvent::Vanished { position, .. } => format!("vanished:{position}"),
            TrajectoryEvent::Persisted { position, .. } => format!("persisted:{position}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Static,
    Moving,
    Intermittent,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SinkTrajectory {
    pub layer: usize,
    pub head: usize,
    pub steps: Vec<usize>,
    /// Top sink per step, if any.
    pub tops: Vec<Option<Sink>>,
    pub events: Vec<TrajectoryEvent>,
    pub classification: Classification,
}

impl SinkTrajectory {
    pub fn moved_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, TrajectoryEvent::Moved { .. }))
            .count()
    }
}

/// Events between consecutive steps of a top-sink series.
pub fn trajectory_events(steps: &[usize], tops: &[Option<usize>]) -> Vec<TrajectoryEvent> {
    let mut out = Vec::new();
    for t in 1..tops.len() {
        let step = steps[t];
        match (tops[t - 1], tops[t]) {
            (None, Some(position)) => out.push(TrajectoryEvent::Appeared { step, position }),
            (Some(position), None) => out.push(TrajectoryEvent::Vanished { step, position }),
            (Some(from), Some(to)) if from != to => {
                out.push(TrajectoryEvent::Moved { step, from, to })
            }
            (Some(position), Some(_)) => out.push(TrajectoryEvent::Persisted { step, position }),
            (None, None) => {}
        }
    }
    out
}

/// `none` below 10% presence; `static` when one position is top sink in at
/// least 90% of all steps; `moving` when two or more positions each hold at
/// least 20% of the sink-present steps; otherwise `intermittent`.
pub fn classify(tops: &[Option<usize>]) -> Classification {
    let n = tops.len();
    let present = tops.iter().flatten().count();
    if n == 0 || (present as f64) < 0.1 * n as f64 {
        return Classification::None;
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &p in tops.iter().flatten() {
        *counts.entry(p).or_default() += 1;
    }
    if counts.values().any(|&c| c as f64 >= 0.9 * n as f64) {
        return Classification::Static;
    }
    let heavy = counts
        .values()
        .filter(|&&c| c as f64 >= 0.2 * present as f64)
        .count();
    if heavy >= 2 {
        Classification::Moving
    } else {
        Classification::Intermittent
    }
}

/// One trajectory per (layer, head), ordered by layer then head.
pub fn track_trajectories(sets: &[SinkSet]) -> Vec<SinkTrajectory> {
    let mut by_head: BTreeMap<(usize, usize), Vec<&SinkSet>> = BTreeMap::new();
    for s in sets {
        by_head.entry((s.layer, s.head)).or_default().push(s);
    }
    by_head
        .into_iter()
        .map(|((layer, head), mut series)| {
            series.sort_by_key(|s| s.step);
            let steps: Vec<usize> = series.iter().map(|s| s.step).collect();
            let tops: Vec<Option<Sink>> = series.iter().map(|s| s.sinks.first().copied()).collect();
            let positions: Vec<Option<usize>> =
                tops.iter().map(|t| t.map(|s| s.position)).collect();
            SinkTrajectory {
                layer,
                head,
                events: trajectory_events(&steps, &positions),
                classification: classify(&positions),
                steps,
                tops,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SplitScore {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub position: usize,
    pub masked: Option<f32>,
    pub unmasked: Option<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitAnalysis {
    pub scores: Vec<SplitScore>,
    pub masked_top: Option<usize>,
    pub unmasked_top: Option<usize>,
    /// Both subsets present and their top positions differ.
    pub divergent: bool,
}

fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, &x) in v.iter().enumerate() {
        if best.map_or(true, |b| x > v[b]) {
            best = Some(j);
        }
    }
    best
}

/// Column scores restricted to masked and to unmasked query rows.
///
/// Each subset score is `S · mean_{i∈R} A_ij`, so it is 1 under uniform
/// attention whatever the subset size.
pub fn split_scores(
    att: &DenseMatrix<f32>,
    mask_flags: &[bool],
    step: usize,
    layer: usize,
    head: usize,
) -> Result<SplitAnalysis> {
    let s = att.rows();
    if att.cols() != s || mask_flags.len() != s {
        return Err(Error::Shape(format!(
            "split scores need a square map matching {} mask flags, got {:?}",
            mask_flags.len(),
            att.shape()
        )));
    }
    column_sums(att)?;
    let subset = |want: bool| -> Option<Vec<f64>> {
        let rows: Vec<usize> = (0..s).filter(|&i| mask_flags[i] == want).collect();
        if rows.is_empty() {
            return None;
        }
        let mut acc = vec![0.0f64; s];
        for &i in &rows {
            for (a, &x) in acc.iter_mut().zip(att.row(i)) {
                *a += x as f64;
            }
        }
        let scale = s as f64 / rows.len() as f64;
        Some(acc.into_iter().map(|x| x * scale).collect())
    };
    let masked = subset(true);
    let unmasked = subset(false);
    let masked_top = masked.as_deref().and_then(argmax);
    let unmasked_top = unmasked.as_deref().and_then(argmax);
    let scores = (0..s)
        .map(|position| SplitScore {
            step,
            layer,
            head,
            position,
            masked: masked.as_ref().map(|m| m[position] as f32),
            unmasked: unmasked.as_ref().map(|u| u[position] as f32),
        })
        .collect();
    Ok(SplitAnalysis {
        scores,
        masked_top,
        unmasked_top,
        divergent: matches!((masked_top, unmasked_top), (Some(a), Some(b)) if a != b),
    })
}

/// Split scores for every cell of a trace that carries full maps.
pub fn trace_split_scores(trace: &DecodeTrace) -> Result<Vec<SplitAnalysis>> {
    let mut out = Vec::new();
    for rec in &trace.steps {
        for h in &rec.heads {
            let Some(map) = &h.map else {
                return Err(Error::Config(
                    "split scores need full attention maps".into(),
                ));
            };
            let n = rec.active_len;
            let active = map.submatrix(0, n, 0, n);
            out.push(split_scores(
                &active,
                &rec.mask_flags[..n],
                rec.step,
                h.layer,
                h.head,
            )?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
    pub log_count: f64,
}

pub const HISTOGRAM_FLOOR: f64 = 1e-3;
pub const HISTOGRAM_BINS: usize = 50;

/// Histogram of every score in the traces: one underflow bin `[0, 1e-3)`
/// followed by log-spaced bins over `[1e-3, S_max]`.
pub fn attention_histogram(traces: &[DecodeTrace], bins: usize) -> Result<Vec<HistogramBin>> {
    if traces.is_empty() || bins == 0 {
        return Err(Error::Config(
            "histogram needs at least one trace and one bin".into(),
        ));
    }
    let s_max = traces.iter().map(|t| t.seq_len).max().unwrap_or(1).max(2) as f64;
    let (lo, hi) = (HISTOGRAM_FLOOR.ln(), s_max.ln());
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins + 1];
    for c in traces.iter().flat_map(cells) {
        for &x in c.scores {
            let x = x as f64;
            let idx = if x < HISTOGRAM_FLOOR {
                0
            } else {
                1 + (((x.ln() - lo) / width) as usize).min(bins - 1)
            };
            counts[idx] += 1;
        }
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| {
            let (a, b) = if i == 0 {
                (0.0, HISTOGRAM_FLOOR)
            } else {
                (
                    (lo + (i - 1) as f64 * width).exp(),
                    (lo + i as f64 * width).exp(),
                )
            };
            HistogramBin {
                lo: a,
                hi: b,
                count,
                log_count: (1.0 + count as f64).log10(),
            }
        })
        .collect())
}

/// Mean over steps of the largest score, per layer (rows) and head (columns).
pub fn layer_head_map(traces: &[DecodeTrace]) -> Result<DenseMatrix<f64>> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Config("layer-head map needs at least one trace".into()))?;
    let (l, h) = (first.n_layers, first.n_heads);
    let mut sum = DenseMatrix::<f64>::zeros(l, h);
    let mut n = DenseMatrix::<f64>::zeros(l, h);
    for c in traces.iter().flat_map(cells) {
        if c.layer >= l || c.head >= h {
            return Err(Error::Shape(format!(
                "cell ({}, {}) outside {l}×{h}",
                c.layer, c.head
            )));
        }
        let top = c.scores.iter().fold(f32::MIN, |a, &b| a.max(b)) as f64;
        sum.set(c.layer, c.head, sum.get(c.layer, c.head) + top);
        n.set(c.layer, c.head, n.get(c.layer, c.head) + 1.0);
    }
    for i in 0..l {
        for j in 0..h {
            let k = n.get(i, j);
            sum.set(i, j, if k > 0.0 { sum.get(i, j) / k } else { 0.0 });
        }
    }
    Ok(sum)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

fn write_rows<R: Serialize>(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = R>,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_scores_csv(path: &Path, scores: &[ColumnScore]) -> Result<()> {
    write_rows(
        path,
        &["step", "layer", "head", "position", "score"],
        scores
            .iter()
            .map(|c| (c.step, c.layer, c.head, c.position, c.score)),
    )
}

pub fn write_sinks_csv(path: &Path, sets: &[SinkSet]) -> Result<()> {
    write_rows(
        path,
        &[
            "step", "layer", "head", "position", "score", "epsilon", "rank",
        ],
        sets.iter().flat_map(|s| {
            s.sinks.iter().enumerate().map(move |(rank, k)| {
                (
                    s.step, s.layer, s.head, k.position, k.score, s.epsilon, rank,
                )
            })
        }),
    )
}

/// One row per (layer, head, step): the top sink, the event entering that
/// step, and the series classification.
pub fn write_trajectories_csv(path: &Path, trajectories: &[SinkTrajectory]) -> Result<()> {
    let mut rows = Vec::new();
    for tr in trajectories {
        let class = match tr.classification {
            Classification::Static => "static",
            Classification::Moving => "moving",
            Classification::Intermittent => "intermittent",
            Classification::None => "none",
        };
        for (i, &step) in tr.steps.iter().enumerate() {
            let event = tr
                .events
                .iter()
                .find(|e| e.step() == step)
                .map(|e| e.label())
                .unwrap_or_default();
            let (pos, score) = match tr.tops[i] {
                Some(s) => (s.position.to_string(), s.score.to_string()),
                None => (String::new(), String::new()),
            };
            rows.push((tr.layer, tr.head, step, pos, score, event, class));
        }
    }
    write_rows(
        path,
        &[
            "layer",
            "head",
            "step",
            "top_position",
            "top_score",
            "event",
            "classification",
        ],
        rows,
    )
}

pub fn write_histogram_csv(path: &Path, bins: &[HistogramBin]) -> Result<()> {
    write_rows(
        path,
        &["bin_lo", "bin_hi", "count", "log_count"],
        bins.iter().map(|b| (b.lo, b.hi, b.count, b.log_count)),
    )
}

pub fn write_layerhead_csv(path: &Path, map: &DenseMatrix<f64>) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["layer".to_string()];
    header.extend((0..map.cols()).map(|h| format!("head_{h}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for l in 0..map.rows() {
        let mut rec = vec![l.to_string()];
        rec.extend(map.row(l).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_epsilon_csv(path: &Path, sweep: &[SweepPoint]) -> Result<()> {
    write_rows(
        path,
        &["epsilon", "fraction"],
        sweep.iter().map(|p| (p.epsilon, p.fraction)),
    )
}

pub fn write_splits_csv(path: &Path, splits: &[SplitAnalysis]) -> Result<()> {
    write_rows(
        path,
        &[
            "step",
            "layer",
            "head",
            "position",
            "masked_score",
            "unmasked_score",
            "divergent",
        ],
        splits.iter().flat_map(|a| {
            a.scores.iter().map(move |s| {
                (
                    s.step,
                    s.layer,
                    s.head,
                    s.position,
                    s.masked,
                    s.unmasked,
                    a.divergent,
                )
            })
        }),
    )
}
