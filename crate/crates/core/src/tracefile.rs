//! The `DLMT` binary trace format and CSV import of external scores.
//!
//! Layout, all little-endian:
//!
//! ```text
//! header   "DLMT" version:u32 S:u32 L:u32 H:u32 n_steps:u32 vocab:u32
//!          strategy:u8 flags:u8 seed:u64
//! run      prompt_len:u32 gen_len:u32 block_size:u32 total_steps:u32 temperature:f32
//! final    ids:u32×S mask:bitset(S)
//! step×n   active_len:u32 ids:u32×S mask:bitset(S)
//!          n_unmasked:u32 (position:u32 token:u32 source:u32 confidence:f32)×n
//!          per layer, per head: [scores:f32×S] [map:f32×S×S]
//! ```
//!
//! Flag bit 0 marks full maps, bit 1 column scores. Bitsets pack position
//! `i` into bit `i % 8` of byte `i / 8`.

use std::collections::HashMap;
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::decoding::{
    Capture, DecodeConfig, DecodeTrace, HeadCapture, StepRecord, Strategy, TokenSequence,
    UnmaskEvent,
};
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::sinkmetrics::trace_scores;
use crate::vocab::{MASK, PAD};

pub const TRACE_MAGIC: &[u8; 4] = b"DLMT";
pub const TRACE_VERSION: u32 = 1;
pub const FLAG_MAPS: u8 = 1;
pub const FLAG_SCORES: u8 = 2;
const HEADER_BYTES: u64 = 38;
const RUN_BYTES: u64 = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceHeader {
    pub seq_len: u32,
    pub n_layers: u32,
    pub n_heads: u32,
    pub n_steps: u32,
    pub vocab_size: u32,
    pub strategy: u8,
    pub flags: u8,
    pub seed: u64,
}

impl TraceHeader {
    pub fn has_maps(&self) -> bool {
        self.flags & FLAG_MAPS != 0
    }
}

fn bitset_len(s: usize) -> usize {
    s.div_ceil(8)
}

/// Exact file size for a trace with these dimensions and per-step event counts.
pub fn expected_size(h: &TraceHeader, events_per_step: &[usize]) -> u64 {
    let s = h.seq_len as u64;
    let cells = h.n_layers as u64 * h.n_heads as u64;
    let per_cell = if h.flags & FLAG_SCORES != 0 { 4 * s } else { 0 }
        + if h.has_maps() { 4 * s * s } else { 0 };
    let seq_block = 4 * s + bitset_len(s as usize) as u64;
    HEADER_BYTES
        + RUN_BYTES
        + seq_block
        + events_per_step
            .iter()
            .map(|&n| 4 + seq_block + 4 + 16 * n as u64 + cells * per_cell)
            .sum::<u64>()
}

fn write_mask(w: &mut Writer, flags: &[bool]) {
    let mut bytes = vec![0u8; bitset_len(flags.len())];
    for (i, &f) in flags.iter().enumerate() {
        if f {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    w.buf.extend_from_slice(&bytes);
}

fn read_mask(r: &mut Reader, s: usize) -> Result<Vec<bool>> {
    let bytes = r.bytes(bitset_len(s), "mask bitset")?;
    if s % 8 != 0 && bytes[s / 8] >> (s % 8) != 0 {
        return Err(Error::Format(format!(
            "mask bitset has bits beyond position {s}"
        )));
    }
    Ok((0..s).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

/// Serialize a trace. Identical traces give identical bytes.
pub fn encode_trace(trace: &DecodeTrace) -> Result<Vec<u8>> {
    let s = trace.seq_len;
    let maps = trace
        .steps
        .iter()
        .flat_map(|r| &r.heads)
        .any(|h| h.map.is_some());
    let all_maps = trace
        .steps
        .iter()
        .flat_map(|r| &r.heads)
        .all(|h| h.map.is_some());
    if maps && !all_maps {
        return Err(Error::Format(
            "some heads carry full maps and some do not".into(),
        ));
    }
    let flags = FLAG_SCORES | if maps { FLAG_MAPS } else { 0 };
    let mut w = Writer::default();
    w.buf.extend_from_slice(TRACE_MAGIC);
    w.u32(TRACE_VERSION);
    for (v, what) in [
        (s, "sequence length"),
        (trace.n_layers, "layer count"),
        (trace.n_heads, "head count"),
        (trace.steps.len(), "step count"),
        (trace.vocab_size, "vocab size"),
    ] {
        w.u32(u32_of(v, what)?);
    }
    w.u8(trace.config.strategy.tag());
    w.u8(flags);
    w.u64(trace.config.seed);
    let c = &trace.config;
    for (v, what) in [
        (trace.prompt_len, "prompt length"),
        (c.gen_len, "gen_len"),
        (c.block_size, "block size"),
        (c.total_steps, "total steps"),
    ] {
        w.u32(u32_of(v, what)?);
    }
    w.f32(c.temperature);
    let fin = &trace.final_sequence;
    if fin.len() != s {
        return Err(Error::Format("final sequence length differs from S".into()));
    }
    fin.ids.iter().for_each(|&t| w.u32(t));
    write_mask(&mut w, &fin.mask_flags);
    let cells = trace.n_layers * trace.n_heads;
    for rec in &trace.steps {
        if rec.ids.len() != s || rec.mask_flags.len() != s || rec.heads.len() != cells {
            return Err(Error::Format(format!(
                "step {} does not match trace dimensions",
                rec.step
            )));
        }
        w.u32(u32_of(rec.active_len, "active length")?);
        rec.ids.iter().for_each(|&t| w.u32(t));
        write_mask(&mut w, &rec.mask_flags);
        w.u32(u32_of(rec.unmasked.len(), "event count")?);
        for e in &rec.unmasked {
            w.u32(u32_of(e.position, "position")?);
            w.u32(e.token);
            w.u32(u32_of(e.source, "source")?);
            w.f32(e.confidence);
        }
        for (i, h) in rec.heads.iter().enumerate() {
            if (h.layer, h.head) != (i / trace.n_heads, i % trace.n_heads) || h.scores.len() != s {
                return Err(Error::Format(format!(
                    "step {}: heads out of layer-major order",
                    rec.step
                )));
            }
            w.f32s(&h.scores);
            if let Some(m) = &h.map {
                if m.shape() != (s, s) {
                    return Err(Error::Format(format!(
                        "step {}: map is not {s}×{s}",
                        rec.step
                    )));
                }
                w.f32s(m.data());
            }
        }
    }
    Ok(w.buf)
}

pub fn write_trace(trace: &DecodeTrace, path: &Path) -> Result<()> {
    let bytes = encode_trace(trace)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_header(r: &mut Reader) -> Result<TraceHeader> {
    let magic = r.bytes(4, "magic")?;
    if magic != TRACE_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}, expected \"DLMT\""
        )));
    }
    let version = r.u32("version")?;
    if version != TRACE_VERSION {
        return Err(Error::Format(format!(
            "unsupported trace version {version}"
        )));
    }
    let h = TraceHeader {
        seq_len: r.u32("sequence length")?,
        n_layers: r.u32("layer count")?,
        n_heads: r.u32("head count")?,
        n_steps: r.u32("step count")?,
        vocab_size: r.u32("vocab size")?,
        strategy: r.u8("strategy")?,
        flags: r.u8("flags")?,
        seed: r.u64("seed")?,
    };
    if Strategy::from_tag(h.strategy).is_none() {
        return Err(Error::Format(format!(
            "unknown strategy tag {}",
            h.strategy
        )));
    }
    if h.flags & !(FLAG_MAPS | FLAG_SCORES) != 0 || h.flags & FLAG_SCORES == 0 {
        return Err(Error::Format(format!("unsupported flags {:#04x}", h.flags)));
    }
    if h.seq_len < 2 || h.n_layers == 0 || h.n_heads == 0 {
        return Err(Error::Format(
            "trace dimensions must be positive and S ≥ 2".into(),
        ));
    }
    Ok(h)
}

fn check_ids(ids: &[u32], flags: &[bool], vocab: u32, what: &str) -> Result<()> {
    for (i, (&t, &m)) in ids.iter().zip(flags).enumerate() {
        if vocab > 0 && t >= vocab {
            return Err(Error::Format(format!(
                "{what}: token {t} at {i} outside vocab {vocab}"
            )));
        }
        if (t == MASK) != m {
            return Err(Error::Format(format!(
                "{what}: MASK id and flag disagree at {i}"
            )));
        }
    }
    Ok(())
}

fn check_probs(v: &[f32], what: &str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite() || *x < 0.0) {
        Some(i) => Err(Error::Format(format!(
            "{what}: invalid value {} at {i}",
            v[i]
        ))),
        None => Ok(()),
    }
}

/// Parse and validate a trace. Never panics on malformed input.
pub fn decode_trace(bytes: &[u8]) -> Result<DecodeTrace> {
    let mut r = Reader::new(bytes);
    let h = read_header(&mut r)?;
    let strategy = Strategy::from_tag(h.strategy).unwrap();
    let s = h.seq_len as usize;
    // reject impossible sizes before allocating anything
    let min_step = (h.n_layers as u64)
        .saturating_mul(h.n_heads as u64)
        .saturating_mul(4 * s as u64)
        .saturating_add(8 + 4 * s as u64);
    if (h.n_steps as u64).saturating_mul(min_step) > bytes.len() as u64 {
        return Err(Error::Truncated {
            offset: r.offset(),
            what: format!(
                "{} steps of S={s} cannot fit in {} bytes",
                h.n_steps,
                bytes.len()
            ),
        });
    }
    let prompt_len = r.u32("prompt length")? as usize;
    let gen_len = r.u32("gen_len")? as usize;
    let block_size = r.u32("block size")? as usize;
    let total_steps = r.u32("total steps")? as usize;
    let temperature = r.f32("temperature")?;
    if prompt_len > s || !temperature.is_finite() || temperature < 0.0 {
        return Err(Error::Format("run block inconsistent with header".into()));
    }
    let read_ids = |r: &mut Reader| -> Result<Vec<u32>> {
        let b = r.bytes(4 * s, "token ids")?;
        Ok(b.chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let fin_ids = read_ids(&mut r)?;
    let fin_flags = read_mask(&mut r, s)?;
    check_ids(&fin_ids, &fin_flags, h.vocab_size, "final sequence")?;
    let final_sequence = TokenSequence {
        ids: fin_ids,
        mask_flags: fin_flags,
        prompt_len,
    };
    let mut steps = Vec::new();
    for t in 0..h.n_steps as usize {
        let active_len = r.u32("active length")? as usize;
        if active_len == 0 || active_len > s {
            return Err(Error::Format(format!(
                "step {t}: active length {active_len} outside 1..={s}"
            )));
        }
        let ids = read_ids(&mut r)?;
        let mask_flags = read_mask(&mut r, s)?;
        check_ids(&ids, &mask_flags, h.vocab_size, &format!("step {t}"))?;
        let n_events = r.u32("event count")? as usize;
        if n_events > s {
            return Err(Error::Format(format!(
                "step {t}: {n_events} events for S={s}"
            )));
        }
        let mut unmasked = Vec::with_capacity(n_events);
        for _ in 0..n_events {
            let e = UnmaskEvent {
                position: r.u32("event position")? as usize,
                token: r.u32("event token")?,
                source: r.u32("event source")? as usize,
                confidence: r.f32("event confidence")?,
            };
            if e.position >= s
                || e.source >= s
                || (h.vocab_size > 0 && e.token >= h.vocab_size)
                || !mask_flags[e.position]
                || !(0.0..=1.0).contains(&e.confidence)
            {
                return Err(Error::Format(format!(
                    "step {t}: invalid unmask event {e:?}"
                )));
            }
            unmasked.push(e);
        }
        let mut heads = Vec::with_capacity((h.n_layers * h.n_heads) as usize);
        for layer in 0..h.n_layers as usize {
            for head in 0..h.n_heads as usize {
                let scores = r.f32s(s, "column scores")?;
                check_probs(&scores, &format!("step {t} scores"))?;
                let map = if h.has_maps() {
                    let data = r.f32s(s * s, "attention map")?;
                    check_probs(&data, &format!("step {t} map"))?;
                    Some(DenseMatrix::from_vec(s, s, data)?)
                } else {
                    None
                };
                heads.push(HeadCapture {
                    layer,
                    head,
                    scores,
                    map,
                });
            }
        }
        steps.push(StepRecord {
            step: t,
            active_len,
            ids,
            mask_flags,
            unmasked,
            heads,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last step",
            r.remaining()
        )));
    }
    // unmasking must be monotone and the recorded events must explain every transition
    for t in 0..steps.len() {
        let next = steps
            .get(t + 1)
            .map_or(&final_sequence.mask_flags, |n| &n.mask_flags);
        let cur = &steps[t];
        for i in 0..s {
            let unmasked_here = cur.unmasked.iter().any(|e| e.position == i);
            if !cur.mask_flags[i] && next[i] {
                return Err(Error::Format(format!("step {t}: position {i} re-masked")));
            }
            if unmasked_here && next[i] {
                return Err(Error::Format(format!(
                    "step {t}: position {i} unmasked but still masked next step"
                )));
            }
        }
    }
    Ok(DecodeTrace {
        config: DecodeConfig {
            strategy,
            gen_len,
            block_size,
            total_steps,
            temperature,
            seed: h.seed,
            capture: if h.has_maps() {
                Capture::Full
            } else {
                Capture::Scores
            },
        },
        seq_len: s,
        prompt_len,
        n_layers: h.n_layers as usize,
        n_heads: h.n_heads as usize,
        vocab_size: h.vocab_size as usize,
        steps,
        final_sequence,
    })
}

pub fn read_trace(path: &Path) -> Result<DecodeTrace> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_trace(&bytes)
}

pub fn peek_header(bytes: &[u8]) -> Result<TraceHeader> {
    read_header(&mut Reader::new(bytes))
}

/// Scores of a trace in the import CSV layout `step,layer,head,position,score`.
pub fn export_scores_csv(trace: &DecodeTrace, path: &Path) -> Result<()> {
    crate::sinkmetrics::write_scores_csv(path, &trace_scores(trace))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportOutcome {
    pub trace: DecodeTrace,
    /// Conservation warnings; analysis proceeds regardless.
    pub warnings: Vec<String>,
}

/// Build a score-only trace from a dense `step,layer,head,position,score` CSV.
/// Dimensions are inferred from the largest index of each column.
pub fn import_external(path: &Path) -> Result<ImportOutcome> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["step", "layer", "head", "position", "score"] {
        return Err(Error::Format(format!(
            "{}: header must be step,layer,head,position,score",
            path.display()
        )));
    }
    let mut rows: Vec<(usize, usize, usize, usize, f32)> = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = |col: &str| Error::Format(format!("{}:{}: bad {col}", path.display(), n + 2));
        let idx = |i: usize, col: &str| {
            rec.get(i)
                .and_then(|v| v.trim().parse::<usize>().ok())
                .ok_or_else(|| bad(col))
        };
        let score: f32 = rec
            .get(4)
            .and_then(|v| v.trim().parse().ok())
            .filter(|x: &f32| x.is_finite() && *x >= 0.0)
            .ok_or_else(|| bad("score"))?;
        rows.push((
            idx(0, "step")?,
            idx(1, "layer")?,
            idx(2, "head")?,
            idx(3, "position")?,
            score,
        ));
    }
    if rows.is_empty() {
        return Err(Error::SparseInput(format!(
            "{}: no score rows",
            path.display()
        )));
    }
    let dim =
        |f: fn(&(usize, usize, usize, usize, f32)) -> usize| rows.iter().map(f).max().unwrap() + 1;
    let (n_steps, n_layers, n_heads, s) = (dim(|r| r.0), dim(|r| r.1), dim(|r| r.2), dim(|r| r.3));
    if s < 2 {
        return Err(Error::UndefinedMean(s));
    }
    let flat = |t: usize, l: usize, h: usize, j: usize| -> u128 {
        ((t as u128 * n_layers as u128 + l as u128) * n_heads as u128 + h as u128) * s as u128
            + j as u128
    };
    let total = flat(n_steps - 1, n_layers - 1, n_heads - 1, s - 1) + 1;
    let mut present: HashMap<u128, f32> = HashMap::with_capacity(rows.len());
    for &(t, l, h, j, v) in &rows {
        if present.insert(flat(t, l, h, j), v).is_some() {
            return Err(Error::Format(format!(
                "duplicate cell step={t} layer={l} head={h} position={j}"
            )));
        }
    }
    // with fewer rows than cells, a gap lies within the first rows.len() + 1 indices
    if total > rows.len() as u128 {
        let i = (0..=rows.len() as u128)
            .find(|i| !present.contains_key(i))
            .unwrap();
        let (j, rest) = (i % s as u128, i / s as u128);
        let (h, rest) = (rest % n_heads as u128, rest / n_heads as u128);
        let (l, t) = (rest % n_layers as u128, rest / n_layers as u128);
        return Err(Error::SparseInput(format!(
            "missing cell step={t} layer={l} head={h} position={j}"
        )));
    }
    let grid: Vec<f32> = (0..total).map(|i| present[&i]).collect();
    let mut warnings = Vec::new();
    let mut steps = Vec::with_capacity(n_steps);
    for t in 0..n_steps {
        let mut heads = Vec::with_capacity(n_layers * n_heads);
        for l in 0..n_layers {
            for h in 0..n_heads {
                let base = ((t * n_layers + l) * n_heads + h) * s;
                let scores = grid[base..base + s].to_vec();
                let sum: f64 = scores.iter().map(|&x| x as f64).sum();
                if (sum - s as f64).abs() > 0.05 * s as f64 {
                    warnings.push(format!(
                        "step {t} layer {l} head {h}: scores sum to {sum:.4}, expected {s}"
                    ));
                }
                heads.push(HeadCapture {
                    layer: l,
                    head: h,
                    scores,
                    map: None,
                });
            }
        }
        steps.push(StepRecord {
            step: t,
            active_len: s,
            ids: vec![PAD; s],
            mask_flags: vec![false; s],
            unmasked: Vec::new(),
            heads,
        });
    }
    let trace = DecodeTrace {
        config: DecodeConfig {
            strategy: Strategy::External,
            gen_len: 0,
            block_size: 0,
            total_steps: n_steps,
            temperature: 0.0,
            seed: 0,
            capture: Capture::Scores,
        },
        seq_len: s,
        prompt_len: 0,
        n_layers,
        n_heads,
        vocab_size: 0,
        steps,
        final_sequence: TokenSequence {
            ids: vec![PAD; s],
            mask_flags: vec![false; s],
            prompt_len: 0,
        },
    };
    Ok(ImportOutcome { trace, warnings })
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    /// A small random but internally consistent trace.
    fn random_trace(rng: &mut RngState, maps: bool) -> DecodeTrace {
        let s = 2 + rng.below(7) as usize;
        let (l, h) = (1 + rng.below(2) as usize, 1 + rng.below(3) as usize);
        let prompt_len = 1 + rng.below(s as u64 - 1) as usize;
        let mut ids: Vec<u32> = (0..s)
            .map(|i| {
                if i < prompt_len {
                    4 + rng.below(60) as u32
                } else {
                    MASK
                }
            })
            .collect();
        let mut steps = Vec::new();
        let mut t = 0;
        while ids.contains(&MASK) {
            let flags: Vec<bool> = ids.iter().map(|&x| x == MASK).collect();
            let masked: Vec<usize> = (0..s).filter(|&i| flags[i]).collect();
            let k = 1 + rng.below(masked.len() as u64) as usize;
            let events: Vec<UnmaskEvent> = masked[..k]
                .iter()
                .map(|&p| UnmaskEvent {
                    position: p,
                    token: 4 + rng.below(60) as u32,
                    source: p - 1,
                    confidence: rng.uniform(0.0, 1.0),
                })
                .collect();
            let heads = (0..l * h)
                .map(|c| {
                    let map = DenseMatrix::from_vec(
                        s,
                        s,
                        (0..s * s).map(|_| rng.uniform(0.0, 0.3)).collect(),
                    )
                    .unwrap();
                    HeadCapture {
                        layer: c / h,
                        head: c % h,
                        scores: (0..s).map(|_| rng.uniform(0.0, 3.0)).collect(),
                        map: maps.then_some(map),
                    }
                })
                .collect();
            steps.push(StepRecord {
                step: t,
                active_len: s,
                ids: ids.clone(),
                mask_flags: flags,
                unmasked: events.clone(),
                heads,
            });
            for e in events {
                ids[e.position] = e.token;
            }
            t += 1;
        }
        DecodeTrace {
            config: DecodeConfig {
                strategy: Strategy::AnyPositionShift,
                gen_len: s - prompt_len,
                block_size: 1,
                total_steps: t,
                temperature: 0.5,
                seed: rng.below(1000),
                capture: if maps { Capture::Full } else { Capture::Scores },
            },
            seq_len: s,
            prompt_len,
            n_layers: l,
            n_heads: h,
            vocab_size: 69,
            steps,
            final_sequence: TokenSequence {
                mask_flags: vec![false; s],
                ids,
                prompt_len,
            },
        }
    }

    #[test]
    fn round_trip_and_size_formula() {
        let mut rng = RngState::new(1);
        for i in 0..30 {
            let tr = random_trace(&mut rng, i % 2 == 0);
            let bytes = encode_trace(&tr).unwrap();
            let h = peek_header(&bytes).unwrap();
            let ev: Vec<usize> = tr.steps.iter().map(|s| s.unmasked.len()).collect();
            assert_eq!(bytes.len() as u64, expected_size(&h, &ev));
            assert_eq!(h.has_maps(), i % 2 == 0);
            assert_eq!(decode_trace(&bytes).unwrap(), tr);
            assert_eq!(encode_trace(&tr).unwrap(), bytes);
        }
    }

    #[test]
    fn wrong_magic_and_truncation() {
        let tr = random_trace(&mut RngState::new(2), false);
        let mut bytes = encode_trace(&tr).unwrap();
        for cut in [0, 3, 20, 50, bytes.len() - 1] {
            assert!(
                matches!(decode_trace(&bytes[..cut]), Err(Error::Truncated { .. })),
                "cut {cut}"
            );
        }
        bytes[0] = b'X';
        assert!(matches!(decode_trace(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn mutated_files_never_panic() {
        let mut rng = RngState::new(3);
        let base: Vec<Vec<u8>> = (0..10)
            .map(|i| encode_trace(&random_trace(&mut rng, i % 2 == 1)).unwrap())
            .collect();
        for i in 0..2000 {
            let mut b = base[i % base.len()].clone();
            for _ in 0..1 + rng.below(4) {
                let at = rng.below(b.len() as u64) as usize;
                b[at] = rng.below(256) as u8;
            }
            if rng.below(4) == 0 {
                b.truncate(rng.below(b.len() as u64) as usize);
            }
            let _ = decode_trace(&b);
        }
    }

    #[test]
    fn import_small_grid_and_warning() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        std::fs::write(
            &p,
            "step,layer,head,position,score\n0,0,0,0,3.7\n0,0,0,1,0.1\n0,0,0,2,0.1\n0,0,0,3,0.1\n",
        )
        .unwrap();
        let out = import_external(&p).unwrap();
        assert!(out.warnings.is_empty());
        assert_eq!(out.trace.seq_len, 4);
        assert_eq!(out.trace.config.strategy, Strategy::External);
        let sets = crate::sinkmetrics::trace_sink_sets(&out.trace, 3.0).unwrap();
        assert_eq!(sets[0].sinks[0].position, 0);
        // trace survives the binary format too
        let back = decode_trace(&encode_trace(&out.trace).unwrap()).unwrap();
        assert_eq!(back, out.trace);
        std::fs::write(
            &p,
            "step,layer,head,position,score\n0,0,0,0,1\n0,0,0,1,1\n0,0,0,2,1\n0,0,0,3,9\n",
        )
        .unwrap();
        assert_eq!(import_external(&p).unwrap().warnings.len(), 1);
    }

    #[test]
    fn import_sparse_names_first_gap() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        std::fs::write(
            &p,
            "step,layer,head,position,score\n0,0,0,0,1\n0,0,0,1,1\n1,0,0,0,2\n",
        )
        .unwrap();
        match import_external(&p) {
            Err(Error::SparseInput(m)) => {
                assert!(m.contains("step=1") && m.contains("position=1"), "{m}")
            }
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "step,layer,head,pos,score\n0,0,0,0,1\n").unwrap();
        assert!(matches!(import_external(&p), Err(Error::Format(_))));
    }
}
