//! Decode the same prompt with all three strategies and print the order in
//! which positions are committed.
//!
//! An untrained model is enough to see the schedules; pass a checkpoint
//! written by `dlmscope train` to watch a real one.
//!
//! `cargo run --release --example decode_strategies -- [checkpoint.dlmw]`

use dlmscope::decoding::{decode, invariant_violations, DecodeConfig, PlainModel, Strategy};
use dlmscope::model::{init_params, load_checkpoint, AttentionMode, ModelConfig, Parameters};
use dlmscope::numerics::RngState;
use dlmscope::vocab::{encode, render, BOS};
type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

/// Returns `(strategy, steps taken)` per strategy.
pub fn run_example(checkpoint: Option<&std::path::Path>) -> Result<Vec<(String, usize)>> {
    let bidir: Parameters<f32> = match checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => init_params(&ModelConfig::default(), &RngState::new(1))?,
    };
    let mut causal_cfg = bidir.config.clone();
    causal_cfg.attention = AttentionMode::Causal;
    let causal: Parameters<f32> = init_params(&causal_cfg, &RngState::new(2))?;

    let mut prompt = vec![BOS];
    prompt.extend(encode("41+27=").expect("prompt uses the task charset"));
    let mut out = Vec::new();
    for (strategy, params) in [
        (Strategy::BlockSemiAr, &bidir),
        (Strategy::AnyPositionShift, &bidir),
        (Strategy::Autoregressive, &causal),
    ] {
        let dc = DecodeConfig {
            strategy,
            gen_len: 8,
            block_size: 4,
            total_steps: 4,
            ..DecodeConfig::default()
        };
        let trace = decode(&mut PlainModel(params), &prompt, &dc)?;
        println!("== {}", strategy.name());
        for rec in &trace.steps {
            let commits: Vec<String> = rec
                .unmasked
                .iter()
                .map(|e| format!("{}<-{} ({:.2})", e.position, e.source, e.confidence))
                .collect();
            println!("  step {:2}: {}", rec.step, commits.join(", "));
        }
        println!("  final: {}", render(trace.final_sequence.generated()));
        assert!(invariant_violations(&trace).is_empty());
        out.push((strategy.name().to_string(), trace.steps.len()));
    }
    Ok(out)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let ckpt = std::env::args().nth(1).map(std::path::PathBuf::from);
    run_example(ckpt.as_deref())?;
    Ok(())
}
