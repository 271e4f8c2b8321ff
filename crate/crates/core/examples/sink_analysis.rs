//! Train a small diffusion model on reversal, decode with full attention
//! capture and report where sinks sit and how they move across steps.
//!
//! `cargo run --release --example sink_analysis -- [steps] [out_dir]`

use std::path::Path;

use dlmscope::decoding::{decode, Capture, DecodeConfig, DecodeTrace, PlainModel, Strategy};
use dlmscope::diffusion::{train, TrainConfig, TrainingObjective};
use dlmscope::evalharness::{gen_dataset, Task, TaskKind};
use dlmscope::model::ModelConfig;
use dlmscope::numerics::RngState;
use dlmscope::sinkmetrics::{
    attention_histogram, layer_head_map, trace_scores, trace_sink_sets, track_trajectories,
    write_histogram_csv, write_layerhead_csv, write_scores_csv, write_sinks_csv,
    write_trajectories_csv, Classification, HISTOGRAM_BINS,
};
type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

pub fn traces_for(steps: usize, n_prompts: usize) -> Result<Vec<DecodeTrace>> {
    let task = Task {
        kind: TaskKind::Reverse,
        length: 5,
        n_train: 2000,
        n_eval: n_prompts.max(1),
        seed: 9,
    };
    let data = gen_dataset(&task)?;
    let model = ModelConfig {
        d_model: 32,
        n_heads: 2,
        mlp_hidden: 64,
        max_seq: task.seq_len(),
        ..ModelConfig::default()
    };
    let hyper = TrainConfig {
        steps,
        warmup: steps / 20,
        ..TrainConfig::default()
    };
    let params = train(
        &model,
        TrainingObjective::Identity,
        &data.train_sequences(task.gen_len())?,
        &hyper,
        &RngState::new(4),
    )?
    .params;
    let dc = DecodeConfig {
        strategy: Strategy::BlockSemiAr,
        gen_len: task.gen_len(),
        block_size: 3,
        total_steps: task.gen_len(),
        capture: Capture::Full,
        ..DecodeConfig::default()
    };
    let mut traces = Vec::new();
    for ex in data.eval.iter().take(n_prompts) {
        traces.push(decode(&mut PlainModel(&params), &ex.prompt_tokens()?, &dc)?);
    }
    Ok(traces)
}

/// Returns the trajectory classification of every (layer, head) of the
/// first trace at `epsilon`.
pub fn run_example(
    steps: usize,
    epsilon: f64,
    out_dir: Option<&Path>,
) -> Result<Vec<Classification>> {
    let traces = traces_for(steps, 4)?;
    let trace = &traces[0];
    let sets = trace_sink_sets(trace, epsilon)?;
    for set in sets.iter().filter(|s| !s.sinks.is_empty()).take(8) {
        let top = &set.sinks[0];
        println!(
            "step {:2} L{} H{}: sink at {} (score {:.2}, {} total)",
            set.step,
            set.layer,
            set.head,
            top.position,
            top.score,
            set.sinks.len()
        );
    }
    let trajectories = track_trajectories(&sets);
    for t in &trajectories {
        let events: Vec<String> = t.events.iter().map(|e| e.label()).collect();
        println!(
            "L{} H{}: {:?}, events [{}]",
            t.layer,
            t.head,
            t.classification,
            events.join(" ")
        );
    }
    let lh = layer_head_map(&traces)?;
    println!("mean max score per layer/head:");
    for l in 0..lh.rows() {
        let row: Vec<String> = lh.row(l).iter().map(|x| format!("{x:.2}")).collect();
        println!("  L{l}: {}", row.join(" "));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_scores_csv(&dir.join("scores.csv"), &trace_scores(trace))?;
        write_sinks_csv(&dir.join("sinks.csv"), &sets)?;
        write_trajectories_csv(&dir.join("trajectories.csv"), &trajectories)?;
        write_histogram_csv(
            &dir.join("histogram.csv"),
            &attention_histogram(&traces, HISTOGRAM_BINS)?,
        )?;
        write_layerhead_csv(&dir.join("layerhead.csv"), &lh)?;
        println!("wrote csv files to {}", dir.display());
    }
    Ok(trajectories.into_iter().map(|t| t.classification).collect())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(800);
    let out = args.next().map(std::path::PathBuf::from);
    run_example(steps, 1.0, out.as_deref())?;
    Ok(())
}
