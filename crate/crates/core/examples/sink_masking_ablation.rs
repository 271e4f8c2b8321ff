//! Mask attention toward the top-K sinks during generation and compare how
//! much a diffusion model and an autoregressive model lose.
//!
//! `cargo run --release --example sink_masking_ablation -- [steps]`

use dlmscope::decoding::{DecodeConfig, Strategy};
use dlmscope::diffusion::{train, TrainConfig, TrainingObjective};
use dlmscope::evalharness::{gen_dataset, Task, TaskKind};
use dlmscope::intervention::{ablation_sweep, robustness_summary, InterventionReport, MaskPolicy};
use dlmscope::model::{AttentionMode, ModelConfig};
use dlmscope::numerics::RngState;
type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

pub fn run_example(steps: usize, ks: &[usize]) -> Result<Vec<InterventionReport>> {
    let task = Task {
        kind: TaskKind::Copy,
        length: 4,
        n_train: 3000,
        n_eval: 100,
        seed: 12,
    };
    let data = gen_dataset(&task)?;
    let corpus = data.train_sequences(task.gen_len())?;
    let mut reports = Vec::new();
    for (id, objective, strategy) in [
        ("dlm", TrainingObjective::Identity, Strategy::BlockSemiAr),
        (
            "arm",
            TrainingObjective::Autoregressive,
            Strategy::Autoregressive,
        ),
    ] {
        let model = ModelConfig {
            d_model: 32,
            n_heads: 2,
            mlp_hidden: 64,
            max_seq: task.seq_len(),
            attention: objective.required_attention(),
            ..ModelConfig::default()
        };
        let hyper = TrainConfig {
            steps,
            warmup: steps / 20,
            ..TrainConfig::default()
        };
        let params = train(&model, objective, &corpus, &hyper, &RngState::new(6))?.params;
        let dc = DecodeConfig {
            strategy,
            gen_len: task.gen_len(),
            block_size: task.gen_len(),
            total_steps: task.gen_len(),
            ..DecodeConfig::default()
        };
        reports.extend(ablation_sweep(
            &params,
            "copy",
            id,
            &data.eval,
            &dc,
            &MaskPolicy::default(),
            ks,
        )?);
    }
    let modes = [
        ("dlm".to_string(), AttentionMode::Bidirectional),
        ("arm".to_string(), AttentionMode::Causal),
    ];
    println!("{}", robustness_summary(&reports, &modes));
    Ok(reports)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let steps = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1500);
    run_example(steps, &[0, 1, 5, 10])?;
    Ok(())
}
