//! How many positions count as sinks as the threshold grows.
//!
//! Uses the traces from the `sink_analysis` example plus a uniform
//! reference that should never produce a sink above zero.
//!
//! `cargo run --release --example epsilon_sweep -- [steps]`

#[allow(dead_code)]
mod sink_analysis;

use dlmscope::sinkmetrics::{epsilon_sweep, SweepPoint};
use dlmscope::tracefile::{import_external, ImportOutcome};
type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

/// Uniform attention over `s` positions, written in the external CSV layout.
fn uniform_csv(s: usize, steps: usize) -> String {
    let mut text = String::from("step,layer,head,position,score\n");
    for t in 0..steps {
        for j in 0..s {
            text.push_str(&format!("{t},0,0,{j},1\n"));
        }
    }
    text
}

pub fn run_example(steps: usize) -> Result<Vec<SweepPoint>> {
    let grid: Vec<f64> = (0..=16).map(|i| i as f64 * 0.5).collect();
    let traces = sink_analysis::traces_for(steps, 6)?;
    let sweep = epsilon_sweep(&traces, &grid)?;
    let dir = std::env::temp_dir().join(format!("dlmscope-sweep-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("uniform.csv");
    std::fs::write(&path, uniform_csv(12, 3))?;
    let ImportOutcome { trace: uniform, .. } = import_external(&path)?;
    let flat = epsilon_sweep(&[uniform], &grid)?;
    std::fs::remove_dir_all(&dir)?;
    println!("epsilon  trained  uniform");
    for (a, b) in sweep.iter().zip(&flat) {
        let bar = "#".repeat((a.fraction * 40.0).round() as usize);
        println!(
            "{:7.2}  {:7.3}  {:7.3}  {bar}",
            a.epsilon, a.fraction, b.fraction
        );
    }
    Ok(sweep)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let steps = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(800);
    run_example(steps)?;
    Ok(())
}
