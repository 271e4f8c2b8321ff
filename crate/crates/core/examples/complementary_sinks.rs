//! Split each attention map by query type: rows of still-masked positions
//! versus rows of committed ones. The two subsets can favour different
//! sinks within a single step.
//!
//! `cargo run --release --example complementary_sinks -- [steps]`

#[allow(dead_code)]
mod sink_analysis;

use dlmscope::sinkmetrics::trace_split_scores;
type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

/// Returns `(cells with both subsets, cells whose top positions differ)`.
pub fn run_example(steps: usize) -> Result<(usize, usize)> {
    let traces = sink_analysis::traces_for(steps, 3)?;
    let (mut both, mut divergent) = (0, 0);
    for trace in &traces {
        for a in trace_split_scores(trace)? {
            let (Some(m), Some(u)) = (a.masked_top, a.unmasked_top) else {
                continue;
            };
            both += 1;
            if a.divergent {
                divergent += 1;
                let step = a.scores[0].step;
                let (layer, head) = (a.scores[0].layer, a.scores[0].head);
                let ms = a.scores[m].masked.unwrap_or(0.0);
                let us = a.scores[u].unmasked.unwrap_or(0.0);
                if divergent <= 6 {
                    println!("step {step} L{layer} H{head}: masked queries favour {m} ({ms:.2}), unmasked favour {u} ({us:.2})");
                }
            }
        }
    }
    println!("{divergent} of {both} mixed cells have different top sinks per query type");
    Ok((both, divergent))
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
