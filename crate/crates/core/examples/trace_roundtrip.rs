//! Write a decode trace in the binary format, read it back, export its
//! scores as CSV and import them again as an external trace.
//!
//! `cargo run --release --example trace_roundtrip -- [dir]`

use std::path::Path;

use dlmscope::decoding::{decode, Capture, DecodeConfig, PlainModel};
use dlmscope::model::{init_params, ModelConfig};
use dlmscope::numerics::RngState;
use dlmscope::sinkmetrics::{trace_sink_sets, track_trajectories};
use dlmscope::tracefile::{
    export_scores_csv, import_external, peek_header, read_trace, write_trace,
};
use dlmscope::vocab::BOS;
type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

/// Returns the size of the binary trace in bytes.
pub fn run_example(dir: &Path) -> Result<u64> {
    std::fs::create_dir_all(dir)?;
    let params = init_params(&ModelConfig::default(), &RngState::new(8))?;
    let dc = DecodeConfig {
        gen_len: 12,
        block_size: 4,
        total_steps: 6,
        capture: Capture::Full,
        seed: 21,
        ..DecodeConfig::default()
    };
    let trace = decode(&mut PlainModel(&params), &[BOS, 10, 11, 12], &dc)?;

    let bin = dir.join("trace.dlmt");
    write_trace(&trace, &bin)?;
    let header = peek_header(&std::fs::read(&bin)?)?;
    let size = std::fs::metadata(&bin)?.len();
    println!(
        "{}: S={} L={} H={} steps={} maps={} ({size} bytes)",
        bin.display(),
        header.seq_len,
        header.n_layers,
        header.n_heads,
        header.n_steps,
        header.has_maps()
    );
    let back = read_trace(&bin)?;
    println!("read back equal: {}", back == trace);

    let csv = dir.join("scores.csv");
    export_scores_csv(&trace, &csv)?;
    let imported = import_external(&csv)?;
    for w in &imported.warnings {
        println!("import warning: {w}");
    }
    let native = track_trajectories(&trace_sink_sets(&trace, 1.0)?);
    let external = track_trajectories(&trace_sink_sets(&imported.trace, 1.0)?);
    println!("trajectories agree after import: {}", native == external);
    Ok(size)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dlmscope-trace"));
    run_example(&dir)?;
    Ok(())
}
