//! The `dlmscope` command line.
//!
//! Every command reads an optional TOML [`RunConfig`], applies flag
//! overrides, writes the result to `resolved_config.toml` in its output
//! directory and then runs. Exit codes: 0 success, 2 configuration error,
//! 3 numeric failure, 4 I/O or format error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoding::{
    decode, invariant_violations, Capture, DecodeConfig, DecodeTrace, PlainModel, Strategy,
};
use crate::diffusion::{train_with_progress, write_loss_csv, TrainConfig, TrainingObjective};
use crate::error::{Error, Result};
use crate::evalharness::{
    extract_answer, gen_dataset, with_workers, write_examples, Example, Task, TaskKind,
};
use crate::intervention::{ablation_sweep, robustness_summary, write_reports, MaskPolicy};
use crate::model::{load_checkpoint, save_checkpoint, AttentionMode, ModelConfig};
use crate::numerics::RngState;
use crate::sinkmetrics::{self, DEFAULT_EPSILON, HISTOGRAM_BINS};
use crate::tracefile::{import_external, read_trace, write_trace};
use crate::vocab;

pub const DEFAULT_GRID: [f64; 12] = [0.25, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0];
pub const DEFAULT_KS: [usize; 4] = [0, 1, 5, 10];

/// Everything a command needs; the resolved copy reproduces the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub objective: TrainingObjective,
    pub checkpoints: Vec<PathBuf>,
    pub traces: Vec<PathBuf>,
    pub prompt: Option<String>,
    pub n_prompts: usize,
    pub epsilon: f64,
    pub grid: Vec<f64>,
    pub ks: Vec<usize>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: Task,
    pub decode: DecodeConfig,
    pub policy: MaskPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            objective: TrainingObjective::Identity,
            checkpoints: Vec::new(),
            traces: Vec::new(),
            prompt: None,
            n_prompts: 1,
            epsilon: DEFAULT_EPSILON,
            grid: DEFAULT_GRID.to_vec(),
            ks: DEFAULT_KS.to_vec(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            task: Task::default(),
            decode: DecodeConfig::default(),
            policy: MaskPolicy::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dlmscope",
    version,
    about = "Attention-sink lab for tiny diffusion and autoregressive models"
)]
pub struct Cli {
    /// Worker threads for evaluation and analysis (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a synthetic task; writes a checkpoint and loss curve.
    Train(TrainArgs),
    /// Decode with attention capture; writes DLMT traces.
    Generate(GenerateArgs),
    /// Sink scores, sinks, trajectories, histogram and layer-head map.
    Analyze(AnalyzeArgs),
    /// Top-K sink masking ablation with a comparison table.
    Ablate(AblateArgs),
    /// Fraction of positions flagged over a grid of ε.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $DLMSCOPE_OUT/<command>, else ./dlmscope-out/<command>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TaskArgs {
    /// copy, reverse, addition or sort.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub task_length: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_eval: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub task: TaskArgs,
    /// identity, shift or ar.
    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// block, shift or ar.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub gen_len: Option<usize>,
    #[arg(long)]
    pub block_size: Option<usize>,
    /// Total denoising steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f32>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// scores or full.
    #[arg(long)]
    pub capture: Option<String>,
    /// Raw prompt text; `BOS` is prepended. Defaults to task eval prompts.
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub n_prompts: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// DLMT traces, or CSV score dumps (`step,layer,head,position,score`).
    pub traces: Vec<PathBuf>,
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Checkpoint to evaluate; repeat for several models.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    /// Comma-separated K values.
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    #[arg(long)]
    pub protect_prompt: bool,
    #[arg(long)]
    pub per_head: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    pub traces: Vec<PathBuf>,
    /// Comma-separated ε values.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
}

pub fn parse_strategy(s: &str) -> Result<Strategy> {
    match s {
        "block" => Ok(Strategy::BlockSemiAr),
        "shift" => Ok(Strategy::AnyPositionShift),
        "ar" => Ok(Strategy::Autoregressive),
        _ => Err(Error::Config(format!(
            "unknown strategy {s:?} (block, shift, ar)"
        ))),
    }
}

pub fn parse_objective(s: &str) -> Result<TrainingObjective> {
    match s {
        "identity" => Ok(TrainingObjective::Identity),
        "shift" => Ok(TrainingObjective::Shift),
        "ar" | "autoregressive" => Ok(TrainingObjective::Autoregressive),
        _ => Err(Error::Config(format!(
            "unknown objective {s:?} (identity, shift, ar)"
        ))),
    }
}

fn resolve_base(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.decode.seed = s;
    }
    Ok(cfg)
}

fn apply_task(cfg: &mut RunConfig, a: &TaskArgs) -> Result<()> {
    if let Some(t) = &a.task {
        cfg.task.kind =
            TaskKind::parse(t).ok_or_else(|| Error::Config(format!("unknown task {t:?}")))?;
    }
    set(&mut cfg.task.length, a.task_length);
    set(&mut cfg.task.n_train, a.n_train);
    set(&mut cfg.task.n_eval, a.n_eval);
    Ok(())
}

fn apply_decode(cfg: &mut RunConfig, a: &DecodeArgs) -> Result<()> {
    if let Some(s) = &a.strategy {
        cfg.decode.strategy = parse_strategy(s)?;
    }
    set(&mut cfg.decode.gen_len, a.gen_len);
    set(&mut cfg.decode.block_size, a.block_size);
    set(&mut cfg.decode.total_steps, a.steps);
    set(&mut cfg.decode.temperature, a.temperature);
    Ok(())
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn out_dir(common: &CommonArgs, command: &str) -> Result<PathBuf> {
    let dir = match &common.out {
        Some(p) => p.clone(),
        None => match std::env::var_os("DLMSCOPE_OUT") {
            Some(root) => PathBuf::from(root).join(command),
            None => PathBuf::from("dlmscope-out").join(command),
        },
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let p = dir.join("resolved_config.toml");
    std::fs::write(&p, cfg.to_toml()?).map_err(|e| Error::io(&p, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf> {
    let mut cfg = resolve_base(&args.common)?;
    apply_task(&mut cfg, &args.task)?;
    if let Some(o) = &args.objective {
        cfg.objective = parse_objective(o)?;
    }
    set(&mut cfg.train.steps, args.steps);
    set(&mut cfg.train.batch_size, args.batch_size);
    set(&mut cfg.train.lr, args.lr);
    set(&mut cfg.model.d_model, args.d_model);
    set(&mut cfg.model.n_layers, args.layers);
    set(&mut cfg.model.n_heads, args.heads);
    if args.d_model.is_some() || args.heads.is_some() {
        cfg.model.d_head = cfg.model.d_model / cfg.model.n_heads.max(1);
    }
    cfg.model.attention = cfg.objective.required_attention();
    let dir = out_dir(&args.common, "train")?;
    write_resolved(&dir, &cfg)?;
    let data = gen_dataset(&cfg.task)?;
    write_examples(&dir.join("train.tsv"), &data.train)?;
    write_examples(&dir.join("eval.tsv"), &data.eval)?;
    let corpus = data.train_sequences(cfg.task.gen_len())?;
    let every = (cfg.train.steps / 10).max(1);
    let outcome = train_with_progress(
        &cfg.model,
        cfg.objective,
        &corpus,
        &cfg.train,
        &RngState::new(cfg.seed),
        |p| {
            if p.step % every == 0 || p.step + 1 == cfg.train.steps {
                eprintln!("step {:6} loss {:.4}", p.step, p.loss);
            }
        },
    )?;
    let ckpt = dir.join("checkpoint.dlmw");
    save_checkpoint(&outcome.params, &ckpt)?;
    write_loss_csv(&outcome.curve, &dir.join("loss.csv"))?;
    Ok(dir)
}

fn prompt_list(cfg: &RunConfig) -> Result<Vec<Vec<u32>>> {
    if let Some(p) = &cfg.prompt {
        let mut toks = vec![vocab::BOS];
        toks.extend(vocab::encode(p).ok_or_else(|| {
            Error::Config(format!(
                "prompt {p:?} has characters outside the vocabulary"
            ))
        })?);
        return Ok(vec![toks]);
    }
    let task = Task {
        n_eval: cfg.n_prompts,
        n_train: 0,
        ..cfg.task.clone()
    };
    gen_dataset(&task)?
        .eval
        .iter()
        .map(Example::prompt_tokens)
        .collect()
}

fn require_checkpoint(cfg: &RunConfig) -> Result<&Path> {
    cfg.checkpoints
        .first()
        .map(|p| p.as_path())
        .ok_or_else(|| Error::Config("a --checkpoint is required".into()))
}

pub fn cmd_generate(args: &GenerateArgs, workers: usize) -> Result<PathBuf> {
    let mut cfg = resolve_base(&args.common)?;
    apply_task(&mut cfg, &args.task)?;
    apply_decode(&mut cfg, &args.decode)?;
    if let Some(c) = &args.checkpoint {
        cfg.checkpoints = vec![c.clone()];
    }
    if let Some(c) = &args.capture {
        cfg.decode.capture = match c.as_str() {
            "scores" => Capture::Scores,
            "full" => Capture::Full,
            _ => {
                return Err(Error::Config(format!(
                    "unknown capture {c:?} (scores, full)"
                )))
            }
        };
    }
    if args.prompt.is_some() {
        cfg.prompt = args.prompt.clone();
    }
    set(&mut cfg.n_prompts, args.n_prompts);
    let dir = out_dir(&args.common, "generate")?;
    write_resolved(&dir, &cfg)?;
    let params = load_checkpoint(require_checkpoint(&cfg)?)?;
    let prompts = prompt_list(&cfg)?;
    let traces: Vec<DecodeTrace> = with_workers(workers, || {
        prompts
            .par_iter()
            .map(|p| decode(&mut PlainModel(&params), p, &cfg.decode))
            .collect::<Result<_>>()
    })??;
    let mut tsv = String::new();
    for (i, tr) in traces.iter().enumerate() {
        let bad = invariant_violations(tr);
        if !bad.is_empty() {
            return Err(Error::Format(format!(
                "decoding invariant violated: {}",
                bad[0]
            )));
        }
        let name = if traces.len() == 1 {
            "trace.dlmt".to_string()
        } else {
            format!("trace_{i:03}.dlmt")
        };
        write_trace(tr, &dir.join(name))?;
        let prompt = vocab::render(&tr.final_sequence.ids[1.min(tr.prompt_len)..tr.prompt_len]);
        tsv.push_str(&format!(
            "{prompt}\t{}\n",
            extract_answer(tr.final_sequence.generated())
        ));
    }
    write_text(&dir.join("generations.tsv"), &tsv)?;
    Ok(dir)
}

/// Load a DLMT trace, or import a CSV score dump (warnings go to stderr).
pub fn load_any_trace(path: &Path) -> Result<DecodeTrace> {
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        let out = import_external(path)?;
        for w in &out.warnings {
            eprintln!("warning: {}: {w}", path.display());
        }
        Ok(out.trace)
    } else {
        read_trace(path)
    }
}

/// Per-trace CSVs (scores, sinks, trajectories, splits when maps exist).
pub fn write_trace_analysis(dir: &Path, trace: &DecodeTrace, epsilon: f64) -> Result<()> {
    sinkmetrics::write_scores_csv(&dir.join("scores.csv"), &sinkmetrics::trace_scores(trace))?;
    let sets = sinkmetrics::trace_sink_sets(trace, epsilon)?;
    sinkmetrics::write_sinks_csv(&dir.join("sinks.csv"), &sets)?;
    sinkmetrics::write_trajectories_csv(
        &dir.join("trajectories.csv"),
        &sinkmetrics::track_trajectories(&sets),
    )?;
    if trace
        .steps
        .iter()
        .flat_map(|s| &s.heads)
        .all(|h| h.map.is_some())
        && !trace.steps.is_empty()
    {
        sinkmetrics::write_splits_csv(
            &dir.join("splits.csv"),
            &sinkmetrics::trace_split_scores(trace)?,
        )?;
    }
    Ok(())
}

pub fn cmd_analyze(args: &AnalyzeArgs, workers: usize) -> Result<PathBuf> {
    let mut cfg = resolve_base(&args.common)?;
    if !args.traces.is_empty() {
        cfg.traces = args.traces.clone();
    }
    set(&mut cfg.epsilon, args.epsilon);
    if cfg.traces.is_empty() {
        return Err(Error::Config("no traces given".into()));
    }
    let dir = out_dir(&args.common, "analyze")?;
    write_resolved(&dir, &cfg)?;
    let traces: Vec<DecodeTrace> = cfg
        .traces
        .iter()
        .map(|p| load_any_trace(p))
        .collect::<Result<_>>()?;
    with_workers(workers, || -> Result<()> {
        if traces.len() == 1 {
            write_trace_analysis(&dir, &traces[0], cfg.epsilon)?;
        } else {
            for (i, (tr, p)) in traces.iter().zip(&cfg.traces).enumerate() {
                let stem = p
                    .file_stem()
                    .map_or("trace".into(), |s| s.to_string_lossy().into_owned());
                let sub = dir.join(format!("{i:03}_{stem}"));
                std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
                write_trace_analysis(&sub, tr, cfg.epsilon)?;
            }
        }
        sinkmetrics::write_histogram_csv(
            &dir.join("histogram.csv"),
            &sinkmetrics::attention_histogram(&traces, HISTOGRAM_BINS)?,
        )?;
        sinkmetrics::write_layerhead_csv(
            &dir.join("layerhead.csv"),
            &sinkmetrics::layer_head_map(&traces)?,
        )?;
        sinkmetrics::write_epsilon_csv(
            &dir.join("epsilon_sweep.csv"),
            &sinkmetrics::epsilon_sweep(&traces, &cfg.grid)?,
        )
    })??;
    Ok(dir)
}

pub fn cmd_sweep(args: &SweepArgs, workers: usize) -> Result<PathBuf> {
    let mut cfg = resolve_base(&args.common)?;
    if !args.traces.is_empty() {
        cfg.traces = args.traces.clone();
    }
    if let Some(g) = &args.grid {
        cfg.grid = g.clone();
    }
    if cfg.traces.is_empty() {
        return Err(Error::Config("no traces given".into()));
    }
    if cfg.grid.iter().any(|e| !e.is_finite()) {
        return Err(Error::Config("epsilon grid must be finite".into()));
    }
    let dir = out_dir(&args.common, "sweep")?;
    write_resolved(&dir, &cfg)?;
    let traces: Vec<DecodeTrace> = cfg
        .traces
        .iter()
        .map(|p| load_any_trace(p))
        .collect::<Result<_>>()?;
    let sweep = with_workers(workers, || sinkmetrics::epsilon_sweep(&traces, &cfg.grid))??;
    sinkmetrics::write_epsilon_csv(&dir.join("epsilon_sweep.csv"), &sweep)?;
    Ok(dir)
}

fn model_id(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map_or("model".into(), |s| s.to_string_lossy().into_owned());
    match path.parent().and_then(|p| p.file_name()) {
        Some(parent) if stem == "checkpoint" => parent.to_string_lossy().into_owned(),
        _ => stem,
    }
}

/// Decode settings for grading `cfg.task` with a model of the given mode.
pub fn ablation_decode(cfg: &RunConfig, mode: AttentionMode) -> DecodeConfig {
    let gen_len = cfg.task.gen_len();
    DecodeConfig {
        strategy: match mode {
            AttentionMode::Causal => Strategy::Autoregressive,
            AttentionMode::Bidirectional if cfg.decode.strategy == Strategy::Autoregressive => {
                Strategy::BlockSemiAr
            }
            AttentionMode::Bidirectional => cfg.decode.strategy,
        },
        gen_len,
        block_size: cfg.decode.block_size.min(gen_len),
        total_steps: cfg.decode.total_steps.min(gen_len),
        ..cfg.decode.clone()
    }
}

pub fn cmd_ablate(args: &AblateArgs, workers: usize) -> Result<PathBuf> {
    let mut cfg = resolve_base(&args.common)?;
    apply_task(&mut cfg, &args.task)?;
    apply_decode(&mut cfg, &args.decode)?;
    if !args.checkpoints.is_empty() {
        cfg.checkpoints = args.checkpoints.clone();
    }
    set(&mut cfg.ks, args.k.clone());
    cfg.policy.protect_prompt |= args.protect_prompt;
    cfg.policy.per_head |= args.per_head;
    if cfg.checkpoints.is_empty() {
        return Err(Error::Config(
            "at least one --checkpoint is required".into(),
        ));
    }
    let dir = out_dir(&args.common, "ablate")?;
    write_resolved(&dir, &cfg)?;
    let eval = gen_dataset(&cfg.task)?.eval;
    let mut reports = Vec::new();
    let mut modes = Vec::new();
    for path in &cfg.checkpoints {
        let params = load_checkpoint(path)?;
        let id = model_id(path);
        let dc = ablation_decode(&cfg, params.config.attention);
        modes.push((id.clone(), params.config.attention));
        reports.extend(with_workers(workers, || {
            ablation_sweep(
                &params,
                cfg.task.kind.name(),
                &id,
                &eval,
                &dc,
                &cfg.policy,
                &cfg.ks,
            )
        })??);
    }
    write_reports(&dir, &reports)?;
    let summary = robustness_summary(&reports, &modes);
    write_text(&dir.join("summary.md"), &summary)?;
    println!("{summary}");
    Ok(dir)
}

pub fn run(cli: &Cli) -> Result<PathBuf> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a, cli.workers),
        Command::Analyze(a) => cmd_analyze(a, cli.workers),
        Command::Ablate(a) => cmd_ablate(a, cli.workers),
        Command::Sweep(a) => cmd_sweep(a, cli.workers),
    }
}

/// Parse `args`, run, report errors on stderr; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(dir) => {
            eprintln!("wrote {}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_names_the_key() {
        match RunConfig::from_toml("seed = 1\n[model]\nd_modle = 3\n") {
            Err(Error::Config(m)) => assert!(m.contains("d_modle"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = RunConfig::default();
        c.train.lr = 1.7e-3;
        c.prompt = Some("12+34=".into());
        c.checkpoints = vec!["a/b.dlmw".into()];
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn ablation_decode_fits_task() {
        let mut c = RunConfig::default();
        c.task.kind = TaskKind::Addition2Digit;
        let d = ablation_decode(&c, AttentionMode::Bidirectional);
        assert_eq!((d.gen_len, d.block_size, d.total_steps), (4, 4, 4));
        assert_eq!(
            ablation_decode(&c, AttentionMode::Causal).strategy,
            Strategy::Autoregressive
        );
    }
}
