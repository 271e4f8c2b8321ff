//! Synthetic tasks with exact-match grading, and Table-style comparisons.
//!
//! A model sees `BOS prompt` and must fill `gen_len` positions with
//! `answer EOS PAD…`. Grading reads the generated region up to the first
//! `EOS` or `PAD` and compares it with the answer string.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoding::{decode, DecodeConfig, PlainModel, StepModel, Strategy};
use crate::diffusion::ConditionalSequence;
use crate::error::{Error, Result};
use crate::intervention::{MaskPolicy, SinkMaskingModel, StepMaskLog};
use crate::model::Parameters;
use crate::numerics::RngState;
use crate::vocab::{self, BOS, EOS, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    #[serde(rename = "addition_2digit")]
    Addition2Digit,
    SortDigits,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Addition2Digit => "addition_2digit",
            TaskKind::SortDigits => "sort_digits",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "copy" => TaskKind::Copy,
            "reverse" => TaskKind::Reverse,
            "addition" | "addition_2digit" => TaskKind::Addition2Digit,
            "sort" | "sort_digits" => TaskKind::SortDigits,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Task {
    pub kind: TaskKind,
    pub n_train: usize,
    pub n_eval: usize,
    /// String length for copy, reverse and sort tasks.
    pub length: usize,
    pub seed: u64,
}

impl Default for Task {
    fn default() -> Self {
        Self {
            kind: TaskKind::Copy,
            n_train: 2000,
            n_eval: 200,
            length: 6,
            seed: 0,
        }
    }
}

impl Task {
    /// Generated positions needed: the longest answer plus `EOS`.
    pub fn gen_len(&self) -> usize {
        match self.kind {
            TaskKind::Addition2Digit => 4,
            _ => self.length + 1,
        }
    }

    /// Prompt length in tokens, `BOS` included.
    pub fn prompt_len(&self) -> usize {
        match self.kind {
            TaskKind::Addition2Digit => 7,
            _ => self.length + 2,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.prompt_len() + self.gen_len()
    }

    fn capacity(&self) -> f64 {
        match self.kind {
            TaskKind::Addition2Digit => 90.0 * 90.0,
            TaskKind::Copy | TaskKind::Reverse => 26f64.powi(self.length as i32),
            TaskKind::SortDigits => 10f64.powi(self.length as i32),
        }
    }

    fn sample(&self, rng: &mut RngState) -> Example {
        let letters = |rng: &mut RngState, n| -> String {
            (0..n)
                .map(|_| (b'a' + rng.below(26) as u8) as char)
                .collect()
        };
        match self.kind {
            TaskKind::Copy => {
                let s = letters(rng, self.length);
                Example::new(format!("{s}|"), s)
            }
            TaskKind::Reverse => {
                let s = letters(rng, self.length);
                Example::new(format!("{s}|"), s.chars().rev().collect())
            }
            TaskKind::Addition2Digit => {
                let a = 10 + rng.below(90);
                let b = 10 + rng.below(90);
                addition_example(a, b)
            }
            TaskKind::SortDigits => {
                let d: String = (0..self.length)
                    .map(|_| (b'0' + rng.below(10) as u8) as char)
                    .collect();
                let mut sorted: Vec<char> = d.chars().collect();
                sorted.sort_unstable();
                Example::new(format!("{d}|"), sorted.into_iter().collect())
            }
        }
    }
}

/// `"17+25="` with answer `"42"`.
pub fn addition_example(a: u64, b: u64) -> Example {
    Example::new(format!("{a}+{b}="), (a + b).to_string())
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub prompt: String,
    pub answer: String,
}

impl Example {
    pub fn new(prompt: String, answer: String) -> Self {
        Self { prompt, answer }
    }

    /// `BOS` followed by the encoded prompt.
    pub fn prompt_tokens(&self) -> Result<Vec<u32>> {
        let mut out = vec![BOS];
        out.extend(vocab::encode(&self.prompt).ok_or_else(|| {
            Error::Config(format!(
                "prompt {:?} has characters outside the vocabulary",
                self.prompt
            ))
        })?);
        Ok(out)
    }

    /// Full training sequence: prompt, answer, `EOS`, then `PAD` to `gen_len`.
    pub fn sequence(&self, gen_len: usize) -> Result<ConditionalSequence> {
        let mut tokens = self.prompt_tokens()?;
        let prompt_len = tokens.len();
        let ans = vocab::encode(&self.answer).ok_or_else(|| {
            Error::Config(format!(
                "answer {:?} has characters outside the vocabulary",
                self.answer
            ))
        })?;
        if ans.len() > gen_len {
            return Err(Error::Config(format!(
                "answer {:?} longer than gen_len {gen_len}",
                self.answer
            )));
        }
        tokens.extend(&ans);
        if ans.len() < gen_len {
            tokens.push(EOS);
        }
        tokens.resize(prompt_len + gen_len, PAD);
        Ok(ConditionalSequence { tokens, prompt_len })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

impl Dataset {
    pub fn train_sequences(&self, gen_len: usize) -> Result<Vec<ConditionalSequence>> {
        self.train.iter().map(|e| e.sequence(gen_len)).collect()
    }
}

/// Deterministic disjoint train/eval splits: distinct prompts are drawn in
/// order, the first `n_eval` go to eval.
pub fn gen_dataset(task: &Task) -> Result<Dataset> {
    let want = task.n_train + task.n_eval;
    if task.length == 0 && task.kind != TaskKind::Addition2Digit {
        return Err(Error::Config("task length must be positive".into()));
    }
    if want as f64 > task.capacity() * 0.9 {
        return Err(Error::Config(format!(
            "{} distinct {} examples requested, the task has at most {}",
            want,
            task.kind.name(),
            task.capacity()
        )));
    }
    let mut rng = RngState::new(task.seed).split(task.kind as u64);
    let mut seen = HashSet::new();
    let mut all = Vec::with_capacity(want);
    while all.len() < want {
        let ex = task.sample(&mut rng);
        if seen.insert(ex.prompt.clone()) {
            all.push(ex);
        }
    }
    let train = all.split_off(task.n_eval);
    Ok(Dataset { train, eval: all })
}

/// One example per line, `prompt\tanswer`.
pub fn write_examples(path: &Path, examples: &[Example]) -> Result<()> {
    let mut f =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for e in examples {
        writeln!(f, "{}\t{}", e.prompt, e.answer).map_err(|err| Error::io(path, err))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_examples(path: &Path) -> Result<Vec<Example>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let (p, a) = line.split_once('\t').ok_or_else(|| {
            Error::Format(format!(
                "{}:{}: expected prompt<TAB>answer",
                path.display(),
                n + 1
            ))
        })?;
        out.push(Example::new(p.to_string(), a.to_string()));
    }
    Ok(out)
}

/// Generated answer text: tokens before the first `EOS` or `PAD`.
pub fn extract_answer(generated: &[u32]) -> String {
    let end = generated
        .iter()
        .position(|&t| t == EOS || t == PAD)
        .unwrap_or(generated.len());
    vocab::render(&generated[..end])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExampleRecord {
    pub prompt: String,
    pub expected: String,
    pub generated: String,
    pub correct: bool,
    pub mask_log: Vec<StepMaskLog>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub task: String,
    pub model_id: String,
    pub strategy: Strategy,
    pub top_k: usize,
    pub accuracy: f64,
    pub n: usize,
    pub records: Vec<ExampleRecord>,
}

impl EvalResult {
    pub fn std_error(&self) -> f64 {
        binomial_std_error(self.accuracy, self.n)
    }
}

pub fn binomial_std_error(p: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Run `f` on a pool of `workers` threads (0 = rayon default).
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn grade<M: StepModel>(model: &mut M, ex: &Example, dc: &DecodeConfig) -> Result<(String, bool)> {
    let trace = decode(model, &ex.prompt_tokens()?, dc)?;
    let got = extract_answer(trace.final_sequence.generated());
    let ok = got == ex.answer;
    Ok((got, ok))
}

/// Exact-match accuracy of `params` on `examples`, optionally with sink
/// masking. Examples run in parallel; results keep input order.
pub fn evaluate(
    params: &Parameters<f32>,
    task: &str,
    model_id: &str,
    examples: &[Example],
    dc: &DecodeConfig,
    policy: Option<&MaskPolicy>,
) -> Result<EvalResult> {
    let records: Vec<ExampleRecord> = examples
        .par_iter()
        .map(|ex| {
            let (generated, correct, mask_log) = match policy {
                None => {
                    let (g, c) = grade(&mut PlainModel(params), ex, dc)?;
                    (g, c, Vec::new())
                }
                Some(p) => {
                    let mut m = SinkMaskingModel::new(params, p.clone(), ex.prompt_tokens()?.len());
                    let (g, c) = grade(&mut m, ex, dc)?;
                    (g, c, m.into_log())
                }
            };
            Ok(ExampleRecord {
                prompt: ex.prompt.clone(),
                expected: ex.answer.clone(),
                generated,
                correct,
                mask_log,
            })
        })
        .collect::<Result<_>>()?;
    let n = records.len();
    let hits = records.iter().filter(|r| r.correct).count();
    Ok(EvalResult {
        task: task.to_string(),
        model_id: model_id.to_string(),
        strategy: dc.strategy,
        top_k: policy.map_or(0, |p| p.top_k),
        accuracy: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
        n,
        records,
    })
}

/// One table cell: a task, a column (model/strategy), a row setting
/// (`None` = unmasked), and its accuracy over `n` examples.
#[derive(Clone, Debug, PartialEq)]
pub struct TableEntry {
    pub task: String,
    pub column: String,
    pub top_k: Option<usize>,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub markdown: String,
    pub csv: String,
}

fn setting_label(k: Option<usize>) -> String {
    match k {
        None => "unmasked".into(),
        Some(k) => format!("K={k}"),
    }
}

/// Rows are task × {unmasked, K=…}; columns are models. Missing cells are `—`.
pub fn compare_table(entries: &[TableEntry]) -> ComparisonTable {
    let mut tasks: Vec<&str> = Vec::new();
    let mut columns: Vec<&str> = Vec::new();
    for e in entries {
        if !tasks.contains(&e.task.as_str()) {
            tasks.push(&e.task);
        }
        if !columns.contains(&e.column.as_str()) {
            columns.push(&e.column);
        }
    }
    let settings: BTreeSet<Option<usize>> = entries.iter().map(|e| e.top_k).collect();
    let cells: BTreeMap<(&str, Option<usize>, &str), &TableEntry> = entries
        .iter()
        .map(|e| ((e.task.as_str(), e.top_k, e.column.as_str()), e))
        .collect();
    let mut md = String::new();
    write!(md, "| task | setting |").unwrap();
    for c in &columns {
        write!(md, " {c} |").unwrap();
    }
    md.push('\n');
    md.push_str("|---|---|");
    for _ in &columns {
        md.push_str("---|");
    }
    md.push('\n');
    let mut csv = String::from("task,setting,column,accuracy,std_error,n\n");
    for t in &tasks {
        for &k in &settings {
            write!(md, "| {t} | {} |", setting_label(k)).unwrap();
            for c in &columns {
                match cells.get(&(*t, k, *c)) {
                    Some(e) => {
                        let se = binomial_std_error(e.accuracy, e.n);
                        write!(md, " {:.3} ± {:.3} |", e.accuracy, se).unwrap();
                        writeln!(
                            csv,
                            "{t},{},{c},{},{},{}",
                            setting_label(k),
                            e.accuracy,
                            se,
                            e.n
                        )
                        .unwrap();
                    }
                    None => md.push_str(" — |"),
                }
            }
            md.push('\n');
        }
    }
    ComparisonTable { markdown: md, csv }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    #[test]
    fn addition_and_copy_templates() {
        let e = addition_example(17, 25);
        assert_eq!((e.prompt.as_str(), e.answer.as_str()), ("17+25=", "42"));
        let t = Task {
            kind: TaskKind::Copy,
            length: 4,
            n_train: 5,
            n_eval: 5,
            seed: 1,
        };
        let d = gen_dataset(&t).unwrap();
        for e in d.train.iter().chain(&d.eval) {
            assert_eq!(e.prompt, format!("{}|", e.answer));
        }
    }

    #[test]
    fn splits_disjoint_and_deterministic() {
        for kind in [
            TaskKind::Copy,
            TaskKind::Reverse,
            TaskKind::Addition2Digit,
            TaskKind::SortDigits,
        ] {
            let t = Task {
                kind,
                n_train: 300,
                n_eval: 100,
                length: 5,
                seed: 3,
            };
            let d = gen_dataset(&t).unwrap();
            assert_eq!((d.train.len(), d.eval.len()), (300, 100));
            let train: HashSet<&str> = d.train.iter().map(|e| e.prompt.as_str()).collect();
            assert!(d.eval.iter().all(|e| !train.contains(e.prompt.as_str())));
            assert_eq!(d, gen_dataset(&t).unwrap());
            for e in &d.train {
                let s = e.sequence(t.gen_len()).unwrap();
                assert_eq!(s.tokens.len(), t.seq_len());
                assert_eq!(s.prompt_len, t.prompt_len());
            }
        }
    }

    #[test]
    fn oversized_request_rejected() {
        let t = Task {
            kind: TaskKind::SortDigits,
            length: 2,
            n_train: 100,
            n_eval: 10,
            seed: 0,
        };
        assert!(matches!(gen_dataset(&t), Err(Error::Config(_))));
    }

    #[test]
    fn sequence_layout() {
        let s = addition_example(50, 50).sequence(4).unwrap();
        assert_eq!(vocab::render(&s.tokens), "^50+50=100$");
        let s = addition_example(10, 10).sequence(4).unwrap();
        assert_eq!(
            s.tokens[s.prompt_len..],
            [vocab::encode("20").unwrap(), vec![EOS, PAD]].concat()[..]
        );
    }

    #[test]
    fn answer_extraction_trims() {
        let mut g = vocab::encode("42").unwrap();
        g.extend([EOS, PAD]);
        assert_eq!(extract_answer(&g), "42");
        let mut g = vocab::encode("4").unwrap();
        g.extend([PAD, vocab::encode_char('2').unwrap()]);
        assert_eq!(extract_answer(&g), "4");
    }

    #[test]
    fn examples_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tsv");
        let ex = vec![
            addition_example(11, 22),
            Example::new("ab|".into(), "ab".into()),
        ];
        write_examples(&p, &ex).unwrap();
        assert_eq!(read_examples(&p).unwrap(), ex);
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "11+22=\t33\nab|\tab\n"
        );
    }

    #[test]
    fn untrained_model_is_near_chance_and_deterministic() {
        let t = Task {
            kind: TaskKind::Addition2Digit,
            n_train: 0,
            n_eval: 40,
            ..Task::default()
        };
        let d = gen_dataset(&t).unwrap();
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_head: 8,
            mlp_hidden: 32,
            max_seq: 16,
            ..ModelConfig::default()
        };
        let p = init_params(&cfg, &RngState::new(1)).unwrap();
        let dc = DecodeConfig {
            gen_len: 4,
            block_size: 4,
            total_steps: 4,
            ..DecodeConfig::default()
        };
        let a = evaluate(&p, "addition_2digit", "dlm", &d.eval, &dc, None).unwrap();
        assert!(a.accuracy < 0.1);
        assert_eq!(
            a,
            evaluate(&p, "addition_2digit", "dlm", &d.eval, &dc, None).unwrap()
        );
    }

    #[test]
    fn table_layout_and_missing_cells() {
        let one = compare_table(&[TableEntry {
            task: "copy".into(),
            column: "dlm".into(),
            top_k: None,
            accuracy: 0.5,
            n: 100,
        }]);
        assert_eq!(one.markdown.lines().count(), 3);
        assert!(one.markdown.contains("0.500 ± 0.050"));
        let t = compare_table(&[
            TableEntry {
                task: "copy".into(),
                column: "dlm".into(),
                top_k: None,
                accuracy: 1.0,
                n: 10,
            },
            TableEntry {
                task: "copy".into(),
                column: "arm".into(),
                top_k: Some(1),
                accuracy: 0.9,
                n: 10,
            },
        ]);
        assert_eq!(t.markdown.matches('—').count(), 2);
        assert!(t
            .csv
            .starts_with("task,setting,column,accuracy,std_error,n\n"));
    }
}
