//! Experiment orchestration: the variant matrix, the message-length sweep,
//! the standalone lemma check and codec reports over evaluation traces.
//!
//! Every training run writes into its own directory, and per-cell result
//! files are written to a temporary name and renamed when complete.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec;
use crate::config::RunConfig;
use crate::entropy::lemma::{self, BatchShape, LemmaReport};
use crate::env::{Setting, Task};
use crate::error::{Error, Result};
use crate::quantization::Quantizer;
use crate::trainer::{self, MessageRecord, Progress, Variant};

/// Reduced schedules that finish on a laptop CPU in minutes.
pub fn desk_config(task: Task, setting: Setting) -> RunConfig {
    let mut c = RunConfig::new(task, setting);
    c.agent.hidden = 32;
    c.agent.msg_len = 16;
    let t = &mut c.train;
    // (t_n, t_max, alpha_p, lr, eval_every)
    let (t_n, t_max, alpha_p, lr, every) = match task {
        Task::TreasureHunt => (60, 100, 0.2, 0.01, 20),
        Task::PredatorPrey => (300, 450, 0.003, 0.03, 50),
        Task::TrafficJunction => (60, 100, 0.05, 0.01, 20),
    };
    t.t_n = Some(t_n);
    t.t_max = Some(t_max);
    t.alpha_p = Some(alpha_p);
    t.lr = Some(lr);
    t.episodes_per_epoch = Some(32);
    t.eval_episodes = Some(DESK_EVAL_EPISODES);
    t.eval_every = Some(every);
    c
}

/// Fills schedule keys left unset in `c` from the desk schedule of its task.
pub fn apply_desk(c: &mut RunConfig) {
    let d = desk_config(c.env.task, c.env.setting).train;
    let t = &mut c.train;
    t.t_n = t.t_n.or(d.t_n);
    t.t_max = t.t_max.or(d.t_max);
    t.alpha_p = t.alpha_p.or(d.alpha_p);
    t.lr = t.lr.or(d.lr);
    t.episodes_per_epoch = t.episodes_per_epoch.or(d.episodes_per_epoch);
    t.eval_episodes = t.eval_episodes.or(d.eval_episodes);
    t.eval_every = t.eval_every.or(d.eval_every);
}

pub const DESK_SEEDS: usize = 2;
pub const DESK_EVAL_EPISODES: usize = 100;
pub const FULL_SEEDS: usize = 5;
pub const FULL_EVAL_EPISODES: usize = 500;

/// `mean ±std` (population standard deviation) with `decimals` places.
pub fn format_mean_std(values: &[f64], decimals: usize) -> String {
    let (m, s) = mean_std(values);
    format!("{m:.decimals$} ±{s:.decimals$}")
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Config(e.to_string()))
}

/// Final result of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub task: String,
    pub setting: String,
    pub variant: String,
    pub scheme: String,
    pub msg_len: usize,
    pub seed: u64,
    pub perf_metric: f64,
    pub entropy_bits: f64,
    /// Performance and entropy of the same run at `t_n`.
    pub perf_at_t_n: f64,
    pub entropy_at_t_n: f64,
    pub mean_return: f64,
    /// Huffman-coded bits per message over the final evaluation.
    pub coded_bits_per_message: f64,
    pub error: String,
}

/// Trains one configuration into `dir` and summarizes it.
pub fn run_cell(config: &RunConfig, dir: &Path, progress: impl FnMut(Progress<'_>)) -> Result<CellResult> {
    let out = trainer::train(config, Some(dir), progress)?;
    let q = config.quantizer()?;
    let spec = config.spec()?;
    let mut bits = 0usize;
    let mut messages = 0usize;
    for agent in 0..spec.n_agents {
        if let Some(mb) = out.last.agent_messages(agent, config.agent.msg_len)? {
            messages += mb.n();
            bits += codec::code_batch(&mb, &q)?.iter().map(|s| s.coded_bits).sum::<usize>();
        }
    }
    write_trace(&dir.join("eval_trace.jsonl"), &out.last.messages)?;
    Ok(CellResult {
        task: spec.task.to_string(),
        setting: spec.setting.to_string(),
        variant: config.train.variant.to_string(),
        scheme: config.agent.scheme.to_string(),
        msg_len: config.agent.msg_len,
        seed: config.run.seed,
        perf_metric: out.last.perf,
        entropy_bits: out.last.entropy_bits,
        perf_at_t_n: out.at_t_n.perf,
        entropy_at_t_n: out.at_t_n.entropy_bits,
        mean_return: out.last.mean_return,
        coded_bits_per_message: if messages > 0 { bits as f64 / messages as f64 } else { 0.0 },
        error: String::new(),
    })
}

fn failed_cell(config: &RunConfig, err: &Error) -> CellResult {
    CellResult {
        task: config.env.task.to_string(),
        setting: config.env.setting.to_string(),
        variant: config.train.variant.to_string(),
        scheme: config.agent.scheme.to_string(),
        msg_len: config.agent.msg_len,
        seed: config.run.seed,
        perf_metric: f64::NAN,
        entropy_bits: f64::NAN,
        perf_at_t_n: f64::NAN,
        entropy_at_t_n: f64::NAN,
        mean_return: f64::NAN,
        coded_bits_per_message: f64::NAN,
        error: err.to_string(),
    }
}

#[derive(Clone, Debug)]
pub struct Matrix {
    /// Template for every cell; task, setting, variant and seed are
    /// replaced per cell. With `desk` set, the task's desk schedule is used
    /// for keys the template leaves unset.
    pub base: RunConfig,
    pub desk: bool,
    pub tasks: Vec<Task>,
    pub settings: Vec<Setting>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl Matrix {
    pub fn cell_config(&self, task: Task, setting: Setting, variant: Variant, seed: u64) -> RunConfig {
        let mut c = self.base.clone();
        c.env.task = task;
        c.env.setting = setting;
        if self.desk {
            apply_desk(&mut c);
        }
        c.train.variant = variant;
        c.run.seed = seed;
        c
    }

    pub fn cells(&self) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for &task in &self.tasks {
            for &setting in &self.settings {
                for &variant in &self.variants {
                    for &seed in &self.seeds {
                        out.push(self.cell_config(task, setting, variant, seed));
                    }
                }
            }
        }
        out
    }
}

fn cell_name(c: &RunConfig) -> String {
    format!(
        "{}-{}_{}_{}_L{}_seed{}",
        c.env.task.short(),
        c.env.setting,
        c.train.variant,
        c.agent.scheme.short(),
        c.agent.msg_len,
        c.run.seed
    )
}

/// Runs every config, one directory per run under `out_dir`. A failing run
/// is recorded with its error and the rest continue.
pub fn run_cells(
    configs: &[RunConfig],
    out_dir: &Path,
    mut progress: impl FnMut(&RunConfig, Progress<'_>),
) -> Result<Vec<CellResult>> {
    let mut results = Vec::with_capacity(configs.len());
    for c in configs {
        let name = cell_name(c);
        let result = run_cell(c, &out_dir.join("runs").join(&name), |p| progress(c, p))
            .unwrap_or_else(|e| failed_cell(c, &e));
        write_atomic(&out_dir.join("cells").join(format!("{name}.csv")), &csv_bytes(&[&result])?)?;
        results.push(result);
    }
    Ok(results)
}

/// One row of the summary table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub task: String,
    pub setting: String,
    pub variant: String,
    pub scheme: String,
    pub runs: usize,
    pub failures: usize,
    pub perf: String,
    pub entropy: String,
    pub perf_mean: f64,
    pub entropy_mean: f64,
}

/// Groups results by task, setting, scheme and variant.
pub fn summarize(results: &[CellResult]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String, String, usize), Vec<&CellResult>> = BTreeMap::new();
    let order = |v: &str| Variant::ALL.iter().position(|x| x.to_string() == v).unwrap_or(usize::MAX);
    for r in results {
        groups
            .entry((format!("{}-{}", r.task, r.setting), r.scheme.clone(), r.variant.clone(), order(&r.variant)))
            .or_default()
            .push(r);
    }
    let mut keys: Vec<_> = groups.keys().cloned().collect();
    keys.sort_by(|a, b| (&a.0, &a.1, a.3).cmp(&(&b.0, &b.1, b.3)));
    keys.into_iter()
        .map(|k| {
            let rs = &groups[&k];
            let ok: Vec<&&CellResult> = rs.iter().filter(|r| r.error.is_empty()).collect();
            let perf: Vec<f64> = ok.iter().map(|r| r.perf_metric).collect();
            let ent: Vec<f64> = ok.iter().map(|r| r.entropy_bits).collect();
            let task: Task = rs[0].task.parse().unwrap_or(Task::PredatorPrey);
            let decimals = if task.metric().lower_is_better() { 1 } else { 2 };
            SummaryRow {
                task: rs[0].task.clone(),
                setting: rs[0].setting.clone(),
                variant: k.2.clone(),
                scheme: k.1.clone(),
                runs: rs.len(),
                failures: rs.len() - ok.len(),
                perf: format_mean_std(&perf, decimals),
                entropy: format_mean_std(&ent, 1),
                perf_mean: mean_std(&perf).0,
                entropy_mean: mean_std(&ent).0,
            }
        })
        .collect()
}

/// Plain-text table in the layout `setting | variant | perf | entropy`.
pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<22} {:<12} {:<8} {:>16} {:>16} {:>5}",
        "setting", "scheme", "variant", "perf", "entropy (bits)", "fail"
    );
    for r in rows {
        let task: Task = r.task.parse().unwrap_or(Task::PredatorPrey);
        let label = format!("{}-{} ({})", task.short(), r.setting, task.metric().label());
        let _ = writeln!(
            s,
            "{:<22} {:<12} {:<8} {:>16} {:>16} {:>5}",
            label, r.scheme, r.variant, r.perf, r.entropy, r.failures
        );
    }
    s
}

#[derive(Debug)]
pub struct MatrixOutput {
    pub results: Vec<CellResult>,
    pub summary: Vec<SummaryRow>,
}

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_TEXT: &str = "summary.txt";

/// Trains every cell of `matrix`, then writes `results.csv`, `summary.csv`
/// and `summary.txt` to `out_dir`.
pub fn run_matrix(
    matrix: &Matrix,
    out_dir: &Path,
    progress: impl FnMut(&RunConfig, Progress<'_>),
) -> Result<MatrixOutput> {
    let results = run_cells(&matrix.cells(), out_dir, progress)?;
    let summary = summarize(&results);
    write_atomic(&out_dir.join(RESULTS_FILE), &csv_bytes(&results)?)?;
    write_atomic(&out_dir.join(SUMMARY_FILE), &csv_bytes(&summary)?)?;
    let mut text = render_summary(&summary);
    if matrix.variants.contains(&Variant::Difem) {
        text.push_str("\nDifEM: per-digit Gaussian differential-entropy penalty on the message batch.\n");
    }
    write_atomic(&out_dir.join(SUMMARY_TEXT), text.as_bytes())?;
    Ok(MatrixOutput { results, summary })
}

/// One point of the message-length sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub msg_len: usize,
    pub variant: String,
    pub seed: u64,
    pub entropy_bits: f64,
    pub perf_metric: f64,
    pub error: String,
}

pub const SWEEP_FILE: &str = "sweep.csv";

/// Trains `base` for every message length, variant and seed; writes
/// `sweep.csv` with one `(entropy, perf)` point per run.
pub fn sweep_msg_len(
    base: &RunConfig,
    lengths: &[usize],
    variants: &[Variant],
    seeds: &[u64],
    out_dir: &Path,
    progress: impl FnMut(&RunConfig, Progress<'_>),
) -> Result<Vec<SweepPoint>> {
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(Error::Config("message lengths must be positive".into()));
    }
    let mut configs = Vec::new();
    for &len in lengths {
        for &variant in variants {
            for &seed in seeds {
                let mut c = base.clone();
                c.agent.msg_len = len;
                c.train.variant = variant;
                c.run.seed = seed;
                configs.push(c);
            }
        }
    }
    let results = run_cells(&configs, out_dir, progress)?;
    let points: Vec<SweepPoint> = results
        .into_iter()
        .map(|r| SweepPoint {
            msg_len: r.msg_len,
            variant: r.variant,
            seed: r.seed,
            entropy_bits: r.entropy_bits,
            perf_metric: r.perf_metric,
            error: r.error,
        })
        .collect();
    write_atomic(&out_dir.join(SWEEP_FILE), &csv_bytes(&points)?)?;
    Ok(points)
}

/// Random batches plus a batch made only of grid points.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LemmaCheck {
    pub random: LemmaReport,
    pub grid_only: LemmaReport,
}

impl LemmaCheck {
    pub fn passed(&self) -> bool {
        self.random.passed() && self.grid_only.passed() && self.grid_only.updates == 0
    }
}

pub fn lemma_check(trials: usize, seed: u64) -> Result<LemmaCheck> {
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    Ok(LemmaCheck {
        random: lemma::run_with(trials, seed, BatchShape::Random)?,
        grid_only: lemma::run_with(trials, seed, BatchShape::GridOnly)?,
    })
}

/// Writes one JSON object per message.
pub fn write_trace(path: &Path, records: &[MessageRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(&tmp, e))?;
    }
    w.flush().map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<Vec<MessageRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Per-agent, per-digit coding statistics of a trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CodecRow {
    pub agent: usize,
    pub digit: usize,
    pub symbols: usize,
    pub entropy_bits: f64,
    pub mean_code_len: f64,
    pub within_bound: bool,
    pub lossless: bool,
}

pub fn codec_report(records: &[MessageRecord], q: &Quantizer) -> Result<Vec<CodecRow>> {
    let mut by_agent: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for r in records {
        by_agent.entry(r.agent).or_default().push(&r.message);
    }
    let mut rows = Vec::new();
    for (agent, msgs) in by_agent {
        let batch = crate::entropy::MessageBatch::from_rows(&msgs)?;
        for s in codec::code_batch(&batch, q)? {
            rows.push(CodecRow {
                agent,
                digit: s.digit,
                symbols: s.symbols,
                entropy_bits: s.entropy_bits,
                mean_code_len: s.mean_code_len,
                within_bound: s.within_source_bound(),
                lossless: s.lossless,
            });
        }
    }
    Ok(rows)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, &csv_bytes(rows)?)
}

pub fn default_out_dir() -> PathBuf {
    PathBuf::from("disem-out")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::AgentConfig;

    #[test]
    fn mean_std_formatting() {
        assert_eq!(format_mean_std(&[10.0, 10.2], 1), "10.1 ±0.1");
        assert_eq!(format_mean_std(&[0.0, 0.0], 1), "0.0 ±0.0");
    }

    #[test]
    fn matrix_counts_cells() {
        let m = Matrix {
            base: RunConfig::default(),
            desk: true,
            tasks: vec![Task::PredatorPrey],
            settings: vec![Setting::A],
            variants: vec![Variant::Ori, Variant::Zc],
            seeds: vec![0, 1],
        };
        let cells = m.cells();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[3].train.variant, Variant::Zc);
        assert_eq!(cells[3].run.seed, 1);
        assert_eq!(cells[0].train.t_n, desk_config(Task::PredatorPrey, Setting::A).train.t_n);
    }

    fn tiny() -> RunConfig {
        let mut c = RunConfig::new(Task::PredatorPrey, Setting::A);
        c.agent = AgentConfig {
            hidden: 6,
            msg_len: 2,
            ..AgentConfig::default()
        };
        c.train.t_n = Some(1);
        c.train.t_max = Some(2);
        c.train.episodes_per_epoch = Some(2);
        c.train.eval_episodes = Some(3);
        c
    }

    #[test]
    fn tiny_matrix_runs_and_zc_is_silent() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix {
            base: tiny(),
            desk: false,
            tasks: vec![Task::PredatorPrey],
            settings: vec![Setting::A],
            variants: vec![Variant::Ori, Variant::Zc],
            seeds: vec![0, 1],
        };
        let out = run_matrix(&m, dir.path(), |_, _| {}).unwrap();
        assert_eq!(out.results.len(), 4);
        assert_eq!(out.summary.len(), 2);
        let zc = out.summary.iter().find(|r| r.variant == "ZC").unwrap();
        assert_eq!(zc.entropy, "0.0 ±0.0");
        assert!(dir.path().join(RESULTS_FILE).exists());
        assert_eq!(fs::read_dir(dir.path().join("cells")).unwrap().count(), 4);
    }

    #[test]
    fn failing_cell_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let mut bad = tiny();
        bad.env.n_agents = Some(0);
        let out = run_cells(&[bad, tiny()], dir.path(), |_, _| {}).unwrap();
        assert!(!out[0].error.is_empty());
        assert!(out[1].error.is_empty());
    }

    #[test]
    fn lemma_check_rejects_zero_trials() {
        assert!(lemma_check(0, 1).is_err());
        let r = lemma_check(50, 1).unwrap();
        assert!(r.passed());
        assert_eq!(r.grid_only.updates, 0);
    }

    #[test]
    fn trace_round_trip_and_codec_report() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<MessageRecord> = (0..40)
            .map(|i| MessageRecord {
                episode: i / 10,
                t: i % 10,
                agent: i % 2,
                message: vec![(i as f64 * 0.37).sin(), 0.5],
            })
            .collect();
        let path = dir.path().join("t.jsonl");
        write_trace(&path, &recs).unwrap();
        assert_eq!(read_trace(&path).unwrap(), recs);
        let rows = codec_report(&recs, &Quantizer::default()).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.within_bound && r.lossless));
        assert_eq!(rows[1].entropy_bits, 0.0);
    }
}
