//! Experiment orchestration: config files, seeded runs, metric logging,
//! checkpointing, temperature sweeps, plot-data export and run comparison.
//!
//! Config files are TOML with a schema version; unknown keys are hard
//! errors (a silently ignored typo in a temperature field would invalidate
//! a run's conclusions). Given the same config and seed, a run writes
//! byte-identical metric logs, eval tables and checkpoints; wall-clock
//! timings go to a separate per-step record file that is excluded from
//! that guarantee.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::grpo::{self, GrpoConfig};
use crate::metrics::{self, EvalPlan, MetricRecord, MetricSink};
use crate::osft::{self, OsftConfig, SftConfig};
use crate::policy::{init_policy, PolicyKind};
use crate::rng::RngStream;
use crate::sampling::{self, TemperatureConfig};
use crate::tasks::{Task, TaskSpec};

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable overriding the output root of `run_experiment`.
pub const OUT_ROOT_ENV: &str = "TAULAB_OUT_ROOT";

const STREAM_CORPUS: u64 = 23;
const STREAM_SWEEP: u64 = 29;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    #[serde(default = "default_output_root")]
    pub output_root: PathBuf,
    pub task: TaskSpec,
    pub policy: PolicyConfig,
    #[serde(default)]
    pub pre_sft: Option<PreSftConfig>,
    pub method: MethodConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_output_root() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Defaults to the task's recommended window.
    #[serde(default)]
    pub context_window: Option<usize>,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
}

fn default_hidden_dim() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreSftConfig {
    pub corpus_size: usize,
    pub noise_rate: f64,
    #[serde(default = "default_sft_steps")]
    pub steps: usize,
    #[serde(default = "default_sft_batch")]
    pub batch_size: usize,
    #[serde(default = "default_sft_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
}

fn default_sft_steps() -> usize {
    300
}
fn default_sft_batch() -> usize {
    64
}
fn default_sft_lr() -> f64 {
    1.0
}
fn default_warmup() -> usize {
    10
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    PreSftOnly,
    Osft,
    Grpo,
    Dapo,
    DrGrpo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub kind: MethodKind,
    /// Settings for kind = "osft".
    #[serde(default)]
    pub osft: Option<OsftOverrides>,
    /// Settings for the grpo-family kinds (grpo, dapo, dr_grpo).
    #[serde(default)]
    pub grpo: Option<GrpoOverrides>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OsftOverrides {
    pub tau_s: Option<f64>,
    pub tau_t: Option<f64>,
    pub rollouts_per_prompt: Option<usize>,
    pub inner_iters: Option<usize>,
    pub outer_steps: Option<usize>,
    pub batch_prompts: Option<usize>,
    pub learning_rate: Option<f64>,
    pub warmup_steps: Option<usize>,
    pub max_len: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoOverrides {
    pub group_size: Option<usize>,
    pub clip_low: Option<f64>,
    pub clip_high: Option<f64>,
    pub clip_ratio_c: Option<f64>,
    pub beta_kl: Option<f64>,
    pub normalize_std: Option<bool>,
    pub loss_agg: Option<grpo::LossAgg>,
    pub learning_rate: Option<f64>,
    pub inner_iters: Option<usize>,
    pub outer_steps: Option<usize>,
    pub batch_prompts: Option<usize>,
    pub warmup_steps: Option<usize>,
    pub max_len: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_eval_every")]
    pub every_k_steps: usize,
    #[serde(default = "default_eval_samples")]
    pub samples_per_prompt: usize,
    #[serde(default = "default_k_list")]
    pub k_list: Vec<usize>,
    #[serde(default = "default_tau_eval")]
    pub tau_eval: Vec<f64>,
    #[serde(default = "default_eval_samples")]
    pub ppl_samples: usize,
}

fn default_eval_every() -> usize {
    20
}
fn default_eval_samples() -> usize {
    16
}
fn default_k_list() -> Vec<usize> {
    vec![1, 8]
}
fn default_tau_eval() -> Vec<f64> {
    vec![1.0]
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            every_k_steps: default_eval_every(),
            samples_per_prompt: default_eval_samples(),
            k_list: default_k_list(),
            tau_eval: default_tau_eval(),
            ppl_samples: default_eval_samples(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version: expected {SCHEMA_VERSION}, got {}",
                self.schema_version
            )));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("name: must be a nonempty path-safe string, got {:?}", self.name)));
        }
        self.task.validate()?;
        match self.method.kind {
            MethodKind::Osft => {
                if self.method.grpo.is_some() {
                    return Err(Error::Config("method.grpo: not allowed when kind = \"osft\"".into()));
                }
            }
            MethodKind::Grpo | MethodKind::Dapo | MethodKind::DrGrpo => {
                if self.method.osft.is_some() {
                    return Err(Error::Config("method.osft: not allowed for grpo-family methods".into()));
                }
            }
            MethodKind::PreSftOnly => {
                if self.method.osft.is_some() || self.method.grpo.is_some() {
                    return Err(Error::Config("method: pre_sft_only takes no method settings".into()));
                }
                if self.pre_sft.is_none() {
                    return Err(Error::Config("method: pre_sft_only requires a [pre_sft] section".into()));
                }
            }
        }
        self.eval_plan().validate()?;
        Ok(())
    }

    pub fn eval_plan(&self) -> EvalPlan {
        EvalPlan {
            every_k_steps: self.eval.every_k_steps,
            samples_per_prompt: self.eval.samples_per_prompt,
            k_list: self.eval.k_list.clone(),
            tau_eval: self.eval.tau_eval.clone(),
            ppl_samples: self.eval.ppl_samples,
        }
    }

    pub fn osft_config(&self, task: &Task) -> OsftConfig {
        let o = self.method.osft.clone().unwrap_or_default();
        let d = OsftConfig::default();
        OsftConfig {
            temperatures: TemperatureConfig::new(
                o.tau_s.unwrap_or(0.6),
                o.tau_t.unwrap_or(1.0),
                self.eval.tau_eval.first().copied().unwrap_or(1.0),
            ),
            rollouts_per_prompt: o.rollouts_per_prompt.unwrap_or(d.rollouts_per_prompt),
            inner_iters: o.inner_iters.unwrap_or(d.inner_iters),
            outer_steps: o.outer_steps.unwrap_or(d.outer_steps),
            batch_prompts: o.batch_prompts.unwrap_or(d.batch_prompts),
            learning_rate: o.learning_rate.unwrap_or(d.learning_rate),
            warmup_steps: o.warmup_steps.unwrap_or(d.warmup_steps),
            max_len: o.max_len.unwrap_or_else(|| task.recommended_max_len()),
        }
    }

    pub fn grpo_config(&self, task: &Task) -> GrpoConfig {
        let base = match self.method.kind {
            MethodKind::Dapo => GrpoConfig::dapo_preset(),
            MethodKind::DrGrpo => GrpoConfig::dr_grpo_preset(),
            _ => GrpoConfig::default(),
        };
        let o = self.method.grpo.clone().unwrap_or_default();
        GrpoConfig {
            group_size: o.group_size.unwrap_or(base.group_size),
            clip_low: o.clip_low.unwrap_or(base.clip_low),
            clip_high: o.clip_high.unwrap_or(base.clip_high),
            clip_ratio_c: o.clip_ratio_c.or(base.clip_ratio_c),
            beta_kl: o.beta_kl.unwrap_or(base.beta_kl),
            normalize_std: o.normalize_std.unwrap_or(base.normalize_std),
            loss_agg: o.loss_agg.unwrap_or(base.loss_agg),
            temperatures: base.temperatures,
            learning_rate: o.learning_rate.unwrap_or(base.learning_rate),
            inner_iters: o.inner_iters.unwrap_or(base.inner_iters),
            outer_steps: o.outer_steps.unwrap_or(base.outer_steps),
            batch_prompts: o.batch_prompts.unwrap_or(base.batch_prompts),
            warmup_steps: o.warmup_steps.unwrap_or(base.warmup_steps),
            max_len: o.max_len.unwrap_or_else(|| task.recommended_max_len()),
        }
    }
}

/// Parse a config file. TOML errors carry the offending field path.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let cfg: ExperimentConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Run sink: metrics.jsonl (deterministic) + steps.jsonl (includes wall time)
// ---------------------------------------------------------------------------

struct RunSink {
    metrics_file: BufWriter<File>,
    steps_file: BufWriter<File>,
    records: Vec<MetricRecord>,
}

impl RunSink {
    fn create(run_dir: &Path) -> Result<Self> {
        Ok(Self {
            metrics_file: BufWriter::new(File::create(run_dir.join("metrics.jsonl"))?),
            steps_file: BufWriter::new(File::create(run_dir.join("steps.jsonl"))?),
            records: Vec::new(),
        })
    }
}

impl MetricSink for RunSink {
    fn metric(&mut self, rec: &MetricRecord) -> Result<()> {
        serde_json::to_writer(&mut self.metrics_file, rec)?;
        self.metrics_file.write_all(b"\n")?;
        self.metrics_file.flush()?;
        self.records.push(rec.clone());
        Ok(())
    }

    fn step_record(&mut self, rec: &serde_json::Value) -> Result<()> {
        serde_json::to_writer(&mut self.steps_file, rec)?;
        self.steps_file.write_all(b"\n")?;
        self.steps_file.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub records: Vec<MetricRecord>,
}

impl RunSummary {
    /// Latest value of a metric at or before `step`, matching all tags.
    pub fn metric_at(&self, name: &str, step: usize, tags: &[(&str, &str)]) -> Option<f64> {
        self.records
            .iter()
            .filter(|r| r.name == name && r.step <= step)
            .filter(|r| tags.iter().all(|(k, v)| r.tags.get(*k).map(String::as_str) == Some(*v)))
            .max_by_key(|r| r.step)
            .map(|r| r.value)
    }

    /// Step of the last evaluation (pre-SFT loss records use their own
    /// step numbering, so the overall maximum would overshoot).
    pub fn final_step(&self) -> usize {
        final_eval_step(&self.records)
    }
}

/// Run the experiment described by a config file. The output root can be
/// overridden with the `TAULAB_OUT_ROOT` environment variable.
pub fn run_experiment(config_path: &Path) -> Result<RunSummary> {
    let override_root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from);
    run_experiment_with_root(config_path, override_root.as_deref())
}

pub fn run_experiment_with_root(config_path: &Path, out_root: Option<&Path>) -> Result<RunSummary> {
    let cfg = load_config(config_path)?;
    let root = out_root.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_root.clone());
    let run_dir = root.join(&cfg.name);
    fs::create_dir_all(&run_dir)?;
    fs::copy(config_path, run_dir.join("config.toml"))?;
    run_in_dir(&cfg, &run_dir)
}

fn run_in_dir(cfg: &ExperimentConfig, run_dir: &Path) -> Result<RunSummary> {
    let task = Task::new(cfg.task.clone())?;
    fs::write(
        run_dir.join("task.json"),
        format!("{}\n", serde_json::to_string(task.spec())?),
    )?;

    let window = cfg.policy.context_window.unwrap_or_else(|| task.recommended_window());
    let mut params = init_policy(
        cfg.policy.kind,
        task.vocab().clone(),
        window,
        cfg.policy.hidden_dim,
        cfg.seed,
    )?;
    let prompts = task.enumerate_prompts();
    let eval_plan = cfg.eval_plan();
    let mut sink = RunSink::create(run_dir)?;

    if let Some(pre) = &cfg.pre_sft {
        let corpus = task.build_pretrain_corpus(
            pre.corpus_size,
            pre.noise_rate,
            &mut RngStream::new(cfg.seed, STREAM_CORPUS),
        )?;
        let sft_cfg = SftConfig {
            steps: pre.steps,
            batch_size: pre.batch_size,
            learning_rate: pre.learning_rate,
            warmup_steps: pre.warmup_steps,
            tau: 1.0,
        };
        params = osft::sft_train(params, &corpus, &sft_cfg, &mut sink, cfg.seed)?;
        checkpoint::save(&params, &run_dir.join("checkpoint_base.json"))?;
    }

    let max_len = task.recommended_max_len();
    params = match cfg.method.kind {
        MethodKind::PreSftOnly => {
            osft::run_eval(&params, &task, &prompts, &eval_plan, max_len, &RngStream::new(cfg.seed, 31), 0, &mut sink)?;
            params
        }
        MethodKind::Osft => {
            let ocfg = cfg.osft_config(&task);
            osft::osft_train(params, &task, &prompts, &ocfg, &eval_plan, &mut sink, cfg.seed, Some(run_dir))?
        }
        MethodKind::Grpo | MethodKind::Dapo | MethodKind::DrGrpo => {
            let gcfg = cfg.grpo_config(&task);
            grpo::grpo_train(params, &task, &prompts, &gcfg, &eval_plan, &mut sink, cfg.seed, Some(run_dir))?
        }
    };

    checkpoint::save(&params, &run_dir.join("checkpoint_final.json"))?;
    write_eval_csv(run_dir, &sink.records)?;
    write_report(run_dir, cfg, &task, &sink.records)?;
    Ok(RunSummary { run_dir: run_dir.to_path_buf(), records: sink.records })
}

fn final_eval_step(records: &[MetricRecord]) -> usize {
    records
        .iter()
        .filter(|r| r.name == "pass_at_k")
        .map(|r| r.step)
        .max()
        .unwrap_or_else(|| records.iter().map(|r| r.step).max().unwrap_or(0))
}

fn write_eval_csv(run_dir: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut f = BufWriter::new(File::create(run_dir.join("eval.csv"))?);
    writeln!(f, "step,metric,tau,k,value")?;
    for r in records {
        match r.name.as_str() {
            "pass_at_k" => writeln!(
                f,
                "{},{},{},{},{}",
                r.step,
                r.name,
                r.tags.get("tau").map(String::as_str).unwrap_or(""),
                r.tags.get("k").map(String::as_str).unwrap_or(""),
                r.value
            )?,
            "ppl" => writeln!(
                f,
                "{},{},{},,{}",
                r.step,
                r.name,
                r.tags.get("tau").map(String::as_str).unwrap_or(""),
                r.value
            )?,
            _ => {}
        }
    }
    f.flush()?;
    Ok(())
}

fn write_report(run_dir: &Path, cfg: &ExperimentConfig, task: &Task, records: &[MetricRecord]) -> Result<()> {
    let final_step = final_eval_step(records);
    let mut f = BufWriter::new(File::create(run_dir.join("report.txt"))?);
    writeln!(f, "run: {}", cfg.name)?;
    writeln!(f, "method: {:?}", cfg.method.kind)?;
    writeln!(f, "seed: {}", cfg.seed)?;
    writeln!(f, "task fingerprint: {}", task.fingerprint())?;
    writeln!(f, "prompts: {}", task.instance_count())?;
    writeln!(f, "samples per prompt: {}", cfg.eval.samples_per_prompt)?;
    writeln!(f, "ppl measured at tau=1 on {} self-generated responses", cfg.eval.ppl_samples)?;
    writeln!(f)?;
    writeln!(f, "final evaluation (step {final_step}):")?;
    for r in records.iter().filter(|r| r.step == final_step && r.name == "pass_at_k") {
        writeln!(
            f,
            "  pass@{} (tau={}) = {:.4}",
            r.tags.get("k").map(String::as_str).unwrap_or("?"),
            r.tags.get("tau").map(String::as_str).unwrap_or("?"),
            r.value
        )?;
    }
    if let Some(ppl) = records.iter().rfind(|r| r.step == final_step && r.name == "ppl") {
        writeln!(f, "  ppl = {:.4}", ppl.value)?;
    }
    f.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub samples_per_prompt: usize,
    pub prompt_count: usize,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,k,pass_at_k,n,prompts\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.tau, r.k, r.value, self.samples_per_prompt, self.prompt_count
            ));
        }
        out
    }

    pub fn pass_at(&self, tau: f64, k: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| (r.tau - tau).abs() < 1e-12 && r.k == k)
            .map(|r| r.value)
    }
}

/// Evaluate a checkpoint's pass@k over a list of evaluation temperatures.
/// No training occurs. The task spec is read from `task_path`, or from
/// `task.json` next to the checkpoint.
pub fn temperature_sweep(
    checkpoint_path: &Path,
    task_path: Option<&Path>,
    taus: &[f64],
    n: usize,
    ks: &[usize],
    seed: u64,
) -> Result<SweepReport> {
    if taus.is_empty() || ks.is_empty() {
        return Err(Error::Input("sweep needs at least one tau and one k".into()));
    }
    if n < ks.iter().copied().max().unwrap_or(1) {
        return Err(Error::Input(format!("n = {n} must be >= max k")));
    }
    let params = checkpoint::load(checkpoint_path)?;
    let sibling = checkpoint_path
        .parent()
        .map(|d| d.join("task.json"))
        .filter(|p| p.exists());
    let task_file = match task_path {
        Some(p) => p.to_path_buf(),
        None => sibling.ok_or_else(|| {
            Error::Input("no task.json next to the checkpoint; pass a task file explicitly".into())
        })?,
    };
    let spec: TaskSpec = serde_json::from_reader(BufReader::new(File::open(&task_file)?))?;
    let task = Task::new(spec)?;
    let prompts = task.enumerate_prompts();
    let max_len = task.recommended_max_len();
    let stream = RngStream::new(seed, STREAM_SWEEP);

    let mut rows = Vec::new();
    for (ti, &tau) in taus.iter().enumerate() {
        let base = stream.substream(ti as u64);
        let rollouts = sampling::batch_rollouts(&params, &prompts, n, tau, max_len, &base)?;
        let counts: Vec<usize> = prompts
            .iter()
            .enumerate()
            .map(|(i, prompt)| {
                rollouts[i * n..(i + 1) * n]
                    .iter()
                    .filter(|r| task.verify(prompt, &r.output).reward > 0.5)
                    .count()
            })
            .collect();
        for &k in ks {
            rows.push(SweepRow { tau, k, value: metrics::pass_at_k(n, &counts, k)?.value });
        }
    }
    Ok(SweepReport { rows, samples_per_prompt: n, prompt_count: prompts.len() })
}

// ---------------------------------------------------------------------------
// export
// ---------------------------------------------------------------------------

/// Exponential moving average with the given span: alpha = 2 / (span + 1),
/// seeded at the first value.
pub fn ema(series: &[f64], span: usize) -> Vec<f64> {
    assert!(span >= 1);
    let alpha = 2.0 / (span as f64 + 1.0);
    let mut out = Vec::with_capacity(series.len());
    let mut state = f64::NAN;
    for (i, &x) in series.iter().enumerate() {
        state = if i == 0 { x } else { alpha * x + (1.0 - alpha) * state };
        out.push(state);
    }
    out
}

fn read_metric_records(run_dir: &Path) -> Result<Vec<MetricRecord>> {
    let path = run_dir.join("metrics.jsonl");
    if !path.exists() {
        return Err(Error::Input(format!("{} is not a run directory (no metrics.jsonl)", run_dir.display())));
    }
    let mut records = Vec::new();
    for line in BufReader::new(File::open(&path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

fn tags_string(tags: &BTreeMap<String, String>) -> String {
    tags.iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}

/// Export a tidy CSV of every metric series with an EMA(10) column
/// alongside the raw values. Returns the path of the written file.
pub fn export_plots(run_dir: &Path, out: Option<&Path>) -> Result<PathBuf> {
    let records = read_metric_records(run_dir)?;
    // group series by (name, tags) in first-seen order
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<(usize, f64)>> = BTreeMap::new();
    for r in &records {
        let key = (r.name.clone(), tags_string(&r.tags));
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push((r.step, r.value));
    }
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join("plots.csv"));
    let mut f = BufWriter::new(File::create(&path)?);
    writeln!(f, "step,metric,value,ema,tags")?;
    for key in order {
        let series = &groups[&key];
        let values: Vec<f64> = series.iter().map(|(_, v)| *v).collect();
        let smooth = ema(&values, 10);
        for ((step, value), s) in series.iter().zip(smooth) {
            writeln!(f, "{},{},{},{},{}", step, key.0, value, s, key.1)?;
        }
    }
    f.flush()?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct RunDigest {
    pub dir: PathBuf,
    pub final_step: usize,
    pub final_pass1_tau1: Option<f64>,
    pub final_ppl: Option<f64>,
    pub mean_wall_ms_per_step: Option<f64>,
}

fn digest_run(run_dir: &Path) -> Result<RunDigest> {
    let records = read_metric_records(run_dir)?;
    let final_step = final_eval_step(&records);
    let final_pass1_tau1 = records
        .iter()
        .filter(|r| {
            r.name == "pass_at_k"
                && r.step == final_step
                && r.tags.get("k").map(String::as_str) == Some("1")
                && r.tags.get("tau").map(String::as_str) == Some("1")
        })
        .map(|r| r.value)
        .next_back();
    let final_ppl = records
        .iter()
        .filter(|r| r.name == "ppl" && r.step == final_step)
        .map(|r| r.value)
        .next_back();

    // mean wall time per step from the timing log
    let steps_path = run_dir.join("steps.jsonl");
    let mean_wall_ms_per_step = if steps_path.exists() {
        let mut total = 0.0;
        let mut count = 0usize;
        for line in BufReader::new(File::open(&steps_path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v: serde_json::Value = serde_json::from_str(&line)?;
            if let Some(ms) = v.get("wall_ms").and_then(|x| x.as_f64()) {
                total += ms;
                count += 1;
            }
        }
        (count > 0).then(|| total / count as f64)
    } else {
        None
    };

    Ok(RunDigest { dir: run_dir.to_path_buf(), final_step, final_pass1_tau1, final_ppl, mean_wall_ms_per_step })
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub a: RunDigest,
    pub b: RunDigest,
}

impl CompareReport {
    pub fn render(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        let mut out = String::new();
        out.push_str(&format!(
            "{:<28} {:>10} {:>12} {:>10} {:>16}\n",
            "run", "steps", "pass@1(t=1)", "ppl", "wall_ms/step"
        ));
        for d in [&self.a, &self.b] {
            out.push_str(&format!(
                "{:<28} {:>10} {:>12} {:>10} {:>16}\n",
                d.dir.file_name().and_then(|s| s.to_str()).unwrap_or("?"),
                d.final_step,
                fmt_opt(d.final_pass1_tau1),
                fmt_opt(d.final_ppl),
                fmt_opt(d.mean_wall_ms_per_step),
            ));
        }
        if let (Some(wa), Some(wb)) = (self.a.mean_wall_ms_per_step, self.b.mean_wall_ms_per_step) {
            if wb > 0.0 {
                out.push_str(&format!("wall-clock ratio (a/b): {:.3}\n", wa / wb));
            }
        }
        out
    }
}

/// Side-by-side digest of two run directories, including the wall-clock
/// per-step ratio.
pub fn compare_runs(a: &Path, b: &Path) -> Result<CompareReport> {
    Ok(CompareReport { a: digest_run(a)?, b: digest_run(b)? })
}
