//! The `claad` command line.
//!
//! ```text
//! claad <prep|synth|train|eval|report> --config <path> [--out <dir>] [--seed <u64>]
//! ```
//!
//! Every invocation writes into `<out>/<command>-<config hash>-seed<seed>/`,
//! starting with `config.txt`, the effective configuration. Later stages find
//! the outputs of earlier ones through the same naming rule, so one config
//! file drives `synth`, `train`, `eval` and `report` in sequence.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
//! failure.

mod pipeline;
mod report;
mod run_config;

pub use pipeline::{fold_data, preprocess_trial, split_trials, CspSettings, FoldData};
pub use report::{
    emit_report, format_metrics, parse_metrics, read_metrics, summarize, MetricsRow, Report, SubjectSummary,
    WindowSummary, METRICS_HEADER, PER_SUBJECT_HEADER, SUMMARY_HEADER,
};
pub use run_config::{CspScope, DataRoot, PrepConfig, RunConfig};

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use thiserror::Error;

use crate::csp::CspError;
use crate::dataset::{
    load_dataset, load_raw_dataset, make_windows, synth_generate, window_len, DatasetError, TrialRecording,
};
use crate::model::ModelError;
use crate::par::Exec;
use crate::sigproc::SigprocError;
use crate::trainer::{evaluate_accuracy, fit, Checkpoint, TrainError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Config(_) | DatasetError::InvalidArgument(_) => CliError::Config(e.to_string()),
            DatasetError::Csp(c) => c.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CspError> for CliError {
    fn from(e: CspError) -> Self {
        match e {
            CspError::IllConditioned(_) => CliError::Numerical(e.to_string()),
            CspError::InvalidArgument(_) => CliError::Config(e.to_string()),
            CspError::InsufficientClasses | CspError::Shape(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<SigprocError> for CliError {
    fn from(e: SigprocError) -> Self {
        match e {
            SigprocError::InvalidSpec(_) | SigprocError::InvalidArgument(_) => CliError::Config(e.to_string()),
            SigprocError::MissingChannel(_) | SigprocError::Shape(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(ModelError::NumericalFailure { .. }) => CliError::Numerical(e.to_string()),
            TrainError::Data(d) => d.into(),
            TrainError::Checkpoint { .. } => CliError::Data(e.to_string()),
            TrainError::Config(_) | TrainError::Model(_) => CliError::Config(e.to_string()),
        }
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Prep,
    Synth,
    Train,
    Eval,
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Prep => "prep",
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Report => "report",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "claad", version, about = "Auditory attention detection from EEG with a cross-modal attention encoder")]
struct Args {
    command: Command,
    /// `key = value` run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Root under which run directories are created.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
}

/// Names and owns the output directory of one invocation.
pub struct RunContext {
    pub cfg: RunConfig,
    pub out_root: PathBuf,
}

impl RunContext {
    pub fn run_dir(&self, cmd: Command) -> PathBuf {
        self.out_root.join(format!("{}-{}-seed{}", cmd.name(), self.cfg.hash(), self.cfg.seed))
    }

    fn data_root(&self) -> PathBuf {
        match &self.cfg.data_root {
            DataRoot::Synth => self.run_dir(Command::Synth).join("dataset"),
            DataRoot::Prep => self.run_dir(Command::Prep).join("dataset"),
            DataRoot::Path(p) => self.cfg.resolve(p),
        }
    }
}

/// Exclusive ownership of a run directory for the life of the value.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        create_dir(dir)?;
        let path = dir.join(".lock");
        fs::OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                CliError::Config(format!("{} is in use by another invocation (remove {} if stale)", dir.display(), path.display()))
            } else {
                CliError::Data(format!("cannot lock {}: {e}", dir.display()))
            }
        })?;
        Ok(RunLock(path))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub fn main_from_env() -> i32 {
    cli_run(std::env::args_os())
}

/// Parse `argv` (program name first), run the command, return the exit code.
pub fn cli_run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&args) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("claad {}: {e}", args.command.name());
            e.exit_code()
        }
    }
}

fn run(args: &Args) -> Result<PathBuf, CliError> {
    let mut cfg = RunConfig::load(&args.config).map_err(CliError::Config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.sync();
    }
    let ctx = RunContext { cfg, out_root: args.out.clone() };
    let dir = ctx.run_dir(args.command);
    let _lock = RunLock::acquire(&dir)?;
    write_file(&dir.join("config.txt"), &ctx.cfg.echo())?;
    match args.command {
        Command::Prep => prep(&ctx, &dir),
        Command::Synth => synth(&ctx, &dir),
        Command::Train => train(&ctx, &dir, Exec::default()).map(|_| ()),
        Command::Eval => eval(&ctx, &dir, Exec::default()).map(|_| ()),
        Command::Report => report(&ctx, &dir).map(|_| ()),
    }?;
    Ok(dir)
}

fn prep(ctx: &RunContext, dir: &Path) -> Result<(), CliError> {
    let raw = load_raw_dataset(&ctx.cfg.resolve(&ctx.cfg.prep.raw_root))?;
    let out = Exec::default().map(&raw, |t| preprocess_trial(t, &ctx.cfg.prep));
    let trials = out.into_iter().collect::<Result<Vec<_>, _>>()?;
    crate::dataset::write_dataset(&dir.join("dataset"), &trials)?;
    Ok(())
}

fn synth(ctx: &RunContext, dir: &Path) -> Result<(), CliError> {
    let s = &ctx.cfg.synth;
    if s.n_subjects == 0 || s.trials_per_subject == 0 || !(s.trial_seconds > 0.0) {
        return Err(CliError::Config("synth counts and trial_seconds must be positive".into()));
    }
    crate::dataset::write_dataset(&dir.join("dataset"), &synth_generate(s))?;
    Ok(())
}

fn load_trials(ctx: &RunContext) -> Result<Vec<TrialRecording>, CliError> {
    let trials = load_dataset(&ctx.data_root())?;
    if trials.is_empty() {
        return Err(CliError::Data(format!("no trials under {}", ctx.data_root().display())));
    }
    Ok(trials)
}

fn checkpoint_name(window_s: f64, fold: usize, subject: Option<&str>) -> String {
    match subject {
        Some(s) => format!("w{window_s}_f{fold}_{s}.ckpt"),
        None => format!("w{window_s}_f{fold}.ckpt"),
    }
}

fn metric_rows(
    examples: &[crate::dataset::WindowedExample],
    ckpt: &Checkpoint,
    window_s: f64,
    fold: usize,
    exec: Exec,
) -> Result<Vec<MetricsRow>, CliError> {
    Ok(evaluate_accuracy(examples, ckpt, exec)?
        .into_iter()
        .map(|r| MetricsRow {
            accuracy: r.accuracy(),
            subject: r.subject_id,
            window_s,
            fold,
            n_examples: r.n_examples,
        })
        .collect())
}

/// Fit one model per (window length, fold); write checkpoints, per-epoch
/// history and validation metrics.
pub fn train(ctx: &RunContext, dir: &Path, exec: Exec) -> Result<Vec<MetricsRow>, CliError> {
    let cfg = &ctx.cfg;
    let trials = load_trials(ctx)?;
    let plan = split_trials(&trials, cfg.scheme, cfg.folds, cfg.seed)?;
    let ckpt_dir = dir.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let csp = CspSettings { n_components: cfg.csp_components, shrinkage: cfg.csp_shrinkage, scope: cfg.csp_scope };
    let mut rows = Vec::new();
    let mut history = String::from("window_s,fold,subject,epoch,claad_loss,classification_loss,train_accuracy,val_accuracy\n");
    for &w in &cfg.window_seconds {
        for fold in &plan.folds {
            let data = fold_data(&trials, fold, w, cfg.overlap, csp, exec)?;
            if data.train.len() < 2 || data.validation.is_empty() {
                return Err(CliError::Data(format!("fold {} at {w} s has too few windows", fold.id)));
            }
            let mut fit_cfg = cfg.fit.clone();
            fit_cfg.model.window_len = data.train[0].len();
            let subject = fold.subject.as_deref();
            let mut ckpt = fit(&data.train, &data.validation, &data.csp, &fit_cfg, exec, &mut |m| {
                eprintln!(
                    "w={w}s fold={}{} epoch {}: claad {:.4} cls {:.4} train {:.3} val {:.3}",
                    fold.id,
                    subject.map(|s| format!(" {s}")).unwrap_or_default(),
                    m.epoch,
                    m.claad_loss,
                    m.classification_loss,
                    m.train_accuracy,
                    m.val_accuracy.unwrap_or(f64::NAN)
                )
            })?;
            for h in &ckpt.history {
                history.push_str(&format!(
                    "{w},{},{},{},{},{},{},{}\n",
                    fold.id,
                    subject.unwrap_or(""),
                    h.epoch,
                    h.claad_loss,
                    h.classification_loss,
                    h.train_accuracy,
                    h.val_accuracy.map_or("".into(), |v| v.to_string())
                ));
            }
            let val_ids: Vec<&str> = fold.validation.iter().map(|&i| trials[i].trial_id.as_str()).collect();
            ckpt.meta = BTreeMap::from([
                ("window_s".to_string(), w.to_string()),
                ("overlap".to_string(), cfg.overlap.to_string()),
                ("fold".to_string(), fold.id.to_string()),
                ("scheme".to_string(), plan.scheme.to_string()),
                ("subject".to_string(), subject.unwrap_or("").to_string()),
                ("validation_trials".to_string(), val_ids.join(",")),
            ]);
            ckpt.write(&ckpt_dir.join(checkpoint_name(w, fold.id, subject)))?;
            rows.extend(metric_rows(&data.validation, &ckpt, w, fold.id, exec)?);
        }
    }
    write_file(&dir.join("history.csv"), &history)?;
    write_file(&dir.join("metrics.csv"), &format_metrics(&rows))?;
    Ok(rows)
}

fn checkpoint_files(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = fs::read_dir(path).map_err(|e| CliError::Data(format!("cannot list {}: {e}", path.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Data(format!("no checkpoints in {}", path.display())));
    }
    Ok(files)
}

fn meta<'a>(ckpt: &'a Checkpoint, key: &str, path: &Path) -> Result<&'a str, CliError> {
    ckpt.meta
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| CliError::Data(format!("{}: checkpoint metadata lacks `{key}`", path.display())))
}

/// Re-evaluate checkpoints on the validation trials recorded in them.
pub fn eval(ctx: &RunContext, dir: &Path, exec: Exec) -> Result<Vec<MetricsRow>, CliError> {
    let source = match &ctx.cfg.eval_checkpoints {
        Some(p) => ctx.cfg.resolve(p),
        None => ctx.run_dir(Command::Train).join("checkpoints"),
    };
    let trials = load_trials(ctx)?;
    let by_id: BTreeMap<&str, &TrialRecording> = trials.iter().map(|t| (t.trial_id.as_str(), t)).collect();
    let mut rows = Vec::new();
    for path in checkpoint_files(&source)? {
        let ckpt = Checkpoint::read(&path)?;
        let parse_f = |k: &str| -> Result<f64, CliError> {
            meta(&ckpt, k, &path)?.parse().map_err(|_| CliError::Data(format!("{}: bad `{k}`", path.display())))
        };
        let (w, overlap) = (parse_f("window_s")?, parse_f("overlap")?);
        let fold: usize = meta(&ckpt, "fold", &path)?
            .parse()
            .map_err(|_| CliError::Data(format!("{}: bad `fold`", path.display())))?;
        let mut examples = Vec::new();
        for id in meta(&ckpt, "validation_trials", &path)?.split(',').filter(|s| !s.is_empty()) {
            let t = by_id.get(id).ok_or_else(|| CliError::Data(format!("trial `{id}` not in the dataset")))?;
            if window_len(w, t.eeg.fs) != ckpt.config.model.window_len {
                return Err(CliError::Data(format!("{}: window length does not match the data rate", path.display())));
            }
            examples.extend(make_windows(t, &ckpt.csp, w, overlap)?);
        }
        rows.extend(metric_rows(&examples, &ckpt, w, fold, exec)?);
    }
    write_file(&dir.join("metrics.csv"), &format_metrics(&rows))?;
    Ok(rows)
}

pub fn report(ctx: &RunContext, dir: &Path) -> Result<Report, CliError> {
    let inputs: Vec<PathBuf> = if ctx.cfg.report_inputs.is_empty() {
        vec![ctx.run_dir(Command::Eval).join("metrics.csv")]
    } else {
        ctx.cfg.report_inputs.iter().map(|p| ctx.cfg.resolve(p)).collect()
    };
    let mut rows = Vec::new();
    for p in &inputs {
        rows.extend(read_metrics(p)?);
    }
    emit_report(&rows, dir)
}
