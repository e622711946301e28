use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::{join, parse, parse_list, split_line, KeyValues};
use crate::dataset::{SplitScheme, SynthConfig};
use crate::sigproc::EnvelopeConfig;
use crate::trainer::FitConfig;

/// Keys that exist on the library structs but are fixed by other settings.
const DERIVED: [(&str, &str); 3] = [
    ("model.window_len", "derived from windows.seconds"),
    ("model.in_channels", "derived from csp.n_components"),
    ("train.seed", "set by the run seed"),
];

/// Where `train` and `eval` read trials from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataRoot {
    /// Output of `synth` run with the same config and seed.
    Synth,
    /// Output of `prep` run with the same config and seed.
    Prep,
    Path(PathBuf),
}

/// Which trials the CSP filters are fit on for one fold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CspScope {
    /// The fold's own training trials.
    Split,
    /// Every trial outside the fold's validation set, from all subjects.
    AllSubjects,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepConfig {
    pub raw_root: PathBuf,
    /// Re-reference channel; `None` keeps the recorded reference.
    pub ref_channel: Option<String>,
    pub eeg_band: (f64, f64),
    pub filter_order: usize,
    pub fs: f64,
    pub envelope: EnvelopeConfig,
}

/// Everything one `claad` invocation needs, read from `key = value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_root: DataRoot,
    pub prep: PrepConfig,
    pub synth: SynthConfig,
    pub csp_components: usize,
    pub csp_shrinkage: f64,
    pub csp_scope: CspScope,
    pub window_seconds: Vec<f64>,
    pub overlap: f64,
    pub scheme: SplitScheme,
    pub folds: usize,
    pub fit: FitConfig,
    /// Checkpoint file or directory for `eval`; `None` means the sibling
    /// `train` run.
    pub eval_checkpoints: Option<PathBuf>,
    /// Metrics files for `report`; empty means the sibling `eval` run.
    pub report_inputs: Vec<PathBuf>,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut fit = FitConfig::default();
        fit.model.in_channels = 64;
        Self {
            seed: 0,
            data_root: DataRoot::Synth,
            prep: PrepConfig {
                raw_root: PathBuf::from("raw"),
                ref_channel: Some("Cz".into()),
                eeg_band: (1.0, 9.0),
                filter_order: 4,
                fs: 64.0,
                envelope: EnvelopeConfig::default(),
            },
            synth: SynthConfig::default(),
            csp_components: 64,
            csp_shrinkage: 0.05,
            csp_scope: CspScope::Split,
            window_seconds: vec![0.5, 2.0, 5.0],
            overlap: 0.5,
            scheme: SplitScheme::KFoldPerSubject,
            folds: 5,
            fit,
            eval_checkpoints: None,
            report_inputs: Vec::new(),
            base_dir: PathBuf::from("."),
        }
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn band(key: &str, value: &str) -> Result<(f64, f64), String> {
    match parse_list::<f64>(key, value)?.as_slice() {
        &[lo, hi] => Ok((lo, hi)),
        _ => Err(format!("{key}: expected `low,high`, got `{value}`")),
    }
}

impl KeyValues for RunConfig {
    fn entries(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (k.to_string(), v);
        let p = &self.prep;
        let e = &p.envelope;
        let s = &self.synth;
        let mut out = vec![
            kv("seed", self.seed.to_string()),
            kv(
                "data.root",
                match &self.data_root {
                    DataRoot::Synth => "synth".into(),
                    DataRoot::Prep => "prep".into(),
                    DataRoot::Path(p) => path_str(p),
                },
            ),
            kv("prep.raw_root", path_str(&p.raw_root)),
            kv("prep.ref_channel", p.ref_channel.clone().unwrap_or_else(|| "none".into())),
            kv("prep.eeg_band", format!("{},{}", p.eeg_band.0, p.eeg_band.1)),
            kv("prep.filter_order", p.filter_order.to_string()),
            kv("prep.fs", p.fs.to_string()),
            kv("envelope.f_lo", e.f_lo.to_string()),
            kv("envelope.f_hi", e.f_hi.to_string()),
            kv("envelope.n_bands", e.n_bands.to_string()),
            kv("envelope.exponent", e.exponent.to_string()),
            kv("envelope.post_band", e.post_band.map_or("none".into(), |(lo, hi)| format!("{lo},{hi}"))),
            kv("envelope.filter_order", e.filter_order.to_string()),
            kv("synth.subjects", s.n_subjects.to_string()),
            kv("synth.trials_per_subject", s.trials_per_subject.to_string()),
            kv("synth.trial_seconds", s.trial_seconds.to_string()),
            kv("synth.snr_db", s.snr_db.to_string()),
            kv("synth.channels", s.n_channels.to_string()),
            kv("synth.fs", s.fs.to_string()),
            kv("csp.n_components", self.csp_components.to_string()),
            kv("csp.shrinkage", self.csp_shrinkage.to_string()),
            kv(
                "csp.scope",
                match self.csp_scope {
                    CspScope::Split => "split",
                    CspScope::AllSubjects => "all_subjects",
                }
                .into(),
            ),
            kv("windows.seconds", join(&self.window_seconds)),
            kv("windows.overlap", self.overlap.to_string()),
            kv("split.scheme", self.scheme.to_string()),
            kv("split.k", self.folds.to_string()),
        ];
        let derived = |k: &str| DERIVED.iter().any(|(d, _)| *d == k);
        let f = &self.fit;
        for (k, v) in f.model.entries().into_iter().chain(f.train.entries()).chain(f.loss.entries()).chain(f.augment.entries()) {
            if !derived(&k) {
                out.push((k, v));
            }
        }
        out.push(kv("eval.checkpoints", self.eval_checkpoints.as_deref().map_or("train".into(), path_str)));
        out.push(kv(
            "report.inputs",
            if self.report_inputs.is_empty() {
                "eval".into()
            } else {
                self.report_inputs.iter().map(|p| path_str(p)).collect::<Vec<_>>().join(",")
            },
        ));
        out
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool, String> {
        if let Some((_, why)) = DERIVED.iter().find(|(d, _)| *d == key) {
            return Err(format!("{key} cannot be set: {why}"));
        }
        let p = &mut self.prep;
        let s = &mut self.synth;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "data.root" => {
                self.data_root = match value {
                    "synth" => DataRoot::Synth,
                    "prep" => DataRoot::Prep,
                    path => DataRoot::Path(PathBuf::from(path)),
                }
            }
            "prep.raw_root" => p.raw_root = PathBuf::from(value),
            "prep.ref_channel" => p.ref_channel = (value != "none" && !value.is_empty()).then(|| value.to_string()),
            "prep.eeg_band" => p.eeg_band = band(key, value)?,
            "prep.filter_order" => p.filter_order = parse(key, value)?,
            "prep.fs" => p.fs = parse(key, value)?,
            "envelope.f_lo" => p.envelope.f_lo = parse(key, value)?,
            "envelope.f_hi" => p.envelope.f_hi = parse(key, value)?,
            "envelope.n_bands" => p.envelope.n_bands = parse(key, value)?,
            "envelope.exponent" => p.envelope.exponent = parse(key, value)?,
            "envelope.post_band" => p.envelope.post_band = if value == "none" { None } else { Some(band(key, value)?) },
            "envelope.filter_order" => p.envelope.filter_order = parse(key, value)?,
            "synth.subjects" => s.n_subjects = parse(key, value)?,
            "synth.trials_per_subject" => s.trials_per_subject = parse(key, value)?,
            "synth.trial_seconds" => s.trial_seconds = parse(key, value)?,
            "synth.snr_db" => s.snr_db = parse(key, value)?,
            "synth.channels" => s.n_channels = parse(key, value)?,
            "synth.fs" => s.fs = parse(key, value)?,
            "csp.n_components" => self.csp_components = parse(key, value)?,
            "csp.shrinkage" => self.csp_shrinkage = parse(key, value)?,
            "csp.scope" => {
                self.csp_scope = match value {
                    "split" => CspScope::Split,
                    "all_subjects" => CspScope::AllSubjects,
                    other => return Err(format!("{key}: expected `split` or `all_subjects`, got `{other}`")),
                }
            }
            "windows.seconds" => self.window_seconds = parse_list(key, value)?,
            "windows.overlap" => self.overlap = parse(key, value)?,
            "split.scheme" => self.scheme = value.parse().map_err(|e| format!("{key}: {e}"))?,
            "split.k" => self.folds = parse(key, value)?,
            "eval.checkpoints" => self.eval_checkpoints = (value != "train").then(|| PathBuf::from(value)),
            "report.inputs" => {
                self.report_inputs = if value == "eval" {
                    Vec::new()
                } else {
                    value.split(',').map(str::trim).filter(|v| !v.is_empty()).map(PathBuf::from).collect()
                }
            }
            _ => {
                let f = &mut self.fit;
                return Ok(f.model.set(key, value)? || f.train.set(key, value)? || f.loss.set(key, value)? || f.augment.set(key, value)?);
            }
        }
        Ok(true)
    }
}

impl RunConfig {
    /// Parse config text; every key is optional, unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let Some(kv) = split_line(line) else { continue };
            let (k, v) = kv.map_err(|e| format!("line {}: {e}", n + 1))?;
            if !cfg.set(k, v).map_err(|e| format!("line {}: {e}", n + 1))? {
                return Err(format!("line {}: unknown key `{k}`", n + 1));
            }
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        Ok(cfg)
    }

    /// Copy shared settings into the library configs they also live in.
    pub fn sync(&mut self) {
        self.fit.model.in_channels = self.csp_components;
        self.fit.train.seed = self.seed;
        self.synth.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.window_seconds.is_empty() || self.window_seconds.iter().any(|&w| !(w > 0.0)) {
            return Err("windows.seconds must list positive durations".into());
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err("windows.overlap must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.csp_shrinkage) {
            return Err("csp.shrinkage must lie in [0, 1]".into());
        }
        if self.csp_components == 0 {
            return Err("csp.n_components must be at least 1".into());
        }
        let mut model = self.fit.model.clone();
        model.window_len = 1;
        model.validate().map_err(|e| e.to_string())?;
        self.fit.train.validate().map_err(|e| e.to_string())?;
        self.fit.loss.validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    /// The effective config as `key = value` lines.
    pub fn echo(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hex digest of every setting except the seed, which names the run
    /// directory separately.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries().into_iter().filter(|(k, _)| k != "seed") {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}
