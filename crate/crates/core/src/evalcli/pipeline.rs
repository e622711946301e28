//! Data flow shared by the subcommands and the acceptance tests.

use std::collections::BTreeSet;

use super::run_config::{CspScope, PrepConfig};
use super::CliError;
use crate::csp::{csp_fit, CspModel, LabeledEpoch};
use crate::dataset::{
    kfold_pooled_split, kfold_split, loso_split, make_windows, raw_windows, Fold, SplitPlan, SplitScheme,
    TrialRecording, WindowedExample,
};
use crate::par::Exec;
use crate::sigproc::{bandpass_filter, gammatone_envelope, rereference, resample, FilterSpec, Waveform};

/// Raw-rate trial to model-rate trial: re-reference, bandpass and resample
/// the EEG; gammatone envelopes for both audio streams. All three are cut to
/// the shortest result.
pub fn preprocess_trial(raw: &TrialRecording, cfg: &PrepConfig) -> Result<TrialRecording, CliError> {
    let mut eeg = match &cfg.ref_channel {
        Some(ch) => rereference(&raw.eeg, ch)?,
        None => raw.eeg.clone(),
    };
    eeg = bandpass_filter(&eeg, &FilterSpec::bandpass(cfg.eeg_band.0, cfg.eeg_band.1, cfg.filter_order))?;
    eeg = resample(&eeg, cfg.fs)?;
    let env_cfg = crate::sigproc::EnvelopeConfig { out_fs: cfg.fs, ..cfg.envelope.clone() };
    let env_a = gammatone_envelope(&raw.env_a, &env_cfg)?;
    let env_b = gammatone_envelope(&raw.env_b, &env_cfg)?;
    let n = eeg.n_samples().min(env_a.len()).min(env_b.len());
    let cut = |w: Waveform| Waveform { samples: w.samples[..n].to_vec(), fs: w.fs };
    eeg.data = eeg.data.slice(ndarray::s![.., ..n]).to_owned();
    Ok(TrialRecording { eeg, env_a: cut(env_a), env_b: cut(env_b), ..raw.clone() })
}

/// Split plan over whole trials; fold index lists refer to `trials`.
pub fn split_trials(trials: &[TrialRecording], scheme: SplitScheme, k: usize, seed: u64) -> Result<SplitPlan, CliError> {
    let keys: Vec<(&str, &str)> = trials.iter().map(|t| (t.subject_id.as_str(), t.trial_id.as_str())).collect();
    Ok(match scheme {
        SplitScheme::KFoldPerSubject => kfold_split(&keys, k, seed)?,
        SplitScheme::KFoldPooled => kfold_pooled_split(&keys, k, seed)?,
        SplitScheme::LeaveOneSubjectOut => loso_split(&keys)?,
    })
}

/// CSP settings for one fold.
#[derive(Debug, Clone, Copy)]
pub struct CspSettings {
    pub n_components: usize,
    pub shrinkage: f64,
    pub scope: CspScope,
}

/// Windowed, CSP-projected examples of one fold, plus the filters used.
#[derive(Debug, Clone)]
pub struct FoldData {
    pub train: Vec<WindowedExample>,
    pub validation: Vec<WindowedExample>,
    /// Rounded to f32, exactly as a checkpoint stores it.
    pub csp: CspModel,
}

fn windows_of(
    trials: &[TrialRecording],
    idx: &[usize],
    csp: &CspModel,
    seconds: f64,
    overlap: f64,
    exec: Exec,
) -> Result<Vec<WindowedExample>, CliError> {
    let per_trial = exec.map(idx, |&i| make_windows(&trials[i], csp, seconds, overlap));
    let mut out = Vec::new();
    for w in per_trial {
        out.extend(w?);
    }
    Ok(out)
}

pub fn fold_data(
    trials: &[TrialRecording],
    fold: &Fold,
    seconds: f64,
    overlap: f64,
    csp: CspSettings,
    exec: Exec,
) -> Result<FoldData, CliError> {
    let held: BTreeSet<usize> = fold.validation.iter().copied().collect();
    let fit_on: Vec<usize> = match csp.scope {
        CspScope::Split => fold.train.clone(),
        CspScope::AllSubjects => (0..trials.len()).filter(|i| !held.contains(i)).collect(),
    };
    let mut epochs = Vec::new();
    for &i in &fit_on {
        for w in raw_windows(&trials[i], seconds, overlap)? {
            epochs.push(LabeledEpoch { eeg: w, label: trials[i].attended });
        }
    }
    let model = csp_fit(&epochs, csp.n_components, csp.shrinkage)?.rounded_to_f32();
    Ok(FoldData {
        train: windows_of(trials, &fold.train, &model, seconds, overlap, exec)?,
        validation: windows_of(trials, &fold.validation, &model, seconds, overlap, exec)?,
        csp: model,
    })
}
