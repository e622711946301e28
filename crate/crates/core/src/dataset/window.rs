use ndarray::{s, Array2, ArrayView2};

use super::{DatasetError, Result, TrialRecording};
use crate::csp::CspModel;

/// One decision window: CSP features plus both envelopes.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedExample {
    /// `[n_components × L]`
    pub features: Array2<f64>,
    pub env_a: Vec<f64>,
    pub env_b: Vec<f64>,
    pub label: u8,
    pub subject_id: String,
    pub trial_id: String,
    pub window_index: usize,
}

impl WindowedExample {
    pub fn len(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.features.ncols() == 0
    }
}

pub fn window_len(seconds: f64, fs: f64) -> usize {
    (seconds * fs).round() as usize
}

pub fn hop_len(window: usize, overlap: f64) -> usize {
    ((window as f64 * (1.0 - overlap)).round() as usize).max(1)
}

/// `floor((T - L) / hop) + 1`, or zero when the window does not fit.
pub fn window_count(total: usize, window: usize, hop: usize) -> usize {
    if window == 0 || window > total {
        0
    } else {
        (total - window) / hop + 1
    }
}

fn check_overlap(overlap: f64) -> Result<()> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(DatasetError::InvalidArgument(format!("overlap {overlap} outside [0, 1)")));
    }
    Ok(())
}

/// Raw EEG slices of every window in `trial`, in window order.
pub fn raw_windows(trial: &TrialRecording, window_seconds: f64, overlap: f64) -> Result<Vec<ArrayView2<'_, f64>>> {
    check_overlap(overlap)?;
    let l = window_len(window_seconds, trial.eeg.fs);
    let hop = hop_len(l, overlap);
    let n = window_count(trial.n_samples(), l, hop);
    Ok((0..n).map(|w| trial.eeg.data.slice(s![.., w * hop..w * hop + l])).collect())
}

/// Cut `trial` into overlapping windows and project each through `csp`.
/// The trailing remainder shorter than a hop is dropped.
pub fn make_windows(
    trial: &TrialRecording,
    csp: &CspModel,
    window_seconds: f64,
    overlap: f64,
) -> Result<Vec<WindowedExample>> {
    check_overlap(overlap)?;
    let l = window_len(window_seconds, trial.eeg.fs);
    let hop = hop_len(l, overlap);
    let n = window_count(trial.n_samples(), l, hop);
    (0..n)
        .map(|w| {
            let start = w * hop;
            let raw = trial.eeg.data.slice(s![.., start..start + l]);
            Ok(WindowedExample {
                features: csp.project(raw)?,
                env_a: trial.env_a.samples[start..start + l].to_vec(),
                env_b: trial.env_b.samples[start..start + l].to_vec(),
                label: trial.attended,
                subject_id: trial.subject_id.clone(),
                trial_id: trial.trial_id.clone(),
                window_index: w,
            })
        })
        .collect()
}
