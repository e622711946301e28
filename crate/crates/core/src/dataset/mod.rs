//! Trial storage, decision windows, cross-validation splits, augmentation and
//! the synthetic cocktail-party generator.

mod augment;
mod format;
mod split;
mod synth;
mod window;

pub use augment::{add_gaussian_noise, augment_gaussian, AugmentConfig, Standardization};
pub use format::{load_dataset, load_raw_dataset, read_matrix, write_dataset, write_matrix, write_raw_dataset, MatrixFile, MANIFEST_NAME};
pub use split::{kfold_split, kfold_pooled_split, loso_split, Fold, SplitKey, SplitPlan, SplitScheme};
pub use synth::{synth_generate, SynthConfig};
pub use window::{hop_len, make_windows, raw_windows, window_count, window_len, WindowedExample};

use std::path::PathBuf;

use thiserror::Error;

use crate::sigproc::{MultiChannelRecording, Waveform};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("not found: {0}")]
    NotFound(PathBuf),
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Csp(#[from] crate::csp::CspError),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// One listening trial at the model rate: preprocessed EEG plus the two
/// presented speech envelopes, sample aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecording {
    pub trial_id: String,
    pub subject_id: String,
    pub condition: String,
    pub eeg: MultiChannelRecording,
    pub env_a: Waveform,
    pub env_b: Waveform,
    /// Index of the attended stream, 0 for `env_a`, 1 for `env_b`.
    pub attended: u8,
}

impl TrialRecording {
    pub fn n_samples(&self) -> usize {
        self.eeg.n_samples()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let n = self.eeg.n_samples();
        if self.env_a.len() != n || self.env_b.len() != n {
            return Err(format!(
                "eeg has {n} samples but envelopes have {} and {}",
                self.env_a.len(),
                self.env_b.len()
            ));
        }
        if self.env_a.fs != self.eeg.fs || self.env_b.fs != self.eeg.fs {
            return Err("eeg and envelope sample rates differ".into());
        }
        if self.attended > 1 {
            return Err(format!("attended index {} is not 0 or 1", self.attended));
        }
        Ok(())
    }
}
