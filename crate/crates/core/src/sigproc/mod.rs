//! Deterministic EEG and audio preprocessing.
//!
//! Everything here is a pure function of its inputs: zero-phase Butterworth
//! filtering, polyphase rational resampling, re-referencing and the gammatone
//! power-law envelope used for speech streams.

mod filter;
mod gammatone;
mod resample;

pub use filter::{bandpass_filter, Biquad, FilterKind, FilterSpec, SosFilter};
pub use gammatone::{erb_bandwidth, gammatone_envelope, EnvelopeConfig, GammatoneBank};
pub use resample::{rational_ratio, resample, resample_slice};

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SigprocError {
    #[error("invalid filter spec: {0}")]
    InvalidSpec(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("missing channel `{0}`")]
    MissingChannel(String),
    #[error("shape error: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, SigprocError>;

/// Single-channel signal with its sample rate in Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub fs: f64,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, fs: f64) -> Result<Self> {
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(SigprocError::InvalidArgument(format!("sample rate {fs} must be positive")));
        }
        if samples.is_empty() {
            return Err(SigprocError::InvalidArgument("waveform must hold at least one sample".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(SigprocError::InvalidArgument("waveform contains non-finite samples".into()));
        }
        Ok(Self { samples, fs })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Channels × samples matrix with per-row channel names.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelRecording {
    pub data: Array2<f64>,
    pub fs: f64,
    pub channel_names: Vec<String>,
}

impl MultiChannelRecording {
    pub fn new(data: Array2<f64>, fs: f64, channel_names: Vec<String>) -> Result<Self> {
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(SigprocError::InvalidArgument(format!("sample rate {fs} must be positive")));
        }
        if data.nrows() == 0 {
            return Err(SigprocError::Shape("recording needs at least one channel".into()));
        }
        if channel_names.len() != data.nrows() {
            return Err(SigprocError::Shape(format!(
                "{} channel names for {} rows",
                channel_names.len(),
                data.nrows()
            )));
        }
        let mut sorted = channel_names.clone();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(SigprocError::Shape("channel names must be unique".into()));
        }
        Ok(Self { data, fs, channel_names })
    }

    /// Recording with generated names `ch0..chN`.
    pub fn unnamed(data: Array2<f64>, fs: f64) -> Result<Self> {
        let names = (0..data.nrows()).map(|i| format!("ch{i}")).collect();
        Self::new(data, fs, names)
    }

    pub fn n_channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names.iter().position(|c| c == name)
    }
}

/// Anything that is a set of equally sampled channels. Lets the filters and
/// the resampler accept both single waveforms and multichannel recordings.
pub trait Signal: Sized {
    fn sample_rate(&self) -> f64;
    fn n_samples(&self) -> usize;
    /// Apply `f` to every channel; all outputs must share one length.
    fn map_channels<F>(&self, fs_out: f64, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Vec<f64> + Sync + Send;
}

impl Signal for Waveform {
    fn sample_rate(&self) -> f64 {
        self.fs
    }

    fn n_samples(&self) -> usize {
        self.samples.len()
    }

    fn map_channels<F>(&self, fs_out: f64, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Vec<f64> + Sync + Send,
    {
        Ok(Waveform { samples: f(&self.samples), fs: fs_out })
    }
}

impl Signal for MultiChannelRecording {
    fn sample_rate(&self) -> f64 {
        self.fs
    }

    fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    fn map_channels<F>(&self, fs_out: f64, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Vec<f64> + Sync + Send,
    {
        let rows: Vec<Vec<f64>> = self.data.rows().into_iter().map(|r| r.to_vec()).collect();
        let out = crate::par::Exec::default().map(&rows, |r| f(r));
        let n = out.first().map_or(0, Vec::len);
        if out.iter().any(|r| r.len() != n) {
            return Err(SigprocError::Shape("channel outputs differ in length".into()));
        }
        let flat: Vec<f64> = out.into_iter().flatten().collect();
        let data = Array2::from_shape_vec((self.n_channels(), n), flat)
            .map_err(|e| SigprocError::Shape(e.to_string()))?;
        Ok(MultiChannelRecording { data, fs: fs_out, channel_names: self.channel_names.clone() })
    }
}

/// Subtract the named reference channel from every channel.
pub fn rereference(rec: &MultiChannelRecording, ref_channel: &str) -> Result<MultiChannelRecording> {
    let idx = rec
        .channel_index(ref_channel)
        .ok_or_else(|| SigprocError::MissingChannel(ref_channel.to_string()))?;
    let reference = rec.data.row(idx).to_owned();
    let mut data = rec.data.clone();
    for mut row in data.rows_mut() {
        row -= &reference;
    }
    // x - x is exactly zero in IEEE arithmetic, but keep the contract explicit
    data.row_mut(idx).fill(0.0);
    Ok(MultiChannelRecording { data, fs: rec.fs, channel_names: rec.channel_names.clone() })
}
