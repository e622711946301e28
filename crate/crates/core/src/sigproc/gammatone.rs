//! Gammatone filterbank and power-law compressed speech envelope.
//!
//! Each band is a 4th-order all-pole gammatone: four cascaded complex
//! one-pole resonators at the band center. The real part of the cascade
//! output is the subband signal; its impulse response is
//! `C(n+3, 3) r^n cos(w n)`, the sampled `t^3 e^{-2 pi b t} cos(2 pi f t)`.

use std::f64::consts::PI;

use super::filter::{FilterSpec, SosFilter};
use super::resample::{rational_ratio, resample_slice};
use super::{Result, SigprocError, Waveform};

/// Glasberg & Moore equivalent rectangular bandwidth in Hz.
pub fn erb_bandwidth(hz: f64) -> f64 {
    24.7 * (4.37 * hz / 1000.0 + 1.0)
}

fn erb_rate(hz: f64) -> f64 {
    21.4 * (1.0 + 0.00437 * hz).log10()
}

fn erb_rate_inv(e: f64) -> f64 {
    (10f64.powf(e / 21.4) - 1.0) / 0.00437
}

const ORDER: usize = 4;
// bandwidth scaling for a 4th-order gammatone
const ERB_SCALE: f64 = 1.019;

#[derive(Debug, Clone)]
struct Band {
    center_hz: f64,
    radius: f64,
    cos_w: f64,
    sin_w: f64,
    gain: f64,
}

/// ERB-spaced bank of gammatone filters.
#[derive(Debug, Clone)]
pub struct GammatoneBank {
    bands: Vec<Band>,
    fs: f64,
}

impl GammatoneBank {
    pub fn new(f_lo: f64, f_hi: f64, n_bands: usize, fs: f64) -> Result<Self> {
        if n_bands == 0 {
            return Err(SigprocError::InvalidArgument("need at least one gammatone band".into()));
        }
        if !(f_lo > 0.0 && f_lo < f_hi) {
            return Err(SigprocError::InvalidArgument(format!("bad gammatone range {f_lo}-{f_hi} Hz")));
        }
        if fs < 2.0 * f_hi {
            return Err(SigprocError::InvalidArgument(format!(
                "audio rate {fs} Hz below twice the top band edge {f_hi} Hz"
            )));
        }
        let (e_lo, e_hi) = (erb_rate(f_lo), erb_rate(f_hi));
        let bands = (0..n_bands)
            .map(|i| {
                let e = if n_bands == 1 {
                    (e_lo + e_hi) / 2.0
                } else {
                    e_lo + (e_hi - e_lo) * i as f64 / (n_bands - 1) as f64
                };
                let center_hz = erb_rate_inv(e);
                let radius = (-2.0 * PI * ERB_SCALE * erb_bandwidth(center_hz) / fs).exp();
                let w = 2.0 * PI * center_hz / fs;
                Band {
                    center_hz,
                    radius,
                    cos_w: w.cos(),
                    sin_w: w.sin(),
                    // unit real-part gain at the center frequency
                    gain: 2.0 * (1.0 - radius).powi(ORDER as i32),
                }
            })
            .collect();
        Ok(Self { bands, fs })
    }

    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }

    pub fn sample_rate(&self) -> f64 {
        self.fs
    }

    pub fn center_frequencies(&self) -> Vec<f64> {
        self.bands.iter().map(|b| b.center_hz).collect()
    }

    /// Real subband signal of one band.
    pub fn filter_band(&self, band: usize, x: &[f64]) -> Vec<f64> {
        let b = &self.bands[band];
        let mut re = [0.0f64; ORDER];
        let mut im = [0.0f64; ORDER];
        x.iter()
            .map(|&v| {
                let mut xr = v * b.gain;
                let mut xi = 0.0;
                for k in 0..ORDER {
                    let nr = xr + b.radius * (b.cos_w * re[k] - b.sin_w * im[k]);
                    let ni = xi + b.radius * (b.sin_w * re[k] + b.cos_w * im[k]);
                    re[k] = nr;
                    im[k] = ni;
                    xr = nr;
                    xi = ni;
                }
                xr
            })
            .collect()
    }

    /// Subband signals for every band, in ascending center frequency.
    pub fn filter(&self, x: &[f64]) -> Vec<Vec<f64>> {
        crate::par::Exec::default().map_range(self.bands.len(), |k| self.filter_band(k, x))
    }

    pub fn impulse_response(&self, band: usize, n: usize) -> Vec<f64> {
        let mut x = vec![0.0; n];
        if n > 0 {
            x[0] = 1.0;
        }
        self.filter_band(band, &x)
    }
}

/// Parameters of the speech envelope extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeConfig {
    pub f_lo: f64,
    pub f_hi: f64,
    pub n_bands: usize,
    pub exponent: f64,
    pub out_fs: f64,
    /// Zero-phase bandpass applied to the summed envelope before resampling.
    pub post_band: Option<(f64, f64)>,
    pub filter_order: usize,
}

impl Default for EnvelopeConfig {
    fn default() -> Self {
        Self {
            f_lo: 150.0,
            f_hi: 4000.0,
            n_bands: 28,
            exponent: 0.6,
            out_fs: 64.0,
            post_band: Some((1.0, 9.0)),
            filter_order: 4,
        }
    }
}

impl EnvelopeConfig {
    pub fn bank(&self, fs: f64) -> Result<GammatoneBank> {
        GammatoneBank::new(self.f_lo, self.f_hi, self.n_bands, fs)
    }

    /// Sum over bands of `|subband|^exponent`, at the audio rate.
    pub fn compressed_sum(&self, audio: &Waveform) -> Result<Vec<f64>> {
        let bank = self.bank(audio.fs)?;
        let subbands = bank.filter(&audio.samples);
        let mut sum = vec![0.0; audio.samples.len()];
        for band in &subbands {
            for (s, v) in sum.iter_mut().zip(band) {
                *s += v.abs().powf(self.exponent);
            }
        }
        Ok(sum)
    }

    /// Compressed sum after the optional post filter, still at the audio rate.
    pub fn envelope_pre_resample(&self, audio: &Waveform) -> Result<Vec<f64>> {
        let sum = self.compressed_sum(audio)?;
        match self.post_band {
            Some((lo, hi)) => {
                let filt = SosFilter::butterworth(&FilterSpec::bandpass(lo, hi, self.filter_order), audio.fs)?;
                Ok(filt.filtfilt(&sum))
            }
            None => Ok(sum),
        }
    }
}

/// Gammatone filterbank, power-law compression, band summation, post filter
/// and resampling to `cfg.out_fs`.
pub fn gammatone_envelope(audio: &Waveform, cfg: &EnvelopeConfig) -> Result<Waveform> {
    let (up, down) = rational_ratio(audio.fs, cfg.out_fs)?;
    let env = cfg.envelope_pre_resample(audio)?;
    Ok(Waveform { samples: resample_slice(&env, up, down), fs: cfg.out_fs })
}
