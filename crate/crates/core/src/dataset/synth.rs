//! Synthetic two-talker listening experiment.
//!
//! Each trial draws two independent band-limited positive envelopes. The EEG
//! is a per-subject spatial pattern times the attended envelope, delayed by a
//! per-subject neural lag, plus channel-independent pink noise scaled to the
//! requested SNR. Subject patterns share a common topography plus an
//! individual deviation so cross-subject transfer is possible.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::TrialRecording;
use crate::par::Exec;
use crate::sigproc::{FilterSpec, MultiChannelRecording, SosFilter, Waveform};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub trials_per_subject: usize,
    pub trial_seconds: f64,
    pub snr_db: f64,
    pub seed: u64,
    pub n_channels: usize,
    pub fs: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 6,
            trials_per_subject: 10,
            trial_seconds: 20.0,
            snr_db: 5.0,
            seed: 0,
            n_channels: 64,
            fs: 64.0,
        }
    }
}

const MIN_LAG: usize = 3;
const MAX_LAG: usize = 8;
// weight of the individual deviation relative to the shared topography
const DEVIATION: f64 = 0.7;
const PINK_BURN_IN: usize = 4096;
const ENVELOPE_MARGIN: usize = 128;

fn unit_gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Paul Kellet's refined pink-noise filter over white Gaussian input.
fn pink_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut b = [0.0f64; 7];
    let mut out = Vec::with_capacity(n);
    for i in 0..n + PINK_BURN_IN {
        let w: f64 = rng.sample(StandardNormal);
        b[0] = 0.99886 * b[0] + w * 0.0555179;
        b[1] = 0.99332 * b[1] + w * 0.0750759;
        b[2] = 0.96900 * b[2] + w * 0.1538520;
        b[3] = 0.86650 * b[3] + w * 0.3104856;
        b[4] = 0.55000 * b[4] + w * 0.5329522;
        b[5] = -0.7616 * b[5] - w * 0.0168980;
        let p = b[..6].iter().sum::<f64>() + b[6] + w * 0.5362;
        b[6] = w * 0.115926;
        if i >= PINK_BURN_IN {
            out.push(p);
        }
    }
    let mean = out.iter().sum::<f64>() / n.max(1) as f64;
    out.iter_mut().for_each(|v| *v -= mean);
    out
}

/// Positive 1-9 Hz band-limited process of length `n`.
fn envelope(rng: &mut ChaCha8Rng, band: &SosFilter, n: usize) -> Vec<f64> {
    let white: Vec<f64> = (0..n + 2 * ENVELOPE_MARGIN).map(|_| rng.sample(StandardNormal)).collect();
    let x = band.filtfilt(&white)[ENVELOPE_MARGIN..ENVELOPE_MARGIN + n].to_vec();
    let mean = x.iter().sum::<f64>() / n as f64;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-12);
    let z: Vec<f64> = x.iter().map(|v| (v - mean) / sd).collect();
    let min = z.iter().cloned().fold(f64::INFINITY, f64::min);
    z.into_iter().map(|v| v - min + 0.5).collect()
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

struct Subject {
    id: String,
    pattern: Vec<f64>,
    lag: usize,
    labels: Vec<u8>,
    seed: u64,
}

fn generate_subject(cfg: &SynthConfig, s: &Subject, band: &SosFilter) -> Vec<TrialRecording> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let n = (cfg.trial_seconds * cfg.fs).round() as usize;
    let c = cfg.n_channels;
    let names: Vec<String> = (0..c).map(|i| format!("ch{i}")).collect();
    let snr = 10f64.powf(cfg.snr_db / 10.0);
    (0..cfg.trials_per_subject)
        .map(|t| {
            // envelopes cover [-lag, n) so the delayed copy needs no padding
            let full_a = envelope(&mut rng, band, n + s.lag);
            let full_b = envelope(&mut rng, band, n + s.lag);
            let attended = s.labels[t];
            let source = if attended == 0 { &full_a } else { &full_b };
            let delayed = &source[..n];
            let mean = delayed.iter().sum::<f64>() / n as f64;
            let mut signal = Array2::from_shape_fn((c, n), |(ch, i)| s.pattern[ch] * (delayed[i] - mean));
            let mut noise = Array2::zeros((c, n));
            for ch in 0..c {
                noise.row_mut(ch).assign(&ndarray::Array1::from(pink_noise(&mut rng, n)));
            }
            let p_signal = signal.iter().map(|v| v * v).sum::<f64>();
            let p_noise = noise.iter().map(|v| v * v).sum::<f64>().max(1e-300);
            let scale = (p_signal / (snr * p_noise)).sqrt();
            signal.scaled_add(scale, &noise);
            let eeg = signal.mapv(round_f32);
            let env = |v: &[f64]| Waveform::new(v[s.lag..].iter().map(|&x| round_f32(x)).collect(), cfg.fs).expect("finite");
            TrialRecording {
                trial_id: format!("{}_t{t:03}", s.id),
                subject_id: s.id.clone(),
                condition: "synthetic".into(),
                eeg: MultiChannelRecording::new(eeg, cfg.fs, names.clone()).expect("valid shape"),
                env_a: env(&full_a),
                env_b: env(&full_b),
                attended,
            }
        })
        .collect()
}

/// Generate `n_subjects × trials_per_subject` trials. Values are rounded to
/// `f32` so the dataset survives the on-disk format bit-exactly.
pub fn synth_generate(cfg: &SynthConfig) -> Vec<TrialRecording> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base = unit_gaussian(&mut rng, cfg.n_channels);
    let subjects: Vec<Subject> = (0..cfg.n_subjects)
        .map(|s| {
            let dev = unit_gaussian(&mut rng, cfg.n_channels);
            let raw: Vec<f64> = base.iter().zip(&dev).map(|(b, d)| b + DEVIATION * d).collect();
            let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            let lag = rng.gen_range(MIN_LAG..=MAX_LAG);
            // exactly balanced labels, odd remainder decided by the rng
            let mut labels: Vec<u8> = (0..cfg.trials_per_subject).map(|i| (i % 2) as u8).collect();
            if cfg.trials_per_subject % 2 == 1 && rng.gen_bool(0.5) {
                labels[cfg.trials_per_subject - 1] = 1;
            }
            labels.shuffle(&mut rng);
            Subject {
                id: format!("s{s:02}"),
                pattern: raw.into_iter().map(|x| x / norm).collect(),
                lag,
                labels,
                seed: rng.gen(),
            }
        })
        .collect();
    let band = SosFilter::butterworth(&FilterSpec::bandpass(1.0, 9.0, 4), cfg.fs).expect("valid synthetic band");
    Exec::default().map(&subjects, |s| generate_subject(cfg, s, &band)).into_iter().flatten().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { n_subjects: 2, trials_per_subject: 3, trial_seconds: 4.0, ..SynthConfig::default() }
    }

    #[test]
    fn shapes_and_ids() {
        let trials = synth_generate(&small());
        assert_eq!(trials.len(), 6);
        for t in &trials {
            t.validate().unwrap();
            assert_eq!(t.eeg.data.dim(), (64, 256));
            assert!(t.env_a.samples.iter().all(|&v| v > 0.0));
        }
        assert_eq!(trials[0].trial_id, "s00_t000");
        assert_eq!(trials[5].subject_id, "s01");
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(synth_generate(&small()), synth_generate(&small()));
        let other = SynthConfig { seed: 1, ..small() };
        assert_ne!(synth_generate(&small()), synth_generate(&other));
    }

    #[test]
    fn values_are_f32_exact() {
        for t in synth_generate(&small()) {
            assert!(t.eeg.data.iter().all(|&v| v == v as f32 as f64));
            assert!(t.env_b.samples.iter().all(|&v| v == v as f32 as f64));
        }
    }

    #[test]
    fn pink_noise_has_more_low_frequency_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = pink_noise(&mut rng, 1 << 14);
        // first differences suppress low frequencies: white noise would give a
        // ratio near 2, pink noise far less
        let var = x.iter().map(|v| v * v).sum::<f64>();
        let dvar = x.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>();
        assert!(dvar / var < 1.0, "{}", dvar / var);
    }
}
