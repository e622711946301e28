//! Shared oracles for the integration tests.
#![allow(dead_code)]

use claad::csp::{csp_fit, CspModel, LabeledEpoch};
use claad::dataset::{make_windows, raw_windows, synth_generate, SynthConfig, TrialRecording, WindowedExample};
use claad::losses::{classification_loss, claad_loss, softmax_rows, LossConfig};
use claad::model::{compute_gradients, ExampleInput, LossSelector, ModelConfig, ModelParams, Outputs, ViewBatch};
use claad::par::Exec;
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A few short 8-channel synthetic trials.
pub fn small_trials(n_subjects: usize, trials_per_subject: usize, seed: u64) -> Vec<TrialRecording> {
    synth_generate(&SynthConfig { n_subjects, trials_per_subject, trial_seconds: 8.0, n_channels: 8, seed, ..SynthConfig::default() })
}

/// CSP (4 components) fit on `train` trials, then 1 s windows of both sets.
pub fn small_windows(
    trials: &[TrialRecording],
    train: &[usize],
    val: &[usize],
) -> (Vec<WindowedExample>, Vec<WindowedExample>, CspModel) {
    let mut epochs = Vec::new();
    for &i in train {
        for w in raw_windows(&trials[i], 1.0, 0.5).unwrap() {
            epochs.push(LabeledEpoch { eeg: w, label: trials[i].attended });
        }
    }
    let csp = csp_fit(&epochs, 4, 0.0).unwrap();
    let win = |idx: &[usize]| -> Vec<WindowedExample> {
        idx.iter().flat_map(|&i| make_windows(&trials[i], &csp, 1.0, 0.5).unwrap()).collect()
    };
    (win(train), win(val), csp)
}

/// Lagged EEG features for a backward decoder: row `t` holds every channel at
/// samples `t..t + lags`, for the `L - lags + 1` start positions that fit.
fn lagged(e: &WindowedExample, lags: usize) -> DMatrix<f64> {
    let (c, l) = e.features.dim();
    let n = l + 1 - lags;
    DMatrix::from_fn(n, c * lags, |t, j| e.features[[j % c, t + j / c]])
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Ridge regression from lagged EEG to the attended envelope, fit on `train`;
/// a test window is called for the envelope its reconstruction correlates
/// with more. Returns the fraction of `test` called correctly.
pub fn linear_oracle_accuracy(train: &[WindowedExample], test: &[WindowedExample], lags: usize, ridge: f64) -> f64 {
    let dim = train[0].features.nrows() * lags;
    let mut xtx = DMatrix::<f64>::zeros(dim + 1, dim + 1);
    let mut xty = DVector::<f64>::zeros(dim + 1);
    for e in train {
        let x = lagged(e, lags).insert_column(dim, 1.0);
        let att = if e.label == 0 { &e.env_a } else { &e.env_b };
        let y = DVector::from_column_slice(&att[..x.nrows()]);
        xtx += x.transpose() * &x;
        xty += x.transpose() * y;
    }
    let lambda = ridge * (0..dim).map(|i| xtx[(i, i)]).sum::<f64>() / dim as f64;
    for i in 0..dim {
        xtx[(i, i)] += lambda;
    }
    let w = xtx.cholesky().expect("ridge system is positive definite").solve(&xty);
    let hits = test
        .iter()
        .filter(|e| {
            let x = lagged(e, lags).insert_column(dim, 1.0);
            let rec = x * &w;
            let n = rec.len();
            let ra = pearson(rec.as_slice(), &e.env_a[..n]);
            let rb = pearson(rec.as_slice(), &e.env_b[..n]);
            u8::from(rb > ra) == e.label
        })
        .count();
    hits as f64 / test.len() as f64
}

/// Loss of `selector` computed from scratch at `params`. For the contrastive
/// loss the targets `z` are the frozen values passed in, which is what the
/// stop-gradient means: only the probe path moves with the parameters.
pub fn reference_loss(
    params: &ModelParams<f64>,
    cfg: &ModelConfig,
    batch: &ViewBatch<f64>,
    selector: LossSelector,
    loss_cfg: &LossConfig,
    frozen_z: &[Array2<f64>],
) -> f64 {
    let stack = |v: &[claad::model::ExampleInput<f64>], pick: fn(&Outputs<f64>) -> &ndarray::Array1<f64>| {
        let outs: Vec<Outputs<f64>> = v.iter().map(|x| params.forward(cfg, x).unwrap()).collect();
        let w = pick(&outs[0]).len();
        Array2::from_shape_fn((outs.len(), w), |(i, j)| pick(&outs[i])[j])
    };
    match selector {
        LossSelector::Claad => {
            let p1 = stack(&batch.views[0], |o| &o.p);
            let p2 = stack(&batch.views[1], |o| &o.p);
            claad_loss(p1.view(), frozen_z[1].view(), p2.view(), frozen_z[0].view(), batch.labels, loss_cfg).unwrap()
        }
        LossSelector::Classification => {
            let n = batch.views.len() as f64;
            batch
                .views
                .iter()
                .map(|v| {
                    let logits = stack(v, |o| &o.logits);
                    classification_loss(softmax_rows(logits.view()).view(), batch.labels, loss_cfg).unwrap()
                })
                .sum::<f64>()
                / n
        }
    }
}

/// Central finite differences of [`reference_loss`] for every parameter entry.
pub fn finite_difference_gradients(
    params: &ModelParams<f64>,
    cfg: &ModelConfig,
    batch: &ViewBatch<f64>,
    selector: LossSelector,
    loss_cfg: &LossConfig,
    h: f64,
) -> ModelParams<f64> {
    let frozen_z: Vec<Array2<f64>> = batch
        .views
        .iter()
        .map(|v| {
            let outs: Vec<Outputs<f64>> = v.iter().map(|x| params.forward(cfg, x).unwrap()).collect();
            Array2::from_shape_fn((outs.len(), outs[0].z.len()), |(i, j)| outs[i].z[j])
        })
        .collect();
    let mut work = params.clone();
    let mut grads = params.zeros_like();
    let n_tensors = params.tensors().len();
    for ti in 0..n_tensors {
        let len = params.tensors()[ti].1.len();
        for k in 0..len {
            let original = params.tensors()[ti].1.iter().nth(k).copied().unwrap();
            let set = |w: &mut ModelParams<f64>, v: f64| *w.tensors_mut().swap_remove(ti).1.iter_mut().nth(k).unwrap() = v;
            set(&mut work, original + h);
            let up = reference_loss(&work, cfg, batch, selector, loss_cfg, &frozen_z);
            set(&mut work, original - h);
            let down = reference_loss(&work, cfg, batch, selector, loss_cfg, &frozen_z);
            set(&mut work, original);
            let d = (up - down) / (2.0 * h);
            *grads.tensors_mut().swap_remove(ti).1.iter_mut().nth(k).unwrap() = d;
        }
    }
    grads
}

/// Below this gradient norm a tensor is compared in absolute terms. Finite
/// differences at h = 1e-4 carry roughly 1e-12 of rounding noise per entry,
/// so a tensor whose true gradient is zero (the attention key bias, which
/// the softmax cancels) would otherwise score noise against noise.
pub const NORM_FLOOR: f64 = 1e-6;

/// ‖a − b‖ / max(‖a‖, ‖b‖, [`NORM_FLOOR`]).
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(NORM_FLOOR)
}

/// The gradient-check configuration: d_model 8, 2 heads, 2 blocks, L = 4.
pub fn miniature() -> ModelConfig {
    ModelConfig { d_model: 8, n_heads: 2, n_blocks: 2, window_len: 4, ..ModelConfig::default() }
}

pub struct OwnedExample {
    pub features: Array2<f64>,
    pub env_a: Array1<f64>,
    pub env_b: Array1<f64>,
}

/// Two views of `b` standard-normal examples.
pub fn random_views(cfg: &ModelConfig, b: usize, seed: u64) -> Vec<Vec<OwnedExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    (0..2)
        .map(|_| {
            (0..b)
                .map(|_| OwnedExample {
                    features: Array2::from_shape_vec((cfg.in_channels, cfg.window_len), draw(cfg.in_channels * cfg.window_len))
                        .unwrap(),
                    env_a: Array1::from(draw(cfg.window_len)),
                    env_b: Array1::from(draw(cfg.window_len)),
                })
                .collect()
        })
        .collect()
}

pub fn inputs(views: &[Vec<OwnedExample>]) -> Vec<Vec<ExampleInput<'_, f64>>> {
    views
        .iter()
        .map(|v| v.iter().map(|o| ExampleInput { features: o.features.view(), env_a: o.env_a.view(), env_b: o.env_b.view() }).collect())
        .collect()
}

/// Per-tensor relative error of the analytic gradient against central
/// differences (h = 1e-4) on the miniature config, B = `labels.len()`.
pub fn gradient_check(selector: LossSelector, labels: &[u8]) -> Vec<(String, f64)> {
    let cfg = miniature();
    let params = ModelParams::<f64>::init(&cfg, 11).unwrap();
    let owned = random_views(&cfg, labels.len(), 5);
    let batch = ViewBatch { views: inputs(&owned), labels };
    let loss_cfg = LossConfig::default();
    let analytic = compute_gradients(&params, &cfg, &batch, selector, &loss_cfg, Exec::default()).unwrap();
    let numeric = finite_difference_gradients(&params, &cfg, &batch, selector, &loss_cfg, 1e-4);
    analytic
        .grads
        .tensors()
        .iter()
        .zip(numeric.tensors())
        .map(|((name, a), (_, n))| {
            let a: Vec<f64> = a.iter().copied().collect();
            let n: Vec<f64> = n.iter().copied().collect();
            (name.clone(), relative_error(&a, &n))
        })
        .collect()
}

/// Length of 10 s of noise at 512 Hz after resampling to 64 Hz.
pub fn resampled_length() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x: Vec<f64> = (0..5120).map(|_| rng.sample(StandardNormal)).collect();
    let w = claad::sigproc::Waveform::new(x, 512.0).unwrap();
    claad::sigproc::resample(&w, 64.0).unwrap().samples.len()
}

/// Steady-state output/input amplitude of a `hz` tone through the 1-9 Hz,
/// order-4 zero-phase bandpass at 64 Hz. Measured on the middle of 60 s.
pub fn bandpass_tone_gain(hz: f64) -> f64 {
    use claad::sigproc::{bandpass_filter, FilterSpec, Waveform};
    let n = 64 * 60;
    let x: Vec<f64> = (0..n).map(|t| (2.0 * std::f64::consts::PI * hz * t as f64 / 64.0).sin()).collect();
    let y = bandpass_filter(&Waveform::new(x.clone(), 64.0).unwrap(), &FilterSpec::bandpass(1.0, 9.0, 4)).unwrap();
    let rms = |v: &[f64]| (v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64).sqrt();
    rms(&y.samples[n / 4..3 * n / 4]) / rms(&x[n / 4..3 * n / 4])
}

/// Band with the most output power for a 1 kHz tone, and the band whose
/// impulse response has the largest FFT magnitude at 1 kHz.
pub fn gammatone_peak_bands() -> (usize, usize) {
    let fs = 16000.0;
    let n = 16000;
    let bank = claad::sigproc::EnvelopeConfig::default().bank(fs).unwrap();
    let tone: Vec<f64> = (0..n).map(|t| (2.0 * std::f64::consts::PI * 1000.0 * t as f64 / fs).sin()).collect();
    let argmax = |v: Vec<f64>| v.iter().enumerate().fold((0, f64::MIN), |b, (i, &x)| if x > b.1 { (i, x) } else { b }).0;
    let measured = argmax(
        bank.filter(&tone).iter().map(|y| y[n / 2..].iter().map(|v| v * v).sum::<f64>()).collect(),
    );
    let mut planner = rustfft::FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let predicted = argmax(
        (0..bank.len())
            .map(|k| {
                let mut h: Vec<rustfft::num_complex::Complex64> =
                    bank.impulse_response(k, n).into_iter().map(|v| rustfft::num_complex::Complex64::new(v, 0.0)).collect();
                fft.process(&mut h);
                // bin spacing is fs / n = 1 Hz
                h[1000].norm()
            })
            .collect(),
    );
    (measured, predicted)
}
