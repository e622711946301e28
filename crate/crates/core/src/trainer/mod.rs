//! Back-to-back optimization: each step applies one Adam update for the
//! two-path contrastive loss, then re-runs the forward pass with the updated
//! weights and applies a second update for the classification loss. Both
//! updates share one optimizer state and reach the encoder.

mod checkpoint;

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::{Array1, Array2, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::csp::CspModel;
use crate::dataset::{augment_gaussian, AugmentConfig, DatasetError, Standardization, WindowedExample};
use crate::losses::LossConfig;
use crate::model::{
    compute_gradients, ExampleInput, LossSelector, ModelConfig, ModelError, ModelParams, Real, ViewBatch,
};
use crate::par::Exec;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error("bad checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

impl TrainError {
    pub fn is_numerical(&self) -> bool {
        matches!(self, TrainError::Model(ModelError::NumericalFailure { .. }))
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eps_adam: f64,
    pub seed: u64,
    /// Global gradient-norm ceiling; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.99, epochs: 40, batch_size: 32, eps_adam: 1e-8, seed: 0, grad_clip: None }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and beta2 must lie in [0, 1)");
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2");
        }
        if !(self.eps_adam > 0.0) {
            return fail("eps_adam must be positive");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return fail("grad_clip must be positive");
        }
        Ok(())
    }
}

/// Everything `fit` needs besides the data.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
}

/// Adam moments, one tensor per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: ModelParams<F>,
    pub v: ModelParams<F>,
    pub t: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }
}

/// One bias-corrected Adam update of every tensor.
pub fn adam_step<F: Real>(
    params: &mut ModelParams<F>,
    grads: &ModelParams<F>,
    state: &mut AdamState<F>,
    cfg: &TrainConfig,
) -> Result<()> {
    if let Some(name) = grads.first_non_finite() {
        return Err(ModelError::NumericalFailure { tensor: name }.into());
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
    let c1 = F::one() - F::lit(cfg.beta1.powi(t));
    let c2 = F::one() - F::lit(cfg.beta2.powi(t));
    let (lr, eps) = (F::lit(cfg.lr), F::lit(cfg.eps_adam));
    let tensors = params.tensors_mut().into_iter().zip(grads.tensors()).zip(state.m.tensors_mut()).zip(state.v.tensors_mut());
    for ((((_, mut p), (_, g)), (_, mut m)), (_, mut v)) in tensors {
        Zip::from(&mut p).and(&g).and(&mut m).and(&mut v).for_each(|p, &g, m, v| {
            *m = b1 * *m + (F::one() - b1) * g;
            *v = b2 * *v + (F::one() - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p = *p - lr * mhat / (vhat.sqrt() + eps);
        });
    }
    Ok(())
}

fn clip<F: Real>(grads: &mut ModelParams<F>, max_norm: Option<f64>) {
    let Some(max_norm) = max_norm else { return };
    let sq: f64 = grads
        .tensors()
        .iter()
        .flat_map(|(_, t)| t.iter().map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2)))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        grads.scale(F::lit(max_norm / norm));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Contrastive,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub claad_loss: f64,
    /// Cross-entropy per example, averaged over both views.
    pub classification_loss: f64,
    /// Accuracy of the classification-phase logits over both views.
    pub accuracy: f64,
}

/// Owned network-precision copy of one example.
struct Converted<F> {
    features: Array2<F>,
    env_a: Array1<F>,
    env_b: Array1<F>,
}

impl<F: Real> Converted<F> {
    fn new(e: &WindowedExample) -> Self {
        Self {
            features: e.features.mapv(F::lit),
            env_a: e.env_a.iter().map(|&v| F::lit(v)).collect(),
            env_b: e.env_b.iter().map(|&v| F::lit(v)).collect(),
        }
    }

    fn input(&self) -> ExampleInput<'_, F> {
        ExampleInput { features: self.features.view(), env_a: self.env_a.view(), env_b: self.env_b.view() }
    }
}

/// Class with the larger logit; ties go to class 0.
pub fn predict<F: Real>(logits: &Array1<F>) -> u8 {
    u8::from(logits[1] > logits[0])
}

fn augmented_view<F: Real>(batch: &[WindowedExample], cfg: &AugmentConfig, seed: u64) -> Vec<Converted<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    batch.iter().map(|e| Converted::new(&augment_gaussian(e, cfg, rng.gen()))).collect()
}

/// One back-to-back step on a standardized batch. `view_seeds` drive the two
/// independent noise draws; `observe` sees the parameters entering each phase.
#[allow(clippy::too_many_arguments)]
pub fn train_step<F: Real>(
    batch: &[WindowedExample],
    params: &mut ModelParams<F>,
    state: &mut AdamState<F>,
    cfg: &FitConfig,
    view_seeds: [u64; 2],
    exec: Exec,
    observe: &mut dyn FnMut(Phase, &ModelParams<F>),
) -> Result<StepMetrics> {
    if batch.len() < 2 {
        return Err(TrainError::Config(format!("batch of {} examples is too small", batch.len())));
    }
    let labels: Vec<u8> = batch.iter().map(|e| e.label).collect();
    let views: Vec<Vec<Converted<F>>> = view_seeds.iter().map(|&s| augmented_view(batch, &cfg.augment, s)).collect();
    let inputs = ViewBatch { views: views.iter().map(|v| v.iter().map(Converted::input).collect()).collect(), labels: &labels };

    observe(Phase::Contrastive, params);
    let mut r = compute_gradients(params, &cfg.model, &inputs, LossSelector::Claad, &cfg.loss, exec)?;
    clip(&mut r.grads, cfg.train.grad_clip);
    adam_step(params, &r.grads, state, &cfg.train)?;
    let claad_loss = r.loss.to_f64().unwrap_or(f64::NAN);

    observe(Phase::Classification, params);
    let mut r = compute_gradients(params, &cfg.model, &inputs, LossSelector::Classification, &cfg.loss, exec)?;
    clip(&mut r.grads, cfg.train.grad_clip);
    adam_step(params, &r.grads, state, &cfg.train)?;
    let n = labels.len() as f64;
    let correct = r
        .outputs
        .logits
        .iter()
        .flat_map(|m| m.rows().into_iter().zip(&labels).filter(|(row, &y)| predict(&row.to_owned()) == y).collect::<Vec<_>>())
        .count();
    Ok(StepMetrics {
        claad_loss,
        classification_loss: r.loss.to_f64().unwrap_or(f64::NAN) / n,
        accuracy: correct as f64 / (2.0 * n),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub claad_loss: f64,
    pub classification_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

/// Shuffle, then cut into batches whose labels are balanced by swapping the
/// two envelopes of selected examples. Batches smaller than 2 are dropped.
fn balanced_batches(train: &[WindowedExample], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<WindowedExample>> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|chunk| {
            let mut wanted: Vec<u8> = (0..chunk.len()).map(|i| (i % 2) as u8).collect();
            wanted.shuffle(rng);
            chunk
                .iter()
                .zip(wanted)
                .map(|(&i, y)| {
                    let mut e = train[i].clone();
                    if e.label != y {
                        std::mem::swap(&mut e.env_a, &mut e.env_b);
                        e.label = y;
                    }
                    e
                })
                .collect()
        })
        .collect()
}

fn check_examples(examples: &[WindowedExample], cfg: &ModelConfig) -> Result<()> {
    for e in examples {
        if e.features.nrows() != cfg.in_channels || e.len() != cfg.window_len {
            return Err(TrainError::Config(format!(
                "example {}#{} is {:?}, model expects [{} x {}]",
                e.trial_id,
                e.window_index,
                e.features.dim(),
                cfg.in_channels,
                cfg.window_len
            )));
        }
    }
    Ok(())
}

fn accuracy_of<F: Real>(params: &ModelParams<F>, cfg: &ModelConfig, examples: &[WindowedExample], exec: Exec) -> Result<Vec<u8>> {
    let preds = exec.map(examples, |e| -> Result<u8> {
        let c = Converted::<F>::new(e);
        Ok(predict(&params.forward(cfg, &c.input())?.logits))
    });
    preds.into_iter().collect()
}

/// Train from scratch; per-epoch validation uses clean inputs.
pub fn fit(
    train: &[WindowedExample],
    val: &[WindowedExample],
    csp: &CspModel,
    cfg: &FitConfig,
    exec: Exec,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<Checkpoint> {
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.loss.validate().map_err(ModelError::from)?;
    if train.len() < 2 {
        return Err(TrainError::Config(format!("need at least 2 training windows, got {}", train.len())));
    }
    check_examples(train, &cfg.model)?;
    check_examples(val, &cfg.model)?;
    let stats = if cfg.augment.standardize {
        Standardization::fit(train).rounded_to_f32()
    } else {
        Standardization::identity(cfg.model.in_channels)
    };
    let train: Vec<WindowedExample> = train.iter().map(|e| stats.apply(e)).collect();
    let val: Vec<WindowedExample> = val.iter().map(|e| stats.apply(e)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut params = ModelParams::<f32>::init(&cfg.model, rng.gen())?;
    let mut state = AdamState::new(&params);
    let mut history = Vec::with_capacity(cfg.train.epochs);
    for epoch in 0..cfg.train.epochs {
        let batches = balanced_batches(&train, cfg.train.batch_size, &mut rng);
        let mut sums = [0.0; 3];
        for batch in &batches {
            let seeds = [rng.gen(), rng.gen()];
            let m = train_step(batch, &mut params, &mut state, cfg, seeds, exec, &mut |_, _| {})?;
            sums[0] += m.claad_loss;
            sums[1] += m.classification_loss;
            sums[2] += m.accuracy;
        }
        let nb = batches.len().max(1) as f64;
        let val_accuracy = if val.is_empty() {
            None
        } else {
            let preds = accuracy_of(&params, &cfg.model, &val, exec)?;
            let hits = preds.iter().zip(&val).filter(|(p, e)| **p == e.label).count();
            Some(hits as f64 / val.len() as f64)
        };
        let m = EpochMetrics {
            epoch,
            claad_loss: sums[0] / nb,
            classification_loss: sums[1] / nb,
            train_accuracy: sums[2] / nb,
            val_accuracy,
        };
        on_epoch(&m);
        history.push(m);
    }
    Ok(Checkpoint {
        config: cfg.clone(),
        params,
        adam: state,
        csp: csp.rounded_to_f32(),
        standardization: stats,
        epoch: cfg.train.epochs,
        history,
        meta: BTreeMap::new(),
    })
}

/// One line of an accuracy table.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRow {
    pub subject_id: String,
    pub window_len: usize,
    pub n_examples: usize,
    pub correct: usize,
}

impl AccuracyRow {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.n_examples as f64
    }
}

/// Clean-input accuracy grouped by subject and window length. Examples are
/// raw CSP features; the checkpoint's standardization is applied here.
pub fn evaluate_accuracy(examples: &[WindowedExample], checkpoint: &Checkpoint, exec: Exec) -> Result<Vec<AccuracyRow>> {
    check_examples(examples, &checkpoint.config.model)?;
    let std: Vec<WindowedExample> = examples.iter().map(|e| checkpoint.standardization.apply(e)).collect();
    let preds = accuracy_of(&checkpoint.params, &checkpoint.config.model, &std, exec)?;
    let mut groups: BTreeMap<(String, usize), (usize, usize)> = BTreeMap::new();
    for (e, p) in examples.iter().zip(preds) {
        let g = groups.entry((e.subject_id.clone(), e.len())).or_default();
        g.0 += 1;
        g.1 += usize::from(p == e.label);
    }
    Ok(groups
        .into_iter()
        .map(|((subject_id, window_len), (n, c))| AccuracyRow { subject_id, window_len, n_examples: n, correct: c })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params() -> ModelParams<f64> {
        let cfg = ModelConfig { d_model: 4, n_heads: 2, n_blocks: 1, window_len: 3, in_channels: 2, ..ModelConfig::default() };
        ModelParams::init(&cfg, 0).unwrap()
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = tiny_params();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.fill(1.0);
        let mut s = AdamState::new(&p);
        let cfg = TrainConfig::default();
        adam_step(&mut p, &g, &mut s, &cfg).unwrap();
        assert_eq!(s.t, 1);
        for ((_, a), (_, b)) in p.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                // m̂ = 1, v̂ = 1, update = lr / (1 + eps)
                assert!((x - y + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = tiny_params();
        let before = p.clone();
        let g = p.zeros_like();
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, &TrainConfig::default()).unwrap();
        adam_step(&mut p, &g, &mut s, &TrainConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.t, 2);
    }

    #[test]
    fn matches_scalar_reference() {
        let cfg = TrainConfig { lr: 0.01, beta1: 0.8, beta2: 0.95, ..TrainConfig::default() };
        let gs = [0.3, -1.2, 0.05, 2.0, -0.7];
        let mut p = tiny_params();
        let mut s = AdamState::new(&p);
        let (mut theta, mut m, mut v) = (p.fusion.weight[[1, 2]], 0.0f64, 0.0f64);
        for (t, &gv) in gs.iter().enumerate() {
            let mut g = p.zeros_like();
            g.fusion.weight[[1, 2]] = gv;
            adam_step(&mut p, &g, &mut s, &cfg).unwrap();
            let t = (t + 1) as i32;
            m = 0.8 * m + 0.2 * gv;
            v = 0.95 * v + 0.05 * gv * gv;
            let mh = m / (1.0 - 0.8f64.powi(t));
            let vh = v / (1.0 - 0.95f64.powi(t));
            theta -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((p.fusion.weight[[1, 2]] - theta).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_is_named() {
        let mut p = tiny_params();
        let mut g = p.zeros_like();
        g.blocks[0].attn.k.bias[1] = f64::INFINITY;
        let mut s = AdamState::new(&p);
        match adam_step(&mut p, &g, &mut s, &TrainConfig::default()) {
            Err(TrainError::Model(ModelError::NumericalFailure { tensor })) => assert_eq!(tensor, "block0.attn.k.bias"),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.t, 0);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        assert!(TrainConfig { beta2: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { grad_clip: Some(0.0), ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn batches_are_label_balanced() {
        let ex: Vec<WindowedExample> = (0..37)
            .map(|i| WindowedExample {
                features: Array2::zeros((1, 2)),
                env_a: vec![i as f64, 0.0],
                env_b: vec![-(i as f64), 1.0],
                label: 1,
                subject_id: "s".into(),
                trial_id: format!("t{i}"),
                window_index: 0,
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = balanced_batches(&ex, 8, &mut rng);
        assert_eq!(batches.len(), 5);
        for b in &batches {
            let zeros = b.iter().filter(|e| e.label == 0).count();
            assert_eq!(zeros, b.len().div_ceil(2));
            for e in b {
                // the attended envelope always ends in 1.0, whichever slot holds it
                let attended = if e.label == 0 { &e.env_a } else { &e.env_b };
                assert!(attended[0] <= 0.0 && attended[1] == 1.0);
            }
        }
    }
}
