//! Training objectives and their gradients.
//!
//! * classification: summed cross-entropy `-Σ_i log(ŷ_{i,y_i} + ε)`
//! * positive pair: supervised contrastive loss between predictor rows `p`
//!   and target rows `z`; every same-label column counts as a positive,
//!   including the anchor's own column. `z` is a constant (stop-gradient).
//! * two-path: mean of the positive-pair loss across crossed paths,
//!   `(L(p1, z2) + L(p2, z1)) / 2`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use thiserror::Error;

use crate::model::Real;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("probability row {row} sums to {sum} or has entries outside [0, 1]")]
    InvalidProbabilities { row: usize, sum: f64 },
    #[error("label {0} is not 0 or 1")]
    InvalidLabel(u8),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid loss config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub normalize_embeddings: bool,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: 1.0, normalize_embeddings: true, epsilon: 1e-12 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(LossError::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(LossError::Config(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

fn check_labels(labels: &[u8], rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(LossError::Shape(format!("{rows} rows but {} labels", labels.len())));
    }
    match labels.iter().find(|&&y| y > 1) {
        Some(&y) => Err(LossError::InvalidLabel(y)),
        None => Ok(()),
    }
}

/// Numerically stable softmax of one logit vector.
pub fn softmax<F: Real>(logits: ArrayView1<F>) -> Array1<F> {
    let max = logits.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let e = logits.mapv(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

/// Row-wise softmax of `[B × C]` logits.
pub fn softmax_rows<F: Real>(logits: ArrayView2<F>) -> Array2<F> {
    let mut out = Array2::zeros(logits.dim());
    for (mut o, l) in out.rows_mut().into_iter().zip(logits.rows()) {
        o.assign(&softmax(l));
    }
    out
}

/// Summed cross-entropy of `[B × 2]` probabilities against 0/1 labels.
pub fn classification_loss<F: Real>(probs: ArrayView2<F>, labels: &[u8], cfg: &LossConfig) -> Result<F> {
    check_labels(labels, probs.nrows())?;
    let eps = F::lit(cfg.epsilon);
    let mut total = F::zero();
    for (i, (row, &y)) in probs.rows().into_iter().zip(labels).enumerate() {
        let sum = row.sum();
        let bad = row.iter().any(|&v| !(v >= F::zero() && v <= F::one()));
        if bad || (sum - F::one()).abs() > F::lit(1e-6) || row.len() <= y as usize {
            return Err(LossError::InvalidProbabilities { row: i, sum: sum.to_f64().unwrap_or(f64::NAN) });
        }
        total = total - (row[y as usize] + eps).ln();
    }
    Ok(total)
}

/// Summed cross-entropy computed from logits, with its gradient
/// `dL/dlogits`.
pub fn classification_loss_grad<F: Real>(logits: ArrayView2<F>, labels: &[u8], cfg: &LossConfig) -> Result<(F, Array2<F>)> {
    let probs = softmax_rows(logits);
    let loss = classification_loss(probs.view(), labels, cfg)?;
    let eps = F::lit(cfg.epsilon);
    let mut grad = Array2::zeros(logits.dim());
    for ((mut g, p), &y) in grad.rows_mut().into_iter().zip(probs.rows()).zip(labels) {
        let py = p[y as usize];
        // d/dl_c of -log(p_y + eps) = -(p_y / (p_y + eps)) (1[c=y] - p_c)
        let k = py / (py + eps);
        for (c, (gc, &pc)) in g.iter_mut().zip(p).enumerate() {
            let delta = if c == y as usize { F::one() } else { F::zero() };
            *gc = -k * (delta - pc);
        }
    }
    Ok((loss, grad))
}

fn l2_rows<F: Real>(x: ArrayView2<F>) -> (Array2<F>, Array1<F>) {
    let tiny = F::lit(1e-30);
    let norms = x.map_axis(Axis(1), |r| r.iter().map(|&v| v * v).sum::<F>().sqrt().max(tiny));
    let mut out = x.to_owned();
    for (mut r, &n) in out.rows_mut().into_iter().zip(&norms) {
        r.mapv_inplace(|v| v / n);
    }
    (out, norms)
}

fn log_sum_exp<F: Real>(vals: impl Iterator<Item = F> + Clone) -> F {
    let max = vals.clone().fold(F::neg_infinity(), |a, b| a.max(b));
    max + vals.map(|v| (v - max).exp()).sum::<F>().ln()
}

/// Supervised contrastive loss `-(1/B) Σ_i log(Σ_{j: y_j = y_i} S_ij / Σ_j S_ij)`
/// with `S_ij = exp(p_i · z_j / τ)`. Returns the loss and `dL/dp`.
pub fn positive_pair_loss_grad<F: Real>(
    p: ArrayView2<F>,
    z: ArrayView2<F>,
    labels: &[u8],
    cfg: &LossConfig,
) -> Result<(F, Array2<F>)> {
    cfg.validate()?;
    if p.dim() != z.dim() {
        return Err(LossError::Shape(format!("p is {:?}, z is {:?}", p.dim(), z.dim())));
    }
    check_labels(labels, p.nrows())?;
    let b = p.nrows();
    if b <= 1 {
        return Ok((F::zero(), Array2::zeros(p.dim())));
    }
    let (ph, pn) = if cfg.normalize_embeddings { l2_rows(p) } else { (p.to_owned(), Array1::ones(b)) };
    let zh = if cfg.normalize_embeddings { l2_rows(z).0 } else { z.to_owned() };
    let inv_tau = F::lit(1.0 / cfg.temperature);
    let s = ph.dot(&zh.t()).mapv(|v| v * inv_tau);
    let bf = F::from_usize(b).expect("batch");
    let mut loss = F::zero();
    let mut ds = Array2::zeros((b, b));
    for i in 0..b {
        let row = s.row(i);
        let all = log_sum_exp(row.iter().copied());
        let same = (0..b).filter(|&j| labels[j] == labels[i]);
        let pos = log_sum_exp(same.clone().map(|j| row[j]));
        loss = loss + (all - pos);
        for j in 0..b {
            let pi_all = (row[j] - all).exp();
            let q = if labels[j] == labels[i] { (row[j] - pos).exp() } else { F::zero() };
            ds[[i, j]] = (pi_all - q) / bf;
        }
    }
    let mut dph = ds.dot(&zh).mapv(|v| v * inv_tau);
    if cfg.normalize_embeddings {
        for ((mut g, u), &n) in dph.rows_mut().into_iter().zip(ph.rows()).zip(&pn) {
            let dot = g.iter().zip(u).map(|(&a, &b)| a * b).sum::<F>();
            for (gk, &uk) in g.iter_mut().zip(u) {
                *gk = (*gk - uk * dot) / n;
            }
        }
    }
    Ok((loss / bf, dph))
}

pub fn positive_pair_loss<F: Real>(p: ArrayView2<F>, z: ArrayView2<F>, labels: &[u8], cfg: &LossConfig) -> Result<F> {
    Ok(positive_pair_loss_grad(p, z, labels, cfg)?.0)
}

/// Two-path loss with gradients with respect to `p1` and `p2`.
pub fn claad_loss_grad<F: Real>(
    p1: ArrayView2<F>,
    z2: ArrayView2<F>,
    p2: ArrayView2<F>,
    z1: ArrayView2<F>,
    labels: &[u8],
    cfg: &LossConfig,
) -> Result<(F, Array2<F>, Array2<F>)> {
    let (l1, g1) = positive_pair_loss_grad(p1, z2, labels, cfg)?;
    let (l2, g2) = positive_pair_loss_grad(p2, z1, labels, cfg)?;
    let half = F::lit(0.5);
    Ok(((l1 + l2) * half, g1 * half, g2 * half))
}

pub fn claad_loss<F: Real>(
    p1: ArrayView2<F>,
    z2: ArrayView2<F>,
    p2: ArrayView2<F>,
    z1: ArrayView2<F>,
    labels: &[u8],
    cfg: &LossConfig,
) -> Result<F> {
    Ok(claad_loss_grad(p1, z2, p2, z1, labels, cfg)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
    }

    /// Direct evaluation of the printed ratio form with explicit loops.
    fn brute_positive_pair(p: &Array2<f64>, z: &Array2<f64>, y: &[u8]) -> f64 {
        let b = p.nrows();
        let unit = |r: ArrayView1<f64>| {
            let n = r.dot(&r).sqrt();
            r.mapv(|v| v / n)
        };
        let mut total = 0.0;
        for i in 0..b {
            let (mut num, mut den) = (0.0, 0.0);
            for j in 0..b {
                let sij = unit(p.row(i)).dot(&unit(z.row(j))).exp();
                den += sij;
                if y[i] == y[j] {
                    num += sij;
                }
            }
            total += (num / den).ln();
        }
        -total / b as f64
    }

    #[test]
    fn cross_entropy_values() {
        let cfg = LossConfig::default();
        let uniform = Array2::from_elem((4, 2), 0.5);
        let l = classification_loss(uniform.view(), &[0, 1, 1, 0], &cfg).unwrap();
        assert!((l - 4.0 * 2f64.ln()).abs() < 1e-9);
        let probs: Array2<f64> = array![[0.9, 0.1], [0.2, 0.8]];
        let l = classification_loss(probs.view(), &[0, 1], &cfg).unwrap();
        assert!((l - 0.32850).abs() < 1e-5);
        let onehot = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        let l: f64 = classification_loss(onehot.view(), &[0, 1, 0], &cfg).unwrap();
        assert!(l <= 3.0 * (1.0f64 + 1e-12).ln().abs() + 1e-15);
    }

    #[test]
    fn cross_entropy_domain_errors() {
        let cfg = LossConfig::default();
        let bad = array![[0.7, 0.7]];
        assert!(matches!(classification_loss(bad.view(), &[0], &cfg), Err(LossError::InvalidProbabilities { row: 0, .. })));
        let ok = array![[0.5, 0.5]];
        assert_eq!(classification_loss(ok.view(), &[2], &cfg), Err(LossError::InvalidLabel(2)));
        assert!(classification_loss(ok.view(), &[0, 1], &cfg).is_err());
    }

    #[test]
    fn orthonormal_pair_case() {
        let cfg = LossConfig::default();
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        let l = positive_pair_loss(e.view(), e.view(), &[0, 1], &cfg).unwrap();
        let e1 = 1f64.exp();
        assert!((l + (e1 / (e1 + 1.0)).ln()).abs() < 1e-12);
        assert!((l - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn same_labels_give_zero() {
        let cfg = LossConfig::default();
        let p = random(5, 3, 1);
        let z = random(5, 3, 2);
        let (l, g) = positive_pair_loss_grad(p.view(), z.view(), &[1; 5], &cfg).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(positive_pair_loss(p.slice(ndarray::s![..1, ..]), z.slice(ndarray::s![..1, ..]), &[0], &cfg).unwrap(), 0.0);
    }

    #[test]
    fn matches_brute_force() {
        let cfg = LossConfig::default();
        let (p1, z1, p2, z2) = (random(4, 6, 1), random(4, 6, 2), random(4, 6, 3), random(4, 6, 4));
        let y = [0, 1, 1, 0];
        let brute = 0.5 * (brute_positive_pair(&p1, &z2, &y) + brute_positive_pair(&p2, &z1, &y));
        let l = claad_loss(p1.view(), z2.view(), p2.view(), z1.view(), &y, &cfg).unwrap();
        assert!((l - brute).abs() < 1e-9);
    }

    #[test]
    fn path_symmetry_and_collapse() {
        let cfg = LossConfig::default();
        let (p1, z1, p2, z2) = (random(6, 4, 5), random(6, 4, 6), random(6, 4, 7), random(6, 4, 8));
        let y = [0, 1, 0, 1, 1, 0];
        let a = claad_loss(p1.view(), z2.view(), p2.view(), z1.view(), &y, &cfg).unwrap();
        let b = claad_loss(p2.view(), z1.view(), p1.view(), z2.view(), &y, &cfg).unwrap();
        assert_eq!(a, b);
        let same = claad_loss(p1.view(), z1.view(), p1.view(), z1.view(), &y, &cfg).unwrap();
        assert_eq!(same, positive_pair_loss(p1.view(), z1.view(), &y, &cfg).unwrap());
    }

    #[test]
    fn gradient_matches_differences() {
        for normalize in [true, false] {
            let cfg = LossConfig { temperature: 0.7, normalize_embeddings: normalize, epsilon: 1e-12 };
            let p = random(5, 3, 9);
            let z = random(5, 3, 10);
            let y = [0, 0, 1, 1, 0];
            let (_, g) = positive_pair_loss_grad(p.view(), z.view(), &y, &cfg).unwrap();
            let h = 1e-6;
            for idx in 0..p.len() {
                let (mut a, mut b) = (p.clone(), p.clone());
                a.as_slice_mut().unwrap()[idx] += h;
                b.as_slice_mut().unwrap()[idx] -= h;
                let num = (positive_pair_loss(a.view(), z.view(), &y, &cfg).unwrap()
                    - positive_pair_loss(b.view(), z.view(), &y, &cfg).unwrap())
                    / (2.0 * h);
                assert!((num - g.as_slice().unwrap()[idx]).abs() < 1e-8);
            }
        }
        let cfg = LossConfig::default();
        let logits = random(4, 2, 3).mapv(|v| 3.0 * v);
        let y = [1, 0, 0, 1];
        let (_, g) = classification_loss_grad(logits.view(), &y, &cfg).unwrap();
        let f = |l: &Array2<f64>| classification_loss(softmax_rows(l.view()).view(), &y, &cfg).unwrap();
        for idx in 0..logits.len() {
            let (mut a, mut b) = (logits.clone(), logits.clone());
            a.as_slice_mut().unwrap()[idx] += 1e-6;
            b.as_slice_mut().unwrap()[idx] -= 1e-6;
            assert!(((f(&a) - f(&b)) / 2e-6 - g.as_slice().unwrap()[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn separated_classes_approach_zero() {
        // every anchor aligned with its own class and orthogonal to the other
        let cfg = LossConfig { temperature: 0.01, ..LossConfig::default() };
        let p = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        let l = positive_pair_loss(p.view(), p.view(), &[0, 0, 1, 1], &cfg).unwrap();
        assert!(l >= 0.0 && l < 1e-40);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = LossConfig { temperature: 0.0, ..LossConfig::default() };
        let p = random(2, 2, 1);
        assert!(matches!(positive_pair_loss(p.view(), p.view(), &[0, 1], &cfg), Err(LossError::Config(_))));
    }

    fn batch() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<u8>, Vec<usize>)> {
        (2usize..8).prop_flat_map(|b| {
            let v = || prop::collection::vec(-2.0f64..2.0, b * 3);
            (v(), v(), v(), v(), prop::collection::vec(0u8..2, b), Just((0..b).collect::<Vec<_>>()).prop_shuffle())
        })
    }

    proptest! {
        #[test]
        fn invariances((p1, z1, p2, z2, y, perm) in batch(), k in 0.1f64..10.0) {
            let cfg = LossConfig::default();
            let b = y.len();
            let m = |v: &Vec<f64>| Array2::from_shape_vec((b, 3), v.clone()).unwrap();
            let (p1, z1, p2, z2) = (m(&p1), m(&z1), m(&p2), m(&z2));
            prop_assume!(p1.rows().into_iter().chain(p2.rows()).chain(z1.rows()).chain(z2.rows()).all(|r| r.dot(&r) > 1e-6));
            let base = claad_loss(p1.view(), z2.view(), p2.view(), z1.view(), &y, &cfg).unwrap();
            prop_assert!(base >= 0.0);
            prop_assert!(positive_pair_loss(p1.view(), z2.view(), &y, &cfg).unwrap() >= 0.0);

            let sel = |a: &Array2<f64>| a.select(Axis(0), &perm);
            let yp: Vec<u8> = perm.iter().map(|&i| y[i]).collect();
            let permuted = claad_loss(sel(&p1).view(), sel(&z2).view(), sel(&p2).view(), sel(&z1).view(), &yp, &cfg).unwrap();
            prop_assert!((permuted - base).abs() < 1e-12);

            let mut scaled = p1.clone();
            scaled.row_mut(0).mapv_inplace(|v| v * k);
            let s = claad_loss(scaled.view(), z2.view(), p2.view(), z1.view(), &y, &cfg).unwrap();
            prop_assert!((s - base).abs() < 1e-9);

            let c = positive_pair_loss(p1.view(), z2.view(), &y, &cfg).unwrap();
            let c2 = positive_pair_loss(sel(&p1).view(), sel(&z2).view(), &yp, &cfg).unwrap();
            prop_assert!((c - c2).abs() < 1e-12);
        }
    }
}
