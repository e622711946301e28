//! Two-class common spatial patterns.
//!
//! Filters come from the symmetric-definite generalized eigenproblem
//! `S0 w = mu (S0 + S1) w`, solved by Cholesky whitening of the pooled
//! covariance followed by a symmetric eigendecomposition. Rows of the filter
//! matrix `W` satisfy `W (S0 + S1) W^T = I` and `W S0 W^T = diag(mu)`.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2, Axis};
use thiserror::Error;

use crate::par::Exec;
use crate::sigproc::MultiChannelRecording;

#[derive(Debug, Error, PartialEq)]
pub enum CspError {
    #[error("CSP needs epochs from both classes")]
    InsufficientClasses,
    #[error("pooled covariance is ill-conditioned (ratio {0:e}); increase shrinkage")]
    IllConditioned(f64),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, CspError>;

/// One EEG segment (channels × samples) with its class label.
#[derive(Debug, Clone, Copy)]
pub struct LabeledEpoch<'a> {
    pub eeg: ArrayView2<'a, f64>,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CspModel {
    /// `[n_components × n_channels]`, rows ordered by descending eigenvalue.
    pub filters: Array2<f64>,
    pub eigenvalues: Vec<f64>,
    pub class_covariances: [Array2<f64>; 2],
    pub shrinkage: f64,
}

/// Trace-normalized covariance of a channel-wise zero-meaned epoch.
fn normalized_covariance(x: ArrayView2<f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(1)).expect("epoch has samples");
    let centered = &x - &mean.insert_axis(Axis(1));
    let cov = centered.dot(&centered.t());
    let tr = cov.diag().sum();
    if tr > 0.0 {
        cov / tr
    } else {
        cov
    }
}

fn shrink(mut cov: Array2<f64>, lambda: f64) -> Array2<f64> {
    let c = cov.nrows();
    let target = cov.diag().sum() / c as f64;
    cov *= 1.0 - lambda;
    for i in 0..c {
        cov[[i, i]] += lambda * target;
    }
    cov
}

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Fit CSP filters on labeled epochs.
pub fn csp_fit(epochs: &[LabeledEpoch], n_components: usize, shrinkage: f64) -> Result<CspModel> {
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(CspError::InvalidArgument(format!("shrinkage {shrinkage} outside [0, 1]")));
    }
    let first = epochs.first().ok_or(CspError::InsufficientClasses)?;
    let c = first.eeg.nrows();
    if n_components == 0 || n_components > c {
        return Err(CspError::InvalidArgument(format!(
            "n_components {n_components} must be in 1..={c}"
        )));
    }
    for e in epochs {
        if e.eeg.nrows() != c {
            return Err(CspError::Shape(format!("epoch has {} channels, expected {c}", e.eeg.nrows())));
        }
        if e.eeg.ncols() < 2 {
            return Err(CspError::Shape("epoch needs at least two samples".into()));
        }
        if e.label > 1 {
            return Err(CspError::InvalidArgument(format!("label {} is not binary", e.label)));
        }
    }

    let covs = Exec::default().map(epochs, |e| normalized_covariance(e.eeg));
    let mut sums = [Array2::<f64>::zeros((c, c)), Array2::<f64>::zeros((c, c))];
    let mut counts = [0usize; 2];
    for (e, cov) in epochs.iter().zip(covs) {
        sums[e.label as usize] += &cov;
        counts[e.label as usize] += 1;
    }
    if counts.contains(&0) {
        return Err(CspError::InsufficientClasses);
    }
    let [s0, s1] = sums;
    let cov0 = shrink(s0 / counts[0] as f64, shrinkage);
    let cov1 = shrink(s1 / counts[1] as f64, shrinkage);

    let pooled = to_na(&(&cov0 + &cov1));
    let chol = pooled.clone().cholesky().ok_or(CspError::IllConditioned(0.0))?;
    let l = chol.l();
    let diag: Vec<f64> = (0..c).map(|i| l[(i, i)] * l[(i, i)]).collect();
    let dmax = diag.iter().cloned().fold(0.0, f64::max);
    let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    let ratio = dmin / dmax;
    if !(ratio > 1e-12) {
        return Err(CspError::IllConditioned(ratio));
    }
    let l_inv = l.solve_lower_triangular(&DMatrix::identity(c, c)).ok_or(CspError::IllConditioned(ratio))?;
    let m = &l_inv * to_na(&cov0) * l_inv.transpose();
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);

    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    // keep the most discriminative components from both ends
    let mut chosen: Vec<usize> = (0..n_components)
        .map(|k| if k % 2 == 0 { k / 2 } else { c - 1 - k / 2 })
        .collect();
    chosen.sort_unstable();

    let mut filters = Array2::zeros((n_components, c));
    let mut eigenvalues = Vec::with_capacity(n_components);
    for (row, &rank) in chosen.iter().enumerate() {
        let idx = order[rank];
        let u = eig.eigenvectors.column(idx);
        let w = l_inv.transpose() * u;
        // deterministic sign: largest-magnitude entry positive
        let pivot = (0..c).max_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs())).unwrap_or(0);
        let sign = if w[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..c {
            filters[[row, j]] = sign * w[j];
        }
        eigenvalues.push(eig.eigenvalues[idx]);
    }

    Ok(CspModel { filters, eigenvalues, class_covariances: [cov0, cov1], shrinkage })
}

impl CspModel {
    /// Identity filters, useful when CSP is disabled.
    pub fn identity(n_channels: usize) -> Self {
        Self {
            filters: Array2::eye(n_channels),
            eigenvalues: vec![0.5; n_channels],
            class_covariances: [Array2::eye(n_channels), Array2::eye(n_channels)],
            shrinkage: 0.0,
        }
    }

    pub fn n_components(&self) -> usize {
        self.filters.nrows()
    }

    pub fn n_channels(&self) -> usize {
        self.filters.ncols()
    }

    /// `W · x` for a channels × samples block.
    pub fn project(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.n_channels() {
            return Err(CspError::Shape(format!(
                "input has {} channels, CSP expects {}",
                x.nrows(),
                self.n_channels()
            )));
        }
        Ok(self.filters.dot(&x))
    }

    /// Copy with every stored matrix rounded to `f32` precision, so the model
    /// survives the `f32` checkpoint payload unchanged.
    pub fn rounded_to_f32(&self) -> Self {
        let r = |a: &Array2<f64>| a.mapv(|v| v as f32 as f64);
        Self {
            filters: r(&self.filters),
            eigenvalues: self.eigenvalues.iter().map(|&v| v as f32 as f64).collect(),
            class_covariances: [r(&self.class_covariances[0]), r(&self.class_covariances[1])],
            shrinkage: self.shrinkage,
        }
    }
}

/// Project a recording into CSP space; output rows are named `csp0..`.
pub fn csp_transform(model: &CspModel, rec: &MultiChannelRecording) -> Result<MultiChannelRecording> {
    let data = model.project(rec.data.view())?;
    let names = (0..model.n_components()).map(|i| format!("csp{i}")).collect();
    MultiChannelRecording::new(data, rec.fs, names).map_err(|e| CspError::Shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scales: &[f64]) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |(i, _)| {
            let z: f64 = StandardNormal.sample(rng);
            z * scales[i]
        })
    }

    fn max_abs_dev_from_identity(a: &Array2<f64>) -> f64 {
        let mut m = 0.0f64;
        for ((i, j), v) in a.indexed_iter() {
            let t = if i == j { 1.0 } else { 0.0 };
            m = m.max((v - t).abs());
        }
        m
    }

    fn random_epochs(seed: u64, c: usize, n: usize, count: usize) -> Vec<(Array2<f64>, u8)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|k| {
                let label = (k % 2) as u8;
                let scales: Vec<f64> =
                    (0..c).map(|i| if (i % 3 == 0) == (label == 0) { 2.0 } else { 1.0 }).collect();
                let mut x = gaussian(&mut rng, c, n, &scales);
                // correlate neighbouring channels
                for i in 1..c {
                    let prev = x.row(i - 1).to_owned();
                    let mut row = x.row_mut(i);
                    row.scaled_add(0.5, &prev);
                }
                (x, label)
            })
            .collect()
    }

    fn views(data: &[(Array2<f64>, u8)]) -> Vec<LabeledEpoch<'_>> {
        data.iter().map(|(x, l)| LabeledEpoch { eeg: x.view(), label: *l }).collect()
    }

    #[test]
    fn whitening_identity() {
        let data = random_epochs(1, 8, 200, 20);
        let m = csp_fit(&views(&data), 8, 0.05).unwrap();
        let pooled = &m.class_covariances[0] + &m.class_covariances[1];
        let ident = m.filters.dot(&pooled).dot(&m.filters.t());
        assert!(max_abs_dev_from_identity(&ident) < 1e-8);
        assert!(m.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        assert!(m.eigenvalues.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn equal_classes_give_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, n, count) = (4, 500, 40);
        let data: Vec<(Array2<f64>, u8)> =
            (0..count).map(|k| (gaussian(&mut rng, c, n, &[1.0; 4]), (k % 2) as u8)).collect();
        let m = csp_fit(&views(&data), 4, 0.05).unwrap();
        let bound = 2.0 / ((n * count) as f64).sqrt();
        for &mu in &m.eigenvalues {
            assert!((mu - 0.5).abs() < bound, "{mu} vs bound {bound}");
        }
    }

    #[test]
    fn two_channel_separated_classes() {
        // oracle: with diagonal covariances the generalized eigenproblem is
        // solved per axis, mu_i = s0_i / (s0_i + s1_i)
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut data = Vec::new();
        for k in 0..20 {
            let label = (k % 2) as u8;
            let scales = if label == 0 { [1.0, 0.01] } else { [0.01, 1.0] };
            data.push((gaussian(&mut rng, 2, 400, &scales), label));
        }
        let m = csp_fit(&views(&data), 2, 0.0).unwrap();
        assert!(m.eigenvalues[0] > 0.95, "{:?}", m.eigenvalues);
        assert!(m.eigenvalues[1] < 0.05);
        // top filter points along channel 0
        assert!(m.filters[[0, 0]].abs() > 10.0 * m.filters[[0, 1]].abs());
    }

    #[test]
    fn single_class_is_rejected() {
        let data = random_epochs(2, 4, 50, 6);
        let only0: Vec<_> = data.into_iter().map(|(x, _)| (x, 0u8)).collect();
        assert_eq!(csp_fit(&views(&only0), 4, 0.05).unwrap_err(), CspError::InsufficientClasses);
    }

    #[test]
    fn singular_covariance_without_shrinkage() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<(Array2<f64>, u8)> = (0..6)
            .map(|k| {
                let mut x = gaussian(&mut rng, 3, 100, &[1.0, 1.0, 1.0]);
                let r0 = x.row(0).to_owned();
                x.row_mut(2).assign(&r0);
                (x, (k % 2) as u8)
            })
            .collect();
        assert!(matches!(csp_fit(&views(&data), 3, 0.0), Err(CspError::IllConditioned(_))));
        assert!(csp_fit(&views(&data), 3, 0.05).is_ok());
    }

    #[test]
    fn swapped_labels_reverse_spectrum() {
        let data = random_epochs(11, 6, 300, 24);
        let swapped: Vec<_> = data.iter().map(|(x, l)| (x.clone(), 1 - l)).collect();
        let a = csp_fit(&views(&data), 6, 0.05).unwrap();
        let b = csp_fit(&views(&swapped), 6, 0.05).unwrap();
        for k in 0..6 {
            assert!((a.eigenvalues[k] - (1.0 - b.eigenvalues[5 - k])).abs() < 1e-8);
            // same filter up to sign
            let dot: f64 = a.filters.row(k).dot(&b.filters.row(5 - k));
            let na = a.filters.row(k).dot(&a.filters.row(k)).sqrt();
            let nb = b.filters.row(5 - k).dot(&b.filters.row(5 - k)).sqrt();
            assert!((dot.abs() / (na * nb) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn transform_shapes_and_identity() {
        let x = Array2::from_shape_fn((64, 128), |(i, j)| (i * 128 + j) as f64 * 1e-3);
        let rec = MultiChannelRecording::unnamed(x.clone(), 64.0).unwrap();
        let out = csp_transform(&CspModel::identity(64), &rec).unwrap();
        assert_eq!(out.data, x);
        assert_eq!(out.data.dim(), (64, 128));
        let bad = MultiChannelRecording::unnamed(Array2::zeros((3, 10)), 64.0).unwrap();
        assert!(matches!(csp_transform(&CspModel::identity(64), &bad), Err(CspError::Shape(_))));
    }

    #[test]
    fn component_variance_ratio_ordering() {
        let data = random_epochs(21, 6, 300, 30);
        let m = csp_fit(&views(&data), 6, 0.05).unwrap();
        // brute-force variance ratio of projected epochs per class
        let ratio = |k: usize| {
            let mut v = [0.0f64; 2];
            for (x, l) in &data {
                let y = m.filters.row(k).dot(x);
                let mean = y.mean().unwrap();
                v[*l as usize] += y.iter().map(|a| (a - mean).powi(2)).sum::<f64>();
            }
            v[0] / v[1]
        };
        assert!(ratio(0) >= ratio(5));
    }

    #[test]
    fn subset_keeps_extremes() {
        let data = random_epochs(4, 6, 200, 20);
        let full = csp_fit(&views(&data), 6, 0.05).unwrap();
        let sub = csp_fit(&views(&data), 2, 0.05).unwrap();
        assert!((sub.eigenvalues[0] - full.eigenvalues[0]).abs() < 1e-12);
        assert!((sub.eigenvalues[1] - full.eigenvalues[5]).abs() < 1e-12);
    }
}
