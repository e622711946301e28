//! Butterworth design in second-order sections and zero-phase filtering.

use num_complex::Complex64;
use std::f64::consts::PI;

use super::{Result, Signal, SigprocError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    Bandpass,
    Lowpass,
}

/// Butterworth filter request. For [`FilterKind::Lowpass`] only `high_hz` is
/// used as the cutoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub low_hz: f64,
    pub high_hz: f64,
    pub order: usize,
}

impl FilterSpec {
    pub fn bandpass(low_hz: f64, high_hz: f64, order: usize) -> Self {
        Self { kind: FilterKind::Bandpass, low_hz, high_hz, order }
    }

    pub fn lowpass(cutoff_hz: f64, order: usize) -> Self {
        Self { kind: FilterKind::Lowpass, low_hz: 0.0, high_hz: cutoff_hz, order }
    }

    pub fn validate(&self, fs: f64) -> Result<()> {
        let nyquist = fs / 2.0;
        if self.order == 0 {
            return Err(SigprocError::InvalidSpec("order must be at least 1".into()));
        }
        match self.kind {
            FilterKind::Bandpass => {
                if !(self.low_hz > 0.0 && self.low_hz < self.high_hz && self.high_hz < nyquist) {
                    return Err(SigprocError::InvalidSpec(format!(
                        "band {}-{} Hz not inside (0, {nyquist}) Hz",
                        self.low_hz, self.high_hz
                    )));
                }
            }
            FilterKind::Lowpass => {
                if !(self.high_hz > 0.0 && self.high_hz < nyquist) {
                    return Err(SigprocError::InvalidSpec(format!(
                        "cutoff {} Hz not inside (0, {nyquist}) Hz",
                        self.high_hz
                    )));
                }
            }
        }
        Ok(())
    }

    /// Order of the resulting digital filter (bandpass doubles the prototype).
    pub fn effective_order(&self) -> usize {
        match self.kind {
            FilterKind::Bandpass => 2 * self.order,
            FilterKind::Lowpass => self.order,
        }
    }
}

/// One second-order section, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, z: Complex64) -> Complex64 {
        let zi = z.inv();
        let num = self.b[0] + self.b[1] * zi + self.b[2] * zi * zi;
        let den = self.a[0] + self.a[1] * zi + self.a[2] * zi * zi;
        num / den
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2])
    }

    /// Transposed direct-form II state for a unit step already in steady state.
    fn step_state(&self) -> [f64; 2] {
        let y = self.dc_gain();
        let z2 = self.b[2] - self.a[2] * y;
        let z1 = y - self.b[0];
        [z1, z2]
    }
}

/// Cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct SosFilter {
    pub sections: Vec<Biquad>,
    order: usize,
}

impl SosFilter {
    /// Digital Butterworth design via the bilinear transform.
    pub fn butterworth(spec: &FilterSpec, fs: f64) -> Result<Self> {
        spec.validate(fs)?;
        let n = spec.order;
        // analog prototype poles on the unit circle, left half-plane
        let proto: Vec<Complex64> = (0..n)
            .map(|k| {
                let m = -(n as f64) + 1.0 + 2.0 * k as f64;
                -Complex64::from_polar(1.0, PI * m / (2.0 * n as f64))
            })
            .collect();
        // prewarp with the bilinear constant 2*fs
        let fs2 = 2.0 * fs;
        let warp = |hz: f64| fs2 * (PI * hz / fs).tan();

        let (analog_poles, n_zeros_at_origin, ref_omega) = match spec.kind {
            FilterKind::Lowpass => {
                let wc = warp(spec.high_hz);
                (proto.iter().map(|p| p * wc).collect::<Vec<_>>(), 0usize, 0.0)
            }
            FilterKind::Bandpass => {
                let w1 = warp(spec.low_hz);
                let w2 = warp(spec.high_hz);
                let bw = w2 - w1;
                let w0 = (w1 * w2).sqrt();
                let mut poles = Vec::with_capacity(2 * n);
                for p in &proto {
                    let half = p * (bw / 2.0);
                    let disc = (half * half - w0 * w0).sqrt();
                    poles.push(half + disc);
                    poles.push(half - disc);
                }
                (poles, n, 2.0 * (w0 / fs2).atan())
            }
        };

        let digital: Vec<Complex64> = analog_poles.iter().map(|p| (fs2 + p) / (fs2 - p)).collect();

        let tol = 1e-10;
        let mut complex: Vec<Complex64> = digital.iter().copied().filter(|p| p.im > tol).collect();
        let mut real: Vec<f64> = digital.iter().filter(|p| p.im.abs() <= tol).map(|p| p.re).collect();
        complex.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
        real.sort_by(|a, b| a.abs().total_cmp(&b.abs()));

        let mut pole_pairs: Vec<[f64; 3]> = complex.iter().map(|p| [1.0, -2.0 * p.re, p.norm_sqr()]).collect();
        let mut single = None;
        for chunk in real.chunks(2) {
            match chunk {
                [r1, r2] => pole_pairs.push([1.0, -(r1 + r2), r1 * r2]),
                [r] => single = Some(*r),
                _ => unreachable!(),
            }
        }

        // zeros: s = 0 maps to z = 1 and s = inf maps to z = -1; a bandpass
        // has one of each per section, a lowpass two at z = -1
        let pair_zeros = if n_zeros_at_origin > 0 { [1.0, 0.0, -1.0] } else { [1.0, 2.0, 1.0] };
        let mut sections: Vec<Biquad> = pole_pairs.into_iter().map(|a| Biquad { b: pair_zeros, a }).collect();
        if let Some(r) = single {
            sections.push(Biquad { b: [1.0, 1.0, 0.0], a: [1.0, -r, 0.0] });
        }

        let mut filter = SosFilter { sections, order: spec.effective_order() };
        let g = filter.response(ref_omega).norm();
        if g > 0.0 {
            for c in filter.sections[0].b.iter_mut() {
                *c /= g;
            }
        }
        Ok(filter)
    }

    /// Complex response at normalized angular frequency `omega` (rad/sample).
    pub fn response(&self, omega: f64) -> Complex64 {
        let z = Complex64::from_polar(1.0, omega);
        self.sections.iter().fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z))
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Steady-state initial conditions for a unit step input.
    fn step_state(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let st = s.step_state();
                let out = [st[0] * scale, st[1] * scale];
                scale *= s.dc_gain();
                out
            })
            .collect()
    }

    /// Causal filtering with optional initial state per section.
    pub fn filter(&self, x: &[f64], init: Option<&[[f64; 2]]>) -> Vec<f64> {
        let mut y = x.to_vec();
        for (k, s) in self.sections.iter().enumerate() {
            let [mut z1, mut z2] = init.map_or([0.0, 0.0], |zi| zi[k]);
            for v in y.iter_mut() {
                let xin = *v;
                let out = s.b[0] * xin + z1;
                z1 = s.b[1] * xin - s.a[1] * out + z2;
                z2 = s.b[2] * xin - s.a[2] * out;
                *v = out;
            }
        }
        y
    }

    /// Forward-backward filtering with odd reflection padding of three times
    /// the filter order and steady-state initial conditions.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = (3 * self.order).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        for i in (1..=pad).rev() {
            ext.push(2.0 * x[0] - x[i]);
        }
        ext.extend_from_slice(x);
        for i in 1..=pad {
            ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
        }
        let zi = self.step_state();
        let scaled = |x0: f64| zi.iter().map(|z| [z[0] * x0, z[1] * x0]).collect::<Vec<_>>();
        let fwd = self.filter(&ext, Some(&scaled(ext[0])));
        let mut rev: Vec<f64> = fwd.into_iter().rev().collect();
        rev = self.filter(&rev, Some(&scaled(rev[0])));
        rev.reverse();
        rev[pad..pad + n].to_vec()
    }
}

/// Zero-phase Butterworth filtering of every channel of `x`.
pub fn bandpass_filter<S: Signal>(x: &S, spec: &FilterSpec) -> Result<S> {
    let filt = SosFilter::butterworth(spec, x.sample_rate())?;
    x.map_channels(x.sample_rate(), |ch| filt.filtfilt(ch))
}
