//! Polyphase rational resampling with a Kaiser-windowed sinc anti-alias filter.

use std::f64::consts::PI;

use super::{Result, Signal, SigprocError};

const KAISER_BETA: f64 = 5.0;
const HALF_LEN_PER_RATE: usize = 10;
const MAX_RATIO_TERM: u64 = 1 << 20;

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Reduced `(up, down)` such that `fs_out / fs_in = up / down`, using
/// millihertz resolution.
pub fn rational_ratio(fs_in: f64, fs_out: f64) -> Result<(usize, usize)> {
    if !(fs_out > 0.0 && fs_out.is_finite()) {
        return Err(SigprocError::InvalidArgument(format!("output rate {fs_out} must be positive")));
    }
    if !(fs_in > 0.0 && fs_in.is_finite()) {
        return Err(SigprocError::InvalidArgument(format!("input rate {fs_in} must be positive")));
    }
    let a = (fs_in * 1000.0).round() as u64;
    let b = (fs_out * 1000.0).round() as u64;
    if a == 0 || b == 0 {
        return Err(SigprocError::InvalidArgument("rates below 1 mHz are not supported".into()));
    }
    let g = gcd(a, b);
    let (up, down) = (b / g, a / g);
    if up > MAX_RATIO_TERM || down > MAX_RATIO_TERM {
        return Err(SigprocError::InvalidArgument(format!(
            "rate ratio {fs_out}/{fs_in} reduces to {up}/{down}, too fine for polyphase resampling"
        )));
    }
    Ok((up as usize, down as usize))
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Lowpass taps at cutoff `1/max(up, down)` of the upsampled Nyquist rate,
/// scaled to a DC gain of `up`.
fn design_taps(up: usize, down: usize) -> Vec<f64> {
    let max_rate = up.max(down) as f64;
    let half = HALF_LEN_PER_RATE * up.max(down);
    let n = 2 * half + 1;
    let i0_beta = bessel_i0(KAISER_BETA);
    let mut taps: Vec<f64> = (0..n)
        .map(|k| {
            let m = k as f64 - half as f64;
            let r = m / half as f64;
            let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
            sinc(m / max_rate) * w
        })
        .collect();
    let s: f64 = taps.iter().sum();
    for t in taps.iter_mut() {
        *t *= up as f64 / s;
    }
    taps
}

/// Resample one channel by `up/down`, producing `round(n * up / down)` samples.
pub fn resample_slice(x: &[f64], up: usize, down: usize) -> Vec<f64> {
    if up == down {
        return x.to_vec();
    }
    let taps = design_taps(up, down);
    let half = (taps.len() - 1) / 2;
    let n = x.len();
    let n_out = ((n * up) as f64 / down as f64).round() as usize;
    let mut y = Vec::with_capacity(n_out);
    for m in 0..n_out {
        // y[m] = sum_k h[k] * u[m*down + half - k], u the zero-stuffed input
        let center = m * down + half;
        let mut k = center % up;
        let mut acc = 0.0;
        // u index j = center - k must map to x[(center - k)/up] < n
        let j_max = (n - 1) * up;
        if center > j_max {
            let skip = (center - j_max).div_ceil(up);
            k += skip * up;
        }
        while k < taps.len() && k <= center {
            acc += taps[k] * x[(center - k) / up];
            k += up;
        }
        y.push(acc);
    }
    y
}

/// Resample every channel of `x` to `fs_out`. The anti-alias lowpass is built
/// into the polyphase filter.
pub fn resample<S: Signal>(x: &S, fs_out: f64) -> Result<S> {
    let (up, down) = rational_ratio(x.sample_rate(), fs_out)?;
    if up == down {
        return x.map_channels(x.sample_rate(), |ch| ch.to_vec());
    }
    x.map_channels(fs_out, |ch| resample_slice(ch, up, down))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sigproc::Waveform;

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma).powi(2);
            sbb += (y - mb).powi(2);
        }
        sab / (saa * sbb).sqrt()
    }

    #[test]
    fn length_arithmetic() {
        let w = Waveform::new(vec![0.5; 5120], 512.0).unwrap();
        let out = resample(&w, 64.0).unwrap();
        assert_eq!(out.samples.len(), 640);
        assert_eq!(out.fs, 64.0);
        let odd = Waveform::new(vec![0.0; 1001], 512.0).unwrap();
        assert_eq!(resample(&odd, 64.0).unwrap().samples.len(), 125);
    }

    #[test]
    fn same_rate_is_identity() {
        let x: Vec<f64> = (0..300).map(|i| (i as f64 * 0.37).sin()).collect();
        let w = Waveform::new(x.clone(), 64.0).unwrap();
        let out = resample(&w, 64.0).unwrap();
        for (a, b) in out.samples.iter().zip(&x) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_nonpositive_rate() {
        let w = Waveform::new(vec![0.0; 8], 64.0).unwrap();
        assert!(matches!(resample(&w, 0.0), Err(SigprocError::InvalidArgument(_))));
        assert!(matches!(resample(&w, -3.0), Err(SigprocError::InvalidArgument(_))));
    }

    #[test]
    fn ratio_reduction() {
        assert_eq!(rational_ratio(512.0, 64.0).unwrap(), (1, 8));
        assert_eq!(rational_ratio(44100.0, 64.0).unwrap(), (16, 11025));
        assert_eq!(rational_ratio(64.0, 512.0).unwrap(), (8, 1));
    }

    #[test]
    fn downsampled_tone_matches_analytic_samples() {
        let x: Vec<f64> = (0..5120).map(|t| (2.0 * PI * 4.0 * t as f64 / 512.0).sin()).collect();
        let out = resample(&Waveform::new(x, 512.0).unwrap(), 64.0).unwrap();
        let truth: Vec<f64> = (0..640).map(|t| (2.0 * PI * 4.0 * t as f64 / 64.0).sin()).collect();
        let c = corr(&out.samples[32..608], &truth[32..608]);
        assert!(c > 0.999, "{c}");
    }

    #[test]
    fn round_trip_keeps_in_band_tone() {
        let x: Vec<f64> = (0..2048).map(|t| (2.0 * PI * 3.0 * t as f64 / 256.0).cos()).collect();
        let w = Waveform::new(x.clone(), 256.0).unwrap();
        let down = resample(&w, 64.0).unwrap();
        let back = resample(&down, 256.0).unwrap();
        assert_eq!(back.samples.len(), 2048);
        let c = corr(&back.samples[256..1792], &x[256..1792]);
        assert!(c > 0.999, "{c}");
    }

    #[test]
    fn taps_have_requested_dc_gain() {
        let t = design_taps(3, 2);
        assert!((t.iter().sum::<f64>() - 3.0).abs() < 1e-12);
        assert_eq!(t.len(), 2 * 30 + 1);
    }
}
