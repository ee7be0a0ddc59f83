//! Filter function of a pulse pattern and the dephasing functional χ.
//!
//! With switching times t_0 = 0 < t_1 < .. < t_n < t_{n+1} = T and sign
//! (−1)^k on interval k,
//!
//!   Y(ω) = Σ_k (−1)^k (e^{iωt_{k+1}} − e^{iωt_k}),
//!   χ    = (1/π) ∫_0^∞ S(ω) |Y(ω)|² / ω² dω.
//!
//! This normalization gives (1/π)∫|Y|²/ω² dω = T for every sequence, so a
//! flat spectrum S ≡ c contributes exactly c·T. [`chi`] uses that to split
//! off the baseline of the spectrum and integrates only the remainder, whose
//! support is bounded.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::{Nsd, Spectrum};
use crate::quad::{integrate, QuadOptions};
use crate::sequences::PulseSequence;

/// Below this ω·T the filter is evaluated from its Taylor series.
const SERIES_THRESHOLD: f64 = 1e-4;

/// Relative accuracy requested from the χ quadrature.
pub const CHI_REL_TOL: f64 = 1e-6;

/// Default number of odd harmonics beyond the fundamental in comb sums.
pub const DEFAULT_L_MAX: usize = 2;

/// Complex filter amplitude Y(ω).
pub fn filter_y(seq: &PulseSequence, omega: f64) -> Complex64 {
    let total = seq.total_time();
    if (omega * total).abs() < SERIES_THRESHOLD {
        return filter_y_series(seq, omega);
    }
    if let (true, Some(t1)) = (seq.family().is_equidistant(), seq.params().t1) {
        return filter_y_equidistant(seq.n_pulses(), t1, omega);
    }
    // Y = −1 + 2 Σ_j (−1)^{j−1} e^{iωt_j} + (−1)^n e^{iωT}
    let mut acc = Complex64::new(0.0, 0.0);
    let mut sign = 1.0;
    for &t in seq.pulse_times() {
        acc += sign * Complex64::cis(omega * t);
        sign = -sign;
    }
    Complex64::new(-1.0, 0.0) + 2.0 * acc + sign * Complex64::cis(omega * total)
}

/// Pulses at (2j−1)·t1: the alternating sum is geometric with ratio
/// z = −e^{2iωt1} and collapses to a Dirichlet kernel.
fn filter_y_equidistant(n: usize, t1: f64, omega: f64) -> Complex64 {
    let theta = 2.0 * omega * t1 + PI;
    let half = 0.5 * theta;
    let nf = n as f64;
    let s = half.sin();
    // sin(nθ/2)/sin(θ/2), continuous through θ = 2πm
    let ratio = if s.abs() < 1e-9 {
        nf * (nf * half).cos() / half.cos()
    } else {
        (nf * half).sin() / s
    };
    let geometric = Complex64::cis(omega * t1 + (nf - 1.0) * half) * ratio;
    let sign = if n.is_multiple_of(2) { 1.0 } else { -1.0 };
    Complex64::new(-1.0, 0.0) + 2.0 * geometric + sign * Complex64::cis(omega * 2.0 * nf * t1)
}

/// Third-order expansion of e^{iωt} in every term.
fn filter_y_series(seq: &PulseSequence, omega: f64) -> Complex64 {
    let b = seq.boundaries();
    let (mut d1, mut d2, mut d3) = (0.0, 0.0, 0.0);
    let mut sign = 1.0;
    for w in b.windows(2) {
        let (a, c) = (w[0], w[1]);
        d1 += sign * (c - a);
        d2 += sign * (c * c - a * a);
        d3 += sign * (c * c * c - a * a * a);
        sign = -sign;
    }
    let w2 = omega * omega;
    Complex64::new(-0.5 * w2 * d2, omega * d1 - w2 * omega * d3 / 6.0)
}

/// |Y(ω)|², dimensionless and ≥ 0.
pub fn filter_y_squared(seq: &PulseSequence, omega: f64) -> f64 {
    filter_y(seq, omega).norm_sqr()
}

/// |Y(ω)|²/ω², the weight S is integrated against. Finite as ω → 0.
pub fn filter_weight(seq: &PulseSequence, omega: f64) -> f64 {
    if omega * seq.total_time() < SERIES_THRESHOLD {
        // Leading terms of Y/ω, so the division stays exact.
        let y = filter_y_series(seq, omega);
        return if omega == 0.0 {
            let d1: f64 = seq
                .free_intervals()
                .iter()
                .enumerate()
                .map(|(k, d)| if k % 2 == 0 { *d } else { -*d })
                .sum();
            d1 * d1
        } else {
            (y / omega).norm_sqr()
        };
    }
    filter_y_squared(seq, omega) / (omega * omega)
}

/// Breakpoints that resolve the filter over [lo, hi]: roughly two per
/// oscillation of |Y|², plus the harmonic lobes of equidistant patterns and
/// any extra points supplied by the caller.
fn breakpoints(seq: &PulseSequence, lo: f64, hi: f64, extra: &[f64]) -> Vec<f64> {
    const MAX_UNIFORM: usize = 20_000;
    let total = seq.total_time();
    let step = (PI / total).max((hi - lo) / MAX_UNIFORM as f64);
    let mut pts = vec![lo, hi];
    let first = (lo / step).ceil() as usize;
    let last = (hi / step).floor() as usize;
    pts.extend((first..=last).map(|k| k as f64 * step));
    if let (true, Some(t1)) = (seq.family().is_equidistant(), seq.params().t1) {
        let base = PI / (2.0 * t1);
        let mut m = 1.0;
        while m * base <= hi && m < 2.0 * MAX_UNIFORM as f64 {
            let w = m * base;
            if w >= lo {
                pts.push(w);
            }
            m += 2.0;
        }
    }
    pts.extend(extra.iter().copied().filter(|w| *w > lo && *w < hi));
    pts.sort_by(f64::total_cmp);
    pts.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1e-300));
    pts
}

/// Coherence functional χ = (1/π)∫ S|Y|²/ω² dω, always ≥ 0.
///
/// Errors with [`Error::Quadrature`] if the adaptive rule cannot reach the
/// requested relative accuracy.
pub fn chi(seq: &PulseSequence, nsd: &Nsd) -> Result<f64> {
    chi_with_tol(seq, nsd, CHI_REL_TOL)
}

/// [`chi`] at a caller-chosen relative accuracy. Fits use a tighter value so
/// that finite-difference derivatives are not swamped by quadrature noise.
pub fn chi_with_tol(seq: &PulseSequence, nsd: &Nsd, rel_tol: f64) -> Result<f64> {
    let baseline = nsd.baseline();
    let mut value = baseline * seq.total_time();
    if let Some((lo, hi)) = nsd.excess_support() {
        let pts = breakpoints(seq, lo, hi, &nsd.features());
        let opts = QuadOptions {
            rel_tol,
            abs_tol: (rel_tol * PI * value).max(1e-300),
            max_intervals: pts.len() + 200_000,
        };
        let r = integrate(
            |w| (nsd.eval(w) - baseline) * filter_weight(seq, w),
            &pts,
            opts,
        );
        let excess = r.value / PI;
        value += excess;
        if !r.converged {
            let achieved = r.abs_err / PI / value.abs().max(1e-300);
            return Err(Error::Quadrature {
                achieved,
                requested: rel_tol,
            });
        }
    }
    Ok(value.max(0.0))
}

/// Harmonic-comb decay rate (8/π²) Σ_{l=0}^{l_max} S((2l+1)ω)/(2l+1)².
pub fn comb_rate<S: Spectrum + ?Sized>(nsd: &S, omega: f64, l_max: usize) -> f64 {
    let sum: f64 = (0..=l_max)
        .map(|l| {
            let m = (2 * l + 1) as f64;
            nsd.eval(m * omega) / (m * m)
        })
        .sum();
    8.0 / (PI * PI) * sum
}

/// (1/π)∫_0^W |Y|²/ω² dω by quadrature, for normalization checks.
pub fn weight_integral(seq: &PulseSequence, omega_max: f64) -> f64 {
    let pts = breakpoints(seq, 0.0, omega_max, &[]);
    let r = integrate(
        |w| filter_weight(seq, w),
        &pts,
        QuadOptions {
            rel_tol: 1e-9,
            abs_tol: 0.0,
            max_intervals: pts.len() + 100_000,
        },
    );
    r.value / PI
}

/// Closed-form tail (1/π)∫_W^∞ |Y|²/ω² dω ≈ Σ|c_j|²/(πW) for W far above
/// every filter feature, where Σ|c_j|² = 2 + 4n is the mean of |Y|².
pub fn weight_tail(seq: &PulseSequence, omega_max: f64) -> f64 {
    (2.0 + 4.0 * seq.n_pulses() as f64) / (PI * omega_max)
}
