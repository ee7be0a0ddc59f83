//! Inverse problems: decay rates from coherence decays, a Gaussian spectrum
//! from rates (harmonic-comb fit) or directly from several coherence traces,
//! and hyperfine couplings from coherent modulations.

use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::{chi, chi_with_tol, comb_rate};
use crate::forward::trace_sequences;
use crate::lsq::{levenberg_marquardt, LsqOptions, LsqSolution, Scale};
use crate::model::units::{angular_to_khz, khz_to_angular};
use crate::model::{
    CoherenceTrace, EnvironmentModel, GaussianNsd, Manifold, Nsd, NuclearCoupling, RatePoint,
};
use crate::nuclei::{modulation_curve, modulation_product, PhaseConvention};

/// Smallest pulse count used for decay-rate fits by default.
pub const DEFAULT_N_MIN: usize = 8;

/// Records with W = 2P − 1 below this are left out of decay-rate fits.
pub const DEFAULT_COLLAPSE_FLOOR: f64 = 0.05;

/// Quadrature accuracy inside fits that integrate the filter.
const FIT_CHI_TOL: f64 = 1e-8;

/// Outcome of a fit: estimates, their covariance and the fit quality.
#[derive(Clone, Debug)]
pub struct FitResult<P> {
    pub params: P,
    /// Parameter names, in covariance order.
    pub names: Vec<&'static str>,
    /// Covariance scaled by max(1, χ²_ν), internal units. Rows and columns
    /// of parameters held fixed are zero.
    pub covariance: DMatrix<f64>,
    pub chi_nu: f64,
    pub n_points: usize,
    pub warnings: Vec<String>,
}

impl<P> FitResult<P> {
    pub fn error(&self, name: &str) -> Option<f64> {
        let i = self.names.iter().position(|n| *n == name)?;
        Some(self.covariance[(i, i)].max(0.0).sqrt())
    }
}

/// Functional form for W = 2P − 1 against total time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DecayModel {
    /// W = exp(−T/T2L).
    Pure,
    /// W = W0·exp(−T/T2L) with a free prefactor that absorbs the filter's
    /// low-frequency transient.
    #[default]
    Scaled,
}

#[derive(Clone, Copy, Debug)]
pub struct T2lOptions {
    pub n_min: usize,
    pub floor: f64,
    pub model: DecayModel,
}

impl Default for T2lOptions {
    fn default() -> Self {
        Self {
            n_min: DEFAULT_N_MIN,
            floor: DEFAULT_COLLAPSE_FLOOR,
            model: DecayModel::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct T2lFit {
    /// µs
    pub t2l: f64,
    pub t2l_err: f64,
    /// 1/T2L, 1/µs
    pub rate: f64,
    pub rate_err: f64,
    /// W0 (exactly 1 for [`DecayModel::Pure`]).
    pub amplitude: f64,
    pub chi_nu: f64,
    pub n_used: usize,
}

/// Weighted fit of W = 2P − 1 against total time at fixed spacing.
///
/// Uses records with n ≥ `n_min` and W ≥ `floor`; σ_W = 2σ_P.
pub fn fit_t2l(trace: &CoherenceTrace, opts: T2lOptions) -> Result<T2lFit> {
    let candidates: Vec<_> = trace.records.iter().filter(|r| r.n >= opts.n_min).collect();
    if !candidates.is_empty() && candidates.iter().all(|r| 2.0 * r.p - 1.0 <= 0.0) {
        return Err(Error::FullyCollapsed);
    }
    let used: Vec<(f64, f64, f64)> = candidates
        .iter()
        .map(|r| (r.total_time, 2.0 * r.p - 1.0, 2.0 * r.sigma_p))
        .filter(|(_, w, _)| *w >= opts.floor)
        .collect();
    if used.len() < 3 {
        return Err(Error::InsufficientData {
            needed: 3,
            available: used.len(),
        });
    }

    // Start from a weighted straight line through ln W.
    let (mut sw, mut st, mut sl, mut stt, mut stl) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(t, w, s) in &used {
        let wt = (w / s).powi(2);
        let l = w.ln();
        sw += wt;
        st += wt * t;
        sl += wt * l;
        stt += wt * t * t;
        stl += wt * t * l;
    }
    let det = sw * stt - st * st;
    let (slope, intercept) = if det > 0.0 {
        let b = (sw * stl - st * sl) / det;
        (b, (sl - b * st) / sw)
    } else {
        (-1.0 / used[0].0, 0.0)
    };
    let rate0 = (-slope).max(1e-9);

    let sol = match opts.model {
        DecayModel::Pure => levenberg_marquardt(
            |p| {
                Ok(used
                    .iter()
                    .map(|&(t, w, s)| ((-p[0] * t).exp() - w) / s)
                    .collect())
            },
            &[rate0],
            &[Scale::Linear],
            LsqOptions::default(),
        )?,
        DecayModel::Scaled => levenberg_marquardt(
            |p| {
                Ok(used
                    .iter()
                    .map(|&(t, w, s)| (p[1] * (-p[0] * t).exp() - w) / s)
                    .collect())
            },
            &[rate0, intercept.exp()],
            &[Scale::Linear, Scale::Linear],
            LsqOptions::default(),
        )?,
    };
    let errs = sol.scaled_errors()?;
    let rate = sol.params[0];
    if !(rate > 0.0) {
        return Err(Error::Unidentifiable(format!(
            "decay rate {rate:e} is not positive"
        )));
    }
    Ok(T2lFit {
        t2l: 1.0 / rate,
        t2l_err: errs[0] / (rate * rate),
        rate,
        rate_err: errs[0],
        amplitude: if opts.model == DecayModel::Scaled {
            sol.params[1]
        } else {
            1.0
        },
        chi_nu: sol.reduced_chi_squared(),
        n_used: used.len(),
    })
}

/// [`fit_t2l`] packaged as a point of a rate scan.
pub fn rate_point(
    trace: &CoherenceTrace,
    opts: T2lOptions,
    harmonic_hint: u32,
) -> Result<RatePoint> {
    let t1 = trace
        .t1
        .ok_or_else(|| Error::InvalidData("rate scans need fixed-spacing traces".into()))?;
    let fit = fit_t2l(trace, opts)?;
    RatePoint::new(PI / (2.0 * t1), fit.rate, fit.rate_err, harmonic_hint)
}

/// One planned spacing of a rate scan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanPoint {
    /// µs
    pub t1: f64,
    pub harmonic: u32,
}

/// Spacings t1 whose harmonic (2l+1)·π/(2t1) sweeps ν_L ± `window_khz`,
/// `points` values per requested harmonic l (the center alone for one point).
pub fn plan_scan(
    nu_l_khz: f64,
    harmonics: &[u32],
    window_khz: f64,
    points: usize,
) -> Result<Vec<ScanPoint>> {
    if harmonics.is_empty() {
        return Err(Error::param("harmonics", "needs at least one harmonic"));
    }
    if points == 0 {
        return Err(Error::param("points", "needs at least one point"));
    }
    if !(nu_l_khz > 0.0) || !(window_khz >= 0.0) || window_khz >= nu_l_khz {
        return Err(Error::param(
            "window_khz",
            "window must lie inside (0, ν_L)",
        ));
    }
    let mut plan = Vec::with_capacity(harmonics.len() * points);
    for &l in harmonics {
        for k in 0..points {
            let nu = if points == 1 {
                nu_l_khz
            } else {
                nu_l_khz - window_khz + 2.0 * window_khz * k as f64 / (points - 1) as f64
            };
            // (2l+1)·π/(2t1) = 2π·ν  →  t1 = (2l+1)/(4ν)
            let t1 = (2 * l + 1) as f64 / (4.0 * nu * 1e-3);
            plan.push(ScanPoint { t1, harmonic: l });
        }
    }
    Ok(plan)
}

const NSD_NAMES: [&str; 4] = ["y0", "A", "nu_L", "sigma"];

fn gaussian_from(p: &[f64], center: Option<f64>) -> Option<GaussianNsd> {
    let (y0, a, c, w) = match center {
        Some(c) => (p[0], p[1], c, p[2]),
        None => (p[0], p[1], p[2], p[3]),
    };
    GaussianNsd::new(y0, a, c, w).ok()
}

/// Spreads a fit covariance over the four spectrum parameters, leaving
/// zero rows for a fixed center.
fn embed_nsd_covariance(cov: &DMatrix<f64>, fixed_center: bool) -> DMatrix<f64> {
    if !fixed_center {
        return cov.clone();
    }
    let map = [0usize, 1, 3];
    let mut full = DMatrix::zeros(4, 4);
    for (i, &a) in map.iter().enumerate() {
        for (j, &b) in map.iter().enumerate() {
            full[(a, b)] = cov[(i, j)];
        }
    }
    full
}

/// Weighted fit of a Gaussian spectrum to 1/T2L points through the
/// harmonic comb with `l_max` odd harmonics.
///
/// y0, A and σ are fitted on a log scale; ν_L is free unless `fixed_nu_l_khz`
/// is given. When the data cannot resolve the peak shape (for example a flat
/// spectrum), the fit falls back to y0 and A at the best shape found and
/// says so in `warnings`.
pub fn reconstruct_nsd(
    points: &[RatePoint],
    l_max: usize,
    fixed_nu_l_khz: Option<f64>,
) -> Result<FitResult<GaussianNsd>> {
    if points.len() < 5 {
        return Err(Error::InsufficientData {
            needed: 5,
            available: points.len(),
        });
    }
    let fixed = fixed_nu_l_khz.map(khz_to_angular);
    let residuals = |p: &[f64]| -> Result<Vec<f64>> {
        let g = gaussian_from(p, fixed)
            .ok_or(Error::Unidentifiable("spectrum left valid range".into()))?;
        Ok(points
            .iter()
            .map(|pt| (comb_rate(&g, pt.omega, l_max) - pt.rate) / pt.rate_err)
            .collect())
    };

    let guess = initial_nsd_guess(points, fixed);
    let mut best: Option<LsqSolution> = None;
    for width_factor in [1.0, 0.5, 2.0] {
        let mut x0 = vec![guess.y0, guess.amplitude];
        if fixed.is_none() {
            x0.push(guess.center);
        }
        x0.push(guess.width * width_factor);
        let scales: Vec<Scale> = if fixed.is_none() {
            vec![Scale::Log, Scale::Log, Scale::Linear, Scale::Log]
        } else {
            vec![Scale::Log; 3]
        };
        match levenberg_marquardt(residuals, &x0, &scales, LsqOptions::default()) {
            Ok(sol) if best.as_ref().is_none_or(|b| sol.cost < b.cost) => best = Some(sol),
            Ok(_) => {}
            Err(e) if e.is_numerical() => {}
            Err(e) => return Err(e),
        }
    }
    let sol = best.ok_or(Error::NoConvergence {
        iterations: LsqOptions::default().max_iterations,
        cost: f64::NAN,
    })?;
    let g = gaussian_from(&sol.params, fixed).expect("fit stays in range");

    match sol.scaled_covariance() {
        Ok(cov) => Ok(FitResult {
            params: g,
            names: NSD_NAMES.to_vec(),
            covariance: embed_nsd_covariance(&cov, fixed.is_some()),
            chi_nu: sol.reduced_chi_squared(),
            n_points: points.len(),
            warnings: Vec::new(),
        }),
        Err(Error::RankDeficient(why)) => {
            reconstruct_floor_and_height(points, l_max, g, guess, why)
        }
        Err(e) => Err(e),
    }
}

/// Linear fit of (y0, A) with the peak shape held at `shape`, or at the
/// `fallback` shape if the fitted one has drifted off every point.
fn reconstruct_floor_and_height(
    points: &[RatePoint],
    l_max: usize,
    shape: GaussianNsd,
    fallback: GaussianNsd,
    why: String,
) -> Result<FitResult<GaussianNsd>> {
    let basis_for = |shape: GaussianNsd| -> Vec<(f64, f64)> {
        let unit_peak = GaussianNsd {
            y0: 0.0,
            amplitude: 1.0,
            ..shape
        };
        let flat = GaussianNsd {
            y0: 1.0,
            amplitude: 0.0,
            ..shape
        };
        points
            .iter()
            .map(|pt| {
                (
                    comb_rate(&flat, pt.omega, l_max),
                    comb_rate(&unit_peak, pt.omega, l_max),
                )
            })
            .collect()
    };
    let reach = |b: &[(f64, f64)]| b.iter().map(|(f, h)| h / f).fold(0.0, f64::max);
    let mut basis = basis_for(shape);
    let mut shape = shape;
    if reach(&basis) < 1e-6 {
        shape = fallback;
        basis = basis_for(shape);
    }
    let sol = levenberg_marquardt(
        |p| {
            Ok(points
                .iter()
                .zip(&basis)
                .map(|(pt, (f, h))| (p[0] * f + p[1] * h - pt.rate) / pt.rate_err)
                .collect())
        },
        &[shape.y0.max(1e-12), shape.amplitude],
        &[Scale::Linear, Scale::Linear],
        LsqOptions::default(),
    )?;
    let cov2 = sol.scaled_covariance()?;
    let mut cov = DMatrix::zeros(4, 4);
    for i in 0..2 {
        for j in 0..2 {
            cov[(i, j)] = cov2[(i, j)];
        }
    }
    let mut warnings = vec![format!(
        "peak shape not resolved ({why}); center and width held fixed"
    )];
    let amplitude = if sol.params[1] < 0.0 {
        warnings.push(format!(
            "fitted peak height {:e} clipped to zero",
            sol.params[1]
        ));
        0.0
    } else {
        sol.params[1]
    };
    Ok(FitResult {
        params: GaussianNsd {
            y0: sol.params[0].max(0.0),
            amplitude,
            ..shape
        },
        names: NSD_NAMES.to_vec(),
        covariance: cov,
        chi_nu: sol.reduced_chi_squared(),
        n_points: points.len(),
        warnings,
    })
}

/// Rough spectrum from rate points: each rate is read as S at the harmonic
/// the point was planned for.
fn initial_nsd_guess(points: &[RatePoint], fixed_center: Option<f64>) -> GaussianNsd {
    let scale = PI * PI / 8.0;
    let samples: Vec<(f64, f64)> = points
        .iter()
        .map(|p| {
            let m = (2 * p.harmonic_hint + 1) as f64;
            (m * p.omega, p.rate * scale * m * m)
        })
        .collect();
    let floor = points
        .iter()
        .map(|p| p.rate * scale)
        .fold(f64::INFINITY, f64::min)
        .max(1e-9);
    let (peak_w, peak_s) =
        samples
            .iter()
            .copied()
            .fold((samples[0].0, f64::NEG_INFINITY), |acc, s| {
                if s.1 > acc.1 {
                    s
                } else {
                    acc
                }
            });
    let center = fixed_center.unwrap_or(peak_w);
    let height = (peak_s - floor).max(floor);
    // Half width from the samples above half height.
    let above: Vec<f64> = samples
        .iter()
        .filter(|(_, s)| s - floor >= 0.5 * height)
        .map(|(w, _)| (w - center).abs())
        .collect();
    let spacing = samples
        .windows(2)
        .map(|w| (w[1].0 - w[0].0).abs())
        .filter(|d| *d > 0.0)
        .fold(f64::INFINITY, f64::min);
    let hwhm = above.iter().copied().fold(0.0, f64::max);
    let mut width = (hwhm / 1.1774).max(0.5 * spacing);
    if !(width.is_finite() && width > 0.0) {
        width = 0.01 * center;
    }
    GaussianNsd {
        y0: floor,
        amplitude: height,
        center,
        width,
    }
}

/// Envelope scan → initial ω∥ guesses, one per group of peaks.
///
/// The scan is median-smoothed over three points; local maxima above
/// `threshold` times the scan maximum are read as resonances
/// (2l+1)·ω = ω_L + m_s·ω∥/2 for the nearest odd harmonic, and estimates
/// that agree within 10 % (or 2π·5 kHz) are merged, keeping the strongest.
pub fn detect_nuclei(
    amp_points: &[(f64, f64)],
    threshold: f64,
    omega_l: f64,
    ms: Manifold,
) -> Vec<f64> {
    if amp_points.len() < 3 {
        return Vec::new();
    }
    let mut pts = amp_points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let smooth: Vec<f64> = (0..pts.len())
        .map(|i| {
            if i == 0 || i + 1 == pts.len() {
                return pts[i].1;
            }
            let mut w = [pts[i - 1].1, pts[i].1, pts[i + 1].1];
            w.sort_by(f64::total_cmp);
            w[1]
        })
        .collect();
    let top = smooth.iter().copied().fold(0.0, f64::max);
    if !(top > 0.0) {
        return Vec::new();
    }
    let mut peaks: Vec<(f64, f64)> = Vec::new();
    for i in 1..pts.len() - 1 {
        let (l, c, r) = (smooth[i - 1], smooth[i], smooth[i + 1]);
        if c >= l && c >= r && (c > l || c > r) && c >= threshold * top && c > 0.0 {
            let omega = pts[i].0;
            let harmonic = ((omega_l / omega - 1.0) / 2.0).round().max(0.0);
            let mean = (2.0 * harmonic + 1.0) * omega;
            peaks.push((2.0 * ms.sign() * (mean - omega_l), c));
        }
    }
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut groups: Vec<f64> = Vec::new();
    for (par, _) in peaks {
        let tol = (0.1 * par.abs()).max(khz_to_angular(5.0));
        if groups.iter().all(|g| (g - par).abs() > tol) {
            groups.push(par);
        }
    }
    groups
}

#[derive(Clone, Copy, Debug)]
pub struct CouplingOptions {
    pub convention: PhaseConvention,
    /// Half range (rad/µs) of the coarse ω∥ grid around the initial value;
    /// zero disables the grid search.
    pub par_span: f64,
}

impl Default for CouplingOptions {
    fn default() -> Self {
        Self {
            convention: PhaseConvention::Phi,
            par_span: khz_to_angular(150.0),
        }
    }
}

/// Refines one coupling from a fixed-spacing trace with even pulse counts:
/// P = ½(1 + e^{−χ(n)}·M(n; ω∥, ω⊥)), with χ from `env_bath`.
///
/// A coarse grid over ω∥ (and a log grid over ω⊥) seeds the local fit,
/// because M oscillates quickly in ω∥ at large n.
pub fn fit_coupling(
    trace: &CoherenceTrace,
    initial: NuclearCoupling,
    env_bath: &Nsd,
    omega_l: f64,
    ms: Manifold,
    opts: CouplingOptions,
) -> Result<FitResult<NuclearCoupling>> {
    let t1 = trace
        .t1
        .ok_or_else(|| Error::InvalidData("coupling fits need a fixed-spacing trace".into()))?;
    if !trace.family.is_equidistant() {
        return Err(Error::InvalidData(format!(
            "{} trace is not equidistant",
            trace.family
        )));
    }
    let records: Vec<_> = trace
        .records
        .iter()
        .filter(|r| r.n % 2 == 0)
        .copied()
        .collect();
    if records.len() < 3 {
        return Err(Error::InsufficientData {
            needed: 3,
            available: records.len(),
        });
    }
    let even = CoherenceTrace {
        records: records.clone(),
        ..trace.clone()
    };
    let decay: Vec<f64> = trace_sequences(&even)?
        .par_iter()
        .map(|s| chi(s, env_bath).map(|x| (-x).exp()))
        .collect::<Result<_>>()?;

    let model =
        |par: f64, perp: f64| -> Result<NuclearCoupling> { NuclearCoupling::new(par, perp) };
    let residuals = |p: &[f64]| -> Result<Vec<f64>> {
        let c =
            model(p[0], p[1]).map_err(|_| Error::Unidentifiable("ω⊥ left valid range".into()))?;
        Ok(records
            .iter()
            .zip(&decay)
            .map(|(r, d)| {
                let m = modulation_curve(r.n as f64, t1, &c, omega_l, ms, opts.convention);
                (0.5 * (1.0 + d * m) - r.p) / r.sigma_p
            })
            .collect())
    };
    let cost = |par: f64, perp: f64| -> f64 {
        residuals(&[par, perp])
            .map(|r| r.iter().map(|v| v * v).sum())
            .unwrap_or(f64::INFINITY)
    };

    let perp0 = initial.omega_perp.max(khz_to_angular(1.0));
    let mut start = (initial.omega_par, perp0, cost(initial.omega_par, perp0));
    if opts.par_span > 0.0 {
        let n_max = records.iter().map(|r| r.n).max().unwrap_or(2) as f64;
        let step = (0.25 / (n_max * t1)).min(opts.par_span / 20.0);
        let n_par = (2.0 * opts.par_span / step).ceil() as usize + 1;
        let perps: Vec<f64> = (0..=16)
            .map(|k| perp0 * 2f64.powf(-2.0 + 0.25 * k as f64))
            .collect();
        let grid: Vec<(f64, f64, f64)> = (0..n_par)
            .into_par_iter()
            .flat_map_iter(|i| {
                let par = initial.omega_par - opts.par_span + i as f64 * step;
                perps
                    .iter()
                    .map(move |&perp| (par, perp))
                    .collect::<Vec<_>>()
            })
            .map(|(par, perp)| (par, perp, cost(par, perp)))
            .collect();
        for g in grid {
            if g.2 < start.2 {
                start = g;
            }
        }
    }

    let sol = levenberg_marquardt(
        residuals,
        &[start.0, start.1],
        &[Scale::Linear, Scale::Log],
        LsqOptions::default(),
    )?;
    let fitted = model(sol.params[0], sol.params[1])?;

    // Modulation depth the fit attributes to this nucleus, against the noise.
    let depth = records
        .iter()
        .map(|r| {
            (1.0 - modulation_curve(r.n as f64, t1, &fitted, omega_l, ms, opts.convention)).abs()
        })
        .fold(0.0, f64::max);
    let noise = {
        let mut s: Vec<f64> = records.iter().map(|r| r.sigma_p).collect();
        s.sort_by(f64::total_cmp);
        s[s.len() / 2]
    };
    if depth < noise {
        return Err(Error::Unidentifiable(format!(
            "modulation depth {depth:.2e} is below the noise level {noise:.2e}"
        )));
    }
    let covariance = match sol.scaled_covariance() {
        Ok(c) => c,
        Err(Error::RankDeficient(why)) => return Err(Error::Unidentifiable(why)),
        Err(e) => return Err(e),
    };
    Ok(FitResult {
        params: fitted,
        names: vec!["omega_par", "omega_perp"],
        covariance,
        chi_nu: sol.reduced_chi_squared(),
        n_points: records.len(),
        warnings: Vec::new(),
    })
}

/// Solution, full parameter vector, free indices and notes of one start.
type PeakRun = (LsqSolution, [f64; 3], Vec<usize>, Vec<String>);

/// Simultaneous fit of (y0, A, σ) to several coherence traces through the
/// full forward model, with ν_L fixed and the nuclei of `template` held at
/// their values. `template.nsd` seeds the fit when it is Gaussian.
pub fn fit_nsd_direct(
    traces: &[CoherenceTrace],
    template: &EnvironmentModel,
    fixed_nu_l_khz: f64,
) -> Result<FitResult<GaussianNsd>> {
    if traces.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            available: traces.len(),
        });
    }
    let center = khz_to_angular(fixed_nu_l_khz);
    if !(center > 0.0) {
        return Err(Error::param("nu_l_khz", "must be > 0"));
    }
    let mut warnings = Vec::new();
    let first = &traces[0];
    if traces
        .iter()
        .all(|t| t.family == first.family && t.t1 == first.t1)
    {
        warnings.push(format!(
            "all traces share family {} and spacing; spectral leverage is limited",
            first.family
        ));
    }

    struct Row {
        seq: crate::sequences::PulseSequence,
        modulation: f64,
        p: f64,
        sigma: f64,
    }
    let mut rows = Vec::new();
    for t in traces {
        for (seq, r) in trace_sequences(t)?.into_iter().zip(&t.records) {
            let modulation =
                modulation_product(&seq, &template.nuclei, template.larmor(), template.ms);
            rows.push(Row {
                seq,
                modulation,
                p: r.p,
                sigma: r.sigma_p,
            });
        }
    }

    // χ = y0·T + A·G_σ(seq); only G depends nonlinearly on the parameters,
    // so recent G vectors are kept for derivative probes along y0 and A.
    let cache: Mutex<Vec<(f64, Arc<Vec<f64>>)>> = Mutex::new(Vec::new());
    let peak_response = |width: f64| -> Result<Arc<Vec<f64>>> {
        if let Some((_, g)) = cache
            .lock()
            .expect("cache lock")
            .iter()
            .find(|(w, _)| *w == width)
        {
            return Ok(g.clone());
        }
        if !(width <= 0.5 * center) {
            return Err(Error::Unidentifiable(format!(
                "width {width:e} beyond half the center frequency"
            )));
        }
        let unit = Nsd::Gaussian(
            GaussianNsd::new(0.0, 1.0, center, width)
                .map_err(|e| Error::Unidentifiable(e.to_string()))?,
        );
        let g: Vec<f64> = rows
            .par_iter()
            .map(|r| match chi_with_tol(&r.seq, &unit, FIT_CHI_TOL) {
                Err(Error::Quadrature { .. }) => chi_with_tol(&r.seq, &unit, 100.0 * FIT_CHI_TOL),
                other => other,
            })
            .collect::<Result<_>>()?;
        let g = Arc::new(g);
        let mut c = cache.lock().expect("cache lock");
        if c.len() >= 4 {
            c.remove(0);
        }
        c.push((width, g.clone()));
        Ok(g)
    };
    let model = |p: [f64; 3]| -> Result<Vec<f64>> {
        let g = if p[1] == 0.0 {
            Arc::new(vec![0.0; rows.len()])
        } else {
            peak_response(p[2])?
        };
        Ok(rows
            .iter()
            .zip(g.iter())
            .map(|(r, g)| {
                let x = p[0] * r.seq.total_time() + p[1] * g;
                (0.5 * (1.0 + (-x).exp() * r.modulation) - r.p) / r.sigma
            })
            .collect())
    };

    let seed = template.nsd.as_gaussian().copied().unwrap_or(GaussianNsd {
        y0: 1e-3,
        amplitude: 0.1,
        center,
        width: 0.01 * center,
    });
    let opts = LsqOptions {
        diff_step: 1e-4,
        ..Default::default()
    };
    // y0 and A sit on a log scale; one that runs off towards zero is pinned
    // there and the rest refitted.
    let run = |start: [f64; 3]| -> Result<PeakRun> {
        let mut notes = Vec::new();
        let width = start[2];
        let mut values = start;
        let mut free = vec![0usize, 1, 2];
        loop {
            let x0: Vec<f64> = free.iter().map(|&i| values[i]).collect();
            let fixed = values;
            let sol = levenberg_marquardt(
                |x| {
                    let mut p = fixed;
                    for (k, &i) in free.iter().enumerate() {
                        p[i] = x[k];
                    }
                    model(p)
                },
                &x0,
                &vec![Scale::Log; free.len()],
                opts,
            )?;
            let start = values;
            for (k, &i) in free.iter().enumerate() {
                values[i] = sol.params[k];
            }
            let collapsed: Vec<usize> = free
                .iter()
                .copied()
                .filter(|&i| i < 2 && values[i] < 1e-8 * start[i])
                .collect();
            if collapsed.is_empty() {
                return Ok((sol, values, free, notes));
            }
            for &i in &collapsed {
                values[i] = 0.0;
                notes.push(format!("{} fitted to zero and held there", NSD_NAMES[i]));
            }
            free.retain(|i| !collapsed.contains(i));
            if values[1] == 0.0 {
                free.retain(|&i| i != 2);
                values[2] = width;
                notes.push("no resolvable peak; width held at its starting value".into());
            }
            if free.is_empty() {
                return Err(Error::Unidentifiable("spectrum collapsed to zero".into()));
            }
        }
    };
    // The width enters nonlinearly and the cost has several basins: scan it
    // on a log grid with y0 and A refitted at each node, then refine the
    // best few nodes with all three free.
    let y0_start = seed.y0.max(1e-6);
    let area = seed.amplitude.max(1e-6) * seed.width;
    let mut widths: Vec<f64> = (0..16)
        .map(|k| center * 10f64.powf(-3.0 + k as f64 * (0.4f64.log10() + 3.0) / 15.0))
        .collect();
    widths.push(seed.width.min(0.4 * center));
    let mut nodes: Vec<(f64, [f64; 3])> = widths
        .iter()
        .filter_map(|&w| {
            let sol = levenberg_marquardt(
                |x| model([x[0], x[1], w]),
                &[y0_start, area / w],
                &[Scale::Linear; 2],
                opts,
            )
            .ok()?;
            // Signed values are allowed here; starts are clamped positive.
            Some((
                sol.cost,
                [
                    sol.params[0].max(1e-3 * y0_start),
                    sol.params[1].max(1e-3 * area / w),
                    w,
                ],
            ))
        })
        .collect();
    nodes.sort_by(|a, b| a.0.total_cmp(&b.0));
    if nodes.is_empty() {
        nodes.push((
            f64::INFINITY,
            [y0_start, seed.amplitude.max(1e-6), seed.width],
        ));
    }
    let mut best: Option<PeakRun> = None;
    let mut last_err = None;
    for (_, start) in nodes.into_iter().take(3) {
        match run(start) {
            Ok(r) if best.as_ref().is_none_or(|b| r.0.cost < b.0.cost) => best = Some(r),
            Ok(_) => {}
            Err(e) if e.is_numerical() => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    let Some((sol, values, free, notes)) = best else {
        return Err(last_err.expect("at least one start ran"));
    };
    warnings.extend(notes);
    let cov_free = sol.scaled_covariance()?;
    let mut cov = DMatrix::zeros(4, 4);
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            let (ii, jj) = (if i == 2 { 3 } else { i }, if j == 2 { 3 } else { j });
            cov[(ii, jj)] = cov_free[(a, b)];
        }
    }
    Ok(FitResult {
        params: GaussianNsd::new(values[0], values[1], center, values[2])?,
        names: NSD_NAMES.to_vec(),
        covariance: cov,
        chi_nu: sol.reduced_chi_squared(),
        n_points: rows.len(),
        warnings,
    })
}

/// Spectrum estimate and errors in boundary units (1/ms and kHz).
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NsdEstimate {
    pub y0: f64,
    pub y0_err: f64,
    pub a: f64,
    pub a_err: f64,
    pub nu_l_khz: f64,
    pub nu_l_err_khz: f64,
    pub sigma_khz: f64,
    pub sigma_err_khz: f64,
    pub chi_nu: f64,
    pub n_points: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl From<&FitResult<GaussianNsd>> for NsdEstimate {
    fn from(f: &FitResult<GaussianNsd>) -> Self {
        let e = |i: usize| f.covariance[(i, i)].max(0.0).sqrt();
        let g = &f.params;
        Self {
            y0: g.y0_per_ms(),
            y0_err: e(0) * 1e3,
            a: g.a_per_ms(),
            a_err: e(1) * 1e3,
            nu_l_khz: g.nu_l_khz(),
            nu_l_err_khz: angular_to_khz(e(2)),
            sigma_khz: g.sigma_khz(),
            sigma_err_khz: angular_to_khz(e(3)),
            chi_nu: f.chi_nu,
            n_points: f.n_points,
            warnings: f.warnings.clone(),
        }
    }
}

/// Coupling estimate and errors in kHz.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CouplingEstimate {
    pub omega_par_khz: f64,
    pub omega_par_err_khz: f64,
    pub omega_perp_khz: f64,
    pub omega_perp_err_khz: f64,
    pub chi_nu: f64,
    pub n_points: usize,
}

impl From<&FitResult<NuclearCoupling>> for CouplingEstimate {
    fn from(f: &FitResult<NuclearCoupling>) -> Self {
        let e = |i: usize| angular_to_khz(f.covariance[(i, i)].max(0.0).sqrt());
        Self {
            omega_par_khz: f.params.par_khz(),
            omega_par_err_khz: e(0),
            omega_perp_khz: f.params.perp_khz(),
            omega_perp_err_khz: e(1),
            chi_nu: f.chi_nu,
            n_points: f.n_points,
        }
    }
}

/// Rate points for a set of fixed-spacing traces tagged with the harmonic
/// each was planned for. Traces that cannot be fitted are returned with
/// their index and error instead.
pub fn rate_scan(
    traces: &[(CoherenceTrace, u32)],
    opts: T2lOptions,
) -> (Vec<RatePoint>, Vec<(usize, Error)>) {
    let results: Vec<Result<RatePoint>> = traces
        .par_iter()
        .map(|(t, l)| rate_point(t, opts, *l))
        .collect();
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(p) => points.push(p),
            Err(e) => skipped.push((i, e)),
        }
    }
    (points, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::decay_dataset;
    use crate::model::SequenceFamily;
    use crate::model::TraceRecord;
    use crate::nuclei::modulation_amplitude;
    use approx::assert_relative_eq;
    use std::f64::consts::TAU;

    fn trace_from(t1: f64, ns: &[usize], f: impl Fn(f64) -> f64, sigma: f64) -> CoherenceTrace {
        let records = ns
            .iter()
            .map(|&n| {
                let t = 2.0 * n as f64 * t1;
                TraceRecord {
                    n,
                    total_time: t,
                    p: f(t),
                    sigma_p: sigma,
                }
            })
            .collect();
        CoherenceTrace::new(SequenceFamily::Xy8, Some(t1), records).unwrap()
    }

    #[test]
    fn pure_exponential_recovered() {
        let t2 = 37.0;
        let tr = trace_from(
            0.4,
            &[8, 16, 24, 32, 48, 64],
            |t| 0.5 * (1.0 + (-t / t2).exp()),
            0.002,
        );
        for model in [DecayModel::Pure, DecayModel::Scaled] {
            let fit = fit_t2l(
                &tr,
                T2lOptions {
                    model,
                    ..Default::default()
                },
            )
            .unwrap();
            assert_relative_eq!(fit.t2l, t2, max_relative = 1e-6);
        }
    }

    #[test]
    fn t2l_estimate_ignores_uniform_error_scaling() {
        let tr = trace_from(
            0.4,
            &[8, 16, 24, 32, 48, 64],
            |t| 0.5 * (1.0 + 0.97 * (-t / 20.0).exp()),
            0.002,
        );
        let mut scaled = tr.clone();
        for r in &mut scaled.records {
            r.sigma_p *= 3.0;
        }
        let a = fit_t2l(&tr, T2lOptions::default()).unwrap();
        let b = fit_t2l(&scaled, T2lOptions::default()).unwrap();
        assert_relative_eq!(a.t2l, b.t2l, max_relative = 1e-9);
        assert_relative_eq!(b.t2l_err, 3.0 * a.t2l_err, max_relative = 1e-6);
    }

    #[test]
    fn t2l_failure_modes() {
        let dead = trace_from(0.4, &[8, 16, 24], |_| 0.49, 0.01);
        assert!(matches!(
            fit_t2l(&dead, T2lOptions::default()),
            Err(Error::FullyCollapsed)
        ));
        let short = trace_from(
            0.4,
            &[2, 4, 8, 16],
            |t| 0.5 * (1.0 + (-t / 9.0).exp()),
            0.01,
        );
        assert!(matches!(
            fit_t2l(&short, T2lOptions::default()),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn flat_spectrum_rate_is_floor() {
        let y0 = 5.0;
        let g = GaussianNsd::from_khz(y0, 0.0, 750.0, 9.0).unwrap();
        let env = EnvironmentModel::new(700.0, Nsd::Gaussian(g), vec![], Manifold::Minus).unwrap();
        let tr = decay_dataset(
            0.3,
            &[8, 16, 32, 64, 128],
            &env,
            SequenceFamily::Xy8,
            None,
            0,
        )
        .unwrap();
        let fit = fit_t2l(&tr, T2lOptions::default()).unwrap();
        assert!((fit.rate - y0 * 1e-3).abs() <= fit.rate_err.max(1e-9 * y0));
    }

    #[test]
    fn scan_plan_examples() {
        let p = plan_scan(750.0, &[0], 10.0, 1).unwrap();
        assert_relative_eq!(p[0].t1, 1.0 / 3.0, max_relative = 1e-12);
        let p = plan_scan(750.0, &[1], 10.0, 1).unwrap();
        assert_relative_eq!(p[0].t1, 1.0, max_relative = 1e-12);
        let p = plan_scan(679.9, &[1, 2], 40.0, 9).unwrap();
        assert_eq!(p.len(), 18);
        for sp in &p {
            let nu_h = (2 * sp.harmonic + 1) as f64 / (4.0 * sp.t1) * 1e3;
            assert!((nu_h - 679.9).abs() <= 40.0 + 1e-9);
            let probe = 1.0 / (4.0 * sp.t1) * 1e3;
            let expected = 679.9 / (2 * sp.harmonic + 1) as f64;
            assert!((probe - expected).abs() <= 40.0 / (2 * sp.harmonic + 1) as f64 + 1e-9);
        }
        assert!(plan_scan(750.0, &[], 10.0, 3).is_err());
    }

    fn comb_points(g: &GaussianNsd, harmonics: &[u32], l_max: usize) -> Vec<RatePoint> {
        plan_scan(g.nu_l_khz(), harmonics, 4.0 * g.sigma_khz(), 25)
            .unwrap()
            .into_iter()
            .map(|sp| {
                let w = PI / (2.0 * sp.t1);
                let r = comb_rate(g, w, l_max);
                RatePoint::new(w, r, 1e-3 * r, sp.harmonic).unwrap()
            })
            .collect()
    }

    #[test]
    fn exact_rates_give_exact_spectrum() {
        let g = GaussianNsd::from_khz(5.0, 600.0, 750.0, 9.0).unwrap();
        let fit = reconstruct_nsd(&comb_points(&g, &[1, 2], 2), 2, None).unwrap();
        assert_relative_eq!(fit.params.a_per_ms(), 600.0, max_relative = 1e-6);
        assert_relative_eq!(fit.params.nu_l_khz(), 750.0, max_relative = 1e-8);
        assert_relative_eq!(fit.params.sigma_khz(), 9.0, max_relative = 1e-6);
        assert_relative_eq!(fit.params.y0_per_ms(), 5.0, max_relative = 1e-5);
        assert!(fit.chi_nu < 1e-6);

        let fixed = reconstruct_nsd(&comb_points(&g, &[0], 0), 0, Some(750.0)).unwrap();
        assert_relative_eq!(fixed.params.sigma_khz(), 9.0, max_relative = 1e-6);
        assert_eq!(fixed.error("nu_L"), Some(0.0));
    }

    #[test]
    fn reconstruction_needs_points() {
        let g = GaussianNsd::from_khz(5.0, 600.0, 750.0, 9.0).unwrap();
        let pts = comb_points(&g, &[1], 2);
        assert!(matches!(
            reconstruct_nsd(&pts[..4], 2, None),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn flat_rates_report_unresolved_peak() {
        let g = GaussianNsd::from_khz(5.0, 0.0, 750.0, 9.0).unwrap();
        let fit = reconstruct_nsd(&comb_points(&g, &[1, 2], 2), 2, None).unwrap();
        let a_err = fit.error("A").unwrap();
        assert!(fit.params.amplitude <= 2.0 * a_err + 1e-12);
        assert_relative_eq!(fit.params.y0_per_ms(), 5.0, max_relative = 1e-3);
    }

    #[test]
    fn noisy_flat_scan_gives_peak_consistent_with_zero() {
        let g = GaussianNsd::from_khz(5.0, 0.0, 750.0, 9.0).unwrap();
        let env = EnvironmentModel::new(700.0, Nsd::Gaussian(g), vec![], Manifold::Minus).unwrap();
        let traces: Vec<_> = plan_scan(750.0, &[1, 2], 40.0, 17)
            .unwrap()
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let t = decay_dataset(
                    p.t1,
                    &[8, 16, 24, 32, 40, 48],
                    &env,
                    SequenceFamily::Xy8,
                    Some(0.005),
                    k as u64,
                )
                .unwrap();
                (t, p.harmonic)
            })
            .collect();
        let (points, _) = rate_scan(&traces, T2lOptions::default());
        let fit = reconstruct_nsd(&points, 2, None).unwrap();
        let a_err = fit.error("A").unwrap();
        assert!(a_err > 0.0);
        assert!(
            fit.params.amplitude <= 2.0 * a_err,
            "A {} +- {a_err}",
            fit.params.amplitude
        );
    }

    fn amplitude_scan(couplings: &[NuclearCoupling], wl: f64) -> Vec<(f64, f64)> {
        (0..6000)
            .map(|k| {
                let t1 = 0.15 + k as f64 * 0.0005;
                let amp = couplings
                    .iter()
                    .map(|c| modulation_amplitude(c, wl, t1, Manifold::Minus))
                    .fold(0.0, f64::max);
                (PI / (2.0 * t1), amp)
            })
            .collect()
    }

    #[test]
    fn single_nucleus_detected_near_truth() {
        let wl = TAU * 1.069 * 635.0 * 1e-3;
        let c = NuclearCoupling::from_khz(-698.0, 148.0).unwrap();
        let guesses = detect_nuclei(&amplitude_scan(&[c], wl), 0.3, wl, Manifold::Minus);
        assert!(!guesses.is_empty());
        let best = guesses
            .iter()
            .map(|g| ((g - c.omega_par) / c.omega_par).abs())
            .fold(f64::INFINITY, f64::min);
        assert!(best < 0.1, "guesses {guesses:?}");
    }

    #[test]
    fn three_nuclei_three_groups() {
        let wl = TAU * 1.069 * 635.0 * 1e-3;
        let cs: Vec<_> = [(-698.0, 148.0), (-73.0, 59.0), (-25.0, 42.0)]
            .iter()
            .map(|&(a, b)| NuclearCoupling::from_khz(a, b).unwrap())
            .collect();
        // Fundamental window only: higher harmonics of the strong nucleus
        // alias onto other couplings.
        let scan: Vec<(f64, f64)> = (0..5000)
            .map(|k| {
                let t1 = 0.2 + 0.25 * k as f64 / 5000.0;
                let amp = cs
                    .iter()
                    .map(|c| modulation_amplitude(c, wl, t1, Manifold::Minus))
                    .fold(0.0, f64::max);
                (PI / (2.0 * t1), amp)
            })
            .collect();
        let mut found = detect_nuclei(&scan, 0.1, wl, Manifold::Minus);
        assert_eq!(found.len(), 3, "{found:?}");
        found.sort_by(f64::total_cmp);
        for (g, c) in found.iter().zip([-698.0, -73.0, -25.0]) {
            assert!((angular_to_khz(*g) - c).abs() < 0.1 * c.abs(), "{found:?}");
        }
    }

    #[test]
    fn no_coupling_no_peaks() {
        let wl = TAU * 0.68;
        let c = NuclearCoupling::new(0.0, 0.0).unwrap();
        assert!(detect_nuclei(&amplitude_scan(&[c], wl), 0.1, wl, Manifold::Minus).is_empty());
    }

    #[test]
    fn coupling_fit_recovers_truth_without_noise() {
        let wl = TAU * 1.069 * 635.0 * 1e-3;
        let truth = NuclearCoupling::from_khz(-698.0, 148.0).unwrap();
        let bath = Nsd::Gaussian(GaussianNsd::from_khz(3.7, 380.0, 679.9, 8.5).unwrap());
        let env =
            EnvironmentModel::with_gamma(635.0, 1.069, bath.clone(), vec![truth], Manifold::Minus)
                .unwrap();
        let ns: Vec<usize> = (1..=50).map(|k| 2 * k).collect();
        let tr = decay_dataset(0.242, &ns, &env, SequenceFamily::Xy8, None, 0).unwrap();
        let start = NuclearCoupling::from_khz(-650.0, 120.0).unwrap();
        let fit = fit_coupling(
            &tr,
            start,
            &bath,
            wl,
            Manifold::Minus,
            CouplingOptions::default(),
        )
        .unwrap();
        assert!(
            (fit.params.par_khz() + 698.0).abs() < 0.5,
            "{:?}",
            fit.params
        );
        assert!((fit.params.perp_khz() - 148.0).abs() < 0.5);
    }

    #[test]
    fn coupling_without_transverse_part_is_unidentifiable() {
        let wl = TAU * 1.069 * 635.0 * 1e-3;
        let truth = NuclearCoupling::from_khz(-698.0, 0.0).unwrap();
        let bath = Nsd::Gaussian(GaussianNsd::from_khz(3.7, 380.0, 679.9, 8.5).unwrap());
        let env =
            EnvironmentModel::with_gamma(635.0, 1.069, bath.clone(), vec![truth], Manifold::Minus)
                .unwrap();
        let ns: Vec<usize> = (1..=30).map(|k| 2 * k).collect();
        let tr = decay_dataset(0.242, &ns, &env, SequenceFamily::Xy8, Some(0.02), 3).unwrap();
        let start = NuclearCoupling::from_khz(-698.0, 50.0).unwrap();
        let r = fit_coupling(
            &tr,
            start,
            &bath,
            wl,
            Manifold::Minus,
            CouplingOptions::default(),
        );
        assert!(matches!(r, Err(Error::Unidentifiable(_))), "{r:?}");
    }

    #[test]
    fn phase_conventions_fit_even_data_equally() {
        let wl = TAU * 1.069 * 635.0 * 1e-3;
        let truth = NuclearCoupling::from_khz(-698.0, 148.0).unwrap();
        let bath = Nsd::Gaussian(GaussianNsd::from_khz(3.7, 380.0, 679.9, 8.5).unwrap());
        let env =
            EnvironmentModel::with_gamma(635.0, 1.069, bath.clone(), vec![truth], Manifold::Minus)
                .unwrap();
        let ns: Vec<usize> = (1..=40).map(|k| 2 * k).collect();
        let tr = decay_dataset(0.242, &ns, &env, SequenceFamily::Xy8, Some(0.02), 8).unwrap();
        let fits: Vec<_> = [PhaseConvention::Phi, PhaseConvention::PhiPrime]
            .into_iter()
            .map(|convention| {
                fit_coupling(
                    &tr,
                    truth,
                    &bath,
                    wl,
                    Manifold::Minus,
                    CouplingOptions {
                        convention,
                        ..Default::default()
                    },
                )
                .unwrap()
            })
            .collect();
        assert_relative_eq!(fits[0].chi_nu, fits[1].chi_nu, max_relative = 1e-6);
        assert_relative_eq!(
            fits[0].params.omega_par,
            fits[1].params.omega_par,
            max_relative = 1e-6
        );
    }

    #[test]
    fn direct_fit_recovers_generating_spectrum() {
        let truth = GaussianNsd::from_khz(3.7, 380.0, 679.9, 8.5).unwrap();
        let env = EnvironmentModel::with_gamma(
            635.0,
            1.069,
            Nsd::Gaussian(truth),
            vec![],
            Manifold::Minus,
        )
        .unwrap();
        let t_l = PI / (2.0 * truth.center);
        let near = decay_dataset(
            t_l * 1.01,
            &[4, 8, 12, 16, 24, 32],
            &env,
            SequenceFamily::Xy8,
            None,
            0,
        )
        .unwrap();
        let far = decay_dataset(
            3.0 * t_l * 0.995,
            &[8, 16, 24, 32, 40, 48],
            &env,
            SequenceFamily::Xy8,
            None,
            0,
        )
        .unwrap();
        let mut start = env.clone();
        start.nsd = Nsd::Gaussian(GaussianNsd::from_khz(3.0, 300.0, 679.9, 11.0).unwrap());
        let fit = fit_nsd_direct(&[near, far], &start, 679.9).unwrap();
        assert_relative_eq!(fit.params.a_per_ms(), 380.0, max_relative = 1e-4);
        assert_relative_eq!(fit.params.sigma_khz(), 8.5, max_relative = 1e-4);
        assert!(fit.warnings.is_empty());
    }
}
