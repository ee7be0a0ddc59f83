//! One function per subcommand. Each validates and computes everything in
//! memory and returns the files to write.

use std::f64::consts::PI;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use ddspec_core::evaluate::{chi_nu_squared, regime_report, RegimeReport};
use ddspec_core::filter::{chi, filter_weight, filter_y_squared};
use ddspec_core::forward::{decay_dataset, predict_trace, sequence_dataset};
use ddspec_core::model::units::{angular_to_khz, khz_to_angular};
use ddspec_core::model::{
    probe_omega, CoherenceTrace, EnvironmentModel, GaussianNsd, Manifold, Nsd, NuclearCoupling,
    RatePoint, SequenceFamily, DEFAULT_GAMMA_C_KHZ_PER_G,
};
use ddspec_core::nuclei::PhaseConvention;
use ddspec_core::oracle::{cpmg_cycles, exact_coherence, magnus_cpmg, oracle_dataset, SpinBath};
use ddspec_core::spectroscopy::{
    fit_coupling, fit_nsd_direct, plan_scan, rate_scan, reconstruct_nsd, CouplingEstimate,
    CouplingOptions, FitResult, NsdEstimate, T2lOptions,
};
use ddspec_core::Error as CoreError;

use crate::config::*;
use crate::output::{Outputs, Provenance};

/// Seed of the k-th dataset of the i-th experiment.
fn derive_seed(seed: u64, i: usize, k: usize) -> u64 {
    seed.wrapping_add(((i as u64) << 32) | k as u64)
}

fn num(x: f64) -> String {
    format!("{x}")
}

pub fn simulate(cfg: &SimulateConfig) -> Result<Vec<CoherenceTrace>> {
    if cfg.experiments.is_empty() {
        return Err(schema("`experiments` is empty"));
    }
    let mut traces = Vec::new();
    for (i, exp) in cfg.experiments.iter().enumerate() {
        let label = || format!("experiment {i}");
        match exp {
            Experiment::Decay { family, t1_us, n } => {
                traces.push(
                    decay_dataset(
                        *t1_us,
                        n,
                        &cfg.model,
                        *family,
                        cfg.shot_sigma,
                        derive_seed(cfg.seed, i, 0),
                    )
                    .with_context(label)?,
                );
            }
            Experiment::Sweep { family, n, t1_us } => {
                let batch: Vec<_> = t1_us
                    .par_iter()
                    .enumerate()
                    .map(|(k, &t1)| {
                        decay_dataset(
                            t1,
                            &[*n],
                            &cfg.model,
                            *family,
                            cfg.shot_sigma,
                            derive_seed(cfg.seed, i, k),
                        )
                    })
                    .collect::<Result<_, _>>()
                    .with_context(label)?;
                traces.extend(batch);
            }
            Experiment::Sequences { specs } => {
                let seqs = specs
                    .iter()
                    .map(|s| s.build())
                    .collect::<Result<Vec<_>, _>>()
                    .with_context(label)?;
                traces.push(
                    sequence_dataset(
                        &seqs,
                        &cfg.model,
                        cfg.shot_sigma,
                        derive_seed(cfg.seed, i, 0),
                    )
                    .with_context(label)?,
                );
            }
        }
    }
    Ok(traces)
}

#[derive(Serialize)]
struct FilterSummary {
    n_pulses: usize,
    total_time_us: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    chi: Option<f64>,
}

pub fn filter(cfg: &FilterConfig, prov: &Provenance, out: &mut Outputs) -> Result<String> {
    require_positive("f_max_khz", cfg.f_max_khz)?;
    if !(cfg.f_min_khz >= 0.0 && cfg.f_min_khz < cfg.f_max_khz) || cfg.points < 2 {
        return Err(schema("need 0 <= f_min_khz < f_max_khz and points >= 2"));
    }
    let seq = cfg.sequence.build()?;
    let rows: Vec<Vec<String>> = (0..cfg.points)
        .into_par_iter()
        .map(|k| {
            let f = cfg.f_min_khz
                + (cfg.f_max_khz - cfg.f_min_khz) * k as f64 / (cfg.points - 1) as f64;
            let w = khz_to_angular(f);
            vec![
                num(f),
                num(filter_y_squared(&seq, w)),
                num(filter_weight(&seq, w)),
            ]
        })
        .collect();
    let chi = cfg.nsd.as_ref().map(|nsd| chi(&seq, nsd)).transpose()?;
    let summary = FilterSummary {
        n_pulses: seq.n_pulses(),
        total_time_us: seq.total_time(),
        chi,
    };
    out.add_table(
        "filter.csv",
        prov,
        &["f_khz", "y_squared", "weight_us2"],
        &rows,
    );
    out.add_json("filter.json", prov, &summary)?;
    Ok(match chi {
        Some(c) => format!("chi = {c:.6}, coherence = {:.6}", 0.5 * (1.0 + (-c).exp())),
        None => format!(
            "{} pulses over {} us",
            summary.n_pulses, summary.total_time_us
        ),
    })
}

pub fn oracle(cfg: &OracleConfig, prov: &Provenance, out: &mut Outputs) -> Result<String> {
    require_positive("omega0_khz", cfg.omega0_khz)?;
    let omega0 = khz_to_angular(cfg.omega0_khz);
    let bath = match &cfg.bath {
        BathSource::Random(r) => SpinBath::random(omega0, *r)?,
        BathSource::Spins(s) => SpinBath::new(s.clone(), omega0)?,
    };
    let rows: Vec<(f64, f64, Option<f64>)> = cfg
        .cycle_times_us
        .par_iter()
        .map(|&t| {
            let exact = exact_coherence(&cpmg_cycles(cfg.n_cycles, t)?, &bath, cfg.ms)?;
            let magnus = match magnus_cpmg(&bath, cfg.n_cycles, t) {
                Ok(m) => Some(m),
                Err(CoreError::Resonance(_)) => None,
                Err(e) => return Err(e),
            };
            Ok((t, exact, magnus))
        })
        .collect::<Result<_, CoreError>>()?;
    let worst = rows
        .iter()
        .filter_map(|r| r.2.map(|m| (m - r.1).abs()))
        .fold(0.0, f64::max);
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|(t, e, m)| vec![num(*t), num(*e), m.map(num).unwrap_or_default()])
        .collect();
    out.add_table(
        "oracle.csv",
        prov,
        &["cycle_time_us", "exact", "magnus"],
        &table,
    );
    Ok(format!(
        "collective coupling R = {:.4}; max |exact - magnus| = {worst:.3e}",
        bath.transverse_power().sqrt() / omega0
    ))
}

pub fn scan_plan(cfg: &ScanPlanConfig, prov: &Provenance, out: &mut Outputs) -> Result<String> {
    let plan = plan_scan(cfg.nu_l_khz, &cfg.harmonics, cfg.window_khz, cfg.points)?;
    let rows: Vec<Vec<String>> = plan
        .iter()
        .map(|p| {
            let probe = angular_to_khz(probe_omega(p.t1));
            vec![
                num(p.t1),
                p.harmonic.to_string(),
                num(probe),
                num((2 * p.harmonic + 1) as f64 * probe),
            ]
        })
        .collect();
    out.add_table(
        "scan_plan.csv",
        prov,
        &["t1_us", "harmonic", "probe_khz", "harmonic_khz"],
        &rows,
    );
    Ok(format!("{} spacings", plan.len()))
}

/// Harmonic whose (2l+1)·probe frequency lies closest to `nu_khz`.
fn nearest_harmonic(t1: f64, nu_khz: f64) -> u32 {
    let probe = angular_to_khz(probe_omega(t1));
    ((nu_khz / probe - 1.0) / 2.0).round().max(0.0) as u32
}

#[derive(Serialize)]
struct RateRow {
    t1_us: f64,
    probe_khz: f64,
    harmonic: u32,
    rate_per_ms: f64,
    rate_err_per_ms: f64,
}

impl From<&RatePoint> for RateRow {
    fn from(p: &RatePoint) -> Self {
        Self {
            t1_us: p.t1(),
            probe_khz: angular_to_khz(p.omega),
            harmonic: p.harmonic_hint,
            rate_per_ms: p.rate * 1e3,
            rate_err_per_ms: p.rate_err * 1e3,
        }
    }
}

#[derive(Serialize)]
struct ReconstructReport {
    estimate: NsdEstimate,
    nsd: Nsd,
    rates: Vec<RateRow>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    skipped_traces: Vec<String>,
}

fn rates_table(rows: &[RateRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                num(r.t1_us),
                num(r.probe_khz),
                r.harmonic.to_string(),
                num(r.rate_per_ms),
                num(r.rate_err_per_ms),
            ]
        })
        .collect()
}

const RATE_HEADER: [&str; 5] = [
    "t1_us",
    "probe_khz",
    "harmonic",
    "rate_per_ms",
    "rate_err_per_ms",
];

fn rates_and_fit(
    hinted: &[(CoherenceTrace, u32)],
    n_min: usize,
    l_max: usize,
    fixed: Option<f64>,
) -> Result<(FitResult<GaussianNsd>, Vec<RatePoint>, Vec<String>)> {
    let opts = T2lOptions {
        n_min,
        ..Default::default()
    };
    let (points, failures) = rate_scan(hinted, opts);
    let skipped = failures
        .iter()
        .map(|(i, e)| format!("trace {i}: {e}"))
        .collect();
    let fit = reconstruct_nsd(&points, l_max, fixed).context("stage reconstruct")?;
    Ok((fit, points, skipped))
}

pub fn reconstruct(
    cfg: &ReconstructConfig,
    traces: &[CoherenceTrace],
    prov: &Provenance,
    out: &mut Outputs,
) -> Result<String> {
    require_positive("nu_l_khz_guess", cfg.nu_l_khz_guess)?;
    let hinted = traces
        .iter()
        .enumerate()
        .map(|(i, t)| match t.t1 {
            Some(t1) => Ok((t.clone(), nearest_harmonic(t1, cfg.nu_l_khz_guess))),
            None => Err(schema(format!(
                "trace {i} ({}) has no fixed spacing",
                t.family
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    let (fit, points, skipped) = rates_and_fit(&hinted, cfg.n_min, cfg.l_max, cfg.fixed_nu_l_khz)?;
    let rates: Vec<RateRow> = points.iter().map(RateRow::from).collect();
    out.add_table("rates.csv", prov, &RATE_HEADER, &rates_table(&rates));
    let estimate = NsdEstimate::from(&fit);
    let summary = describe(&estimate);
    out.add_json(
        "model.json",
        prov,
        &ReconstructReport {
            estimate,
            nsd: Nsd::Gaussian(fit.params),
            rates,
            skipped_traces: skipped,
        },
    )?;
    Ok(summary)
}

fn describe(e: &NsdEstimate) -> String {
    format!(
        "nu_L = {:.2}({:.2}) kHz, A = {:.1}({:.1}) /ms, sigma = {:.2}({:.2}) kHz, y0 = {:.2}({:.2}) /ms, chi2_nu = {:.3}",
        e.nu_l_khz, e.nu_l_err_khz, e.a, e.a_err, e.sigma_khz, e.sigma_err_khz, e.y0, e.y0_err, e.chi_nu
    )
}

#[derive(Serialize)]
struct CouplingRow {
    trace: usize,
    t1_us: f64,
    initial_par_khz: f64,
    initial_perp_khz: f64,
    #[serde(flatten)]
    estimate: CouplingEstimate,
}

#[derive(Serialize)]
struct CouplingReport {
    couplings: Vec<CouplingRow>,
}

/// ω∥ that puts the fundamental on resonance at this spacing.
fn resonant_par(t1: f64, omega_l: f64, ms: Manifold) -> f64 {
    2.0 * ms.sign() * (probe_omega(t1) - omega_l)
}

pub fn nuclei(
    cfg: &NucleiConfig,
    traces: &[CoherenceTrace],
    prov: &Provenance,
    out: &mut Outputs,
) -> Result<String> {
    let env = &cfg.model;
    let wl = env.larmor();
    let opts = CouplingOptions {
        convention: match cfg.convention {
            Convention::Phi => PhaseConvention::Phi,
            Convention::PhiPrime => PhaseConvention::PhiPrime,
        },
        par_span: cfg
            .par_span_khz
            .map(khz_to_angular)
            .unwrap_or(CouplingOptions::default().par_span),
    };
    let mut rows = Vec::new();
    for (i, t) in traces.iter().enumerate() {
        let t1 =
            t.t1.ok_or_else(|| schema(format!("trace {i} ({}) has no fixed spacing", t.family)))?;
        let par = cfg
            .initial_par_khz
            .map(khz_to_angular)
            .unwrap_or_else(|| resonant_par(t1, wl, env.ms));
        let perp = cfg
            .initial_perp_khz
            .map(khz_to_angular)
            .unwrap_or(0.2 * par.abs().max(khz_to_angular(10.0)));
        let initial = NuclearCoupling::new(par, perp)?;
        let fit = fit_coupling(t, initial, &env.nsd, wl, env.ms, opts)
            .with_context(|| format!("trace {i}"))?;
        rows.push(CouplingRow {
            trace: i,
            t1_us: t1,
            initial_par_khz: angular_to_khz(par),
            initial_perp_khz: angular_to_khz(perp),
            estimate: CouplingEstimate::from(&fit),
        });
    }
    if rows.is_empty() {
        return Err(schema("no traces to fit"));
    }
    let summary = rows
        .iter()
        .map(|r| {
            let e = &r.estimate;
            format!(
                "trace {}: omega_par = {:.1}({:.1}) kHz, omega_perp = {:.1}({:.1}) kHz",
                r.trace,
                e.omega_par_khz,
                e.omega_par_err_khz,
                e.omega_perp_khz,
                e.omega_perp_err_khz
            )
        })
        .collect::<Vec<_>>()
        .join("\n");
    out.add_json("coupling.json", prov, &CouplingReport { couplings: rows })?;
    Ok(summary)
}

#[derive(Serialize)]
struct DirectReport {
    estimate: NsdEstimate,
    model: EnvironmentModel,
}

fn gaussian_center_khz(env: &EnvironmentModel, what: &str) -> Result<f64> {
    env.nsd
        .as_gaussian()
        .map(|g| g.nu_l_khz())
        .ok_or_else(|| schema(format!("{what} needs a Gaussian spectrum")))
}

pub fn fit_direct(
    cfg: &FitDirectConfig,
    traces: &[CoherenceTrace],
    prov: &Provenance,
    out: &mut Outputs,
) -> Result<String> {
    let center = match cfg.fixed_nu_l_khz {
        Some(c) => c,
        None => gaussian_center_khz(&cfg.template, "template")?,
    };
    let fit = fit_nsd_direct(traces, &cfg.template, center).context("stage direct fit")?;
    let estimate = NsdEstimate::from(&fit);
    let summary = describe(&estimate);
    out.add_json(
        "model.json",
        prov,
        &DirectReport {
            estimate,
            model: cfg.template.with_nsd(Nsd::Gaussian(fit.params)),
        },
    )?;
    Ok(summary)
}

#[derive(Serialize)]
struct TraceScore {
    trace: usize,
    family: SequenceFamily,
    t1_us: Option<f64>,
    n_points: usize,
    chi_nu: Option<f64>,
}

#[derive(Serialize)]
struct ValidateReport {
    chi_nu: f64,
    n_points: usize,
    traces: Vec<TraceScore>,
    #[serde(skip_serializing_if = "Option::is_none")]
    regime: Option<RegimeReport>,
}

fn score(
    model: &EnvironmentModel,
    traces: &[CoherenceTrace],
) -> Result<(f64, usize, Vec<TraceScore>)> {
    let mut sim = Vec::new();
    let mut data = Vec::new();
    let mut rows = Vec::new();
    for (i, t) in traces.iter().enumerate() {
        let s = predict_trace(t, model).with_context(|| format!("trace {i}"))?;
        let d: Vec<_> = t.records.iter().map(|r| (r.p, r.sigma_p)).collect();
        rows.push(TraceScore {
            trace: i,
            family: t.family,
            t1_us: t.t1,
            n_points: d.len(),
            chi_nu: chi_nu_squared(&s, &d).ok(),
        });
        sim.extend(s);
        data.extend(d);
    }
    Ok((chi_nu_squared(&sim, &data)?, data.len(), rows))
}

pub fn validate(
    cfg: &ValidateConfig,
    traces: &[CoherenceTrace],
    prov: &Provenance,
    out: &mut Outputs,
) -> Result<String> {
    let (chi_nu, n_points, rows) = score(&cfg.model, traces)?;
    let regime = cfg
        .high_n_model
        .as_ref()
        .map(|m2| regime_report(&cfg.model, m2, traces, cfg.split))
        .transpose()?;
    let mut summary = format!("chi2_nu = {chi_nu:.4} over {n_points} points");
    if let Some(r) = &regime {
        summary = format!("{summary}\n{}", r.table().trim_end());
    }
    out.add_json(
        "report.json",
        prov,
        &ValidateReport {
            chi_nu,
            n_points,
            traces: rows,
            regime,
        },
    )?;
    Ok(summary)
}

#[derive(Serialize)]
struct Deviation {
    parameter: &'static str,
    truth: f64,
    estimate: f64,
    error: f64,
    /// (estimate − truth)/error.
    z: f64,
}

#[derive(Serialize)]
struct StrongCouplingReport {
    collective_coupling: f64,
    regime: RegimeReport,
    method1: NsdEstimate,
    method2: NsdEstimate,
    method1_high_n_chi_nu: f64,
    /// Method 1 fails at high n when its χ²_ν there is at least three
    /// times the combined two-model score.
    method1_high_n_failure: bool,
}

#[derive(Serialize)]
struct PipelineReport {
    n_traces: usize,
    n_rate_points: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    skipped_traces: Vec<String>,
    deviations: Vec<Deviation>,
    chi_nu_reconstructed: f64,
    chi_nu_truth: f64,
    n_points: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    strong_coupling: Option<StrongCouplingReport>,
}

#[derive(Serialize)]
struct PipelineModel {
    estimate: NsdEstimate,
    model: EnvironmentModel,
    rates: Vec<RateRow>,
}

pub fn pipeline(cfg: &PipelineConfig, prov: &Provenance, out: &mut Outputs) -> Result<String> {
    let truth = cfg
        .truth
        .nsd
        .as_gaussian()
        .copied()
        .ok_or_else(|| schema("`truth` needs a Gaussian spectrum"))?;
    let plan = plan_scan(
        truth.nu_l_khz(),
        &cfg.scan.harmonics,
        cfg.scan.window_khz,
        cfg.scan.points,
    )
    .context("stage plan")?;
    let hinted: Vec<(CoherenceTrace, u32)> = plan
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            decay_dataset(
                p.t1,
                &cfg.scan.n,
                &cfg.truth,
                cfg.scan.family,
                cfg.shot_sigma,
                derive_seed(cfg.seed, 0, k),
            )
            .map(|t| (t, p.harmonic))
        })
        .collect::<Result<_, _>>()
        .context("stage simulate")?;
    let (fit, points, skipped) = rates_and_fit(&hinted, cfg.n_min, cfg.l_max, None)?;
    let estimate = NsdEstimate::from(&fit);
    let traces: Vec<CoherenceTrace> = hinted.into_iter().map(|(t, _)| t).collect();
    let fitted = cfg.truth.with_nsd(Nsd::Gaussian(fit.params));
    let (chi_fit, n_points, _) = score(&fitted, &traces).context("stage validate")?;
    let (chi_truth, _, _) = score(&cfg.truth, &traces).context("stage validate")?;
    let deviation = |parameter, truth: f64, estimate: f64, error: f64| Deviation {
        parameter,
        truth,
        estimate,
        error,
        z: if error > 0.0 {
            (estimate - truth) / error
        } else {
            f64::NAN
        },
    };
    let deviations = vec![
        deviation("y0", truth.y0_per_ms(), estimate.y0, estimate.y0_err),
        deviation("A", truth.a_per_ms(), estimate.a, estimate.a_err),
        deviation(
            "nu_L",
            truth.nu_l_khz(),
            estimate.nu_l_khz,
            estimate.nu_l_err_khz,
        ),
        deviation(
            "sigma",
            truth.sigma_khz(),
            estimate.sigma_khz,
            estimate.sigma_err_khz,
        ),
    ];
    let strong = cfg
        .strong_coupling
        .as_ref()
        .map(|s| strong_coupling(s, cfg.seed))
        .transpose()
        .context("stage strong coupling")?;

    let mut summary = describe(&estimate);
    if let Some(s) = &strong {
        summary.push_str(&format!(
            "\nstrong coupling: method 1 high-n chi2_nu {:.2} vs combined {:.2}{}",
            s.method1_high_n_chi_nu,
            s.regime.combined,
            if s.method1_high_n_failure {
                " (method 1 fails at high n)"
            } else {
                ""
            }
        ));
    }
    out.add_traces("traces.csv", prov, &traces)?;
    out.add_json(
        "model.json",
        prov,
        &PipelineModel {
            estimate,
            model: fitted,
            rates: points.iter().map(RateRow::from).collect(),
        },
    )?;
    out.add_json(
        "report.json",
        prov,
        &PipelineReport {
            n_traces: traces.len(),
            n_rate_points: points.len(),
            skipped_traces: skipped,
            deviations,
            chi_nu_reconstructed: chi_fit,
            chi_nu_truth: chi_truth,
            n_points,
            strong_coupling: strong,
        },
    )?;
    Ok(summary)
}

fn strong_coupling(cfg: &StrongCouplingConfig, seed: u64) -> Result<StrongCouplingReport> {
    require_positive("omega0_khz", cfg.omega0_khz)?;
    let omega0 = khz_to_angular(cfg.omega0_khz);
    let bath = SpinBath::random(omega0, cfg.bath)?;
    let t_res = PI / (2.0 * omega0);
    let group = |g: &OracleGroup, offset: usize| -> Result<Vec<CoherenceTrace>> {
        g.t1_factors
            .par_iter()
            .enumerate()
            .map(|(k, f)| {
                oracle_dataset(
                    t_res * f,
                    &g.n,
                    &bath,
                    Manifold::Minus,
                    SequenceFamily::Cpmg,
                    Some(cfg.shot_sigma),
                    derive_seed(seed, offset, k),
                )
            })
            .collect::<Result<_, _>>()
            .map_err(Into::into)
    };
    let low = group(&cfg.low, 1)?;
    let high = group(&cfg.high, 2)?;
    // A classical model with no resolved nuclei at the bath frequency.
    let template = EnvironmentModel::new(
        cfg.omega0_khz / DEFAULT_GAMMA_C_KHZ_PER_G,
        cfg.seed_nsd.clone(),
        vec![],
        Manifold::Minus,
    )?;
    let m1 = fit_nsd_direct(&low, &template, cfg.omega0_khz).context("method 1 fit on low n")?;
    let m2 = fit_nsd_direct(&high, &template, cfg.omega0_khz).context("method 2 fit on high n")?;
    let all: Vec<_> = low.iter().chain(&high).cloned().collect();
    let regime = regime_report(
        &template.with_nsd(Nsd::Gaussian(m1.params)),
        &template.with_nsd(Nsd::Gaussian(m2.params)),
        &all,
        cfg.split,
    )?;
    let m1_high = regime.group("high-n").map_or(f64::NAN, |g| g.chi_nu_model1);
    Ok(StrongCouplingReport {
        collective_coupling: bath.transverse_power().sqrt() / omega0,
        method1_high_n_failure: m1_high >= 3.0 * regime.combined,
        method1_high_n_chi_nu: m1_high,
        regime,
        method1: NsdEstimate::from(&m1),
        method2: NsdEstimate::from(&m2),
    })
}
