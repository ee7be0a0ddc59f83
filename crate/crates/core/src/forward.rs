//! Composite forward model P = ½(1 + e^{−χ}·Π_i M_i) and synthetic data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::chi;
use crate::model::{CoherenceTrace, EnvironmentModel, SequenceFamily, TraceRecord};
use crate::nuclei::modulation_product;
use crate::sequences::{self, PulseSequence, SequenceSpec, AXY_BLOCK};

/// σ_P recorded on noise-free synthetic records, which still need a
/// positive uncertainty to be fitted.
pub const NOMINAL_SIGMA_P: f64 = 0.002;

/// Probability of finding the probe back in its initial state.
pub fn coherence(seq: &PulseSequence, env: &EnvironmentModel) -> Result<f64> {
    let x = chi(seq, &env.nsd)?;
    let m = modulation_product(seq, &env.nuclei, env.larmor(), env.ms);
    Ok(0.5 * (1.0 + (-x).exp() * m))
}

/// [`coherence`] over many sequences, evaluated in parallel, in input order.
pub fn coherence_many(seqs: &[PulseSequence], env: &EnvironmentModel) -> Result<Vec<f64>> {
    seqs.par_iter().map(|s| coherence(s, env)).collect()
}

/// Rebuilds the pulse pattern behind one trace record.
pub fn record_sequence(trace: &CoherenceTrace, record: &TraceRecord) -> Result<PulseSequence> {
    match trace.family {
        SequenceFamily::Cpmg | SequenceFamily::Xy8 => {
            let t1 = trace
                .t1
                .ok_or_else(|| Error::InvalidData(format!("{} trace without t1", trace.family)))?;
            sequences::equidistant(record.n, t1, trace.family)
        }
        SequenceFamily::Udd => sequences::udd(record.n, record.total_time),
        SequenceFamily::Axy { r_m } => {
            if !record.n.is_multiple_of(AXY_BLOCK) {
                return Err(Error::InvalidData(format!(
                    "AXY record with n = {}",
                    record.n
                )));
            }
            sequences::axy(record.n / AXY_BLOCK, r_m, record.total_time, 0.0)
        }
        SequenceFamily::Custom => Err(Error::InvalidData(
            "custom traces do not carry their pulse times".into(),
        )),
    }
}

/// All pulse patterns of a trace, in record order.
pub fn trace_sequences(trace: &CoherenceTrace) -> Result<Vec<PulseSequence>> {
    trace
        .records
        .iter()
        .map(|r| record_sequence(trace, r))
        .collect()
}

/// Model prediction for every record of a trace.
pub fn predict_trace(trace: &CoherenceTrace, env: &EnvironmentModel) -> Result<Vec<f64>> {
    coherence_many(&trace_sequences(trace)?, env)
}

/// Wraps clean probabilities into records, adding Gaussian noise of
/// standard deviation `shot_sigma` when it is positive. Noisy values are
/// left unclipped.
pub(crate) fn noisy_records(
    clean: &[f64],
    seqs: &[PulseSequence],
    shot_sigma: Option<f64>,
    seed: u64,
) -> Result<Vec<TraceRecord>> {
    let sigma = match shot_sigma {
        Some(s) if s < 0.0 || !s.is_finite() => {
            return Err(Error::param("shot_sigma", format!("must be >= 0, got {s}")))
        }
        Some(s) if s > 0.0 => Some(s),
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma.unwrap_or(1.0)).expect("positive standard deviation");
    Ok(clean
        .iter()
        .zip(seqs)
        .map(|(&p, s)| {
            let p = match sigma {
                Some(_) => p + normal.sample(&mut rng),
                None => p,
            };
            TraceRecord {
                n: s.n_pulses(),
                total_time: s.total_time(),
                p,
                sigma_p: sigma.unwrap_or(NOMINAL_SIGMA_P),
            }
        })
        .collect())
}

/// Coherence versus pulse count at fixed half spacing `t1`.
///
/// Without `shot_sigma` (or with zero) the records are exact and carry
/// [`NOMINAL_SIGMA_P`]; otherwise independent N(0, shot_sigma²) noise is
/// added from a generator seeded with `seed`.
pub fn decay_dataset(
    t1: f64,
    n_list: &[usize],
    env: &EnvironmentModel,
    family: SequenceFamily,
    shot_sigma: Option<f64>,
    seed: u64,
) -> Result<CoherenceTrace> {
    if n_list.is_empty() {
        return Err(Error::param("n_list", "needs at least one pulse count"));
    }
    let seqs: Vec<_> = n_list
        .iter()
        .map(|&n| sequences::equidistant(n, t1, family))
        .collect::<Result<_>>()?;
    let clean = coherence_many(&seqs, env)?;
    CoherenceTrace::new(
        family,
        Some(t1),
        noisy_records(&clean, &seqs, shot_sigma, seed)?,
    )
}

/// Coherence for an arbitrary list of same-family sequences, e.g. a UDD or
/// AXY total-time sweep, with the same noise model as [`decay_dataset`].
pub fn sequence_dataset(
    seqs: &[PulseSequence],
    env: &EnvironmentModel,
    shot_sigma: Option<f64>,
    seed: u64,
) -> Result<CoherenceTrace> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::param("sequences", "needs at least one sequence"))?;
    let family = first.family();
    if seqs.iter().any(|s| s.family() != family) {
        return Err(Error::param(
            "sequences",
            "all sequences must share one family",
        ));
    }
    let t1 = if family.is_equidistant() {
        let t1 = first.params().t1;
        if seqs.iter().any(|s| s.params().t1 != t1) {
            return Err(Error::param(
                "sequences",
                "equidistant traces need one common t1",
            ));
        }
        t1
    } else {
        None
    };
    let clean = coherence_many(seqs, env)?;
    CoherenceTrace::new(family, t1, noisy_records(&clean, seqs, shot_sigma, seed)?)
}

/// One row of a parameter sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub n: usize,
    pub total_time: f64,
    pub p: f64,
}

/// Coherence of `spec` with its total time replaced by each grid value.
pub fn sweep_coherence(
    spec: &SequenceSpec,
    total_times: &[f64],
    env: &EnvironmentModel,
) -> Result<Vec<SweepPoint>> {
    let seqs: Vec<_> = total_times
        .iter()
        .map(|&t| spec.with_total_time(t).build())
        .collect::<Result<_>>()?;
    let p = coherence_many(&seqs, env)?;
    Ok(seqs
        .iter()
        .zip(p)
        .map(|(s, p)| SweepPoint {
            n: s.n_pulses(),
            total_time: s.total_time(),
            p,
        })
        .collect())
}
