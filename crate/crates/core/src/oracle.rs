//! Exact product-state spin-bath simulation and its Magnus-expansion
//! approximations.
//!
//! A bath of non-interacting spins, each coupled to the probe like a
//! resolved nucleus, factorizes exactly: P = ½(1 + Π_k M_k). That exact
//! product is the ground truth against which the second-order Magnus
//! formulas and the equivalent classical spectrum are judged.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter;
use crate::forward::noisy_records;
use crate::model::units::{angular_to_khz, khz_to_angular};
use crate::model::{CoherenceTrace, Manifold, Nsd, NuclearCoupling, SequenceFamily, TabulatedNsd};
use crate::nuclei::conditional_modulation;
use crate::sequences::{self, PulseSequence};

/// Below this |cos(ω0·T/2)| the CPMG Magnus expression is singular.
pub const RESONANCE_GUARD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BathFile", into = "BathFile")]
pub struct SpinBath {
    pub spins: Vec<NuclearCoupling>,
    /// Internal precession frequency of every bath spin, rad/µs.
    pub omega0: f64,
}

/// Recipe for a random bath. Scales are fractions of ω0: ω⊥ is drawn
/// half-normal with scale `perp_scale`·ω0, ω∥ normal with `par_scale`·ω0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomBath {
    pub n_spins: usize,
    pub perp_scale: f64,
    #[serde(default)]
    pub par_scale: f64,
    pub seed: u64,
}

impl SpinBath {
    pub fn new(spins: Vec<NuclearCoupling>, omega0: f64) -> Result<Self> {
        if !(omega0 > 0.0 && omega0.is_finite()) {
            return Err(Error::param("omega0", format!("must be > 0, got {omega0}")));
        }
        Ok(Self { spins, omega0 })
    }

    pub fn random(omega0: f64, recipe: RandomBath) -> Result<Self> {
        if recipe.n_spins == 0 {
            return Err(Error::param("n_spins", "bath needs at least one spin"));
        }
        for (name, v) in [
            ("perp_scale", recipe.perp_scale),
            ("par_scale", recipe.par_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be >= 0, got {v}")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let spins = (0..recipe.n_spins)
            .map(|_| {
                let perp = (recipe.perp_scale * omega0 * unit.sample(&mut rng)).abs();
                let par = recipe.par_scale * omega0 * unit.sample(&mut rng);
                NuclearCoupling::new(par, perp)
            })
            .collect::<Result<_>>()?;
        Self::new(spins, omega0)
    }

    /// Σ ω∥².
    pub fn parallel_power(&self) -> f64 {
        self.spins.iter().map(|c| c.omega_par * c.omega_par).sum()
    }

    /// Σ ω⊥².
    pub fn transverse_power(&self) -> f64 {
        self.spins.iter().map(|c| c.omega_perp * c.omega_perp).sum()
    }
}

#[derive(Serialize, Deserialize)]
struct BathFile {
    omega0_khz: f64,
    spins: Vec<NuclearCoupling>,
}

impl TryFrom<BathFile> for SpinBath {
    type Error = Error;
    fn try_from(f: BathFile) -> Result<Self> {
        SpinBath::new(f.spins, khz_to_angular(f.omega0_khz))
    }
}

impl From<SpinBath> for BathFile {
    fn from(b: SpinBath) -> Self {
        Self {
            omega0_khz: angular_to_khz(b.omega0),
            spins: b.spins,
        }
    }
}

/// Exact survival probability ½(1 + Π_k M_k) for a maximally mixed bath.
pub fn exact_coherence(seq: &PulseSequence, bath: &SpinBath, ms: Manifold) -> Result<f64> {
    if bath.spins.is_empty() {
        return Err(Error::param("bath", "needs at least one spin"));
    }
    let factors: Vec<f64> = bath
        .spins
        .par_iter()
        .map(|c| conditional_modulation(seq, c, bath.omega0, ms))
        .collect();
    Ok(0.5 * (1.0 + factors.iter().product::<f64>()))
}

/// Exact bath coherence versus pulse count at fixed `t1`, with the noise
/// model of [`crate::forward::decay_dataset`].
pub fn oracle_dataset(
    t1: f64,
    n_list: &[usize],
    bath: &SpinBath,
    ms: Manifold,
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
    let clean = seqs
        .iter()
        .map(|s| exact_coherence(s, bath, ms))
        .collect::<Result<Vec<_>>>()?;
    CoherenceTrace::new(
        family,
        Some(t1),
        noisy_records(&clean, &seqs, shot_sigma, seed)?,
    )
}

/// Second-order Magnus result for free evolution over `total_time`:
/// ½ + ½·exp(−T²Σω∥²/2)·exp(−2Σω⊥² sin²(ω0T/2)/ω0²).
pub fn magnus_ramsey(bath: &SpinBath, total_time: f64) -> f64 {
    let t = total_time;
    let w0 = bath.omega0;
    let s = (0.5 * w0 * t).sin();
    let exponent =
        0.5 * t * t * bath.parallel_power() + 2.0 * bath.transverse_power() * s * s / (w0 * w0);
    0.5 + 0.5 * (-exponent).exp()
}

/// Second-order Magnus result for `n_cycles` CPMG cycles of length
/// `cycle_time` T, i.e. 2·n_cycles pulses spaced by T, total time 2·n·T:
/// ½ + ½·exp(−2Σω⊥² sin⁴(ω0T/4) sin²(nω0T)/(ω0² cos²(ω0T/2))).
///
/// Errors with [`Error::Resonance`] where the expression diverges.
pub fn magnus_cpmg(bath: &SpinBath, n_cycles: usize, cycle_time: f64) -> Result<f64> {
    let w0 = bath.omega0;
    let x = w0 * cycle_time;
    let c = (0.5 * x).cos();
    if c.abs() < RESONANCE_GUARD {
        return Err(Error::Resonance(c.abs()));
    }
    let s4 = (0.25 * x).sin().powi(4);
    let sn = (n_cycles as f64 * x).sin();
    let exponent = 2.0 * bath.transverse_power() * s4 * sn * sn / (w0 * w0 * c * c);
    Ok(0.5 + 0.5 * (-exponent).exp())
}

/// The CPMG pattern that [`magnus_cpmg`] describes.
pub fn cpmg_cycles(n_cycles: usize, cycle_time: f64) -> Result<PulseSequence> {
    sequences::equidistant(2 * n_cycles, 0.5 * cycle_time, SequenceFamily::Cpmg)
}

/// Classical stand-in for a weakly coupled bath: a static field plus a
/// narrow spectral line at ω0.
#[derive(Clone, Debug, PartialEq)]
pub struct EquivalentNsd {
    /// ΔB² = Σω∥², rad²/µs².
    pub static_variance: f64,
    /// Gaussian line of width ε standing in for a δ peak at ω0.
    pub spectrum: Nsd,
    /// Area under `spectrum`, 1/µs².
    pub weight: f64,
}

impl EquivalentNsd {
    /// Total dephasing χ for `seq`: the line through the filter, plus the
    /// static part ΔB²·(∫y dt)²/8.
    pub fn chi(&self, seq: &PulseSequence) -> Result<f64> {
        let area: f64 = seq
            .free_intervals()
            .iter()
            .enumerate()
            .map(|(k, d)| if k % 2 == 0 { *d } else { -*d })
            .sum();
        Ok(filter::chi(seq, &self.spectrum)? + self.static_variance * area * area / 8.0)
    }
}

/// Builds the classical equivalent of `bath` with line width `epsilon`.
///
/// The line weight is (π/8)·Σω⊥², which makes χ through the filter equal
/// the weak-coupling exponent Σω⊥²|Y(ω0)|²/(8ω0²) as ε → 0.
pub fn equivalent_classical_nsd(bath: &SpinBath, epsilon: f64) -> Result<EquivalentNsd> {
    if bath.spins.is_empty() {
        return Err(Error::param("bath", "needs at least one spin"));
    }
    if !(epsilon > 0.0 && epsilon < 0.1 * bath.omega0) {
        return Err(Error::param("epsilon", "line width must be in (0, ω0/10)"));
    }
    let weight = PI / 8.0 * bath.transverse_power();
    let peak = weight / (epsilon * (2.0 * PI).sqrt());
    const HALF_SPAN: f64 = 8.0;
    const POINTS: usize = 321;
    let mut samples = vec![(0.0, 0.0)];
    samples.extend((0..POINTS).map(|k| {
        let u = -HALF_SPAN + 2.0 * HALF_SPAN * k as f64 / (POINTS - 1) as f64;
        let s = if k == 0 || k == POINTS - 1 {
            0.0
        } else {
            peak * (-0.5 * u * u).exp()
        };
        (bath.omega0 + u * epsilon, s)
    }));
    Ok(EquivalentNsd {
        static_variance: bath.parallel_power(),
        spectrum: Nsd::Tabulated(TabulatedNsd::new(samples)?),
        weight,
    })
}
