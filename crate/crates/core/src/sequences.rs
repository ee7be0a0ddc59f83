//! π-pulse timing for the decoupling families.
//!
//! Pulses are ideal and instantaneous. Phases are carried along as metadata
//! only; nothing downstream depends on them.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_6, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SequenceFamily;

/// Smallest accepted AXY compression.
pub const MIN_R_M: f64 = 1e-6;

/// Pulses per AXY block (composite Knill pulse).
pub const AXY_BLOCK: usize = 5;

const X: f64 = 0.0;
const Y: f64 = FRAC_PI_2;
const XY8_PATTERN: [f64; 8] = [X, Y, X, Y, Y, X, Y, X];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceParams {
    /// Number of π pulses.
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_m: Option<f64>,
    /// Number of repeated blocks (XY-8 cycles, AXY blocks).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cycles: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PulseSequence {
    total_time: f64,
    pulse_times: Vec<f64>,
    phases: Option<Vec<f64>>,
    family: SequenceFamily,
    params: SequenceParams,
}

impl PulseSequence {
    fn build(
        total_time: f64,
        pulse_times: Vec<f64>,
        phases: Option<Vec<f64>>,
        family: SequenceFamily,
        params: SequenceParams,
    ) -> Result<Self> {
        if !(total_time > 0.0 && total_time.is_finite()) {
            return Err(Error::InvalidSequence(format!(
                "total time must be > 0, got {total_time}"
            )));
        }
        if let Some(&first) = pulse_times.first() {
            if !(first > 0.0) {
                return Err(Error::InvalidSequence(format!(
                    "first pulse at {first} is not after t = 0"
                )));
            }
        }
        if let Some(&last) = pulse_times.last() {
            if !(last < total_time) {
                return Err(Error::InvalidSequence(format!(
                    "last pulse at {last} is not before T = {total_time}"
                )));
            }
        }
        if let Some(k) = pulse_times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidSequence(format!(
                "pulse times not strictly increasing at index {}",
                k + 1
            )));
        }
        Ok(Self {
            total_time,
            pulse_times,
            phases,
            family,
            params,
        })
    }

    pub fn total_time(&self) -> f64 {
        self.total_time
    }

    pub fn pulse_times(&self) -> &[f64] {
        &self.pulse_times
    }

    pub fn phases(&self) -> Option<&[f64]> {
        self.phases.as_deref()
    }

    pub fn family(&self) -> SequenceFamily {
        self.family
    }

    pub fn params(&self) -> &SequenceParams {
        &self.params
    }

    pub fn n_pulses(&self) -> usize {
        self.pulse_times.len()
    }

    /// Switching times 0, t_1, .., t_n, T.
    pub fn boundaries(&self) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.pulse_times.len() + 2);
        b.push(0.0);
        b.extend_from_slice(&self.pulse_times);
        b.push(self.total_time);
        b
    }

    /// Lengths of the n+1 free-evolution intervals.
    pub fn free_intervals(&self) -> Vec<f64> {
        self.boundaries().windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Same pattern played backwards: t_k → T − t_{n+1−k}.
    pub fn time_reversed(&self) -> Self {
        let t = self.total_time;
        let times = self.pulse_times.iter().rev().map(|&x| t - x).collect();
        let phases = self
            .phases
            .as_ref()
            .map(|p| p.iter().rev().copied().collect());
        Self {
            total_time: t,
            pulse_times: times,
            phases,
            family: SequenceFamily::Custom,
            params: SequenceParams {
                n: self.pulse_times.len(),
                ..Default::default()
            },
        }
    }
}

fn check_count(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::param("n", "pulse count must be >= 1"));
    }
    Ok(())
}

fn check_time(name: &'static str, t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::param(
            name,
            format!("must be finite and > 0, got {t}"),
        ));
    }
    Ok(())
}

/// `n` pulses at (2k−1)·t1, k = 1..n, total time 2·n·t1.
///
/// `family` selects the phase pattern: XY-8 cycles for [`SequenceFamily::Xy8`],
/// all-Y otherwise.
pub fn equidistant(n: usize, t1: f64, family: SequenceFamily) -> Result<PulseSequence> {
    check_count(n)?;
    check_time("t1", t1)?;
    if !family.is_equidistant() {
        return Err(Error::param(
            "family",
            format!("{family} is not equidistant"),
        ));
    }
    let times = (1..=n).map(|k| (2 * k - 1) as f64 * t1).collect();
    let (phases, cycles) = match family {
        SequenceFamily::Xy8 => (
            (0..n).map(|k| XY8_PATTERN[k % 8]).collect(),
            Some(n.div_ceil(8)),
        ),
        _ => (vec![Y; n], None),
    };
    PulseSequence::build(
        2.0 * n as f64 * t1,
        times,
        Some(phases),
        family,
        SequenceParams {
            n,
            t1: Some(t1),
            r_m: None,
            cycles,
        },
    )
}

/// Uhrig timing: pulse j at T·sin²(jπ/(2n+2)).
pub fn udd(n: usize, total_time: f64) -> Result<PulseSequence> {
    check_count(n)?;
    check_time("total_time", total_time)?;
    let times = (1..=n)
        .map(|j| {
            let s = (j as f64 * PI / (2 * n + 2) as f64).sin();
            total_time * s * s
        })
        .collect();
    PulseSequence::build(
        total_time,
        times,
        Some(vec![Y; n]),
        SequenceFamily::Udd,
        SequenceParams {
            n,
            ..Default::default()
        },
    )
}

/// Adaptive XY sequence of `n_blocks` ∈ {4, 8} five-pulse Knill blocks.
///
/// Pulse j of block i sits at T/N·((2i−1)/2 + r_m·(2j−6)/10); r_m = 1 gives
/// 5N equidistant pulses and r_m → 0 squeezes every block onto its center.
/// Block phases follow X Y X Y (Y X Y X), offset by `base_phase`.
pub fn axy(n_blocks: usize, r_m: f64, total_time: f64, base_phase: f64) -> Result<PulseSequence> {
    if n_blocks != 4 && n_blocks != 8 {
        return Err(Error::param(
            "n_blocks",
            format!("must be 4 or 8, got {n_blocks}"),
        ));
    }
    if !(MIN_R_M..=1.0).contains(&r_m) {
        return Err(Error::param(
            "r_m",
            format!("must lie in [{MIN_R_M}, 1], got {r_m}"),
        ));
    }
    check_time("total_time", total_time)?;
    let m = AXY_BLOCK as f64;
    let nb = n_blocks as f64;
    let knill = [FRAC_PI_6, 0.0, FRAC_PI_2, 0.0, FRAC_PI_6];
    let mut times = Vec::with_capacity(AXY_BLOCK * n_blocks);
    let mut phases = Vec::with_capacity(AXY_BLOCK * n_blocks);
    for i in 1..=n_blocks {
        let block_phase = base_phase + XY8_PATTERN[i - 1];
        for j in 1..=AXY_BLOCK {
            let offset = (2 * i - 1) as f64 / 2.0 + r_m * (2.0 * j as f64 - m - 1.0) / (2.0 * m);
            times.push(total_time / nb * offset);
            phases.push(block_phase + knill[j - 1]);
        }
    }
    PulseSequence::build(
        total_time,
        times,
        Some(phases),
        SequenceFamily::Axy { r_m },
        SequenceParams {
            n: AXY_BLOCK * n_blocks,
            t1: None,
            r_m: Some(r_m),
            cycles: Some(n_blocks),
        },
    )
}

/// Arbitrary pulse times; an empty list is free (Ramsey) evolution.
pub fn custom(times: Vec<f64>, total_time: f64) -> Result<PulseSequence> {
    let n = times.len();
    PulseSequence::build(
        total_time,
        times,
        None,
        SequenceFamily::Custom,
        SequenceParams {
            n,
            ..Default::default()
        },
    )
}

/// File form of a sequence. `n` always counts π pulses, so an AXY-8
/// sequence has n = 40.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub family: SequenceFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t1_us: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_time_us: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times_us: Option<Vec<f64>>,
}

impl SequenceSpec {
    fn need<T: Copy>(value: Option<T>, name: &'static str, family: SequenceFamily) -> Result<T> {
        value.ok_or_else(|| Error::param(name, format!("required for {family} sequences")))
    }

    pub fn build(&self) -> Result<PulseSequence> {
        let f = self.family;
        match f {
            SequenceFamily::Cpmg | SequenceFamily::Xy8 => {
                let n = Self::need(self.n, "n", f)?;
                let t1 = match (self.t1_us, self.total_time_us) {
                    (Some(t1), _) => t1,
                    (None, Some(t)) => t / (2.0 * n.max(1) as f64),
                    (None, None) => {
                        return Err(Error::param("t1_us", format!("required for {f} sequences")))
                    }
                };
                equidistant(n, t1, f)
            }
            SequenceFamily::Udd => udd(
                Self::need(self.n, "n", f)?,
                Self::need(self.total_time_us, "total_time_us", f)?,
            ),
            SequenceFamily::Axy { r_m: tag_r_m } => {
                let n = Self::need(self.n, "n", f)?;
                if n % AXY_BLOCK != 0 {
                    return Err(Error::param(
                        "n",
                        format!("AXY pulse count must be 20 or 40, got {n}"),
                    ));
                }
                let r_m = self.r_m.unwrap_or(tag_r_m);
                axy(
                    n / AXY_BLOCK,
                    r_m,
                    Self::need(self.total_time_us, "total_time_us", f)?,
                    0.0,
                )
            }
            SequenceFamily::Custom => {
                let times = self
                    .times_us
                    .clone()
                    .ok_or_else(|| Error::param("times_us", "required for custom sequences"))?;
                custom(times, Self::need(self.total_time_us, "total_time_us", f)?)
            }
        }
    }

    /// Copy of this spec with the total time replaced, for time sweeps.
    pub fn with_total_time(&self, total_time: f64) -> Self {
        let mut s = self.clone();
        s.total_time_us = Some(total_time);
        if self.family.is_equidistant() {
            s.t1_us = None;
        }
        s
    }
}
