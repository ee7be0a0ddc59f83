//! Goodness of fit between simulated and measured coherence, and the
//! two-model regime report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::predict_trace;
use crate::model::{CoherenceTrace, EnvironmentModel};

/// χ²_ν = Σ((s_i − y_i)/δ_i)² / (N − 1).
pub fn chi_nu_squared(sim: &[f64], data: &[(f64, f64)]) -> Result<f64> {
    if sim.len() != data.len() {
        return Err(Error::InvalidData(format!(
            "{} simulated values for {} data points",
            sim.len(),
            data.len()
        )));
    }
    if data.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            available: data.len(),
        });
    }
    Ok(sum_squares(sim, data)? / (data.len() - 1) as f64)
}

fn sum_squares(sim: &[f64], data: &[(f64, f64)]) -> Result<f64> {
    let mut total = 0.0;
    for (s, &(y, d)) in sim.iter().zip(data) {
        if !(d > 0.0) {
            return Err(Error::InvalidData(format!(
                "uncertainty {d} is not positive"
            )));
        }
        total += ((s - y) / d).powi(2);
    }
    Ok(total)
}

/// Pulse-count thresholds separating the regimes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimeSplit {
    /// Records with n below this form the low-n group.
    pub low_below: usize,
    /// Records with n at or above this form the high-n group.
    pub high_from: usize,
}

impl Default for RegimeSplit {
    fn default() -> Self {
        Self {
            low_below: 8,
            high_from: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub group: String,
    pub n_points: usize,
    pub chi_nu_model1: f64,
    pub chi_nu_model2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub split: RegimeSplit,
    pub groups: Vec<GroupScore>,
    /// Model 1 scored on the low-n group and model 2 on the high-n group,
    /// pooled.
    pub combined: f64,
    pub n_points: usize,
    /// Records between the two thresholds, not scored.
    pub skipped: usize,
}

impl RegimeReport {
    pub fn group(&self, name: &str) -> Option<&GroupScore> {
        self.groups.iter().find(|g| g.group == name)
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8} {:>8} {:>12} {:>12}",
            "group", "points", "model 1", "model 2"
        );
        for g in &self.groups {
            let _ = writeln!(
                out,
                "{:<8} {:>8} {:>12.4} {:>12.4}",
                g.group, g.n_points, g.chi_nu_model1, g.chi_nu_model2
            );
        }
        let _ = writeln!(
            out,
            "{:<8} {:>8} {:>12.4}",
            "combined", self.n_points, self.combined
        );
        if self.skipped > 0 {
            let _ = writeln!(
                out,
                "({} records between n={} and n={} not scored)",
                self.skipped, self.split.low_below, self.split.high_from
            );
        }
        out
    }
}

fn same_center(a: &EnvironmentModel, b: &EnvironmentModel) -> bool {
    match (a.nsd.as_gaussian(), b.nsd.as_gaussian()) {
        (Some(x), Some(y)) => {
            (x.center - y.center).abs() <= 1e-6 * x.center.abs().max(y.center.abs())
        }
        _ => true,
    }
}

/// Scores two environment models against traces split into low-n and
/// high-n groups. Model 1 is meant for short sequences and model 2 for
/// long ones; the combined score uses each on its own group.
pub fn regime_report(
    model1: &EnvironmentModel,
    model2: &EnvironmentModel,
    traces: &[CoherenceTrace],
    split: RegimeSplit,
) -> Result<RegimeReport> {
    if model1.nuclei != model2.nuclei
        || model1.ms != model2.ms
        || (model1.larmor() - model2.larmor()).abs() > 1e-12
    {
        return Err(Error::InvalidData(
            "both models must share field, nuclei and manifold".into(),
        ));
    }
    if !same_center(model1, model2) {
        return Err(Error::InvalidData(
            "both models must share the spectral center".into(),
        ));
    }
    if split.low_below > split.high_from {
        return Err(Error::param(
            "split",
            "low-n threshold above high-n threshold",
        ));
    }

    let mut low = Bucket::default();
    let mut high = Bucket::default();
    let mut skipped = 0;
    for t in traces {
        let p1 = predict_trace(t, model1)?;
        let p2 = predict_trace(t, model2)?;
        for ((r, a), b) in t.records.iter().zip(p1).zip(p2) {
            let bucket = if r.n < split.low_below {
                &mut low
            } else if r.n >= split.high_from {
                &mut high
            } else {
                skipped += 1;
                continue;
            };
            bucket.data.push((r.p, r.sigma_p));
            bucket.sim1.push(a);
            bucket.sim2.push(b);
        }
    }

    let mut groups = Vec::new();
    let mut pooled = 0.0;
    let mut n_points = 0;
    for (name, bucket, use_second) in [("low-n", &low, false), ("high-n", &high, true)] {
        if bucket.data.is_empty() {
            continue;
        }
        let s1 = sum_squares(&bucket.sim1, &bucket.data)?;
        let s2 = sum_squares(&bucket.sim2, &bucket.data)?;
        let dof = (bucket.data.len().max(2) - 1) as f64;
        groups.push(GroupScore {
            group: name.into(),
            n_points: bucket.data.len(),
            chi_nu_model1: s1 / dof,
            chi_nu_model2: s2 / dof,
        });
        pooled += if use_second { s2 } else { s1 };
        n_points += bucket.data.len();
    }
    if n_points < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            available: n_points,
        });
    }
    Ok(RegimeReport {
        split,
        groups,
        combined: pooled / (n_points - 1) as f64,
        n_points,
        skipped,
    })
}

#[derive(Default)]
struct Bucket {
    data: Vec<(f64, f64)>,
    sim1: Vec<f64>,
    sim2: Vec<f64>,
}
