//! Domain types shared by every stage of the pipeline.
//!
//! Internal units are fixed: time in µs, frequencies as angular rates in
//! rad/µs, spectral densities and decay rates in 1/µs. Files and the command
//! line use ordinary frequencies in kHz, fields in Gauss and spectral
//! amplitudes in 1/ms; the conversion happens in the serde boundary types
//! below and nowhere else.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ¹³C gyromagnetic ratio used when none is configured, in kHz/G.
pub const DEFAULT_GAMMA_C_KHZ_PER_G: f64 = 1.0705;

/// Unit conversions at the I/O boundary.
pub mod units {
    use std::f64::consts::TAU;

    /// Ordinary frequency in kHz to angular frequency in rad/µs.
    pub fn khz_to_angular(khz: f64) -> f64 {
        TAU * khz * 1e-3
    }

    pub fn angular_to_khz(omega: f64) -> f64 {
        omega / TAU * 1e3
    }

    /// Rate in 1/ms to rate in 1/µs.
    pub fn per_ms_to_per_us(rate: f64) -> f64 {
        rate * 1e-3
    }

    pub fn per_us_to_per_ms(rate: f64) -> f64 {
        rate * 1e3
    }
}

use units::{angular_to_khz, khz_to_angular, per_ms_to_per_us, per_us_to_per_ms};

/// Anything that can be evaluated as a one-sided spectral density S(ω).
pub trait Spectrum {
    /// S at angular frequency `omega` (rad/µs), in 1/µs.
    fn eval(&self, omega: f64) -> f64;
}

/// Gaussian peak on a flat floor: S(ω) = y0 + A·exp(−(ω−ω_L)²/(2σ_ω²)).
///
/// Stored in angular units; since ω = 2πν the same expression holds in
/// ordinary frequency with ν_L = ω_L/2π and σ = σ_ω/2π.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianNsdFile", into = "GaussianNsdFile")]
pub struct GaussianNsd {
    /// Flat floor, 1/µs.
    pub y0: f64,
    /// Peak height above the floor, 1/µs.
    pub amplitude: f64,
    /// Peak center ω_L, rad/µs.
    pub center: f64,
    /// Peak standard deviation σ_ω, rad/µs.
    pub width: f64,
}

impl GaussianNsd {
    pub fn new(y0: f64, amplitude: f64, center: f64, width: f64) -> Result<Self> {
        if !(y0 >= 0.0 && y0.is_finite()) {
            return Err(Error::param(
                "y0",
                format!("must be finite and >= 0, got {y0}"),
            ));
        }
        if !(amplitude >= 0.0 && amplitude.is_finite()) {
            return Err(Error::param(
                "A",
                format!("must be finite and >= 0, got {amplitude}"),
            ));
        }
        if !(center > 0.0 && center.is_finite()) {
            return Err(Error::param("nu_L", format!("must be > 0, got {center}")));
        }
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::param("sigma", format!("must be > 0, got {width}")));
        }
        Ok(Self {
            y0,
            amplitude,
            center,
            width,
        })
    }

    /// Builds from boundary units: rates in 1/ms, center and width in kHz.
    pub fn from_khz(y0_per_ms: f64, a_per_ms: f64, nu_l_khz: f64, sigma_khz: f64) -> Result<Self> {
        Self::new(
            per_ms_to_per_us(y0_per_ms),
            per_ms_to_per_us(a_per_ms),
            khz_to_angular(nu_l_khz),
            khz_to_angular(sigma_khz),
        )
    }

    pub fn nu_l_khz(&self) -> f64 {
        angular_to_khz(self.center)
    }

    pub fn sigma_khz(&self) -> f64 {
        angular_to_khz(self.width)
    }

    pub fn y0_per_ms(&self) -> f64 {
        per_us_to_per_ms(self.y0)
    }

    pub fn a_per_ms(&self) -> f64 {
        per_us_to_per_ms(self.amplitude)
    }

    /// Peak part only, without the floor.
    pub fn peak(&self, omega: f64) -> f64 {
        let d = (omega - self.center) / self.width;
        self.amplitude * (-0.5 * d * d).exp()
    }
}

impl Spectrum for GaussianNsd {
    fn eval(&self, omega: f64) -> f64 {
        self.y0 + self.peak(omega)
    }
}

#[derive(Serialize, Deserialize)]
struct GaussianNsdFile {
    y0: f64,
    a: f64,
    nu_l_khz: f64,
    sigma_khz: f64,
}

impl TryFrom<GaussianNsdFile> for GaussianNsd {
    type Error = Error;
    fn try_from(f: GaussianNsdFile) -> Result<Self> {
        GaussianNsd::from_khz(f.y0, f.a, f.nu_l_khz, f.sigma_khz)
    }
}

impl From<GaussianNsd> for GaussianNsdFile {
    fn from(g: GaussianNsd) -> Self {
        Self {
            y0: g.y0_per_ms(),
            a: g.a_per_ms(),
            nu_l_khz: g.nu_l_khz(),
            sigma_khz: g.sigma_khz(),
        }
    }
}

/// Sampled spectrum, linearly interpolated and clamped to the end values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TabulatedNsdFile", into = "TabulatedNsdFile")]
pub struct TabulatedNsd {
    omega: Vec<f64>,
    s: Vec<f64>,
}

impl TabulatedNsd {
    pub fn new(samples: Vec<(f64, f64)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::param(
                "samples",
                "tabulated spectrum needs at least one sample",
            ));
        }
        let (omega, s): (Vec<f64>, Vec<f64>) = samples.into_iter().unzip();
        if omega.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::param("samples", "omega must be strictly increasing"));
        }
        if omega.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::param("samples", "omega must be finite and >= 0"));
        }
        if s.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::param(
                "samples",
                "spectral values must be finite and >= 0",
            ));
        }
        Ok(Self { omega, s })
    }

    pub fn samples(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.omega.iter().copied().zip(self.s.iter().copied())
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omega
    }

    pub fn first(&self) -> (f64, f64) {
        (self.omega[0], self.s[0])
    }

    pub fn last(&self) -> (f64, f64) {
        let k = self.omega.len() - 1;
        (self.omega[k], self.s[k])
    }
}

impl Spectrum for TabulatedNsd {
    fn eval(&self, omega: f64) -> f64 {
        let n = self.omega.len();
        if omega <= self.omega[0] {
            return self.s[0];
        }
        if omega >= self.omega[n - 1] {
            return self.s[n - 1];
        }
        let k = self.omega.partition_point(|&w| w <= omega);
        let (w0, w1) = (self.omega[k - 1], self.omega[k]);
        let (s0, s1) = (self.s[k - 1], self.s[k]);
        s0 + (s1 - s0) * (omega - w0) / (w1 - w0)
    }
}

#[derive(Serialize, Deserialize)]
struct TabulatedNsdFile {
    nu_khz: Vec<f64>,
    /// 1/ms
    s: Vec<f64>,
}

impl TryFrom<TabulatedNsdFile> for TabulatedNsd {
    type Error = Error;
    fn try_from(f: TabulatedNsdFile) -> Result<Self> {
        if f.nu_khz.len() != f.s.len() {
            return Err(Error::param("samples", "nu_khz and s differ in length"));
        }
        TabulatedNsd::new(
            f.nu_khz
                .into_iter()
                .zip(f.s)
                .map(|(nu, s)| (khz_to_angular(nu), per_ms_to_per_us(s)))
                .collect(),
        )
    }
}

impl From<TabulatedNsd> for TabulatedNsdFile {
    fn from(t: TabulatedNsd) -> Self {
        Self {
            nu_khz: t.omega.iter().map(|&w| angular_to_khz(w)).collect(),
            s: t.s.iter().map(|&s| per_us_to_per_ms(s)).collect(),
        }
    }
}

/// Either spectral model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Nsd {
    Gaussian(GaussianNsd),
    Tabulated(TabulatedNsd),
}

impl Nsd {
    /// Value the spectrum settles to at high frequency.
    ///
    /// Integrals against the filter split S into this constant, whose
    /// contribution is known in closed form, and a remainder of bounded
    /// support.
    pub fn baseline(&self) -> f64 {
        match self {
            Nsd::Gaussian(g) => g.y0,
            Nsd::Tabulated(t) => t.last().1,
        }
    }

    /// Interval outside which S equals its baseline (to below 1e-31 relative
    /// for the Gaussian), or `None` when S is constant.
    pub fn excess_support(&self) -> Option<(f64, f64)> {
        match self {
            Nsd::Gaussian(g) if g.amplitude > 0.0 => Some((
                (g.center - 12.0 * g.width).max(0.0),
                g.center + 12.0 * g.width,
            )),
            Nsd::Gaussian(_) => None,
            Nsd::Tabulated(t) => {
                let base = t.last().1;
                if t.s.iter().all(|&s| s == base) {
                    None
                } else {
                    Some((0.0, t.last().0))
                }
            }
        }
    }

    /// Points where S has a feature worth splitting an integral at.
    pub fn features(&self) -> Vec<f64> {
        match self {
            Nsd::Gaussian(g) => vec![g.center - g.width, g.center, g.center + g.width],
            Nsd::Tabulated(t) => t.omega.clone(),
        }
    }

    pub fn as_gaussian(&self) -> Option<&GaussianNsd> {
        match self {
            Nsd::Gaussian(g) => Some(g),
            Nsd::Tabulated(_) => None,
        }
    }
}

impl Spectrum for Nsd {
    fn eval(&self, omega: f64) -> f64 {
        match self {
            Nsd::Gaussian(g) => g.eval(omega),
            Nsd::Tabulated(t) => t.eval(omega),
        }
    }
}

impl From<GaussianNsd> for Nsd {
    fn from(g: GaussianNsd) -> Self {
        Nsd::Gaussian(g)
    }
}

impl From<TabulatedNsd> for Nsd {
    fn from(t: TabulatedNsd) -> Self {
        Nsd::Tabulated(t)
    }
}

/// Evaluates S(ω) for either spectral model.
pub fn nsd_eval(nsd: &Nsd, omega: f64) -> f64 {
    nsd.eval(omega)
}

/// Hyperfine coupling of one resolved nucleus, angular units (rad/µs).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CouplingFile", into = "CouplingFile")]
pub struct NuclearCoupling {
    /// ω_h∥, signed.
    pub omega_par: f64,
    /// ω_h⊥, non-negative.
    pub omega_perp: f64,
}

impl NuclearCoupling {
    pub fn new(omega_par: f64, omega_perp: f64) -> Result<Self> {
        if !omega_par.is_finite() {
            return Err(Error::param("omega_par", "must be finite"));
        }
        if !(omega_perp >= 0.0 && omega_perp.is_finite()) {
            return Err(Error::param(
                "omega_perp",
                format!("must be finite and >= 0, got {omega_perp}"),
            ));
        }
        Ok(Self {
            omega_par,
            omega_perp,
        })
    }

    /// From ω/2π values in kHz, as hyperfine tables usually list them.
    pub fn from_khz(par_khz: f64, perp_khz: f64) -> Result<Self> {
        Self::new(khz_to_angular(par_khz), khz_to_angular(perp_khz))
    }

    pub fn par_khz(&self) -> f64 {
        angular_to_khz(self.omega_par)
    }

    pub fn perp_khz(&self) -> f64 {
        angular_to_khz(self.omega_perp)
    }
}

#[derive(Serialize, Deserialize)]
struct CouplingFile {
    omega_par_khz: f64,
    omega_perp_khz: f64,
}

impl TryFrom<CouplingFile> for NuclearCoupling {
    type Error = Error;
    fn try_from(f: CouplingFile) -> Result<Self> {
        NuclearCoupling::from_khz(f.omega_par_khz, f.omega_perp_khz)
    }
}

impl From<NuclearCoupling> for CouplingFile {
    fn from(c: NuclearCoupling) -> Self {
        Self {
            omega_par_khz: c.par_khz(),
            omega_perp_khz: c.perp_khz(),
        }
    }
}

/// Probe manifold: sign of m_s in the {0, m_s} qubit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "i32", into = "i32")]
pub enum Manifold {
    #[default]
    Minus,
    Plus,
}

impl Manifold {
    pub fn sign(self) -> f64 {
        match self {
            Manifold::Minus => -1.0,
            Manifold::Plus => 1.0,
        }
    }
}

impl TryFrom<i32> for Manifold {
    type Error = String;
    fn try_from(v: i32) -> std::result::Result<Self, String> {
        match v {
            -1 => Ok(Manifold::Minus),
            1 => Ok(Manifold::Plus),
            _ => Err(format!("ms must be -1 or +1, got {v}")),
        }
    }
}

impl From<Manifold> for i32 {
    fn from(m: Manifold) -> i32 {
        match m {
            Manifold::Minus => -1,
            Manifold::Plus => 1,
        }
    }
}

/// Bare ¹³C Larmor frequency 2π·γ_C·B in rad/µs.
pub fn larmor(b_field_gauss: f64, gamma_c_khz_per_g: f64) -> Result<f64> {
    if !(b_field_gauss > 0.0 && b_field_gauss.is_finite()) {
        return Err(Error::param(
            "b_field",
            format!("must be > 0, got {b_field_gauss}"),
        ));
    }
    if !(gamma_c_khz_per_g > 0.0 && gamma_c_khz_per_g.is_finite()) {
        return Err(Error::param(
            "gamma_c",
            format!("must be > 0, got {gamma_c_khz_per_g}"),
        ));
    }
    Ok(khz_to_angular(gamma_c_khz_per_g * b_field_gauss))
}

/// Everything the forward model needs: field, bath spectrum and resolved nuclei.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EnvironmentFile", into = "EnvironmentFile")]
pub struct EnvironmentModel {
    /// Gauss.
    pub b_field: f64,
    /// kHz/G.
    pub gamma_c: f64,
    pub nsd: Nsd,
    pub nuclei: Vec<NuclearCoupling>,
    pub ms: Manifold,
}

impl EnvironmentModel {
    pub fn new(b_field: f64, nsd: Nsd, nuclei: Vec<NuclearCoupling>, ms: Manifold) -> Result<Self> {
        Self::with_gamma(b_field, DEFAULT_GAMMA_C_KHZ_PER_G, nsd, nuclei, ms)
    }

    pub fn with_gamma(
        b_field: f64,
        gamma_c: f64,
        nsd: Nsd,
        nuclei: Vec<NuclearCoupling>,
        ms: Manifold,
    ) -> Result<Self> {
        larmor(b_field, gamma_c)?;
        Ok(Self {
            b_field,
            gamma_c,
            nsd,
            nuclei,
            ms,
        })
    }

    /// ω_L in rad/µs.
    pub fn larmor(&self) -> f64 {
        khz_to_angular(self.gamma_c * self.b_field)
    }

    pub fn with_nsd(&self, nsd: Nsd) -> Self {
        Self {
            nsd,
            ..self.clone()
        }
    }
}

#[derive(Serialize, Deserialize)]
struct EnvironmentFile {
    b_field_gauss: f64,
    #[serde(default = "default_gamma")]
    gamma_c_khz_per_g: f64,
    #[serde(default)]
    ms: Manifold,
    nsd: Nsd,
    #[serde(default)]
    nuclei: Vec<NuclearCoupling>,
}

fn default_gamma() -> f64 {
    DEFAULT_GAMMA_C_KHZ_PER_G
}

impl TryFrom<EnvironmentFile> for EnvironmentModel {
    type Error = Error;
    fn try_from(f: EnvironmentFile) -> Result<Self> {
        EnvironmentModel::with_gamma(f.b_field_gauss, f.gamma_c_khz_per_g, f.nsd, f.nuclei, f.ms)
    }
}

impl From<EnvironmentModel> for EnvironmentFile {
    fn from(e: EnvironmentModel) -> Self {
        Self {
            b_field_gauss: e.b_field,
            gamma_c_khz_per_g: e.gamma_c,
            ms: e.ms,
            nsd: e.nsd,
            nuclei: e.nuclei,
        }
    }
}

/// Pulse-sequence family. AXY carries its intra-block compression r_m.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SequenceFamily {
    Cpmg,
    Xy8,
    Udd,
    Axy { r_m: f64 },
    Custom,
}

impl SequenceFamily {
    /// Families whose pulses sit at (2k−1)·t1.
    pub fn is_equidistant(self) -> bool {
        matches!(self, SequenceFamily::Cpmg | SequenceFamily::Xy8)
    }
}

impl fmt::Display for SequenceFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SequenceFamily::Cpmg => f.write_str("cpmg"),
            SequenceFamily::Xy8 => f.write_str("xy8"),
            SequenceFamily::Udd => f.write_str("udd"),
            SequenceFamily::Axy { r_m } if *r_m == 1.0 => f.write_str("axy"),
            SequenceFamily::Axy { r_m } => write!(f, "axy:{r_m}"),
            SequenceFamily::Custom => f.write_str("custom"),
        }
    }
}

impl FromStr for SequenceFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "cpmg" => return Ok(SequenceFamily::Cpmg),
            "xy8" => return Ok(SequenceFamily::Xy8),
            "udd" => return Ok(SequenceFamily::Udd),
            "axy" => return Ok(SequenceFamily::Axy { r_m: 1.0 }),
            "custom" => return Ok(SequenceFamily::Custom),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("axy:") {
            let r_m: f64 = rest
                .parse()
                .map_err(|_| Error::param("family", format!("bad r_m in `{s}`")))?;
            return Ok(SequenceFamily::Axy { r_m });
        }
        Err(Error::param(
            "family",
            format!("unknown sequence family `{s}`"),
        ))
    }
}

impl Serialize for SequenceFamily {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SequenceFamily {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One measured or simulated coherence point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub n: usize,
    /// µs
    pub total_time: f64,
    pub p: f64,
    pub sigma_p: f64,
}

/// Coherence records of one sequence family, optionally at fixed t1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceTrace {
    pub family: SequenceFamily,
    /// Half interpulse spacing (µs), set for equidistant families.
    pub t1: Option<f64>,
    pub records: Vec<TraceRecord>,
}

impl CoherenceTrace {
    pub fn new(family: SequenceFamily, t1: Option<f64>, records: Vec<TraceRecord>) -> Result<Self> {
        let trace = Self {
            family,
            t1,
            records,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::InvalidData("trace has no records".into()));
        }
        for (i, r) in self.records.iter().enumerate() {
            if !(r.sigma_p > 0.0 && r.sigma_p.is_finite()) {
                return Err(Error::InvalidData(format!(
                    "record {i}: sigma_p must be > 0"
                )));
            }
            if !r.p.is_finite() {
                return Err(Error::InvalidData(format!("record {i}: p is not finite")));
            }
            if !(r.total_time > 0.0 && r.total_time.is_finite()) {
                return Err(Error::InvalidData(format!(
                    "record {i}: total_time must be > 0"
                )));
            }
        }
        if let Some(t1) = self.t1 {
            if !(t1 > 0.0) {
                return Err(Error::InvalidData("t1 must be > 0".into()));
            }
            if self.family.is_equidistant() {
                for (i, r) in self.records.iter().enumerate() {
                    let expected = 2.0 * r.n as f64 * t1;
                    if ((r.total_time - expected) / expected).abs() > 1e-9 {
                        return Err(Error::InvalidData(format!(
                            "record {i}: total_time {} inconsistent with 2·n·t1 = {expected}",
                            r.total_time
                        )));
                    }
                }
            }
        } else if self.family.is_equidistant() {
            return Err(Error::InvalidData(format!(
                "{} trace needs t1",
                self.family
            )));
        }
        Ok(())
    }
}

/// One point of a 1/T2^L scan.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    /// Probe frequency π/(2·t1), rad/µs.
    pub omega: f64,
    /// 1/T2^L, 1/µs.
    pub rate: f64,
    pub rate_err: f64,
    /// Filter harmonic this point was planned for.
    pub harmonic_hint: u32,
}

impl RatePoint {
    pub fn new(omega: f64, rate: f64, rate_err: f64, harmonic_hint: u32) -> Result<Self> {
        if !(omega > 0.0) {
            return Err(Error::param("omega", "must be > 0"));
        }
        if !(rate >= 0.0 && rate.is_finite()) {
            return Err(Error::param("rate", format!("must be >= 0, got {rate}")));
        }
        if !(rate_err > 0.0 && rate_err.is_finite()) {
            return Err(Error::param(
                "rate_err",
                format!("must be > 0, got {rate_err}"),
            ));
        }
        Ok(Self {
            omega,
            rate,
            rate_err,
            harmonic_hint,
        })
    }

    /// Probe spacing t1 = π/(2ω) in µs.
    pub fn t1(&self) -> f64 {
        std::f64::consts::PI / (2.0 * self.omega)
    }
}

/// Probe frequency π/(2·t1) for an equidistant spacing.
pub fn probe_omega(t1: f64) -> f64 {
    std::f64::consts::PI / (2.0 * t1)
}
