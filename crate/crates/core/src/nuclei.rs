//! Coherent modulation M(T) imprinted by individually resolved nuclei.
//!
//! Each nucleus precesses under H0 = ω_L·I_z while the probe is in |0⟩ and
//! under H1 = (m_s·ω∥ + ω_L)·I_z + m_s·ω⊥·I_x while it is in |m_s⟩, with
//! I = σ/2. Every π pulse swaps the two, so the nuclear propagators
//! conditioned on the two probe branches are
//!
//!   U0 = ⋯ e^{−iH0τ3} e^{−iH1τ2} e^{−iH0τ1},  U1 = ⋯ e^{−iH1τ3} e^{−iH0τ2} e^{−iH1τ1},
//!
//! and the probe coherence is scaled by M = Re Tr(U0 U1†)/2.

use crate::model::{Manifold, NuclearCoupling};
use crate::sequences::PulseSequence;

/// Element of SU(2) written as w − i(x σx + y σy + z σz), w² + |v|² = 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Su2 {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Su2 {
    pub const IDENTITY: Su2 = Su2 {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// exp(−i·τ·(a σz + b σx)/2), i.e. evolution under a·I_z + b·I_x.
    pub fn evolution(a: f64, b: f64, tau: f64) -> Su2 {
        let norm = a.hypot(b);
        if norm == 0.0 {
            return Su2::IDENTITY;
        }
        let theta = 0.5 * norm * tau;
        let s = theta.sin() / norm;
        Su2 {
            w: theta.cos(),
            x: s * b,
            y: 0.0,
            z: s * a,
        }
    }

    /// Matrix product self·rhs.
    pub fn times(self, rhs: Su2) -> Su2 {
        let (a, b) = (self, rhs);
        Su2 {
            w: a.w * b.w - (a.x * b.x + a.y * b.y + a.z * b.z),
            x: a.w * b.x + b.w * a.x + (a.y * b.z - a.z * b.y),
            y: a.w * b.y + b.w * a.y + (a.z * b.x - a.x * b.z),
            z: a.w * b.z + b.w * a.z + (a.x * b.y - a.y * b.x),
        }
    }

    /// Re Tr(self·other†)/2.
    pub fn overlap(self, other: Su2) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }
}

/// The two conditional generators, as (I_z, I_x) coefficients.
fn generators(c: &NuclearCoupling, omega_l: f64, ms: Manifold) -> ((f64, f64), (f64, f64)) {
    let s = ms.sign();
    (
        (omega_l, 0.0),
        (s * c.omega_par + omega_l, s * c.omega_perp),
    )
}

/// Exact M for an arbitrary pulse pattern, from the conditional propagators.
pub fn conditional_modulation(
    seq: &PulseSequence,
    c: &NuclearCoupling,
    omega_l: f64,
    ms: Manifold,
) -> f64 {
    let ((a0, b0), (a1, b1)) = generators(c, omega_l, ms);
    let mut u0 = Su2::IDENTITY;
    let mut u1 = Su2::IDENTITY;
    for (k, tau) in seq.free_intervals().into_iter().enumerate() {
        let e0 = Su2::evolution(a0, b0, tau);
        let e1 = Su2::evolution(a1, b1, tau);
        if k % 2 == 0 {
            u0 = e0.times(u0);
            u1 = e1.times(u1);
        } else {
            u0 = e1.times(u0);
            u1 = e0.times(u1);
        }
    }
    u0.overlap(u1).clamp(-1.0, 1.0)
}

/// Product of M over non-interacting nuclei.
pub fn modulation_product(
    seq: &PulseSequence,
    nuclei: &[NuclearCoupling],
    omega_l: f64,
    ms: Manifold,
) -> f64 {
    nuclei
        .iter()
        .map(|c| conditional_modulation(seq, c, omega_l, ms))
        .product()
}

/// How the closed form is continued to non-even pulse counts.
///
/// Both give the same M at every even n; they differ in the apparent
/// periodicity of M as a function of n, which matters for fit convergence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PhaseConvention {
    /// sin²(nφ/2)/sin²(φ/2).
    #[default]
    Phi,
    /// Written in φ' = π − φ: sin²(nφ'/2)/cos²(φ'/2).
    PhiPrime,
}

/// Quantities shared by the closed form and its envelope at one spacing.
struct Equidistant {
    /// 2(ω⊥/ω1)² sin²(ω1t1/2) sin²(ωLt1/2)
    prefactor: f64,
    cos_phi: f64,
}

fn equidistant_terms(t1: f64, c: &NuclearCoupling, omega_l: f64, ms: Manifold) -> Equidistant {
    let a1 = ms.sign() * c.omega_par + omega_l;
    let omega1 = a1.hypot(c.omega_perp);
    if omega1 == 0.0 {
        return Equidistant {
            prefactor: 0.0,
            cos_phi: 1.0,
        };
    }
    let r = c.omega_perp / omega1;
    let s1 = (0.5 * omega1 * t1).sin();
    let sl = (0.5 * omega_l * t1).sin();
    let cos_phi = a1 / omega1 * (omega1 * t1).sin() * (omega_l * t1).sin()
        - (omega1 * t1).cos() * (omega_l * t1).cos();
    Equidistant {
        prefactor: 2.0 * r * r * s1 * s1 * sl * sl,
        cos_phi: cos_phi.clamp(-1.0, 1.0),
    }
}

/// sin²(nφ/2)/sin²(φ/2) with the small-φ limit n²(1 − (n²−1)φ²/12).
fn dirichlet_sq(n: f64, phi: f64) -> f64 {
    if phi.abs() < 1e-6 {
        return n * n * (1.0 - (n * n - 1.0) * phi * phi / 12.0);
    }
    let num = (0.5 * n * phi).sin();
    let den = (0.5 * phi).sin();
    num * num / (den * den)
}

/// Closed-form M after `n` equidistant pulses at spacing 2·t1, continued to
/// real n according to `convention`. Physical for even n only.
pub fn modulation_curve(
    n: f64,
    t1: f64,
    c: &NuclearCoupling,
    omega_l: f64,
    ms: Manifold,
    convention: PhaseConvention,
) -> f64 {
    let e = equidistant_terms(t1, c, omega_l, ms);
    if e.prefactor == 0.0 {
        return 1.0;
    }
    let phi = e.cos_phi.acos();
    let ratio = match convention {
        PhaseConvention::Phi => dirichlet_sq(n, phi),
        PhaseConvention::PhiPrime => {
            let phi_p = std::f64::consts::PI - phi;
            let half_cos = (0.5 * phi_p).cos();
            if half_cos.abs() < 1e-6 {
                // cos(φ'/2) = sin(φ/2); numerators agree at even n
                dirichlet_sq(n, phi)
            } else {
                let num = (0.5 * n * phi_p).sin();
                num * num / (half_cos * half_cos)
            }
        }
    };
    1.0 - e.prefactor * ratio
}

/// Closed-form M for an even number `n` of equidistant pulses.
pub fn analytic_modulation(
    n: usize,
    t1: f64,
    c: &NuclearCoupling,
    omega_l: f64,
    ms: Manifold,
) -> f64 {
    debug_assert!(n.is_multiple_of(2), "closed form holds for even n");
    modulation_curve(n as f64, t1, c, omega_l, ms, PhaseConvention::Phi)
}

/// Envelope of 1 − M over n at fixed spacing, clipped to [0, 2].
pub fn modulation_amplitude(c: &NuclearCoupling, omega_l: f64, t1: f64, ms: Manifold) -> f64 {
    let e = equidistant_terms(t1, c, omega_l, ms);
    if e.prefactor == 0.0 {
        return 0.0;
    }
    let half = 0.5 * (1.0 - e.cos_phi);
    if half <= 0.0 {
        return 2.0;
    }
    (e.prefactor / half).clamp(0.0, 2.0)
}
