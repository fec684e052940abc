//! The bivariate link between (θ, φ) and the arm-specific risks (p0, p1).
//!
//! θ is the log relative risk or the arctanh of the risk difference, φ is the
//! log odds product `log[p0 p1 / ((1 - p0)(1 - p1))]`. The map is a smooth
//! bijection from R² onto (0,1)², and its inverse has a closed form as the
//! root of a quadratic.
//!
//! The inverse is evaluated through the rationalized ("conjugate") root, which
//! has no 0/0 at φ = 0, and is rescaled so the dominant exponential is
//! factored out. Each measure is computed through whichever arm has the
//! smaller risk, and the other arm is recovered from the target relation, so
//! no subtraction of nearly equal quantities occurs.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest double strictly below one.
const ONE_MINUS: f64 = 1.0 - f64::EPSILON / 2.0;
const RD_CLAMP: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TargetMeasure {
    /// θ = log relative risk.
    #[serde(rename = "rr", alias = "RR")]
    Rr,
    /// θ = arctanh risk difference.
    #[serde(rename = "rd", alias = "RD")]
    Rd,
}

impl TargetMeasure {
    pub fn label(self) -> &'static str {
        match self {
            TargetMeasure::Rr => "rr",
            TargetMeasure::Rd => "rd",
        }
    }

    /// RR = exp(θ) or RD = tanh(θ).
    pub fn effect(self, theta: f64) -> f64 {
        match self {
            TargetMeasure::Rr => theta.exp(),
            TargetMeasure::Rd => theta.tanh(),
        }
    }
}

impl std::str::FromStr for TargetMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rr" => Ok(TargetMeasure::Rr),
            "rd" => Ok(TargetMeasure::Rd),
            other => Err(Error::spec(format!("unknown measure '{other}' (rr|rd)"))),
        }
    }
}

impl std::fmt::Display for TargetMeasure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// One point of the link with both parameterizations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkPoint {
    pub theta: f64,
    pub phi: f64,
    pub p0: f64,
    pub p1: f64,
}

impl LinkPoint {
    /// tanh θ, the risk difference. Only meaningful for [`TargetMeasure::Rd`].
    pub fn rho(&self) -> f64 {
        self.theta.tanh()
    }
}

/// ∂(p0, p1)/∂(θ, φ).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Partials {
    pub dp0_dtheta: f64,
    pub dp0_dphi: f64,
    pub dp1_dtheta: f64,
    pub dp1_dphi: f64,
}

impl Partials {
    /// (∂p_A/∂θ, ∂p_A/∂φ) for exposure arm `a`.
    pub fn arm(&self, a: f64) -> (f64, f64) {
        if a == 0.0 {
            (self.dp0_dtheta, self.dp0_dphi)
        } else {
            (self.dp1_dtheta, self.dp1_dphi)
        }
    }
}

fn check_probability(p: f64, name: &str) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} = {p} is not in the open unit interval")))
    }
}

fn check_finite(x: f64, name: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} = {x} is not finite")))
    }
}

/// (p0, p1) → (θ, φ).
pub fn forward(p0: f64, p1: f64, measure: TargetMeasure) -> Result<(f64, f64)> {
    check_probability(p0, "p0")?;
    check_probability(p1, "p1")?;
    let theta = match measure {
        TargetMeasure::Rr => p1.ln() - p0.ln(),
        TargetMeasure::Rd => (p1 - p0).clamp(-1.0 + RD_CLAMP, 1.0 - RD_CLAMP).atanh(),
    };
    let phi = p0.ln() + p1.ln() - (-p0).ln_1p() - (-p1).ln_1p();
    Ok((theta, phi))
}

/// (θ, φ) → (p0, p1), both strictly inside (0, 1).
pub fn inverse(theta: f64, phi: f64, measure: TargetMeasure) -> Result<(f64, f64)> {
    check_finite(theta, "theta")?;
    check_finite(phi, "phi")?;
    Ok(inverse_unchecked(theta, phi, measure))
}

/// [`inverse`] without input validation, for inner loops over already
/// finite linear predictors.
pub fn inverse_unchecked(theta: f64, phi: f64, measure: TargetMeasure) -> (f64, f64) {
    let (p0, p1) = match measure {
        TargetMeasure::Rr => {
            if theta < 0.0 {
                let p0 = rr_lower_arm(theta, phi);
                (p0, p0 * theta.exp())
            } else {
                let p1 = rr_lower_arm(-theta, phi);
                (p1 * (-theta).exp(), p1)
            }
        }
        TargetMeasure::Rd => {
            if theta >= 0.0 {
                let p0 = rd_lower_arm(theta, phi);
                (p0, p0 + theta.tanh())
            } else {
                let p1 = rd_lower_arm(-theta, phi);
                (p1 - theta.tanh(), p1)
            }
        }
    };
    (clamp_open(p0), clamp_open(p1))
}

fn clamp_open(p: f64) -> f64 {
    p.clamp(f64::MIN_POSITIVE, ONE_MINUS)
}

/// Risk of the unexposed arm for log-RR `t <= 0`:
/// `2 / [(1 + e^t) + sqrt((e^t - 1)^2 + 4 e^(t - φ))]`.
fn rr_lower_arm(t: f64, phi: f64) -> f64 {
    debug_assert!(t <= 0.0);
    let et = t.exp();
    let em1 = t.exp_m1();
    let s = t - phi;
    if s > 0.0 {
        // factor e^(s/2) out of the square root
        let r = (-0.5 * s).exp();
        2.0 * r / ((1.0 + et) * r + (em1 * em1 * r * r + 4.0).sqrt())
    } else {
        2.0 / ((1.0 + et) + (em1 * em1 + 4.0 * s.exp()).sqrt())
    }
}

/// Risk of the unexposed arm for arctanh-RD `t >= 0`, i.e. ρ = tanh t >= 0:
/// `2 E (1 - ρ) / [E (2 - ρ) + ρ + sqrt(ρ² (E - 1)² + 4E)]` with E = e^φ.
fn rd_lower_arm(t: f64, phi: f64) -> f64 {
    debug_assert!(t >= 0.0);
    let rho = t.tanh();
    // 1 - tanh t without cancellation
    let e2 = (-2.0 * t).exp();
    let c = 2.0 * e2 / (1.0 + e2);
    if phi > 0.0 {
        let inv_e = (-phi).exp();
        let d = -(-phi).exp_m1();
        2.0 * c / ((1.0 + c) + rho * inv_e + (rho * rho * d * d + 4.0 * inv_e).sqrt())
    } else {
        let e = phi.exp();
        let d = phi.exp_m1();
        2.0 * e * c / (e * (1.0 + c) + rho + (rho * rho * d * d + 4.0 * e).sqrt())
    }
}

/// Partial derivatives of the inverse map, from the inverse Jacobian of
/// [`forward`].
pub fn inverse_partials(theta: f64, phi: f64, measure: TargetMeasure) -> Result<Partials> {
    check_finite(theta, "theta")?;
    check_finite(phi, "phi")?;
    let (p0, p1) = inverse_unchecked(theta, phi, measure);
    Ok(partials_at(theta, p0, p1, measure))
}

/// Partials given an already inverted point.
pub fn partials_at(theta: f64, p0: f64, p1: f64, measure: TargetMeasure) -> Partials {
    let (q0, q1) = (1.0 - p0, 1.0 - p1);
    match measure {
        TargetMeasure::Rr => {
            let s = q0 + q1;
            Partials {
                dp0_dtheta: -p0 * q0 / s,
                dp0_dphi: p0 * q0 * q1 / s,
                dp1_dtheta: p1 * q1 / s,
                dp1_dphi: p1 * q0 * q1 / s,
            }
        }
        TargetMeasure::Rd => {
            let v0 = p0 * q0;
            let v1 = p1 * q1;
            let s = v0 + v1;
            let sech2 = theta.cosh().powi(-2);
            Partials {
                dp0_dtheta: -sech2 * v0 / s,
                dp0_dphi: v0 * v1 / s,
                dp1_dtheta: sech2 * v1 / s,
                dp1_dphi: v0 * v1 / s,
            }
        }
    }
}

/// Outcome transform whose conditional mean given V is p0 at the true θ:
/// RR `y exp(-a θ)`, RD `y - a tanh θ`.
pub fn h_transform(y: f64, a: f64, theta: f64, measure: TargetMeasure) -> f64 {
    match measure {
        TargetMeasure::Rr => {
            if a == 0.0 {
                y
            } else {
                y * (-a * theta).exp()
            }
        }
        TargetMeasure::Rd => y - a * theta.tanh(),
    }
}

/// ∂H/∂θ.
pub fn h_transform_dtheta(y: f64, a: f64, theta: f64, measure: TargetMeasure) -> f64 {
    if a == 0.0 {
        return 0.0;
    }
    match measure {
        TargetMeasure::Rr => -a * y * (-a * theta).exp(),
        TargetMeasure::Rd => -a * theta.cosh().powi(-2),
    }
}

/// Tabulates the inverse map on a θ × φ grid, θ-major.
pub fn emit_curves(measure: TargetMeasure, thetas: &[f64], phis: &[f64]) -> Result<Vec<LinkPoint>> {
    if thetas.is_empty() || phis.is_empty() {
        return Err(Error::spec("curve grids must be non-empty"));
    }
    let mut rows = Vec::with_capacity(thetas.len() * phis.len());
    for &theta in thetas {
        for &phi in phis {
            let (p0, p1) = inverse(theta, phi, measure)?;
            rows.push(LinkPoint { theta, phi, p0, p1 });
        }
    }
    Ok(rows)
}

/// Writes curve rows as CSV with header `theta,phi,p0,p1`.
pub fn write_curves_csv<W: Write>(out: W, rows: &[LinkPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["theta", "phi", "p0", "p1"])?;
    for r in rows {
        w.write_record([
            r.theta.to_string(),
            r.phi.to_string(),
            r.p0.to_string(),
            r.p1.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
