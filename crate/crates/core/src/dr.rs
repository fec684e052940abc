//! Doubly-robust estimation of α from
//!
//! ```text
//! P_n[ ω(V) (A - e(V; γ̂)) (H(α) - p0(V; α̂, β̂)) ] = 0
//! ```
//!
//! where H(α) = Y exp(-A αᵀW) for the relative risk and Y - A tanh(αᵀW) for
//! the risk difference. The root is consistent when either the nuisance
//! model or the propensity model is correctly specified.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{build_design, Dataset, DesignMatrix};
use crate::error::{Error, Result};
use crate::linalg;
use crate::mle::{column_sums, NuisanceFit, NuisanceForm, OutcomeModelSpec};
use crate::param_map::{self, TargetMeasure};
use crate::propensity::PropensityFit;

/// Plug-in probabilities are clipped to [FLOOR, 1 - FLOOR] when forming
/// efficient weights.
pub const PROB_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeightKind {
    /// ω(V) = W.
    #[serde(rename = "naive")]
    Naive,
    /// ω(V) = ω_eff(V; α̂, β̂, γ̂), frozen at the plug-in estimates.
    #[serde(rename = "efficient")]
    Efficient,
}

#[derive(Debug, Clone)]
pub struct DrFit {
    pub alpha_dr: DVector<f64>,
    pub alpha_names: Vec<String>,
    pub weight_kind: WeightKind,
    /// n × dim α weight matrix actually used.
    pub weights: DMatrix<f64>,
    /// Which nuisance form supplied p0.
    pub nuisance_form: NuisanceForm,
    pub converged: bool,
    pub iterations: usize,
    pub final_equation_norm: f64,
}

#[derive(Debug, Clone)]
pub struct DrOptions {
    pub max_iter: usize,
    /// Convergence when ‖P_n U‖∞ falls below this.
    pub tol: f64,
    /// Starting value; the MLE α̂ when `None`.
    pub start: Option<DVector<f64>>,
}

impl Default for DrOptions {
    fn default() -> Self {
        DrOptions {
            max_iter: 100,
            tol: 1e-8,
            start: None,
        }
    }
}

fn clip(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Efficient weighting function evaluated row by row.
///
/// RR: `ω = W p1 / ((1-e) p0 (1-p1) + e p1 (1-p0))`.
/// RD: `ω = W (1-ρ²) / ((1-e) p1 (1-p1) + e p0 (1-p0))`, ρ = p1 - p0.
///
/// Both are the conditional expectations over A given V expanded with
/// weights (1-e, e) and simplified.
pub fn efficient_weights(
    p0: &[f64],
    p1: &[f64],
    e: &[f64],
    w: &DesignMatrix,
    measure: TargetMeasure,
) -> Result<DMatrix<f64>> {
    let n = w.nrows();
    if p0.len() != n || p1.len() != n || e.len() != n {
        return Err(Error::spec("efficient weights: length mismatch"));
    }
    let mut out = w.values.clone();
    for i in 0..n {
        let (a, b, ei) = (p0[i], p1[i], e[i]);
        for (name, v) in [("p0", a), ("p1", b), ("e", ei)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Positivity(format!(
                    "row {}: {name} = {v}; need e(V), p0(V), p1(V) in (σ, 1-σ)",
                    i + 1
                )));
            }
        }
        let scale = match measure {
            TargetMeasure::Rr => b / ((1.0 - ei) * a * (1.0 - b) + ei * b * (1.0 - a)),
            TargetMeasure::Rd => {
                let rho = b - a;
                (1.0 - rho * rho) / ((1.0 - ei) * b * (1.0 - b) + ei * a * (1.0 - a))
            }
        };
        out.row_mut(i).scale_mut(scale);
    }
    Ok(out)
}

/// Everything the estimating equation needs, prepared once per dataset.
#[derive(Debug, Clone)]
pub struct DrProblem<'a> {
    pub measure: TargetMeasure,
    pub w: DesignMatrix,
    y: &'a [f64],
    a: &'a [f64],
}

impl<'a> DrProblem<'a> {
    pub fn new(data: &'a Dataset, spec: &OutcomeModelSpec) -> Result<Self> {
        Ok(DrProblem {
            measure: spec.measure,
            w: build_design(data, &spec.w_design)?,
            y: data.y(),
            a: data.a(),
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    fn check(&self, alpha: &DVector<f64>, p0: &[f64], e: &[f64], weights: &DMatrix<f64>) -> Result<()> {
        let n = self.n();
        let k = self.w.ncols();
        if alpha.len() != k || p0.len() != n || e.len() != n || weights.nrows() != n || weights.ncols() != k {
            return Err(Error::spec(format!(
                "estimating function: expected α of length {k}, {n} rows and an {n}×{k} weight matrix"
            )));
        }
        Ok(())
    }

    /// Per-row U_i, n × dim α.
    pub fn u_rows(
        &self,
        alpha: &DVector<f64>,
        p0: &[f64],
        e: &[f64],
        weights: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        self.check(alpha, p0, e, weights)?;
        let theta = &self.w.values * alpha;
        let mut out = weights.clone();
        for i in 0..self.n() {
            let h = param_map::h_transform(self.y[i], self.a[i], theta[i], self.measure);
            out.row_mut(i).scale_mut((self.a[i] - e[i]) * (h - p0[i]));
        }
        Ok(out)
    }

    /// P_n U(α).
    pub fn mean_u(
        &self,
        alpha: &DVector<f64>,
        p0: &[f64],
        e: &[f64],
        weights: &DMatrix<f64>,
    ) -> Result<DVector<f64>> {
        Ok(column_sums(&self.u_rows(alpha, p0, e, weights)?) / self.n() as f64)
    }

    /// P_n[∂U/∂αᵀ], dim α × dim α.
    pub fn jacobian(&self, alpha: &DVector<f64>, e: &[f64], weights: &DMatrix<f64>) -> DMatrix<f64> {
        let k = self.w.ncols();
        let theta = &self.w.values * alpha;
        let mut jac = DMatrix::zeros(k, k);
        for i in 0..self.n() {
            let dh = param_map::h_transform_dtheta(self.y[i], self.a[i], theta[i], self.measure);
            if dh == 0.0 {
                continue;
            }
            let c = (self.a[i] - e[i]) * dh;
            jac += weights.row(i).transpose() * self.w.values.row(i) * c;
        }
        jac / self.n() as f64
    }

    /// Newton iterations with backtracking on ‖P_n U‖₂.
    pub fn solve(
        &self,
        p0: &[f64],
        e: &[f64],
        weights: &DMatrix<f64>,
        start: DVector<f64>,
        opts: &DrOptions,
    ) -> Result<(DVector<f64>, usize, f64)> {
        let mut alpha = start;
        let mut u = self.mean_u(&alpha, p0, e, weights)?;
        let mut norm2 = u.norm();
        let mut iterations = 0;
        while u.amax() >= opts.tol {
            if iterations >= opts.max_iter {
                return Err(Error::Convergence {
                    context: "doubly-robust estimating equation".into(),
                    iterations,
                    norm: u.amax(),
                    last_iterate: alpha.iter().cloned().collect(),
                });
            }
            iterations += 1;
            let jac = self.jacobian(&alpha, e, weights);
            let inv = linalg::inverse_general(&jac, "DR Jacobian (try naive weights or check the W design)", &self.w.column_names)?;
            let dir = -(inv * &u);
            let mut step = 1.0;
            let mut moved = false;
            for _ in 0..50 {
                let cand = &alpha + &dir * step;
                let cu = self.mean_u(&cand, p0, e, weights)?;
                let cn = cu.norm();
                if cn.is_finite() && cn < norm2 {
                    alpha = cand;
                    u = cu;
                    norm2 = cn;
                    moved = true;
                    break;
                }
                step *= 0.5;
            }
            if !moved {
                return Err(Error::Convergence {
                    context: "doubly-robust estimating equation (line search stalled)".into(),
                    iterations,
                    norm: u.amax(),
                    last_iterate: alpha.iter().cloned().collect(),
                });
            }
        }
        Ok((alpha, iterations, u.amax()))
    }
}

/// Weight matrix of the requested kind for the given plug-ins.
pub fn weights_for(
    kind: WeightKind,
    w: &DesignMatrix,
    nuisance: &NuisanceFit,
    prop: &PropensityFit,
) -> Result<DMatrix<f64>> {
    match kind {
        WeightKind::Naive => Ok(w.values.clone()),
        WeightKind::Efficient => {
            let p0: Vec<f64> = nuisance.fitted.iter().map(|r| clip(r.p0)).collect();
            let p1: Vec<f64> = nuisance.fitted.iter().map(|r| clip(r.p1)).collect();
            let e: Vec<f64> = prop.fitted_e.iter().map(|&v| clip(v)).collect();
            efficient_weights(&p0, &p1, &e, w, nuisance.spec.measure)
        }
    }
}

fn check_plugins(data: &Dataset, nuisance: &NuisanceFit, prop: &PropensityFit) -> Result<()> {
    if nuisance.n() != data.n() || prop.fitted_e.len() != data.n() {
        return Err(Error::spec("plug-in fits were computed on a different dataset"));
    }
    Ok(())
}

/// P_n U(α) with plug-ins from fitted nuisance and propensity models.
pub fn estimating_function(
    alpha: &DVector<f64>,
    nuisance: &NuisanceFit,
    prop: &PropensityFit,
    weights: &DMatrix<f64>,
    data: &Dataset,
    spec: &OutcomeModelSpec,
) -> Result<DVector<f64>> {
    check_plugins(data, nuisance, prop)?;
    DrProblem::new(data, spec)?.mean_u(alpha, &nuisance.p0(), &prop.fitted_e, weights)
}

pub fn solve_dr(
    data: &Dataset,
    spec: &OutcomeModelSpec,
    nuisance: &NuisanceFit,
    prop: &PropensityFit,
    weight_kind: WeightKind,
) -> Result<DrFit> {
    solve_dr_with(data, spec, nuisance, prop, weight_kind, &DrOptions::default())
}

pub fn solve_dr_with(
    data: &Dataset,
    spec: &OutcomeModelSpec,
    nuisance: &NuisanceFit,
    prop: &PropensityFit,
    weight_kind: WeightKind,
    opts: &DrOptions,
) -> Result<DrFit> {
    let problem = DrProblem::new(data, spec)?;
    let weights = weights_for(weight_kind, &problem.w, nuisance, prop)?;
    solve_dr_weights(&problem, nuisance, prop, weights, weight_kind, opts)
}

/// Solves with an explicit weight matrix.
pub fn solve_dr_weights(
    problem: &DrProblem<'_>,
    nuisance: &NuisanceFit,
    prop: &PropensityFit,
    weights: DMatrix<f64>,
    weight_kind: WeightKind,
    opts: &DrOptions,
) -> Result<DrFit> {
    if nuisance.n() != problem.n() || prop.fitted_e.len() != problem.n() {
        return Err(Error::spec("plug-in fits were computed on a different dataset"));
    }
    let start = opts.start.clone().unwrap_or_else(|| nuisance.alpha.clone());
    let (alpha_dr, iterations, norm) =
        problem.solve(&nuisance.p0(), &prop.fitted_e, &weights, start, opts)?;
    Ok(DrFit {
        alpha_dr,
        alpha_names: problem.w.column_names.clone(),
        weight_kind,
        weights,
        nuisance_form: nuisance.spec.nuisance_form,
        converged: true,
        iterations,
        final_equation_norm: norm,
    })
}
