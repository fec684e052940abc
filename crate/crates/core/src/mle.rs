//! Maximum-likelihood fitting of the target model θ(V) = αᵀW jointly with a
//! nuisance model, either the log odds product φ(V) = βᵀZ (unconstrained) or
//! a linear baseline risk p0(V) = βᵀZ (constrained, kept as a comparator).

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::design::{build_design, Covariates, Dataset, DesignMatrix, DesignSpec};
use crate::error::{Error, Result};
use crate::param_map::{self, TargetMeasure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NuisanceForm {
    /// φ(V) = βᵀZ, the log odds product.
    #[serde(rename = "log_op")]
    LogOp,
    /// p0(V) = βᵀZ.
    #[serde(rename = "linear_p0")]
    LinearP0,
}

impl NuisanceForm {
    pub fn label(self) -> &'static str {
        match self {
            NuisanceForm::LogOp => "log_op",
            NuisanceForm::LinearP0 => "linear_p0",
        }
    }
}

impl std::str::FromStr for NuisanceForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log_op" | "log-op" => Ok(NuisanceForm::LogOp),
            "linear_p0" | "linear-p0" => Ok(NuisanceForm::LinearP0),
            _ => Err(Error::spec(format!("unknown nuisance form '{s}' (expected log_op or linear_p0)"))),
        }
    }
}

impl std::fmt::Display for NuisanceForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModelSpec {
    pub measure: TargetMeasure,
    pub w_design: DesignSpec,
    pub z_design: DesignSpec,
    pub nuisance_form: NuisanceForm,
}

impl OutcomeModelSpec {
    pub fn new(measure: TargetMeasure, w_design: DesignSpec, z_design: DesignSpec) -> Self {
        OutcomeModelSpec {
            measure,
            w_design,
            z_design,
            nuisance_form: NuisanceForm::LogOp,
        }
    }

    pub fn with_nuisance_form(mut self, form: NuisanceForm) -> Self {
        self.nuisance_form = form;
        self
    }

    pub fn dim_alpha(&self) -> usize {
        self.w_design.n_columns()
    }

    pub fn dim_beta(&self) -> usize {
        self.z_design.n_columns()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Convergence when the max-norm of the summed score falls below this.
    pub score_tol: f64,
    /// ... or when an accepted step changes the log-likelihood by less than
    /// this relative amount.
    pub rel_loglik_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 200,
            score_tol: 1e-8,
            rel_loglik_tol: 1e-12,
        }
    }
}

/// Per-row fitted quantities. `nuisance_lp` is φ for the log-OP nuisance and
/// the linear predictor of p0 for the linear baseline nuisance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FittedRow {
    pub theta: f64,
    pub nuisance_lp: f64,
    pub p0: f64,
    pub p1: f64,
}

#[derive(Debug, Clone)]
pub struct NuisanceFit {
    pub spec: OutcomeModelSpec,
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    pub alpha_names: Vec<String>,
    pub beta_names: Vec<String>,
    pub loglik: f64,
    pub fitted: Vec<FittedRow>,
    /// Negative Hessian of the summed log-likelihood at the optimum, ordered
    /// (α, β).
    pub observed_information: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub score_norm: f64,
    /// Log-likelihood after each accepted step of the final (untempered)
    /// ascent, starting value first.
    pub loglik_trace: Vec<f64>,
    pub warnings: Vec<String>,
}

impl NuisanceFit {
    pub fn n(&self) -> usize {
        self.fitted.len()
    }

    /// (α, β) stacked.
    pub fn params(&self) -> DVector<f64> {
        stack(&self.alpha, &self.beta)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.alpha_names
            .iter()
            .map(|n| format!("alpha:{n}"))
            .chain(self.beta_names.iter().map(|n| format!("beta:{n}")))
            .collect()
    }

    pub fn p0(&self) -> Vec<f64> {
        self.fitted.iter().map(|r| r.p0).collect()
    }

    pub fn p1(&self) -> Vec<f64> {
        self.fitted.iter().map(|r| r.p1).collect()
    }
}

pub(crate) fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).cloned())
}

/// Outcome model prepared on one dataset: design matrices plus responses.
#[derive(Debug, Clone)]
pub struct OutcomeModel<'a> {
    pub spec: &'a OutcomeModelSpec,
    pub w: DesignMatrix,
    pub z: DesignMatrix,
    /// Outcomes; fractional only for the tempered barrier problems.
    y: Cow<'a, [f64]>,
    a: &'a [f64],
}

/// Probabilities for one row, `None` when a linear baseline leaves (0,1)
/// for the observed arm.
#[derive(Debug, Clone, Copy)]
struct RowEval {
    theta: f64,
    lp: f64,
    p0: f64,
    p1: f64,
}

impl<'a> OutcomeModel<'a> {
    pub fn new(data: &'a Dataset, spec: &'a OutcomeModelSpec) -> Result<Self> {
        let w = build_design(data, &spec.w_design)?;
        let z = build_design(data, &spec.z_design)?;
        Ok(OutcomeModel {
            spec,
            w,
            z,
            y: Cow::Borrowed(data.y()),
            a: data.a(),
        })
    }

    /// The same model with outcomes pulled toward 1/2: maximizing it is
    /// maximizing the log-likelihood plus the barrier μ Σ log p_A(1 - p_A).
    fn tempered(&self, mu: f64) -> OutcomeModel<'a> {
        let mut m = self.clone();
        m.y = Cow::Owned(self.y.iter().map(|&y| (y + mu) / (1.0 + 2.0 * mu)).collect());
        m
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim_alpha(&self) -> usize {
        self.w.ncols()
    }

    pub fn dim_beta(&self) -> usize {
        self.z.ncols()
    }

    pub fn dim(&self) -> usize {
        self.dim_alpha() + self.dim_beta()
    }

    fn split(&self, params: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let ka = self.dim_alpha();
        (
            params.rows(0, ka).into_owned(),
            params.rows(ka, self.dim_beta()).into_owned(),
        )
    }

    fn check_dims(&self, alpha: &DVector<f64>, beta: &DVector<f64>) -> Result<()> {
        if alpha.len() != self.dim_alpha() || beta.len() != self.dim_beta() {
            return Err(Error::spec(format!(
                "parameter dimensions ({}, {}) do not match designs ({}, {})",
                alpha.len(),
                beta.len(),
                self.dim_alpha(),
                self.dim_beta()
            )));
        }
        if alpha.iter().chain(beta.iter()).any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite parameter"));
        }
        Ok(())
    }

    fn rows(&self, alpha: &DVector<f64>, beta: &DVector<f64>) -> Vec<RowEval> {
        let theta = &self.w.values * alpha;
        let lp = &self.z.values * beta;
        let measure = self.spec.measure;
        theta
            .iter()
            .zip(lp.iter())
            .map(|(&t, &l)| {
                let (p0, p1) = match self.spec.nuisance_form {
                    NuisanceForm::LogOp => param_map::inverse_unchecked(t, l, measure),
                    NuisanceForm::LinearP0 => linear_p0_arms(t, l, measure),
                };
                RowEval { theta: t, lp: l, p0, p1 }
            })
            .collect()
    }

    /// Baseline risks p0(V; α, β) for every row.
    pub fn p0_values(&self, alpha: &DVector<f64>, beta: &DVector<f64>) -> Vec<f64> {
        self.rows(alpha, beta).iter().map(|r| r.p0).collect()
    }

    fn fitted_rows(&self, alpha: &DVector<f64>, beta: &DVector<f64>) -> Vec<FittedRow> {
        self.rows(alpha, beta)
            .into_iter()
            .map(|r| FittedRow {
                theta: r.theta,
                nuisance_lp: r.lp,
                p0: r.p0,
                p1: r.p1,
            })
            .collect()
    }

    /// Summed log-likelihood, `-inf` when a linear baseline puts an observed
    /// arm's risk outside (0, 1).
    pub fn log_likelihood(&self, alpha: &DVector<f64>, beta: &DVector<f64>) -> Result<f64> {
        self.check_dims(alpha, beta)?;
        Ok(self.loglik_unchecked(alpha, beta))
    }

    fn loglik_unchecked(&self, alpha: &DVector<f64>, beta: &DVector<f64>) -> f64 {
        let mut total = 0.0;
        for (i, r) in self.rows(alpha, beta).iter().enumerate() {
            let p = if self.a[i] == 0.0 { r.p0 } else { r.p1 };
            if !(p > 0.0 && p < 1.0) {
                return f64::NEG_INFINITY;
            }
            let y = self.y[i];
            if y > 0.0 {
                total += y * p.ln();
            }
            if y < 1.0 {
                total += (1.0 - y) * (-p).ln_1p();
            }
        }
        total
    }

    /// Per-row score contributions, n × (dim α + dim β).
    pub fn score_rows(&self, alpha: &DVector<f64>, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_dims(alpha, beta)?;
        let (ka, kb) = (self.dim_alpha(), self.dim_beta());
        let mut out = DMatrix::zeros(self.n(), ka + kb);
        for (i, r) in self.rows(alpha, beta).iter().enumerate() {
            let a = self.a[i];
            let p = if a == 0.0 { r.p0 } else { r.p1 };
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::domain(format!(
                    "row {}: fitted risk {p} outside (0,1); the linear baseline model is infeasible here",
                    i + 1
                )));
            }
            let y = self.y[i];
            let resid = y / p - (1.0 - y) / (1.0 - p);
            let (d_theta, d_lp) = self.arm_derivatives(r, a);
            for j in 0..ka {
                out[(i, j)] = resid * d_theta * self.w.values[(i, j)];
            }
            for j in 0..kb {
                out[(i, ka + j)] = resid * d_lp * self.z.values[(i, j)];
            }
        }
        Ok(out)
    }

    /// (∂p_A/∂θ, ∂p_A/∂lp) for the row's observed arm.
    fn arm_derivatives(&self, r: &RowEval, a: f64) -> (f64, f64) {
        let measure = self.spec.measure;
        match self.spec.nuisance_form {
            NuisanceForm::LogOp => param_map::partials_at(r.theta, r.p0, r.p1, measure).arm(a),
            NuisanceForm::LinearP0 => {
                if a == 0.0 {
                    (0.0, 1.0)
                } else {
                    match measure {
                        TargetMeasure::Rr => (r.p1, r.theta.exp()),
                        TargetMeasure::Rd => (r.theta.cosh().powi(-2), 1.0),
                    }
                }
            }
        }
    }

    /// Gradient of [`Self::log_likelihood`].
    pub fn score(&self, alpha: &DVector<f64>, beta: &DVector<f64>) -> Result<DVector<f64>> {
        let rows = self.score_rows(alpha, beta)?;
        Ok(column_sums(&rows))
    }

    fn score_params(&self, params: &DVector<f64>) -> Result<DVector<f64>> {
        let (a, b) = self.split(params);
        self.score(&a, &b)
    }

    /// Hessian of the summed log-likelihood: central differences of the
    /// analytic score (step 1e-6·(1+|param|), symmetrized) for the log-OP
    /// nuisance, analytic for the linear baseline so that evaluation near the
    /// feasibility boundary never steps outside it.
    pub fn hessian(&self, alpha: &DVector<f64>, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        if self.spec.nuisance_form == NuisanceForm::LinearP0 {
            return self.linear_p0_hessian(alpha, beta);
        }
        let params = stack(alpha, beta);
        let k = params.len();
        let mut h = DMatrix::zeros(k, k);
        for j in 0..k {
            let step = 1e-6 * (1.0 + params[j].abs());
            let mut up = params.clone();
            up[j] += step;
            let mut dn = params.clone();
            dn[j] -= step;
            let g_up = self.score_params(&up)?;
            let g_dn = self.score_params(&dn)?;
            h.set_column(j, &((g_up - g_dn) / (2.0 * step)));
        }
        Ok((&h + h.transpose()) * 0.5)
    }

    fn linear_p0_hessian(&self, alpha: &DVector<f64>, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_dims(alpha, beta)?;
        let (ka, kb) = (self.dim_alpha(), self.dim_beta());
        let mut h = DMatrix::zeros(ka + kb, ka + kb);
        let mut x = DVector::zeros(ka + kb);
        for (i, r) in self.rows(alpha, beta).iter().enumerate() {
            let a = self.a[i];
            let p = if a == 0.0 { r.p0 } else { r.p1 };
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::domain(format!(
                    "row {}: fitted risk {p} outside (0,1); the linear baseline model is infeasible here",
                    i + 1
                )));
            }
            let y = self.y[i];
            let d1 = y / p - (1.0 - y) / (1.0 - p);
            let d2 = -y / (p * p) - (1.0 - y) / ((1.0 - p) * (1.0 - p));
            let (gt, gl) = self.arm_derivatives(r, a);
            // second derivatives of p_A in (θ, lp)
            let (ptt, ptl) = match (a == 0.0, self.spec.measure) {
                (true, _) => (0.0, 0.0),
                (false, TargetMeasure::Rr) => (r.p1, r.theta.exp()),
                (false, TargetMeasure::Rd) => (-2.0 * r.theta.tanh() * r.theta.cosh().powi(-2), 0.0),
            };
            let htt = d2 * gt * gt + d1 * ptt;
            let htl = d2 * gt * gl + d1 * ptl;
            let hll = d2 * gl * gl;
            for j in 0..ka {
                x[j] = self.w.values[(i, j)];
            }
            for j in 0..kb {
                x[ka + j] = self.z.values[(i, j)];
            }
            for j in 0..ka + kb {
                for l in 0..ka + kb {
                    let c = match (j < ka, l < ka) {
                        (true, true) => htt,
                        (false, false) => hll,
                        _ => htl,
                    };
                    h[(j, l)] += c * x[j] * x[l];
                }
            }
        }
        Ok(h)
    }

    fn start(&self) -> Result<DVector<f64>> {
        let ka = self.dim_alpha();
        let mut params = DVector::zeros(self.dim());
        if self.spec.nuisance_form == NuisanceForm::LinearP0 {
            let (sum, count) = self
                .y
                .iter()
                .zip(self.a)
                .filter(|(_, &a)| a == 0.0)
                .fold((0.0, 0.0), |(s, c), (&y, _)| (s + y, c + 1.0));
            let target = if count > 0.0 { sum / count } else { 0.5 };
            let target = target.clamp(0.05, 0.95);
            let intercept = self.z.column_names.iter().position(|n| n == crate::design::INTERCEPT_NAME);
            match intercept {
                Some(j) => params[ka + j] = target,
                None => {
                    return Err(Error::domain(
                        "linear baseline model needs an intercept for a feasible start; use the log odds-product nuisance",
                    ))
                }
            }
        }
        Ok(params)
    }

    /// Newton ascent with Armijo backtracking from `params`.
    fn ascend(&self, mut params: DVector<f64>, opts: &FitOptions) -> Result<Ascent> {
        let (a0, b0) = self.split(&params);
        let mut ll = self.loglik_unchecked(&a0, &b0);
        if !ll.is_finite() {
            return Err(Error::domain(
                "starting values give risks outside (0,1); use the log odds-product nuisance",
            ));
        }
        let mut trace = vec![ll];
        let mut converged = false;
        let mut iterations = 0;
        let mut g = self.score_params(&params)?;
        let mut at_boundary = false;
        while iterations < opts.max_iter {
            if g.amax() < opts.score_tol {
                converged = true;
                break;
            }
            iterations += 1;
            at_boundary = false;
            let (a, b) = self.split(&params);
            let info = -self.hessian(&a, &b)?;
            let dir = ascent_direction(&info, &g);
            let slope = dir.dot(&g);
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let cand = &params + &dir * step;
                let (ca, cb) = self.split(&cand);
                let cll = self.loglik_unchecked(&ca, &cb);
                if cll == f64::NEG_INFINITY {
                    at_boundary = true;
                }
                if cll.is_finite() && cll >= ll + 1e-4 * step * slope {
                    accepted = Some((cand, cll));
                    break;
                }
                step *= 0.5;
            }
            match accepted {
                Some((cand, cll)) => {
                    let change = (cll - ll).abs() / ll.abs().max(f64::MIN_POSITIVE);
                    params = cand;
                    ll = cll;
                    trace.push(ll);
                    g = self.score_params(&params)?;
                    if change < opts.rel_loglik_tol {
                        converged = true;
                        break;
                    }
                }
                None => {
                    // No representable ascent left: either a flat optimum or,
                    // for the linear baseline, the feasibility boundary.
                    converged = g.amax() < 1e-4 || at_boundary;
                    break;
                }
            }
        }
        if !converged && g.amax() < opts.score_tol {
            converged = true;
        }
        if !converged {
            return Err(Error::Convergence {
                context: "maximum likelihood".into(),
                iterations,
                norm: g.amax(),
                last_iterate: params.iter().cloned().collect(),
            });
        }
        Ok(Ascent {
            params,
            loglik: ll,
            score: g,
            iterations,
            at_boundary,
            trace,
        })
    }

    /// Maximizes the log-likelihood. The linear baseline is first solved
    /// along a log-barrier path so that maxima on the boundary of the
    /// feasible region are reached rather than approached by step-halving.
    pub fn fit(&self, opts: &FitOptions) -> Result<NuisanceFit> {
        let n = self.n();
        if n == 0 {
            return Err(Error::spec("cannot fit an empty dataset"));
        }
        let k = self.dim();
        let mut warnings = Vec::new();
        if n <= k {
            warnings.push(format!("only {n} rows for {k} parameters"));
        }
        let mut params = self.start()?;
        let mut iterations = 0;
        if self.spec.nuisance_form == NuisanceForm::LinearP0 {
            for mu in BARRIER_PATH {
                let stage = self.tempered(mu).ascend(params, opts)?;
                iterations += stage.iterations;
                params = stage.params;
            }
        }
        let last = self.ascend(params, opts)?;
        iterations += last.iterations;
        if last.at_boundary && last.score.amax() >= 1e-4 {
            warnings.push(format!(
                "maximum lies on the boundary of the feasible region (score norm {:.3e}); \
                 information-based standard errors are unreliable",
                last.score.amax()
            ));
        }
        let (alpha, beta) = self.split(&last.params);
        let observed_information = -self.hessian(&alpha, &beta)?;
        Ok(NuisanceFit {
            spec: self.spec.clone(),
            fitted: self.fitted_rows(&alpha, &beta),
            alpha,
            beta,
            alpha_names: self.w.column_names.clone(),
            beta_names: self.z.column_names.clone(),
            loglik: last.loglik,
            observed_information,
            converged: true,
            iterations,
            score_norm: last.score.amax(),
            loglik_trace: last.trace,
            warnings,
        })
    }
}

/// Barrier weights for the linear baseline, largest first.
const BARRIER_PATH: [f64; 6] = [1e-2, 1e-3, 1e-4, 1e-6, 1e-8, 1e-10];

struct Ascent {
    params: DVector<f64>,
    loglik: f64,
    score: DVector<f64>,
    iterations: usize,
    at_boundary: bool,
    trace: Vec<f64>,
}

/// Newton direction using |eigenvalues| of the information, dropping
/// numerically flat directions; falls back to the gradient.
fn ascent_direction(info: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    if info.iter().all(|v| v.is_finite()) {
        let eig = SymmetricEigen::new(info.clone());
        let max = eig.eigenvalues.amax();
        if max > 0.0 {
            let mut dir = DVector::zeros(g.len());
            for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
                if lambda.abs() > 1e-10 * max {
                    let v = eig.eigenvectors.column(i);
                    dir += v * (v.dot(g) / lambda.abs());
                }
            }
            if dir.dot(g) > 0.0 && dir.iter().all(|v| v.is_finite()) {
                return dir;
            }
        }
    }
    g.clone()
}

pub(crate) fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

fn linear_p0_arms(theta: f64, lp: f64, measure: TargetMeasure) -> (f64, f64) {
    match measure {
        TargetMeasure::Rr => (lp, lp * theta.exp()),
        TargetMeasure::Rd => (lp, lp + theta.tanh()),
    }
}

pub fn log_likelihood(
    alpha: &DVector<f64>,
    beta: &DVector<f64>,
    data: &Dataset,
    spec: &OutcomeModelSpec,
) -> Result<f64> {
    OutcomeModel::new(data, spec)?.log_likelihood(alpha, beta)
}

pub fn score(
    alpha: &DVector<f64>,
    beta: &DVector<f64>,
    data: &Dataset,
    spec: &OutcomeModelSpec,
) -> Result<DVector<f64>> {
    OutcomeModel::new(data, spec)?.score(alpha, beta)
}

pub fn fit_mle(data: &Dataset, spec: &OutcomeModelSpec, opts: &FitOptions) -> Result<NuisanceFit> {
    OutcomeModel::new(data, spec)?.fit(opts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub theta: f64,
    pub p0: f64,
    pub p1: f64,
    /// RR or RD depending on the measure.
    pub effect: f64,
}

/// Predictions at new covariate rows from target coefficients `alpha` and
/// nuisance coefficients `beta`.
pub fn predict_with(
    spec: &OutcomeModelSpec,
    alpha: &DVector<f64>,
    beta: &DVector<f64>,
    covariates: &Covariates,
) -> Result<Vec<Prediction>> {
    let w = build_design(covariates, &spec.w_design)?;
    let z = build_design(covariates, &spec.z_design)?;
    if alpha.len() != w.ncols() || beta.len() != z.ncols() {
        return Err(Error::spec("coefficient dimensions do not match designs"));
    }
    let theta = &w.values * alpha;
    let lp = &z.values * beta;
    theta
        .iter()
        .zip(lp.iter())
        .enumerate()
        .map(|(i, (&t, &l))| {
            let (p0, p1) = match spec.nuisance_form {
                NuisanceForm::LogOp => param_map::inverse(t, l, spec.measure)?,
                NuisanceForm::LinearP0 => {
                    let (p0, p1) = linear_p0_arms(t, l, spec.measure);
                    if !(p0 > 0.0 && p0 < 1.0 && p1 > 0.0 && p1 < 1.0) {
                        return Err(Error::domain(format!(
                            "row {}: linear baseline prediction ({p0}, {p1}) leaves (0,1)",
                            i + 1
                        )));
                    }
                    (p0, p1)
                }
            };
            Ok(Prediction {
                theta: t,
                p0,
                p1,
                effect: spec.measure.effect(t),
            })
        })
        .collect()
}

pub fn predict(fit: &NuisanceFit, covariates: &Covariates) -> Result<Vec<Prediction>> {
    predict_with(&fit.spec, &fit.alpha, &fit.beta, covariates)
}
