//! Logistic propensity-score model e(V; γ) = expit(γᵀX), fitted by
//! iteratively reweighted least squares with step-halving.

use nalgebra::{DMatrix, DVector};

use crate::design::{build_design, Dataset, DesignMatrix, DesignSpec};
use crate::error::{Error, Result};
use crate::linalg;

/// Coefficients beyond this max-norm are taken as a sign of separation.
pub const SEPARATION_LIMIT: f64 = 50.0;

const ONE_MINUS: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, strictly inside (0, 1) for every finite input.
pub fn expit(x: f64) -> f64 {
    let p = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, ONE_MINUS)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub coef: DVector<f64>,
    pub names: Vec<String>,
    pub fitted: Vec<f64>,
    /// Σ e(1-e) x xᵀ at the solution.
    pub information: DMatrix<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct PropensityFit {
    pub x_design: DesignSpec,
    pub gamma: DVector<f64>,
    pub gamma_names: Vec<String>,
    pub fitted_e: Vec<f64>,
    pub information: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
}

fn logistic_loglik(x: &DMatrix<f64>, response: &[f64], coef: &DVector<f64>) -> f64 {
    let eta = x * coef;
    eta.iter()
        .zip(response)
        .map(|(&e, &r)| r * e - softplus(e))
        .sum()
}

/// Logistic regression of a 0/1 `response` on the columns of `x`.
pub fn fit_logistic(x: &DesignMatrix, response: &[f64]) -> Result<LogisticFit> {
    let n = x.nrows();
    if n == 0 || response.len() != n {
        return Err(Error::spec("logistic fit needs matching, non-empty data"));
    }
    let ones = response.iter().filter(|&&r| r == 1.0).count();
    if ones == 0 || ones == n {
        return Err(Error::domain("response has a single class; model cannot be fitted"));
    }
    let k = x.ncols();
    let mut coef = DVector::zeros(k);
    let mut ll = logistic_loglik(&x.values, response, &coef);
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..100 {
        let eta = &x.values * &coef;
        let e: Vec<f64> = eta.iter().map(|&v| expit(v)).collect();
        let resid = DVector::from_iterator(n, response.iter().zip(&e).map(|(&r, &p)| r - p));
        let grad = x.values.transpose() * &resid;
        if grad.amax() / (n as f64) < 1e-10 {
            converged = true;
            break;
        }
        iterations += 1;
        let info = weighted_crossprod(&x.values, &e);
        let step_dir = linalg::inverse_symmetric(&info, "logistic information", &x.column_names)? * &grad;
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let cand = &coef + &step_dir * step;
            let cll = logistic_loglik(&x.values, response, &cand);
            // tolerate rounding noise so the final Newton steps still land
            if cll.is_finite() && cll >= ll - 1e-12 * (1.0 + ll.abs()) {
                coef = cand;
                ll = cll;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if coef.amax() > SEPARATION_LIMIT {
            return Err(Error::Convergence {
                context: format!(
                    "logistic fit diverging (|coef| > {SEPARATION_LIMIT}); likely complete separation"
                ),
                iterations,
                norm: coef.amax(),
                last_iterate: coef.iter().cloned().collect(),
            });
        }
        if !moved {
            break;
        }
    }
    let eta = &x.values * &coef;
    if separates(&eta, response) {
        return Err(Error::Convergence {
            context: "logistic fit: the fitted linear predictor separates the classes, so the MLE does not exist"
                .into(),
            iterations,
            norm: coef.amax(),
            last_iterate: coef.iter().cloned().collect(),
        });
    }
    let fitted: Vec<f64> = eta.iter().map(|&v| expit(v)).collect();
    let resid = DVector::from_iterator(n, response.iter().zip(&fitted).map(|(&r, &p)| r - p));
    let balance = (x.values.transpose() * resid).amax() / (n as f64);
    if !converged && balance < 1e-8 {
        converged = true;
    }
    if !converged {
        return Err(Error::Convergence {
            context: "logistic fit".into(),
            iterations,
            norm: balance,
            last_iterate: coef.iter().cloned().collect(),
        });
    }
    Ok(LogisticFit {
        information: weighted_crossprod(&x.values, &fitted),
        coef,
        names: x.column_names.clone(),
        fitted,
        loglik: ll,
        converged,
        iterations,
    })
}

/// True when every positive row has a larger linear predictor than every
/// negative row.
fn separates(eta: &DVector<f64>, response: &[f64]) -> bool {
    let mut min_pos = f64::INFINITY;
    let mut max_neg = f64::NEG_INFINITY;
    for (&e, &r) in eta.iter().zip(response) {
        if r == 1.0 {
            min_pos = min_pos.min(e);
        } else {
            max_neg = max_neg.max(e);
        }
    }
    min_pos > max_neg
}

/// Xᵀ diag(e(1-e)) X.
fn weighted_crossprod(x: &DMatrix<f64>, e: &[f64]) -> DMatrix<f64> {
    let k = x.ncols();
    let mut out = DMatrix::zeros(k, k);
    for (i, &p) in e.iter().enumerate() {
        let w = p * (1.0 - p);
        let row = x.row(i);
        out += row.transpose() * row * w;
    }
    out
}

pub fn fit_propensity(data: &Dataset, x_design: &DesignSpec) -> Result<PropensityFit> {
    let x = build_design(data, x_design)?;
    let fit = fit_logistic(&x, data.a()).map_err(|e| match e {
        Error::Domain(_) => Error::domain("exposure has a single class; propensity model cannot be fitted"),
        other => other,
    })?;
    Ok(PropensityFit {
        x_design: x_design.clone(),
        gamma: fit.coef,
        gamma_names: fit.names,
        fitted_e: fit.fitted,
        information: fit.information,
        converged: fit.converged,
        iterations: fit.iterations,
    })
}

pub fn predict_e(gamma: &DVector<f64>, x: &DesignMatrix) -> Result<Vec<f64>> {
    if gamma.len() != x.ncols() {
        return Err(Error::spec(format!(
            "gamma has {} entries, design has {} columns",
            gamma.len(),
            x.ncols()
        )));
    }
    Ok((&x.values * gamma).iter().map(|&v| expit(v)).collect())
}
