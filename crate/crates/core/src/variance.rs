//! Variance estimation: inverse observed information for the MLE, the
//! influence-function sandwich for the doubly-robust estimators, the
//! nonparametric bootstrap, and Wald summaries.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::design::{build_design, Dataset};
use crate::dr::{DrFit, DrProblem, WeightKind};
use crate::error::{Error, Result};
use crate::linalg;
use crate::mle::{column_sums, stack, NuisanceFit, OutcomeModel, OutcomeModelSpec};
use crate::propensity::{expit, PropensityFit};

/// Inverse observed information, ordered (α, β).
pub fn fisher_variance(fit: &NuisanceFit) -> Result<DMatrix<f64>> {
    linalg::inverse_symmetric(&fit.observed_information, "observed information", &fit.param_names())
}

/// Components of the sandwich estimator for α̂_DR.
#[derive(Debug, Clone)]
pub struct InfluenceDecomposition {
    /// τ̂ = -P_n[∂U/∂αᵀ] at α̂_DR.
    pub tau: DMatrix<f64>,
    /// Corrected per-observation contributions Ũ_i, n × dim α.
    pub u_tilde: DMatrix<f64>,
    /// Σ̂ = P_n[Ũ Ũᵀ].
    pub sigma_hat: DMatrix<f64>,
    /// τ̂⁻¹ Σ̂ τ̂⁻ᵀ / n.
    pub cov_alpha: DMatrix<f64>,
}

impl InfluenceDecomposition {
    pub fn standard_errors(&self) -> DVector<f64> {
        self.cov_alpha.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

fn fd_step(x: f64) -> f64 {
    1e-6 * (1.0 + x.abs())
}

/// Sandwich covariance for α̂_DR with the weights in `dr` held fixed.
///
/// Ũ_i = U_i − Ĝ_ab Ĥ_S⁻¹ S_i − Ĝ_γ Ĥ_γ⁻¹ X_i (A_i − ê_i), where Ĝ_ab and Ĝ_γ
/// are sample means of ∂U_i/∂(α, β) and ∂U_i/∂γ (central differences),
/// Ĥ_S is the mean Hessian of the outcome log-likelihood and
/// Ĥ_γ = -P_n[X e(1-e) Xᵀ].
pub fn sandwich_dr(
    dr: &DrFit,
    nuisance: &NuisanceFit,
    prop: &PropensityFit,
    data: &Dataset,
    spec: &OutcomeModelSpec,
) -> Result<InfluenceDecomposition> {
    let n = data.n();
    if nuisance.n() != n || prop.fitted_e.len() != n || dr.weights.nrows() != n {
        return Err(Error::spec("sandwich: fits were computed on a different dataset"));
    }
    let nf = n as f64;
    let problem = DrProblem::new(data, spec)?;
    let weights = &dr.weights;
    let alpha = &dr.alpha_dr;
    let e = &prop.fitted_e;
    let p0 = nuisance.p0();
    let k = alpha.len();

    let u = problem.u_rows(alpha, &p0, e, weights)?;
    let tau = -problem.jacobian(alpha, e, weights);

    // Outcome-nuisance correction.
    let outcome = OutcomeModel::new(data, &nuisance.spec)?;
    let theta_hat = stack(&nuisance.alpha, &nuisance.beta);
    let ka = nuisance.alpha.len();
    let kn = theta_hat.len();
    let mut g_ab = DMatrix::zeros(k, kn);
    for j in 0..kn {
        let h = fd_step(theta_hat[j]);
        let mut up = theta_hat.clone();
        up[j] += h;
        let mut dn = theta_hat.clone();
        dn[j] -= h;
        let p_up = outcome.p0_values(&up.rows(0, ka).into_owned(), &up.rows(ka, kn - ka).into_owned());
        let p_dn = outcome.p0_values(&dn.rows(0, ka).into_owned(), &dn.rows(ka, kn - ka).into_owned());
        let d = (problem.mean_u(alpha, &p_up, e, weights)? - problem.mean_u(alpha, &p_dn, e, weights)?) / (2.0 * h);
        g_ab.set_column(j, &d);
    }
    let s_rows = outcome.score_rows(&nuisance.alpha, &nuisance.beta)?;
    // inverse of the mean Hessian -I/n is -n I⁻¹
    let info_inv = linalg::inverse_symmetric(
        &nuisance.observed_information,
        "outcome-model information",
        &nuisance.param_names(),
    )?;
    let corr_ab = &g_ab * (info_inv * (-nf));

    // Propensity correction.
    let x = build_design(data, &prop.x_design)?;
    let gamma = &prop.gamma;
    let kg = gamma.len();
    let mut g_g = DMatrix::zeros(k, kg);
    for j in 0..kg {
        let h = fd_step(gamma[j]);
        let mut up = gamma.clone();
        up[j] += h;
        let mut dn = gamma.clone();
        dn[j] -= h;
        let e_up: Vec<f64> = (&x.values * &up).iter().map(|&v| expit(v)).collect();
        let e_dn: Vec<f64> = (&x.values * &dn).iter().map(|&v| expit(v)).collect();
        let d = (problem.mean_u(alpha, &p0, &e_up, weights)? - problem.mean_u(alpha, &p0, &e_dn, weights)?) / (2.0 * h);
        g_g.set_column(j, &d);
    }
    let mut info_g = DMatrix::zeros(kg, kg);
    for i in 0..n {
        let row = x.values.row(i);
        info_g += row.transpose() * row * (e[i] * (1.0 - e[i]));
    }
    let info_g_inv = linalg::inverse_symmetric(&info_g, "propensity information", &prop.gamma_names)?;
    let corr_g = &g_g * (info_g_inv * (-nf));

    let mut u_tilde = u;
    for i in 0..n {
        let s_i = s_rows.row(i).transpose();
        let psi_i = x.values.row(i).transpose() * (data.a()[i] - e[i]);
        let delta = &corr_ab * s_i + &corr_g * psi_i;
        let mut row = u_tilde.row_mut(i);
        row -= delta.transpose();
    }
    let sigma_hat = (u_tilde.transpose() * &u_tilde) / nf;
    let tau_inv = linalg::inverse_general(&tau, "tau", &dr.alpha_names)?;
    let cov = &tau_inv * &sigma_hat * tau_inv.transpose() / nf;
    let cov_alpha = (&cov + cov.transpose()) * 0.5;
    debug_assert!(linalg::is_symmetric_psd(&cov_alpha, 1e-9));
    if !linalg::is_symmetric_psd(&cov_alpha, 1e-9) {
        return Err(Error::domain("sandwich covariance is not positive semidefinite"));
    }
    Ok(InfluenceDecomposition {
        tau,
        u_tilde,
        sigma_hat,
        cov_alpha,
    })
}

/// Sandwich for the efficiently weighted estimator: the efficient weights
/// are frozen at the plug-in estimates, so derivatives of ω_eff are not
/// propagated. Under double misspecification this is an approximation.
pub fn efficient_sandwich(
    dr: &DrFit,
    nuisance: &NuisanceFit,
    prop: &PropensityFit,
    data: &Dataset,
    spec: &OutcomeModelSpec,
) -> Result<InfluenceDecomposition> {
    if dr.weight_kind != WeightKind::Efficient {
        return Err(Error::spec("efficient sandwich requires an efficiently weighted fit"));
    }
    sandwich_dr(dr, nuisance, prop, data, spec)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaldRow {
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Wald intervals and two-sided p-values with a normal reference.
pub fn wald_summary(estimates: &DVector<f64>, cov: &DMatrix<f64>, level: f64) -> Result<Vec<WaldRow>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::spec(format!("confidence level {level} outside (0,1)")));
    }
    let k = estimates.len();
    if cov.nrows() != k || cov.ncols() != k {
        return Err(Error::spec("covariance dimension does not match estimates"));
    }
    let z = normal_quantile(1.0 - (1.0 - level) / 2.0);
    Ok((0..k)
        .map(|j| wald_row(estimates[j], cov[(j, j)].max(0.0).sqrt(), z))
        .collect())
}

pub(crate) fn wald_row(estimate: f64, se: f64, z: f64) -> WaldRow {
    let p_value = if se > 0.0 {
        erfc((estimate / se).abs() / std::f64::consts::SQRT_2)
    } else if estimate == 0.0 {
        1.0
    } else {
        0.0
    };
    WaldRow {
        estimate,
        se,
        ci_low: estimate - z * se,
        ci_high: estimate + z * se,
        p_value,
    }
}

/// Outcome of a nonparametric bootstrap.
#[derive(Debug, Clone)]
pub struct BootstrapResult {
    pub b: usize,
    pub seed: u64,
    /// Estimates from successful replicates, in replicate order.
    pub replicates: Vec<DVector<f64>>,
    /// (replicate index, error message) for excluded replicates.
    pub failures: Vec<(usize, String)>,
    pub se: DVector<f64>,
    pub ci_low: DVector<f64>,
    pub ci_high: DVector<f64>,
}

/// Row indices for bootstrap replicate `index`: one ChaCha stream per
/// replicate so the result does not depend on scheduling.
pub fn resample_indices(n: usize, seed: u64, index: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Type-7 (linear interpolation) sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Runs `estimator` on `b` row-resamples of `data`. Failed replicates are
/// excluded and reported; more than 10% failures is an error.
pub fn bootstrap_with<F>(data: &Dataset, b: usize, seed: u64, estimator: F) -> Result<BootstrapResult>
where
    F: Fn(&Dataset) -> Result<DVector<f64>> + Sync,
{
    if b < 2 {
        return Err(Error::spec("bootstrap needs at least 2 replicates"));
    }
    let n = data.n();
    let outcomes: Vec<Result<DVector<f64>>> = (0..b)
        .into_par_iter()
        .map(|i| estimator(&data.select_rows(&resample_indices(n, seed, i))))
        .collect();
    let mut replicates = Vec::with_capacity(b);
    let mut failures = Vec::new();
    for (i, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(v) => replicates.push(v),
            Err(e) => failures.push((i, e.to_string())),
        }
    }
    if failures.len() * 10 > b {
        return Err(Error::Bootstrap {
            failed: failures.len(),
            total: b,
            first: failures[0].1.clone(),
        });
    }
    if replicates.len() < 2 {
        return Err(Error::Bootstrap {
            failed: failures.len(),
            total: b,
            first: "fewer than two successful replicates".into(),
        });
    }
    let k = replicates[0].len();
    let mut se = DVector::zeros(k);
    let mut lo = DVector::zeros(k);
    let mut hi = DVector::zeros(k);
    for j in 0..k {
        let mut vals: Vec<f64> = replicates.iter().map(|r| r[j]).collect();
        se[j] = sample_sd(&vals);
        vals.sort_by(f64::total_cmp);
        lo[j] = quantile_sorted(&vals, 0.025);
        hi[j] = quantile_sorted(&vals, 0.975);
    }
    Ok(BootstrapResult {
        b,
        seed,
        replicates,
        failures,
        se,
        ci_low: lo,
        ci_high: hi,
    })
}

/// Mean of the rows of `m` (P_n of per-row contributions).
pub fn row_mean(m: &DMatrix<f64>) -> DVector<f64> {
    column_sums(m) / m.nrows() as f64
}
