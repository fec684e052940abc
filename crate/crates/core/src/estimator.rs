//! End-to-end analyses: choose an estimator and a variance method, run the
//! required fits, and collect estimates with their uncertainty.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{Dataset, DesignSpec};
use crate::dr::{self, DrFit, WeightKind};
use crate::error::{Error, Result};
use crate::mle::{fit_mle, FitOptions, NuisanceFit, NuisanceForm, OutcomeModelSpec};
use crate::param_map::TargetMeasure;
use crate::propensity::{fit_propensity, PropensityFit};
use crate::variance::{self, BootstrapResult, WaldRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "mle")]
    Mle,
    /// DR with efficient weights and the log-OP plug-in.
    #[serde(rename = "drw")]
    Drw,
    /// DR with ω = W and the log-OP plug-in.
    #[serde(rename = "dru")]
    Dru,
    /// DR with ω = W and the linear baseline-risk plug-in.
    #[serde(rename = "dr-p0")]
    DrP0,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [
        EstimatorKind::Mle,
        EstimatorKind::Drw,
        EstimatorKind::Dru,
        EstimatorKind::DrP0,
    ];

    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Mle => "mle",
            EstimatorKind::Drw => "drw",
            EstimatorKind::Dru => "dru",
            EstimatorKind::DrP0 => "dr-p0",
        }
    }

    pub fn is_dr(self) -> bool {
        self != EstimatorKind::Mle
    }

    pub fn nuisance_form(self) -> NuisanceForm {
        match self {
            EstimatorKind::DrP0 => NuisanceForm::LinearP0,
            _ => NuisanceForm::LogOp,
        }
    }

    pub fn weight_kind(self) -> Option<WeightKind> {
        match self {
            EstimatorKind::Mle => None,
            EstimatorKind::Drw => Some(WeightKind::Efficient),
            EstimatorKind::Dru | EstimatorKind::DrP0 => Some(WeightKind::Naive),
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| Error::spec(format!("unknown estimator '{s}' (expected mle, drw, dru or dr-p0)")))
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMethod {
    Fisher,
    Sandwich,
    Bootstrap,
}

impl VarianceMethod {
    pub fn label(self) -> &'static str {
        match self {
            VarianceMethod::Fisher => "fisher",
            VarianceMethod::Sandwich => "sandwich",
            VarianceMethod::Bootstrap => "bootstrap",
        }
    }

    /// The analytic default for an estimator.
    pub fn default_for(kind: EstimatorKind) -> Self {
        if kind.is_dr() {
            VarianceMethod::Sandwich
        } else {
            VarianceMethod::Fisher
        }
    }
}

impl std::str::FromStr for VarianceMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fisher" => Ok(VarianceMethod::Fisher),
            "sandwich" => Ok(VarianceMethod::Sandwich),
            "bootstrap" => Ok(VarianceMethod::Bootstrap),
            _ => Err(Error::spec(format!(
                "unknown variance method '{s}' (expected fisher, sandwich or bootstrap)"
            ))),
        }
    }
}

impl std::fmt::Display for VarianceMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// What to fit. `x_design` is required by the DR estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSpec {
    pub measure: TargetMeasure,
    pub w_design: DesignSpec,
    pub z_design: DesignSpec,
    pub x_design: Option<DesignSpec>,
    pub estimator: EstimatorKind,
}

impl AnalysisSpec {
    pub fn outcome_spec(&self) -> OutcomeModelSpec {
        OutcomeModelSpec::new(self.measure, self.w_design.clone(), self.z_design.clone())
            .with_nuisance_form(self.estimator.nuisance_form())
    }

    pub fn validate(&self, variance: VarianceMethod) -> Result<()> {
        match (self.estimator.is_dr(), variance) {
            (false, VarianceMethod::Sandwich) => {
                return Err(Error::spec("the mle estimator takes fisher or bootstrap variance"))
            }
            (true, VarianceMethod::Fisher) => {
                return Err(Error::spec(format!(
                    "the {} estimator takes sandwich or bootstrap variance",
                    self.estimator
                )))
            }
            _ => {}
        }
        if self.estimator.is_dr() && self.x_design.is_none() {
            return Err(Error::spec(format!(
                "the {} estimator needs a propensity design (--x-terms)",
                self.estimator
            )));
        }
        Ok(())
    }
}

/// Point estimate plus the fits it was built from.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub estimator: EstimatorKind,
    pub alpha: DVector<f64>,
    pub alpha_names: Vec<String>,
    pub nuisance: NuisanceFit,
    pub propensity: Option<PropensityFit>,
    pub dr: Option<DrFit>,
}

/// Fits the estimator without any variance computation.
pub fn estimate(data: &Dataset, spec: &AnalysisSpec) -> Result<Estimate> {
    let outcome = spec.outcome_spec();
    let nuisance = fit_mle(data, &outcome, &FitOptions::default())?;
    let Some(kind) = spec.estimator.weight_kind() else {
        return Ok(Estimate {
            estimator: spec.estimator,
            alpha: nuisance.alpha.clone(),
            alpha_names: nuisance.alpha_names.clone(),
            nuisance,
            propensity: None,
            dr: None,
        });
    };
    let x_design = spec
        .x_design
        .as_ref()
        .ok_or_else(|| Error::spec(format!("the {} estimator needs a propensity design", spec.estimator)))?;
    let prop = fit_propensity(data, x_design)?;
    let fit = dr::solve_dr(data, &outcome, &nuisance, &prop, kind)?;
    Ok(Estimate {
        estimator: spec.estimator,
        alpha: fit.alpha_dr.clone(),
        alpha_names: fit.alpha_names.clone(),
        nuisance,
        propensity: Some(prop),
        dr: Some(fit),
    })
}

/// A finished analysis: estimates, covariance and Wald summaries.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub spec: AnalysisSpec,
    pub variance: VarianceMethod,
    pub estimate: Estimate,
    /// Coefficient estimates reported: (α, β) for mle, α for the DR estimators.
    pub coefficients: DVector<f64>,
    pub coefficient_names: Vec<String>,
    /// Covariance of `coefficients` (analytic), or of α (bootstrap replicate
    /// covariance is not formed; see `bootstrap`).
    pub covariance: Option<DMatrix<f64>>,
    pub summary: Vec<WaldRow>,
    pub bootstrap: Option<BootstrapResult>,
}

impl Analysis {
    /// Covariance of α̂ alone, when available analytically.
    pub fn alpha_covariance(&self) -> Option<DMatrix<f64>> {
        let k = self.estimate.alpha.len();
        self.covariance.as_ref().map(|c| c.view((0, 0), (k, k)).into_owned())
    }
}

pub const WALD_LEVEL: f64 = 0.95;

pub fn analyze(
    data: &Dataset,
    spec: &AnalysisSpec,
    variance: VarianceMethod,
    boot_reps: usize,
    seed: u64,
) -> Result<Analysis> {
    spec.validate(variance)?;
    let est = estimate(data, spec)?;
    let (coefficients, coefficient_names) = match spec.estimator {
        EstimatorKind::Mle => (est.nuisance.params(), est.nuisance.param_names()),
        _ => (
            est.alpha.clone(),
            est.alpha_names.iter().map(|n| format!("alpha:{n}")).collect(),
        ),
    };
    let z = variance::normal_quantile(1.0 - (1.0 - WALD_LEVEL) / 2.0);
    let (covariance, summary, boot) = match variance {
        VarianceMethod::Fisher => {
            let cov = variance::fisher_variance(&est.nuisance)?;
            let summary = variance::wald_summary(&coefficients, &cov, WALD_LEVEL)?;
            (Some(cov), summary, None)
        }
        VarianceMethod::Sandwich => {
            let (dr, prop) = (est.dr.as_ref().expect("dr fit"), est.propensity.as_ref().expect("propensity"));
            let outcome = spec.outcome_spec();
            let dec = match dr.weight_kind {
                WeightKind::Efficient => variance::efficient_sandwich(dr, &est.nuisance, prop, data, &outcome)?,
                WeightKind::Naive => variance::sandwich_dr(dr, &est.nuisance, prop, data, &outcome)?,
            };
            let summary = variance::wald_summary(&coefficients, &dec.cov_alpha, WALD_LEVEL)?;
            (Some(dec.cov_alpha), summary, None)
        }
        VarianceMethod::Bootstrap => {
            let boot = bootstrap(data, spec, boot_reps, seed)?;
            let summary = (0..coefficients.len())
                .map(|j| {
                    let mut row = variance::wald_row(coefficients[j], boot.se[j], z);
                    row.ci_low = boot.ci_low[j];
                    row.ci_high = boot.ci_high[j];
                    row
                })
                .collect();
            (None, summary, Some(boot))
        }
    };
    Ok(Analysis {
        spec: spec.clone(),
        variance,
        estimate: est,
        coefficients,
        coefficient_names,
        covariance,
        summary,
        bootstrap: boot,
    })
}

/// Coefficients the analysis reports, for use on bootstrap resamples.
pub fn point_estimate(data: &Dataset, spec: &AnalysisSpec) -> Result<DVector<f64>> {
    let est = estimate(data, spec)?;
    Ok(match spec.estimator {
        EstimatorKind::Mle => est.nuisance.params(),
        _ => est.alpha,
    })
}

/// Nonparametric bootstrap of `point_estimate`; percentile intervals.
pub fn bootstrap(data: &Dataset, spec: &AnalysisSpec, b: usize, seed: u64) -> Result<BootstrapResult> {
    variance::bootstrap_with(data, b, seed, |d| point_estimate(d, spec))
}
