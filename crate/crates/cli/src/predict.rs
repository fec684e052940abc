use std::path::PathBuf;

use clap::Args;
use nalgebra::{DMatrix, DVector};
use rrdr_core::design::{build_design, load_covariates_csv};
use rrdr_core::mle::predict_with;
use rrdr_core::variance::{normal_quantile, quantile_sorted, sample_sd};
use rrdr_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{self, overlay, required};
use crate::fit::FitRecord;
use crate::output::{self, finite, Metadata};

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictArgs {
    /// fit.json written by `rrdr fit`.
    #[arg(long)]
    pub fit: Option<PathBuf>,
    /// CSV of covariate rows to predict at.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct PredictConfig {
    fit: PathBuf,
    data: PathBuf,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct PredictionRow {
    pub row: usize,
    pub theta: f64,
    pub theta_se: Option<f64>,
    pub theta_ci_low: Option<f64>,
    pub theta_ci_high: Option<f64>,
    pub p0: f64,
    pub p1: f64,
    pub effect: f64,
    pub effect_ci_low: Option<f64>,
    pub effect_ci_high: Option<f64>,
    pub ci_method: &'static str,
}

#[derive(Deserialize)]
struct SavedFit {
    metadata: SavedMetadata,
    #[serde(flatten)]
    record: FitRecord,
}

#[derive(Deserialize)]
struct SavedMetadata {
    seed: Option<u64>,
}

/// Interval for θ at one design row: bootstrap percentile when replicate
/// coefficients were saved, Wald from the analytic covariance otherwise.
struct Uncertainty {
    covariance: Option<DMatrix<f64>>,
    replicates: Option<DMatrix<f64>>,
    z: f64,
    level: f64,
}

impl Uncertainty {
    fn from_record(rec: &FitRecord) -> Result<Self> {
        let k = rec.alpha.values.len();
        let covariance = rec
            .alpha_covariance
            .as_ref()
            .map(|rows| {
                if rows.len() != k || rows.iter().any(|r| r.len() != k) {
                    return Err(Error::Spec("saved alpha covariance has the wrong shape".into()));
                }
                Ok(DMatrix::from_fn(k, k, |i, j| rows[i][j]))
            })
            .transpose()?;
        let replicates = rec
            .bootstrap
            .as_ref()
            .filter(|b| !b.alpha_replicates.is_empty())
            .map(|b| {
                if b.alpha_replicates.iter().any(|r| r.len() != k) {
                    return Err(Error::Spec("saved bootstrap replicates have the wrong length".into()));
                }
                Ok(DMatrix::from_fn(b.alpha_replicates.len(), k, |i, j| b.alpha_replicates[i][j]))
            })
            .transpose()?;
        Ok(Uncertainty {
            covariance,
            replicates,
            z: normal_quantile(1.0 - (1.0 - rec.level) / 2.0),
            level: rec.level,
        })
    }

    fn method(&self) -> &'static str {
        match (&self.replicates, &self.covariance) {
            (Some(_), _) => "bootstrap-percentile",
            (None, Some(_)) => "wald",
            (None, None) => "none",
        }
    }

    /// (se, ci_low, ci_high) for θ = αᵀw.
    fn theta(&self, theta: f64, w: &DVector<f64>) -> (Option<f64>, Option<f64>, Option<f64>) {
        if let Some(reps) = &self.replicates {
            let mut thetas: Vec<f64> = (reps * w).iter().cloned().collect();
            let se = if thetas.len() > 1 { sample_sd(&thetas) } else { f64::NAN };
            thetas.sort_by(f64::total_cmp);
            let tail = (1.0 - self.level) / 2.0;
            return (
                finite(se),
                finite(quantile_sorted(&thetas, tail)),
                finite(quantile_sorted(&thetas, 1.0 - tail)),
            );
        }
        if let Some(cov) = &self.covariance {
            let se = (w.transpose() * cov * w)[(0, 0)].max(0.0).sqrt();
            return (finite(se), finite(theta - self.z * se), finite(theta + self.z * se));
        }
        (None, None, None)
    }
}

pub fn predict_rows(rec: &FitRecord, covariates: &rrdr_core::Covariates) -> Result<Vec<PredictionRow>> {
    let alpha = DVector::from_vec(rec.alpha.values.clone());
    let beta = DVector::from_vec(rec.beta.values.clone());
    let preds = predict_with(&rec.model, &alpha, &beta, covariates)?;
    let w = build_design(covariates, &rec.model.w_design)?;
    let unc = Uncertainty::from_record(rec)?;
    let measure = rec.model.measure;
    Ok(preds
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let wi = w.values.row(i).transpose();
            let (se, lo, hi) = unc.theta(p.theta, &wi);
            PredictionRow {
                row: i + 1,
                theta: p.theta,
                theta_se: se,
                theta_ci_low: lo,
                theta_ci_high: hi,
                p0: p.p0,
                p1: p.p1,
                effect: p.effect,
                effect_ci_low: lo.map(|t| measure.effect(t)),
                effect_ci_high: hi.map(|t| measure.effect(t)),
                ci_method: unc.method(),
            }
        })
        .collect())
}

pub fn run(mut args: PredictArgs) -> Result<()> {
    let mut file: PredictArgs = config::load(args.config.as_deref())?;
    overlay!(args, file; fit, data, out);
    let cfg = PredictConfig {
        fit: required(args.fit, "fit")?,
        data: required(args.data, "data")?,
    };
    let text = std::fs::read_to_string(&cfg.fit).map_err(|e| config::with_path(e.into(), &cfg.fit))?;
    let saved: SavedFit = serde_json::from_str(&text)
        .map_err(|e| Error::Spec(format!("{} is not a saved fit: {e}", cfg.fit.display())))?;
    let covariates = load_covariates_csv(&cfg.data).map_err(|e| config::with_path(e, &cfg.data))?;
    let rows = predict_rows(&saved.record, &covariates)?;
    let meta = Metadata::new("predict", saved.metadata.seed, config::hash(&cfg));
    let dir = output::out_dir(&args.out.unwrap_or_else(|| PathBuf::from(".")))?;
    output::write_csv(&dir.join("predictions.csv"), &meta, &rows)
}
