use std::path::PathBuf;

use clap::Args;
use nalgebra::DMatrix;
use rrdr_core::design::{load_csv, DesignSpec};
use rrdr_core::estimator::{analyze, Analysis, AnalysisSpec, EstimatorKind, VarianceMethod, WALD_LEVEL};
use rrdr_core::mle::OutcomeModelSpec;
use rrdr_core::{Result, TargetMeasure};
use serde::{Deserialize, Serialize};

use crate::config::{self, overlay, required};
use crate::output::{self, finite, Metadata};

pub const DEFAULT_BOOT_REPS: usize = 500;
pub const DEFAULT_SEED: u64 = 1;

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Binary outcome column.
    #[arg(long)]
    pub y: Option<String>,
    /// Binary exposure column.
    #[arg(long)]
    pub a: Option<String>,
    /// Terms of the effect model, e.g. "x1,x2,x1:x2". Empty means intercept only.
    #[arg(long)]
    pub w_terms: Option<String>,
    /// Terms of the outcome nuisance model. Defaults to the effect terms.
    #[arg(long)]
    pub z_terms: Option<String>,
    /// Terms of the propensity model (required for DR estimators).
    #[arg(long)]
    pub x_terms: Option<String>,
    /// rr or rd.
    #[arg(long)]
    pub measure: Option<TargetMeasure>,
    /// mle, drw, dru or dr-p0.
    #[arg(long)]
    pub estimator: Option<EstimatorKind>,
    /// fisher, sandwich or bootstrap. Defaults to fisher for mle, sandwich otherwise.
    #[arg(long)]
    pub variance: Option<VarianceMethod>,
    #[arg(long)]
    pub boot_reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file supplying any of the settings above; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitConfig {
    pub data: PathBuf,
    pub y: String,
    pub a: String,
    pub measure: TargetMeasure,
    pub estimator: EstimatorKind,
    pub variance: VarianceMethod,
    pub w_design: DesignSpec,
    pub z_design: DesignSpec,
    pub x_design: Option<DesignSpec>,
    pub boot_reps: usize,
    pub seed: u64,
}

impl FitArgs {
    fn resolve(mut self) -> Result<(FitConfig, PathBuf)> {
        let mut file: FitArgs = config::load(self.config.as_deref())?;
        overlay!(self, file; data, y, a, w_terms, z_terms, x_terms, measure, estimator, variance, boot_reps, seed, out);
        let estimator = self.estimator.unwrap_or(EstimatorKind::Mle);
        let w_terms = self.w_terms.unwrap_or_default();
        let w_design = DesignSpec::parse(&w_terms, true)?;
        let z_design = DesignSpec::parse(self.z_terms.as_deref().unwrap_or(&w_terms), true)?;
        let x_design = self.x_terms.as_deref().map(|t| DesignSpec::parse(t, true)).transpose()?;
        let cfg = FitConfig {
            data: required(self.data, "data")?,
            y: self.y.unwrap_or_else(|| "y".into()),
            a: self.a.unwrap_or_else(|| "a".into()),
            measure: self.measure.unwrap_or(TargetMeasure::Rr),
            estimator,
            variance: self.variance.unwrap_or_else(|| VarianceMethod::default_for(estimator)),
            w_design,
            z_design,
            x_design,
            boot_reps: self.boot_reps.unwrap_or(DEFAULT_BOOT_REPS),
            seed: self.seed.unwrap_or(DEFAULT_SEED),
        };
        Ok((cfg, self.out.unwrap_or_else(|| PathBuf::from("."))))
    }
}

#[derive(Debug, Serialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub p_value: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Named {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NuisanceSummary {
    pub form: String,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub score_norm: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PropensitySummary {
    pub gamma: Named,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DrSummary {
    pub weight_kind: String,
    pub plug_in: String,
    pub equation_norm: f64,
    pub iterations: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub b: usize,
    pub seed: u64,
    pub failed: usize,
    /// α part of each successful replicate, in replicate order.
    pub alpha_replicates: Vec<Vec<f64>>,
}

/// The saved fit read back by `predict`.
#[derive(Debug, Serialize, Deserialize)]
pub struct FitRecord {
    pub model: OutcomeModelSpec,
    pub estimator: EstimatorKind,
    pub variance: VarianceMethod,
    pub n: usize,
    pub level: f64,
    pub alpha: Named,
    pub beta: Named,
    pub alpha_covariance: Option<Vec<Vec<f64>>>,
    pub nuisance: NuisanceSummary,
    pub propensity: Option<PropensitySummary>,
    pub dr: Option<DrSummary>,
    pub bootstrap: Option<BootstrapSummary>,
}

#[derive(Serialize)]
struct FitFile<'a> {
    metadata: &'a Metadata,
    config: &'a FitConfig,
    coefficients: &'a [CoefficientRow],
    #[serde(flatten)]
    record: &'a FitRecord,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

pub fn record(analysis: &Analysis, n: usize) -> FitRecord {
    let est = &analysis.estimate;
    let nf = &est.nuisance;
    let k = est.alpha.len();
    FitRecord {
        model: analysis.spec.outcome_spec(),
        estimator: analysis.spec.estimator,
        variance: analysis.variance,
        n,
        level: WALD_LEVEL,
        alpha: Named {
            names: est.alpha_names.clone(),
            values: est.alpha.iter().cloned().collect(),
        },
        beta: Named {
            names: nf.beta_names.clone(),
            values: nf.beta.iter().cloned().collect(),
        },
        alpha_covariance: analysis.alpha_covariance().map(|c| rows_of(&c)),
        nuisance: NuisanceSummary {
            form: nf.spec.nuisance_form.label().into(),
            loglik: nf.loglik,
            converged: nf.converged,
            iterations: nf.iterations,
            score_norm: nf.score_norm,
            warnings: nf.warnings.clone(),
        },
        propensity: est.propensity.as_ref().map(|p| PropensitySummary {
            gamma: Named {
                names: p.gamma_names.clone(),
                values: p.gamma.iter().cloned().collect(),
            },
            converged: p.converged,
            iterations: p.iterations,
        }),
        dr: est.dr.as_ref().map(|d| DrSummary {
            weight_kind: serde_json::to_value(d.weight_kind).unwrap().as_str().unwrap_or_default().into(),
            plug_in: d.nuisance_form.label().into(),
            equation_norm: d.final_equation_norm,
            iterations: d.iterations,
        }),
        bootstrap: analysis.bootstrap.as_ref().map(|b| BootstrapSummary {
            b: b.b,
            seed: b.seed,
            failed: b.failures.len(),
            alpha_replicates: b.replicates.iter().map(|r| r.iter().take(k).cloned().collect()).collect(),
        }),
    }
}

pub fn coefficient_rows(analysis: &Analysis) -> Vec<CoefficientRow> {
    analysis
        .coefficient_names
        .iter()
        .zip(&analysis.summary)
        .map(|(name, row)| CoefficientRow {
            name: name.clone(),
            estimate: row.estimate,
            se: finite(row.se),
            ci_low: finite(row.ci_low),
            ci_high: finite(row.ci_high),
            p_value: finite(row.p_value),
        })
        .collect()
}

pub fn run(args: FitArgs) -> Result<()> {
    let (cfg, out) = args.resolve()?;
    let spec = AnalysisSpec {
        measure: cfg.measure,
        w_design: cfg.w_design.clone(),
        z_design: cfg.z_design.clone(),
        x_design: cfg.x_design.clone(),
        estimator: cfg.estimator,
    };
    spec.validate(cfg.variance)?;
    let data = load_csv(&cfg.data, &cfg.y, &cfg.a).map_err(|e| config::with_path(e, &cfg.data))?;
    let analysis = analyze(&data, &spec, cfg.variance, cfg.boot_reps, cfg.seed)?;

    let meta = Metadata::new("fit", Some(cfg.seed), config::hash(&cfg));
    let coefficients = coefficient_rows(&analysis);
    let record = record(&analysis, data.n());
    let dir = output::out_dir(&out)?;
    output::write_csv(&dir.join("coefficients.csv"), &meta, &coefficients)?;
    output::write_json(
        &dir.join("fit.json"),
        &FitFile {
            metadata: &meta,
            config: &cfg,
            coefficients: &coefficients,
            record: &record,
        },
    )?;
    for w in &record.nuisance.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}
