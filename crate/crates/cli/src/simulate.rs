use std::path::PathBuf;

use clap::Args;
use rrdr_core::estimator::EstimatorKind;
use rrdr_core::mle::NuisanceForm;
use rrdr_core::simulation::{run_study, write_study_csv, Scenario, SimDesign, StudyConfig, StudyResult, UniformLaw};
use rrdr_core::{Error, Result, TargetMeasure};
use serde::{Deserialize, Serialize};

use crate::config::{self, overlay};
use crate::output::{self, Metadata};

pub const FULL_REPS: usize = 1000;
pub const FAST_REPS: usize = 200;
pub const DEFAULT_N: usize = 500;
pub const DEFAULT_SEED: u64 = 20260101;

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateArgs {
    /// Form of the true baseline model: log_op (V ~ U(-2,2)) or linear_p0 (V ~ U(-1,1)).
    #[arg(long)]
    pub truth: Option<NuisanceForm>,
    /// rr or rd.
    #[arg(long)]
    pub measure: Option<TargetMeasure>,
    /// Sample size per replicate.
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of replicates.
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Outcome nuisance model fitted by the analyst: log_op or linear_p0.
    #[arg(long)]
    pub nuisance: Option<NuisanceForm>,
    /// Comma-separated subset of bth,psc,orc,bad.
    #[arg(long, value_delimiter = ',')]
    pub scenarios: Option<Vec<Scenario>>,
    /// Comma-separated subset of mle,drw,dru.
    #[arg(long, value_delimiter = ',')]
    pub estimators: Option<Vec<EstimatorKind>>,
    /// True effect coefficients (intercept, V).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub alpha: Option<Vec<f64>>,
    /// True nuisance coefficients (intercept, V).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub beta: Option<Vec<f64>>,
    /// True propensity coefficients (intercept, V).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub gamma: Option<Vec<f64>>,
    /// Support of the uniform covariate law, "lo,hi".
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub covariate_range: Option<Vec<f64>>,
    /// Fewer replicates (200 unless --reps is given); recorded in the output metadata.
    #[arg(long)]
    pub fast: bool,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

impl SimulateArgs {
    fn resolve(mut self) -> Result<(StudyConfig, bool, PathBuf)> {
        let mut file: SimulateArgs = config::load(self.config.as_deref())?;
        overlay!(self, file; truth, measure, n, reps, seed, nuisance, scenarios, estimators, alpha, beta, gamma, covariate_range, out);
        let fast = self.fast || file.fast;
        let measure = self.measure.unwrap_or(TargetMeasure::Rr);
        let n = self.n.unwrap_or(DEFAULT_N);
        let mut design = match self.truth.unwrap_or(NuisanceForm::LogOp) {
            NuisanceForm::LogOp => SimDesign::log_op_truth(measure, n),
            NuisanceForm::LinearP0 => SimDesign::linear_baseline_truth(measure, n),
        };
        if let Some(a) = self.alpha {
            design.alpha_true = a;
        }
        if let Some(b) = self.beta {
            design.beta_true = b;
        }
        if let Some(g) = self.gamma {
            design.gamma_true = g;
        }
        if let Some(r) = self.covariate_range {
            let [lo, hi] = r[..] else {
                return Err(Error::Spec("covariate_range takes two numbers, lo,hi".into()));
            };
            design.covariate_law = UniformLaw { lo, hi };
        }
        let reps = self.reps.unwrap_or(if fast { FAST_REPS } else { FULL_REPS });
        let mut cfg = StudyConfig::new(design, reps, self.seed.unwrap_or(DEFAULT_SEED))
            .with_nuisance_form(self.nuisance.unwrap_or(NuisanceForm::LogOp));
        if let Some(s) = self.scenarios {
            cfg.scenarios = s;
        }
        if let Some(e) = self.estimators {
            cfg.estimators = e;
        }
        cfg.design.seed = cfg.seed;
        Ok((cfg, fast, self.out.unwrap_or_else(|| PathBuf::from("."))))
    }
}

#[derive(Serialize)]
struct StudyFile<'a> {
    metadata: &'a Metadata,
    #[serde(flatten)]
    study: &'a StudyResult,
}

pub fn run(args: SimulateArgs) -> Result<()> {
    let (cfg, fast, out) = args.resolve()?;
    let study = run_study(&cfg)?;
    let mut meta = Metadata::new("simulate", Some(cfg.seed), config::hash(&cfg));
    meta.fast = Some(fast);
    let dir = output::out_dir(&out)?;
    output::write_with_header(&dir.join("study.csv"), &meta, |w| write_study_csv(w, &study))?;
    output::write_json(&dir.join("study.json"), &StudyFile { metadata: &meta, study: &study })
}
