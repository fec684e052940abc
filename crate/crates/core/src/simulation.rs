//! Data generators and the Monte Carlo harness for the two simulation
//! designs: a log odds-product truth on V ~ U(-2, 2), and a linear
//! baseline-risk truth on V ~ U(-1, 1).

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::design::{Covariates, Dataset, DesignSpec};
use crate::dr::{self, WeightKind};
use crate::error::{Error, Result};
use crate::estimator::EstimatorKind;
use crate::mle::{fit_mle, FitOptions, NuisanceFit, NuisanceForm, OutcomeModelSpec};
use crate::param_map::{self, TargetMeasure};
use crate::propensity::{expit, fit_propensity, PropensityFit};
use crate::variance::{self, normal_quantile};

pub const COVARIATE: &str = "v";
pub const IRRELEVANT: &str = "v_dagger";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformLaw {
    pub lo: f64,
    pub hi: f64,
}

/// Data-generating design with one covariate V (plus intercept) in every
/// model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub n: usize,
    pub alpha_true: Vec<f64>,
    /// Log-OP coefficients, or baseline-risk coefficients for a linear truth.
    pub beta_true: Vec<f64>,
    pub gamma_true: Vec<f64>,
    pub covariate_law: UniformLaw,
    pub measure: TargetMeasure,
    pub truth_nuisance: NuisanceForm,
    pub seed: u64,
}

impl SimDesign {
    /// Truth with a log odds-product baseline: α = (0, -1), β = (-0.5, 1), γ = (0.1, -0.5), V ~ U(-2, 2).
    pub fn log_op_truth(measure: TargetMeasure, n: usize) -> Self {
        SimDesign {
            n,
            alpha_true: vec![0.0, -1.0],
            beta_true: vec![-0.5, 1.0],
            gamma_true: vec![0.1, -0.5],
            covariate_law: UniformLaw { lo: -2.0, hi: 2.0 },
            measure,
            truth_nuisance: NuisanceForm::LogOp,
            seed: 0,
        }
    }

    /// Truth with a linear baseline risk p0 = 0.5 + 0.2 V, α = (0, 0.3),
    /// γ = (0.1, -0.5), V ~ U(-1, 1).
    pub fn linear_baseline_truth(measure: TargetMeasure, n: usize) -> Self {
        SimDesign {
            n,
            alpha_true: vec![0.0, 0.3],
            beta_true: vec![0.5, 0.2],
            gamma_true: vec![0.1, -0.5],
            covariate_law: UniformLaw { lo: -1.0, hi: 1.0 },
            measure,
            truth_nuisance: NuisanceForm::LinearP0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::spec("design needs n >= 1"));
        }
        for (name, v) in [("alpha", &self.alpha_true), ("beta", &self.beta_true), ("gamma", &self.gamma_true)] {
            if v.len() != 2 || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::spec(format!("{name}_true needs two finite entries (intercept, V)")));
            }
        }
        let UniformLaw { lo, hi } = self.covariate_law;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::spec(format!("invalid covariate law U({lo}, {hi})")));
        }
        if self.truth_nuisance == NuisanceForm::LinearP0 {
            // p0 is linear in v but p1 need not be monotone, so check a grid
            // that includes both endpoints.
            let steps = 1000;
            for i in 0..=steps {
                let v = lo + (hi - lo) * i as f64 / steps as f64;
                let (p0, p1) = self.risks_at(v);
                if !(p0 > 0.0 && p0 < 1.0 && p1 > 0.0 && p1 < 1.0) {
                    return Err(Error::spec(format!(
                        "linear baseline truth gives risks ({p0}, {p1}) outside (0,1) at v = {v}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn lin(coef: &[f64], v: f64) -> f64 {
        coef[0] + coef[1] * v
    }

    /// (p0, p1) at covariate value v.
    pub fn risks_at(&self, v: f64) -> (f64, f64) {
        let theta = Self::lin(&self.alpha_true, v);
        let lp = Self::lin(&self.beta_true, v);
        match self.truth_nuisance {
            NuisanceForm::LogOp => param_map::inverse_unchecked(theta, lp, self.measure),
            NuisanceForm::LinearP0 => match self.measure {
                TargetMeasure::Rr => (lp, lp * theta.exp()),
                TargetMeasure::Rd => (lp, lp + theta.tanh()),
            },
        }
    }

    /// Propensity score at covariate value v.
    pub fn propensity_at(&self, v: f64) -> f64 {
        expit(Self::lin(&self.gamma_true, v))
    }
}

/// Truth at one covariate value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthPoint {
    pub theta: f64,
    pub p0: f64,
    pub p1: f64,
    pub e: f64,
}

pub fn truth_at(design: &SimDesign, v: f64) -> TruthPoint {
    let (p0, p1) = design.risks_at(v);
    TruthPoint {
        theta: SimDesign::lin(&design.alpha_true, v),
        p0,
        p1,
        e: design.propensity_at(v),
    }
}

fn draw(design: &SimDesign, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let n = design.n;
    let UniformLaw { lo, hi } = design.covariate_law;
    let mut v = Vec::with_capacity(n);
    let mut v_dagger = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let vi = rng.random_range(lo..hi);
        let di = rng.random_range(lo..hi);
        let ai = if rng.random::<f64>() < design.propensity_at(vi) { 1.0 } else { 0.0 };
        let (p0, p1) = design.risks_at(vi);
        let p = if ai == 1.0 { p1 } else { p0 };
        let yi = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
        v.push(vi);
        v_dagger.push(di);
        a.push(ai);
        y.push(yi);
    }
    let covs = Covariates::new(n, vec![(COVARIATE.into(), v), (IRRELEVANT.into(), v_dagger)])?;
    Dataset::new(y, a, covs)
}

/// Draws one dataset using the design's own seed.
pub fn generate(design: &SimDesign) -> Result<Dataset> {
    generate_replicate(design, design.seed, 0)
}

/// Dataset for replicate `rep` of a study with master seed `seed`.
pub fn generate_replicate(design: &SimDesign, seed: u64, rep: usize) -> Result<Dataset> {
    design.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    draw(design, &mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// V in both nuisance models.
    Bth,
    /// V† in the outcome nuisance model.
    Psc,
    /// V† in the propensity model.
    Orc,
    /// V† in both.
    Bad,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Bth, Scenario::Psc, Scenario::Orc, Scenario::Bad];

    pub fn label(self) -> &'static str {
        match self {
            Scenario::Bth => "bth",
            Scenario::Psc => "psc",
            Scenario::Orc => "orc",
            Scenario::Bad => "bad",
        }
    }

    pub fn corruption(self) -> Option<Corruption> {
        match self {
            Scenario::Bth => None,
            Scenario::Psc => Some(Corruption::Nuisance),
            Scenario::Orc => Some(Corruption::Propensity),
            Scenario::Bad => Some(Corruption::Both),
        }
    }

    fn nuisance_correct(self) -> bool {
        matches!(self, Scenario::Bth | Scenario::Orc)
    }

    fn propensity_correct(self) -> bool {
        matches!(self, Scenario::Bth | Scenario::Psc)
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|x| x.label() == s)
            .ok_or_else(|| Error::spec(format!("unknown scenario '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Corruption {
    Nuisance,
    Propensity,
    Both,
}

/// Analyst-facing designs for one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioDesigns {
    pub scenario: Scenario,
    pub w: DesignSpec,
    pub z: DesignSpec,
    pub x: DesignSpec,
}

fn covariate_design(correct: bool) -> DesignSpec {
    DesignSpec::with_intercept([if correct { COVARIATE } else { IRRELEVANT }])
}

/// Designs that swap V for the irrelevant V† in the indicated models. The
/// target model always uses V.
pub fn corrupt_design(dataset: &Dataset, which: Option<Corruption>) -> Result<ScenarioDesigns> {
    for col in [COVARIATE, IRRELEVANT] {
        if dataset.column(col).is_none() {
            return Err(Error::spec(format!("dataset has no '{col}' column; was it simulated?")));
        }
    }
    let scenario = match which {
        None => Scenario::Bth,
        Some(Corruption::Nuisance) => Scenario::Psc,
        Some(Corruption::Propensity) => Scenario::Orc,
        Some(Corruption::Both) => Scenario::Bad,
    };
    Ok(scenario_designs(scenario))
}

pub fn scenario_designs(scenario: Scenario) -> ScenarioDesigns {
    ScenarioDesigns {
        scenario,
        w: covariate_design(true),
        z: covariate_design(scenario.nuisance_correct()),
        x: covariate_design(scenario.propensity_correct()),
    }
}

/// Monte Carlo study configuration. `nuisance_form` is the analyst's
/// outcome-nuisance model (the truth is set by the design).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub design: SimDesign,
    pub scenarios: Vec<Scenario>,
    pub estimators: Vec<EstimatorKind>,
    pub nuisance_form: NuisanceForm,
    pub reps: usize,
    pub seed: u64,
}

impl StudyConfig {
    pub fn new(design: SimDesign, reps: usize, seed: u64) -> Self {
        StudyConfig {
            design,
            scenarios: Scenario::ALL.to_vec(),
            estimators: vec![EstimatorKind::Mle, EstimatorKind::Drw, EstimatorKind::Dru],
            nuisance_form: NuisanceForm::LogOp,
            reps,
            seed,
        }
    }

    pub fn with_nuisance_form(mut self, form: NuisanceForm) -> Self {
        self.nuisance_form = form;
        self
    }

    pub fn with_cells(mut self, scenarios: &[Scenario], estimators: &[EstimatorKind]) -> Self {
        self.scenarios = scenarios.to_vec();
        self.estimators = estimators.to_vec();
        self
    }
}

/// Estimate and estimated SE of α from one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateEstimate {
    pub alpha: Vec<f64>,
    pub se: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub estimator: EstimatorKind,
    pub nuisance_form: NuisanceForm,
    pub truth: Vec<f64>,
    pub bias: Vec<f64>,
    /// Monte Carlo standard error of the bias.
    pub bias_se: Vec<f64>,
    pub mc_sd: Vec<f64>,
    pub mean_est_sd: Vec<f64>,
    pub sd_accuracy: Vec<f64>,
    pub coverage: Vec<f64>,
    /// Coverage of intervals for the Monte Carlo mean rather than the truth.
    pub centered_coverage: Vec<f64>,
    pub reps: usize,
    pub failures: usize,
    #[serde(skip)]
    pub replicates: Vec<Option<ReplicateEstimate>>,
    #[serde(skip)]
    pub failure_log: Vec<(usize, String)>,
}

/// All cells of one study.
#[derive(Debug, Clone, Serialize)]
pub struct StudyResult {
    pub config: StudyConfig,
    pub cells: Vec<ScenarioResult>,
}

impl StudyResult {
    pub fn cell(&self, scenario: Scenario, estimator: EstimatorKind) -> Option<&ScenarioResult> {
        self.cells
            .iter()
            .find(|c| c.scenario == scenario && c.estimator == estimator)
    }
}

const COEF_NAMES: [&str; 2] = ["alpha0", "alpha1"];
const MAX_FAILURE_FRACTION: f64 = 0.10;

struct ReplicateFits {
    nuisance: [Option<Result<NuisanceFit>>; 2],
    propensity: [Option<Result<PropensityFit>>; 2],
}

fn first_error<T>(r: &Result<T>) -> Error {
    match r {
        Ok(_) => unreachable!(),
        Err(e) => Error::Domain(e.to_string()),
    }
}

fn run_cell(
    cfg: &StudyConfig,
    data: &Dataset,
    fits: &mut ReplicateFits,
    scenario: Scenario,
    estimator: EstimatorKind,
) -> Result<ReplicateEstimate> {
    let designs = scenario_designs(scenario);
    let spec = OutcomeModelSpec::new(cfg.design.measure, designs.w.clone(), designs.z.clone())
        .with_nuisance_form(cfg.nuisance_form);
    let zi = usize::from(!scenario.nuisance_correct());
    if fits.nuisance[zi].is_none() {
        fits.nuisance[zi] = Some(fit_mle(data, &spec, &FitOptions::default()));
    }
    let nuisance = match fits.nuisance[zi].as_ref().unwrap() {
        Ok(f) => f,
        e => return Err(first_error(e)),
    };
    let weight_kind = match estimator {
        EstimatorKind::Mle => {
            let cov = variance::fisher_variance(nuisance)?;
            let k = nuisance.alpha.len();
            return Ok(ReplicateEstimate {
                alpha: nuisance.alpha.iter().cloned().collect(),
                se: (0..k).map(|j| cov[(j, j)].max(0.0).sqrt()).collect(),
            });
        }
        EstimatorKind::Drw => WeightKind::Efficient,
        EstimatorKind::Dru => WeightKind::Naive,
        EstimatorKind::DrP0 => unreachable!("rejected by run_study"),
    };
    let xi = usize::from(!scenario.propensity_correct());
    if fits.propensity[xi].is_none() {
        fits.propensity[xi] = Some(fit_propensity(data, &designs.x));
    }
    let prop = match fits.propensity[xi].as_ref().unwrap() {
        Ok(f) => f,
        e => return Err(first_error(e)),
    };
    let fit = dr::solve_dr(data, &spec, nuisance, prop, weight_kind)?;
    let dec = match weight_kind {
        WeightKind::Efficient => variance::efficient_sandwich(&fit, nuisance, prop, data, &spec)?,
        WeightKind::Naive => variance::sandwich_dr(&fit, nuisance, prop, data, &spec)?,
    };
    Ok(ReplicateEstimate {
        alpha: fit.alpha_dr.iter().cloned().collect(),
        se: dec.standard_errors().iter().cloned().collect(),
    })
}

fn run_replicate(cfg: &StudyConfig, cells: &[(Scenario, EstimatorKind)], rep: usize) -> Vec<Result<ReplicateEstimate>> {
    let data = match generate_replicate(&cfg.design, cfg.seed, rep) {
        Ok(d) => d,
        Err(e) => {
            let msg = e.to_string();
            return cells.iter().map(|_| Err(Error::Domain(msg.clone()))).collect();
        }
    };
    let mut fits = ReplicateFits {
        nuisance: [None, None],
        propensity: [None, None],
    };
    cells
        .iter()
        .map(|&(s, e)| run_cell(cfg, &data, &mut fits, s, e))
        .collect()
}

fn summarize(
    scenario: Scenario,
    estimator: EstimatorKind,
    cfg: &StudyConfig,
    replicates: Vec<Option<ReplicateEstimate>>,
    failure_log: Vec<(usize, String)>,
) -> ScenarioResult {
    let truth = cfg.design.alpha_true.clone();
    let ok: Vec<&ReplicateEstimate> = replicates.iter().flatten().collect();
    let r = ok.len() as f64;
    let z = normal_quantile(0.975);
    let k = truth.len();
    let mut out = ScenarioResult {
        scenario,
        estimator,
        nuisance_form: cfg.nuisance_form,
        truth: truth.clone(),
        bias: vec![f64::NAN; k],
        bias_se: vec![f64::NAN; k],
        mc_sd: vec![f64::NAN; k],
        mean_est_sd: vec![f64::NAN; k],
        sd_accuracy: vec![f64::NAN; k],
        coverage: vec![f64::NAN; k],
        centered_coverage: vec![f64::NAN; k],
        reps: ok.len(),
        failures: failure_log.len(),
        replicates: Vec::new(),
        failure_log,
    };
    if !ok.is_empty() {
        for j in 0..k {
            let est: Vec<f64> = ok.iter().map(|e| e.alpha[j]).collect();
            let mean = est.iter().sum::<f64>() / r;
            let sd = if ok.len() > 1 { variance::sample_sd(&est) } else { f64::NAN };
            let mean_se = ok.iter().map(|e| e.se[j]).sum::<f64>() / r;
            let covered = |centre: f64| {
                ok.iter().filter(|e| (e.alpha[j] - centre).abs() <= z * e.se[j]).count() as f64 / r
            };
            out.bias[j] = mean - truth[j];
            out.bias_se[j] = sd / r.sqrt();
            out.mc_sd[j] = sd;
            out.mean_est_sd[j] = mean_se;
            out.sd_accuracy[j] = mean_se / sd;
            out.coverage[j] = covered(truth[j]);
            out.centered_coverage[j] = covered(mean);
        }
    }
    out.replicates = replicates;
    out
}

/// Runs every scenario × estimator cell on `reps` datasets. Replicate i uses
/// ChaCha stream i of the master seed, so all cells see the same data.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyResult> {
    cfg.design.validate()?;
    if cfg.reps == 0 {
        return Err(Error::spec("study needs reps >= 1"));
    }
    if cfg.estimators.contains(&EstimatorKind::DrP0) {
        return Err(Error::spec(
            "studies take mle, drw and dru; set the nuisance form to linear_p0 instead of dr-p0",
        ));
    }
    let cells: Vec<(Scenario, EstimatorKind)> = cfg
        .scenarios
        .iter()
        .flat_map(|&s| cfg.estimators.iter().map(move |&e| (s, e)))
        .collect();
    let outcomes: Vec<Vec<Result<ReplicateEstimate>>> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| run_replicate(cfg, &cells, rep))
        .collect();
    let mut results = Vec::with_capacity(cells.len());
    for (c, &(scenario, estimator)) in cells.iter().enumerate() {
        let mut replicates = Vec::with_capacity(cfg.reps);
        let mut failures = Vec::new();
        for (rep, row) in outcomes.iter().enumerate() {
            match &row[c] {
                Ok(e) => replicates.push(Some(e.clone())),
                Err(err) => {
                    replicates.push(None);
                    failures.push((rep, err.to_string()));
                }
            }
        }
        if failures.len() as f64 > MAX_FAILURE_FRACTION * cfg.reps as f64 {
            return Err(Error::Domain(format!(
                "{}.{}: {} of {} replicates failed (limit 10%); first (replicate {}): {}",
                estimator,
                scenario.label(),
                failures.len(),
                cfg.reps,
                failures[0].0,
                failures[0].1
            )));
        }
        results.push(summarize(scenario, estimator, cfg, replicates, failures));
    }
    Ok(StudyResult {
        config: cfg.clone(),
        cells: results,
    })
}

/// One CSV row per cell and coefficient.
pub fn write_study_csv<W: Write>(out: W, study: &StudyResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "measure",
        "nuisance",
        "scenario",
        "estimator",
        "coefficient",
        "truth",
        "bias",
        "bias_se",
        "mc_sd",
        "mean_est_sd",
        "sd_accuracy",
        "coverage",
        "reps",
        "failures",
    ])?;
    for c in &study.cells {
        for j in 0..c.truth.len() {
            w.write_record([
                study.config.design.measure.label().to_string(),
                c.nuisance_form.label().to_string(),
                c.scenario.label().to_string(),
                c.estimator.label().to_string(),
                COEF_NAMES.get(j).map(|s| s.to_string()).unwrap_or_else(|| format!("alpha{j}")),
                c.truth[j].to_string(),
                format!("{:.6}", c.bias[j]),
                format!("{:.6}", c.bias_se[j]),
                format!("{:.6}", c.mc_sd[j]),
                format!("{:.6}", c.mean_est_sd[j]),
                format!("{:.4}", c.sd_accuracy[j]),
                format!("{:.4}", c.coverage[j]),
                c.reps.to_string(),
                c.failures.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Stacks per-replicate α estimates of a cell, failed replicates excluded.
pub fn cell_estimates(cell: &ScenarioResult) -> Vec<DVector<f64>> {
    cell.replicates
        .iter()
        .flatten()
        .map(|r| DVector::from_vec(r.alpha.clone()))
        .collect()
}
