mod common;

use common::{discrete_dataset, fd_gradient, random_dataset, rng, two_arm_dataset, MEASURES};
use nalgebra::DVector;
use rand::Rng;
use rrdr_core::design::{build_design, Covariates, Dataset, DesignSpec};
use rrdr_core::mle::{fit_mle, predict, FitOptions, NuisanceForm, OutcomeModel, OutcomeModelSpec};
use rrdr_core::param_map::inverse;
use rrdr_core::propensity::fit_logistic;
use rrdr_core::simulation::{generate, SimDesign};
use rrdr_core::variance::fisher_variance;
use rrdr_core::TargetMeasure::{self, Rd, Rr};

fn linear_spec(m: TargetMeasure) -> OutcomeModelSpec {
    OutcomeModelSpec::new(m, DesignSpec::with_intercept(["x"]), DesignSpec::with_intercept(["x"]))
}

fn split(p: &[f64]) -> (DVector<f64>, DVector<f64>) {
    (DVector::from_column_slice(&p[..2]), DVector::from_column_slice(&p[2..]))
}

fn check_score(model: &OutcomeModel<'_>, params: &[f64]) {
    let (a, b) = split(params);
    let score = model.score(&a, &b).unwrap();
    let fd = fd_gradient(
        |p| {
            let (a, b) = split(p);
            model.log_likelihood(&a, &b).unwrap()
        },
        params,
        1e-6,
    );
    for (j, (&s, &f)) in score.iter().zip(&fd).enumerate() {
        let rel = (s - f).abs() / s.abs().max(1.0);
        assert!(rel < 1e-6, "component {j} at {params:?}: {s} vs {f}");
    }
}

#[test]
fn log_op_score_matches_finite_differences() {
    let mut r = rng(11);
    let data = random_dataset(&mut r, 200);
    for m in MEASURES {
        let spec = linear_spec(m);
        let model = OutcomeModel::new(&data, &spec).unwrap();
        for _ in 0..50 {
            let p: Vec<f64> = (0..4).map(|_| r.random_range(-1.5..1.5)).collect();
            check_score(&model, &p);
        }
    }
}

#[test]
fn linear_baseline_score_matches_finite_differences() {
    let mut r = rng(12);
    let data = random_dataset(&mut r, 200);
    for m in MEASURES {
        let spec = linear_spec(m).with_nuisance_form(NuisanceForm::LinearP0);
        let model = OutcomeModel::new(&data, &spec).unwrap();
        for _ in 0..50 {
            // Keeps both arms' risks strictly inside (0, 1) for x in [-1.5, 1.5].
            let p = [
                r.random_range(-0.3..0.1),
                r.random_range(-0.1..0.1),
                r.random_range(0.35..0.6),
                r.random_range(-0.1..0.1),
            ];
            check_score(&model, &p);
        }
    }
}

#[test]
fn saturated_fit_reproduces_cell_proportions() {
    let levels = [-1.0, 0.0, 1.0];
    let mut r = rng(13);
    for m in MEASURES {
        let data = discrete_dataset(&mut r, 3000, &levels, m, [0.3, -0.4], [-0.5, 0.6], [0.0, 0.4]);
        let dummies = DesignSpec::new(["d0", "d1", "d2"], false);
        let spec = OutcomeModelSpec::new(m, dummies.clone(), dummies);
        let fit = fit_mle(&data, &spec, &FitOptions::default()).unwrap();
        let v = data.column("v").unwrap();
        for &lvl in &levels {
            for arm in [0.0, 1.0] {
                let rows: Vec<usize> = (0..data.n()).filter(|&i| v[i] == lvl && data.a()[i] == arm).collect();
                let prop = rows.iter().map(|&i| data.y()[i]).sum::<f64>() / rows.len() as f64;
                assert!(prop > 0.0 && prop < 1.0);
                let i = rows[0];
                let fitted = if arm == 1.0 { fit.fitted[i].p1 } else { fit.fitted[i].p0 };
                assert!((fitted - prop).abs() < 1e-8, "{m:?} v={lvl} a={arm}: {fitted} vs {prop}");
            }
        }
    }
}

#[test]
fn likelihood_trace_never_decreases() {
    let mut r = rng(14);
    for m in MEASURES {
        let data = discrete_dataset(&mut r, 800, &[-2.0, -1.0, 0.0, 1.0, 2.0], m, [0.0, -1.0], [-0.5, 1.0], [0.1, -0.5]);
        let spec = OutcomeModelSpec::new(m, DesignSpec::with_intercept(["v"]), DesignSpec::with_intercept(["v"]));
        for form in [NuisanceForm::LogOp, NuisanceForm::LinearP0] {
            let spec = spec.clone().with_nuisance_form(form);
            let fit = match fit_mle(&data, &spec, &FitOptions::default()) {
                Ok(f) => f,
                Err(e) => panic!("{m:?} {form:?}: {e}"),
            };
            assert!(fit.loglik_trace.len() >= 2);
            for w in fit.loglik_trace.windows(2) {
                assert!(w[1] >= w[0], "{m:?} {form:?}: {} then {}", w[0], w[1]);
            }
        }
    }
}

#[test]
fn fit_ignores_row_order() {
    let mut r = rng(15);
    let data = random_dataset(&mut r, 300);
    let mut perm: Vec<usize> = (0..data.n()).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, r.random_range(0..=i));
    }
    let shuffled = data.select_rows(&perm);
    for m in MEASURES {
        let spec = linear_spec(m);
        let a = fit_mle(&data, &spec, &FitOptions::default()).unwrap();
        let b = fit_mle(&shuffled, &spec, &FitOptions::default()).unwrap();
        for (x, y) in a.params().iter().zip(b.params().iter()) {
            assert!((x - y).abs() < 1e-10, "{m:?}: {x} vs {y}");
        }
    }
}

#[test]
fn logistic_fit_of_recoded_outcome_recovers_log_odds_product() {
    let levels = [-2.0, -1.0, 0.0, 1.0, 2.0];
    let beta = [-0.5, 1.0];
    let mut r = rng(16);
    for m in MEASURES {
        let data = discrete_dataset(&mut r, 5000, &levels, m, [0.0, -1.0], beta, [0.1, -0.5]);
        let spec = OutcomeModelSpec::new(m, DesignSpec::with_intercept(["v"]), DesignSpec::with_intercept(["v"]));
        let fit = fit_mle(&data, &spec, &FitOptions::default()).unwrap();

        let recoded: Vec<f64> = data.a().iter().zip(data.y()).map(|(&a, &y)| a * y + (1.0 - a) * (1.0 - y)).collect();
        let mut covs: Covariates = data.covariates().clone();
        covs.push("a", data.a().to_vec()).unwrap();
        let x = build_design(&covs, &DesignSpec::new(["d0", "d1", "d2", "d3", "d4", "a", "a:v"], false)).unwrap();
        let logit = fit_logistic(&x, &recoded).unwrap();
        let cov = logit.information.clone().try_inverse().unwrap();
        for (j, col) in [5, 6].into_iter().enumerate() {
            let se = cov[(col, col)].sqrt();
            let diff = (logit.coef[col] - fit.beta[j]).abs();
            assert!(diff < 3.0 * se, "{m:?} beta[{j}]: logistic {} vs mle {} (se {se})", logit.coef[col], fit.beta[j]);
        }
    }
}

#[test]
fn predictions_compose_linear_predictors_with_inverse_map() {
    let design = SimDesign::log_op_truth(Rr, 500).with_seed(3);
    let data = generate(&design).unwrap();
    for m in MEASURES {
        let spec = OutcomeModelSpec::new(m, DesignSpec::with_intercept(["v"]), DesignSpec::with_intercept(["v"]));
        let fit = fit_mle(&data, &spec, &FitOptions::default()).unwrap();
        let grid: Vec<f64> = vec![-2.0, -0.5, 0.0, 1.3, 200.0, -200.0];
        let covs = Covariates::new(grid.len(), vec![("v".into(), grid.clone())]).unwrap();
        let preds = predict(&fit, &covs).unwrap();
        for (p, &v) in preds.iter().zip(&grid) {
            let theta = fit.alpha[0] + fit.alpha[1] * v;
            let phi = fit.beta[0] + fit.beta[1] * v;
            let (p0, p1) = inverse(theta, phi, m).unwrap();
            assert_eq!((p.p0, p.p1), (p0, p1));
            assert!((p.theta - theta).abs() < 1e-12);
            assert!(p.p0 > 0.0 && p.p0 < 1.0 && p.p1 > 0.0 && p.p1 < 1.0);
        }
    }
}

#[test]
fn intercept_only_fisher_matches_delta_method() {
    let (n0, y0, n1, y1) = (400usize, 120usize, 300usize, 150usize);
    let data = two_arm_dataset(n0, y0, n1, y1);
    let (p0, p1) = (y0 as f64 / n0 as f64, y1 as f64 / n1 as f64);
    let (n0, n1) = (n0 as f64, n1 as f64);
    let var_phi = 1.0 / (n0 * p0 * (1.0 - p0)) + 1.0 / (n1 * p1 * (1.0 - p1));
    for m in MEASURES {
        let spec = OutcomeModelSpec::new(m, DesignSpec::intercept_only(), DesignSpec::intercept_only());
        let fit = fit_mle(&data, &spec, &FitOptions::default()).unwrap();
        let cov = fisher_variance(&fit).unwrap();
        let var_alpha = match m {
            Rr => (1.0 - p1) / (n1 * p1) + (1.0 - p0) / (n0 * p0),
            Rd => {
                let rho: f64 = p1 - p0;
                (p0 * (1.0 - p0) / n0 + p1 * (1.0 - p1) / n1) / (1.0 - rho * rho).powi(2)
            }
        };
        assert!((cov[(0, 0)] / var_alpha - 1.0).abs() < 1e-6, "{m:?}: {} vs {var_alpha}", cov[(0, 0)]);
        assert!((cov[(1, 1)] / var_phi - 1.0).abs() < 1e-6, "{m:?}: {} vs {var_phi}", cov[(1, 1)]);
    }
}

#[test]
fn linear_baseline_requires_intercept() {
    let mut r = rng(17);
    let data = random_dataset(&mut r, 100);
    let spec = OutcomeModelSpec::new(Rr, DesignSpec::with_intercept(["x"]), DesignSpec::new(["x"], false))
        .with_nuisance_form(NuisanceForm::LinearP0);
    assert!(fit_mle(&data, &spec, &FitOptions::default()).is_err());
}

#[test]
fn linear_baseline_fit_beats_truth() {
    for m in MEASURES {
        let design = SimDesign::linear_baseline_truth(m, 500).with_seed(21);
        let data = generate(&design).unwrap();
        let spec = OutcomeModelSpec::new(m, DesignSpec::with_intercept(["v"]), DesignSpec::with_intercept(["v"]))
            .with_nuisance_form(NuisanceForm::LinearP0);
        let fit = fit_mle(&data, &spec, &FitOptions::default()).unwrap();
        let model = OutcomeModel::new(&data, &spec).unwrap();
        let at_truth = model
            .log_likelihood(&DVector::from_vec(design.alpha_true.clone()), &DVector::from_vec(design.beta_true.clone()))
            .unwrap();
        assert!(fit.loglik >= at_truth, "{m:?}: {} < {at_truth}", fit.loglik);
        let recomputed = model.log_likelihood(&fit.alpha, &fit.beta).unwrap();
        assert!((recomputed - fit.loglik).abs() < 1e-9);
    }
}

#[test]
fn boundary_data_is_rejected_cleanly() {
    // Every exposed unit has the outcome: the arm risk MLE is on the boundary.
    let data: Dataset = two_arm_dataset(50, 10, 50, 50);
    let spec = OutcomeModelSpec::new(Rr, DesignSpec::intercept_only(), DesignSpec::intercept_only());
    match fit_mle(&data, &spec, &FitOptions::default()) {
        Ok(fit) => assert!(fit.fitted[0].p1 > 0.999 && fit.alpha.iter().all(|a| a.is_finite())),
        Err(e) => assert!(matches!(e.category(), "convergence" | "singularity" | "domain"), "{e}"),
    }
}
