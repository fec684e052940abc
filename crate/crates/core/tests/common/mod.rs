//! Oracles and data builders shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rrdr_core::design::{Covariates, Dataset};
use rrdr_core::param_map::TargetMeasure;

pub const MEASURES: [TargetMeasure; 2] = [TargetMeasure::Rr, TargetMeasure::Rd];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// (p0, p1) solving the defining equations by bisection on p0.
pub fn bisect_inverse(theta: f64, phi: f64, m: TargetMeasure) -> (f64, f64) {
    let arm = |p0: f64| match m {
        TargetMeasure::Rr => p0 * theta.exp(),
        TargetMeasure::Rd => p0 + theta.tanh(),
    };
    let (mut lo, mut hi) = match m {
        TargetMeasure::Rr => (0.0, (-theta).exp().min(1.0)),
        TargetMeasure::Rd => ((-theta.tanh()).max(0.0), (1.0 - theta.tanh()).min(1.0)),
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let p1 = arm(mid);
        let log_op = (mid / (1.0 - mid)).ln() + (p1 / (1.0 - p1)).ln();
        if log_op < phi {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let p0 = 0.5 * (lo + hi);
    (p0, arm(p0))
}

/// Efficient weight scale per unit of W, written as the conditional
/// expectations over A with P(A = 1 | V) = e, enumerated directly.
pub fn enumerated_weight(p0: f64, p1: f64, e: f64, m: TargetMeasure) -> f64 {
    let arms = [(0.0, 1.0 - e, p0), (1.0, e, p1)];
    match m {
        TargetMeasure::Rr => {
            let num: f64 = arms.iter().map(|&(a, pa, p)| pa * a * p / (1.0 - p)).sum();
            let den: f64 = arms.iter().map(|&(_, pa, p)| pa * p / (1.0 - p)).sum();
            num / den / (e * (1.0 - p0))
        }
        TargetMeasure::Rd => {
            let rho = p1 - p0;
            let num: f64 = arms.iter().map(|&(a, pa, p)| pa * a * (1.0 - rho * rho) / (p * (1.0 - p))).sum();
            let den: f64 = arms.iter().map(|&(_, pa, p)| pa / (p * (1.0 - p))).sum();
            num / den / (e * p0 * (1.0 - p0))
        }
    }
}

/// Unstructured binary data with one uniform covariate `x`.
pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize) -> Dataset {
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    let a: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5))).collect();
    let y: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.4))).collect();
    Dataset::new(y, a, Covariates::new(n, vec![("x".into(), x)]).unwrap()).unwrap()
}

/// Intercept-only data with the given counts of (a, y) pairs.
pub fn two_arm_dataset(n0: usize, y0: usize, n1: usize, y1: usize) -> Dataset {
    let mut y = Vec::new();
    let mut a = Vec::new();
    for i in 0..n0 {
        a.push(0.0);
        y.push(if i < y0 { 1.0 } else { 0.0 });
    }
    for i in 0..n1 {
        a.push(1.0);
        y.push(if i < y1 { 1.0 } else { 0.0 });
    }
    let n = y.len();
    Dataset::new(y, a, Covariates::new(n, vec![]).unwrap()).unwrap()
}

/// Central finite-difference gradient.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], rel_step: f64) -> Vec<f64> {
    (0..x.len())
        .map(|j| {
            let h = rel_step * (1.0 + x[j].abs());
            let mut up = x.to_vec();
            up[j] += h;
            let mut dn = x.to_vec();
            dn[j] -= h;
            (f(&up) - f(&dn)) / (2.0 * h)
        })
        .collect()
}

/// Draws (V, A, Y) with V uniform on `levels`, P(A = 1 | V) = expit(g0 + g1 V)
/// and log OP, θ linear in V. Adds one 0/1 indicator column `d<k>` per level.
pub fn discrete_dataset(
    rng: &mut ChaCha8Rng,
    n: usize,
    levels: &[f64],
    measure: TargetMeasure,
    alpha: [f64; 2],
    beta: [f64; 2],
    gamma: [f64; 2],
) -> Dataset {
    let mut v = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let vi = levels[rng.random_range(0..levels.len())];
        let e = 1.0 / (1.0 + (-(gamma[0] + gamma[1] * vi)).exp());
        let ai = f64::from(rng.random::<f64>() < e);
        let (p0, p1) = rrdr_core::param_map::inverse(alpha[0] + alpha[1] * vi, beta[0] + beta[1] * vi, measure).unwrap();
        let p = if ai == 1.0 { p1 } else { p0 };
        v.push(vi);
        a.push(ai);
        y.push(f64::from(rng.random::<f64>() < p));
    }
    let mut cols = vec![("v".to_string(), v.clone())];
    for (k, &lvl) in levels.iter().enumerate() {
        cols.push((format!("d{k}"), v.iter().map(|&x| f64::from(x == lvl)).collect()));
    }
    Dataset::new(y, a, Covariates::new(n, cols).unwrap()).unwrap()
}
