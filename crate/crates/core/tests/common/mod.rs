//! Fixtures and independent reference computations shared by the
//! integration tests. Nothing here calls into the solver or the influence
//! code it is compared against.
#![allow(dead_code)]

use maic::data::{AgdArm, AgdStudy, IpdRecord, IpdStudy, OutcomeKind};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("x{j}")).collect()
}

/// IPD with normal covariates and a binary outcome that depends on them.
pub fn random_ipd(rng: &mut impl Rng, n1: usize, n0: usize, p: usize) -> IpdStudy {
    let mut records = Vec::with_capacity(n1 + n0);
    for (z, n) in [(1u8, n1), (0u8, n0)] {
        for _ in 0..n {
            let x: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
            let eta = -0.3 + 0.4 * f64::from(z) + x.iter().map(|v| 0.5 * v).sum::<f64>();
            let y = f64::from(u8::from(rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp())));
            records.push(IpdRecord { y, z, x });
        }
    }
    IpdStudy::new(records, names(p), OutcomeKind::Binary).unwrap()
}

/// Same design with a continuous outcome.
pub fn random_continuous_ipd(rng: &mut impl Rng, n1: usize, n0: usize, p: usize) -> IpdStudy {
    let mut records = Vec::with_capacity(n1 + n0);
    for (z, n) in [(1u8, n1), (0u8, n0)] {
        for _ in 0..n {
            let x: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
            let noise: f64 = rng.sample(StandardNormal);
            let y = 1.0 + f64::from(z) + x.iter().sum::<f64>() * 0.7 + noise;
            records.push(IpdRecord { y, z, x });
        }
    }
    IpdStudy::new(records, names(p), OutcomeKind::Continuous).unwrap()
}

pub fn arm(n: usize, y_mean: f64, y_var: Option<f64>, x_mean: Vec<f64>) -> AgdArm {
    AgdArm {
        n,
        y_mean,
        y_var,
        x_mean,
        x_var: None,
    }
}

/// AGD with both arms centred at `shift` on every covariate.
pub fn shifted_agd(p: usize, shift: f64, y_active: f64, y_comp: f64, n: usize) -> AgdStudy {
    AgdStudy::new(
        arm(n, y_active, None, vec![shift; p]),
        Some(arm(n, y_comp, None, vec![shift; p])),
        names(p),
    )
    .unwrap()
}

pub fn q_objective(x: &[f64], target: f64, alpha: f64) -> f64 {
    x.iter().map(|v| (alpha * (v - target)).exp()).sum::<f64>() / x.len() as f64
}

/// Minimises the one-covariate objective by a coarse grid scan followed by
/// golden-section refinement.
pub fn grid_minimize_q(x: &[f64], target: f64) -> f64 {
    let (lo, hi, steps) = (-30.0, 30.0, 6000);
    let h = (hi - lo) / steps as f64;
    let mut best = lo;
    let mut best_q = f64::INFINITY;
    for k in 0..=steps {
        let a = lo + k as f64 * h;
        let q = q_objective(x, target, a);
        if q < best_q {
            best_q = q;
            best = a;
        }
    }
    let (mut a, mut b) = (best - h, best + h);
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    while b - a > 1e-11 {
        let c = b - ratio * (b - a);
        let d = a + ratio * (b - a);
        if q_objective(x, target, c) < q_objective(x, target, d) {
            b = d;
        } else {
            a = c;
        }
    }
    0.5 * (a + b)
}

/// Solves Σ exp(a₀ + αᵀcᵢ)(1, cᵢ) = (n, 0) by plain Newton with backtracking
/// on the log-sum-exp objective; returns α.
pub fn intercept_augmented_alpha(centered: &[Vec<f64>]) -> Vec<f64> {
    let d = centered[0].len();
    let lse = |a: &DVector<f64>| -> f64 {
        let etas: Vec<f64> = centered
            .iter()
            .map(|c| a.iter().zip(c).map(|(u, v)| u * v).sum())
            .collect();
        let m = etas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + etas.iter().map(|e| (e - m).exp()).sum::<f64>().ln()
    };
    let mut a = DVector::zeros(d);
    for _ in 0..500 {
        let etas: Vec<f64> = centered
            .iter()
            .map(|c| a.iter().zip(c).map(|(u, v)| u * v).sum())
            .collect();
        let m = etas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = etas.iter().map(|e| (e - m).exp()).collect();
        let s: f64 = w.iter().sum();
        let mut mean = DVector::zeros(d);
        for (c, wi) in centered.iter().zip(&w) {
            mean += DVector::from_column_slice(c) * (*wi / s);
        }
        let mut cov = DMatrix::zeros(d, d);
        for (c, wi) in centered.iter().zip(&w) {
            let dc = DVector::from_column_slice(c) - &mean;
            cov += &dc * dc.transpose() * (*wi / s);
        }
        if mean.amax() < 1e-14 {
            break;
        }
        let step = cov.lu().solve(&mean).expect("non-singular covariance");
        let f0 = lse(&a);
        let mut t = 1.0;
        while lse(&(&a - &step * t)) > f0 && t > 1e-12 {
            t *= 0.5;
        }
        a -= step * t;
    }
    a.iter().copied().collect()
}

/// Central-difference Jacobian of `f` at `theta`.
pub fn numeric_jacobian(f: &dyn Fn(&[f64]) -> Vec<f64>, theta: &[f64]) -> DMatrix<f64> {
    let k = theta.len();
    let m = f(theta).len();
    let mut jac = DMatrix::zeros(m, k);
    for j in 0..k {
        let h = 1e-6 * theta[j].abs().max(1.0);
        let mut up = theta.to_vec();
        let mut dn = theta.to_vec();
        up[j] += h;
        dn[j] -= h;
        let (fu, fd) = (f(&up), f(&dn));
        for i in 0..m {
            jac[(i, j)] = (fu[i] - fd[i]) / (2.0 * h);
        }
    }
    jac
}

/// Weighted mean of the outcome in arm `z`.
pub fn weighted_arm_mean(ipd: &IpdStudy, weights: &[f64], z: u8) -> f64 {
    let (mut s, mut sw) = (0.0, 0.0);
    for (r, w) in ipd.records().iter().zip(weights) {
        if r.z == z {
            s += w * r.y;
            sw += w;
        }
    }
    s / sw
}

/// HC0 sandwich variance Σw²(y − m)²/(Σw)² of a weighted arm mean.
pub fn hc0_weighted_mean_var(ipd: &IpdStudy, weights: &[f64], z: u8) -> f64 {
    let m = weighted_arm_mean(ipd, weights, z);
    let (mut num, mut sw) = (0.0, 0.0);
    for (r, w) in ipd.records().iter().zip(weights) {
        if r.z == z {
            num += (w * (r.y - m)).powi(2);
            sw += w;
        }
    }
    num / (sw * sw)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}
