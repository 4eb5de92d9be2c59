//! Trial-selection weights by convex moment matching.
//!
//! The weights are exponential tilts ω(X) = exp{α₁ᵀ(t(X) − t̄₂)} of the IPD
//! records, with `α₁` the minimiser of
//!
//! ```text
//! Q(α) = n⁻¹ Σᵢ exp{αᵀ cᵢ},   cᵢ = t(Xᵢ) − t̄₂,
//! ```
//!
//! over all IPD records (both arms). `Q` is smooth and strictly convex and its
//! stationarity condition is exactly that the weighted mean of `t(X)` equals
//! the AGD target. Centering at the target removes the intercept.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::IpdStudy;
use crate::error::{MaicError, Result};
use crate::linalg::{self, CONDITION_WARN};

/// Which covariate moments are balanced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum MomentSpec {
    /// Centered first moments: t(X) = X.
    #[default]
    #[serde(rename = "first")]
    First,
    /// First moments and squares: t(X) = (X, X²). Cross products are not used.
    #[serde(rename = "first+second")]
    FirstAndSecond,
}

impl MomentSpec {
    pub fn dim(self, p: usize) -> usize {
        match self {
            MomentSpec::First => p,
            MomentSpec::FirstAndSecond => 2 * p,
        }
    }

    /// t(x).
    pub fn features(self, x: &[f64]) -> Vec<f64> {
        match self {
            MomentSpec::First => x.to_vec(),
            MomentSpec::FirstAndSecond => {
                x.iter().copied().chain(x.iter().map(|v| v * v)).collect()
            }
        }
    }

    pub fn feature_names(self, names: &[String]) -> Vec<String> {
        match self {
            MomentSpec::First => names.to_vec(),
            MomentSpec::FirstAndSecond => names
                .iter()
                .cloned()
                .chain(names.iter().map(|n| format!("{n}^2")))
                .collect(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "first" => Some(MomentSpec::First),
            "first+second" | "second" => Some(MomentSpec::FirstAndSecond),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Max-norm threshold on the balance residual.
    pub grad_tol: f64,
    pub max_iter: usize,
    pub step_halvings_max: usize,
    /// Share of the total weight carried by one record that triggers a warning.
    pub weight_cap_warn: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-10,
            max_iter: 200,
            step_halvings_max: 60,
            weight_cap_warn: 0.25,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grad_tol.is_nan() || self.grad_tol <= 0.0 {
            return Err(MaicError::InvalidConfig("grad_tol must be positive".into()));
        }
        if self.max_iter == 0 || self.step_halvings_max == 0 {
            return Err(MaicError::InvalidConfig(
                "max_iter and step_halvings_max must be at least 1".into(),
            ));
        }
        if self.weight_cap_warn.is_nan() || self.weight_cap_warn <= 0.0 {
            return Err(MaicError::InvalidConfig(
                "weight_cap_warn must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A fitted set of trial-selection weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightModel {
    pub spec: MomentSpec,
    pub alpha1: Vec<f64>,
    /// Target moments the features were centered at.
    pub centering: Vec<f64>,
    /// One weight per IPD record, in record order.
    #[serde(skip)]
    pub weights: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Final value of Q, averaged over the IPD records.
    pub objective: f64,
    /// Effective sample size per IPD arm.
    pub ess: BTreeMap<u8, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl WeightModel {
    /// Centered moment vector t(x) − centering.
    pub fn centered(&self, x: &[f64]) -> Vec<f64> {
        let mut t = self.spec.features(x);
        t.iter_mut().zip(&self.centering).for_each(|(v, c)| *v -= c);
        t
    }

    /// ω(x; α̂₁) for an arbitrary covariate vector, on the same scale as `weights`.
    pub fn weight_at(&self, x: &[f64]) -> f64 {
        dot(&self.alpha1, &self.centered(x)).exp()
    }

    /// Builds a model from given coefficients without fitting.
    pub fn from_alpha(
        ipd: &IpdStudy,
        spec: MomentSpec,
        alpha1: Vec<f64>,
        centering: Vec<f64>,
    ) -> Self {
        let mut model = WeightModel {
            spec,
            alpha1,
            centering,
            weights: Vec::new(),
            converged: true,
            iterations: 0,
            objective: 0.0,
            ess: BTreeMap::new(),
            warnings: Vec::new(),
        };
        model.weights = ipd
            .records()
            .iter()
            .map(|r| model.weight_at(&r.x))
            .collect();
        model.objective = mean(&model.weights);
        model.ess = arm_ess(ipd, &model.weights);
        model
    }

    /// Writes `row,z,weight` lines aligned to IPD row order.
    pub fn weights_csv(&self, ipd: &IpdStudy) -> String {
        let mut out = String::from("row,z,weight\n");
        for (i, (r, w)) in ipd.records().iter().zip(&self.weights).enumerate() {
            out.push_str(&format!("{},{},{}\n", i + 1, r.z, w));
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn arm_ess(ipd: &IpdStudy, weights: &[f64]) -> BTreeMap<u8, f64> {
    let mut ess = BTreeMap::new();
    for z in [0u8, 1] {
        let w: Vec<f64> = ipd
            .records()
            .iter()
            .zip(weights)
            .filter(|(r, _)| r.z == z)
            .map(|(_, &w)| w)
            .collect();
        if let Ok(e) = effective_sample_size(&w) {
            ess.insert(z, e);
        }
    }
    ess
}

/// Objective state at one coefficient vector, kept in log space.
struct Eval {
    log_q: f64,
    /// exp(αᵀcᵢ − max) for numerical range.
    rel_weights: Vec<f64>,
    residual: Vec<f64>,
}

fn evaluate(centered: &[Vec<f64>], alpha: &[f64]) -> Option<Eval> {
    let lin: Vec<f64> = centered.iter().map(|c| dot(alpha, c)).collect();
    let lmax = lin.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lmax.is_finite() {
        return None;
    }
    let rel_weights: Vec<f64> = lin.iter().map(|l| (l - lmax).exp()).collect();
    let total: f64 = rel_weights.iter().sum();
    let d = alpha.len();
    let mut residual = vec![0.0; d];
    for (w, c) in rel_weights.iter().zip(centered) {
        for j in 0..d {
            residual[j] += w * c[j];
        }
    }
    residual.iter_mut().for_each(|r| *r /= total);
    let log_q = lmax + (total / centered.len() as f64).ln();
    Some(Eval {
        log_q,
        rel_weights,
        residual,
    })
}

/// Newton direction −H⁻¹r on the normalised scale, H = Σwccᵀ/Σw.
fn newton_step(centered: &[Vec<f64>], state: &Eval) -> Option<linalg::SymSolve> {
    let d = state.residual.len();
    let total: f64 = state.rel_weights.iter().sum();
    let mut hess = DMatrix::<f64>::zeros(d, d);
    for (w, c) in state.rel_weights.iter().zip(centered) {
        let cv = DVector::from_column_slice(c);
        hess.ger(*w / total, &cv, &cv, 1.0);
    }
    let grad = DVector::from_column_slice(&state.residual);
    linalg::solve_spd(&hess, &(-grad))
}

/// Fits α̂₁ by damped Newton with step halving, starting from α = 0.
///
/// Convergence is declared when every coordinate of the balance residual
/// Σwᵢcᵢ/Σwᵢ is within `grad_tol` (scaled by the feature's IPD standard
/// deviation when that exceeds one, so large-unit covariates are not held to
/// an unattainable absolute tolerance).
pub fn solve_weights(
    ipd: &IpdStudy,
    target: &[f64],
    spec: MomentSpec,
    cfg: &SolverConfig,
) -> Result<WeightModel> {
    cfg.validate()?;
    if ipd.is_empty() {
        return Err(MaicError::EmptyStudy);
    }
    let d = spec.dim(ipd.p());
    if target.len() != d {
        return Err(MaicError::DimensionMismatch {
            what: "target moments".into(),
            expected: d,
            found: target.len(),
        });
    }
    let names = spec.feature_names(ipd.covariate_names());
    let centered: Vec<Vec<f64>> = ipd
        .records()
        .iter()
        .map(|r| {
            let mut t = spec.features(&r.x);
            t.iter_mut().zip(target).for_each(|(v, c)| *v -= c);
            t
        })
        .collect();
    let n = centered.len() as f64;

    let mut tol = vec![cfg.grad_tol; d];
    let mut degenerate = vec![false; d];
    for j in 0..d {
        let (mut lo, mut hi, mut s, mut s2) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0.0);
        for c in &centered {
            lo = lo.min(c[j]);
            hi = hi.max(c[j]);
            s += c[j];
            s2 += c[j] * c[j];
        }
        let sd = (s2 / n - (s / n).powi(2)).max(0.0).sqrt();
        tol[j] = cfg.grad_tol * sd.max(1.0);
        if hi - lo == 0.0 {
            if lo.abs() > tol[j] {
                return Err(MaicError::DegenerateCovariate(names[j].clone()));
            }
            degenerate[j] = true;
            continue;
        }
        // Positive weights keep the weighted mean strictly inside (lo, hi).
        if lo >= 0.0 || hi <= 0.0 {
            return Err(MaicError::NonConvergence {
                iterations: 0,
                residual: s / n,
                covariate: names[j].clone(),
            });
        }
    }

    let mut warnings = Vec::new();
    let mut alpha = vec![0.0; d];
    let mut state = evaluate(&centered, &alpha).expect("finite at alpha = 0");
    let mut iterations = 0;
    let within = |r: &[f64]| r.iter().zip(&tol).all(|(r, t)| r.abs() <= *t);
    let worst = |r: &[f64]| -> (usize, f64) {
        r.iter()
            .zip(&tol)
            .enumerate()
            .map(|(j, (r, t))| (j, r.abs() / t))
            .fold((0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc })
    };
    let fail = |iterations: usize, r: &[f64]| {
        let (j, _) = worst(r);
        MaicError::NonConvergence {
            iterations,
            residual: r[j],
            covariate: names[j].clone(),
        }
    };

    let mut warned_fallback = false;
    let mut warned_condition = false;
    while !within(&state.residual) {
        if iterations >= cfg.max_iter {
            return Err(fail(iterations, &state.residual));
        }
        iterations += 1;

        let solve =
            newton_step(&centered, &state).ok_or_else(|| fail(iterations, &state.residual))?;
        if solve.fallback && !warned_fallback && !degenerate.iter().all(|&g| g) {
            let msg = "balance Hessian is singular (collinear moments); Newton step solved by least squares".to_string();
            log::warn!("{msg}");
            warnings.push(msg);
            warned_fallback = true;
        }
        if solve.condition > CONDITION_WARN && !warned_condition && !solve.fallback {
            let msg = format!("balance Hessian condition number {:.2e}", solve.condition);
            log::warn!("{msg}");
            warnings.push(msg);
            warned_condition = true;
        }
        let step = solve.x;

        let res_norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..cfg.step_halvings_max {
            let trial: Vec<f64> = alpha
                .iter()
                .zip(step.iter())
                .map(|(a, s)| a + t * s)
                .collect();
            if let Some(ev) = evaluate(&centered, &trial) {
                let rounding = 8.0 * f64::EPSILON * state.log_q.abs().max(1.0);
                let decreased = ev.log_q < state.log_q;
                let flat = ev.log_q <= state.log_q + rounding
                    && res_norm(&ev.residual) < res_norm(&state.residual);
                if decreased || flat {
                    accepted = Some((trial, ev));
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((a, ev)) => {
                alpha = a;
                state = ev;
            }
            None => return Err(fail(iterations, &state.residual)),
        }
        if alpha.iter().any(|a| !a.is_finite() || a.abs() > 1e6) {
            return Err(fail(iterations, &state.residual));
        }
    }

    // Full Newton steps past the tolerance are nearly free and push the
    // residual toward rounding level.
    let max_abs = |r: &[f64]| r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for _ in 0..2 {
        if max_abs(&state.residual) == 0.0 {
            break;
        }
        let Some(solve) = newton_step(&centered, &state) else {
            break;
        };
        let trial: Vec<f64> = alpha
            .iter()
            .zip(solve.x.iter())
            .map(|(a, s)| a + s)
            .collect();
        match evaluate(&centered, &trial) {
            Some(ev) if max_abs(&ev.residual) < max_abs(&state.residual) => {
                alpha = trial;
                state = ev;
            }
            _ => break,
        }
    }

    let mut model = WeightModel::from_alpha(ipd, spec, alpha, target.to_vec());
    model.iterations = iterations;
    model.objective = state.log_q.exp();
    model.warnings = warnings;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    /// Σᵢwᵢ(tⱼ(Xᵢ) − targetⱼ)/Σᵢwᵢ per moment.
    pub residual: Vec<f64>,
    pub max_abs: f64,
}

pub fn balance_check(model: &WeightModel, ipd: &IpdStudy, target: &[f64]) -> BalanceReport {
    let d = target.len();
    let mut residual = vec![0.0; d];
    let mut total = 0.0;
    for (r, w) in ipd.records().iter().zip(&model.weights) {
        let t = model.spec.features(&r.x);
        for j in 0..d {
            residual[j] += w * (t[j] - target[j]);
        }
        total += w;
    }
    residual.iter_mut().for_each(|v| *v /= total);
    let max_abs = residual.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    BalanceReport { residual, max_abs }
}

/// Kish effective sample size (Σw)²/Σw².
pub fn effective_sample_size(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() || weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
        return Err(MaicError::EmptyWeights);
    }
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    Ok(s * s / s2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub ess: BTreeMap<u8, f64>,
    /// Arms whose ESS is at most the number of covariates.
    pub low_ess_arms: Vec<u8>,
    /// Largest single-record share of the total weight.
    pub max_weight_share: f64,
    pub share_warning: bool,
    /// (row index, weight) of the largest weights, descending.
    pub largest: Vec<(usize, f64)>,
}

impl OverlapReport {
    pub fn flagged(&self) -> bool {
        self.share_warning || !self.low_ess_arms.is_empty()
    }
}

pub fn overlap_diagnostics(
    model: &WeightModel,
    p: usize,
    weight_cap_warn: f64,
    k: usize,
) -> OverlapReport {
    let low_ess_arms = model
        .ess
        .iter()
        .filter(|(_, &e)| e <= p as f64)
        .map(|(&z, _)| z)
        .collect();
    let total: f64 = model.weights.iter().sum();
    let mut idx: Vec<usize> = (0..model.weights.len()).collect();
    idx.sort_by(|&a, &b| model.weights[b].total_cmp(&model.weights[a]));
    let max_weight_share = idx.first().map_or(0.0, |&i| model.weights[i] / total);
    OverlapReport {
        ess: model.ess.clone(),
        low_ess_arms,
        max_weight_share,
        share_warning: max_weight_share > weight_cap_warn,
        largest: idx.iter().take(k).map(|&i| (i, model.weights[i])).collect(),
    }
}
