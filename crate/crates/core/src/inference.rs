//! Wald intervals and tests, the negative-control check, and comparison reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{pooled_target_moments, AgdStudy, IpdStudy};
use crate::error::{MaicError, Result};
use crate::estimators::{self, arm_mean, Estimate, Method, Scale};
use crate::variance::{self, AgdTerm, Contrast, IpdTerm, SeEstimate, Strategy};
use crate::weighting::{
    balance_check, overlap_diagnostics, solve_weights, BalanceReport, MomentSpec, OverlapReport,
    SolverConfig, WeightModel,
};

fn std_normal() -> Normal {
    Normal::standard()
}

/// Standard normal quantile z_{(1+level)/2}.
pub fn two_sided_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(MaicError::InvalidLevel(level));
    }
    Ok(std_normal().inverse_cdf(0.5 + level / 2.0))
}

pub fn wald_ci(delta: f64, se: f64, level: f64) -> Result<(f64, f64)> {
    let z = two_sided_quantile(level)?;
    if se.is_nan() || se < 0.0 {
        return Err(MaicError::InvalidConfig(format!(
            "standard error {se} must be nonnegative"
        )));
    }
    Ok((delta - z * se, delta + z * se))
}

/// Returns (z, two-sided p).
pub fn wald_test(delta: f64, se: f64) -> Result<(f64, f64)> {
    if !se.is_finite() || se <= 0.0 {
        return Err(MaicError::ZeroSe);
    }
    let z = delta / se;
    let p = 2.0 * std_normal().cdf(-z.abs());
    Ok((z, p.clamp(0.0, 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegControlResult {
    /// Weighted IPD comparator mean minus Ȳ₂₀, on the requested scale.
    pub delta0: f64,
    pub se0: f64,
    pub z: f64,
    pub p_value: f64,
    pub alpha_level: f64,
    pub reject: bool,
}

/// Tests whether the weighted IPD comparator arm matches the AGD comparator
/// arm, which it should when no effect modifier has been omitted.
pub fn negative_control_test(
    ipd: &IpdStudy,
    agd: &AgdStudy,
    model: &WeightModel,
    scale: Scale,
    alpha_level: f64,
) -> Result<NegControlResult> {
    let crit = two_sided_quantile(1.0 - alpha_level)?;
    let comp = agd
        .comparator_arm
        .as_ref()
        .ok_or(MaicError::NoComparatorArm("AGD"))?;
    let m0 = arm_mean(ipd, Some(&model.weights), 0).ok_or(MaicError::NoComparatorArm("IPD"))?;
    let delta0 = scale.g(m0)? - scale.g(comp.y_mean)?;
    let contrast = Contrast {
        ipd: vec![IpdTerm {
            arm: 0,
            mean: m0,
            coef: scale.g_prime(m0)?,
        }],
        agd: vec![AgdTerm {
            arm: 0,
            n: comp.n,
            mean: comp.y_mean,
            var: comp.outcome_variance(ipd.outcome_kind(), "comparator")?,
            coef: -scale.g_prime(comp.y_mean)?,
        }],
        weighted: true,
    };
    // Δ̂₀ is the anchor correction of MAIC-ACB.
    let pieces = variance::contrast_influence(ipd, agd, Some(model), contrast, Method::MaicAcb)?;
    let se0 = variance::sigma2_fo(&pieces).se;
    let (z, p_value) = if se0 > 0.0 {
        wald_test(delta0, se0)?
    } else if delta0 == 0.0 {
        (0.0, 1.0)
    } else {
        return Err(MaicError::ZeroSe);
    };
    Ok(NegControlResult {
        delta0,
        se0,
        z,
        p_value,
        alpha_level,
        reject: z.abs() > crit,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
}

/// Inference for one strategy of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub se: SeEstimate,
    pub ci: Interval,
    pub z: Option<f64>,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub estimate: Option<Estimate>,
    /// Keyed by strategy name.
    pub ses: BTreeMap<Strategy, StrategyResult>,
    /// Strategies that could not be computed, with the reason.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub se_errors: BTreeMap<Strategy, String>,
    /// Set when the point estimate itself failed.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub weights: WeightModel,
    pub balance: BalanceReport,
    pub overlap: OverlapReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub methods: Vec<Method>,
    pub scale: Scale,
    pub strategies: Vec<Strategy>,
    pub level: f64,
    pub moments: MomentSpec,
    pub solver: SolverConfig,
    /// Also run the negative-control test when both comparator arms exist.
    pub negative_control: bool,
    pub alpha_level: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Naive, Method::MaicNab, Method::Stc],
            scale: Scale::Identity,
            strategies: vec![Strategy::Fo],
            level: 0.95,
            moments: MomentSpec::First,
            solver: SolverConfig::default(),
            negative_control: true,
            alpha_level: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub scale: Scale,
    pub level: f64,
    pub moments: MomentSpec,
    /// Strategy used for headline SEs.
    pub default_strategy: Strategy,
    pub results: Vec<MethodResult>,
    pub diagnostics: Option<Diagnostics>,
    /// Error from the weight fit, if it failed.
    pub weight_error: Option<String>,
    pub negative_control: Option<NegControlResult>,
}

fn strategy_result(est: &Estimate, se: SeEstimate, level: f64) -> Result<StrategyResult> {
    let (lo, hi) = wald_ci(est.delta, se.se, level)?;
    let test = wald_test(est.delta, se.se).ok();
    Ok(StrategyResult {
        se,
        ci: Interval { lo, hi, level },
        z: test.map(|t| t.0),
        p_value: test.map(|t| t.1),
    })
}

/// Runs every requested method and SE strategy. Failures of single methods
/// or strategies are recorded in the report; only invalid inputs abort.
pub fn compare(ipd: &IpdStudy, agd: &AgdStudy, cfg: &CompareConfig) -> Result<ComparisonReport> {
    two_sided_quantile(cfg.level)?;
    cfg.solver.validate()?;
    agd.check_alignment(ipd)?;
    let needs_weights = cfg.negative_control || cfg.methods.iter().any(|m| m.is_weighted());
    let (mut model, mut weight_error, mut diagnostics) = (None, None, None);
    if needs_weights {
        let target = pooled_target_moments(agd, cfg.moments)?;
        match solve_weights(ipd, &target, cfg.moments, &cfg.solver) {
            Ok(m) => {
                diagnostics = Some(Diagnostics {
                    balance: balance_check(&m, ipd, &target),
                    overlap: overlap_diagnostics(&m, ipd.p(), cfg.solver.weight_cap_warn, 5),
                    weights: m.clone(),
                });
                model = Some(m);
            }
            Err(e) if e.is_numerical() => weight_error = Some(e.to_string()),
            Err(e) => return Err(e),
        }
    }

    let mut results = Vec::new();
    for &method in &cfg.methods {
        let mut row = MethodResult {
            method,
            estimate: None,
            ses: BTreeMap::new(),
            se_errors: BTreeMap::new(),
            error: None,
        };
        if method.is_weighted() && model.is_none() {
            row.error = weight_error.clone();
            results.push(row);
            continue;
        }
        let est = match estimators::estimate(method, ipd, agd, model.as_ref(), cfg.scale) {
            Ok(e) => e,
            Err(e) => {
                row.error = Some(e.to_string());
                results.push(row);
                continue;
            }
        };
        if method != Method::Stc {
            match variance::influence_components(ipd, agd, model.as_ref(), &est) {
                Ok(pieces) => {
                    for &s in &cfg.strategies {
                        match variance::sigma2(&pieces, s)
                            .and_then(|se| strategy_result(&est, se, cfg.level))
                        {
                            Ok(r) => {
                                row.ses.insert(s, r);
                            }
                            Err(e) => {
                                row.se_errors.insert(s, e.to_string());
                            }
                        }
                    }
                }
                Err(e) => {
                    for &s in &cfg.strategies {
                        row.se_errors.insert(s, e.to_string());
                    }
                }
            }
        }
        row.estimate = Some(est);
        results.push(row);
    }

    let negative_control = match (&model, cfg.negative_control) {
        (Some(m), true) if ipd.has_comparator() && agd.comparator_arm.is_some() => {
            negative_control_test(ipd, agd, m, cfg.scale, cfg.alpha_level).ok()
        }
        _ => None,
    };

    Ok(ComparisonReport {
        scale: cfg.scale,
        level: cfg.level,
        moments: cfg.moments,
        default_strategy: Strategy::Fo,
        results,
        diagnostics,
        weight_error,
        negative_control,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ComparisonReport {
    /// Flat table, one row per method and strategy. On the logit scale the
    /// estimate and interval are odds ratios and `log_estimate` holds Δ̂.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| MaicError::Io(e.to_string());
        w.write_record([
            "method",
            "strategy",
            "estimate",
            "ci_lo",
            "ci_hi",
            "log_estimate",
            "se",
            "p_value",
            "error",
        ])
        .map_err(io)?;
        let tr = |v: f64| match self.scale {
            Scale::Identity => v,
            Scale::Logit => v.exp(),
        };
        let log_est = |d: f64| match self.scale {
            Scale::Identity => None,
            Scale::Logit => Some(d),
        };
        for row in &self.results {
            let name = row.method.name();
            let Some(est) = &row.estimate else {
                w.write_record([
                    name,
                    "",
                    "",
                    "",
                    "",
                    "",
                    "",
                    "",
                    row.error.as_deref().unwrap_or(""),
                ])
                .map_err(io)?;
                continue;
            };
            let mut strategies: Vec<_> = row
                .ses
                .keys()
                .chain(row.se_errors.keys())
                .copied()
                .collect();
            strategies.sort();
            strategies.dedup();
            if strategies.is_empty() {
                w.write_record([
                    name.to_string(),
                    String::new(),
                    tr(est.delta).to_string(),
                    String::new(),
                    String::new(),
                    cell(log_est(est.delta)),
                    String::new(),
                    String::new(),
                    String::new(),
                ])
                .map_err(io)?;
            }
            for s in strategies {
                let record = match row.ses.get(&s) {
                    Some(r) => [
                        name.to_string(),
                        s.name().to_string(),
                        tr(est.delta).to_string(),
                        tr(r.ci.lo).to_string(),
                        tr(r.ci.hi).to_string(),
                        cell(log_est(est.delta)),
                        r.se.se.to_string(),
                        cell(r.p_value),
                        String::new(),
                    ],
                    None => [
                        name.to_string(),
                        s.name().to_string(),
                        tr(est.delta).to_string(),
                        String::new(),
                        String::new(),
                        cell(log_est(est.delta)),
                        String::new(),
                        String::new(),
                        row.se_errors[&s].clone(),
                    ],
                };
                w.write_record(record).map_err(io)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| MaicError::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| MaicError::Io(e.to_string()))
    }
}
