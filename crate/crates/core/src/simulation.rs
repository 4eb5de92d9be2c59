//! Monte Carlo study of bias, coverage and interval length.
//!
//! Each replicate draws a population from a logistic trial-assignment and
//! outcome model, subsamples exactly `n_per_arm` patients in each of the four
//! (trial, arm) cells, collapses trial 2 to summary statistics and runs every
//! estimator and standard-error strategy.
//!
//! Replicate `r` uses the ChaCha8 stream `r` of the configured seed, so the
//! result does not depend on how replicates are scheduled across threads.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    pooled_target_moments, AgdTrialRecord, IpdRecord, IpdStudy, OutcomeKind, TwoStudyData,
};
use crate::error::{MaicError, Result};
use crate::estimators::{self, Method, Scale};
use crate::inference::{negative_control_test, two_sided_quantile};
use crate::variance::{self, Strategy};
use crate::weighting::{balance_check, solve_weights, MomentSpec, SolverConfig};

const BETA0: f64 = -1.0;
const BETA2: f64 = 0.1;
const BETA4: f64 = 0.5;
const ALPHA0: f64 = 0.0;
/// Covariates carrying trial-assignment and outcome signal.
const SIGNAL_COVARIATES: usize = 4;
/// Stream reserved for the true-effect oracle.
const ORACLE_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Confounding {
    None,
    Moderate,
    Severe,
}

impl Confounding {
    /// (α₁, β₁, β₃) on each signal covariate.
    fn coefficients(self) -> (f64, f64, f64) {
        match self {
            Confounding::None => (0.25, 0.0, 0.0),
            Confounding::Moderate => (0.25, 0.15, 0.1),
            Confounding::Severe => (0.30, 0.25, 0.15),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Confounding::None => "none",
            Confounding::Moderate => "moderate",
            Confounding::Severe => "severe",
        }
    }
}

fn default_oversample() -> usize {
    4
}
fn default_n_oracle() -> usize {
    1_000_000
}
fn default_level() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub p: usize,
    pub n_per_arm: usize,
    pub confounding: Confounding,
    pub scale: Scale,
    pub replicates: usize,
    pub seed: u64,
    #[serde(default = "default_oversample")]
    pub oversample_factor: usize,
    /// Replaces the scenario's trial-assignment slopes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha1_override: Option<Vec<f64>>,
    /// Number of trial-2 draws for the true effect.
    #[serde(default = "default_n_oracle")]
    pub n_oracle: usize,
    #[serde(default)]
    pub moments: MomentSpec,
    #[serde(default = "default_level")]
    pub level: f64,
}

impl ScenarioConfig {
    pub fn new(
        p: usize,
        n_per_arm: usize,
        confounding: Confounding,
        scale: Scale,
        replicates: usize,
        seed: u64,
    ) -> Self {
        Self {
            p,
            n_per_arm,
            confounding,
            scale,
            replicates,
            seed,
            oversample_factor: default_oversample(),
            alpha1_override: None,
            n_oracle: default_n_oracle(),
            moments: MomentSpec::First,
            level: default_level(),
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(s).map_err(|e| MaicError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MaicError::InvalidConfig(m));
        if self.p < SIGNAL_COVARIATES {
            return bad(format!(
                "p = {} but at least {SIGNAL_COVARIATES} covariates are required",
                self.p
            ));
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        if self.n_per_arm < 2 {
            return bad("n_per_arm must be at least 2".into());
        }
        if self.oversample_factor == 0 {
            return bad("oversample_factor must be at least 1".into());
        }
        if self.n_oracle == 0 {
            return bad("n_oracle must be at least 1".into());
        }
        if let Some(a) = &self.alpha1_override {
            if a.len() != self.p {
                return bad(format!(
                    "alpha1_override has {} entries, p = {}",
                    a.len(),
                    self.p
                ));
            }
        }
        two_sided_quantile(self.level)?;
        Ok(())
    }

    fn signal(&self, value: f64) -> Vec<f64> {
        (0..self.p)
            .map(|j| if j < SIGNAL_COVARIATES { value } else { 0.0 })
            .collect()
    }

    pub fn alpha1(&self) -> Vec<f64> {
        self.alpha1_override
            .clone()
            .unwrap_or_else(|| self.signal(self.confounding.coefficients().0))
    }

    pub fn beta1(&self) -> Vec<f64> {
        self.signal(self.confounding.coefficients().1)
    }

    pub fn beta3(&self) -> Vec<f64> {
        self.signal(self.confounding.coefficients().2)
    }
}

/// One simulated patient; `t` is the trial (1 or 2), `z` the arm (0 or `t`).
#[derive(Debug, Clone, PartialEq)]
pub struct PopRecord {
    pub t: u8,
    pub z: u8,
    pub y: f64,
    pub x: Vec<f64>,
}

fn expit(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Dgp {
    alpha1: Vec<f64>,
    beta1: Vec<f64>,
    /// β₁ + β₃, the slope under either active treatment.
    beta_active: Vec<f64>,
}

impl Dgp {
    fn new(cfg: &ScenarioConfig) -> Self {
        let beta1 = cfg.beta1();
        let beta_active = beta1.iter().zip(cfg.beta3()).map(|(a, b)| a + b).collect();
        Self {
            alpha1: cfg.alpha1(),
            beta1,
            beta_active,
        }
    }

    /// X ~ N(0, .8I + .2·11ᵀ).
    fn covariates<R: Rng>(p: usize, rng: &mut R) -> Vec<f64> {
        let shared: f64 = rng.sample(StandardNormal);
        (0..p)
            .map(|_| 0.8f64.sqrt() * rng.sample::<f64, _>(StandardNormal) + 0.2f64.sqrt() * shared)
            .collect()
    }

    fn trial<R: Rng>(&self, x: &[f64], rng: &mut R) -> u8 {
        1 + u8::from(rng.random::<f64>() < expit(ALPHA0 + dot(&self.alpha1, x)))
    }

    /// E(Y | X, Z) under the outcome logit.
    fn outcome_mean(&self, x: &[f64], z: u8) -> f64 {
        let lin = if z == 0 {
            BETA0 + dot(&self.beta1, x)
        } else {
            BETA0 + dot(&self.beta_active, x) + BETA2 + if z == 2 { BETA4 } else { 0.0 }
        };
        expit(lin)
    }
}

/// Draws `n_star` patients from the pooled two-trial population.
pub fn generate_population<R: Rng>(
    cfg: &ScenarioConfig,
    n_star: usize,
    rng: &mut R,
) -> Vec<PopRecord> {
    let dgp = Dgp::new(cfg);
    (0..n_star)
        .map(|_| {
            let x = Dgp::covariates(cfg.p, rng);
            let t = dgp.trial(&x, rng);
            let z = if rng.random::<f64>() < 0.5 { t } else { 0 };
            let y = f64::from(u8::from(rng.random::<f64>() < dgp.outcome_mean(&x, z)));
            PopRecord { t, z, y, x }
        })
        .collect()
}

const CELLS: [(u8, u8); 4] = [(1, 0), (1, 1), (2, 0), (2, 2)];

/// Keeps a uniform random subset of exactly `n_per_arm` patients per cell.
pub fn subsample_by_arm<R: Rng>(
    population: &[PopRecord],
    n_per_arm: usize,
    rng: &mut R,
) -> Result<TwoStudyData> {
    let p = population.first().map_or(0, |r| r.x.len());
    let mut ipd = Vec::with_capacity(2 * n_per_arm);
    let mut agd = Vec::with_capacity(2 * n_per_arm);
    for (t, z) in CELLS {
        let members: Vec<usize> = (0..population.len())
            .filter(|&i| population[i].t == t && population[i].z == z)
            .collect();
        if members.len() < n_per_arm {
            return Err(MaicError::InsufficientCell {
                trial: t,
                arm: z,
                available: members.len(),
                required: n_per_arm,
            });
        }
        let mut chosen: Vec<usize> = index::sample(rng, members.len(), n_per_arm)
            .into_iter()
            .collect();
        chosen.sort_unstable();
        for k in chosen {
            let r = &population[members[k]];
            if t == 1 {
                ipd.push(IpdRecord {
                    y: r.y,
                    z,
                    x: r.x.clone(),
                });
            } else {
                agd.push(AgdTrialRecord {
                    y: r.y,
                    z,
                    x: r.x.clone(),
                });
            }
        }
    }
    let names = (1..=p).map(|j| format!("x{j}")).collect();
    Ok(TwoStudyData {
        ipd: IpdStudy::new(ipd, names, OutcomeKind::Binary)?,
        agd_records: agd,
    })
}

/// True contrast of counterfactual means in trial 2, from `n_oracle`
/// trial-2 members.
pub fn true_delta<R: Rng>(cfg: &ScenarioConfig, n_oracle: usize, rng: &mut R) -> f64 {
    let dgp = Dgp::new(cfg);
    let (mut m1, mut m2, mut kept) = (0.0, 0.0, 0usize);
    while kept < n_oracle {
        let x = Dgp::covariates(cfg.p, rng);
        if dgp.trial(&x, rng) != 2 {
            continue;
        }
        m1 += dgp.outcome_mean(&x, 1);
        m2 += dgp.outcome_mean(&x, 2);
        kept += 1;
    }
    let (m1, m2) = (m1 / kept as f64, m2 / kept as f64);
    match cfg.scale {
        Scale::Identity => m1 - m2,
        Scale::Logit => (m1 / (1.0 - m1)).ln() - (m2 / (1.0 - m2)).ln(),
    }
}

/// Oracle truth on the configured scale, from its own reserved stream.
pub fn scenario_truth(cfg: &ScenarioConfig) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(ORACLE_STREAM);
    true_delta(cfg, cfg.n_oracle, &mut rng)
}

pub const SIM_METHODS: [Method; 5] = [
    Method::MaicNab,
    Method::MaicAcb,
    Method::Bucher,
    Method::Stc,
    Method::Naive,
];
pub const SIM_STRATEGIES: [Strategy; 5] = [
    Strategy::Fo,
    Strategy::Po,
    Strategy::Cs,
    Strategy::Sw,
    Strategy::Full,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodDraw {
    pub delta: Option<f64>,
    pub se: BTreeMap<Strategy, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub index: usize,
    pub methods: BTreeMap<Method, MethodDraw>,
    /// Failure messages, tagged by method or stage.
    pub errors: Vec<String>,
    /// Max-norm balance residual of the weight fit.
    pub balance_residual: Option<f64>,
    pub min_ess: Option<f64>,
    pub negative_control_reject: Option<bool>,
}

fn with_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws replicate `index` with exact cell sizes, doubling the initial draw
/// whenever a cell comes up short.
pub fn draw_replicate(cfg: &ScenarioConfig, index: usize) -> Result<TwoStudyData> {
    let mut rng = with_stream(cfg.seed, index as u64);
    let mut factor = cfg.oversample_factor;
    loop {
        let n_star = factor * 4 * cfg.n_per_arm;
        let pop = generate_population(cfg, n_star, &mut rng);
        match subsample_by_arm(&pop, cfg.n_per_arm, &mut rng) {
            Err(MaicError::InsufficientCell { .. }) if factor < 1 << 20 => factor *= 2,
            other => return other,
        }
    }
}

pub fn run_replicate(cfg: &ScenarioConfig, index: usize) -> Result<ReplicateResult> {
    let data = draw_replicate(cfg, index)?;
    let agd = data.agd_summary()?;
    let mut out = ReplicateResult {
        index,
        methods: BTreeMap::new(),
        errors: Vec::new(),
        balance_residual: None,
        min_ess: None,
        negative_control_reject: None,
    };
    let target = pooled_target_moments(&agd, cfg.moments)?;
    let model = match solve_weights(&data.ipd, &target, cfg.moments, &SolverConfig::default()) {
        Ok(m) => {
            out.balance_residual = Some(balance_check(&m, &data.ipd, &target).max_abs);
            out.min_ess = m.ess.values().copied().reduce(f64::min);
            match negative_control_test(&data.ipd, &agd, &m, cfg.scale, 0.05) {
                Ok(r) => out.negative_control_reject = Some(r.reject),
                Err(e) => out.errors.push(format!("negative control: {e}")),
            }
            Some(m)
        }
        Err(e) => {
            out.errors.push(format!("weights: {e}"));
            None
        }
    };

    for method in SIM_METHODS {
        let mut draw = MethodDraw {
            delta: None,
            se: BTreeMap::new(),
        };
        if method.is_weighted() && model.is_none() {
            out.methods.insert(method, draw);
            continue;
        }
        let est = match estimators::estimate(method, &data.ipd, &agd, model.as_ref(), cfg.scale) {
            Ok(e) => e,
            Err(e) => {
                out.errors.push(format!("{method}: {e}"));
                out.methods.insert(method, draw);
                continue;
            }
        };
        draw.delta = Some(est.delta);
        if method != Method::Stc {
            match variance::influence_components(&data.ipd, &agd, model.as_ref(), &est) {
                Ok(pieces) => {
                    for s in Strategy::FEASIBLE {
                        if let Ok(se) = variance::sigma2(&pieces, s) {
                            draw.se.insert(s, se.se);
                        }
                    }
                }
                Err(e) => out.errors.push(format!("{method} variance: {e}")),
            }
            match variance::sigma2_full(&data, model.as_ref(), &est) {
                Ok(se) => {
                    draw.se.insert(Strategy::Full, se.se);
                }
                Err(e) => out.errors.push(format!("{method} full variance: {e}")),
            }
        }
        out.methods.insert(method, draw);
    }
    Ok(out)
}

/// A summary statistic with its Monte Carlo standard error; `None` when
/// undefined (for example a standard deviation from one replicate).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McValue {
    pub value: Option<f64>,
    pub mc_se: Option<f64>,
}

impl McValue {
    const NULL: McValue = McValue {
        value: None,
        mc_se: None,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub n_used: usize,
    pub coverage: McValue,
    pub relative_length: McValue,
    pub mean_se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub n_ok: usize,
    pub failures: usize,
    pub mean_estimate: Option<f64>,
    /// 100 · mean(Δ̂ − Δ)/Δ.
    pub percent_bias: McValue,
    pub empirical_sd: Option<f64>,
    pub strategies: BTreeMap<Strategy, StrategySummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub config: ScenarioConfig,
    pub true_delta: f64,
    pub replicates_failed: usize,
    pub methods: BTreeMap<Method, MethodSummary>,
    pub negative_control_rejection: McValue,
    pub max_balance_residual: Option<f64>,
    /// Replicates whose weight fit did not converge.
    pub weight_failures: usize,
    /// Replicates with IPD active-arm ESS at most p.
    pub low_ess_replicates: usize,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn sample_sd(v: &[f64]) -> Option<f64> {
    let m = mean(v)?;
    (v.len() > 1)
        .then(|| (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
}

fn proportion(hits: usize, n: usize) -> McValue {
    if n == 0 {
        return McValue::NULL;
    }
    let p = hits as f64 / n as f64;
    McValue {
        value: Some(p),
        mc_se: Some((p * (1.0 - p) / n as f64).sqrt()),
    }
}

/// Aggregates replicate results against the true effect.
pub fn summarize(cfg: &ScenarioConfig, truth: f64, reps: &[ReplicateResult]) -> SimulationReport {
    let z = two_sided_quantile(cfg.level).unwrap_or(1.959_963_984_540_054);
    let mut methods = BTreeMap::new();
    for method in SIM_METHODS {
        let deltas: Vec<f64> = reps
            .iter()
            .filter_map(|r| r.methods.get(&method).and_then(|d| d.delta))
            .collect();
        let sd = sample_sd(&deltas);
        let percent_bias = match mean(&deltas) {
            Some(m) => McValue {
                value: Some(100.0 * (m - truth) / truth),
                mc_se: sd.map(|s| 100.0 * s / (deltas.len() as f64).sqrt() / truth.abs()),
            },
            None => McValue::NULL,
        };
        let mut strategies = BTreeMap::new();
        if method != Method::Stc {
            for s in SIM_STRATEGIES {
                let pairs: Vec<(f64, f64)> = reps
                    .iter()
                    .filter_map(|r| {
                        let d = r.methods.get(&method)?;
                        Some((d.delta?, *d.se.get(&s)?))
                    })
                    .collect();
                let hits = pairs
                    .iter()
                    .filter(|(d, se)| (d - truth).abs() <= z * se)
                    .count();
                let ses: Vec<f64> = pairs.iter().map(|p| p.1).collect();
                let mean_se = mean(&ses);
                let relative_length = match (mean_se, sd) {
                    (Some(m), Some(sd)) if sd > 0.0 => {
                        let rl = m / sd;
                        let n = ses.len() as f64;
                        let se_var = sample_sd(&ses).map_or(0.0, |s| s * s);
                        let rel = se_var / (n * m * m) + 1.0 / (2.0 * (deltas.len() as f64 - 1.0));
                        McValue {
                            value: Some(rl),
                            mc_se: Some(rl * rel.sqrt()),
                        }
                    }
                    _ => McValue::NULL,
                };
                strategies.insert(
                    s,
                    StrategySummary {
                        n_used: pairs.len(),
                        coverage: proportion(hits, pairs.len()),
                        relative_length,
                        mean_se,
                    },
                );
            }
        }
        methods.insert(
            method,
            MethodSummary {
                n_ok: deltas.len(),
                failures: reps.len() - deltas.len(),
                mean_estimate: mean(&deltas),
                percent_bias,
                empirical_sd: sd,
                strategies,
            },
        );
    }
    let nc: Vec<bool> = reps
        .iter()
        .filter_map(|r| r.negative_control_reject)
        .collect();
    SimulationReport {
        config: cfg.clone(),
        true_delta: truth,
        replicates_failed: cfg.replicates - reps.len(),
        methods,
        negative_control_rejection: proportion(nc.iter().filter(|&&b| b).count(), nc.len()),
        max_balance_residual: reps
            .iter()
            .filter_map(|r| r.balance_residual)
            .reduce(f64::max),
        weight_failures: reps.iter().filter(|r| r.balance_residual.is_none()).count(),
        low_ess_replicates: reps
            .iter()
            .filter(|r| r.min_ess.is_some_and(|e| e <= cfg.p as f64))
            .count(),
    }
}

/// Runs all replicates on the current rayon pool, in index order.
pub fn run_replicates(cfg: &ScenarioConfig) -> Result<Vec<ReplicateResult>> {
    cfg.validate()?;
    let results: Vec<Result<ReplicateResult>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|i| run_replicate(cfg, i))
        .collect();
    Ok(results.into_iter().filter_map(|r| r.ok()).collect())
}

pub fn run_study(cfg: &ScenarioConfig) -> Result<SimulationReport> {
    let reps = run_replicates(cfg)?;
    let truth = scenario_truth(cfg);
    Ok(summarize(cfg, truth, &reps))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SimulationReport {
    /// One row per scenario, estimator, strategy and metric.
    pub fn to_tidy_csv(&self) -> Result<String> {
        let io = |e: csv::Error| MaicError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "confounding",
            "p",
            "n_per_arm",
            "scale",
            "estimator",
            "strategy",
            "metric",
            "value",
            "mc_se",
        ])
        .map_err(io)?;
        let c = &self.config;
        let scale = match c.scale {
            Scale::Identity => "identity",
            Scale::Logit => "logit",
        };
        let head = [
            c.confounding.name().to_string(),
            c.p.to_string(),
            c.n_per_arm.to_string(),
            scale.to_string(),
        ];
        let mut row = |est: &str, strat: &str, metric: &str, v: Option<f64>, se: Option<f64>| {
            let mut r: Vec<String> = head.to_vec();
            r.extend([
                est.to_string(),
                strat.to_string(),
                metric.to_string(),
                opt(v),
                opt(se),
            ]);
            w.write_record(&r)
        };
        row("", "", "true_delta", Some(self.true_delta), None).map_err(io)?;
        for (m, s) in &self.methods {
            let name = m.name();
            row(
                name,
                "",
                "percent_bias",
                s.percent_bias.value,
                s.percent_bias.mc_se,
            )
            .map_err(io)?;
            row(name, "", "mean_estimate", s.mean_estimate, None).map_err(io)?;
            row(name, "", "empirical_sd", s.empirical_sd, None).map_err(io)?;
            row(name, "", "failures", Some(s.failures as f64), None).map_err(io)?;
            for (st, ss) in &s.strategies {
                row(
                    name,
                    st.name(),
                    "coverage",
                    ss.coverage.value,
                    ss.coverage.mc_se,
                )
                .map_err(io)?;
                row(
                    name,
                    st.name(),
                    "relative_length",
                    ss.relative_length.value,
                    ss.relative_length.mc_se,
                )
                .map_err(io)?;
            }
        }
        row(
            "",
            "",
            "negative_control_rejection",
            self.negative_control_rejection.value,
            self.negative_control_rejection.mc_se,
        )
        .map_err(io)?;
        let bytes = w.into_inner().map_err(|e| MaicError::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| MaicError::Io(e.to_string()))
    }
}
