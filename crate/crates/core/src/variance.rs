//! Influence-function variance estimators.
//!
//! Every estimator handled here is a smooth contrast of arm means,
//!
//! ```text
//! Δ̂ = Σₖ g(m̂ₖ)·sₖ   over IPD arms and AGD arms, sₖ = ±1,
//! ```
//!
//! so its influence function is a linear combination of per-arm mean
//! influence functions with coefficients `sₖ·g′(m̂ₖ)`. MAIC-NAB uses one IPD
//! and one AGD arm; the anchored estimators add the two comparator arms.
//!
//! All sums over records use the divisor `N`, the combined size of both
//! trials, and standard errors are `sqrt(σ̂²/N)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{AgdStudy, IpdStudy, TwoStudyData};
use crate::error::{MaicError, Result};
use crate::estimators::{Estimate, Method};
use crate::linalg;
use crate::weighting::WeightModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Omits the contributions of estimating α₁ and the AGD covariate means.
    Fo,
    /// Omits only the AGD covariate-mean contribution.
    Po,
    /// Bounds the AGD covariate-mean covariance by Cauchy-Schwarz.
    Cs,
    /// Heteroskedasticity-robust (HC0) variance of the weighted means.
    Sw,
    /// Full influence function; needs the AGD trial at the patient level.
    Full,
}

impl Strategy {
    /// Strategies available without AGD patient-level data.
    pub const FEASIBLE: [Strategy; 4] = [Strategy::Fo, Strategy::Po, Strategy::Cs, Strategy::Sw];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Fo => "fo",
            Strategy::Po => "po",
            Strategy::Cs => "cs",
            Strategy::Sw => "sw",
            Strategy::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Strategy::Fo,
            Strategy::Po,
            Strategy::Cs,
            Strategy::Sw,
            Strategy::Full,
        ]
        .into_iter()
        .find(|t| t.name() == s)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeEstimate {
    pub strategy: Strategy,
    /// Asymptotic variance estimate σ̂².
    pub sigma2: f64,
    /// sqrt(σ̂²/N).
    pub se: f64,
}

impl SeEstimate {
    fn new(strategy: Strategy, sigma2: f64, n_total: usize) -> Self {
        let sigma2 = sigma2.max(0.0);
        Self {
            strategy,
            sigma2,
            se: (sigma2 / n_total as f64).sqrt(),
        }
    }
}

/// One IPD arm mean entering the contrast.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpdTerm {
    pub arm: u8,
    pub mean: f64,
    pub coef: f64,
}

/// One AGD arm mean entering the contrast; `arm` is 2 (active) or 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgdTerm {
    pub arm: u8,
    pub n: usize,
    pub mean: f64,
    pub var: f64,
    pub coef: f64,
}

/// Linearisation of an estimate in its arm means.
#[derive(Debug, Clone, PartialEq)]
pub struct Contrast {
    pub ipd: Vec<IpdTerm>,
    pub agd: Vec<AgdTerm>,
    /// IPD means are weighted by the fitted trial-selection weights.
    pub weighted: bool,
}

impl Contrast {
    pub fn from_estimate(est: &Estimate, ipd: &IpdStudy, agd: &AgdStudy) -> Result<Self> {
        if est.method == Method::Stc {
            return Err(MaicError::VarianceUnavailable {
                method: est.method.name(),
                strategy: "any",
            });
        }
        let kind = ipd.outcome_kind();
        let gp = |u: f64| est.scale.g_prime(u);
        let active = &agd.active_arm;
        let mut c = Contrast {
            ipd: vec![IpdTerm {
                arm: 1,
                mean: est.mu1,
                coef: gp(est.mu1)?,
            }],
            agd: vec![AgdTerm {
                arm: 2,
                n: active.n,
                mean: est.mu2,
                var: active.outcome_variance(kind, "active")?,
                coef: -gp(est.mu2)?,
            }],
            weighted: est.method.is_weighted(),
        };
        if let Some((m0, y20)) = est.anchor_terms {
            let comp = agd
                .comparator_arm
                .as_ref()
                .ok_or(MaicError::NoComparatorArm("AGD"))?;
            c.ipd.push(IpdTerm {
                arm: 0,
                mean: m0,
                coef: -gp(m0)?,
            });
            c.agd.push(AgdTerm {
                arm: 0,
                n: comp.n,
                mean: y20,
                var: comp.outcome_variance(kind, "comparator")?,
                coef: gp(y20)?,
            });
        }
        Ok(c)
    }
}

/// Empirical influence-function components of one estimate.
///
/// Per-record arrays cover the IPD records in order; the AGD records, for
/// which they are unobserved, count as zeros in sample moments over `N`.
/// On the logit scale every piece already carries its g′ factor.
#[derive(Debug, Clone)]
pub struct InfluencePieces {
    pub method: Method,
    pub n_total: usize,
    /// (N₂₀ + N₂₂)/N.
    pub p_t2: f64,
    /// φ^{μ₁}, combined over the contrast's IPD arms.
    pub phi_mu1: Vec<f64>,
    /// φ̃^{α₁}; absent for unweighted estimators.
    pub phi_alpha: Option<Vec<f64>>,
    /// J^{μ₁} of the active arm.
    pub j_mu1: f64,
    /// C̃₁ of the active arm.
    pub c_tilde: Vec<f64>,
    /// Σₖ coefₖ C̃ₖ/Jₖ, the sensitivity of Δ̂ to the balance equations.
    pub gradient: Vec<f64>,
    /// J^{α₁}, negative definite.
    pub j_alpha: Option<DMatrix<f64>>,
    /// Variance contribution of the AGD outcome means.
    pub var_phi_mu2: f64,
    /// V̂^{μ_{X₂}} ≥ 0, the AGD covariate-mean contribution.
    pub v_mu_x2: f64,
    /// HC0 variance of the IPD means, on the σ²/N convention.
    pub sw_ipd: f64,
    contrast: Contrast,
    j_alpha_inv: Option<DMatrix<f64>>,
    /// N⁻¹ Σ_{T=1} wᵢ.
    w_t1_mean: f64,
}

/// Builds the influence components of `est`. Weighted estimators need the
/// model they were computed from.
pub fn influence_components(
    ipd: &IpdStudy,
    agd: &AgdStudy,
    model: Option<&WeightModel>,
    est: &Estimate,
) -> Result<InfluencePieces> {
    let contrast = Contrast::from_estimate(est, ipd, agd)?;
    contrast_influence(ipd, agd, model, contrast, est.method)
}

/// Influence components of an arbitrary contrast of arm means; `method`
/// only labels errors.
pub fn contrast_influence(
    ipd: &IpdStudy,
    agd: &AgdStudy,
    model: Option<&WeightModel>,
    contrast: Contrast,
    method: Method,
) -> Result<InfluencePieces> {
    let model = if contrast.weighted {
        let m = model
            .ok_or_else(|| MaicError::InvalidConfig(format!("{method} needs fitted weights")))?;
        if m.weights.len() != ipd.len() {
            return Err(MaicError::DimensionMismatch {
                what: "weights".into(),
                expected: ipd.len(),
                found: m.weights.len(),
            });
        }
        Some(m)
    } else {
        None
    };
    let n_total = ipd.len() + agd.total_n();
    let nf = n_total as f64;
    let weight = |i: usize| model.map_or(1.0, |m| m.weights[i]);
    let centered: Vec<Vec<f64>> = match model {
        Some(m) => ipd.records().iter().map(|r| m.centered(&r.x)).collect(),
        None => Vec::new(),
    };
    let d = model.map_or(0, |m| m.alpha1.len());

    let mut phi_mu1 = vec![0.0; ipd.len()];
    let mut gradient = vec![0.0; d];
    let mut sw_ipd = 0.0;
    let (mut j_mu1, mut c_tilde) = (f64::NAN, vec![0.0; d]);
    for term in &contrast.ipd {
        let (mut s, mut s2) = (0.0, 0.0);
        let mut ct = vec![0.0; d];
        for (i, r) in ipd.records().iter().enumerate() {
            if r.z == term.arm {
                let w = weight(i);
                let resid = r.y - term.mean;
                s += w;
                s2 += (w * resid).powi(2);
                for j in 0..d {
                    ct[j] += centered[i][j] * resid * w / nf;
                }
            }
        }
        if s == 0.0 {
            return Err(if term.arm == 1 {
                MaicError::NoActiveArm
            } else {
                MaicError::NoComparatorArm("IPD")
            });
        }
        let j = s / nf;
        for (i, r) in ipd.records().iter().enumerate() {
            if r.z == term.arm {
                phi_mu1[i] += term.coef * (r.y - term.mean) * weight(i) / j;
            }
        }
        for k in 0..d {
            gradient[k] += term.coef * ct[k] / j;
        }
        sw_ipd += term.coef.powi(2) * nf * s2 / (s * s);
        if term.arm == 1 {
            j_mu1 = j;
            c_tilde = ct;
        }
    }

    let var_phi_mu2: f64 = contrast
        .agd
        .iter()
        .map(|t| t.coef.powi(2) * t.var / (t.n as f64 / nf))
        .sum();
    let p_t2 = agd.total_n() as f64 / nf;
    let w_t1_mean = (0..ipd.len()).map(weight).sum::<f64>() / nf;

    let (mut phi_alpha, mut j_alpha, mut j_alpha_inv, mut v_mu_x2) = (None, None, None, 0.0);
    if model.is_some() {
        let mut ja = DMatrix::<f64>::zeros(d, d);
        for (i, c) in centered.iter().enumerate() {
            let cv = DVector::from_column_slice(c);
            ja.ger(-weight(i) / nf, &cv, &cv, 1.0);
        }
        let neg_inv = linalg::spd_inverse(&(-&ja)).ok_or(MaicError::SingularJacobian)?;
        let inv = -neg_inv;
        let grad = DVector::from_column_slice(&gradient);
        // Row vector gradientᵀ J⁻¹, reused for every record.
        let lever = inv.transpose() * &grad;
        phi_alpha = Some(
            centered
                .iter()
                .enumerate()
                .map(|(i, c)| weight(i) * lever.iter().zip(c).map(|(a, b)| a * b).sum::<f64>())
                .collect(),
        );
        let quad = grad.dot(&(&inv * &grad));
        v_mu_x2 = (-w_t1_mean / p_t2 * quad).max(0.0);
        j_alpha = Some(ja);
        j_alpha_inv = Some(inv);
    }

    Ok(InfluencePieces {
        method,
        n_total,
        p_t2,
        phi_mu1,
        phi_alpha,
        j_mu1,
        c_tilde,
        gradient,
        j_alpha,
        var_phi_mu2,
        v_mu_x2,
        sw_ipd,
        contrast,
        j_alpha_inv,
        w_t1_mean,
    })
}

/// Sample variance over `n` records of which only `values` are nonzero.
fn padded_variance(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    let (mut s, mut s2) = (0.0, 0.0);
    for v in values {
        s += v;
        s2 += v * v;
    }
    let nf = n as f64;
    ((s2 - s * s / nf) / (nf - 1.0)).max(0.0)
}

fn padded_covariance(a: &[f64], b: &[f64], n: usize) -> f64 {
    let nf = n as f64;
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (sab - sa * sb / nf) / (nf - 1.0)
}

fn unavailable(p: &InfluencePieces, strategy: Strategy) -> MaicError {
    MaicError::VarianceUnavailable {
        method: p.method.name(),
        strategy: strategy.name(),
    }
}

impl InfluencePieces {
    fn po_term(&self) -> Result<f64> {
        let alpha = self
            .phi_alpha
            .as_ref()
            .ok_or_else(|| unavailable(self, Strategy::Po))?;
        Ok(padded_variance(
            self.phi_mu1.iter().zip(alpha).map(|(a, b)| a + b),
            self.n_total,
        ))
    }
}

pub fn sigma2_fo(p: &InfluencePieces) -> SeEstimate {
    let s = padded_variance(p.phi_mu1.iter().copied(), p.n_total) + p.var_phi_mu2;
    SeEstimate::new(Strategy::Fo, s, p.n_total)
}

/// Needs the α₁ piece, so only weighted estimators qualify.
pub fn sigma2_po(p: &InfluencePieces) -> Result<SeEstimate> {
    Ok(SeEstimate::new(
        Strategy::Po,
        p.po_term()? + p.var_phi_mu2,
        p.n_total,
    ))
}

pub fn sigma2_cs(p: &InfluencePieces) -> Result<SeEstimate> {
    let po = p.po_term().map_err(|_| unavailable(p, Strategy::Cs))?;
    let s = po + p.var_phi_mu2 + p.v_mu_x2 + 2.0 * (p.var_phi_mu2 * p.v_mu_x2).sqrt();
    Ok(SeEstimate::new(Strategy::Cs, s, p.n_total))
}

pub fn sigma2_sw(p: &InfluencePieces) -> SeEstimate {
    SeEstimate::new(Strategy::Sw, p.sw_ipd + p.var_phi_mu2, p.n_total)
}

pub fn sigma2(p: &InfluencePieces, strategy: Strategy) -> Result<SeEstimate> {
    match strategy {
        Strategy::Fo => Ok(sigma2_fo(p)),
        Strategy::Po => sigma2_po(p),
        Strategy::Cs => sigma2_cs(p),
        Strategy::Sw => Ok(sigma2_sw(p)),
        Strategy::Full => Err(MaicError::RequiresFullIpd),
    }
}

/// Full influence-function arrays over all N records: IPD records first,
/// then the AGD-trial records in order.
#[derive(Debug, Clone)]
pub struct FullInfluence {
    pub pieces: InfluencePieces,
    /// φ^{μ₁}, zero on AGD records.
    pub phi_mu1: Vec<f64>,
    /// φ^{μ₂}, zero on IPD records.
    pub phi_mu2: Vec<f64>,
    /// φ̃^{α₁}, zero on AGD records (all zero for unweighted estimators).
    pub phi_alpha: Vec<f64>,
    /// φ̃^{μ_{X₂}}, zero on IPD records.
    pub phi_mu_x2: Vec<f64>,
}

impl FullInfluence {
    pub fn total(&self) -> Vec<f64> {
        (0..self.phi_mu1.len())
            .map(|i| self.phi_mu1[i] + self.phi_mu2[i] + self.phi_alpha[i] + self.phi_mu_x2[i])
            .collect()
    }
}

/// Evaluates every influence-function component, using the AGD trial's
/// patient records for the terms the feasible estimators cannot observe.
pub fn full_influence(
    data: &TwoStudyData,
    model: Option<&WeightModel>,
    est: &Estimate,
) -> Result<FullInfluence> {
    if data.agd_records.is_empty() {
        return Err(MaicError::RequiresFullIpd);
    }
    let agd = data.agd_summary()?;
    let pieces = influence_components(&data.ipd, &agd, model, est)?;
    let n_ipd = data.ipd.len();
    let n = pieces.n_total;
    let nf = n as f64;

    let mut phi_mu1 = pieces.phi_mu1.clone();
    phi_mu1.resize(n, 0.0);
    let mut phi_alpha = pieces.phi_alpha.clone().unwrap_or_else(|| vec![0.0; n_ipd]);
    phi_alpha.resize(n, 0.0);
    let mut phi_mu2 = vec![0.0; n];
    let mut phi_mu_x2 = vec![0.0; n];

    let lever = match (&pieces.j_alpha_inv, model) {
        (Some(inv), Some(_)) => {
            Some(inv.transpose() * DVector::from_column_slice(&pieces.gradient))
        }
        _ => None,
    };
    for (k, r) in data.agd_records.iter().enumerate() {
        let i = n_ipd + k;
        for t in pieces.contrast.agd.iter().filter(|t| t.arm == r.z) {
            phi_mu2[i] += t.coef * (r.y - t.mean) / (t.n as f64 / nf);
        }
        if let (Some(lever), Some(m)) = (&lever, model) {
            let c = m.centered(&r.x);
            let u_scale = -pieces.w_t1_mean / pieces.p_t2;
            phi_mu_x2[i] = u_scale * lever.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(FullInfluence {
        pieces,
        phi_mu1,
        phi_mu2,
        phi_alpha,
        phi_mu_x2,
    })
}

pub fn sigma2_full(
    data: &TwoStudyData,
    model: Option<&WeightModel>,
    est: &Estimate,
) -> Result<SeEstimate> {
    let full = full_influence(data, model, est)?;
    let n = full.pieces.n_total;
    Ok(SeEstimate::new(
        Strategy::Full,
        padded_variance(full.total().into_iter(), n),
        n,
    ))
}

/// The four variance contributions of estimating α₁ and the AGD covariate
/// means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaTerms {
    pub var_alpha: f64,
    pub cov_mu1_alpha: f64,
    pub var_mu_x2: f64,
    pub cov_mu2_mu_x2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaComparison {
    /// Closed forms valid under a correct trial-assignment model, evaluated
    /// with empirical covariances.
    pub plug_in: LemmaTerms,
    /// Sample moments of the influence-function arrays.
    pub direct: LemmaTerms,
}

/// Plug-in closed forms of the α₁ and covariate-mean contributions for
/// identity-scale MAIC-NAB, alongside the sample moments they approximate.
pub fn lemma_variance_terms(
    data: &TwoStudyData,
    model: &WeightModel,
    est: &Estimate,
) -> Result<LemmaComparison> {
    if est.method != Method::MaicNab || est.scale != crate::estimators::Scale::Identity {
        return Err(MaicError::InvalidConfig(
            "closed-form variance terms are defined for identity-scale MAIC-NAB".into(),
        ));
    }
    let full = full_influence(data, Some(model), est)?;
    let n = full.pieces.n_total;
    let direct = LemmaTerms {
        var_alpha: padded_variance(full.phi_alpha.iter().copied(), n),
        cov_mu1_alpha: padded_covariance(&full.phi_mu1, &full.phi_alpha, n),
        var_mu_x2: padded_variance(full.phi_mu_x2.iter().copied(), n),
        cov_mu2_mu_x2: padded_covariance(&full.phi_mu2, &full.phi_mu_x2, n),
    };

    let ipd = &data.ipd;
    let t2 = &data.agd_records;
    let d = model.alpha1.len();
    let n_t2 = t2.len() as f64;
    let p = n_t2 / n as f64;
    let w_t1: f64 = model.weights.iter().sum();
    // ω normalised so that its IPD total is N_{T=2}.
    let omega_scale = n_t2 / w_t1;

    let c1 = DVector::from_column_slice(&full.pieces.gradient);
    let cs: Vec<DVector<f64>> = t2
        .iter()
        .map(|r| DVector::from_vec(model.centered(&r.x)))
        .collect();
    let mean_c = cs.iter().fold(DVector::zeros(d), |a, c| a + c) / n_t2;
    let mut vx = DMatrix::zeros(d, d);
    let mut mw = DMatrix::zeros(d, d);
    for (r, c) in t2.iter().zip(&cs) {
        let dc = c - &mean_c;
        vx.ger(1.0 / n_t2, &dc, &dc, 1.0);
        let omega = model.weight_at(&r.x) * omega_scale;
        mw.ger(omega / n_t2, c, c, 1.0);
    }
    let arm2: Vec<_> = t2.iter().zip(&cs).filter(|(r, _)| r.z == 2).collect();
    let n22 = arm2.len() as f64;
    let y22 = arm2.iter().map(|(r, _)| r.y).sum::<f64>() / n22;
    let c_mean22 = arm2.iter().fold(DVector::zeros(d), |a, (_, c)| a + *c) / n22;
    let c2 = arm2.iter().fold(DVector::zeros(d), |a, (r, c)| {
        a + (*c - &c_mean22) * (r.y - y22)
    }) / n22;

    let (mut m, mut s1) = (DVector::zeros(d), 0.0);
    for (i, r) in ipd.records().iter().enumerate() {
        if r.z == 1 {
            let w = model.weights[i];
            let c = DVector::from_vec(model.centered(&r.x));
            m += c * (w * (r.y - est.mu1) * w * omega_scale);
            s1 += w;
        }
    }
    m /= s1;

    let vinv = linalg::spd_inverse(&vx).ok_or(MaicError::SingularJacobian)?;
    let a = &vinv * &c1;
    let plug_in = LemmaTerms {
        var_alpha: a.dot(&(&mw * &a)) / p,
        cov_mu1_alpha: -a.dot(&m) / p,
        var_mu_x2: c1.dot(&a) / p,
        cov_mu2_mu_x2: -a.dot(&c2) / p,
    };
    Ok(LemmaComparison { plug_in, direct })
}
