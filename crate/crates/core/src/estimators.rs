//! Point estimators of the AGD-population contrast.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{AgdStudy, IpdStudy, OutcomeKind};
use crate::error::{MaicError, Result};
use crate::linalg;
use crate::weighting::WeightModel;

/// Scale on which the two counterfactual means are contrasted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Identity,
    Logit,
}

impl Scale {
    pub fn g(self, u: f64) -> Result<f64> {
        match self {
            Scale::Identity => Ok(u),
            Scale::Logit => {
                check_open_unit(u)?;
                Ok((u / (1.0 - u)).ln())
            }
        }
    }

    pub fn g_prime(self, u: f64) -> Result<f64> {
        match self {
            Scale::Identity => Ok(1.0),
            Scale::Logit => {
                check_open_unit(u)?;
                Ok(1.0 / (u * (1.0 - u)))
            }
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Scale::Identity),
            "logit" => Some(Scale::Logit),
            _ => None,
        }
    }
}

fn check_open_unit(u: f64) -> Result<()> {
    if u > 0.0 && u < 1.0 {
        Ok(())
    } else {
        Err(MaicError::BoundaryProportion(u))
    }
}

fn expit(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    MaicNab,
    MaicAcb,
    Bucher,
    Stc,
    Naive,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Naive,
        Method::MaicNab,
        Method::MaicAcb,
        Method::Bucher,
        Method::Stc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::MaicNab => "maic-nab",
            Method::MaicAcb => "maic-acb",
            Method::Bucher => "bucher",
            Method::Stc => "stc",
            Method::Naive => "naive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).or(match s {
            "nab" => Some(Method::MaicNab),
            "acb" => Some(Method::MaicAcb),
            "buc" => Some(Method::Bucher),
            _ => None,
        })
    }

    /// Uses the fitted trial-selection weights.
    pub fn is_weighted(self) -> bool {
        matches!(self, Method::MaicNab | Method::MaicAcb)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub method: Method,
    pub scale: Scale,
    pub delta: f64,
    /// Estimated mean under the IPD treatment in the AGD population.
    pub mu1: f64,
    /// Ȳ₂₂.
    pub mu2: f64,
    /// (IPD comparator mean, Ȳ₂₀) for anchored methods; the IPD mean is
    /// weighted for MAIC-ACB.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_terms: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Weighted mean of the outcome in one IPD arm, `None` when the arm is empty.
pub(crate) fn arm_mean(ipd: &IpdStudy, weights: Option<&[f64]>, z: u8) -> Option<f64> {
    let (mut sw, mut swy) = (0.0, 0.0);
    for (i, r) in ipd.records().iter().enumerate() {
        if r.z == z {
            let w = weights.map_or(1.0, |w| w[i]);
            sw += w;
            swy += w * r.y;
        }
    }
    (sw > 0.0).then(|| swy / sw)
}

fn check_weights(ipd: &IpdStudy, model: &WeightModel) -> Result<()> {
    if model.weights.len() != ipd.len() {
        return Err(MaicError::DimensionMismatch {
            what: "weights".into(),
            expected: ipd.len(),
            found: model.weights.len(),
        });
    }
    Ok(())
}

fn unanchored(method: Method, mu1: f64, agd: &AgdStudy, scale: Scale) -> Result<Estimate> {
    let mu2 = agd.active_arm.y_mean;
    Ok(Estimate {
        method,
        scale,
        delta: scale.g(mu1)? - scale.g(mu2)?,
        mu1,
        mu2,
        anchor_terms: None,
        warnings: Vec::new(),
    })
}

fn anchored(
    method: Method,
    mu1: f64,
    ipd_comp: f64,
    agd: &AgdStudy,
    scale: Scale,
) -> Result<Estimate> {
    let comp = agd
        .comparator_arm
        .as_ref()
        .ok_or(MaicError::NoComparatorArm("AGD"))?;
    let mut est = unanchored(method, mu1, agd, scale)?;
    est.delta -= scale.g(ipd_comp)? - scale.g(comp.y_mean)?;
    est.anchor_terms = Some((ipd_comp, comp.y_mean));
    Ok(est)
}

/// Unanchored MAIC: weighted IPD active mean against Ȳ₂₂.
pub fn maic_nab(
    ipd: &IpdStudy,
    agd: &AgdStudy,
    model: &WeightModel,
    scale: Scale,
) -> Result<Estimate> {
    check_weights(ipd, model)?;
    let mu1 = arm_mean(ipd, Some(&model.weights), 1).ok_or(MaicError::NoActiveArm)?;
    let mut est = unanchored(Method::MaicNab, mu1, agd, scale)?;
    est.warnings.clone_from(&model.warnings);
    Ok(est)
}

/// Anchored MAIC: the unanchored contrast minus the weighted comparator-arm
/// discrepancy between trials.
pub fn maic_acb(
    ipd: &IpdStudy,
    agd: &AgdStudy,
    model: &WeightModel,
    scale: Scale,
) -> Result<Estimate> {
    check_weights(ipd, model)?;
    let mu1 = arm_mean(ipd, Some(&model.weights), 1).ok_or(MaicError::NoActiveArm)?;
    let m0 = arm_mean(ipd, Some(&model.weights), 0).ok_or(MaicError::NoComparatorArm("IPD"))?;
    let mut est = anchored(Method::MaicAcb, mu1, m0, agd, scale)?;
    est.warnings.clone_from(&model.warnings);
    Ok(est)
}

/// Anchored indirect comparison of unweighted within-trial contrasts.
pub fn bucher(ipd: &IpdStudy, agd: &AgdStudy, scale: Scale) -> Result<Estimate> {
    let mu1 = arm_mean(ipd, None, 1).ok_or(MaicError::NoActiveArm)?;
    let m0 = arm_mean(ipd, None, 0).ok_or(MaicError::NoComparatorArm("IPD"))?;
    anchored(Method::Bucher, mu1, m0, agd, scale)
}

/// Unweighted IPD active mean against Ȳ₂₂.
pub fn naive(ipd: &IpdStudy, agd: &AgdStudy, scale: Scale) -> Result<Estimate> {
    let mu1 = arm_mean(ipd, None, 1).ok_or(MaicError::NoActiveArm)?;
    unanchored(Method::Naive, mu1, agd, scale)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeLink {
    Linear,
    #[default]
    Logistic,
}

const STC_MAX_ITER: usize = 100;
const STC_SEPARATION: f64 = 30.0;

/// Coefficients of the outcome regression of Y on (1, X) in the IPD active arm.
pub fn fit_outcome_model(ipd: &IpdStudy, link: OutcomeLink) -> Result<Vec<f64>> {
    let rows: Vec<_> = ipd.records().iter().filter(|r| r.z == 1).collect();
    if rows.is_empty() {
        return Err(MaicError::NoActiveArm);
    }
    let k = ipd.p() + 1;
    let design = DMatrix::from_fn(
        rows.len(),
        k,
        |i, j| if j == 0 { 1.0 } else { rows[i].x[j - 1] },
    );
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.y));

    let weighted_ls = |w: &DVector<f64>, target: &DVector<f64>| -> Result<DVector<f64>> {
        let mut xtwx = DMatrix::zeros(k, k);
        let mut xtwz = DVector::zeros(k);
        for i in 0..rows.len() {
            let xi = design.row(i).transpose();
            xtwx.ger(w[i], &xi, &xi, 1.0);
            xtwz.axpy(w[i] * target[i], &xi, 1.0);
        }
        match linalg::solve_spd(&xtwx, &xtwz) {
            Some(s) if !s.fallback => Ok(s.x),
            _ => Err(MaicError::SingularDesign),
        }
    };

    match link {
        OutcomeLink::Linear => Ok(weighted_ls(&DVector::from_element(rows.len(), 1.0), &y)?
            .iter()
            .copied()
            .collect()),
        OutcomeLink::Logistic => {
            let mut gamma = DVector::zeros(k);
            for _ in 0..STC_MAX_ITER {
                let eta = &design * &gamma;
                let mu = eta.map(expit);
                let w = mu.map(|m| (m * (1.0 - m)).max(1e-12));
                let working = DVector::from_fn(rows.len(), |i, _| eta[i] + (y[i] - mu[i]) / w[i]);
                let next = weighted_ls(&w, &working)?;
                let change = (&next - &gamma).amax();
                gamma = next;
                let largest = gamma.amax();
                if largest > STC_SEPARATION || !largest.is_finite() {
                    return Err(MaicError::SeparationError(largest));
                }
                if change < 1e-10 {
                    return Ok(gamma.iter().copied().collect());
                }
            }
            Err(MaicError::NonConvergence {
                iterations: STC_MAX_ITER,
                residual: f64::NAN,
                covariate: "outcome regression".into(),
            })
        }
    }
}

/// Simulated treatment comparison: the IPD outcome regression evaluated at
/// the pooled AGD covariate means, against Ȳ₂₂.
pub fn stc(ipd: &IpdStudy, agd: &AgdStudy, scale: Scale, link: OutcomeLink) -> Result<Estimate> {
    agd.check_alignment(ipd)?;
    let gamma = fit_outcome_model(ipd, link)?;
    let target = crate::data::pooled_target_moments(agd, crate::weighting::MomentSpec::First)?;
    let eta = gamma[0]
        + gamma[1..]
            .iter()
            .zip(&target)
            .map(|(g, x)| g * x)
            .sum::<f64>();
    let mu1 = match link {
        OutcomeLink::Linear => eta,
        OutcomeLink::Logistic => expit(eta),
    };
    let mut est = unanchored(Method::Stc, mu1, agd, scale)?;
    for (j, name) in ipd.covariate_names().iter().enumerate() {
        let (lo, hi) = ipd
            .records()
            .iter()
            .filter(|r| r.z == 1)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                (lo.min(r.x[j]), hi.max(r.x[j]))
            });
        if target[j] < lo || target[j] > hi {
            let msg = format!(
                "STC extrapolates: AGD mean of `{name}` lies outside the IPD active-arm range"
            );
            log::warn!("{msg}");
            est.warnings.push(msg);
        }
    }
    Ok(est)
}

/// Dispatches to the estimator for `method`. STC uses a logistic outcome
/// model for binary outcomes and a linear one otherwise.
pub fn estimate(
    method: Method,
    ipd: &IpdStudy,
    agd: &AgdStudy,
    model: Option<&WeightModel>,
    scale: Scale,
) -> Result<Estimate> {
    let need_model =
        || model.ok_or_else(|| MaicError::InvalidConfig(format!("{method} needs fitted weights")));
    match method {
        Method::MaicNab => maic_nab(ipd, agd, need_model()?, scale),
        Method::MaicAcb => maic_acb(ipd, agd, need_model()?, scale),
        Method::Bucher => bucher(ipd, agd, scale),
        Method::Stc => {
            let link = match ipd.outcome_kind() {
                OutcomeKind::Binary => OutcomeLink::Logistic,
                OutcomeKind::Continuous => OutcomeLink::Linear,
            };
            stc(ipd, agd, scale, link)
        }
        Method::Naive => naive(ipd, agd, scale),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AgdArm, IpdRecord, OutcomeKind};
    use crate::weighting::MomentSpec;

    fn arm(n: usize, y: f64, x: f64) -> AgdArm {
        AgdArm {
            n,
            y_mean: y,
            y_var: None,
            x_mean: vec![x],
            x_var: None,
        }
    }

    fn agd(active: f64, comp: Option<f64>) -> AgdStudy {
        AgdStudy::new(
            arm(100, active, 0.0),
            comp.map(|c| arm(100, c, 0.0)),
            vec!["x".into()],
        )
        .unwrap()
    }

    /// IPD with given (z, y) pairs and x = 0.
    fn ipd(rows: &[(u8, f64)]) -> IpdStudy {
        let records = rows
            .iter()
            .map(|&(z, y)| IpdRecord { y, z, x: vec![0.0] })
            .collect();
        IpdStudy::new(records, vec!["x".into()], OutcomeKind::Binary).unwrap()
    }

    fn unit_model(ipd: &IpdStudy) -> WeightModel {
        WeightModel::from_alpha(ipd, MomentSpec::First, vec![0.0], vec![0.0])
    }

    fn arm_rows(z: u8, ones: usize, n: usize) -> Vec<(u8, f64)> {
        (0..n)
            .map(|i| (z, if i < ones { 1.0 } else { 0.0 }))
            .collect()
    }

    #[test]
    fn nab_examples() {
        let d = ipd(&arm_rows(1, 6, 10));
        let e = maic_nab(&d, &agd(0.45, None), &unit_model(&d), Scale::Identity).unwrap();
        assert!((e.delta - 0.15).abs() < 1e-12);

        let d = ipd(&[(1, 0.0), (1, 1.0)]);
        let mut m = unit_model(&d);
        m.weights = vec![1.0, 3.0];
        let e = maic_nab(&d, &agd(0.5, None), &m, Scale::Identity).unwrap();
        assert_eq!((e.mu1, e.delta), (0.75, 0.25));
        let e = maic_nab(&d, &agd(0.5, None), &m, Scale::Logit).unwrap();
        assert!((e.delta - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn logit_boundary_is_an_error() {
        let d = ipd(&arm_rows(1, 4, 4));
        assert_eq!(
            naive(&d, &agd(0.5, None), Scale::Logit).unwrap_err(),
            MaicError::BoundaryProportion(1.0)
        );
    }

    #[test]
    fn acb_examples() {
        let mut rows = arm_rows(1, 6, 10);
        rows.extend(arm_rows(0, 4, 10));
        let d = ipd(&rows);
        let a = agd(0.55, Some(0.35));
        let e = maic_acb(&d, &a, &unit_model(&d), Scale::Identity).unwrap();
        assert!(e.delta.abs() < 1e-12);
        let e = maic_acb(&d, &a, &unit_model(&d), Scale::Logit).unwrap();
        let g = |u: f64| (u / (1.0 - u)).ln();
        let oracle = (g(0.6) - g(0.55)) - (g(0.4) - g(0.35));
        assert!((e.delta - oracle).abs() < 1e-12);
        assert!((e.delta + 0.0088).abs() < 5e-4);

        // zero anchor correction
        let a = agd(0.55, Some(0.4));
        let nab = maic_nab(&d, &a, &unit_model(&d), Scale::Identity).unwrap();
        let acb = maic_acb(&d, &a, &unit_model(&d), Scale::Identity).unwrap();
        assert!((nab.delta - acb.delta).abs() < 1e-15);

        assert_eq!(
            maic_acb(&d, &agd(0.5, None), &unit_model(&d), Scale::Identity).unwrap_err(),
            MaicError::NoComparatorArm("AGD")
        );
        let single = ipd(&arm_rows(1, 5, 10));
        assert_eq!(
            maic_acb(
                &single,
                &agd(0.5, Some(0.3)),
                &unit_model(&single),
                Scale::Identity
            )
            .unwrap_err(),
            MaicError::NoComparatorArm("IPD")
        );
    }

    #[test]
    fn bucher_examples() {
        let build = |y11: usize, y10: usize, a: f64, c: f64| {
            let mut rows = arm_rows(1, y11, 10);
            rows.extend(arm_rows(0, y10, 10));
            bucher(&ipd(&rows), &agd(a, Some(c)), Scale::Identity)
                .unwrap()
                .delta
        };
        assert!(build(6, 4, 0.55, 0.35).abs() < 1e-12);
        assert!(build(7, 5, 0.3, 0.1).abs() < 1e-12);
        assert!((build(5, 5, 0.3, 0.2) + 0.1).abs() < 1e-12);
    }

    #[test]
    fn naive_examples() {
        let d = ipd(&arm_rows(1, 6, 10));
        assert!((naive(&d, &agd(0.45, None), Scale::Identity).unwrap().delta - 0.15).abs() < 1e-12);
        for s in [Scale::Identity, Scale::Logit] {
            assert_eq!(naive(&d, &agd(0.6, None), s).unwrap().delta, 0.0);
        }
        let nab = maic_nab(&d, &agd(0.45, None), &unit_model(&d), Scale::Logit).unwrap();
        assert_eq!(
            nab.delta,
            naive(&d, &agd(0.45, None), Scale::Logit).unwrap().delta
        );
    }

    fn xy_study(pairs: &[(f64, f64)], kind: OutcomeKind) -> IpdStudy {
        let records = pairs
            .iter()
            .map(|&(x, y)| IpdRecord {
                y,
                z: 1,
                x: vec![x],
            })
            .collect();
        IpdStudy::new(records, vec!["x".into()], kind).unwrap()
    }

    #[test]
    fn stc_linear_interpolates() {
        let d = xy_study(&[(0.0, 0.0), (1.0, 1.0)], OutcomeKind::Continuous);
        let a = AgdStudy::new(arm(10, 0.5, 0.75), None, vec!["x".into()]).unwrap();
        let e = stc(&d, &a, Scale::Identity, OutcomeLink::Linear).unwrap();
        assert!((e.mu1 - 0.75).abs() < 1e-12);
    }

    #[test]
    fn stc_null_logistic_model() {
        // symmetric outcomes at each x give a zero coefficient vector
        let d = xy_study(
            &[(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)],
            OutcomeKind::Binary,
        );
        let a = AgdStudy::new(arm(10, 0.5, 0.9), None, vec!["x".into()]).unwrap();
        let e = stc(&d, &a, Scale::Identity, OutcomeLink::Logistic).unwrap();
        assert!((e.mu1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn stc_separation() {
        let d = xy_study(
            &[(0.0, 0.0), (1.0, 0.0), (2.0, 1.0), (3.0, 1.0)],
            OutcomeKind::Binary,
        );
        let a = AgdStudy::new(arm(10, 0.5, 1.5), None, vec!["x".into()]).unwrap();
        assert!(matches!(
            stc(&d, &a, Scale::Identity, OutcomeLink::Logistic),
            Err(MaicError::SeparationError(_))
        ));
    }

    #[test]
    fn stc_singular_design() {
        let d = xy_study(&[(1.0, 0.0), (1.0, 1.0)], OutcomeKind::Continuous);
        let a = AgdStudy::new(arm(10, 0.5, 1.0), None, vec!["x".into()]).unwrap();
        assert_eq!(
            stc(&d, &a, Scale::Identity, OutcomeLink::Linear).unwrap_err(),
            MaicError::SingularDesign
        );
    }

    #[test]
    fn stc_extrapolation_warns() {
        let d = xy_study(
            &[(0.0, 0.0), (1.0, 1.0), (0.5, 0.4)],
            OutcomeKind::Continuous,
        );
        let a = AgdStudy::new(arm(10, 0.5, 3.0), None, vec!["x".into()]).unwrap();
        let e = stc(&d, &a, Scale::Identity, OutcomeLink::Linear).unwrap();
        assert_eq!(e.warnings.len(), 1);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()), Some(m));
            assert_eq!(
                serde_json::to_string(&m).unwrap(),
                format!("\"{}\"", m.name())
            );
        }
    }
}
