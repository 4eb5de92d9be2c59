mod common;

use common::*;
use maic::data::{pooled_target_moments, AgdStudy, AgdTrialRecord, IpdStudy, TwoStudyData};
use maic::estimators::{estimate, maic_acb, maic_nab, Estimate, Method, Scale};
use maic::simulation::{draw_replicate, Confounding, ScenarioConfig};
use maic::variance::{influence_components, sigma2, sigma2_full, Strategy};
use maic::weighting::{solve_weights, MomentSpec, SolverConfig, WeightModel};
use maic::MaicError;
use nalgebra::{DMatrix, DVector};

fn fitted(ipd: &IpdStudy, agd: &AgdStudy) -> WeightModel {
    let target = pooled_target_moments(agd, MomentSpec::First).unwrap();
    solve_weights(ipd, &target, MomentSpec::First, &SolverConfig::default()).unwrap()
}

fn g_prime(scale: Scale, u: f64) -> f64 {
    match scale {
        Scale::Identity => 1.0,
        Scale::Logit => 1.0 / (u * (1.0 - u)),
    }
}

/// Which nuisance blocks the stacked system estimates jointly with the arm
/// means.
#[derive(Clone, Copy, PartialEq)]
enum Stack {
    /// Weights held fixed at their fitted values.
    MeansOnly,
    /// α₁ estimated, AGD covariate means fixed.
    WithAlpha,
    /// α₁, the AGD covariate means and the AGD outcome means all estimated
    /// from the AGD patient records.
    Everything,
}

/// Stacked M-estimation sandwich for (α₁, μ_X, μ₁, μ₀, ν₂, ν₀), with a
/// finite-difference bread. Returns Var(Δ̂) for the contrast
/// g(μ₁) − g(ν₂) − anchored·(g(μ₀) − g(ν₀)), excluding AGD outcome terms
/// unless the stack estimates them.
fn stacked_variance(
    ipd: &IpdStudy,
    agd_records: &[AgdTrialRecord],
    n_agd: usize,
    model: &WeightModel,
    est: &Estimate,
    stack: Stack,
) -> f64 {
    let d = model.alpha1.len();
    let anchored = est.anchor_terms.is_some();
    let n_total = (ipd.len() + n_agd) as f64;
    let mu1 = weighted_arm_mean(ipd, &model.weights, 1);
    let mu0 = if anchored {
        weighted_arm_mean(ipd, &model.weights, 0)
    } else {
        0.0
    };
    let (nu2, nu0) = (est.mu2, est.anchor_terms.map_or(0.0, |a| a.1));

    let with_alpha = stack != Stack::MeansOnly;
    let with_agd = stack == Stack::Everything;
    let mut theta = Vec::new();
    if with_alpha {
        theta.extend(&model.alpha1);
    }
    if with_agd {
        theta.extend(&model.centering);
    }
    let mu_at = theta.len();
    theta.extend([mu1, mu0]);
    if with_agd {
        theta.extend([nu2, nu0]);
    }
    let k = theta.len();

    let unpack = |th: &[f64]| {
        let alpha = if with_alpha {
            th[..d].to_vec()
        } else {
            model.alpha1.clone()
        };
        let centre = if with_agd {
            th[d..2 * d].to_vec()
        } else {
            model.centering.clone()
        };
        (alpha, centre)
    };
    // ψ for record i (IPD rows first, then AGD rows).
    let psi = |th: &[f64], i: usize| -> Vec<f64> {
        let (alpha, centre) = unpack(th);
        let mut out = vec![0.0; k];
        if i < ipd.len() {
            let r = &ipd.records()[i];
            let c: Vec<f64> = r.x.iter().zip(&centre).map(|(x, m)| x - m).collect();
            let w = alpha.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>().exp();
            if with_alpha {
                for j in 0..d {
                    out[j] = w * c[j];
                }
            }
            if r.z == 1 {
                out[mu_at] = w * (r.y - th[mu_at]);
            } else if anchored {
                out[mu_at + 1] = w * (r.y - th[mu_at + 1]);
            }
        } else if with_agd {
            let r = &agd_records[i - ipd.len()];
            for j in 0..d {
                out[d + j] = r.x[j] - th[d + j];
            }
            if r.z == 2 {
                out[mu_at + 2] = r.y - th[mu_at + 2];
            } else if anchored {
                out[mu_at + 3] = r.y - th[mu_at + 3];
            }
        }
        out
    };
    let n_rows = ipd.len() + if with_agd { agd_records.len() } else { 0 };
    let mean_psi = |th: &[f64]| -> Vec<f64> {
        let mut acc = vec![0.0; k];
        for i in 0..n_rows {
            for (a, v) in acc.iter_mut().zip(psi(th, i)) {
                *a += v / n_total;
            }
        }
        acc
    };
    let mut a = numeric_jacobian(&mean_psi, &theta);
    // Unused anchored slots would leave the bread singular.
    if !anchored {
        a[(mu_at + 1, mu_at + 1)] = 1.0;
        if with_agd {
            a[(mu_at + 3, mu_at + 3)] = 1.0;
        }
    }
    let mut b = DMatrix::zeros(k, k);
    for i in 0..n_rows {
        let v = DVector::from_vec(psi(&theta, i));
        b += &v * v.transpose() / n_total;
    }
    let a_inv = a.try_inverse().unwrap();
    let v = &a_inv * b * a_inv.transpose();

    let scale = est.scale;
    let mut grad = DVector::zeros(k);
    grad[mu_at] = g_prime(scale, mu1);
    if anchored {
        grad[mu_at + 1] = -g_prime(scale, mu0);
    }
    if with_agd {
        grad[mu_at + 2] = -g_prime(scale, nu2);
        if anchored {
            grad[mu_at + 3] = g_prime(scale, nu0);
        }
    }
    grad.dot(&(&v * &grad)) / n_total
}

/// AGD outcome-mean contribution from the published summaries.
fn agd_outcome_term(agd: &AgdStudy, est: &Estimate) -> f64 {
    let var = |a: &maic::data::AgdArm| {
        a.y_var
            .unwrap_or(a.y_mean * (1.0 - a.y_mean) * a.n as f64 / (a.n as f64 - 1.0))
    };
    let mut s =
        g_prime(est.scale, est.mu2).powi(2) * var(&agd.active_arm) / agd.active_arm.n as f64;
    if let Some((_, nu0)) = est.anchor_terms {
        let c = agd.comparator_arm.as_ref().unwrap();
        s += g_prime(est.scale, nu0).powi(2) * var(c) / c.n as f64;
    }
    s
}

fn sim_data(seed: u64, n: usize) -> TwoStudyData {
    let cfg = ScenarioConfig::new(4, n, Confounding::Moderate, Scale::Logit, 1, seed);
    draw_replicate(&cfg, 0).unwrap()
}

fn se2(pieces: &maic::variance::InfluencePieces, s: Strategy) -> f64 {
    sigma2(pieces, s).unwrap().se.powi(2)
}

#[test]
fn feasible_strategies_match_stacked_sandwich() {
    for seed in [1u64, 2, 3] {
        let data = sim_data(seed, 150);
        let agd = data.agd_summary().unwrap();
        let model = fitted(&data.ipd, &agd);
        let n_agd = agd.total_n();
        let nf = (data.ipd.len() + n_agd) as f64;
        for method in [Method::MaicNab, Method::MaicAcb] {
            for scale in [Scale::Identity, Scale::Logit] {
                let est = estimate(method, &data.ipd, &agd, Some(&model), scale).unwrap();
                let pieces = influence_components(&data.ipd, &agd, Some(&model), &est).unwrap();
                let agd_term = agd_outcome_term(&agd, &est);
                let pad = nf / (nf - 1.0);

                let fo = stacked_variance(&data.ipd, &[], n_agd, &model, &est, Stack::MeansOnly);
                let got = se2(&pieces, Strategy::Fo);
                assert!(
                    rel_err(got, pad * fo + agd_term) < 1e-6,
                    "fo {method} {scale:?}: {got}"
                );

                let got = se2(&pieces, Strategy::Sw);
                assert!(
                    rel_err(got, fo + agd_term) < 1e-6,
                    "sw {method} {scale:?}: {got}"
                );

                let po = stacked_variance(&data.ipd, &[], n_agd, &model, &est, Stack::WithAlpha);
                let got = se2(&pieces, Strategy::Po);
                assert!(
                    rel_err(got, pad * po + agd_term) < 1e-6,
                    "po {method} {scale:?}: {got}"
                );
            }
        }
    }
}

#[test]
fn full_influence_matches_stacked_sandwich_over_both_trials() {
    for seed in [4u64, 5] {
        let data = sim_data(seed, 150);
        let agd = data.agd_summary().unwrap();
        let model = fitted(&data.ipd, &agd);
        let n_agd = agd.total_n();
        let nf = (data.ipd.len() + n_agd) as f64;
        for method in [Method::MaicNab, Method::MaicAcb] {
            for scale in [Scale::Identity, Scale::Logit] {
                let est = estimate(method, &data.ipd, &agd, Some(&model), scale).unwrap();
                let oracle = stacked_variance(
                    &data.ipd,
                    &data.agd_records,
                    n_agd,
                    &model,
                    &est,
                    Stack::Everything,
                );
                let got = sigma2_full(&data, Some(&model), &est).unwrap().se.powi(2);
                assert!(
                    rel_err(got, oracle * nf / (nf - 1.0)) < 1e-6,
                    "{method} {scale:?}: {got} vs {oracle}"
                );
            }
        }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn conservative_strategy_dominates_po_on_random_instances() {
    let mut checked = 0;
    for seed in 0..1000u64 {
        let mut rng = rng(seed);
        let ipd = random_ipd(&mut rng, 30, 30, 2);
        let agd = shifted_agd(2, 0.15, 0.35, 0.45, 40);
        let Ok(target) = pooled_target_moments(&agd, MomentSpec::First) else {
            continue;
        };
        let Ok(model) = solve_weights(&ipd, &target, MomentSpec::First, &SolverConfig::default())
        else {
            continue;
        };
        for method in [Method::MaicNab, Method::MaicAcb] {
            let Ok(est) = estimate(method, &ipd, &agd, Some(&model), Scale::Identity) else {
                continue;
            };
            let pieces = influence_components(&ipd, &agd, Some(&model), &est).unwrap();
            let po = sigma2(&pieces, Strategy::Po).unwrap().sigma2;
            let cs = sigma2(&pieces, Strategy::Cs).unwrap().sigma2;
            assert!(cs >= po, "seed {seed}: cs {cs} < po {po}");
            for s in Strategy::FEASIBLE {
                assert!(sigma2(&pieces, s).unwrap().sigma2 >= 0.0);
            }
        }
        checked += 1;
    }
    assert_eq!(checked, 1000);
}

#[test]
fn cs_adds_the_covariate_mean_term_and_cross_bound() {
    let data = sim_data(8, 120);
    let agd = data.agd_summary().unwrap();
    let model = fitted(&data.ipd, &agd);
    let est = maic_nab(&data.ipd, &agd, &model, Scale::Identity).unwrap();
    let p = influence_components(&data.ipd, &agd, Some(&model), &est).unwrap();
    let po = sigma2(&p, Strategy::Po).unwrap().sigma2;
    let cs = sigma2(&p, Strategy::Cs).unwrap().sigma2;
    let expected = po + p.v_mu_x2 + 2.0 * (p.var_phi_mu2 * p.v_mu_x2).sqrt();
    assert!((cs - expected).abs() < 1e-12 * cs);
    assert!(p.v_mu_x2 > 0.0);
}

#[test]
fn logit_variances_scale_by_squared_derivative_in_the_symmetric_case() {
    let mut rng = rng(31);
    let ipd = random_ipd(&mut rng, 80, 80, 2);
    let base = shifted_agd(2, 0.1, 0.3, 0.4, 90);
    let model = fitted(&ipd, &base);
    let mu1 = weighted_arm_mean(&ipd, &model.weights, 1);
    let mu0 = weighted_arm_mean(&ipd, &model.weights, 0);
    let agd = AgdStudy::new(
        arm(90, mu1, Some(0.2), vec![0.1, 0.1]),
        Some(arm(90, mu0, Some(0.2), vec![0.1, 0.1])),
        names(2),
    )
    .unwrap();
    let gp = 1.0 / (mu1 * (1.0 - mu1));
    let est_id = maic_nab(&ipd, &agd, &model, Scale::Identity).unwrap();
    let est_lg = maic_nab(&ipd, &agd, &model, Scale::Logit).unwrap();
    let p_id = influence_components(&ipd, &agd, Some(&model), &est_id).unwrap();
    let p_lg = influence_components(&ipd, &agd, Some(&model), &est_lg).unwrap();
    for s in Strategy::FEASIBLE {
        let a = sigma2(&p_id, s).unwrap().sigma2 * gp * gp;
        let b = sigma2(&p_lg, s).unwrap().sigma2;
        assert!(rel_err(b, a) < 1e-10, "{s}: {b} vs {a}");
    }
    // The anchored contrast needs both arm derivatives; they differ here, so
    // only check it is finite.
    let acb = maic_acb(&ipd, &agd, &model, Scale::Logit).unwrap();
    let p = influence_components(&ipd, &agd, Some(&model), &acb).unwrap();
    assert!(sigma2(&p, Strategy::Fo).unwrap().sigma2.is_finite());
}

#[test]
fn unweighted_methods_have_no_alpha_strategies() {
    let mut rng = rng(32);
    let ipd = random_ipd(&mut rng, 40, 40, 1);
    let agd = shifted_agd(1, 0.0, 0.3, 0.4, 50);
    for method in [Method::Naive, Method::Bucher] {
        let est = estimate(method, &ipd, &agd, None, Scale::Identity).unwrap();
        let p = influence_components(&ipd, &agd, None, &est).unwrap();
        assert!(sigma2(&p, Strategy::Fo).is_ok());
        assert!(matches!(
            sigma2(&p, Strategy::Po),
            Err(MaicError::VarianceUnavailable { .. })
        ));
        assert!(matches!(
            sigma2(&p, Strategy::Cs),
            Err(MaicError::VarianceUnavailable { .. })
        ));
        let ones = vec![1.0; ipd.len()];
        let mut expected = hc0_weighted_mean_var(&ipd, &ones, 1) + agd_outcome_term(&agd, &est);
        if method == Method::Bucher {
            expected += hc0_weighted_mean_var(&ipd, &ones, 0);
        }
        assert!(rel_err(sigma2(&p, Strategy::Sw).unwrap().se.powi(2), expected) < 1e-12);
    }
    let stc = estimate(Method::Stc, &ipd, &agd, None, Scale::Identity).unwrap();
    assert!(matches!(
        influence_components(&ipd, &agd, None, &stc),
        Err(MaicError::VarianceUnavailable { .. })
    ));
}
