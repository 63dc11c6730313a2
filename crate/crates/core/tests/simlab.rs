use cfica::cgmm::MomentForm;
use cfica::estimator::EstimatorConfig;
use cfica::param::{theta_to_mixing, AngleVector};
use cfica::simlab::{
    generate_sources, parse_table_csv, run_mc, run_mc_with, summarize_entries, McOutcome, SourceDgp, SourceKind,
};
use proptest::prelude::*;
use std::f64::consts::PI;

fn moments(kind: SourceKind, t: usize) -> (f64, f64, f64) {
    let x = generate_sources(&SourceDgp::new(kind), 1, t, 99);
    let m = x.mean();
    let c = |k: i32| x.iter().map(|v| (v - m).powi(k)).sum::<f64>() / t as f64;
    (m, c(2), c(4) / c(2).powi(2))
}

#[test]
fn generators_have_stated_moments() {
    let t = 200_000;
    let (m, v, k) = moments(SourceKind::Binomial, t);
    assert!(m.abs() < 0.02 && (v - 4.2).abs() < 0.06, "binomial {m} {v}");
    // Binomial(20, 0.3) kurtosis 3 + (1 − 6pq)/(npq).
    assert!((k - (3.0 + (1.0 - 6.0 * 0.21) / 4.2)).abs() < 0.05);
    let (m, v, k) = moments(SourceKind::Uniform, t);
    assert!(m.abs() < 0.01 && (v - 1.0 / 3.0).abs() < 0.005 && (k - 1.8).abs() < 0.02);
    let (m, v, _) = moments(SourceKind::Gamma, t);
    assert!(m.abs() < 0.01 && (v - 5.0 / 49.0).abs() < 0.003);
    let (m, _, k) = moments(SourceKind::Gaussian, t);
    assert!(m.abs() < 0.01 && (k - 3.0).abs() < 0.05);
}

#[test]
fn student3_variance_and_heavy_tail() {
    // Variance 3 converges slowly because the fourth moment is infinite, so
    // the tolerance is loose; sample kurtosis keeps growing with T.
    let (m, v, k_small) = moments(SourceKind::Student3, 1_000_000);
    assert!(m.abs() < 0.02 && (v - 3.0).abs() < 0.5, "{v}");
    let (_, _, k_tiny) = moments(SourceKind::Student3, 1_000);
    assert!(k_small > 6.0 && k_small > k_tiny);
}

#[test]
fn mc_is_seed_deterministic() {
    let theta0 = AngleVector::n2(PI / 4.0, 2.0 * PI / 3.0).unwrap();
    let cfg = EstimatorConfig { form: MomentForm::Log, inference: false, seed: 11, ..Default::default() };
    let dgp = SourceDgp::new(SourceKind::Uniform);
    let a = run_mc(&dgp, &theta0, 120, 6, &cfg).unwrap();
    let b = run_mc(&dgp, &theta0, 120, 6, &cfg).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.table, b.table);
    let c = run_mc(&dgp, &theta0, 120, 6, &EstimatorConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a.records, c.records);
    assert_eq!(parse_table_csv(&a.to_csv()).unwrap(), a.table);
}

#[test]
fn oracle_estimator_has_zero_error() {
    let theta0 = AngleVector::n2(PI / 4.0, 2.0 * PI / 3.0).unwrap();
    let truth = theta_to_mixing(&theta0).unwrap().mixing;
    let report = run_mc_with(&SourceDgp::new(SourceKind::Gamma), &theta0, 50, 4, 1, serde_json::Value::Null, |_, _| {
        Ok(McOutcome { mixing: truth.clone(), objective: 0.0, p_value: Some(0.5), se_theta: None, flat: false })
    })
    .unwrap();
    assert!(report.rmse().iter().all(|&r| r == 0.0));
    assert_eq!(report.median_angular_error(), 0.0);
    assert_eq!(report.rejection_rate(0.05), Some(0.0));
}

#[test]
fn too_many_failures_abort() {
    let theta0 = AngleVector::n2(PI / 4.0, 2.0 * PI / 3.0).unwrap();
    let res = run_mc_with(&SourceDgp::new(SourceKind::Uniform), &theta0, 30, 10, 1, serde_json::Value::Null, |_, seed| {
        if seed % 2 == 0 {
            Err(cfica::error::Error::Config("boom".into()))
        } else {
            Ok(McOutcome {
                mixing: nalgebra::DMatrix::identity(2, 2),
                objective: 0.0,
                p_value: None,
                se_theta: None,
                flat: false,
            })
        }
    });
    assert!(res.is_err());
}

proptest! {
    #[test]
    fn rmse_decomposes(draws in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 4), 2..40), truth in proptest::collection::vec(-1.0f64..1.0, 4)) {
        for e in summarize_entries(&truth, &draws) {
            prop_assert!((e.rmse.powi(2) - (e.bias.powi(2) + e.sd.powi(2))).abs() < 1e-10);
        }
    }
}
