use cfica::ecf::{
    blocks_from_complex, complex_from_block, cov_kernel_level, cov_kernel_level_block, ecf, q_level, PanelSource,
    SensorPanel,
};
use cfica::param::{theta_to_mixing, AngleVector};
use cfica::simlab::{generate_panel, SourceDgp, SourceKind};
use nalgebra::DMatrix;
use proptest::prelude::*;
use std::f64::consts::PI;

fn truth() -> cfica::param::MixingSpec {
    theta_to_mixing(&AngleVector::n2(PI / 4.0, 2.0 * PI / 3.0).unwrap()).unwrap()
}

proptest! {
    #[test]
    fn ecf_modulus_bounded(data in proptest::collection::vec(-50.0f64..50.0, 20), s in proptest::collection::vec(-5.0f64..5.0, 2)) {
        let p = SensorPanel::new(DMatrix::from_column_slice(10, 2, &data), PanelSource::Observed).unwrap();
        prop_assert!(ecf(&p, &s).norm() <= 1.0 + 1e-15);
    }

    #[test]
    fn block_form_matches_complex(seed in 0u64..1000, r in proptest::collection::vec(-1.5f64..1.5, 2), s in proptest::collection::vec(-1.5f64..1.5, 2)) {
        let spec = truth();
        let p = generate_panel(&SourceDgp::new(SourceKind::Uniform), &spec, 60, seed);
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let pos = cov_kernel_level(&p, &spec, &r, &s);
        let negk = cov_kernel_level(&p, &spec, &r, &neg);
        let block = cov_kernel_level_block(&p, &spec, &r, &s, 0.0).unwrap();
        prop_assert!((block - blocks_from_complex(pos, negk)).amax() < 1e-10);
        prop_assert!((complex_from_block(&blocks_from_complex(pos, negk)) - pos).norm() < 1e-10);
    }
}

#[test]
fn level_moment_decays_at_root_t() {
    let spec = truth();
    let s = [0.8, -0.4];
    let sizes = [250usize, 1000, 4000];
    let reps = 200;
    let rms: Vec<f64> = sizes
        .iter()
        .map(|&t| {
            let ms: f64 = (0..reps)
                .map(|r| q_level(&generate_panel(&SourceDgp::new(SourceKind::Uniform), &spec, t, r as u64), &spec, &s).norm_sqr())
                .sum::<f64>()
                / reps as f64;
            ms.sqrt()
        })
        .collect();
    // Least-squares slope of log rms on log T.
    let x: Vec<f64> = sizes.iter().map(|&t| (t as f64).ln()).collect();
    let y: Vec<f64> = rms.iter().map(|v| v.ln()).collect();
    let mx = x.iter().sum::<f64>() / 3.0;
    let my = y.iter().sum::<f64>() / 3.0;
    let slope = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / x.iter().map(|a| (a - mx).powi(2)).sum::<f64>();
    assert!((-0.6..=-0.4).contains(&slope), "slope {slope}, rms {rms:?}");
}

#[test]
fn moment_small_at_truth_for_large_t() {
    let spec = truth();
    let p = generate_panel(&SourceDgp::new(SourceKind::Student3), &spec, 10_000, 3);
    for s in [[0.5, 0.5], [-1.0, 1.2], [1.4, 0.0], [0.3, -1.9]] {
        assert!(q_level(&p, &spec, &s).norm() < 0.05);
    }
}

#[test]
fn correlated_sensors_keep_moment_away_from_zero() {
    // With η₁ = η₂ the data lie on the line (1, 1). At θ₁ = π/4 that line is
    // a mixing column, the implied sources are (cx, 0) and q vanishes
    // identically, so the check is made at θ₁ = π/6.
    let at = theta_to_mixing(&AngleVector::n2(PI / 6.0, 2.0 * PI / 3.0).unwrap()).unwrap();
    let s = [1.5, -0.5];
    for t in [500usize, 5000, 50_000] {
        let p = generate_panel(&SourceDgp::new(SourceKind::Uniform), &truth(), t, 8);
        let col = p.data().column(0).into_owned();
        let dup = SensorPanel::new(DMatrix::from_columns(&[col.clone(), col]), PanelSource::Observed).unwrap();
        assert!(q_level(&dup, &at, &s).norm() > 0.1, "T = {t}");
        assert!(q_level(&dup, &truth(), &s).norm() < 1e-12);
    }
}

#[test]
fn kernel_diagonal_nonnegative() {
    let spec = truth();
    let p = generate_panel(&SourceDgp::new(SourceKind::Student3), &spec, 300, 1);
    for s in [[0.2, 0.1], [1.0, -1.0], [2.0, 0.5], [-0.7, 1.7]] {
        let k = cov_kernel_level(&p, &spec, &s, &s);
        assert!(k.re >= -1e-14 && k.im.abs() < 1e-12);
    }
}
