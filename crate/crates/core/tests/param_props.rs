use cfica::param::{
    align_matrix, mixing_to_theta, projector_jacobian, theta_to_mixing, AngleVector, JacobianMode, MixingSpec,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use std::f64::consts::PI;

fn interior() -> impl Strategy<Value = (f64, f64)> {
    (0.02..PI - 0.2, 0.1..PI - 0.1).prop_filter_map("ordered and separated", |(a, gap)| {
        let b = a + gap;
        (b < PI - 0.02).then_some((a, b))
    })
}

proptest! {
    #[test]
    fn angle_round_trip((a, b) in interior()) {
        let th = AngleVector::n2(a, b).unwrap();
        let spec = theta_to_mixing(&th).unwrap();
        let back = mixing_to_theta(&spec.mixing).unwrap();
        prop_assert!((back.angles()[0] - a).abs() < 1e-10);
        prop_assert!((back.angles()[1] - b).abs() < 1e-10);
    }

    #[test]
    fn projector_algebra((a, b) in interior()) {
        let spec = theta_to_mixing(&AngleVector::n2(a, b).unwrap()).unwrap();
        let id = DMatrix::<f64>::identity(2, 2);
        let mut sum = DMatrix::zeros(2, 2);
        for (j, p) in spec.projectors.iter().enumerate() {
            prop_assert!((p * p - p).amax() < 1e-10);
            for (k, q) in spec.projectors.iter().enumerate() {
                if j != k {
                    prop_assert!((p * q).amax() < 1e-10);
                }
            }
            sum += p;
        }
        prop_assert!((sum - id).amax() < 1e-10);
    }

    #[test]
    fn inverse_is_closed_form((a, b) in interior()) {
        let spec = theta_to_mixing(&AngleVector::n2(a, b).unwrap()).unwrap();
        // Θ⁻¹ = [[sin θ₂, −cos θ₂], [−sin θ₁, cos θ₁]] / sin(θ₂ − θ₁).
        let d = (b - a).sin();
        let expect = DMatrix::from_row_slice(2, 2, &[b.sin(), -b.cos(), -a.sin(), a.cos()]) / d;
        prop_assert!((&spec.inverse - expect).amax() < 1e-12);
    }

    #[test]
    fn alignment_never_worse(v in proptest::collection::vec(-2.0f64..2.0, 8)) {
        let est = DMatrix::from_column_slice(2, 2, &v[..4]);
        let reference = DMatrix::from_column_slice(2, 2, &v[4..]);
        let al = align_matrix(&est, &reference);
        // Brute force over both permutations and four sign patterns.
        let mut best = f64::INFINITY;
        for perm in [[0usize, 1], [1, 0]] {
            for signs in [[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]] {
                let mut m = DMatrix::zeros(2, 2);
                for c in 0..2 {
                    m.set_column(c, &(est.column(perm[c]) * signs[c]));
                }
                best = best.min((m - &reference).norm());
            }
        }
        prop_assert!((al.aligned - &reference).norm() <= (&est - &reference).norm() + 1e-12);
        prop_assert!((al.distance - best).abs() < 1e-9);
    }
}

#[test]
fn projector_jacobian_on_grid() {
    // 20 points spread over the ordered region.
    let mut checked = 0;
    for i in 0..5 {
        for k in 0..4 {
            let a = 0.15 + i as f64 * 0.55;
            let b = a + 0.35 + k as f64 * 0.3;
            if b >= PI - 0.05 {
                continue;
            }
            let spec = theta_to_mixing(&AngleVector::n2(a, b).unwrap()).unwrap();
            let an = projector_jacobian(&spec, JacobianMode::Analytic).unwrap();
            // Independent central differences of P₁ = Θ e₁ e₁' Θ⁻¹.
            let h = 1e-6;
            for j in 0..2 {
                for d in 0..2 {
                    let mut up = [a, b];
                    let mut dn = [a, b];
                    up[d] += h;
                    dn[d] -= h;
                    let pu = &MixingSpec::from_raw(&up, 2).unwrap().projectors[j];
                    let pd = &MixingSpec::from_raw(&dn, 2).unwrap().projectors[j];
                    let fd = (pu - pd) / (2.0 * h);
                    for e in 0..4 {
                        let x = an.d_vec_p[j][(e, d)];
                        let y = fd[(e % 2, e / 2)];
                        assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "θ = ({a}, {b}), j {j}, entry {e}: {x} vs {y}");
                    }
                }
            }
            checked += 1;
        }
    }
    assert!(checked >= 16);
}

#[test]
fn first_projector_at_table_angles() {
    let spec = theta_to_mixing(&AngleVector::n2(PI / 4.0, 2.0 * PI / 3.0).unwrap()).unwrap();
    let p = &spec.projectors[0];
    assert!((p.trace() - 1.0).abs() < 1e-12);
    let expect = [0.634, 0.366, 0.634, 0.366];
    for (k, v) in expect.iter().enumerate() {
        assert!((p[(k / 2, k % 2)] - v).abs() < 5e-4);
    }
}
