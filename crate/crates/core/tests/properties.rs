use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use spinglass::conditioning::{
    band_kernel, cp_constraints, derivative_covariances, fp_conditioning, reduce_to_sphere, schur_condition, BandGeometry, ConditioningEvent, FpTargets,
    Functional,
};
use spinglass::franz_parisi::{fp_high, j_interval, tau};
use spinglass::landscape::{ground_state_point, omega, theta};
use spinglass::mc::sample_field;
use spinglass::rsb::{cs_minimize, cs_value, cs_value_grad, OrderParameter, SolverConfig};
use spinglass::Mixture;

/// Mixtures with degrees 2..=6 and at least two nonzero coefficients.
fn mixed() -> impl Strategy<Value = Mixture> {
    prop::collection::vec(0.0f64..1.0, 5).prop_filter_map("need two degrees", |c| {
        let pairs: Vec<(usize, f64)> = c.iter().enumerate().filter(|(_, &v)| v > 0.05).map(|(i, &v)| (i + 2, v)).collect();
        (pairs.len() >= 2).then(|| Mixture::new(&pairs).unwrap())
    })
}

fn ladder(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..0.95, k).prop_filter_map("distinct", |mut v| {
        v.sort_by(|a, b| a.total_cmp(b));
        v.windows(2).all(|w| w[1] - w[0] > 0.03).then_some(v)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn restriction_matches_direct_formula(m in mixed(), q in 0.0f64..1.0, t in 0.0f64..1.0) {
        let r = m.shift_restrict(q).unwrap();
        let direct = m.value(t + q) - m.value(q) - m.d1(q) * t;
        prop_assert!((r.xi_q.value(t) - direct).abs() < 1e-12 * direct.abs().max(1.0));
        let hat = m.value(q * t);
        prop_assert!((r.xi_hat.value(t) - hat).abs() < 1e-12);
    }

    #[test]
    fn level_mixture_is_two_restrictions(m in mixed(), lad in ladder(3)) {
        let lv = m.level_mixtures(&lad).unwrap();
        let mut qs = vec![0.0];
        qs.extend_from_slice(&lad);
        qs.push(1.0);
        for i in 0..lv.levels.len() {
            let twice = m.shift_restrict(qs[i]).unwrap().xi_q.shift_restrict(0.0).unwrap().xi_q.scale_arg(qs[i + 1] - qs[i]);
            let (a, b) = (lv.levels[i].coeffs(), twice.coeffs());
            for p in 0..a.len().max(b.len()) {
                let (x, y) = (a.get(p).copied().unwrap_or(0.0), b.get(p).copied().unwrap_or(0.0));
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigma_is_singular_only_for_pure(m in mixed(), p in 2usize..8) {
        let det = |s: [[f64; 2]; 2]| s[0][0] * s[1][1] - s[0][1] * s[1][0];
        prop_assert!(det(Mixture::pure(p).sigma_xi()).abs() < 1e-10);
        prop_assert!(det(m.sigma_xi()) > 1e-10);
    }

    #[test]
    fn two_replica_mixture_at_zero_overlap(m in mixed(), q1 in 0.05f64..0.95) {
        let fp = m.fp_mixtures(0.0, Some((q1, 0.0))).unwrap();
        prop_assert_eq!(fp.tau, Some(0.0));
        let f = fp.fp.unwrap();
        for t in [0.1, 0.5, 0.9] {
            prop_assert!((f.value(t) - m.value(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn crisanti_sommers_gradient(m in mixed(), beta in 0.5f64..3.0, lad in ladder(2), xs in ladder(2)) {
        let op = OrderParameter::new(lad.iter().map(|q| q * 0.9).collect(), xs).unwrap();
        let (_, g) = cs_value_grad(&m, beta, &op);
        let h = 1e-5;
        let mut params: Vec<f64> = op.q.iter().chain(&op.x).copied().collect();
        for i in 0..params.len() {
            let base = params[i];
            params[i] = base + h;
            let up = cs_value(&m, beta, &OrderParameter { q: params[..2].to_vec(), x: params[2..].to_vec() });
            params[i] = base - h;
            let dn = cs_value(&m, beta, &OrderParameter { q: params[..2].to_vec(), x: params[2..].to_vec() });
            params[i] = base;
            let fd = (up - dn) / (2.0 * h);
            prop_assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1e-2), "{} {} {}", i, fd, g[i]);
        }
    }

    #[test]
    fn omega_even_and_continuous(t in -6.0f64..6.0) {
        prop_assert!((omega(t) - omega(-t)).abs() < 1e-14);
        let h = 1e-9;
        prop_assert!((omega(t + h) - omega(t)).abs() < 1e-7);
    }

    #[test]
    fn theta_symmetric(m in mixed(), e in -2.0f64..2.0, r in -6.0f64..6.0) {
        let a = theta(&m, e, r).unwrap().theta;
        let b = theta(&m, -e, -r).unwrap().theta;
        prop_assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn tau_second_form(q1 in 0.05f64..0.95, r in -0.99f64..0.99, u in 0.0f64..1.0) {
        let (lo, hi) = j_interval(q1, r).unwrap();
        let rho = lo + u * (hi - lo);
        let second = r * r + (rho - r * q1).powi(2) / (q1 - q1 * q1);
        prop_assert!((tau(q1, r, rho).unwrap() - second).abs() < 1e-14);
        prop_assert!(tau(q1, r, rho).unwrap() <= 1.0 + 1e-14);
    }

    #[test]
    fn fp_conditional_kernel_is_psd(m in mixed(), q1 in 0.2f64..0.8, r in -0.8f64..0.8, u in 0.05f64..0.95, seed in 0u64..1000) {
        let (lo, hi) = j_interval(q1, r).unwrap();
        let rho = lo + u * (hi - lo);
        let fc = fp_conditioning(&m, q1, r, rho, &FpTargets { e: 1.0, e1: 0.8, r1: 2.0 }).unwrap();
        let fp = m.fp_mixtures(r, Some((q1, rho))).unwrap().fp.unwrap();
        // Kernel on 6 random directions of the (N-2)-sphere.
        let dirs: Vec<DVector<f64>> = (0..6).map(|i| DVector::from_fn(8, |j, _| ((seed as f64 + 1.0) * (i * 8 + j + 1) as f64).sin())).collect();
        let k = DMatrix::from_fn(6, 6, |a, b| {
            let c = dirs[a].dot(&dirs[b]) / (dirs[a].norm() * dirs[b].norm());
            fp.value(c) + fc.xi_tau - fc.v_cinv_v
        });
        let min = k.symmetric_eigen().eigenvalues.min();
        prop_assert!(min >= -1e-9, "{}", min);
    }

    #[test]
    fn euler_identity(seed in 0u64..500) {
        let m = Mixture::new(&[(1, 0.2), (2, 0.3), (3, 0.4), (4, 0.1)]).unwrap();
        let f = sample_field(&m, 6, seed, 0).unwrap();
        let s: Vec<f64> = (0..6).map(|i| ((seed + i) as f64).cos()).collect();
        let g = f.grad(&s);
        let lhs: f64 = g.iter().zip(&s).map(|(a, b)| a * b).sum();
        let rhs: f64 = f.components(&s).iter().map(|(p, c)| *p as f64 * c).sum();
        prop_assert!((lhs - rhs).abs() < 1e-9 * rhs.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn schur_iterated_equals_block(seed in 0u64..10_000) {
        let n = 7;
        let a = DMatrix::from_fn(n, n, |i, j| ((seed as f64 + 1.0) * (1 + i * n + j) as f64).sin());
        let c = &a * a.transpose() + DMatrix::identity(n, n) * 0.1;
        let vals = [0.3, -0.7, 1.1];
        let all = schur_condition(&c, &[0, 1, 2], &vals, false).unwrap();
        let first = schur_condition(&c, &[0], &vals[..1], false).unwrap();
        // Free indices of the first step are 1..n, so 1 and 2 become 0 and 1.
        let second = schur_condition(&first.cov, &[0, 1], &[vals[1] - first.mean[0], vals[2] - first.mean[1]], false).unwrap();
        for i in 0..n - 3 {
            prop_assert!((all.mean[i] - (first.mean[i + 2] + second.mean[i])).abs() < 1e-9);
            for j in 0..n - 3 {
                prop_assert!((all.cov[(i, j)] - second.cov[(i, j)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn band_kernel_through_the_embedding(m in mixed(), lad in ladder(2), depth in 1usize..3, seed in 0u64..1000) {
        let n = 16;
        let g = BandGeometry::new(n, lad.clone(), depth, 0.0).unwrap();
        let ev = ConditioningEvent::new(None, vec![0.4; depth], vec![1.0; depth], g.clone()).unwrap();
        let red = reduce_to_sphere(&m, &ev).unwrap();
        let d = n - depth;
        let z = |k: u64| {
            let v = DVector::from_fn(d, |i, _| ((seed + k) as f64 * 1.3 + i as f64).sin());
            &v * ((d as f64).sqrt() / v.norm())
        };
        let (z1, z2) = (z(1), z(2));
        let (y1, y2) = (g.embed(&z1).unwrap(), g.embed(&z2).unwrap());
        let kern = band_kernel(&m, &ev, y1.dot(&y2) / n as f64).unwrap().cov * n as f64;
        // The reduced model keeps the normalisation N, not N - m.
        let want = n as f64 * red.reduced.value(z1.dot(&z2) / d as f64);
        prop_assert!((kern - want).abs() < 1e-10 * want.abs().max(1.0), "{} {}", kern, want);
    }

    #[test]
    fn band_conditioning_mean_is_level_energy(m in mixed(), lad in ladder(3), seed in 0u64..1000) {
        let n = 12;
        let g = BandGeometry::new(n, lad, 2, 0.0).unwrap();
        let ev = ConditioningEvent::new(None, vec![0.5, 0.9], vec![1.2, 2.0], g.clone()).unwrap();
        let (mut fs, vals) = cp_constraints(&m, &ev);
        let k = fs.len();
        let zz = DVector::from_fn(n - 2, |i, _| ((seed as f64) + 0.7 * i as f64).cos());
        let y = g.embed(&(&zz * ((n as f64 - 2.0).sqrt() * 0.8 / zz.norm()))).unwrap();
        fs.push(Functional::value("H@y", y, 1.0 / n as f64));
        let c = derivative_covariances(&m, &fs).unwrap();
        let cond = schur_condition(&c, &(0..k).collect::<Vec<_>>(), &vals, false).unwrap();
        prop_assert!((cond.mean[0] - 0.9).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn parisi_minimum_depends_on_beta_times_scale(m in mixed(), beta in 0.4f64..2.5, s in 0.6f64..1.6) {
        let cfg = SolverConfig::default();
        let a = cs_minimize(&m.scaled(s * s), beta, &cfg).unwrap().value;
        let b = cs_minimize(&m, s * beta, &cfg).unwrap().value;
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0), "{} {}", a, b);
    }

    #[test]
    fn ground_state_energy_increases_with_radius(m in mixed(), q in 0.2f64..0.9) {
        let cfg = SolverConfig::default();
        // Uncertified points say nothing about the curve; skip them.
        let (lo, hi) = match (ground_state_point(&m, q, &cfg), ground_state_point(&m, (q + 0.1).min(1.0), &cfg)) {
            (Ok(a), Ok(b)) => (a.e_star, b.e_star),
            _ => return Err(TestCaseError::reject("solver did not certify")),
        };
        prop_assert!(hi >= lo - 1e-6);
    }

    #[test]
    fn high_temperature_potential_is_even(a in 0.1f64..1.0, b in 0.1f64..1.0, r in 0.05f64..0.95) {
        let m = Mixture::new(&[(2, a), (4, b)]).unwrap();
        let beta = 0.5 * spinglass::rsb::beta_c(&m).unwrap();
        let cfg = SolverConfig::default();
        let x = fp_high(&m, beta, 0.8, r, &cfg).unwrap().value;
        let y = fp_high(&m, beta, 0.8, -r, &cfg).unwrap().value;
        prop_assert!((x - y).abs() < 1e-10);
    }
}
