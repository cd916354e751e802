use conelab::cone::{eval_h, Nonlinearity};
use conelab::domain::{constants, laplace_beltrami, make_cap, ScalarField};
use conelab::expansion::fit_decay;
use conelab::linalg::Tridiagonal;
use conelab::report::format_float;
use conelab::spectral::{index_set, solve_fredholm, SingularOperator};
use proptest::prelude::*;
use std::f64::consts::PI;

fn rim_weight(theta0: f64, nodes: &[f64]) -> Vec<f64> {
    // positive, vanishing linearly at the rim
    nodes.iter().map(|t| (theta0 - t).sin().max(0.0) + 1e-3 * (theta0 - t)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn laplace_beltrami_is_self_adjoint(
        n in 3usize..7,
        frac in 0.1f64..0.9,
        ell in 0usize..4,
        seed in prop::collection::vec(-1.0f64..1.0, 64),
    ) {
        let d = make_cap(n, frac * PI, 40).unwrap();
        let lb = laplace_beltrami(&d, ell);
        let m = lb.unknowns();
        let x: Vec<f64> = (0..m).map(|i| seed[i % 64]).collect();
        let y: Vec<f64> = (0..m).map(|i| seed[(7 * i + 3) % 64]).collect();
        let (ax, ay) = (lb.matrix.apply(&x), lb.matrix.apply(&y));
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).zip(&lb.weights).map(|((p, q), w)| p * q * w).sum::<f64>();
        let scale = dot(&ax, &ax).sqrt() * dot(&y, &y).sqrt() + dot(&x, &x).sqrt() * dot(&ay, &ay).sqrt();
        prop_assert!((dot(&ax, &y) - dot(&x, &ay)).abs() <= 1e-12 * scale);
    }

    #[test]
    fn tridiagonal_solve_inverts_apply(
        diag in prop::collection::vec(4.0f64..8.0, 3..40),
        off in prop::collection::vec(-1.5f64..1.5, 80),
    ) {
        let m = diag.len();
        let t = Tridiagonal::new(off[..m - 1].to_vec(), diag.clone(), off[40..39 + m].to_vec());
        let x: Vec<f64> = (0..m).map(|i| (i as f64).sin()).collect();
        let back = t.solve_pivoted(&t.apply(&x));
        for (a, b) in back.iter().zip(&x) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn nonlinearity_branches_agree(n in 3usize..7, sigma in -0.5f64..2.0, tiny in -1e-4f64..1e-4, mid in 0.01f64..0.1) {
        let nl = Nonlinearity::new(n).unwrap();
        let k = constants(n).unwrap();
        let h = eval_h(sigma, n).unwrap();
        prop_assert_eq!(h, nl.h(sigma));
        let (series, direct) = (nl.h_series(tiny), nl.h_direct(tiny));
        prop_assert!((series - direct).abs() <= 1e-14 * direct.abs());
        let p = k.p();
        let c = (n * (n - 2)) as f64 / 4.0;
        for x in [mid, -mid] {
            let closed = c * ((p * x.ln_1p()).exp_m1() - p * x) / (x * x);
            prop_assert!((nl.h_direct(x) - closed).abs() <= 1e-11 * closed.abs());
        }
        // F(rho, v) = rho^{beta-2} v^2 h(rho^beta v)
        let rho: f64 = 0.5;
        let v = sigma / rho.powf(k.beta);
        let f = nl.f(rho, v).unwrap();
        let expect = rho.powf(k.beta - 2.0) * v * v * h;
        prop_assert!((f - expect).abs() <= 1e-12 * expect.abs().max(1e-300));
    }

    #[test]
    fn index_set_entries_are_sums_of_rates(
        g1 in 1.0f64..4.0,
        steps in prop::collection::vec(0.05f64..2.0, 1..4),
    ) {
        let mut gammas = vec![g1];
        for s in steps {
            let last = *gammas.last().unwrap();
            gammas.push(last + s);
        }
        let gmax = 3.2 * g1;
        let set = index_set(&gammas, gmax, 1e-9).unwrap();
        let rates = set.rates();
        prop_assert!(rates.windows(2).all(|w| w[1] > w[0]));
        prop_assert!((rates[0] - g1).abs() < 1e-15);
        for e in &set.entries {
            prop_assert!(e.rate <= gmax * (1.0 + 1e-12));
            for ms in &e.combinations {
                let total: u32 = ms.iter().map(|(_, c)| c).sum();
                prop_assert!(total >= 2);
                let sum: f64 = ms.iter().map(|(i, c)| *c as f64 * gammas[*i]).sum();
                prop_assert!((sum - e.rate).abs() <= 1e-9 * e.rate);
            }
            for &j in &e.pure {
                prop_assert!((gammas[j] - e.rate).abs() <= 1e-9 * e.rate);
            }
            prop_assert_eq!(e.resonant, e.is_pure() && e.is_combination());
        }
        // every pairwise sum below the cap appears
        for a in &gammas {
            for b in &gammas {
                if a + b <= gmax {
                    prop_assert!(rates.iter().any(|r| (r - (a + b)).abs() <= 1e-9 * r));
                }
            }
        }
    }

    #[test]
    fn fredholm_solution_satisfies_equation(
        n in 3usize..6,
        frac in 0.2f64..0.8,
        lambda in -5.0f64..5.0,
        a in 0.5f64..4.0,
    ) {
        let d = make_cap(n, frac * PI, 60).unwrap();
        let k = constants(n).unwrap();
        let rho = ScalarField::dirichlet_zero(rim_weight(frac * PI, &d.nodes));
        let f = ScalarField::dirichlet_zero(rho.values.iter().map(|r| r.powf(a - 2.0)).collect());
        let u = solve_fredholm(&d, &rho, &k, lambda, &f).unwrap();
        let op = SingularOperator::new(&d, &rho, &k, 0).unwrap();
        let lu = op.apply_l(&u.values);
        let scale = f.values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for ((l, u), f) in lu.iter().zip(&u.values).zip(&f.values) {
            prop_assert!((l + lambda * u - f).abs() <= 1e-8 * scale);
        }
    }

    #[test]
    fn decay_fit_recovers_rate(gamma in 0.5f64..6.0, amp in 0.1f64..10.0, m in 0usize..2) {
        let t: Vec<f64> = (0..200).map(|k| 1.0 + 0.05 * k as f64).collect();
        let y: Vec<f64> = t.iter().map(|t| amp * t.powi(m as i32) * (-gamma * t).exp()).collect();
        let fit = fit_decay(&t, &y, m, None).unwrap();
        prop_assert!((fit.gamma - gamma).abs() <= 1e-8 * gamma);
        prop_assert_eq!(fit.m, m);
    }

    #[test]
    fn csv_floats_round_trip(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
        prop_assert_eq!(format_float(x).parse::<f64>().unwrap(), x);
    }
}
