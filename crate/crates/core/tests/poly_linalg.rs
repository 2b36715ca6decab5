use diqc_core::linalg::{hinf_norm, max_sym_eigenvalue, solve_lyapunov, spectral_abscissa};
use diqc_core::lti::StateSpace;
use diqc_core::poly::{jacobian, Monomial, Polynomial, VarRegistry};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn poly3() -> impl Strategy<Value = Polynomial> {
    prop::collection::vec(((0u32..3, 0u32..3, 0u32..3), -3.0f64..3.0), 0..6)
        .prop_map(|terms| Polynomial::from_terms(3, terms.into_iter().map(|((a, b, c), v)| (Monomial::from_exponents(vec![a, b, c]), v))))
}

fn point3() -> impl Strategy<Value = [f64; 3]> {
    [-1.5f64..1.5, -1.5f64..1.5, -1.5f64..1.5]
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #[test]
    fn ring_laws_hold_pointwise(p in poly3(), q in poly3(), r in poly3(), x in point3()) {
        let ev = |s: &Polynomial| s.eval(&x).unwrap();
        prop_assert!(close(ev(&(&p + &q)), ev(&(&q + &p))));
        prop_assert!(close(ev(&(&p * &q)), ev(&(&q * &p))));
        prop_assert!(close(ev(&(&(&p * &q) * &r)), ev(&(&p * &(&q * &r)))));
        prop_assert!(close(ev(&(&p * &(&q + &r))), ev(&(&(&p * &q) + &(&p * &r)))));
        prop_assert!((&p - &p).is_zero());
        prop_assert!(close(ev(&p.pow(2)), ev(&p) * ev(&p)));
    }

    #[test]
    fn product_rule_and_printed_form(p in poly3(), q in poly3(), v in 0usize..3) {
        let lhs = (&p * &q).diff(v).unwrap();
        let rhs = &(&p.diff(v).unwrap() * &q) + &(&p * &q.diff(v).unwrap());
        prop_assert!((&lhs - &rhs).prune(1e-9).is_zero());
        let reg = VarRegistry::new(&["x", "y", "z"]).unwrap();
        let back = Polynomial::parse(&p.display(&reg).to_string(), &reg).unwrap();
        prop_assert!((&back - &p).prune(1e-12).is_zero());
    }

    #[test]
    fn jacobian_matches_central_differences(p in poly3(), q in poly3(), x in point3()) {
        let f = vec![p, q];
        let j = jacobian(&f, &[0, 1, 2]).unwrap().eval(&x).unwrap();
        for c in 0..3 {
            let h = 1e-6;
            let (mut xp, mut xm) = (x, x);
            xp[c] += h;
            xm[c] -= h;
            for r in 0..2 {
                let fd = (f[r].eval(&xp).unwrap() - f[r].eval(&xm).unwrap()) / (2.0 * h);
                prop_assert!((fd - j[(r, c)]).abs() <= 1e-5 * (1.0 + j[(r, c)].abs()));
            }
        }
    }
}

fn stable(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| {
        let m = DMatrix::from_row_slice(n, n, &v);
        let shift = spectral_abscissa(&m).unwrap() + 0.5;
        m - DMatrix::identity(n, n) * shift.max(0.0)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn lyapunov_solution_is_positive_for_stable_a(a in stable(3)) {
        let c = DMatrix::identity(3, 3);
        let x = solve_lyapunov(&a, &c).unwrap();
        let res = a.transpose() * &x + &x * &a + &c;
        prop_assert!(res.amax() <= 1e-9 * (1.0 + x.amax()));
        prop_assert!(-max_sym_eigenvalue(&(-&x)) > 0.0);
    }

    #[test]
    fn hinf_bounds_sampled_response(a in stable(3), b in prop::collection::vec(-1.0f64..1.0, 3), c in prop::collection::vec(-1.0f64..1.0, 3)) {
        let g = StateSpace::new(a, DMatrix::from_column_slice(3, 1, &b), DMatrix::from_row_slice(1, 3, &c), DMatrix::zeros(1, 1)).unwrap();
        let h = hinf_norm(&g, 1e-10).unwrap();
        for k in 0..40 {
            let w = 10f64.powf(-3.0 + 6.0 * k as f64 / 39.0);
            let gw = g.freq_response(w).unwrap()[(0, 0)].norm();
            prop_assert!(gw <= h * (1.0 + 1e-6) + 1e-12, "|G({w})| = {gw} > {h}");
        }
    }
}
