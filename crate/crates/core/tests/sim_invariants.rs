use diqc_core::sim::{disturbance_set, friction_variational, lti_loop, simulate_delay_cl, Multisine};
use diqc_core::lti::StateSpace;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn tone(a: f64, w: f64, ph: f64) -> Multisine {
    Multisine { amps: vec![a], freqs: vec![w], phases: vec![ph], scale: 1.0 }
}

fn energy(v: &[f64], h: f64) -> f64 {
    v.iter().map(|y| y * y).sum::<f64>() * h
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    // δy is the derivative of y along the input direction δv
    #[test]
    fn friction_variational_matches_finite_difference(w in 0.05f64..3.0, ph in 0.0f64..6.28, eps in 0.05f64..1.0, c in 0.0f64..1.5) {
        let v = tone(1.0, w, ph);
        let dv = tone(0.7, 1.3 * w, 0.4);
        let s = 1e-5;
        let (h, t_end) = (1e-2, 10.0);
        let (y0, dy) = friction_variational(1.0, 1.0, c, eps, &|t| v.eval(t), &|t| dv.eval(t), t_end, h).unwrap();
        let (y1, _) = friction_variational(1.0, 1.0, c, eps, &|t| v.eval(t) + s * dv.eval(t), &|_| 0.0, t_end, h).unwrap();
        let fd: Vec<f64> = y1.iter().zip(&y0).map(|(a, b)| (a - b) / s).collect();
        let err: Vec<f64> = fd.iter().zip(&dy).map(|(a, b)| a - b).collect();
        prop_assert!(energy(&err, h).sqrt() <= 1e-3 * energy(&dy, h).sqrt());
    }
}

#[test]
fn frictionless_low_frequency_gain_approaches_half() {
    let v = tone(1.0, 0.3, 0.0);
    let dv = tone(1.0, 0.01, std::f64::consts::FRAC_PI_2);
    let h = 1e-2;
    let (_, dy) = friction_variational(1.0, 1.0, 0.0, 1.0, &|t| v.eval(t), &|t| dv.eval(t), 300.0, h).unwrap();
    let inp: Vec<f64> = (0..dy.len()).map(|k| dv.eval(k as f64 * h)).collect();
    let g = (energy(&dy, h) / energy(&inp, h)).sqrt();
    assert!((g - 0.5).abs() < 5e-3, "gain {g}");
}

#[test]
fn lag_output_energy_is_bounded_by_unit_gain() {
    let g = StateSpace::new(DMatrix::from_element(1, 1, -1.0), DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0), DMatrix::zeros(1, 1)).unwrap();
    let cl = lti_loop(&g);
    let (t_end, h) = (40.0, 1e-2);
    for d in disturbance_set(5, 9, t_end, h) {
        let tr = simulate_delay_cl(&cl, 0.0, &|t| DVector::from_element(1, d.eval(t)), &DVector::zeros(1), t_end, h).unwrap();
        let e: Vec<f64> = tr.e.iter().map(|v| v[0]).collect();
        let ein = d.energy(t_end, h);
        assert!(energy(&e, h) <= ein * (1.0 + 1e-3), "{} > {}", energy(&e, h), ein);
    }
}
