//! Example battery across the core modules, one check per line.

use diqc_core::analysis::{factor_check, lti_diff_system, lti_var_names, min_gain, GainConfig, GainProblem};
use diqc_core::conic::{farkas_residual, kkt_residuals, SdpOptions, SdpProblem, SdpSolution, SdpStatus};
use diqc_core::iqc::{delay_multipliers, LAMBDA_MIN};
use diqc_core::linalg::hinf_norm;
use diqc_core::lti::StateSpace;
use diqc_core::poly::{jacobian, PolyMatrix, Polynomial, VarRegistry};
use diqc_core::sim::{friction_gain_experiment, lti_loop, simulate_delay_cl, Multisine};
use diqc_core::sosp::{add_pmi, monomial_basis, AffineMatrix, AffinePoly, PmiOptions, Region, SosProgram};
use nalgebra::{DMatrix, DVector};

use crate::commands::Check;

fn ss(a: &[f64], b: &[f64], c: &[f64], d: &[f64], n: usize, m: usize, p: usize) -> StateSpace {
    StateSpace::new(DMatrix::from_row_slice(n, n, a), DMatrix::from_row_slice(n, m, b), DMatrix::from_row_slice(p, n, c), DMatrix::from_row_slice(p, m, d)).expect("fixed example")
}

/// Fixed stable LTI examples used for the gain-equivalence checks.
pub fn lti_examples() -> Vec<(&'static str, StateSpace)> {
    vec![
        ("first order 1/(s+1)", ss(&[-1.0], &[1.0], &[1.0], &[0.0], 1, 1, 1)),
        ("resonant 1/(s^2+0.4s+1)", ss(&[0.0, 1.0, -1.0, -0.4], &[0.0, 1.0], &[1.0, 0.0], &[0.0], 2, 1, 1)),
        ("two channel with feedthrough", ss(&[-1.0, 0.5, 0.0, -2.0], &[1.0, 0.0, 0.3, 1.0], &[1.0, 1.0, 0.0, 1.0], &[0.1, 0.0, 0.0, 0.2], 2, 2, 2)),
    ]
}

/// Certified α against the H∞ norm, relative error.
pub fn lti_gain_error(g: &StateSpace, solver: &SdpOptions) -> Result<(f64, f64), String> {
    let ds = lti_diff_system(g);
    let names = lti_var_names(g);
    let region = Region::everywhere();
    let prob = GainProblem { ds: &ds, ms: None, region: &region, var_names: &names, multiplier_id: "none" };
    let cfg = GainConfig { solver: solver.clone(), ..GainConfig::default() };
    let cert = min_gain(&prob, &cfg).map_err(|e| e.to_string())?;
    let h = hinf_norm(g, 1e-10).map_err(|e| e.to_string())?;
    Ok((cert.alpha, h))
}

/// KKT residual of an optimal solution, Farkas residual of an infeasible one.
pub fn solution_residual(p: &SdpProblem, sol: &SdpSolution) -> f64 {
    match farkas_residual(p, sol) {
        Some(r) => r,
        None => {
            let (pf, df, comp) = kkt_residuals(p, sol);
            pf.max(df).max(comp)
        }
    }
}

/// Solves "p is SOS" over the monomials of degree ≤ `deg`.
pub fn sos_status(src: &str, names: &[&str], deg: u32, opts: &SdpOptions) -> Result<(SdpStatus, f64), String> {
    let reg = VarRegistry::new(names).map_err(|e| e.to_string())?;
    let p = Polynomial::parse(src, &reg).map_err(|e| e.to_string())?;
    let vars: Vec<usize> = (0..names.len()).collect();
    let mut prog = SosProgram::new();
    prog.add_sos(&AffinePoly::from_poly(&p), &monomial_basis(names.len(), &vars, deg)).map_err(|e| e.to_string())?;
    let sol = prog.solve(opts).map_err(|e| e.to_string())?;
    Ok((sol.status, solution_residual(&prog.to_sdp(), &sol)))
}

/// Solves shift − x ≻ 0 on |x| ≤ 1.
pub fn interval_status(shift: f64, opts: &SdpOptions) -> Result<(SdpStatus, f64), String> {
    let reg = VarRegistry::new(&["x"]).map_err(|e| e.to_string())?;
    let p = Polynomial::parse(&format!("{shift} - x"), &reg).map_err(|e| e.to_string())?;
    let m = AffineMatrix::from_polymatrix(&PolyMatrix::new(1, 1, vec![p]).map_err(|e| e.to_string())?);
    let region = Region::everywhere().with_interval(1, 0, -1.0, 1.0);
    let mut prog = SosProgram::new();
    add_pmi(&mut prog, &m, &region, &PmiOptions { mult_degree: 0, eps: 1e-6 }).map_err(|e| e.to_string())?;
    let sol = prog.solve(opts).map_err(|e| e.to_string())?;
    Ok((sol.status, solution_residual(&prog.to_sdp(), &sol)))
}

fn check_result<T>(name: &str, r: Result<T, String>, f: impl FnOnce(T) -> (bool, String)) -> Check {
    match r {
        Ok(v) => {
            let (pass, detail) = f(v);
            Check::new(name, pass, detail)
        }
        Err(e) => Check::new(name, false, format!("error: {e}")),
    }
}

/// Runs the battery with the given conic solver options.
pub fn run(solver: &SdpOptions) -> Vec<Check> {
    let mut out = Vec::new();
    for (name, g) in lti_examples() {
        out.push(check_result(&format!("lti gain equivalence, {name}"), lti_gain_error(&g, solver), |(a, h)| {
            let rel = (a - h).abs() / h;
            (rel <= 1e-3, format!("alpha {a:.6}, hinf {h:.6}, rel {rel:.2e}"))
        }));
    }
    let kkt_ok = |st: SdpStatus, want: SdpStatus, res: f64| (st == want && res <= 1e-7, format!("status {st}, residual {res:.2e}"));
    out.push(check_result("sos (x^2+1)^2", sos_status("(x^2 + 1)^2", &["x"], 2, solver), |(s, k)| kkt_ok(s, SdpStatus::Optimal, k)));
    out.push(check_result("sos motzkin rejected", sos_status("x^4*y^2 + x^2*y^4 - 3*x^2*y^2 + 1", &["x", "y"], 3, solver), |(s, k)| kkt_ok(s, SdpStatus::PrimalInfeasible, k)));
    out.push(check_result("region x - 2 < 0 on |x| <= 1", interval_status(2.0, solver), |(s, k)| kkt_ok(s, SdpStatus::Optimal, k)));
    out.push(check_result("region x - 0.5 < 0 on |x| <= 1 rejected", interval_status(0.5, solver), |(s, k)| kkt_ok(s, SdpStatus::PrimalInfeasible, k)));
    for theta in [0.04, 0.08] {
        let r = delay_multipliers(theta).map_err(|e| e.to_string()).and_then(|ms| factor_check(Some(&ms), &[1.0, 1.0], LAMBDA_MIN).map_err(|e| e.to_string()));
        out.push(check_result(&format!("delay j-factorization, theta {theta}"), r, |f| {
            (
                f.jfactor_residual <= 1e-6 && f.are_residual <= 1e-8 && f.closed_loop_abscissa < 0.0,
                format!("grid {:.2e}, riccati {:.2e}, abscissa {:.3}", f.jfactor_residual, f.are_residual, f.closed_loop_abscissa),
            )
        }));
    }
    let lag = &lti_examples()[0].1;
    let cl = lti_loop(lag);
    let step = simulate_delay_cl(&cl, 0.0, &|_| DVector::from_element(1, 1.0), &DVector::zeros(1), 1.0, 1e-3).map_err(|e| e.to_string());
    out.push(check_result("rk4 step response", step, |tr| {
        let err = (tr.x.last().expect("nonempty")[0] - (1.0 - (-1.0f64).exp())).abs();
        (err <= 1e-6, format!("error {err:.2e}"))
    }));
    let inputs = vec![(
        Multisine { amps: vec![1.0], freqs: vec![0.5], phases: vec![0.0], scale: 1.0 },
        Multisine { amps: vec![1.0, 0.5], freqs: vec![0.05, 2.0], phases: vec![0.3, 1.0], scale: 1.0 },
    )];
    let fr = friction_gain_experiment(1.0, 1.0, 1.0, &[1e-1, 1e-2, 1e-3], &inputs, 20.0, 1e-3).map_err(|e| e.to_string());
    out.push(check_result("friction differential gain <= 0.5", fr, |rows| {
        let worst = rows.iter().map(|r| r.gain).fold(0.0, f64::max);
        (worst <= 0.5 + 1e-3, format!("max {worst:.4}"))
    }));
    out.push(check_result("jet jacobian vs finite differences", jet_jacobian_error(), |e| (e <= 1e-5, format!("rel {e:.2e}"))));
    out
}

fn jet_jacobian_error() -> Result<f64, String> {
    let reg = VarRegistry::new(&["psi", "phi"]).map_err(|e| e.to_string())?;
    let f: Vec<Polynomial> = ["phi", "-psi - 1.5*phi^2 - 0.5*phi^3"].iter().map(|s| Polynomial::parse(s, &reg)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let j = jacobian(&f, &[0, 1]).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for k in 0..10 {
        let pt = [0.37 * k as f64 - 1.5, 0.21 * k as f64 - 0.9];
        let jv = j.eval(&pt).map_err(|e| e.to_string())?;
        for c in 0..2 {
            let h = 1e-6;
            let mut pp = pt;
            let mut pm = pt;
            pp[c] += h;
            pm[c] -= h;
            for r in 0..2 {
                let fd = (f[r].eval(&pp).map_err(|e| e.to_string())? - f[r].eval(&pm).map_err(|e| e.to_string())?) / (2.0 * h);
                worst = worst.max((fd - jv[(r, c)]).abs() / jv[(r, c)].abs().max(1.0));
            }
        }
    }
    Ok(worst)
}
