//! certify, sweep and validate, independent of argument parsing.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use diqc_core::analysis::{min_gain, path_energy, segment, verify_certificate, AnalysisError, Certificate, GainConfig, GainProblem};
use diqc_core::poly::{jacobian, PolyMatrix, Polynomial};
use diqc_core::sim::{disturbance_set, empirical_inc_gain, geodesic_controller, poly_gain, simulate_delay_cl, ClosedLoop, SimError, Trajectory};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::model::{delay_from_multiplier_id, Model, ModelError, Prepared, SystemSpec, UncertaintySpec};

pub const TOL_ENV: &str = "DIQC_SOLVER_TOL";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Core(#[from] diqc_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("certificate was issued for a different model (hash {cert}, model {model})")]
    HashMismatch { cert: String, model: String },
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        CliError::Core(e.into())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Core(e.into())
    }
}

/// Command-line overrides of the model's analysis settings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub theta: Option<f64>,
    pub p_degree: Option<u32>,
    pub mult_degree: Option<u32>,
    pub seed: Option<u64>,
    pub tol: Option<f64>,
}

/// Model settings with overrides applied; the solver tolerance falls back
/// to `DIQC_SOLVER_TOL` when no flag is given.
pub fn effective_config(model: &Model, ov: &Overrides) -> Result<GainConfig, CliError> {
    let mut cfg = model.config.clone();
    if let Some(v) = ov.p_degree {
        cfg.p_degree = v;
    }
    if let Some(v) = ov.mult_degree {
        cfg.mult_degree = v;
    }
    if let Some(v) = ov.seed {
        cfg.seed = v;
    }
    let tol = match ov.tol {
        Some(t) => Some(t),
        None => match std::env::var(TOL_ENV) {
            Ok(s) => Some(s.trim().parse::<f64>().map_err(|_| CliError::Usage(format!("{TOL_ENV} is not a number: {s}")))?),
            Err(_) => None,
        },
    };
    if let Some(t) = tol {
        if !(t > 0.0) {
            return Err(CliError::Usage(format!("solver tolerance must be positive, got {t}")));
        }
        cfg.solver.tol = t;
    }
    Ok(cfg)
}

pub enum CertifyOutcome {
    Certified(Box<Certificate>),
    Infeasible { status: String, diagnostics: String },
}

/// Runs the gain analysis for one uncertainty setting.
pub fn certify_prepared(model: &Model, prep: &Prepared, cfg: &GainConfig) -> Result<CertifyOutcome, CliError> {
    let names = model.var_names();
    let prob = GainProblem { ds: &prep.ds, ms: prep.ms.as_ref(), region: &model.region, var_names: &names, multiplier_id: &prep.multiplier_id };
    match min_gain(&prob, cfg) {
        Ok(mut cert) => {
            cert.config_hash = model.hash.clone();
            Ok(CertifyOutcome::Certified(Box::new(cert)))
        }
        Err(AnalysisError::Infeasible { status, diagnostics }) => Ok(CertifyOutcome::Infeasible { status: status.to_string(), diagnostics }),
        Err(e) => Err(e.into()),
    }
}

pub fn certify(model: &Model, ov: &Overrides) -> Result<CertifyOutcome, CliError> {
    let cfg = effective_config(model, ov)?;
    let gain = model.controller_gain()?;
    let prep = model.prepare(gain.as_ref(), ov.theta)?;
    certify_prepared(model, &prep, &cfg)
}

/// `dir/name.model` → `dir/name.cert.json`.
pub fn default_cert_path(model_path: &Path) -> PathBuf {
    model_path.with_extension("cert.json")
}

/// Whole-file write through a temporary file in the target directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    use std::io::Write;
    let io = |e: std::io::Error| CliError::Io { path: path.display().to_string(), message: e.to_string() };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn certificate_json(cert: &Certificate) -> String {
    let mut s = serde_json::to_string_pretty(cert).expect("certificate serializes");
    s.push('\n');
    s
}

pub fn read_certificate(path: &Path) -> Result<Certificate, CliError> {
    let src = std::fs::read_to_string(path).map_err(|e| CliError::Io { path: path.display().to_string(), message: e.to_string() })?;
    serde_json::from_str(&src).map_err(|e| CliError::Io { path: path.display().to_string(), message: format!("invalid certificate: {e}") })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub theta: f64,
    pub alpha: Option<f64>,
    pub solve_time: f64,
    pub status: String,
}

/// Certifies every Θ with up to `jobs` worker threads. Rows come back in
/// input order; failures are recorded per row.
pub fn sweep(model: &Model, thetas: &[f64], ov: &Overrides, jobs: usize) -> Result<Vec<SweepRow>, CliError> {
    if thetas.is_empty() {
        return Err(CliError::Usage("empty theta list".into()));
    }
    if let Some(t) = thetas.iter().find(|t| !(**t >= 0.0) || !t.is_finite()) {
        return Err(CliError::Usage(format!("theta must be finite and nonnegative, got {t}")));
    }
    if !matches!(model.uncertainty, UncertaintySpec::Delay { .. }) {
        return Err(CliError::Usage("sweep needs a model with delay uncertainty".into()));
    }
    let cfg = effective_config(model, ov)?;
    let gain = model.controller_gain()?;
    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; thetas.len()]);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= thetas.len() {
            break;
        }
        let theta = thetas[i];
        let start = Instant::now();
        let (alpha, status) = match model.prepare(gain.as_ref(), Some(theta)).map_err(CliError::from).and_then(|p| certify_prepared(model, &p, &cfg)) {
            Ok(CertifyOutcome::Certified(c)) => (Some(c.alpha), "certified".to_string()),
            Ok(CertifyOutcome::Infeasible { status, .. }) => (None, status),
            Err(e) => (None, format!("error: {e}")),
        };
        let row = SweepRow { theta, alpha, solve_time: start.elapsed().as_secs_f64(), status };
        rows.lock().unwrap()[i] = Some(row);
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, thetas.len()) {
            s.spawn(worker);
        }
    });
    Ok(rows.into_inner().unwrap().into_iter().map(|r| r.expect("every row is filled")).collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("theta,alpha,solve_time,status\n");
    for r in rows {
        let alpha = r.alpha.map_or(String::new(), |a| a.to_string());
        out.push_str(&format!("{},{},{:.3},{}\n", r.theta, alpha, r.solve_time, r.status.replace(',', ";")));
    }
    out
}

/// α is nondecreasing in Θ over the certified rows, and no certified row
/// follows an infeasible one.
pub fn sweep_is_monotone(rows: &[SweepRow]) -> bool {
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.theta.total_cmp(&b.theta));
    let mut last = 0.0;
    let mut failed = false;
    for r in sorted {
        match r.alpha {
            Some(a) => {
                if failed || a < last * (1.0 - 1e-9) {
                    return false;
                }
                last = a;
            }
            None => failed = true,
        }
    }
    true
}

fn eval_vec(polys: &[Polynomial], pt: &[f64]) -> DVector<f64> {
    DVector::from_iterator(polys.len(), polys.iter().map(|p| p.eval(pt).expect("model polynomials share the registry")))
}

fn constant_jacobian(polys: &[Polynomial], vars: &[usize], what: &str) -> Result<DMatrix<f64>, CliError> {
    if polys.is_empty() {
        return Ok(DMatrix::zeros(0, vars.len()));
    }
    let j = jacobian(polys, vars).map_err(diqc_core::Error::from)?;
    j.as_constant().ok_or_else(|| CliError::Usage(format!("simulation needs the disturbance to enter {what} affinely")))
}

/// Time-domain loop of a model. The uncertainty input of nominal systems
/// is held at zero; plant models close the loop with the geodesic
/// controller around the origin.
pub fn closed_loop<'a>(model: &'a Model, gain: Option<&'a PolyMatrix>) -> Result<ClosedLoop<'a>, CliError> {
    let nvars = model.registry.len();
    let nx = model.x.len();
    let xv = model.x.clone();
    let point = move |x: &DVector<f64>| {
        let mut pt = vec![0.0; nvars];
        for (i, &v) in xv.iter().enumerate() {
            pt[v] = x[i];
        }
        pt
    };
    match &model.system {
        SystemSpec::Nominal(ns) => {
            let e = constant_jacobian(&ns.f, &model.d, "the dynamics")?;
            let ded = if ns.h.is_empty() { DMatrix::zeros(0, model.d.len()) } else { constant_jacobian(&ns.h, &model.d, "the output")? };
            let ne = ns.h.len();
            let pf = point.clone();
            Ok(ClosedLoop {
                f: Box::new(move |x| eval_vec(&ns.f, &pf(x))),
                controller: Box::new(|_| DVector::zeros(0)),
                output_map: Some(Box::new(move |x| eval_vec(&ns.h, &point(x)))),
                b: DMatrix::zeros(nx, 0),
                e,
                c: DMatrix::zeros(ne, nx),
                dmat: DMatrix::zeros(ne, 0),
                ded,
            })
        }
        SystemSpec::Plant(p) => {
            let origin = eval_vec(&p.f, &vec![0.0; nvars]);
            if origin.amax() > 1e-12 {
                return Err(CliError::Usage("plant simulation needs f(0) = 0 (equilibrium at the origin)".into()));
            }
            let nu = p.b.ncols();
            let controller: Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'a> = match gain {
                Some(k) => match k.as_constant() {
                    Some(kc) => Box::new(move |x| &kc * x),
                    None => {
                        let kf = poly_gain(k, &model.x);
                        let zero_x = DVector::zeros(nx);
                        let zero_u = DVector::zeros(nu);
                        Box::new(move |x| geodesic_controller(x, &zero_x, &zero_u, &kf))
                    }
                },
                None => Box::new(move |_| DVector::zeros(nu)),
            };
            Ok(ClosedLoop {
                f: Box::new(move |x| eval_vec(&p.f, &point(x))),
                controller,
                output_map: None,
                b: p.b.clone(),
                e: p.e.clone(),
                c: p.c.clone(),
                dmat: p.dmat.clone(),
                ded: DMatrix::zeros(p.c.nrows(), model.d.len()),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SoundnessReport {
    pub empirical_gain: f64,
    pub alpha: f64,
    pub gain_ok: bool,
    /// Largest violation of the region constraints along the trajectories.
    pub region_violation: f64,
    pub region_ok: bool,
    pub pairs: usize,
    pub seed: u64,
    pub theta: f64,
}

/// Simulates disturbance pairs through the loop and compares the empirical
/// incremental gain with the certified α.
pub fn soundness(model: &Model, gain: Option<&PolyMatrix>, cert: &Certificate) -> Result<SoundnessReport, CliError> {
    let cl = closed_loop(model, gain)?;
    let s = &model.simulation;
    let theta = delay_from_multiplier_id(&cert.multiplier_id).unwrap_or(0.0);
    let nx = model.x.len();
    let nd = model.d.len();
    if nd == 0 {
        return Err(CliError::Usage("simulation needs at least one disturbance".into()));
    }
    let sigs = disturbance_set(2 * s.pairs * nd, s.seed, s.horizon, s.step);
    let p = cert.p_matrix()?;
    let nvars = model.registry.len();
    let metric = |x: &DVector<f64>| {
        let mut pt = vec![0.0; nvars];
        for (i, &v) in model.x.iter().enumerate() {
            pt[v] = x[i];
        }
        let full = p.eval(&pt).expect("certificate metric evaluates");
        full.view((0, 0), (nx, nx)).into_owned() + DMatrix::identity(nx, nx) * cert.epsilon
    };
    // distinct initial states only where no uncertainty history is involved
    let spread = if model.uncertainty == UncertaintySpec::None { 0.1 } else { 0.0 };
    let mut pairs = Vec::with_capacity(s.pairs);
    let mut b_terms = Vec::with_capacity(s.pairs);
    let mut violation: f64 = 0.0;
    for k in 0..s.pairs {
        let base = &sigs[k * nd..(k + 1) * nd];
        let pert = &sigs[(s.pairs + k) * nd..(s.pairs + k + 1) * nd];
        let d0 = |t: f64| DVector::from_iterator(nd, base.iter().map(|m| m.eval(t)));
        let d1 = |t: f64| DVector::from_iterator(nd, base.iter().zip(pert).map(|(m, q)| m.eval(t) + s.perturbation * q.eval(t)));
        let x0 = DVector::zeros(nx);
        let x1 = DVector::from_fn(nx, |i, _| spread * if (i + k) % 2 == 0 { 1.0 } else { -1.0 });
        let a = simulate_delay_cl(&cl, theta, &d0, &x0, s.horizon, s.step)?;
        let b = simulate_delay_cl(&cl, theta, &d1, &x1, s.horizon, s.step)?;
        for tr in [&a, &b] {
            violation = violation.max(region_violation(model, tr));
        }
        b_terms.push(path_energy(&segment(&x0, &x1, 32), metric)?);
        pairs.push((a, b));
    }
    let g = empirical_inc_gain(&pairs, &b_terms)?;
    Ok(SoundnessReport {
        empirical_gain: g,
        alpha: cert.alpha,
        gain_ok: g <= cert.alpha * 1.01,
        region_violation: violation,
        region_ok: violation <= 1e-9,
        pairs: s.pairs,
        seed: s.seed,
        theta,
    })
}

fn region_violation(model: &Model, tr: &Trajectory) -> f64 {
    let nvars = model.registry.len();
    let mut worst: f64 = 0.0;
    for k in 0..tr.len() {
        let mut pt = vec![0.0; nvars];
        for (i, &v) in model.x.iter().enumerate() {
            pt[v] = tr.x[k][i];
        }
        for (i, &v) in model.d.iter().enumerate() {
            pt[v] = tr.d[k][i];
        }
        for (&v, &(lo, hi)) in &model.region.bounds {
            worst = worst.max(lo - pt[v]).max(pt[v] - hi);
        }
        for g in &model.region.generators {
            worst = worst.max(-g.eval(&pt).unwrap_or(f64::NAN));
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), pass, detail: detail.into() }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// A-posteriori certificate checks followed by the simulation battery.
pub fn validate(model: &Model, cert: &Certificate, ov: &Overrides) -> Result<Vec<Check>, CliError> {
    if cert.config_hash != model.hash {
        return Err(CliError::HashMismatch { cert: cert.config_hash.clone(), model: model.hash.clone() });
    }
    let cfg = effective_config(model, ov)?;
    let gain = model.controller_gain()?;
    let theta = delay_from_multiplier_id(&cert.multiplier_id);
    let prep = model.prepare(gain.as_ref(), theta)?;
    if prep.multiplier_id != cert.multiplier_id {
        return Err(CliError::Usage(format!("certificate multipliers `{}` do not match the model (`{}`)", cert.multiplier_id, prep.multiplier_id)));
    }
    let rep = verify_certificate(cert, &prep.ds, prep.ms.as_ref(), cfg.n_samples.max(200), cfg.seed.wrapping_add(1))?;
    let mut checks = vec![
        Check::new("lmi samples", rep.lmi_ok, format!("max eig {:.3e} <= {:.3e} over {} samples", rep.lmi_max_eig, rep.lmi_bound, rep.n_samples)),
        Check::new("storage positivity", rep.storage_ok, format!("min eig {:.3e} >= {:.3e}", rep.storage_min_eig, rep.storage_bound)),
        Check::new("multiplier weights", rep.lambda_ok, format!("lambda = {:?}", cert.lambda)),
        Check::new("riccati residual", rep.are_ok, format!("{:.3e}", rep.are_residual)),
        Check::new("j-factorization residual", rep.jfactor_ok, format!("{:.3e}", rep.jfactor_residual)),
    ];
    let snd = soundness(model, gain.as_ref(), cert)?;
    checks.push(Check::new(
        "simulated incremental gain",
        snd.gain_ok,
        format!("{:.6} <= 1.01 * {:.6} ({} pairs, seed {}, theta {})", snd.empirical_gain, snd.alpha, snd.pairs, snd.seed, snd.theta),
    ));
    checks.push(Check::new("trajectories inside region", snd.region_ok, format!("max violation {:.3e}", snd.region_violation)));
    Ok(checks)
}
