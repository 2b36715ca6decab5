//! Gain minimization over (P, λ, γ), certificates and their verification.
//!
//! The pointwise dissipation LMI
//!
//! ```text
//! [PA + A'P + Ṗ   PB_w   PB_d ]
//! [B_w'P          0      0    ]  + R_e'R_e + Σ λ_k R_k'M_k R_k  ≺ 0
//! [B_d'P          0      −γI  ]
//! ```
//!
//! with R_e = [C_e D_ew D_ed] and R_k the rows of [C_z D_zw D_zd] belonging
//! to multiplier k, is affine in the decisions and is imposed on a region by
//! SOS. The gain bound is α = √γ.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{LinExpr, SdpOptions, SdpStatus};
use crate::diffsys::{self, DiffSysError, DiffSystem, ExtendedSystem};
use crate::iqc::{self, IqcError, MultiplierSet};
use crate::linalg::{self, LinalgError};
use crate::lti::{self, StateSpace};
use crate::poly::{self, Monomial, PolyError, PolyMatrix, Polynomial};
use crate::sosp::{add_pmi, monomial_basis, AffineMatrix, AffinePoly, PmiOptions, Region, SosError, SosProgram};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no certificate at these degrees: solver returned {status} ({diagnostics})")]
    Infeasible { status: SdpStatus, diagnostics: String },
    #[error("multiplier weights are inadmissible: {0}")]
    Inadmissible(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("metric is not positive definite at path sample {0}")]
    IndefiniteMetric(usize),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Iqc(#[from] IqcError),
    #[error(transparent)]
    DiffSys(#[from] DiffSysError),
    #[error(transparent)]
    Sos(#[from] SosError),
}

pub type AnalysisResult<T> = std::result::Result<T, AnalysisError>;

pub const EPS_LMI: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GainConfig {
    /// Degree of P in the storage states.
    pub p_degree: u32,
    /// Degree of the S-procedure multipliers.
    pub mult_degree: u32,
    pub eps_lmi: f64,
    pub lambda_min: f64,
    pub solver: SdpOptions,
    /// Samples used for the a-posteriori checks.
    pub n_samples: usize,
    pub seed: u64,
    /// Half-width of the sampling interval for indeterminates the region
    /// does not bound.
    pub sample_radius: f64,
}

impl Default for GainConfig {
    fn default() -> Self {
        Self {
            p_degree: 0,
            mult_degree: 0,
            eps_lmi: EPS_LMI,
            lambda_min: iqc::LAMBDA_MIN,
            solver: SdpOptions::default(),
            n_samples: 200,
            seed: 1,
            sample_radius: 10.0,
        }
    }
}

/// A differential system, its uncertainty description and the region where
/// the LMI must hold.
#[derive(Debug, Clone)]
pub struct GainProblem<'a> {
    pub ds: &'a DiffSystem,
    pub ms: Option<&'a MultiplierSet>,
    pub region: &'a Region,
    pub var_names: &'a [String],
    pub multiplier_id: &'a str,
}

/// δG extended with the stacked multiplier filter (or with nothing).
pub fn extended_system(ds: &DiffSystem, ms: Option<&MultiplierSet>) -> AnalysisResult<ExtendedSystem> {
    let filter = match ms {
        Some(ms) => {
            if ms.nv() != ds.nv() || ms.nw() != ds.nw() {
                return Err(AnalysisError::Config(format!(
                    "multiplier channels ({}, {}) do not match the system ({}, {})",
                    ms.nv(),
                    ms.nw(),
                    ds.nv(),
                    ds.nw()
                )));
            }
            ms.shared_filter().clone()
        }
        None => {
            if ds.nw() != 0 {
                return Err(AnalysisError::Config("system has a w channel but no uncertainty is described".into()));
            }
            StateSpace::static_gain(DMatrix::zeros(0, ds.nv()))
        }
    };
    Ok(diffsys::extend(ds, &filter)?)
}

/// Monomials P may depend on.
pub fn storage_basis(ds: &DiffSystem, p_degree: u32) -> Vec<Monomial> {
    monomial_basis(ds.nvars, &ds.storage_vars(), p_degree)
}

pub struct LmiParts {
    pub lmi: AffineMatrix,
    pub p: AffineMatrix,
    pub gamma: usize,
    pub lambda: Vec<usize>,
}

fn rows_of(m: &PolyMatrix, r: std::ops::Range<usize>) -> PolyMatrix {
    m.submatrix(r.start, 0, r.len(), m.cols())
}

fn quad_form(r: &PolyMatrix, m: &PolyMatrix) -> AnalysisResult<PolyMatrix> {
    Ok(r.transpose().mul(m)?.mul(r)?)
}

/// Builds the LMI left-hand side with fresh decisions for P, γ and λ.
pub fn assemble_lmi(prog: &mut SosProgram, ds: &DiffSystem, ext: &ExtendedSystem, ms: Option<&MultiplierSet>, p_degree: u32) -> AnalysisResult<LmiParts> {
    let nvars = ext.nvars();
    let (n, nw, nd) = (ext.n_chi(), ext.nw, ext.nd);
    let basis = storage_basis(ds, p_degree);
    let p = prog.new_sym_poly_matrix("P", nvars, n, &basis);
    let gamma = prog.new_var("gamma");

    let pa = p.mul_poly_right(&ext.a)?;
    let mut tl = pa.add(&pa.transpose())?;
    let storage: BTreeSet<usize> = ds.storage_vars().into_iter().collect();
    for (j, &xv) in ds.x_vars.iter().enumerate() {
        if !storage.contains(&xv) {
            continue;
        }
        if let Some(f) = &ds.drift[j] {
            let dp = p.diff(xv);
            if !dp.get(0, 0).is_zero() || (0..n).any(|i| (0..n).any(|k| !dp.get(i, k).is_zero())) {
                tl = tl.add(&dp.mul_scalar_poly(f))?;
            }
        }
    }
    let pbw = p.mul_poly_right(&ext.b_w)?;
    let pbd = p.mul_poly_right(&ext.b_d)?;
    let zero = |r: usize, c: usize| AffineMatrix::zeros(nvars, r, c);
    let mut gblock = zero(nd, nd);
    for i in 0..nd {
        gblock.set(i, i, AffinePoly::from_linexpr(nvars, LinExpr::term(gamma, -1.0)));
    }
    let mut lmi = AffineMatrix::from_blocks(&[
        vec![&tl, &pbw, &pbd],
        vec![&pbw.transpose(), &zero(nw, nw), &zero(nw, nd)],
        vec![&pbd.transpose(), &zero(nd, nw), &gblock],
    ])?;

    let re = PolyMatrix::from_blocks(&[vec![&ext.c_e, &ext.d_ew, &ext.d_ed]])?;
    let ee = re.transpose().mul(&re)?;
    lmi = lmi.add(&AffineMatrix::from_polymatrix(&ee))?;

    let mut lambda = Vec::new();
    if let Some(ms) = ms {
        let rz = PolyMatrix::from_blocks(&[vec![&ext.c_z, &ext.d_zw, &ext.d_zd]])?;
        for (k, e) in ms.entries().iter().enumerate() {
            let v = prog.new_var(&format!("lambda{}", k + 1));
            lambda.push(v);
            let rk = rows_of(&rz, ms.output_range(k));
            let mk = PolyMatrix::from_dmatrix(nvars, &e.m);
            let term = quad_form(&rk, &mk)?.symmetrize()?;
            lmi = lmi.add(&AffineMatrix::polymatrix_times_var(&term, v))?;
        }
    }
    Ok(LmiParts { lmi, p, gamma, lambda })
}

/// Numerical LMI left-hand side at a point for given (P, λ, γ).
#[allow(clippy::too_many_arguments)]
pub fn lmi_value(
    ds: &DiffSystem,
    ext: &ExtendedSystem,
    ms: Option<&MultiplierSet>,
    p: &PolyMatrix,
    lambda: &[f64],
    gamma: f64,
    point: &[f64],
) -> AnalysisResult<DMatrix<f64>> {
    let (n, nw, nd) = (ext.n_chi(), ext.nw, ext.nd);
    let pm = p.eval(point)?;
    let a = ext.a.eval(point)?;
    let mut pdot = DMatrix::zeros(n, n);
    let storage: BTreeSet<usize> = ds.storage_vars().into_iter().collect();
    for (j, &xv) in ds.x_vars.iter().enumerate() {
        if let (true, Some(f)) = (storage.contains(&xv), &ds.drift[j]) {
            pdot += p.diff(xv)?.eval(point)? * f.eval(point)?;
        }
    }
    let bw = ext.b_w.eval(point)?;
    let bd = ext.b_d.eval(point)?;
    let dim = n + nw + nd;
    let mut l = DMatrix::zeros(dim, dim);
    let tl = &pm * &a + a.transpose() * &pm + pdot;
    l.view_mut((0, 0), (n, n)).copy_from(&tl);
    let pbw = &pm * &bw;
    let pbd = &pm * &bd;
    l.view_mut((0, n), (n, nw)).copy_from(&pbw);
    l.view_mut((n, 0), (nw, n)).copy_from(&pbw.transpose());
    l.view_mut((0, n + nw), (n, nd)).copy_from(&pbd);
    l.view_mut((n + nw, 0), (nd, n)).copy_from(&pbd.transpose());
    for i in 0..nd {
        l[(n + nw + i, n + nw + i)] -= gamma;
    }
    let hc = |x: DMatrix<f64>, y: DMatrix<f64>, z: DMatrix<f64>| diffsys::hcat(&diffsys::hcat(&x, &y), &z);
    let re = hc(ext.c_e.eval(point)?, ext.d_ew.eval(point)?, ext.d_ed.eval(point)?);
    l += re.transpose() * &re;
    if let Some(ms) = ms {
        let rz = hc(ext.c_z.eval(point)?, ext.d_zw.eval(point)?, ext.d_zd.eval(point)?);
        for (k, e) in ms.entries().iter().enumerate() {
            let r = ms.output_range(k);
            let rk = rz.rows(r.start, r.len()).clone_owned();
            l += rk.transpose() * &e.m * &rk * lambda[k];
        }
    }
    Ok(0.5 * (&l + l.transpose()))
}

/// Polynomial coefficients keyed by exponent vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyJson {
    pub terms: Vec<(Vec<u32>, f64)>,
}

impl PolyJson {
    pub fn from_poly(p: &Polynomial) -> Self {
        Self { terms: p.terms().map(|(m, c)| (m.exponents().to_vec(), c)).collect() }
    }

    pub fn to_poly(&self, nvars: usize) -> AnalysisResult<Polynomial> {
        for (e, _) in &self.terms {
            if e.len() != nvars {
                return Err(AnalysisError::Config(format!("exponent vector of length {} for {nvars} variables", e.len())));
            }
        }
        Ok(Polynomial::from_terms(nvars, self.terms.iter().map(|(e, c)| (Monomial::from_exponents(e.clone()), *c))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyMatrixJson {
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub entries: Vec<PolyJson>,
}

impl PolyMatrixJson {
    pub fn from_matrix(m: &PolyMatrix) -> Self {
        Self { rows: m.rows(), cols: m.cols(), entries: m.entries().iter().map(PolyJson::from_poly).collect() }
    }

    pub fn to_matrix(&self, nvars: usize) -> AnalysisResult<PolyMatrix> {
        let entries = self.entries.iter().map(|e| e.to_poly(nvars)).collect::<AnalysisResult<Vec<_>>>()?;
        Ok(PolyMatrix::new(self.rows, self.cols, entries)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionJson {
    pub generators: Vec<PolyJson>,
    /// (variable index, lower, upper)
    pub bounds: Vec<(usize, f64, f64)>,
}

impl RegionJson {
    pub fn from_region(r: &Region) -> Self {
        Self {
            generators: r.generators.iter().map(PolyJson::from_poly).collect(),
            bounds: r.bounds.iter().map(|(&v, &(lo, hi))| (v, lo, hi)).collect(),
        }
    }

    pub fn to_region(&self, nvars: usize) -> AnalysisResult<Region> {
        let mut r = Region::everywhere();
        for g in &self.generators {
            r.generators.push(g.to_poly(nvars)?);
        }
        for &(v, lo, hi) in &self.bounds {
            r.bounds.insert(v, (lo, hi));
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// Largest eigenvalue of the LMI over the samples.
    pub lmi_max_eig: f64,
    /// Smallest eigenvalue of P̃ = P − blockdiag(0, X) over the samples.
    pub ptilde_min_eig: f64,
    /// Relative Riccati residual.
    pub are_residual: f64,
    /// Relative J-factorization residual on the frequency grid.
    pub jfactor_residual: f64,
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub status: String,
    pub iterations: usize,
    pub gap: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Whether the P̃ ⪰ 0 fallback re-solve was needed.
    pub ptilde_resolve: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub var_names: Vec<String>,
    pub alpha: f64,
    pub gamma: f64,
    pub lambda: Vec<f64>,
    /// Storage margin in V = δχ'(P̃ + εI)δχ.
    pub epsilon: f64,
    pub eps_lmi: f64,
    pub nx: usize,
    pub n_chi: usize,
    pub p: PolyMatrixJson,
    /// Stabilizing Riccati solution of the combined multiplier (n_ψ × n_ψ).
    pub x_are: Vec<Vec<f64>>,
    pub region: RegionJson,
    pub multiplier_id: String,
    pub residual_report: ResidualReport,
    pub solver: SolverReport,
    pub config_hash: String,
    pub seed: u64,
}

impl Certificate {
    pub fn p_matrix(&self) -> AnalysisResult<PolyMatrix> {
        self.p.to_matrix(self.var_names.len())
    }

    pub fn x_matrix(&self) -> DMatrix<f64> {
        let n = self.x_are.len();
        DMatrix::from_fn(n, n, |i, j| self.x_are[i][j])
    }
}

/// Uniform samples in the box hull of the region, filtered by its
/// generators. Variables not in `vars` stay at 0; unbounded ones use
/// [−radius, radius].
pub fn sample_region(region: &Region, nvars: usize, vars: &[usize], n: usize, seed: u64, radius: f64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut tries = 0;
    while out.len() < n && tries < 1000 * n.max(1) {
        tries += 1;
        let mut pt = vec![0.0; nvars];
        for &v in vars {
            let (lo, hi) = region.bounds.get(&v).copied().unwrap_or((-radius, radius));
            pt[v] = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        }
        if region.contains(&pt, 0.0) {
            out.push(pt);
        }
    }
    out
}

fn lmi_vars(ds: &DiffSystem, ext: &ExtendedSystem, p: &PolyMatrix) -> Vec<usize> {
    let mut vars = BTreeSet::new();
    for m in [&ext.a, &ext.b_w, &ext.b_d, &ext.c_z, &ext.d_zw, &ext.d_zd, &ext.c_e, &ext.d_ew, &ext.d_ed, p] {
        vars.extend(m.vars_used());
    }
    let storage: BTreeSet<usize> = ds.storage_vars().into_iter().collect();
    for (j, xv) in ds.x_vars.iter().enumerate() {
        if let (true, Some(f)) = (storage.contains(xv), &ds.drift[j]) {
            vars.extend(f.vars_used());
        }
    }
    vars.into_iter().collect()
}

fn ptilde(p: &DMatrix<f64>, x: &DMatrix<f64>, nx: usize) -> DMatrix<f64> {
    let mut out = p.clone();
    let k = x.nrows();
    let mut v = out.view_mut((nx, nx), (k, k));
    v -= x;
    out
}

/// J-spectral factorization of the combined multiplier with its residuals.
#[derive(Debug, Clone)]
pub struct FactorCheck {
    pub x: DMatrix<f64>,
    /// Relative Riccati residual.
    pub are_residual: f64,
    /// Largest relative frequency-grid deviation of the factorization.
    pub jfactor_residual: f64,
    /// Spectral abscissa of A − BR⁻¹(XB + S)'.
    pub closed_loop_abscissa: f64,
}

pub fn factor_check(ms: Option<&MultiplierSet>, lambda: &[f64], lambda_min: f64) -> AnalysisResult<FactorCheck> {
    let empty = FactorCheck { x: DMatrix::zeros(0, 0), are_residual: 0.0, jfactor_residual: 0.0, closed_loop_abscissa: f64::NEG_INFINITY };
    let Some(ms) = ms else {
        return Ok(empty);
    };
    let comb = iqc::combine(ms, lambda, lambda_min)?;
    if comb.psi.n_states() == 0 {
        return Ok(empty);
    }
    let grid = iqc::default_grid();
    let jf = lti::j_spectral_factorize(&comb.psi, &comb.m, ms.nv(), ms.nw(), &grid)
        .map_err(|e| AnalysisError::Inadmissible(format!("J-spectral factorization at λ = {lambda:?}: {e}")))?;
    let res = linalg::are_residual(comb.psi.a(), comb.psi.b(), &comb.q, &comb.r, &comb.s, &jf.x)?;
    let scale = 1.0 + jf.x.norm() * (1.0 + comb.psi.a().norm()) + comb.q.norm();
    let jres = lti::factorization_residual(&comb.psi, &comb.m, &jf, &grid)?;
    let rinv = comb.r.clone().try_inverse().ok_or(AnalysisError::Inadmissible("singular feedthrough weight".into()))?;
    let acl = comb.psi.a() - comb.psi.b() * rinv * (&jf.x * comb.psi.b() + &comb.s).transpose();
    let closed_loop_abscissa = linalg::spectral_abscissa(&acl)?;
    Ok(FactorCheck { x: jf.x, are_residual: res.norm() / scale, jfactor_residual: jres, closed_loop_abscissa })
}

/// Minimizes γ over (P, λ, γ) and returns a certificate for α = √γ.
pub fn min_gain(prob: &GainProblem, cfg: &GainConfig) -> AnalysisResult<Certificate> {
    let ds = prob.ds;
    ds.validate()?;
    if prob.var_names.len() != ds.nvars {
        return Err(AnalysisError::Config(format!("{} variable names for {} indeterminates", prob.var_names.len(), ds.nvars)));
    }
    let ext = extended_system(ds, prob.ms)?;
    let first = solve_gain(ds, &ext, prob, cfg, None)?;
    let mut fd = factor_check(prob.ms, &first.lambda, cfg.lambda_min)?;
    let vars = lmi_vars(ds, &ext, &first.p);
    let samples = sample_region(prob.region, ds.nvars, &vars, cfg.n_samples, cfg.seed, cfg.sample_radius);
    let min_ptilde = |p: &PolyMatrix, x: &DMatrix<f64>| -> AnalysisResult<f64> {
        let mut worst = f64::INFINITY;
        for pt in &samples {
            worst = worst.min(linalg::min_sym_eigenvalue(&ptilde(&p.eval(pt)?, x, ds.nx())));
        }
        if samples.is_empty() {
            worst = linalg::min_sym_eigenvalue(&ptilde(&p.eval(&vec![0.0; ds.nvars])?, x, ds.nx()));
        }
        Ok(worst)
    };
    let mut sol = first;
    let mut resolved = false;
    if min_ptilde(&sol.p, &fd.x)? < -1e-9 {
        let x_prev = fd.x.clone();
        sol = solve_gain(ds, &ext, prob, cfg, Some(&x_prev))?;
        fd = factor_check(prob.ms, &sol.lambda, cfg.lambda_min)?;
        resolved = true;
    }
    let pmin = min_ptilde(&sol.p, &fd.x)?;
    let mut pnorm: f64 = 0.0;
    let mut lmax = f64::NEG_INFINITY;
    let eval_pts: Vec<Vec<f64>> = if samples.is_empty() { vec![vec![0.0; ds.nvars]] } else { samples.clone() };
    for pt in &eval_pts {
        pnorm = pnorm.max(sol.p.eval(pt)?.norm());
        let l = lmi_value(ds, &ext, prob.ms, &sol.p, &sol.lambda, sol.gamma, pt)?;
        lmax = lmax.max(linalg::max_sym_eigenvalue(&l));
    }
    let epsilon = 1e-6 * (1.0 + pnorm);
    Ok(Certificate {
        var_names: prob.var_names.to_vec(),
        alpha: sol.gamma.max(0.0).sqrt(),
        gamma: sol.gamma,
        lambda: sol.lambda.clone(),
        epsilon,
        eps_lmi: cfg.eps_lmi,
        nx: ds.nx(),
        n_chi: ext.n_chi(),
        p: PolyMatrixJson::from_matrix(&sol.p),
        x_are: (0..fd.x.nrows()).map(|i| fd.x.row(i).iter().copied().collect()).collect(),
        region: RegionJson::from_region(prob.region),
        multiplier_id: prob.multiplier_id.to_string(),
        residual_report: ResidualReport {
            lmi_max_eig: lmax,
            ptilde_min_eig: pmin,
            are_residual: fd.are_residual,
            jfactor_residual: fd.jfactor_residual,
            n_samples: eval_pts.len(),
            seed: cfg.seed,
        },
        solver: SolverReport {
            status: sol.status.to_string(),
            iterations: sol.iterations,
            gap: sol.gap,
            primal_residual: sol.pres,
            dual_residual: sol.dres,
            ptilde_resolve: resolved,
        },
        config_hash: String::new(),
        seed: cfg.seed,
    })
}

struct GainSolution {
    p: PolyMatrix,
    lambda: Vec<f64>,
    gamma: f64,
    status: SdpStatus,
    iterations: usize,
    gap: f64,
    pres: f64,
    dres: f64,
}

fn solve_gain(ds: &DiffSystem, ext: &ExtendedSystem, prob: &GainProblem, cfg: &GainConfig, x_prev: Option<&DMatrix<f64>>) -> AnalysisResult<GainSolution> {
    let mut prog = SosProgram::new();
    let parts = assemble_lmi(&mut prog, ds, ext, prob.ms, cfg.p_degree)?;
    for (k, &v) in parts.lambda.iter().enumerate() {
        let floor = if k == 0 { cfg.lambda_min } else { 0.0 };
        prog.add_ineq(LinExpr { constant: -floor, terms: [(v, 1.0)].into() });
    }
    let pmi = PmiOptions { mult_degree: cfg.mult_degree, eps: cfg.eps_lmi };
    add_pmi(&mut prog, &parts.lmi.scale(-1.0), prob.region, &pmi)?;
    if let Some(x) = x_prev {
        let nvars = ds.nvars;
        let n = ext.n_chi();
        let mut shift = DMatrix::zeros(n, n);
        shift.view_mut((ds.nx(), ds.nx()), x.shape()).copy_from(x);
        let pt = parts.p.sub(&AffineMatrix::from_polymatrix(&PolyMatrix::from_dmatrix(nvars, &shift)))?;
        add_pmi(&mut prog, &pt, prob.region, &PmiOptions { mult_degree: cfg.mult_degree, eps: 1e-8 })?;
    }
    prog.minimize(LinExpr::var(parts.gamma));
    let sol = prog.solve(&cfg.solver)?;
    if sol.status != SdpStatus::Optimal {
        return Err(AnalysisError::Infeasible { status: sol.status, diagnostics: sol.diagnostics.clone() });
    }
    let p = parts.p.eval_decisions(&sol.x).symmetrize()?;
    let p = PolyMatrix::new(p.rows(), p.cols(), p.entries().iter().map(|e| e.prune(1e-14)).collect())?;
    Ok(GainSolution {
        p,
        lambda: parts.lambda.iter().map(|&v| sol.x[v]).collect(),
        gamma: sol.x[parts.gamma],
        status: sol.status,
        iterations: sol.iterations,
        gap: sol.gap,
        pres: sol.primal_residual,
        dres: sol.dual_residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub lmi_max_eig: f64,
    pub lmi_bound: f64,
    pub lmi_ok: bool,
    /// Smallest eigenvalue of P̃ + εI.
    pub storage_min_eig: f64,
    pub storage_bound: f64,
    pub storage_ok: bool,
    pub are_residual: f64,
    pub are_ok: bool,
    pub jfactor_residual: f64,
    pub jfactor_ok: bool,
    pub lambda_ok: bool,
    pub n_samples: usize,
    pub seed: u64,
}

impl VerifyReport {
    pub fn all_ok(&self) -> bool {
        self.lmi_ok && self.storage_ok && self.are_ok && self.jfactor_ok && self.lambda_ok
    }
}

/// Re-evaluates a certificate on fresh samples.
pub fn verify_certificate(cert: &Certificate, ds: &DiffSystem, ms: Option<&MultiplierSet>, n_samples: usize, seed: u64) -> AnalysisResult<VerifyReport> {
    let ext = extended_system(ds, ms)?;
    let nvars = ds.nvars;
    if cert.var_names.len() != nvars || cert.n_chi != ext.n_chi() {
        return Err(AnalysisError::Config("certificate does not match the system dimensions".into()));
    }
    let p = cert.p_matrix()?;
    let region = cert.region.to_region(nvars)?;
    let lambda_ok = match ms {
        Some(ms) => iqc::check_lambda(ms, &cert.lambda, iqc::LAMBDA_MIN).is_ok(),
        None => cert.lambda.is_empty(),
    } && cert.gamma > 0.0;
    let (x, are_residual, jfactor_residual) = if lambda_ok {
        match factor_check(ms, &cert.lambda, iqc::LAMBDA_MIN) {
            Ok(fd) => (fd.x, fd.are_residual, fd.jfactor_residual),
            Err(_) => (cert.x_matrix(), f64::INFINITY, f64::INFINITY),
        }
    } else {
        (cert.x_matrix(), f64::INFINITY, f64::INFINITY)
    };
    let vars = lmi_vars(ds, &ext, &p);
    let mut samples = sample_region(&region, nvars, &vars, n_samples, seed, 10.0);
    if samples.is_empty() {
        samples.push(vec![0.0; nvars]);
    }
    let mut lmax = f64::NEG_INFINITY;
    let mut smin = f64::INFINITY;
    let xdim_ok = x.nrows() == ext.npsi;
    for pt in &samples {
        let l = lmi_value(ds, &ext, ms, &p, &cert.lambda, cert.gamma, pt)?;
        lmax = lmax.max(linalg::max_sym_eigenvalue(&l));
        if xdim_ok {
            let mut pt_m = ptilde(&p.eval(pt)?, &x, ds.nx());
            for i in 0..pt_m.nrows() {
                pt_m[(i, i)] += cert.epsilon;
            }
            smin = smin.min(linalg::min_sym_eigenvalue(&pt_m));
        }
    }
    if !xdim_ok {
        smin = f64::NEG_INFINITY;
    }
    let lmi_bound = -cert.eps_lmi / 2.0;
    let storage_bound = if cert.epsilon > 0.0 { cert.epsilon / 2.0 } else { -1e-9 };
    Ok(VerifyReport {
        lmi_max_eig: lmax,
        lmi_bound,
        lmi_ok: lmax <= lmi_bound,
        storage_min_eig: smin,
        storage_bound,
        storage_ok: smin >= storage_bound,
        are_residual,
        are_ok: are_residual <= 1e-8,
        jfactor_residual,
        jfactor_ok: jfactor_residual <= 1e-6,
        lambda_ok,
        n_samples: samples.len(),
        seed,
    })
}

/// Squared length (∫₀¹ √(c_s'M(c)c_s) ds)² of a path sampled at s_k = k/N
/// (N even), with composite Simpson quadrature and second-order
/// differences for c_s.
pub fn path_energy<F>(path: &[DVector<f64>], metric: F) -> AnalysisResult<f64>
where
    F: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    let npts = path.len();
    if npts < 3 || npts % 2 == 0 {
        return Err(AnalysisError::Config(format!("path needs an odd number (≥ 3) of samples, got {npts}")));
    }
    if path.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(AnalysisError::Config("non-finite path sample".into()));
    }
    let n = npts - 1;
    let h = 1.0 / n as f64;
    let deriv = |k: usize| -> DVector<f64> {
        if k == 0 {
            (&path[1] * 4.0 - &path[2] - &path[0] * 3.0) / (2.0 * h)
        } else if k == n {
            (&path[n] * 3.0 - &path[n - 1] * 4.0 + &path[n - 2]) / (2.0 * h)
        } else {
            (&path[k + 1] - &path[k - 1]) / (2.0 * h)
        }
    };
    let mut acc = 0.0;
    for k in 0..=n {
        let m = metric(&path[k]);
        if linalg::min_sym_eigenvalue(&m) <= 0.0 {
            return Err(AnalysisError::IndefiniteMetric(k));
        }
        let d = deriv(k);
        let q = (d.transpose() * &m * &d)[(0, 0)].max(0.0).sqrt();
        let w = if k == 0 || k == n {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * q;
    }
    let len = acc * h / 3.0;
    Ok(len * len)
}

/// Straight segment from a to b with n + 1 samples.
pub fn segment(a: &DVector<f64>, b: &DVector<f64>, n: usize) -> Vec<DVector<f64>> {
    (0..=n).map(|k| a + (b - a) * (k as f64 / n as f64)).collect()
}

/// Plant data for the constant-metric synthesis:
/// ẋ = f(x) + Bu + Ed, e = Cx + Du.
#[derive(Debug, Clone)]
pub struct SynthesisProblem {
    pub nvars: usize,
    pub x: Vec<usize>,
    pub f: Vec<Polynomial>,
    pub b: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub dmat: DMatrix<f64>,
    pub region: Region,
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    /// Dual metric W; the metric is W⁻¹.
    pub w: DMatrix<f64>,
    /// Differential feedback gain δu = Kδx.
    pub k: DMatrix<f64>,
}

impl Synthesis {
    pub fn k_poly(&self, nvars: usize) -> PolyMatrix {
        PolyMatrix::from_dmatrix(nvars, &self.k)
    }
}

/// Constant metric and constant gain with closed-loop gain below the target
/// on the region.
///
/// With W ⪰ 10⁻² I and Y = KW, imposes
/// [[A(x)W + WA(x)' + BY + Y'B', E, (CW + DY)'], [E', −αI, 0], [CW + DY, 0, −αI]] ≺ 0
/// and minimizes μ subject to [[μI, Y], [Y', W]] ⪰ 0.
pub fn ccm_synthesize(sp: &SynthesisProblem, target_alpha: f64, cfg: &GainConfig) -> AnalysisResult<Synthesis> {
    let nx = sp.x.len();
    let nu = sp.b.ncols();
    let nd = sp.e.ncols();
    let ne = sp.c.nrows();
    if sp.f.len() != nx || sp.b.nrows() != nx || sp.e.nrows() != nx || sp.c.ncols() != nx || sp.dmat.shape() != (ne, nu) {
        return Err(AnalysisError::Config("synthesis data are not conformal".into()));
    }
    if !(target_alpha > 0.0) {
        return Err(AnalysisError::Config(format!("target gain must be positive, got {target_alpha}")));
    }
    let nvars = sp.nvars;
    let a = poly::jacobian(&sp.f, &sp.x)?;
    let mut prog = SosProgram::new();
    let wd = prog.new_sym_matrix("W", nx);
    let mut y = vec![vec![LinExpr::zero(); nx]; nu];
    for (i, row) in y.iter_mut().enumerate() {
        for (j, e) in row.iter_mut().enumerate() {
            *e = LinExpr::var(prog.new_var(&format!("Y[{i},{j}]")));
        }
    }
    let mu = prog.new_var("mu");
    let to_aff = |m: &[Vec<LinExpr>]| {
        let mut out = AffineMatrix::zeros(nvars, m.len(), m.first().map(|r| r.len()).unwrap_or(0));
        for (i, row) in m.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                out.set(i, j, AffinePoly::from_linexpr(nvars, e.clone()));
            }
        }
        out
    };
    let wa = to_aff(&wd);
    let ya = to_aff(&y);
    let cst = |m: &DMatrix<f64>| PolyMatrix::from_dmatrix(nvars, m);
    let aw = wa.mul_poly_left(&a)?;
    let by = ya.mul_poly_left(&cst(&sp.b))?;
    let tl = aw.add(&aw.transpose())?.add(&by)?.add(&by.transpose())?;
    let cwdy = wa.mul_poly_left(&cst(&sp.c))?.add(&ya.mul_poly_left(&cst(&sp.dmat))?)?;
    let ea = AffineMatrix::from_polymatrix(&cst(&sp.e));
    let neg_alpha = |n: usize| AffineMatrix::from_polymatrix(&cst(&(DMatrix::identity(n, n) * -target_alpha)));
    let z = |r: usize, c: usize| AffineMatrix::zeros(nvars, r, c);
    let lmi = AffineMatrix::from_blocks(&[
        vec![&tl, &ea, &cwdy.transpose()],
        vec![&ea.transpose(), &neg_alpha(nd), &z(nd, ne)],
        vec![&cwdy, &z(ne, nd), &neg_alpha(ne)],
    ])?;
    add_pmi(&mut prog, &lmi.scale(-1.0), &sp.region, &PmiOptions { mult_degree: cfg.mult_degree, eps: cfg.eps_lmi })?;
    let mut wfloor = wd.clone();
    for (i, row) in wfloor.iter_mut().enumerate() {
        row[i].constant -= 1e-2;
    }
    prog.add_lmi(&wfloor);
    let dim = nu + nx;
    let mut bound = vec![vec![LinExpr::zero(); dim]; dim];
    for i in 0..nu {
        bound[i][i] = LinExpr::var(mu);
        for j in 0..nx {
            bound[i][nu + j] = y[i][j].clone();
            bound[nu + j][i] = y[i][j].clone();
        }
    }
    for i in 0..nx {
        for j in 0..nx {
            bound[nu + i][nu + j] = wd[i][j].clone();
        }
    }
    prog.add_lmi(&bound);
    prog.minimize(LinExpr::var(mu));
    let sol = prog.solve(&cfg.solver)?;
    if sol.status != SdpStatus::Optimal {
        return Err(AnalysisError::Infeasible { status: sol.status, diagnostics: sol.diagnostics });
    }
    let w = DMatrix::from_fn(nx, nx, |i, j| wd[i][j].eval(&sol.x));
    let yv = DMatrix::from_fn(nu, nx, |i, j| y[i][j].eval(&sol.x));
    let winv = w.clone().try_inverse().ok_or(LinalgError::Singular("synthesized W"))?;
    Ok(Synthesis { k: yv * winv, w })
}

/// Differential system of a constant LTI plant ẋ = Ax + Bd, e = Cx + Dd with
/// indeterminates (x, d).
pub fn lti_diff_system(g: &StateSpace) -> DiffSystem {
    let (n, m, p) = (g.n_states(), g.n_inputs(), g.n_outputs());
    let nvars = n + m;
    let cst = |mat: &DMatrix<f64>| PolyMatrix::from_dmatrix(nvars, mat);
    let drift = (0..n)
        .map(|i| {
            let mut f = Polynomial::zero(nvars);
            for j in 0..n {
                f.add_term(Monomial::var(nvars, j), g.a()[(i, j)]);
            }
            for j in 0..m {
                f.add_term(Monomial::var(nvars, n + j), g.b()[(i, j)]);
            }
            Some(f)
        })
        .collect();
    DiffSystem {
        nvars,
        x_vars: (0..n).collect(),
        w_vars: vec![],
        d_vars: (n..n + m).collect(),
        drift,
        a_x: cst(g.a()),
        b_xw: PolyMatrix::zeros(nvars, n, 0),
        b_xd: cst(g.b()),
        c_v: PolyMatrix::zeros(nvars, 0, n),
        d_vw: PolyMatrix::zeros(nvars, 0, 0),
        d_vd: PolyMatrix::zeros(nvars, 0, m),
        c_e: cst(g.c()),
        d_ew: PolyMatrix::zeros(nvars, p, 0),
        d_ed: cst(g.d()),
    }
}

/// Names x1.., d1.. for [`lti_diff_system`].
pub fn lti_var_names(g: &StateSpace) -> Vec<String> {
    (0..g.n_states()).map(|i| format!("x{}", i + 1)).chain((0..g.n_inputs()).map(|i| format!("d{}", i + 1))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn first_order() -> StateSpace {
        StateSpace::new(DMatrix::from_element(1, 1, -1.0), DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0), DMatrix::zeros(1, 1)).unwrap()
    }

    fn certify(g: &StateSpace) -> (DiffSystem, Certificate) {
        let ds = lti_diff_system(g);
        let names = lti_var_names(g);
        let region = Region::everywhere();
        let prob = GainProblem { ds: &ds, ms: None, region: &region, var_names: &names, multiplier_id: "none" };
        let cert = min_gain(&prob, &GainConfig::default()).unwrap();
        (ds, cert)
    }

    #[test]
    fn assembled_lmi_for_first_order_lag() {
        let g = first_order();
        let ds = lti_diff_system(&g);
        let ext = extended_system(&ds, None).unwrap();
        let p = PolyMatrix::from_dmatrix(2, &DMatrix::from_element(1, 1, 0.7));
        let l = lmi_value(&ds, &ext, None, &p, &[], 2.5, &[0.0, 0.0]).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[-2.0 * 0.7 + 1.0, 0.7, 0.7, -2.5]);
        assert!((l - expect).amax() < 1e-14);

        let mut prog = SosProgram::new();
        let parts = assemble_lmi(&mut prog, &ds, &ext, None, 0).unwrap();
        assert_eq!((parts.lmi.rows(), parts.lmi.cols()), (2, 2));
        let mut x = vec![0.0; prog.n_decisions()];
        x[parts.gamma] = 2.5;
        x[0] = 0.7;
        let num = parts.lmi.eval_decisions(&x).eval(&[0.0, 0.0]).unwrap();
        assert!((num - DMatrix::from_row_slice(2, 2, &[-0.4, 0.7, 0.7, -2.5])).amax() < 1e-14);
    }

    #[test]
    fn first_order_gain_is_one() {
        let (ds, cert) = certify(&first_order());
        assert!((cert.alpha - 1.0).abs() < 1e-3, "{}", cert.alpha);
        let rep = verify_certificate(&cert, &ds, None, 50, 3).unwrap();
        assert!(rep.all_ok(), "{rep:?}");
        let mut bad = cert.clone();
        bad.gamma /= 2.0;
        let rep = verify_certificate(&bad, &ds, None, 50, 3).unwrap();
        assert!(!rep.lmi_ok);
    }

    #[test]
    fn static_feedthrough_gain() {
        let g = StateSpace::static_gain(DMatrix::from_element(1, 1, 1.0));
        let (_, cert) = certify(&g);
        assert!(cert.gamma > 1.0 && (cert.alpha - 1.0).abs() < 1e-3, "{}", cert.alpha);
    }

    #[test]
    fn no_output_gives_tiny_gain() {
        let g = StateSpace::new(DMatrix::from_element(1, 1, -1.0), DMatrix::from_element(1, 1, 1.0), DMatrix::zeros(1, 1), DMatrix::zeros(1, 1)).unwrap();
        let (_, cert) = certify(&g);
        assert!(cert.alpha < 1e-2, "{}", cert.alpha);
    }

    #[test]
    fn path_energy_examples() {
        let i2 = |_: &DVector<f64>| DMatrix::identity(2, 2);
        let a = DVector::from_vec(vec![0.0, 0.0]);
        let b = DVector::from_vec(vec![3.0, 4.0]);
        assert!((path_energy(&segment(&a, &b, 32), i2).unwrap() - 25.0).abs() < 1e-10);
        assert!(path_energy(&segment(&a, &a, 32), i2).unwrap().abs() < 1e-14);
        let u = DVector::from_vec(vec![1.0, 0.0]);
        let four = |_: &DVector<f64>| DMatrix::identity(2, 2) * 4.0;
        assert!((path_energy(&segment(&a, &u, 32), four).unwrap() - 4.0).abs() < 1e-10);
        let indefinite = |_: &DVector<f64>| DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(path_energy(&segment(&a, &u, 4), indefinite), Err(AnalysisError::IndefiniteMetric(0))));
    }

    #[test]
    fn certificate_json_roundtrip() {
        let (_, cert) = certify(&first_order());
        let s = serde_json::to_string(&cert).unwrap();
        let back: Certificate = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cert);
    }

    #[test]
    fn double_integrator_synthesis() {
        let names = ["x1", "x2", "d"];
        let reg = crate::poly::VarRegistry::new(&names).unwrap();
        let sp = SynthesisProblem {
            nvars: 3,
            x: vec![0, 1],
            f: vec![Polynomial::parse("x2", &reg).unwrap(), Polynomial::zero(3)],
            b: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            e: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            c: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            dmat: DMatrix::from_element(1, 1, 0.1),
            region: Region::everywhere(),
        };
        let syn = ccm_synthesize(&sp, 2.0, &GainConfig::default()).unwrap();
        let acl = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]) + &sp.b * &syn.k;
        assert!(linalg::is_hurwitz(&acl).unwrap());
        let g = StateSpace::new(acl, sp.e.clone(), &sp.c + &sp.dmat * &syn.k, DMatrix::zeros(1, 1)).unwrap();
        let (_, cert) = certify(&g);
        assert!(cert.alpha <= 2.0 + 1e-6, "{}", cert.alpha);
    }
}
