//! Semidefinite programming by a primal-dual interior point method on the
//! homogeneous self-dual embedding.
//!
//! Problems are stated over decision variables x as
//!
//! ```text
//! minimize    c'x
//! subject to  a_i'x = b_i             (equalities)
//!             g_j'x ≥ h_j             (scalar inequalities)
//!             F_k(x) = F_k0 + Σ x_v F_kv ⪰ 0   (PSD blocks)
//! ```
//!
//! Internally this becomes Ax + s = b, s ∈ {0} × ℝ₊ × S₊ with symmetric
//! matrices stored as scaled upper triangles (off-diagonals times √2).
//! Nesterov–Todd scaling and a Mehrotra predictor-corrector are used.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConicError {
    #[error("problem has no variables or no constraints")]
    Empty,
    #[error("variable index {index} out of range ({n} variables)")]
    VarOutOfRange { index: usize, n: usize },
    #[error("PSD block {block}: entry ({i}, {j}) outside a {dim}x{dim} block")]
    BadPsdEntry { block: usize, i: usize, j: usize, dim: usize },
    #[error("non-finite problem data in {0}")]
    NonFinite(&'static str),
    #[error("malformed problem dump at line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type ConicResult<T> = std::result::Result<T, ConicError>;

/// Affine expression constant + Σ coeff·x_var.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinExpr {
    pub constant: f64,
    pub terms: BTreeMap<usize, f64>,
}

impl LinExpr {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self { constant: c, terms: BTreeMap::new() }
    }

    pub fn var(v: usize) -> Self {
        Self::term(v, 1.0)
    }

    pub fn term(v: usize, c: f64) -> Self {
        let mut terms = BTreeMap::new();
        if c != 0.0 {
            terms.insert(v, c);
        }
        Self { constant: 0.0, terms }
    }

    pub fn is_zero(&self) -> bool {
        self.constant == 0.0 && self.terms.is_empty()
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn add_term(&mut self, v: usize, c: f64) {
        if c == 0.0 {
            return;
        }
        let e = self.terms.entry(v).or_insert(0.0);
        *e += c;
        if *e == 0.0 {
            self.terms.remove(&v);
        }
    }

    pub fn add_scaled(&mut self, other: &LinExpr, s: f64) {
        if s == 0.0 {
            return;
        }
        self.constant += s * other.constant;
        for (&v, &c) in &other.terms {
            self.add_term(v, s * c);
        }
    }

    pub fn scaled(&self, s: f64) -> LinExpr {
        let mut out = LinExpr::zero();
        out.add_scaled(self, s);
        out
    }

    pub fn plus(&self, other: &LinExpr) -> LinExpr {
        let mut out = self.clone();
        out.add_scaled(other, 1.0);
        out
    }

    pub fn minus(&self, other: &LinExpr) -> LinExpr {
        let mut out = self.clone();
        out.add_scaled(other, -1.0);
        out
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|(&v, &c)| c * x[v]).sum::<f64>()
    }

    pub fn max_var(&self) -> Option<usize> {
        self.terms.keys().next_back().copied()
    }
}

/// F(x) ⪰ 0 with F given by its upper-triangular entries (i ≤ j).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdBlock {
    pub dim: usize,
    pub entries: BTreeMap<(usize, usize), LinExpr>,
}

impl PsdBlock {
    pub fn new(dim: usize) -> Self {
        Self { dim, entries: BTreeMap::new() }
    }

    /// Sets entry (i, j) (and implicitly (j, i)).
    pub fn set(&mut self, i: usize, j: usize, e: LinExpr) {
        let key = if i <= j { (i, j) } else { (j, i) };
        if e.is_zero() {
            self.entries.remove(&key);
        } else {
            self.entries.insert(key, e);
        }
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (&(i, j), e) in &self.entries {
            let v = e.eval(x);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        m
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SdpProblem {
    pub n: usize,
    pub objective: LinExpr,
    /// expr = 0
    pub eqs: Vec<LinExpr>,
    /// expr ≥ 0
    pub ineqs: Vec<LinExpr>,
    pub psd: Vec<PsdBlock>,
}

impl SdpProblem {
    pub fn validate(&self) -> ConicResult<()> {
        let check = |e: &LinExpr, what: &'static str| -> ConicResult<()> {
            if let Some(v) = e.max_var() {
                if v >= self.n {
                    return Err(ConicError::VarOutOfRange { index: v, n: self.n });
                }
            }
            if !e.constant.is_finite() || e.terms.values().any(|c| !c.is_finite()) {
                return Err(ConicError::NonFinite(what));
            }
            Ok(())
        };
        check(&self.objective, "objective")?;
        for e in &self.eqs {
            check(e, "equalities")?;
        }
        for e in &self.ineqs {
            check(e, "inequalities")?;
        }
        for (k, b) in self.psd.iter().enumerate() {
            for (&(i, j), e) in &b.entries {
                if i >= b.dim || j >= b.dim {
                    return Err(ConicError::BadPsdEntry { block: k, i, j, dim: b.dim });
                }
                check(e, "PSD blocks")?;
            }
        }
        Ok(())
    }

    /// Sparse text dump: header, objective, equalities, inequalities and
    /// PSD entries as triplets.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "sdp {} {} {} {}", self.n, self.eqs.len(), self.ineqs.len(), self.psd.len());
        let _ = writeln!(out, "blocks {}", self.psd.iter().map(|b| b.dim.to_string()).collect::<Vec<_>>().join(" "));
        let expr = |out: &mut String, tag: &str, idx: usize, e: &LinExpr| {
            let _ = writeln!(out, "{tag} {idx} const {:e}", e.constant);
            for (v, c) in &e.terms {
                let _ = writeln!(out, "{tag} {idx} {v} {c:e}");
            }
        };
        expr(&mut out, "obj", 0, &self.objective);
        for (k, e) in self.eqs.iter().enumerate() {
            expr(&mut out, "eq", k, e);
        }
        for (k, e) in self.ineqs.iter().enumerate() {
            expr(&mut out, "ge", k, e);
        }
        for (k, b) in self.psd.iter().enumerate() {
            for (&(i, j), e) in &b.entries {
                let _ = writeln!(out, "psd {k} {i} {j} const {:e}", e.constant);
                for (v, c) in &e.terms {
                    let _ = writeln!(out, "psd {k} {i} {j} {v} {c:e}");
                }
            }
        }
        out
    }

    pub fn parse_dump(src: &str) -> ConicResult<Self> {
        let mut p = SdpProblem::default();
        let err = |line: usize, message: &str| ConicError::Parse { line: line + 1, message: message.to_string() };
        for (ln, line) in src.lines().enumerate() {
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.is_empty() {
                continue;
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(ln, &format!("bad number {s:?}")));
            let idx = |s: &str| s.parse::<usize>().map_err(|_| err(ln, &format!("bad index {s:?}")));
            let apply = |e: &mut LinExpr, t: &[&str]| -> ConicResult<()> {
                match t {
                    ["const", c] => e.constant = num(c)?,
                    [v, c] => e.add_term(idx(v)?, num(c)?),
                    _ => return Err(err(ln, "expected `const <value>` or `<var> <coeff>`")),
                }
                Ok(())
            };
            match tok[0] {
                "sdp" if tok.len() == 5 => {
                    p.n = idx(tok[1])?;
                    p.eqs = vec![LinExpr::zero(); idx(tok[2])?];
                    p.ineqs = vec![LinExpr::zero(); idx(tok[3])?];
                    p.psd = Vec::with_capacity(idx(tok[4])?);
                }
                "blocks" => {
                    for t in &tok[1..] {
                        p.psd.push(PsdBlock::new(idx(t)?));
                    }
                }
                "obj" if tok.len() >= 3 => apply(&mut p.objective, &tok[2..])?,
                "eq" | "ge" if tok.len() >= 3 => {
                    let k = idx(tok[1])?;
                    let list = if tok[0] == "eq" { &mut p.eqs } else { &mut p.ineqs };
                    let e = list.get_mut(k).ok_or_else(|| err(ln, "row index out of range"))?;
                    apply(e, &tok[2..])?;
                }
                "psd" if tok.len() >= 5 => {
                    let (k, i, j) = (idx(tok[1])?, idx(tok[2])?, idx(tok[3])?);
                    let b = p.psd.get_mut(k).ok_or_else(|| err(ln, "block index out of range"))?;
                    let e = b.entries.entry((i.min(j), i.max(j))).or_default();
                    apply(e, &tok[4..])?;
                }
                _ => return Err(err(ln, "unrecognized line")),
            }
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdpStatus {
    Optimal,
    PrimalInfeasible,
    DualInfeasible,
    MaxIter,
}

impl std::fmt::Display for SdpStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SdpStatus::Optimal => "optimal",
            SdpStatus::PrimalInfeasible => "primal_infeasible",
            SdpStatus::DualInfeasible => "dual_infeasible",
            SdpStatus::MaxIter => "max_iter",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdpOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub equilibrate: bool,
}

impl Default for SdpOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 200, equilibrate: true }
    }
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SdpStatus,
    /// Decision variables (for infeasible statuses: the last iterate, or the
    /// improving ray when the problem is dual infeasible).
    pub x: Vec<f64>,
    /// Multipliers of the equalities.
    pub y_eq: Vec<f64>,
    /// Multipliers of the inequalities (≥ 0).
    pub z_ineq: Vec<f64>,
    /// F_k(x) at the returned point.
    pub psd_primal: Vec<DMatrix<f64>>,
    /// Dual matrices of the PSD blocks.
    pub psd_dual: Vec<DMatrix<f64>>,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub gap: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    /// Normalized violation of the returned infeasibility certificate.
    pub certificate: Option<f64>,
    /// Complementarity measure per iteration.
    pub mu_history: Vec<f64>,
    pub diagnostics: String,
}

// ---------------------------------------------------------------- cones

#[derive(Debug, Clone, Copy)]
enum Cone {
    Zero { off: usize, len: usize },
    Nonneg { off: usize, len: usize },
    Psd { off: usize, dim: usize },
}

fn svec_len(p: usize) -> usize {
    p * (p + 1) / 2
}

fn svec_index(i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    j * (j + 1) / 2 + i
}

fn smat(v: &[f64], p: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(p, p);
    let r = std::f64::consts::FRAC_1_SQRT_2;
    for j in 0..p {
        for i in 0..=j {
            let x = v[svec_index(i, j)];
            if i == j {
                m[(i, i)] = x;
            } else {
                m[(i, j)] = x * r;
                m[(j, i)] = x * r;
            }
        }
    }
    m
}

fn svec_into(m: &DMatrix<f64>, out: &mut [f64]) {
    let p = m.nrows();
    let s = std::f64::consts::SQRT_2;
    for j in 0..p {
        for i in 0..=j {
            out[svec_index(i, j)] = if i == j { m[(i, i)] } else { s * 0.5 * (m[(i, j)] + m[(j, i)]) };
        }
    }
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    let s = 0.5 * (m + m.transpose());
    s.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

struct PsdScaling {
    r: DMatrix<f64>,
    rinv: DMatrix<f64>,
    lambda: DVector<f64>,
}

enum ConeScaling {
    Zero,
    Nonneg { w: Vec<f64>, lambda: Vec<f64> },
    Psd(PsdScaling),
}

struct Cones {
    list: Vec<Cone>,
    m: usize,
    degree: usize,
}

impl Cones {
    fn unit(&self) -> Vec<f64> {
        let mut e = vec![0.0; self.m];
        for c in &self.list {
            match *c {
                Cone::Zero { .. } => {}
                Cone::Nonneg { off, len } => e[off..off + len].iter_mut().for_each(|v| *v = 1.0),
                Cone::Psd { off, dim } => {
                    for i in 0..dim {
                        e[off + svec_index(i, i)] = 1.0;
                    }
                }
            }
        }
        e
    }

    /// s'z over the non-zero cones.
    fn dot(&self, s: &[f64], z: &[f64]) -> f64 {
        let mut acc = 0.0;
        for c in &self.list {
            let (off, len) = match *c {
                Cone::Zero { .. } => continue,
                Cone::Nonneg { off, len } => (off, len),
                Cone::Psd { off, dim } => (off, svec_len(dim)),
            };
            acc += s[off..off + len].iter().zip(&z[off..off + len]).map(|(a, b)| a * b).sum::<f64>();
        }
        acc
    }

    /// Shifts v into the interior: v + (1 + max(0, −min_eig)) e if needed.
    fn shift_interior(&self, v: &mut [f64]) {
        for c in &self.list {
            match *c {
                Cone::Zero { off, len } => v[off..off + len].iter_mut().for_each(|x| *x = 0.0),
                Cone::Nonneg { off, len } => {
                    let mn = v[off..off + len].iter().copied().fold(f64::INFINITY, f64::min);
                    let shift = if mn < 1e-4 { 1.0 - mn } else { 0.0 };
                    v[off..off + len].iter_mut().for_each(|x| *x += shift);
                }
                Cone::Psd { off, dim } => {
                    let mn = min_eig(&smat(&v[off..off + svec_len(dim)], dim));
                    let shift = if mn < 1e-4 { 1.0 - mn } else { 0.0 };
                    for i in 0..dim {
                        v[off + svec_index(i, i)] += shift;
                    }
                }
            }
        }
    }

    fn scaling(&self, s: &[f64], z: &[f64]) -> Option<Vec<ConeScaling>> {
        let mut out = Vec::with_capacity(self.list.len());
        for c in &self.list {
            match *c {
                Cone::Zero { .. } => out.push(ConeScaling::Zero),
                Cone::Nonneg { off, len } => {
                    let mut w = Vec::with_capacity(len);
                    let mut lambda = Vec::with_capacity(len);
                    for k in off..off + len {
                        if !(s[k] > 0.0 && z[k] > 0.0) {
                            return None;
                        }
                        w.push((s[k] / z[k]).sqrt());
                        lambda.push((s[k] * z[k]).sqrt());
                    }
                    out.push(ConeScaling::Nonneg { w, lambda });
                }
                Cone::Psd { off, dim } => {
                    let len = svec_len(dim);
                    let sm = smat(&s[off..off + len], dim);
                    let zm = smat(&z[off..off + len], dim);
                    let ls = sm.cholesky()?.l();
                    let lz = zm.cholesky()?.l();
                    let svd = (lz.transpose() * &ls).svd(true, true);
                    let v = svd.v_t?.transpose();
                    let lam = svd.singular_values;
                    if lam.iter().any(|&l| !(l > 0.0)) {
                        return None;
                    }
                    let inv_sqrt = DMatrix::from_diagonal(&lam.map(|l| 1.0 / l.sqrt()));
                    let sqrt = DMatrix::from_diagonal(&lam.map(|l| l.sqrt()));
                    let r = &ls * &v * inv_sqrt;
                    let ls_inv = ls.clone().try_inverse()?;
                    let rinv = sqrt * v.transpose() * ls_inv;
                    out.push(ConeScaling::Psd(PsdScaling { r, rinv, lambda: lam }));
                }
            }
        }
        Some(out)
    }

    /// Dense H = W'W block for the KKT (zero for the zero cone).
    fn fill_h(&self, sc: &[ConeScaling], k: &mut DMatrix<f64>, base: usize) {
        for (c, s) in self.list.iter().zip(sc) {
            match (*c, s) {
                (Cone::Nonneg { off, .. }, ConeScaling::Nonneg { w, .. }) => {
                    for (i, wi) in w.iter().enumerate() {
                        k[(base + off + i, base + off + i)] -= wi * wi;
                    }
                }
                (Cone::Psd { off, dim }, ConeScaling::Psd(ps)) => {
                    let t = &ps.r * ps.r.transpose();
                    let s2 = std::f64::consts::SQRT_2;
                    for l in 0..dim {
                        for kk in 0..=l {
                            let b = svec_index(kk, l);
                            let tb = if kk == l { 2.0 } else { s2 };
                            for j in 0..dim {
                                for i in 0..=j {
                                    let a = svec_index(i, j);
                                    let sa = if i == j { 1.0 } else { s2 };
                                    let v = sa / tb * (t[(i, kk)] * t[(l, j)] + t[(i, l)] * t[(kk, j)]);
                                    k[(base + off + a, base + off + b)] -= v;
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
    }

    /// Scaled iterate λ as a cone vector.
    fn lambda_vec(&self, sc: &[ConeScaling]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for (c, s) in self.list.iter().zip(sc) {
            match (*c, s) {
                (Cone::Nonneg { off, .. }, ConeScaling::Nonneg { lambda, .. }) => out[off..off + lambda.len()].copy_from_slice(lambda),
                (Cone::Psd { off, dim }, ConeScaling::Psd(ps)) => {
                    for i in 0..dim {
                        out[off + svec_index(i, i)] = ps.lambda[i];
                    }
                }
                _ => {}
            }
        }
        out
    }

    fn apply_w(&self, sc: &[ConeScaling], z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for (c, s) in self.list.iter().zip(sc) {
            match (*c, s) {
                (Cone::Nonneg { off, len }, ConeScaling::Nonneg { w, .. }) => {
                    for i in 0..len {
                        out[off + i] = w[i] * z[off + i];
                    }
                }
                (Cone::Psd { off, dim }, ConeScaling::Psd(ps)) => {
                    let len = svec_len(dim);
                    let m = ps.r.transpose() * smat(&z[off..off + len], dim) * &ps.r;
                    svec_into(&m, &mut out[off..off + len]);
                }
                _ => {}
            }
        }
        out
    }

    fn apply_winv_t(&self, sc: &[ConeScaling], s: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for (c, scl) in self.list.iter().zip(sc) {
            match (*c, scl) {
                (Cone::Nonneg { off, len }, ConeScaling::Nonneg { w, .. }) => {
                    for i in 0..len {
                        out[off + i] = s[off + i] / w[i];
                    }
                }
                (Cone::Psd { off, dim }, ConeScaling::Psd(ps)) => {
                    let len = svec_len(dim);
                    let m = &ps.rinv * smat(&s[off..off + len], dim) * ps.rinv.transpose();
                    svec_into(&m, &mut out[off..off + len]);
                }
                _ => {}
            }
        }
        out
    }

    fn apply_wt(&self, sc: &[ConeScaling], x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for (c, s) in self.list.iter().zip(sc) {
            match (*c, s) {
                (Cone::Nonneg { off, len }, ConeScaling::Nonneg { w, .. }) => {
                    for i in 0..len {
                        out[off + i] = w[i] * x[off + i];
                    }
                }
                (Cone::Psd { off, dim }, ConeScaling::Psd(ps)) => {
                    let len = svec_len(dim);
                    let m = &ps.r * smat(&x[off..off + len], dim) * ps.r.transpose();
                    svec_into(&m, &mut out[off..off + len]);
                }
                _ => {}
            }
        }
        out
    }

    /// Jordan product a∘b.
    fn jordan(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for c in &self.list {
            match *c {
                Cone::Zero { .. } => {}
                Cone::Nonneg { off, len } => {
                    for i in off..off + len {
                        out[i] = a[i] * b[i];
                    }
                }
                Cone::Psd { off, dim } => {
                    let len = svec_len(dim);
                    let am = smat(&a[off..off + len], dim);
                    let bm = smat(&b[off..off + len], dim);
                    let p = &am * &bm;
                    let m = 0.5 * (&p + p.transpose());
                    svec_into(&m, &mut out[off..off + len]);
                }
            }
        }
        out
    }

    /// Solves λ∘u = d for u.
    fn inv_jordan(&self, sc: &[ConeScaling], d: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for (c, s) in self.list.iter().zip(sc) {
            match (*c, s) {
                (Cone::Nonneg { off, len }, ConeScaling::Nonneg { lambda, .. }) => {
                    for i in 0..len {
                        out[off + i] = d[off + i] / lambda[i];
                    }
                }
                (Cone::Psd { off, dim }, ConeScaling::Psd(ps)) => {
                    let len = svec_len(dim);
                    let dm = smat(&d[off..off + len], dim);
                    let um = DMatrix::from_fn(dim, dim, |i, j| 2.0 * dm[(i, j)] / (ps.lambda[i] + ps.lambda[j]));
                    svec_into(&um, &mut out[off..off + len]);
                }
                _ => {}
            }
        }
        out
    }

    /// Largest α ≤ cap with v + αdv in the cone.
    fn step_limit(&self, v: &[f64], dv: &[f64], cap: f64) -> f64 {
        let mut alpha = cap;
        for c in &self.list {
            match *c {
                Cone::Zero { .. } => {}
                Cone::Nonneg { off, len } => {
                    for i in off..off + len {
                        if dv[i] < 0.0 {
                            alpha = alpha.min(-v[i] / dv[i]);
                        }
                    }
                }
                Cone::Psd { off, dim } => {
                    let len = svec_len(dim);
                    let vm = smat(&v[off..off + len], dim);
                    let dm = smat(&dv[off..off + len], dim);
                    let Some(ch) = vm.cholesky() else {
                        return 0.0;
                    };
                    let l = ch.l();
                    let Some(linv) = l.try_inverse() else {
                        return 0.0;
                    };
                    let t = &linv * dm * linv.transpose();
                    let mn = min_eig(&t);
                    if mn < 0.0 {
                        alpha = alpha.min(-1.0 / mn);
                    }
                }
            }
        }
        alpha.max(0.0)
    }
}

// ---------------------------------------------------------------- solver

struct Standard {
    a: DMatrix<f64>,
    b: DVector<f64>,
    q: DVector<f64>,
    cones: Cones,
    q0: f64,
}

fn to_standard(p: &SdpProblem) -> Standard {
    let n = p.n;
    let mut rows: Vec<(LinExpr, f64)> = Vec::new(); // (coefficients of Ax, b)
    let mut list = Vec::new();
    let mut off = 0;
    // a'x + c = 0  →  a'x + s = −c with s ∈ {0}
    if !p.eqs.is_empty() {
        for e in &p.eqs {
            rows.push((e.clone(), -e.constant));
        }
        list.push(Cone::Zero { off, len: p.eqs.len() });
        off += p.eqs.len();
    }
    // g'x + h ≥ 0  →  −g'x + s = h
    if !p.ineqs.is_empty() {
        for e in &p.ineqs {
            rows.push((e.scaled(-1.0), e.constant));
        }
        list.push(Cone::Nonneg { off, len: p.ineqs.len() });
        off += p.ineqs.len();
    }
    let mut degree = p.ineqs.len();
    let s2 = std::f64::consts::SQRT_2;
    for b in &p.psd {
        let len = svec_len(b.dim);
        let mut block_rows = vec![(LinExpr::zero(), 0.0); len];
        for (&(i, j), e) in &b.entries {
            let scale = if i == j { 1.0 } else { s2 };
            block_rows[svec_index(i, j)] = (e.scaled(-scale), scale * e.constant);
        }
        rows.extend(block_rows);
        list.push(Cone::Psd { off, dim: b.dim });
        off += len;
        degree += b.dim;
    }
    let m = off;
    let mut a = DMatrix::zeros(m, n);
    let mut bv = DVector::zeros(m);
    for (r, (e, rhs)) in rows.iter().enumerate() {
        for (&v, &c) in &e.terms {
            a[(r, v)] = c;
        }
        bv[r] = *rhs;
    }
    let q = DVector::from_fn(n, |i, _| p.objective.terms.get(&i).copied().unwrap_or(0.0));
    Standard { a, b: bv, q, cones: Cones { list, m, degree }, q0: p.objective.constant }
}

/// Ruiz equilibration: returns (row scaling d, column scaling e, cost scale c).
fn equilibrate(std: &mut Standard) -> (DVector<f64>, DVector<f64>, f64) {
    let (m, n) = std.a.shape();
    let mut d = DVector::from_element(m, 1.0);
    let mut e = DVector::from_element(n, 1.0);
    for _ in 0..15 {
        let mut dd = DVector::from_element(m, 1.0);
        let mut ee = DVector::from_element(n, 1.0);
        for j in 0..n {
            let nrm = std.a.column(j).amax();
            if nrm > 0.0 {
                ee[j] = 1.0 / nrm.sqrt();
            }
        }
        for i in 0..m {
            let nrm = std.a.row(i).amax();
            if nrm > 0.0 {
                dd[i] = 1.0 / nrm.sqrt();
            }
        }
        // one scalar per PSD block keeps the cone invariant
        for c in &std.cones.list {
            if let Cone::Psd { off, dim } = *c {
                let len = svec_len(dim);
                let mx = (off..off + len).map(|i| std.a.row(i).amax()).fold(0.0, f64::max);
                let v = if mx > 0.0 { 1.0 / mx.sqrt() } else { 1.0 };
                for i in off..off + len {
                    dd[i] = v;
                }
            }
        }
        for i in 0..m {
            for j in 0..n {
                std.a[(i, j)] *= dd[i] * ee[j];
            }
        }
        d.component_mul_assign(&dd);
        e.component_mul_assign(&ee);
    }
    for i in 0..m {
        std.b[i] *= d[i];
    }
    for j in 0..n {
        std.q[j] *= e[j];
    }
    let qn = std.q.amax();
    let c = if qn > 0.0 { 1.0 / qn.max(1e-6) } else { 1.0 };
    let c = c.clamp(1e-4, 1e4);
    std.q *= c;
    (d, e, c)
}

struct Kkt {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    k0: DMatrix<f64>,
}

impl Kkt {
    fn new(a: &DMatrix<f64>, cones: &Cones, sc: &[ConeScaling], reg: f64) -> Option<Self> {
        let (m, n) = a.shape();
        let mut k = DMatrix::zeros(n + m, n + m);
        k.view_mut((n, 0), (m, n)).copy_from(a);
        k.view_mut((0, n), (n, m)).copy_from(&a.transpose());
        cones.fill_h(sc, &mut k, n);
        let k0 = k.clone();
        for i in 0..n {
            k[(i, i)] += reg;
        }
        for i in n..n + m {
            k[(i, i)] -= reg;
        }
        let lu = k.lu();
        if !lu.is_invertible() {
            return None;
        }
        Some(Self { lu, k0 })
    }

    fn solve(&self, rhs: &DVector<f64>) -> Option<DVector<f64>> {
        let mut x = self.lu.solve(rhs)?;
        for _ in 0..5 {
            let r = rhs - &self.k0 * &x;
            if r.amax() <= 1e-14 * (1.0 + rhs.amax()) {
                break;
            }
            let dx = self.lu.solve(&r)?;
            x += dx;
        }
        if x.iter().all(|v| v.is_finite()) {
            Some(x)
        } else {
            None
        }
    }
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solves the SDP.
pub fn solve_sdp(p: &SdpProblem, opts: &SdpOptions) -> ConicResult<SdpSolution> {
    p.validate()?;
    if p.n == 0 || (p.eqs.is_empty() && p.ineqs.is_empty() && p.psd.is_empty()) {
        return Err(ConicError::Empty);
    }
    let orig = to_standard(p);
    let mut st = to_standard(p);
    let (dscale, escale, cscale) = if opts.equilibrate {
        equilibrate(&mut st)
    } else {
        (DVector::from_element(st.cones.m, 1.0), DVector::from_element(p.n, 1.0), 1.0)
    };
    let (m, n) = st.a.shape();
    let cones = &st.cones;
    let nu = cones.degree as f64;

    // start: least-squares primal and dual points shifted into the cone
    let unit_sc = cones.scaling(&cones.unit(), &cones.unit()).expect("unit point is interior");
    let kkt0 = Kkt::new(&st.a, cones, &unit_sc, 1e-8);
    let (mut x, mut s, mut z) = match kkt0 {
        Some(k) => {
            let mut rhs = DVector::zeros(n + m);
            rhs.rows_mut(n, m).copy_from(&st.b);
            let sol = k.solve(&rhs).unwrap_or_else(|| DVector::zeros(n + m));
            let x: Vec<f64> = sol.rows(0, n).iter().copied().collect();
            let mut s: Vec<f64> = sol.rows(n, m).iter().map(|v| -v).collect();
            let mut rhs = DVector::zeros(n + m);
            rhs.rows_mut(0, n).copy_from(&(-&st.q));
            let sol = k.solve(&rhs).unwrap_or_else(|| DVector::zeros(n + m));
            let mut z: Vec<f64> = sol.rows(n, m).iter().copied().collect();
            cones.shift_interior(&mut s);
            cones.shift_interior(&mut z);
            (x, s, z)
        }
        None => (vec![0.0; n], cones.unit(), cones.unit()),
    };
    if s.iter().chain(&z).chain(&x).any(|v| !v.is_finite()) {
        x = vec![0.0; n];
        s = cones.unit();
        z = cones.unit();
    }
    let mut tau = 1.0;
    let mut kappa = 1.0;

    let a = &st.a;
    let at = a.transpose();

    let mut status = SdpStatus::MaxIter;
    let mut iterations = 0;
    let mut mu_history = Vec::new();
    let mut diagnostics = String::new();
    let mut certificate = None;
    let mut reg = 1e-9;

    // residual measures on the unscaled problem
    let unscaled = |x: &[f64], s: &[f64], z: &[f64], tau: f64| {
        let xo: Vec<f64> = (0..n).map(|j| escale[j] * x[j] / tau).collect();
        let so: Vec<f64> = (0..m).map(|i| s[i] / dscale[i] / tau).collect();
        let zo: Vec<f64> = (0..m).map(|i| dscale[i] * z[i] / cscale / tau).collect();
        (xo, so, zo)
    };
    let measures = |xo: &[f64], so: &[f64], zo: &[f64]| {
        let xv = DVector::from_column_slice(xo);
        let zv = DVector::from_column_slice(zo);
        let ax = &orig.a * &xv;
        let pres: f64 = (0..m).map(|i| (ax[i] + so[i] - orig.b[i]).abs()).fold(0.0, f64::max);
        let atz = orig.a.transpose() * &zv;
        let dres: f64 = (0..n).map(|j| (atz[j] + orig.q[j]).abs()).fold(0.0, f64::max);
        let pobj = orig.q.dot(&xv);
        let dobj = -orig.b.dot(&zv);
        let pscale = 1.0 + norm_inf(orig.b.as_slice()).max(norm_inf(ax.as_slice())).max(norm_inf(so));
        let dscale_ = 1.0 + norm_inf(orig.q.as_slice()).max(norm_inf(atz.as_slice()));
        (pres, dres, pobj, dobj, pscale, dscale_)
    };

    for it in 0..opts.max_iter {
        iterations = it;
        let mu = (cones.dot(&s, &z) + tau * kappa) / (nu + 1.0);
        mu_history.push(mu);

        // convergence on the unscaled problem
        let (xo, so, zo) = unscaled(&x, &s, &z, tau);
        let (pres, dres, pobj, dobj, ps, ds) = measures(&xo, &so, &zo);
        let gap = (pobj - dobj).abs();
        if pres <= opts.tol * ps && dres <= opts.tol * ds && gap <= opts.tol * (1.0 + pobj.abs().min(dobj.abs())) {
            status = SdpStatus::Optimal;
            break;
        }
        // infeasibility: rays in the unscaled space
        {
            let zr: Vec<f64> = (0..m).map(|i| dscale[i] * z[i]).collect();
            let xr: Vec<f64> = (0..n).map(|j| escale[j] * x[j]).collect();
            let sr: Vec<f64> = (0..m).map(|i| s[i] / dscale[i]).collect();
            let zv = DVector::from_column_slice(&zr);
            let xv = DVector::from_column_slice(&xr);
            let bz = orig.b.dot(&zv);
            let atz = norm_inf((orig.a.transpose() * &zv).as_slice());
            let znorm = norm_inf(&zr).max(1e-300);
            if bz < 0.0 && atz <= opts.tol * (-bz) && -bz / znorm > opts.tol && tau < kappa {
                status = SdpStatus::PrimalInfeasible;
                certificate = Some(-bz / znorm);
                x = xr.iter().map(|v| v / tau).collect();
                z = zr.iter().map(|v| v / (-bz)).collect();
                s = sr;
                break;
            }
            let qx = orig.q.dot(&xv);
            let axs: f64 = {
                let ax = &orig.a * &xv;
                (0..m).map(|i| (ax[i] + sr[i]).abs()).fold(0.0, f64::max)
            };
            let xnorm = norm_inf(&xr).max(1e-300);
            if qx < 0.0 && axs <= opts.tol * (-qx) && -qx / xnorm > opts.tol && tau < kappa {
                status = SdpStatus::DualInfeasible;
                certificate = Some(-qx / xnorm);
                x = xr.iter().map(|v| v / (-qx)).collect();
                s = sr.iter().map(|v| v / (-qx)).collect();
                z = zr;
                break;
            }
        }

        let Some(sc) = cones.scaling(&s, &z) else {
            diagnostics = format!("iterate left the cone interior at iteration {it}");
            break;
        };
        let lambda = cones.lambda_vec(&sc);

        // residuals
        let xv = DVector::from_column_slice(&x);
        let zv = DVector::from_column_slice(&z);
        let sv = DVector::from_column_slice(&s);
        let rx = &at * &zv + &st.q * tau;
        let rz = a * &xv + &sv - &st.b * tau;
        let rtau = st.q.dot(&xv) + st.b.dot(&zv) + kappa;

        let kkt = loop {
            match Kkt::new(a, cones, &sc, reg) {
                Some(k) => break Some(k),
                None if reg < 1e-4 => reg *= 100.0,
                None => break None,
            }
        };
        let Some(kkt) = kkt else {
            diagnostics = format!("KKT system singular at iteration {it}");
            break;
        };
        let mut rhs1 = DVector::zeros(n + m);
        rhs1.rows_mut(0, n).copy_from(&(-&st.q));
        rhs1.rows_mut(n, m).copy_from(&st.b);
        let Some(sol1) = kkt.solve(&rhs1) else {
            diagnostics = format!("KKT solve failed at iteration {it}");
            break;
        };
        let (x1, z1) = (sol1.rows(0, n).clone_owned(), sol1.rows(n, m).clone_owned());
        let denom = st.q.dot(&x1) + st.b.dot(&z1) - kappa / tau;

        // direction for given targets (d_x, d_z, d_tau, d_s, d_kappa)
        let direction = |dx: &DVector<f64>, dz: &DVector<f64>, dtau: f64, dsv: &[f64], dkappa: f64| -> Option<(DVector<f64>, Vec<f64>, DVector<f64>, f64, f64)> {
            let u = cones.inv_jordan(&sc, dsv);
            let wtu = cones.apply_wt(&sc, &u);
            let mut rhs = DVector::zeros(n + m);
            rhs.rows_mut(0, n).copy_from(&(-dx));
            for i in 0..m {
                rhs[n + i] = -dz[i] + wtu[i];
            }
            let sol2 = kkt.solve(&rhs)?;
            let (x2, z2) = (sol2.rows(0, n).clone_owned(), sol2.rows(n, m).clone_owned());
            let dt = (-dtau + dkappa / tau - st.q.dot(&x2) - st.b.dot(&z2)) / denom;
            let ddx = &x2 + &x1 * dt;
            let ddz = &z2 + &z1 * dt;
            // Δs = −W'(λ\d_s + W Δz)
            let wdz = cones.apply_w(&sc, ddz.as_slice());
            let inner: Vec<f64> = (0..m).map(|i| u[i] + wdz[i]).collect();
            let mut dsn = cones.apply_wt(&sc, &inner);
            dsn.iter_mut().for_each(|v| *v = -*v);
            let dk = (-dkappa - kappa * dt) / tau;
            if !dt.is_finite() || ddx.iter().chain(ddz.iter()).any(|v| !v.is_finite()) {
                return None;
            }
            Some((ddx, dsn, ddz, dt, dk))
        };

        // predictor
        let lam_sq = cones.jordan(&lambda, &lambda);
        let Some((_, as_, az_, at_, ak_)) = direction(&rx, &rz, rtau, &lam_sq, tau * kappa) else {
            diagnostics = format!("affine direction failed at iteration {it}");
            break;
        };
        let step = |ds: &[f64], dz: &DVector<f64>, dt: f64, dk: f64| -> f64 {
            let mut alpha = cones.step_limit(&s, ds, 1.0);
            alpha = alpha.min(cones.step_limit(&z, dz.as_slice(), 1.0));
            if dt < 0.0 {
                alpha = alpha.min(-tau / dt);
            }
            if dk < 0.0 {
                alpha = alpha.min(-kappa / dk);
            }
            alpha
        };
        let alpha_aff = step(&as_, &az_, at_, ak_);
        let sigma = (1.0 - alpha_aff).powi(3).clamp(0.0, 1.0);

        // corrector
        let ws = cones.apply_winv_t(&sc, &as_);
        let wz = cones.apply_w(&sc, az_.as_slice());
        let cross = cones.jordan(&ws, &wz);
        let e = cones.unit();
        let dsv: Vec<f64> = (0..m).map(|i| lam_sq[i] + cross[i] - sigma * mu * e[i]).collect();
        let dk = tau * kappa + at_ * ak_ - sigma * mu;
        let f = 1.0 - sigma;
        let Some((cx, cs, cz, ct, ck)) = direction(&(&rx * f), &(&rz * f), rtau * f, &dsv, dk) else {
            diagnostics = format!("combined direction failed at iteration {it}");
            break;
        };
        let alpha = (0.99 * step(&cs, &cz, ct, ck)).min(1.0);
        if alpha < 1e-10 {
            diagnostics = format!("step length collapsed at iteration {it} (mu = {mu:e})");
            break;
        }
        for j in 0..n {
            x[j] += alpha * cx[j];
        }
        for i in 0..m {
            s[i] += alpha * cs[i];
            z[i] += alpha * cz[i];
        }
        tau += alpha * ct;
        kappa += alpha * ck;
        if !(tau > 0.0 && kappa > 0.0) {
            diagnostics = format!("homogeneous variables left the cone at iteration {it}");
            break;
        }
        iterations = it + 1;
    }
    if status == SdpStatus::MaxIter && diagnostics.is_empty() {
        diagnostics = format!("iteration limit {} reached", opts.max_iter);
    }

    // report in the original variables
    let (xo, so, zo) = match status {
        SdpStatus::PrimalInfeasible | SdpStatus::DualInfeasible => (x.clone(), s.clone(), z.clone()),
        _ => unscaled(&x, &s, &z, tau),
    };
    let (pres, dres, pobj, dobj, _, _) = measures(&xo, &so, &zo);
    let mut y_eq = Vec::new();
    let mut z_ineq = Vec::new();
    let mut psd_dual = Vec::new();
    for c in &orig.cones.list {
        match *c {
            Cone::Zero { off, len } => y_eq.extend_from_slice(&zo[off..off + len]),
            Cone::Nonneg { off, len } => z_ineq.extend_from_slice(&zo[off..off + len]),
            Cone::Psd { off, dim } => psd_dual.push(smat(&zo[off..off + svec_len(dim)], dim)),
        }
    }
    let psd_primal = p.psd.iter().map(|b| b.eval(&xo)).collect();
    Ok(SdpSolution {
        status,
        primal_objective: pobj + orig.q0,
        dual_objective: dobj + orig.q0,
        gap: (pobj - dobj).abs(),
        primal_residual: pres,
        dual_residual: dres,
        x: xo,
        y_eq,
        z_ineq,
        psd_primal,
        psd_dual,
        iterations,
        certificate,
        mu_history,
        diagnostics,
    })
}

fn stacked_dual(st: &Standard, sol: &SdpSolution) -> Vec<f64> {
    let mut zo = vec![0.0; st.cones.m];
    let (mut ke, mut ki, mut kp) = (0, 0, 0);
    for c in &st.cones.list {
        match *c {
            Cone::Zero { off, len } => {
                zo[off..off + len].copy_from_slice(&sol.y_eq[ke..ke + len]);
                ke += len;
            }
            Cone::Nonneg { off, len } => {
                zo[off..off + len].copy_from_slice(&sol.z_ineq[ki..ki + len]);
                ki += len;
            }
            Cone::Psd { off, dim } => {
                svec_into(&sol.psd_dual[kp], &mut zo[off..off + svec_len(dim)]);
                kp += 1;
            }
        }
    }
    zo
}

/// Largest KKT residual of an optimal solution, relative to the data scale:
/// (primal feasibility, dual feasibility, complementarity).
pub fn kkt_residuals(p: &SdpProblem, sol: &SdpSolution) -> (f64, f64, f64) {
    let st = to_standard(p);
    let xv = DVector::from_column_slice(&sol.x);
    let mut so = vec![0.0; st.cones.m];
    let ax = &st.a * &xv;
    for i in 0..st.cones.m {
        so[i] = st.b[i] - ax[i];
    }
    let zo = stacked_dual(&st, sol);
    let zv = DVector::from_column_slice(&zo);
    let atz = st.a.transpose() * &zv;
    let mut pfeas: f64 = 0.0;
    for c in &st.cones.list {
        match *c {
            Cone::Zero { off, len } => pfeas = pfeas.max(norm_inf(&so[off..off + len])),
            Cone::Nonneg { off, len } => pfeas = pfeas.max(so[off..off + len].iter().fold(0.0, |m, &v| m.max(-v))),
            Cone::Psd { off, dim } => pfeas = pfeas.max((-min_eig(&smat(&so[off..off + svec_len(dim)], dim))).max(0.0)),
        }
    }
    let pscale = 1.0 + norm_inf(st.b.as_slice());
    let dscale = 1.0 + norm_inf(st.q.as_slice());
    let dfeas = (0..p.n).map(|j| (atz[j] + st.q[j]).abs()).fold(0.0, f64::max);
    let comp = st.cones.dot(&so, &zo).abs() / (1.0 + st.q.dot(&xv).abs());
    (pfeas / pscale, dfeas / dscale, comp)
}

/// Residual of the Farkas certificate of a primal-infeasible solution:
/// with the dual ray normalized to b'z = −1, the larger of ‖A'z‖∞ and the
/// dual cone violation of z. None for other statuses.
pub fn farkas_residual(p: &SdpProblem, sol: &SdpSolution) -> Option<f64> {
    if sol.status != SdpStatus::PrimalInfeasible {
        return None;
    }
    let st = to_standard(p);
    let zo = stacked_dual(&st, sol);
    let zv = DVector::from_column_slice(&zo);
    let bz = st.b.dot(&zv);
    if !(bz < 0.0) {
        return Some(f64::INFINITY);
    }
    let zv = zv / -bz;
    let mut worst = norm_inf((st.a.transpose() * &zv).as_slice());
    for c in &st.cones.list {
        match *c {
            Cone::Zero { .. } => {}
            Cone::Nonneg { off, len } => worst = worst.max(zv.as_slice()[off..off + len].iter().fold(0.0, |m, &v| m.max(-v))),
            Cone::Psd { off, dim } => worst = worst.max((-min_eig(&smat(&zv.as_slice()[off..off + svec_len(dim)], dim))).max(0.0)),
        }
    }
    Some(worst)
}
