//! Sum-of-squares programs and their compilation to semidefinite programs.
//!
//! Decision variables are scalars owned by a [`SosProgram`]. Polynomials
//! whose coefficients are affine in the decisions ([`AffinePoly`]) are
//! constrained to be SOS through Gram matrices; polynomial matrix
//! inequalities on semialgebraic regions go through scalarization with
//! auxiliary variables y and an S-procedure.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use thiserror::Error;

use crate::conic::{solve_sdp, ConicError, LinExpr, PsdBlock, SdpOptions, SdpProblem, SdpSolution};
use crate::poly::{Monomial, PolyError, PolyMatrix, Polynomial};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SosError {
    #[error("monomial basis too small: degree {need} needed, basis reaches {have}")]
    BasisTooSmall { need: u32, have: u32 },
    #[error("empty monomial basis")]
    EmptyBasis,
    #[error("matrix is not square/symmetric ({rows}x{cols})")]
    NotSymmetric { rows: usize, cols: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Conic(#[from] ConicError),
}

pub type SosResult<T> = std::result::Result<T, SosError>;

/// Polynomial in the indeterminates whose coefficients are affine in the
/// decision variables.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePoly {
    nvars: usize,
    terms: BTreeMap<Monomial, LinExpr>,
}

impl AffinePoly {
    pub fn zero(nvars: usize) -> Self {
        Self { nvars, terms: BTreeMap::new() }
    }

    pub fn from_poly(p: &Polynomial) -> Self {
        let mut out = Self::zero(p.nvars());
        for (m, c) in p.terms() {
            out.add_term(m.clone(), &LinExpr::constant(c));
        }
        out
    }

    /// The constant polynomial e.
    pub fn from_linexpr(nvars: usize, e: LinExpr) -> Self {
        let mut out = Self::zero(nvars);
        out.add_term(Monomial::one(nvars), &e);
        out
    }

    /// p·x_var.
    pub fn poly_times_var(p: &Polynomial, var: usize) -> Self {
        let mut out = Self::zero(p.nvars());
        for (m, c) in p.terms() {
            out.add_term(m.clone(), &LinExpr::term(var, c));
        }
        out
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &LinExpr)> {
        self.terms.iter()
    }

    pub fn coeff(&self, m: &Monomial) -> LinExpr {
        self.terms.get(m).cloned().unwrap_or_default()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn add_term(&mut self, m: Monomial, e: &LinExpr) {
        self.add_term_scaled(m, e, 1.0);
    }

    fn add_term_scaled(&mut self, m: Monomial, e: &LinExpr, s: f64) {
        if e.is_zero() || s == 0.0 {
            return;
        }
        let slot = self.terms.entry(m.clone()).or_default();
        slot.add_scaled(e, s);
        if slot.is_zero() {
            self.terms.remove(&m);
        }
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(|m| m.degree()).max().unwrap_or(0)
    }

    pub fn vars_used(&self) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for m in self.terms.keys() {
            for (i, &e) in m.exponents().iter().enumerate() {
                if e > 0 {
                    out.insert(i);
                }
            }
        }
        out
    }

    /// Degree counting only the listed variables.
    pub fn degree_in_vars(&self, vars: &[usize]) -> u32 {
        self.terms.keys().map(|m| vars.iter().map(|&v| m.exponents()[v]).sum::<u32>()).max().unwrap_or(0)
    }

    pub fn add(&self, other: &AffinePoly) -> AffinePoly {
        self.combine(other, 1.0)
    }

    pub fn sub(&self, other: &AffinePoly) -> AffinePoly {
        self.combine(other, -1.0)
    }

    fn combine(&self, other: &AffinePoly, s: f64) -> AffinePoly {
        assert_eq!(self.nvars, other.nvars, "AffinePoly variable count mismatch");
        let mut out = self.clone();
        for (m, e) in &other.terms {
            out.add_term_scaled(m.clone(), e, s);
        }
        out
    }

    pub fn scale(&self, s: f64) -> AffinePoly {
        let mut out = Self::zero(self.nvars);
        for (m, e) in &self.terms {
            out.add_term_scaled(m.clone(), e, s);
        }
        out
    }

    pub fn mul_poly(&self, p: &Polynomial) -> AffinePoly {
        assert_eq!(self.nvars, p.nvars(), "AffinePoly variable count mismatch");
        let mut out = Self::zero(self.nvars);
        for (m1, e) in &self.terms {
            for (m2, c) in p.terms() {
                out.add_term_scaled(m1.mul(m2), e, c);
            }
        }
        out
    }

    pub fn diff(&self, var: usize) -> AffinePoly {
        let mut out = Self::zero(self.nvars);
        for (m, e) in &self.terms {
            let k = m.exponents()[var];
            if k == 0 {
                continue;
            }
            let mut ex = m.exponents().to_vec();
            ex[var] -= 1;
            out.add_term_scaled(Monomial::from_exponents(ex), e, k as f64);
        }
        out
    }

    pub fn lift(&self, nvars: usize) -> AffinePoly {
        let mut out = Self::zero(nvars);
        for (m, e) in &self.terms {
            out.add_term(m.lift(nvars), e);
        }
        out
    }

    /// Substitutes decision values.
    pub fn eval_decisions(&self, x: &[f64]) -> Polynomial {
        Polynomial::from_terms(self.nvars, self.terms.iter().map(|(m, e)| (m.clone(), e.eval(x))))
    }

    /// Substitutes a point for the indeterminates.
    pub fn eval_point(&self, point: &[f64]) -> LinExpr {
        let mut out = LinExpr::zero();
        for (m, e) in &self.terms {
            out.add_scaled(e, m.eval(point));
        }
        out
    }
}

/// Matrix of [`AffinePoly`] entries, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMatrix {
    rows: usize,
    cols: usize,
    nvars: usize,
    entries: Vec<AffinePoly>,
}

impl AffineMatrix {
    pub fn zeros(nvars: usize, rows: usize, cols: usize) -> Self {
        Self { rows, cols, nvars, entries: vec![AffinePoly::zero(nvars); rows * cols] }
    }

    pub fn from_polymatrix(m: &PolyMatrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            nvars: m.nvars(),
            entries: m.entries().iter().map(AffinePoly::from_poly).collect(),
        }
    }

    /// m·x_var.
    pub fn polymatrix_times_var(m: &PolyMatrix, var: usize) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            nvars: m.nvars(),
            entries: m.entries().iter().map(|p| AffinePoly::poly_times_var(p, var)).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn get(&self, i: usize, j: usize) -> &AffinePoly {
        &self.entries[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, p: AffinePoly) {
        self.entries[i * self.cols + j] = p;
    }

    pub fn transpose(&self) -> AffineMatrix {
        let mut out = Self::zeros(self.nvars, self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j).clone());
            }
        }
        out
    }

    fn check_same(&self, other: &AffineMatrix) -> SosResult<()> {
        if self.rows != other.rows || self.cols != other.cols || self.nvars != other.nvars {
            return Err(SosError::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &AffineMatrix) -> SosResult<AffineMatrix> {
        self.check_same(other)?;
        let entries = self.entries.iter().zip(&other.entries).map(|(a, b)| a.add(b)).collect();
        Ok(Self { entries, ..*self.shape_only() })
    }

    pub fn sub(&self, other: &AffineMatrix) -> SosResult<AffineMatrix> {
        self.check_same(other)?;
        let entries = self.entries.iter().zip(&other.entries).map(|(a, b)| a.sub(b)).collect();
        Ok(Self { entries, ..*self.shape_only() })
    }

    fn shape_only(&self) -> Box<AffineMatrix> {
        Box::new(Self { rows: self.rows, cols: self.cols, nvars: self.nvars, entries: Vec::new() })
    }

    pub fn scale(&self, s: f64) -> AffineMatrix {
        Self { entries: self.entries.iter().map(|e| e.scale(s)).collect(), ..*self.shape_only() }
    }

    /// self · m
    pub fn mul_poly_right(&self, m: &PolyMatrix) -> SosResult<AffineMatrix> {
        if self.cols != m.rows() {
            return Err(SosError::DimensionMismatch(format!("{}x{} times {}x{}", self.rows, self.cols, m.rows(), m.cols())));
        }
        let mut out = Self::zeros(self.nvars, self.rows, m.cols());
        for i in 0..self.rows {
            for j in 0..m.cols() {
                let mut acc = AffinePoly::zero(self.nvars);
                for k in 0..self.cols {
                    let p = m.get(k, j);
                    if !p.is_zero() && !self.get(i, k).is_zero() {
                        acc = acc.add(&self.get(i, k).mul_poly(p));
                    }
                }
                out.set(i, j, acc);
            }
        }
        Ok(out)
    }

    /// m · self
    pub fn mul_poly_left(&self, m: &PolyMatrix) -> SosResult<AffineMatrix> {
        Ok(self.transpose().mul_poly_right(&m.transpose())?.transpose())
    }

    pub fn from_blocks(blocks: &[Vec<&AffineMatrix>]) -> SosResult<AffineMatrix> {
        let nvars = blocks.first().and_then(|r| r.first()).map(|b| b.nvars).unwrap_or(0);
        let heights: Vec<usize> = blocks.iter().map(|r| r.first().map(|b| b.rows).unwrap_or(0)).collect();
        let widths: Vec<usize> = blocks.first().map(|r| r.iter().map(|b| b.cols).collect()).unwrap_or_default();
        let mut out = Self::zeros(nvars, heights.iter().sum(), widths.iter().sum());
        let mut r0 = 0;
        for (bi, row) in blocks.iter().enumerate() {
            if row.len() != widths.len() {
                return Err(SosError::DimensionMismatch("ragged block row".into()));
            }
            let mut c0 = 0;
            for (bj, b) in row.iter().enumerate() {
                if b.rows != heights[bi] || b.cols != widths[bj] || b.nvars != nvars {
                    return Err(SosError::DimensionMismatch(format!("block ({bi}, {bj})")));
                }
                for i in 0..b.rows {
                    for j in 0..b.cols {
                        out.set(r0 + i, c0 + j, b.get(i, j).clone());
                    }
                }
                c0 += b.cols;
            }
            r0 += heights[bi];
        }
        Ok(out)
    }

    pub fn diff(&self, var: usize) -> AffineMatrix {
        Self { entries: self.entries.iter().map(|e| e.diff(var)).collect(), ..*self.shape_only() }
    }

    /// Entrywise product with a scalar polynomial.
    pub fn mul_scalar_poly(&self, p: &Polynomial) -> AffineMatrix {
        Self { entries: self.entries.iter().map(|e| e.mul_poly(p)).collect(), ..*self.shape_only() }
    }

    pub fn degree_in_vars(&self, vars: &[usize]) -> u32 {
        self.entries.iter().map(|e| e.degree_in_vars(vars)).max().unwrap_or(0)
    }

    pub fn vars_used(&self) -> BTreeSet<usize> {
        self.entries.iter().flat_map(|e| e.vars_used()).collect()
    }

    pub fn eval_decisions(&self, x: &[f64]) -> PolyMatrix {
        PolyMatrix::new(self.rows, self.cols, self.entries.iter().map(|e| e.eval_decisions(x)).collect())
            .expect("shape is consistent")
    }

    /// y'My as a polynomial over nvars + rows indeterminates (y appended).
    pub fn scalarize(&self) -> SosResult<AffinePoly> {
        if self.rows != self.cols {
            return Err(SosError::NotSymmetric { rows: self.rows, cols: self.cols });
        }
        let n2 = self.nvars + self.rows;
        let mut out = AffinePoly::zero(n2);
        for i in 0..self.rows {
            for j in 0..self.cols {
                let yy = Monomial::var(n2, self.nvars + i).mul(&Monomial::var(n2, self.nvars + j));
                for (m, e) in self.get(i, j).terms() {
                    out.add_term(m.lift(n2).mul(&yy), e);
                }
            }
        }
        Ok(out)
    }
}

/// All monomials in `vars` (over an `nvars` space) of degree ≤ max_deg, in
/// graded order.
pub fn monomial_basis(nvars: usize, vars: &[usize], max_deg: u32) -> Vec<Monomial> {
    let mut out = Vec::new();
    fn rec(nvars: usize, vars: &[usize], k: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Monomial>) {
        if k == vars.len() {
            out.push(Monomial::from_exponents(cur.clone()));
            return;
        }
        for e in 0..=left {
            cur[vars[k]] = e;
            rec(nvars, vars, k + 1, left - e, cur, out);
        }
        cur[vars[k]] = 0;
    }
    let mut cur = vec![0; nvars];
    rec(nvars, vars, 0, max_deg, &mut cur, &mut out);
    out.sort();
    out.dedup();
    out
}

/// Semialgebraic set {ρ : g_i(ρ) ≥ 0} with an optional box hull per
/// variable (used for sampling).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Region {
    pub generators: Vec<Polynomial>,
    pub bounds: BTreeMap<usize, (f64, f64)>,
}

impl Region {
    pub fn everywhere() -> Self {
        Self::default()
    }

    /// Adds lo ≤ x_var ≤ hi as the generator (x − lo)(hi − x) ≥ 0.
    pub fn with_interval(mut self, nvars: usize, var: usize, lo: f64, hi: f64) -> Self {
        let x = Polynomial::var(nvars, var);
        let g = &(&x - &Polynomial::constant(nvars, lo)) * &(&Polynomial::constant(nvars, hi) - &x);
        self.generators.push(g);
        self.bounds.insert(var, (lo, hi));
        self
    }

    pub fn with_generator(mut self, g: Polynomial) -> Self {
        self.generators.push(g);
        self
    }

    pub fn contains(&self, point: &[f64], tol: f64) -> bool {
        self.generators.iter().all(|g| g.eval(point).map(|v| v >= -tol).unwrap_or(false))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gram {
    pub basis: Vec<Monomial>,
    /// Index of the PSD block holding the Gram matrix.
    pub block: usize,
}

/// Collection of decisions, linear constraints, LMIs and SOS constraints.
#[derive(Debug, Clone, Default)]
pub struct SosProgram {
    names: Vec<String>,
    eqs: Vec<LinExpr>,
    ineqs: Vec<LinExpr>,
    psd: Vec<PsdBlock>,
    objective: LinExpr,
    grams: Vec<Gram>,
}

impl SosProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_decisions(&self) -> usize {
        self.names.len()
    }

    pub fn decision_name(&self, v: usize) -> &str {
        &self.names[v]
    }

    pub fn new_var(&mut self, name: &str) -> usize {
        self.names.push(name.to_string());
        self.names.len() - 1
    }

    /// Symmetric dim×dim matrix of fresh decisions.
    pub fn new_sym_matrix(&mut self, name: &str, dim: usize) -> Vec<Vec<LinExpr>> {
        let mut m = vec![vec![LinExpr::zero(); dim]; dim];
        for j in 0..dim {
            for i in 0..=j {
                let v = self.new_var(&format!("{name}[{i},{j}]"));
                m[i][j] = LinExpr::var(v);
                m[j][i] = LinExpr::var(v);
            }
        }
        m
    }

    /// Σ_α P_α ρ^α with fresh symmetric P_α for each monomial.
    pub fn new_sym_poly_matrix(&mut self, name: &str, nvars: usize, dim: usize, monomials: &[Monomial]) -> AffineMatrix {
        let mut out = AffineMatrix::zeros(nvars, dim, dim);
        for (k, mono) in monomials.iter().enumerate() {
            let coeffs = self.new_sym_matrix(&format!("{name}_{k}"), dim);
            for i in 0..dim {
                for j in 0..dim {
                    let mut e = out.get(i, j).clone();
                    e.add_term(mono.clone(), &coeffs[i][j]);
                    out.set(i, j, e);
                }
            }
        }
        out
    }

    pub fn add_eq(&mut self, e: LinExpr) {
        if e.is_constant() && e.constant.abs() <= 1e-14 {
            return;
        }
        self.eqs.push(e);
    }

    /// e ≥ 0
    pub fn add_ineq(&mut self, e: LinExpr) {
        self.ineqs.push(e);
    }

    /// Symmetric matrix of affine expressions ⪰ 0; returns the block index.
    pub fn add_lmi(&mut self, m: &[Vec<LinExpr>]) -> usize {
        let dim = m.len();
        let mut b = PsdBlock::new(dim);
        for j in 0..dim {
            for i in 0..=j {
                b.set(i, j, m[i][j].plus(&m[j][i]).scaled(0.5));
            }
        }
        self.psd.push(b);
        self.psd.len() - 1
    }

    pub fn minimize(&mut self, e: LinExpr) {
        self.objective = e;
    }

    pub fn grams(&self) -> &[Gram] {
        &self.grams
    }

    /// Creates σ = b'Gb with G ⪰ 0 fresh; returns σ and the Gram index.
    pub fn new_sos_poly(&mut self, nvars: usize, basis: &[Monomial]) -> SosResult<(AffinePoly, usize)> {
        if basis.is_empty() {
            return Err(SosError::EmptyBasis);
        }
        let g = self.new_sym_matrix(&format!("G{}", self.grams.len()), basis.len());
        let block = self.add_lmi(&g);
        let mut sigma = AffinePoly::zero(nvars);
        for a in 0..basis.len() {
            for b in a..basis.len() {
                let m = basis[a].lift(nvars).mul(&basis[b].lift(nvars));
                let w = if a == b { 1.0 } else { 2.0 };
                sigma.add_term(m, &g[a][b].scaled(w));
            }
        }
        self.grams.push(Gram { basis: basis.to_vec(), block });
        Ok((sigma, self.grams.len() - 1))
    }

    /// Coefficientwise p = 0.
    pub fn add_poly_eq(&mut self, p: &AffinePoly) {
        for (_, e) in p.terms() {
            self.add_eq(e.clone());
        }
    }

    /// p ∈ Σ[basis]: p = b'Gb with G ⪰ 0. Returns the Gram index.
    pub fn add_sos(&mut self, p: &AffinePoly, basis: &[Monomial]) -> SosResult<usize> {
        if basis.is_empty() {
            return Err(SosError::EmptyBasis);
        }
        let have = basis.iter().map(|m| m.degree()).max().unwrap_or(0);
        let need = p.degree();
        if need > 2 * have {
            return Err(SosError::BasisTooSmall { need, have: 2 * have });
        }
        let (sigma, id) = self.new_sos_poly(p.nvars(), basis)?;
        self.add_poly_eq(&p.sub(&sigma));
        Ok(id)
    }

    pub fn to_sdp(&self) -> SdpProblem {
        SdpProblem {
            n: self.names.len(),
            objective: self.objective.clone(),
            eqs: self.eqs.clone(),
            ineqs: self.ineqs.clone(),
            psd: self.psd.clone(),
        }
    }

    pub fn solve(&self, opts: &SdpOptions) -> SosResult<SdpSolution> {
        Ok(solve_sdp(&self.to_sdp(), opts)?)
    }

    pub fn gram_value(&self, id: usize, x: &[f64]) -> DMatrix<f64> {
        self.psd[self.grams[id].block].eval(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PmiOptions {
    /// Degree of the S-procedure multipliers in the indeterminates.
    pub mult_degree: u32,
    /// Strictness margin: M ⪰ eps·I is imposed.
    pub eps: f64,
}

impl Default for PmiOptions {
    fn default() -> Self {
        Self { mult_degree: 0, eps: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmiHandle {
    pub main_gram: Option<usize>,
    pub multiplier_grams: Vec<usize>,
    /// Direct LMI block when M does not depend on the indeterminates.
    pub lmi_block: Option<usize>,
}

/// Imposes M(ρ) ⪰ eps·I for all ρ in the region.
///
/// y'(M − eps I)y − Σ σ_i(ρ, y) g_i(ρ) must be SOS with σ_i SOS and
/// quadratic in y. Generators involving indeterminates that M does not
/// depend on are dropped.
pub fn add_pmi(prog: &mut SosProgram, m: &AffineMatrix, region: &Region, opts: &PmiOptions) -> SosResult<PmiHandle> {
    let r = m.rows();
    if r != m.cols() {
        return Err(SosError::NotSymmetric { rows: r, cols: m.cols() });
    }
    for i in 0..r {
        for j in 0..i {
            if m.get(i, j) != m.get(j, i) {
                let d = m.get(i, j).sub(m.get(j, i));
                let tiny = d.terms().all(|(_, e)| e.constant.abs() < 1e-12 && e.terms.values().all(|c| c.abs() < 1e-12));
                if !tiny {
                    return Err(SosError::NotSymmetric { rows: r, cols: r });
                }
            }
        }
    }
    let nvars = m.nvars();
    let rho: Vec<usize> = m.vars_used().into_iter().collect();
    if rho.is_empty() {
        let mut lmi = vec![vec![LinExpr::zero(); r]; r];
        for i in 0..r {
            for j in 0..r {
                let mut e = m.get(i, j).eval_point(&vec![0.0; nvars]);
                if i == j {
                    e.constant -= opts.eps;
                }
                lmi[i][j] = e;
            }
        }
        let block = prog.add_lmi(&lmi);
        return Ok(PmiHandle { main_gram: None, multiplier_grams: vec![], lmi_block: Some(block) });
    }
    let rho_set: BTreeSet<usize> = rho.iter().copied().collect();
    let gens: Vec<&Polynomial> = region
        .generators
        .iter()
        .filter(|g| !g.vars_used().is_empty() && g.vars_used().is_subset(&rho_set))
        .collect();

    let n2 = nvars + r;
    let yvars: Vec<usize> = (nvars..n2).collect();
    let mut q = m.scalarize()?;
    for &y in &yvars {
        let yy = Monomial::var(n2, y).mul(&Monomial::var(n2, y));
        q.add_term(yy, &LinExpr::constant(-opts.eps));
    }
    let half_mult = opts.mult_degree / 2;
    let mut deg = m.degree_in_vars(&rho);
    let mut multiplier_grams = Vec::new();
    for g in &gens {
        let mbasis = monomial_basis(n2, &rho, half_mult);
        let basis = y_kron(&yvars, &mbasis, n2);
        let (sigma, id) = prog.new_sos_poly(n2, &basis)?;
        let gl = g.lift(n2);
        q = q.sub(&sigma.mul_poly(&gl));
        multiplier_grams.push(id);
        deg = deg.max(g.degree() + 2 * half_mult);
    }
    let half = deg.div_ceil(2);
    let basis = y_kron(&yvars, &monomial_basis(n2, &rho, half), n2);
    let main = prog.add_sos(&q, &basis)?;
    Ok(PmiHandle { main_gram: Some(main), multiplier_grams, lmi_block: None })
}

fn y_kron(yvars: &[usize], mbasis: &[Monomial], n2: usize) -> Vec<Monomial> {
    let mut out = Vec::with_capacity(yvars.len() * mbasis.len());
    for &y in yvars {
        let ym = Monomial::var(n2, y);
        for mb in mbasis {
            out.push(ym.mul(mb));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::SdpStatus;
    use crate::poly::VarRegistry;

    fn parse(src: &str, names: &[&str]) -> Polynomial {
        Polynomial::parse(src, &VarRegistry::new(names).unwrap()).unwrap()
    }

    #[test]
    fn basis_sizes() {
        assert_eq!(monomial_basis(2, &[0, 1], 3).len(), 10);
        assert_eq!(monomial_basis(3, &[1], 2).len(), 3);
        assert_eq!(monomial_basis(2, &[], 4).len(), 1);
    }

    #[test]
    fn square_is_sos_and_gram_reconstructs() {
        let p = parse("(x^2 + 1)^2", &["x"]);
        let mut prog = SosProgram::new();
        let basis = monomial_basis(1, &[0], 2);
        let id = prog.add_sos(&AffinePoly::from_poly(&p), &basis).unwrap();
        let sol = prog.solve(&SdpOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal, "{}", sol.diagnostics);
        let g = prog.gram_value(id, &sol.x);
        assert!(g.clone().symmetric_eigenvalues().min() >= -1e-8);
        let mut rec = Polynomial::zero(1);
        for a in 0..basis.len() {
            for b in 0..basis.len() {
                rec.add_term(basis[a].mul(&basis[b]), g[(a, b)]);
            }
        }
        for (m, c) in p.terms() {
            assert!((rec.coeff(m) - c).abs() < 1e-6);
        }
        assert!((&rec - &p).max_abs_coeff() < 1e-6);
    }

    #[test]
    fn zero_polynomial_has_zero_gram() {
        let p = Polynomial::zero(1);
        let mut prog = SosProgram::new();
        let id = prog.add_sos(&AffinePoly::from_poly(&p), &monomial_basis(1, &[0], 1)).unwrap();
        let sol = prog.solve(&SdpOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal, "{}", sol.diagnostics);
        assert!(prog.gram_value(id, &sol.x).amax() < 1e-6);
    }

    #[test]
    fn motzkin_is_not_sos() {
        let p = parse("x^4*y^2 + x^2*y^4 - 3*x^2*y^2 + 1", &["x", "y"]);
        let mut prog = SosProgram::new();
        prog.add_sos(&AffinePoly::from_poly(&p), &monomial_basis(2, &[0, 1], 3)).unwrap();
        let sol = prog.solve(&SdpOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::PrimalInfeasible, "{}", sol.diagnostics);
    }

    #[test]
    fn basis_too_small_is_rejected() {
        let p = parse("x^6 + 1", &["x"]);
        let mut prog = SosProgram::new();
        let e = prog.add_sos(&AffinePoly::from_poly(&p), &monomial_basis(1, &[0], 2));
        assert!(matches!(e, Err(SosError::BasisTooSmall { need: 6, have: 4 })));
    }

    fn interval_pmi(shift: f64) -> SdpStatus {
        // −(x − shift) ⪰ eps on |x| ≤ 1, i.e. x − shift ≺ 0 there
        let x = parse(&format!("{shift} - x"), &["x"]);
        let m = AffineMatrix::from_polymatrix(&PolyMatrix::new(1, 1, vec![x]).unwrap());
        let region = Region::everywhere().with_interval(1, 0, -1.0, 1.0);
        let mut prog = SosProgram::new();
        add_pmi(&mut prog, &m, &region, &PmiOptions { mult_degree: 0, eps: 1e-6 }).unwrap();
        prog.solve(&SdpOptions::default()).unwrap().status
    }

    #[test]
    fn interval_region_feasibility() {
        assert_eq!(interval_pmi(2.0), SdpStatus::Optimal);
        assert_eq!(interval_pmi(0.5), SdpStatus::PrimalInfeasible);
    }

    #[test]
    fn pmi_with_decisions_finds_margin() {
        // maximize t s.t. [[2 − x^2, t], [t, 1]] ⪰ 0 on |x| ≤ 1 → t² ≤ 1
        let mut prog = SosProgram::new();
        let t = prog.new_var("t");
        let a = parse("2 - x^2", &["x"]);
        let mut m = AffineMatrix::zeros(1, 2, 2);
        m.set(0, 0, AffinePoly::from_poly(&a));
        m.set(0, 1, AffinePoly::from_linexpr(1, LinExpr::var(t)));
        m.set(1, 0, AffinePoly::from_linexpr(1, LinExpr::var(t)));
        m.set(1, 1, AffinePoly::from_poly(&Polynomial::constant(1, 1.0)));
        let region = Region::everywhere().with_interval(1, 0, -1.0, 1.0);
        add_pmi(&mut prog, &m, &region, &PmiOptions { mult_degree: 0, eps: 0.0 }).unwrap();
        prog.minimize(LinExpr::term(t, -1.0));
        let sol = prog.solve(&SdpOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal, "{}", sol.diagnostics);
        assert!((sol.x[t] - 1.0).abs() < 1e-5, "{}", sol.x[t]);
    }

    #[test]
    fn constant_pmi_uses_direct_block() {
        let mut prog = SosProgram::new();
        let m = AffineMatrix::from_polymatrix(&PolyMatrix::identity(2, 2));
        let h = add_pmi(&mut prog, &m, &Region::everywhere(), &PmiOptions::default()).unwrap();
        assert!(h.lmi_block.is_some() && h.main_gram.is_none());
    }

    #[test]
    fn scalarize_and_diff() {
        let x = parse("x^2", &["x"]);
        let m = AffineMatrix::from_polymatrix(&PolyMatrix::new(1, 1, vec![x]).unwrap());
        let s = m.scalarize().unwrap();
        assert_eq!(s.nvars(), 2);
        assert_eq!(s.degree(), 4);
        let d = m.diff(0);
        assert_eq!(d.get(0, 0).eval_decisions(&[]).coeff(&Monomial::var(1, 0)), 2.0);
    }
}
