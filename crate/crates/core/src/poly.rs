//! Multivariate polynomials over named indeterminates.
//!
//! Coefficients are `f64`. Terms are kept in graded-lexicographic order over
//! the registry order, so equality, iteration and serialization are
//! deterministic. Zero coefficients are never stored.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("variable index {index} out of range for {nvars} variables")]
    VarOutOfRange { index: usize, nvars: usize },
    #[error("duplicate variable name `{0}`")]
    DuplicateVar(String),
    #[error("unknown variable `{name}` at column {column}")]
    UnknownVar { name: String, column: usize },
    #[error("parse error at column {column}: {message}")]
    Parse { column: usize, message: String },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("variable {0} is both an indeterminate of the matrix and a scalarization variable")]
    VariableCollision(usize),
    #[error("matrix is not symmetric")]
    NotSymmetric,
}

pub type PolyResult<T> = std::result::Result<T, PolyError>;

/// Ordered set of indeterminate names.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VarRegistry {
    names: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl VarRegistry {
    pub fn new<S: AsRef<str>>(names: &[S]) -> PolyResult<Self> {
        let mut reg = VarRegistry::default();
        for n in names {
            reg.push(n.as_ref())?;
        }
        Ok(reg)
    }

    /// Appends a name and returns its index.
    pub fn push(&mut self, name: &str) -> PolyResult<usize> {
        if self.index.contains_key(name) {
            return Err(PolyError::DuplicateVar(name.to_string()));
        }
        let idx = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), idx);
        Ok(idx)
    }

    /// A new registry with `more` appended; existing indices are unchanged.
    pub fn extend<S: AsRef<str>>(&self, more: &[S]) -> PolyResult<Self> {
        let mut reg = self.clone();
        for n in more {
            reg.push(n.as_ref())?;
        }
        Ok(reg)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Exponent vector, ordered graded-lexicographically.
///
/// Within one total degree, earlier registry variables sort first, so the
/// degree-one monomials of `{x, y}` come out as `x, y`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Monomial(Vec<u32>);

impl Monomial {
    pub fn one(nvars: usize) -> Self {
        Monomial(vec![0; nvars])
    }

    pub fn var(nvars: usize, idx: usize) -> Self {
        let mut e = vec![0; nvars];
        e[idx] = 1;
        Monomial(e)
    }

    pub fn from_exponents(exps: Vec<u32>) -> Self {
        Monomial(exps)
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    pub fn nvars(&self) -> usize {
        self.0.len()
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn is_one(&self) -> bool {
        self.0.iter().all(|&e| e == 0)
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        Monomial(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// Value at `point`; assumes matching length.
    pub fn eval(&self, point: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(point)
            .filter(|(e, _)| **e > 0)
            .map(|(&e, &x)| x.powi(e as i32))
            .product()
    }

    pub fn lift(&self, nvars: usize) -> Monomial {
        let mut e = self.0.clone();
        e.resize(nvars, 0);
        Monomial(e)
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Sparse multivariate polynomial with real coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    nvars: usize,
    terms: BTreeMap<Monomial, f64>,
}

impl Polynomial {
    pub fn zero(nvars: usize) -> Self {
        Polynomial { nvars, terms: BTreeMap::new() }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        let mut p = Polynomial::zero(nvars);
        p.add_term(Monomial::one(nvars), c);
        p
    }

    pub fn var(nvars: usize, idx: usize) -> Self {
        let mut p = Polynomial::zero(nvars);
        p.add_term(Monomial::var(nvars, idx), 1.0);
        p
    }

    pub fn from_terms<I: IntoIterator<Item = (Monomial, f64)>>(nvars: usize, terms: I) -> Self {
        let mut p = Polynomial::zero(nvars);
        for (m, c) in terms {
            assert_eq!(m.nvars(), nvars, "monomial length must match registry size");
            p.add_term(m, c);
        }
        p
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> {
        self.terms.iter().map(|(m, c)| (m, *c))
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn coeff(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Constant term if the polynomial has degree zero.
    pub fn as_constant(&self) -> Option<f64> {
        match self.degree() {
            0 => Some(self.coeff(&Monomial::one(self.nvars))),
            _ => None,
        }
    }

    pub fn add_term(&mut self, m: Monomial, c: f64) {
        if c == 0.0 {
            return;
        }
        let entry = self.terms.entry(m);
        match entry {
            std::collections::btree_map::Entry::Occupied(mut o) => {
                let v = *o.get() + c;
                if v == 0.0 {
                    o.remove();
                } else {
                    *o.get_mut() = v;
                }
            }
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(c);
            }
        }
    }

    /// Maximum total degree; 0 for the zero polynomial.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    pub fn degree_in(&self, var: usize) -> u32 {
        self.terms.keys().map(|m| m.0[var]).max().unwrap_or(0)
    }

    /// Indices of variables that occur with positive exponent.
    pub fn vars_used(&self) -> BTreeSet<usize> {
        let mut s = BTreeSet::new();
        for m in self.terms.keys() {
            for (i, &e) in m.0.iter().enumerate() {
                if e > 0 {
                    s.insert(i);
                }
            }
        }
        s
    }

    /// Evaluates with Neumaier-compensated summation over terms.
    pub fn eval(&self, point: &[f64]) -> PolyResult<f64> {
        if point.len() != self.nvars {
            return Err(PolyError::DimensionMismatch { expected: self.nvars, got: point.len() });
        }
        Ok(compensated_sum(self.terms.iter().map(|(m, c)| c * m.eval(point))))
    }

    pub fn diff(&self, var: usize) -> PolyResult<Polynomial> {
        if var >= self.nvars {
            return Err(PolyError::VarOutOfRange { index: var, nvars: self.nvars });
        }
        let mut out = Polynomial::zero(self.nvars);
        for (m, c) in &self.terms {
            let e = m.0[var];
            if e == 0 {
                continue;
            }
            let mut exps = m.0.clone();
            exps[var] -= 1;
            out.add_term(Monomial(exps), c * e as f64);
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        if s == 0.0 {
            return Polynomial::zero(self.nvars);
        }
        Polynomial {
            nvars: self.nvars,
            terms: self.terms.iter().map(|(m, c)| (m.clone(), c * s)).collect(),
        }
    }

    pub fn pow(&self, k: u32) -> Polynomial {
        let mut out = Polynomial::constant(self.nvars, 1.0);
        for _ in 0..k {
            out = &out * self;
        }
        out
    }

    /// Re-embeds into a larger registry whose first `self.nvars()` names match.
    pub fn lift(&self, nvars: usize) -> Polynomial {
        assert!(nvars >= self.nvars, "lift cannot shrink a registry");
        Polynomial {
            nvars,
            terms: self.terms.iter().map(|(m, c)| (m.lift(nvars), *c)).collect(),
        }
    }

    /// Drops terms with |coefficient| ≤ `tol`.
    pub fn prune(&self, tol: f64) -> Polynomial {
        Polynomial {
            nvars: self.nvars,
            terms: self
                .terms
                .iter()
                .filter(|(_, c)| c.abs() > tol)
                .map(|(m, c)| (m.clone(), *c))
                .collect(),
        }
    }

    /// Largest absolute coefficient.
    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |a, c| a.max(c.abs()))
    }

    pub fn display<'a>(&'a self, reg: &'a VarRegistry) -> PolyDisplay<'a> {
        PolyDisplay { p: self, reg }
    }

    pub fn parse(src: &str, reg: &VarRegistry) -> PolyResult<Polynomial> {
        Parser::new(src, reg).parse()
    }

    fn check_same(&self, other: &Polynomial) {
        assert_eq!(self.nvars, other.nvars, "polynomials over different registries");
    }
}

pub(crate) fn compensated_sum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for x in it {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

impl<'a> Add<&'a Polynomial> for &'a Polynomial {
    type Output = Polynomial;
    fn add(self, rhs: &Polynomial) -> Polynomial {
        self.check_same(rhs);
        let mut out = self.clone();
        for (m, c) in &rhs.terms {
            out.add_term(m.clone(), *c);
        }
        out
    }
}

impl<'a> Sub<&'a Polynomial> for &'a Polynomial {
    type Output = Polynomial;
    fn sub(self, rhs: &Polynomial) -> Polynomial {
        self.check_same(rhs);
        let mut out = self.clone();
        for (m, c) in &rhs.terms {
            out.add_term(m.clone(), -*c);
        }
        out
    }
}

impl<'a> Mul<&'a Polynomial> for &'a Polynomial {
    type Output = Polynomial;
    fn mul(self, rhs: &Polynomial) -> Polynomial {
        self.check_same(rhs);
        let mut out = Polynomial::zero(self.nvars);
        for (ma, ca) in &self.terms {
            for (mb, cb) in &rhs.terms {
                out.add_term(ma.mul(mb), ca * cb);
            }
        }
        out
    }
}

impl Neg for &Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

macro_rules! forward_owned {
    ($tr:ident, $f:ident) => {
        impl $tr<Polynomial> for Polynomial {
            type Output = Polynomial;
            fn $f(self, rhs: Polynomial) -> Polynomial {
                (&self).$f(&rhs)
            }
        }
        impl<'a> $tr<&'a Polynomial> for Polynomial {
            type Output = Polynomial;
            fn $f(self, rhs: &Polynomial) -> Polynomial {
                (&self).$f(rhs)
            }
        }
    };
}
forward_owned!(Add, add);
forward_owned!(Sub, sub);
forward_owned!(Mul, mul);

pub struct PolyDisplay<'a> {
    p: &'a Polynomial,
    reg: &'a VarRegistry,
}

impl fmt::Display for PolyDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.p.is_zero() {
            return write!(f, "0");
        }
        for (k, (m, c)) in self.p.terms.iter().enumerate() {
            let (sign, mag) = if *c < 0.0 { ("-", -c) } else { ("+", *c) };
            if k == 0 {
                if sign == "-" {
                    write!(f, "-")?;
                }
            } else {
                write!(f, " {sign} ")?;
            }
            let mut factors = Vec::new();
            for (i, &e) in m.0.iter().enumerate() {
                match e {
                    0 => {}
                    1 => factors.push(self.reg.name(i).to_string()),
                    _ => factors.push(format!("{}^{}", self.reg.name(i), e)),
                }
            }
            if factors.is_empty() || mag != 1.0 {
                write!(f, "{mag}")?;
                if !factors.is_empty() {
                    write!(f, "*")?;
                }
            }
            write!(f, "{}", factors.join("*"))?;
        }
        Ok(())
    }
}

// Expression grammar (whitespace insignificant):
//   expr   := ['+'|'-'] term (('+'|'-') term)*
//   term   := factor (['*'] factor)*
//   factor := number | ident ['^' uint] | '(' expr ')' ['^' uint]
struct Parser<'a> {
    chars: Vec<char>,
    pos: usize,
    reg: &'a VarRegistry,
}

impl<'a> Parser<'a> {
    fn new(src: &str, reg: &'a VarRegistry) -> Self {
        Parser { chars: src.chars().collect(), pos: 0, reg }
    }

    fn err<T>(&self, message: impl Into<String>) -> PolyResult<T> {
        Err(PolyError::Parse { column: self.pos + 1, message: message.into() })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).copied()
    }

    fn parse(mut self) -> PolyResult<Polynomial> {
        if self.peek().is_none() {
            return self.err("empty expression");
        }
        let p = self.expr()?;
        if let Some(c) = self.peek() {
            return self.err(format!("unexpected character `{c}`"));
        }
        Ok(p)
    }

    fn expr(&mut self) -> PolyResult<Polynomial> {
        let n = self.reg.len();
        let mut acc = Polynomial::zero(n);
        let mut sign = 1.0;
        match self.peek() {
            Some('-') => {
                sign = -1.0;
                self.pos += 1;
            }
            Some('+') => self.pos += 1,
            _ => {}
        }
        loop {
            let t = self.term()?;
            acc = &acc + &t.scale(sign);
            match self.peek() {
                Some('+') => {
                    sign = 1.0;
                    self.pos += 1;
                }
                Some('-') => {
                    sign = -1.0;
                    self.pos += 1;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> PolyResult<Polynomial> {
        let mut acc = self.factor()?;
        loop {
            match self.peek() {
                Some('*') => {
                    self.pos += 1;
                    let f = self.factor()?;
                    acc = &acc * &f;
                }
                Some(c) if c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '(' => {
                    let f = self.factor()?;
                    acc = &acc * &f;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn factor(&mut self) -> PolyResult<Polynomial> {
        let n = self.reg.len();
        let base = match self.peek() {
            None => return self.err("unexpected end of expression"),
            Some('(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if self.peek() != Some(')') {
                    return self.err("expected `)`");
                }
                self.pos += 1;
                inner
            }
            Some(c) if c.is_ascii_digit() || c == '.' => Polynomial::constant(n, self.number()?),
            Some(c) if c.is_ascii_alphabetic() || c == '_' => {
                let start = self.pos;
                while self.pos < self.chars.len()
                    && (self.chars[self.pos].is_ascii_alphanumeric() || self.chars[self.pos] == '_')
                {
                    self.pos += 1;
                }
                let name: String = self.chars[start..self.pos].iter().collect();
                match self.reg.index_of(&name) {
                    Some(i) => Polynomial::var(n, i),
                    None => return Err(PolyError::UnknownVar { name, column: start + 1 }),
                }
            }
            Some(c) => return self.err(format!("unexpected character `{c}`")),
        };
        if self.peek() == Some('^') {
            self.pos += 1;
            self.skip_ws();
            let start = self.pos;
            while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if start == self.pos {
                return self.err("expected a non-negative integer exponent");
            }
            let s: String = self.chars[start..self.pos].iter().collect();
            let k: u32 = match s.parse() {
                Ok(k) => k,
                Err(_) => return self.err("exponent out of range"),
            };
            return Ok(base.pow(k));
        }
        Ok(base)
    }

    fn number(&mut self) -> PolyResult<f64> {
        let start = self.pos;
        let c = &self.chars;
        let mut i = self.pos;
        while i < c.len() && (c[i].is_ascii_digit() || c[i] == '.') {
            i += 1;
        }
        // exponent part only when followed by digits, so `2eps` is 2*eps
        if i < c.len() && (c[i] == 'e' || c[i] == 'E') {
            let mut j = i + 1;
            if j < c.len() && (c[j] == '+' || c[j] == '-') {
                j += 1;
            }
            if j < c.len() && c[j].is_ascii_digit() {
                while j < c.len() && c[j].is_ascii_digit() {
                    j += 1;
                }
                i = j;
            }
        }
        let s: String = c[start..i].iter().collect();
        self.pos = i;
        match s.parse::<f64>() {
            Ok(v) => Ok(v),
            Err(_) => {
                self.pos = start;
                self.err(format!("malformed number `{s}`"))
            }
        }
    }
}

/// Dense matrix of polynomials, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyMatrix {
    rows: usize,
    cols: usize,
    nvars: usize,
    entries: Vec<Polynomial>,
    symmetric: bool,
}

impl PolyMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<Polynomial>) -> PolyResult<Self> {
        if entries.len() != rows * cols {
            return Err(PolyError::DimensionMismatch { expected: rows * cols, got: entries.len() });
        }
        let nvars = entries.first().map(Polynomial::nvars).unwrap_or(0);
        if let Some(bad) = entries.iter().find(|p| p.nvars() != nvars) {
            return Err(PolyError::DimensionMismatch { expected: nvars, got: bad.nvars() });
        }
        let mut m = PolyMatrix { rows, cols, nvars, entries, symmetric: false };
        m.symmetric = m.compute_symmetric();
        Ok(m)
    }

    pub fn zeros(nvars: usize, rows: usize, cols: usize) -> Self {
        PolyMatrix {
            rows,
            cols,
            nvars,
            entries: vec![Polynomial::zero(nvars); rows * cols],
            symmetric: rows == cols,
        }
    }

    pub fn identity(nvars: usize, n: usize) -> Self {
        let mut m = PolyMatrix::zeros(nvars, n, n);
        for i in 0..n {
            m.entries[i * n + i] = Polynomial::constant(nvars, 1.0);
        }
        m
    }

    pub fn from_dmatrix(nvars: usize, a: &DMatrix<f64>) -> Self {
        let (r, c) = a.shape();
        let entries = (0..r)
            .flat_map(|i| (0..c).map(move |j| (i, j)))
            .map(|(i, j)| Polynomial::constant(nvars, a[(i, j)]))
            .collect();
        let mut m = PolyMatrix { rows: r, cols: c, nvars, entries, symmetric: false };
        m.symmetric = m.compute_symmetric();
        m
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

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn get(&self, i: usize, j: usize) -> &Polynomial {
        &self.entries[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, p: Polynomial) {
        assert_eq!(p.nvars(), self.nvars);
        self.entries[i * self.cols + j] = p;
        self.symmetric = self.compute_symmetric();
    }

    pub fn entries(&self) -> &[Polynomial] {
        &self.entries
    }

    fn compute_symmetric(&self) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let d = self.get(i, j) - self.get(j, i);
                let scale = 1.0 + self.get(i, j).max_abs_coeff();
                if d.max_abs_coeff() > 1e-12 * scale {
                    return false;
                }
            }
        }
        true
    }

    /// (M + M')/2.
    pub fn symmetrize(&self) -> PolyResult<PolyMatrix> {
        if self.rows != self.cols {
            return Err(PolyError::NotSymmetric);
        }
        let t = self.transpose();
        let sum = self.add(&t)?;
        Ok(sum.scale(0.5))
    }

    pub fn transpose(&self) -> PolyMatrix {
        let mut entries = Vec::with_capacity(self.entries.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                entries.push(self.get(i, j).clone());
            }
        }
        PolyMatrix {
            rows: self.cols,
            cols: self.rows,
            nvars: self.nvars,
            entries,
            symmetric: self.symmetric,
        }
    }

    pub fn add(&self, other: &PolyMatrix) -> PolyResult<PolyMatrix> {
        self.check_shape(other.rows, other.cols)?;
        let entries = self.entries.iter().zip(&other.entries).map(|(a, b)| a + b).collect();
        PolyMatrix::new(self.rows, self.cols, entries).map(|m| m.with_nvars(self.nvars))
    }

    pub fn sub(&self, other: &PolyMatrix) -> PolyResult<PolyMatrix> {
        self.check_shape(other.rows, other.cols)?;
        let entries = self.entries.iter().zip(&other.entries).map(|(a, b)| a - b).collect();
        PolyMatrix::new(self.rows, self.cols, entries).map(|m| m.with_nvars(self.nvars))
    }

    pub fn scale(&self, s: f64) -> PolyMatrix {
        PolyMatrix {
            rows: self.rows,
            cols: self.cols,
            nvars: self.nvars,
            entries: self.entries.iter().map(|p| p.scale(s)).collect(),
            symmetric: self.symmetric,
        }
    }

    pub fn mul(&self, other: &PolyMatrix) -> PolyResult<PolyMatrix> {
        if self.cols != other.rows {
            return Err(PolyError::DimensionMismatch { expected: self.cols, got: other.rows });
        }
        let mut out = PolyMatrix::zeros(self.nvars, self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = Polynomial::zero(self.nvars);
                for k in 0..self.cols {
                    let a = self.get(i, k);
                    let b = other.get(k, j);
                    if a.is_zero() || b.is_zero() {
                        continue;
                    }
                    acc = &acc + &(a * b);
                }
                out.entries[i * other.cols + j] = acc;
            }
        }
        out.symmetric = out.compute_symmetric();
        Ok(out)
    }

    /// Block matrix from a grid of blocks; each block row must agree in
    /// height and each block column in width.
    pub fn from_blocks(blocks: &[Vec<&PolyMatrix>]) -> PolyResult<PolyMatrix> {
        let first = blocks.first().and_then(|r| r.first()).ok_or(PolyError::Empty("block grid"))?;
        let nvars = first.nvars;
        let heights: Vec<usize> = blocks.iter().map(|r| r[0].rows).collect();
        let widths: Vec<usize> = blocks[0].iter().map(|b| b.cols).collect();
        let rows: usize = heights.iter().sum();
        let cols: usize = widths.iter().sum();
        let mut out = PolyMatrix::zeros(nvars, rows, cols);
        let mut r0 = 0;
        for (bi, brow) in blocks.iter().enumerate() {
            if brow.len() != widths.len() {
                return Err(PolyError::DimensionMismatch { expected: widths.len(), got: brow.len() });
            }
            let mut c0 = 0;
            for (bj, b) in brow.iter().enumerate() {
                if b.rows != heights[bi] || b.cols != widths[bj] {
                    return Err(PolyError::DimensionMismatch { expected: heights[bi], got: b.rows });
                }
                for i in 0..b.rows {
                    for j in 0..b.cols {
                        out.entries[(r0 + i) * cols + c0 + j] = b.get(i, j).clone();
                    }
                }
                c0 += widths[bj];
            }
            r0 += heights[bi];
        }
        out.symmetric = out.compute_symmetric();
        Ok(out)
    }

    pub fn submatrix(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> PolyMatrix {
        let mut out = PolyMatrix::zeros(self.nvars, rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                out.entries[i * cols + j] = self.get(r0 + i, c0 + j).clone();
            }
        }
        out.symmetric = out.compute_symmetric();
        out
    }

    pub fn eval(&self, point: &[f64]) -> PolyResult<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(i, j)] = self.get(i, j).eval(point)?;
            }
        }
        Ok(out)
    }

    pub fn diff(&self, var: usize) -> PolyResult<PolyMatrix> {
        let entries = self.entries.iter().map(|p| p.diff(var)).collect::<PolyResult<Vec<_>>>()?;
        Ok(PolyMatrix { entries, ..self.clone() })
    }

    pub fn lift(&self, nvars: usize) -> PolyMatrix {
        PolyMatrix {
            entries: self.entries.iter().map(|p| p.lift(nvars)).collect(),
            nvars,
            ..self.clone()
        }
    }

    pub fn degree(&self) -> u32 {
        self.entries.iter().map(Polynomial::degree).max().unwrap_or(0)
    }

    pub fn vars_used(&self) -> BTreeSet<usize> {
        self.entries.iter().flat_map(|p| p.vars_used()).collect()
    }

    /// Constant value if no entry depends on any variable.
    pub fn as_constant(&self) -> Option<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(i, j)] = self.get(i, j).as_constant()?;
            }
        }
        Some(out)
    }

    fn with_nvars(mut self, nvars: usize) -> Self {
        self.nvars = nvars;
        self
    }

    fn check_shape(&self, rows: usize, cols: usize) -> PolyResult<()> {
        if self.rows != rows {
            return Err(PolyError::DimensionMismatch { expected: self.rows, got: rows });
        }
        if self.cols != cols {
            return Err(PolyError::DimensionMismatch { expected: self.cols, got: cols });
        }
        Ok(())
    }
}

/// Jacobian of `field` with respect to `vars`: entry (i, j) is ∂field_i/∂vars_j.
pub fn jacobian(field: &[Polynomial], vars: &[usize]) -> PolyResult<PolyMatrix> {
    if field.is_empty() {
        return Err(PolyError::Empty("field"));
    }
    if vars.is_empty() {
        return Err(PolyError::Empty("variable list"));
    }
    let nvars = field[0].nvars();
    let mut entries = Vec::with_capacity(field.len() * vars.len());
    for p in field {
        if p.nvars() != nvars {
            return Err(PolyError::DimensionMismatch { expected: nvars, got: p.nvars() });
        }
        for &v in vars {
            entries.push(p.diff(v)?);
        }
    }
    PolyMatrix::new(field.len(), vars.len(), entries)
}

/// Returns y'M(ρ)y as a polynomial, where y_i is the variable `yvars[i]`.
pub fn scalarize_quadratic(m: &PolyMatrix, yvars: &[usize]) -> PolyResult<Polynomial> {
    if !m.is_symmetric() {
        return Err(PolyError::NotSymmetric);
    }
    if yvars.len() != m.rows() {
        return Err(PolyError::DimensionMismatch { expected: m.rows(), got: yvars.len() });
    }
    let nvars = m.nvars();
    let used = m.vars_used();
    for &y in yvars {
        if y >= nvars {
            return Err(PolyError::VarOutOfRange { index: y, nvars });
        }
        if used.contains(&y) {
            return Err(PolyError::VariableCollision(y));
        }
    }
    let mut out = Polynomial::zero(nvars);
    for i in 0..m.rows() {
        for j in i..m.cols() {
            let p = m.get(i, j);
            if p.is_zero() {
                continue;
            }
            let w = if i == j { 1.0 } else { 2.0 };
            let yy = Monomial::var(nvars, yvars[i]).mul(&Monomial::var(nvars, yvars[j]));
            for (mono, c) in p.terms() {
                out.add_term(mono.mul(&yy), w * c);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn jet_reg() -> VarRegistry {
        VarRegistry::new(&["psi", "phi"]).unwrap()
    }

    #[test]
    fn eval_jet_polynomial() {
        let reg = jet_reg();
        let p = Polynomial::parse("-psi - 1.5*phi^2 - 0.5*phi^3", &reg).unwrap();
        assert_eq!(p.eval(&[0.0, 1.0]).unwrap(), -2.0);
        assert_eq!(Polynomial::zero(2).eval(&[3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(Polynomial::constant(2, 3.0).eval(&[3.0, 4.0]).unwrap(), 3.0);
        assert!(matches!(p.eval(&[1.0]), Err(PolyError::DimensionMismatch { .. })));
    }

    #[test]
    fn diff_examples() {
        let reg = jet_reg();
        let p = Polynomial::parse("-psi - 1.5*phi^2 - 0.5*phi^3", &reg).unwrap();
        let expect = Polynomial::parse("-3*phi - 1.5*phi^2", &reg).unwrap();
        assert_eq!(p.diff(1).unwrap(), expect);
        assert!(Polynomial::constant(2, 5.0).diff(0).unwrap().is_zero());
        let xy = Polynomial::parse("psi*phi", &reg).unwrap();
        assert_eq!(xy.diff(0).unwrap(), Polynomial::var(2, 1));
        // unused variable
        let only_phi = Polynomial::parse("phi^2", &reg).unwrap();
        assert!(only_phi.diff(0).unwrap().is_zero());
        assert!(only_phi.diff(2).is_err());
    }

    #[test]
    fn jacobian_of_jet_field() {
        let reg = jet_reg();
        let f = vec![
            Polynomial::parse("phi", &reg).unwrap(),
            Polynomial::parse("-psi - 1.5 phi^2 - 0.5 phi^3", &reg).unwrap(),
        ];
        let j = jacobian(&f, &[0, 1]).unwrap();
        assert!(j.get(0, 0).is_zero());
        assert_eq!(j.get(0, 1).as_constant(), Some(1.0));
        assert_eq!(j.get(1, 0).as_constant(), Some(-1.0));
        assert_eq!(*j.get(1, 1), Polynomial::parse("-3phi - 1.5phi^2", &reg).unwrap());
        assert!(jacobian(&[], &[0]).is_err());
        assert!(jacobian(&f, &[]).is_err());
    }

    #[test]
    fn jacobian_of_linear_and_constant_fields() {
        let reg = VarRegistry::new(&["a", "b"]).unwrap();
        let f = vec![
            Polynomial::parse("2a - 3b", &reg).unwrap(),
            Polynomial::parse("0.5 a + b", &reg).unwrap(),
        ];
        let j = jacobian(&f, &[0, 1]).unwrap().as_constant().unwrap();
        assert_eq!(j, DMatrix::from_row_slice(2, 2, &[2.0, -3.0, 0.5, 1.0]));
        let c = vec![Polynomial::constant(2, 1.0), Polynomial::constant(2, -4.0)];
        let j = jacobian(&c, &[0, 1]).unwrap().as_constant().unwrap();
        assert_eq!(j, DMatrix::zeros(2, 2));
    }

    #[test]
    fn scalarize_examples() {
        // registry: x, y1, y2
        let n = 3;
        let id = PolyMatrix::identity(n, 2);
        let s = scalarize_quadratic(&id, &[1, 2]).unwrap();
        let reg = VarRegistry::new(&["x", "y1", "y2"]).unwrap();
        assert_eq!(s, Polynomial::parse("y1^2 + y2^2", &reg).unwrap());

        let x = Polynomial::var(n, 0);
        let one = Polynomial::constant(n, 1.0);
        let m = PolyMatrix::new(2, 2, vec![x.clone(), one.clone(), one, x]).unwrap();
        let s = scalarize_quadratic(&m, &[1, 2]).unwrap();
        assert_eq!(s, Polynomial::parse("x y1^2 + 2 y1 y2 + x y2^2", &reg).unwrap());

        let z = PolyMatrix::zeros(n, 2, 2);
        assert!(scalarize_quadratic(&z, &[1, 2]).unwrap().is_zero());
        assert!(matches!(scalarize_quadratic(&m, &[0, 1]), Err(PolyError::VariableCollision(0))));
    }

    #[test]
    fn parse_errors_carry_columns() {
        let reg = jet_reg();
        match Polynomial::parse("phi + * psi", &reg) {
            Err(PolyError::Parse { column, .. }) => assert_eq!(column, 7),
            other => panic!("unexpected {other:?}"),
        }
        match Polynomial::parse("phi + theta", &reg) {
            Err(PolyError::UnknownVar { name, column }) => {
                assert_eq!(name, "theta");
                assert_eq!(column, 7);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(Polynomial::parse("", &reg).is_err());
        assert!(Polynomial::parse("phi^", &reg).is_err());
        assert!(Polynomial::parse("(phi + 1", &reg).is_err());
    }

    #[test]
    fn parse_forms() {
        let reg = jet_reg();
        let a = Polynomial::parse("(phi + 1)*(1 - phi)", &reg).unwrap();
        assert_eq!(a, Polynomial::parse("1 - phi^2", &reg).unwrap());
        let b = Polynomial::parse(" 2.5e-1 psi phi ", &reg).unwrap();
        assert_eq!(b.coeff(&Monomial::from_exponents(vec![1, 1])), 0.25);
        let round = Polynomial::parse(&format!("{}", a.display(&reg)), &reg).unwrap();
        assert_eq!(round, a);
    }

    #[test]
    fn grlex_order() {
        let mut ms = vec![
            Monomial::from_exponents(vec![0, 2]),
            Monomial::from_exponents(vec![1, 0]),
            Monomial::from_exponents(vec![0, 0]),
            Monomial::from_exponents(vec![1, 1]),
            Monomial::from_exponents(vec![0, 1]),
            Monomial::from_exponents(vec![2, 0]),
        ];
        ms.sort();
        let e: Vec<_> = ms.iter().map(|m| m.exponents().to_vec()).collect();
        assert_eq!(e, vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 2]]);
    }

    fn arb_poly(nvars: usize) -> impl Strategy<Value = Polynomial> {
        prop::collection::vec((prop::collection::vec(0u32..4, nvars), -3.0f64..3.0), 0..8)
            .prop_map(move |ts| {
                Polynomial::from_terms(nvars, ts.into_iter().map(|(e, c)| (Monomial::from_exponents(e), c)))
            })
    }

    proptest! {
        #[test]
        fn eval_is_linear(p in arb_poly(3), q in arb_poly(3), pt in prop::collection::vec(-1.5f64..1.5, 3)) {
            let lhs = (&p + &q).eval(&pt).unwrap();
            let rhs = p.eval(&pt).unwrap() + q.eval(&pt).unwrap();
            let scale = 1.0 + p.eval(&pt).unwrap().abs() + q.eval(&pt).unwrap().abs();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * scale);
        }

        #[test]
        fn gradient_integrates_to_difference(p in arb_poly(2), a in prop::collection::vec(-1.0f64..1.0, 2), b in prop::collection::vec(-1.0f64..1.0, 2)) {
            // ∫ ∇p(c(s))·c'(s) ds over the segment by composite Simpson
            let grad = [p.diff(0).unwrap(), p.diff(1).unwrap()];
            let n = 400;
            let h = 1.0 / n as f64;
            let mut acc = 0.0;
            for k in 0..=n {
                let s = k as f64 * h;
                let c = [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])];
                let v = grad[0].eval(&c).unwrap() * (b[0] - a[0]) + grad[1].eval(&c).unwrap() * (b[1] - a[1]);
                let w = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * v;
            }
            acc *= h / 3.0;
            let diff = p.eval(&b).unwrap() - p.eval(&a).unwrap();
            prop_assert!((acc - diff).abs() <= 1e-8 * (1.0 + diff.abs()));
        }

        #[test]
        fn jacobian_matches_finite_differences(f0 in arb_poly(3), f1 in arb_poly(3), pt in prop::collection::vec(-1.0f64..1.0, 3)) {
            let field = vec![f0, f1];
            let jac = jacobian(&field, &[0, 1, 2]).unwrap().eval(&pt).unwrap();
            let h = 1e-6;
            for i in 0..2 {
                for j in 0..3 {
                    let mut up = pt.clone();
                    let mut dn = pt.clone();
                    up[j] += h;
                    dn[j] -= h;
                    let fd = (field[i].eval(&up).unwrap() - field[i].eval(&dn).unwrap()) / (2.0 * h);
                    let scale = 1.0 + jac[(i, j)].abs().max(fd.abs());
                    prop_assert!((fd - jac[(i, j)]).abs() <= 1e-5 * scale);
                }
            }
        }

        #[test]
        fn scalarization_matches_quadratic_form(a in arb_poly(4), b in arb_poly(4), c in arb_poly(4),
                                                rho in prop::collection::vec(-1.0f64..1.0, 2),
                                                y in prop::collection::vec(-1.0f64..1.0, 2)) {
            // entries depend on the first two variables only; y occupies 2 and 3
            let strip = |p: Polynomial| Polynomial::from_terms(4, p.terms().map(|(m, c)| {
                let e = m.exponents();
                (Monomial::from_exponents(vec![e[0], e[1], 0, 0]), c)
            }));
            let (a, b, c) = (strip(a), strip(b), strip(c));
            let m = PolyMatrix::new(2, 2, vec![a, b.clone(), b, c]).unwrap();
            let s = scalarize_quadratic(&m, &[2, 3]).unwrap();
            let pt = [rho[0], rho[1], y[0], y[1]];
            let mv = m.eval(&pt).unwrap();
            let yv = nalgebra::DVector::from_vec(y.clone());
            let direct = (yv.transpose() * &mv * &yv)[(0, 0)];
            prop_assert!((s.eval(&pt).unwrap() - direct).abs() <= 1e-12 * (1.0 + direct.abs()) * 10.0);
        }
    }
}
