//! Dense real linear algebra on small matrices.
//!
//! Real Schur forms come from nalgebra; block reordering (stable eigenvalues
//! first) is done here with direct swaps of adjacent diagonal blocks. The
//! stabilizing Riccati solution is read off the ordered Schur basis of the
//! Hamiltonian and polished with one Newton step.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

use crate::lti::StateSpace;

pub type DenseMatrix = DMatrix<f64>;

/// A matrix is Hurwitz when every eigenvalue has real part below this.
pub const HURWITZ_THRESHOLD: f64 = -1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("{0} must be square")]
    NotSquare(&'static str),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("Schur iteration did not converge")]
    NoConvergence,
    #[error("{0} is singular")]
    Singular(&'static str),
    #[error("no stabilizing Riccati solution: {0}")]
    NoStabilizingSolution(String),
    #[error("matrix is not Hurwitz (spectral abscissa {0:e})")]
    NotHurwitz(f64),
    #[error("polynomial is not sign-definite on the imaginary axis: {0}")]
    Indefinite(String),
    #[error("resolvent is singular at omega = {0}")]
    SingularResolvent(f64),
    #[error("inertia mismatch: expected ({exp_pos}+, {exp_neg}-), found ({pos}+, {neg}-)")]
    InertiaMismatch { exp_pos: usize, exp_neg: usize, pos: usize, neg: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type LinalgResult<T> = std::result::Result<T, LinalgError>;

fn check_finite(a: &DMatrix<f64>, what: &'static str) -> LinalgResult<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LinalgError::NonFinite(what))
    }
}

/// Real Schur decomposition A = Q T Q'.
#[derive(Debug, Clone)]
pub struct RealSchur {
    pub q: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub eigs: Vec<Complex64>,
}

pub fn real_schur(a: &DMatrix<f64>) -> LinalgResult<RealSchur> {
    if a.nrows() != a.ncols() {
        return Err(LinalgError::NotSquare("Schur input"));
    }
    check_finite(a, "Schur input")?;
    let n = a.nrows();
    if n == 0 {
        return Ok(RealSchur { q: DMatrix::zeros(0, 0), t: DMatrix::zeros(0, 0), eigs: vec![] });
    }
    let schur = nalgebra::linalg::Schur::try_new(a.clone(), f64::EPSILON, 10_000 * n.max(1))
        .ok_or(LinalgError::NoConvergence)?;
    let (q, t) = schur.unpack();
    let mut s = RealSchur { q, t, eigs: vec![] };
    s.clean_blocks()?;
    s.refresh_eigs();
    Ok(s)
}

fn eig2x2(a: f64, b: f64, c: f64, d: f64) -> (Complex64, Complex64) {
    let half_tr = 0.5 * (a + d);
    let half_diff = 0.5 * (a - d);
    let disc = half_diff * half_diff + b * c;
    if disc >= 0.0 {
        let r = disc.sqrt();
        (Complex64::new(half_tr + r, 0.0), Complex64::new(half_tr - r, 0.0))
    } else {
        let r = (-disc).sqrt();
        (Complex64::new(half_tr, r), Complex64::new(half_tr, -r))
    }
}

impl RealSchur {
    /// Diagonal blocks as (start, size) pairs.
    pub fn blocks(&self) -> Vec<(usize, usize)> {
        let n = self.t.nrows();
        let mut out = Vec::new();
        let mut i = 0;
        while i < n {
            if i + 1 < n && self.t[(i + 1, i)] != 0.0 {
                out.push((i, 2));
                i += 2;
            } else {
                out.push((i, 1));
                i += 1;
            }
        }
        out
    }

    fn refresh_eigs(&mut self) {
        let mut eigs = Vec::with_capacity(self.t.nrows());
        for (k, size) in self.blocks() {
            if size == 1 {
                eigs.push(Complex64::new(self.t[(k, k)], 0.0));
            } else {
                let t = &self.t;
                let (l1, l2) = eig2x2(t[(k, k)], t[(k, k + 1)], t[(k + 1, k)], t[(k + 1, k + 1)]);
                eigs.push(l1);
                eigs.push(l2);
            }
        }
        self.eigs = eigs;
    }

    /// Zeroes negligible subdiagonals and splits 2×2 blocks that carry real
    /// eigenvalues.
    fn clean_blocks(&mut self) -> LinalgResult<()> {
        let n = self.t.nrows();
        for i in 0..n {
            for j in 0..i.saturating_sub(1) {
                self.t[(i, j)] = 0.0;
            }
        }
        for i in 0..n.saturating_sub(1) {
            let s = self.t[(i + 1, i)];
            let scale = self.t[(i, i)].abs() + self.t[(i + 1, i + 1)].abs();
            if s != 0.0 && s.abs() <= f64::EPSILON * scale {
                self.t[(i + 1, i)] = 0.0;
            }
        }
        let mut i = 0;
        while i + 1 < n {
            if self.t[(i + 1, i)] == 0.0 {
                i += 1;
                continue;
            }
            let (a, b, c, d) = (self.t[(i, i)], self.t[(i, i + 1)], self.t[(i + 1, i)], self.t[(i + 1, i + 1)]);
            let (l1, _) = eig2x2(a, b, c, d);
            if l1.im == 0.0 {
                // eigenvector of the 2×2 block for l1, rotated onto e1
                let (vx, vy) = if b.abs() > (l1.re - a).abs() || b != 0.0 {
                    (b, l1.re - a)
                } else {
                    (l1.re - d, c)
                };
                let r = vx.hypot(vy);
                if r == 0.0 {
                    self.t[(i + 1, i)] = 0.0;
                } else {
                    let (cs, sn) = (vx / r, vy / r);
                    self.apply_rotation(i, cs, sn);
                    self.t[(i + 1, i)] = 0.0;
                }
                i += 1;
            } else {
                i += 2;
            }
        }
        Ok(())
    }

    // G = [[c, -s], [s, c]] acting on coordinates (i, i+1): T <- G'TG, Q <- QG.
    fn apply_rotation(&mut self, i: usize, c: f64, s: f64) {
        let n = self.t.nrows();
        for j in 0..n {
            let (x, y) = (self.t[(i, j)], self.t[(i + 1, j)]);
            self.t[(i, j)] = c * x + s * y;
            self.t[(i + 1, j)] = -s * x + c * y;
        }
        for j in 0..n {
            let (x, y) = (self.t[(j, i)], self.t[(j, i + 1)]);
            self.t[(j, i)] = c * x + s * y;
            self.t[(j, i + 1)] = -s * x + c * y;
        }
        for j in 0..n {
            let (x, y) = (self.q[(j, i)], self.q[(j, i + 1)]);
            self.q[(j, i)] = c * x + s * y;
            self.q[(j, i + 1)] = -s * x + c * y;
        }
    }

    /// Swaps the adjacent diagonal blocks starting at `k` with sizes `p` and `q`.
    fn swap(&mut self, k: usize, p: usize, q: usize) -> LinalgResult<()> {
        let n = self.t.nrows();
        let nb = p + q;
        let t11 = self.t.view((k, k), (p, p)).clone_owned();
        let t12 = self.t.view((k, k + p), (p, q)).clone_owned();
        let t22 = self.t.view((k + p, k + p), (q, q)).clone_owned();
        // T11 X - X T22 = -T12 as a Kronecker system over column-major vec(X)
        let mut kron = DMatrix::zeros(p * q, p * q);
        for cj in 0..q {
            for ri in 0..p {
                let row = cj * p + ri;
                for l in 0..p {
                    kron[(row, cj * p + l)] += t11[(ri, l)];
                }
                for l in 0..q {
                    kron[(row, l * p + ri)] -= t22[(l, cj)];
                }
            }
        }
        let rhs = DVector::from_iterator(p * q, (0..q).flat_map(|cj| (0..p).map(move |ri| (ri, cj))).map(|(ri, cj)| -t12[(ri, cj)]));
        let x = kron.lu().solve(&rhs).ok_or(LinalgError::Singular("block swap Sylvester system"))?;
        let mut basis = DMatrix::zeros(nb, nb);
        for cj in 0..q {
            for ri in 0..p {
                basis[(ri, cj)] = x[cj * p + ri];
            }
            basis[(p + cj, cj)] = 1.0;
        }
        for ri in 0..p {
            basis[(ri, q + ri)] = 1.0;
        }
        let g = basis.qr().q();
        let rows = self.t.rows(k, nb).clone_owned();
        self.t.rows_mut(k, nb).copy_from(&(g.transpose() * rows));
        let cols = self.t.columns(k, nb).clone_owned();
        self.t.columns_mut(k, nb).copy_from(&(cols * &g));
        let qc = self.q.columns(k, nb).clone_owned();
        self.q.columns_mut(k, nb).copy_from(&(qc * &g));
        for i in (k + q)..(k + nb) {
            for j in k..(k + q) {
                self.t[(i, j)] = 0.0;
            }
        }
        if q == 1 {
            self.t[(k + 1, k)] = 0.0;
        }
        if p == 1 {
            let i = k + q;
            if i >= 1 && i - 1 >= k + q {
                self.t[(i, i - 1)] = 0.0;
            }
        }
        let _ = n;
        self.clean_blocks()
    }

    /// Moves all blocks whose eigenvalues satisfy `select` to the leading
    /// positions. Returns the dimension of the selected invariant subspace.
    pub fn reorder<F: Fn(Complex64) -> bool>(&mut self, select: F) -> LinalgResult<usize> {
        let mut dest = 0;
        loop {
            let blocks = self.blocks();
            let next = blocks.iter().position(|&(k, sz)| {
                k >= dest && {
                    let t = &self.t;
                    let lam = if sz == 1 {
                        Complex64::new(t[(k, k)], 0.0)
                    } else {
                        eig2x2(t[(k, k)], t[(k, k + 1)], t[(k + 1, k)], t[(k + 1, k + 1)]).0
                    };
                    select(lam)
                }
            });
            let Some(bi) = next else { break };
            let (mut k, sz) = blocks[bi];
            // bubble it left until it reaches dest
            while k > dest {
                let prev = self.blocks().into_iter().rev().find(|&(s, psz)| s + psz == k).ok_or_else(|| {
                    LinalgError::Invalid("inconsistent Schur block structure".into())
                })?;
                self.swap(prev.0, prev.1, sz)?;
                k = prev.0;
            }
            dest = k + sz;
        }
        self.refresh_eigs();
        Ok(dest)
    }

    pub fn reorder_stable_first(&mut self) -> LinalgResult<usize> {
        self.reorder(|l| l.re < 0.0)
    }
}

pub fn eigenvalues(a: &DMatrix<f64>) -> LinalgResult<Vec<Complex64>> {
    Ok(real_schur(a)?.eigs)
}

/// Largest real part of the spectrum (−∞ for the empty matrix).
pub fn spectral_abscissa(a: &DMatrix<f64>) -> LinalgResult<f64> {
    Ok(eigenvalues(a)?.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max))
}

pub fn is_hurwitz(a: &DMatrix<f64>) -> LinalgResult<bool> {
    Ok(spectral_abscissa(a)? < HURWITZ_THRESHOLD)
}

/// Symmetric eigenvalues in ascending order.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    if a.nrows() == 0 {
        return vec![];
    }
    let sym = 0.5 * (a + a.transpose());
    let mut e: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    e.sort_by(|x, y| x.partial_cmp(y).unwrap());
    e
}

pub fn min_sym_eigenvalue(a: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(a).first().copied().unwrap_or(f64::INFINITY)
}

pub fn max_sym_eigenvalue(a: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(a).last().copied().unwrap_or(f64::NEG_INFINITY)
}

/// Counts (positive, negative) eigenvalues of a symmetric matrix, treating
/// |λ| ≤ tol as zero.
pub fn inertia(a: &DMatrix<f64>, tol: f64) -> (usize, usize, usize) {
    let e = sym_eigenvalues(a);
    let pos = e.iter().filter(|&&l| l > tol).count();
    let neg = e.iter().filter(|&&l| l < -tol).count();
    (pos, neg, e.len() - pos - neg)
}

/// Solves A'X + XA + C = 0 through the Kronecker form (small n only).
pub fn solve_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> LinalgResult<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(LinalgError::NotSquare("Lyapunov A"));
    }
    if c.shape() != (n, n) {
        return Err(LinalgError::DimensionMismatch { what: "Lyapunov C", expected: n, got: c.nrows() });
    }
    // vec(A'X + XA) = (I ⊗ A' + A' ⊗ I) vec(X), column-major
    let at = a.transpose();
    let mut k = DMatrix::zeros(n * n, n * n);
    for j in 0..n {
        for i in 0..n {
            let row = j * n + i;
            for l in 0..n {
                k[(row, j * n + l)] += at[(i, l)];
                k[(row, l * n + i)] += at[(j, l)];
            }
        }
    }
    let rhs = DVector::from_iterator(n * n, c.iter().map(|v| -v));
    let x = k.lu().solve(&rhs).ok_or(LinalgError::Singular("Lyapunov operator"))?;
    let x = DMatrix::from_column_slice(n, n, x.as_slice());
    Ok(0.5 * (&x + x.transpose()))
}

/// Residual A'X + XA − (XB+S)R⁻¹(XB+S)' + Q.
pub fn are_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    s: &DMatrix<f64>,
    x: &DMatrix<f64>,
) -> LinalgResult<DMatrix<f64>> {
    let rinv = r.clone().try_inverse().ok_or(LinalgError::Singular("R"))?;
    let xbs = x * b + s;
    Ok(a.transpose() * x + x * a - &xbs * rinv * xbs.transpose() + q)
}

/// Stabilizing solution of A'X + XA − (XB+S)R⁻¹(XB+S)' + Q = 0.
///
/// R may be indefinite; only invertibility is required. The solution makes
/// A − BR⁻¹(XB+S)' Hurwitz.
pub fn solve_are(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    s: &DMatrix<f64>,
) -> LinalgResult<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(LinalgError::NotSquare("ARE A"));
    }
    let m = b.ncols();
    if b.nrows() != n {
        return Err(LinalgError::DimensionMismatch { what: "ARE B rows", expected: n, got: b.nrows() });
    }
    if q.shape() != (n, n) {
        return Err(LinalgError::DimensionMismatch { what: "ARE Q", expected: n, got: q.nrows() });
    }
    if r.shape() != (m, m) {
        return Err(LinalgError::DimensionMismatch { what: "ARE R", expected: m, got: r.nrows() });
    }
    if s.shape() != (n, m) {
        return Err(LinalgError::DimensionMismatch { what: "ARE S", expected: n, got: s.nrows() });
    }
    for (mat, what) in [(a, "ARE A"), (b, "ARE B"), (q, "ARE Q"), (r, "ARE R"), (s, "ARE S")] {
        check_finite(mat, what)?;
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let rsym = 0.5 * (r + r.transpose());
    let rinv = rsym.clone().try_inverse().ok_or(LinalgError::Singular("R"))?;
    let abar = a - b * &rinv * s.transpose();
    let g = b * &rinv * b.transpose();
    let qbar = q - s * &rinv * s.transpose();
    let qbar = 0.5 * (&qbar + qbar.transpose());
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(&abar);
    h.view_mut((0, n), (n, n)).copy_from(&(-&g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-&qbar));
    h.view_mut((n, n), (n, n)).copy_from(&(-abar.transpose()));

    let mut schur = real_schur(&h)?;
    let hnorm = h.norm().max(1.0);
    if let Some(l) = schur.eigs.iter().find(|l| l.re.abs() <= 1e-10 * hnorm) {
        return Err(LinalgError::NoStabilizingSolution(format!(
            "Hamiltonian has an eigenvalue on the imaginary axis ({:.3e}{:+.3e}i)",
            l.re, l.im
        )));
    }
    let k = schur.reorder_stable_first()?;
    if k != n {
        return Err(LinalgError::NoStabilizingSolution(format!("stable subspace has dimension {k}, expected {n}")));
    }
    let u1 = schur.q.view((0, 0), (n, n)).clone_owned();
    let u2 = schur.q.view((n, 0), (n, n)).clone_owned();
    let u1t_inv = u1
        .transpose()
        .lu()
        .solve(&u2.transpose())
        .ok_or_else(|| LinalgError::NoStabilizingSolution("stable basis is not a graph".into()))?;
    // X = U2 U1^{-1} = (U1^{-T} U2^T)^T
    let mut x = u1t_inv.transpose();
    x = 0.5 * (&x + x.transpose());

    // one Newton (Kleinman) polish step, kept only if it helps
    let res = are_residual(a, b, q, &rsym, s, &x)?;
    let acl = a - b * &rinv * (&x * b + s).transpose();
    if let Ok(dx) = solve_lyapunov(&acl, &res) {
        let x_new = &x + dx;
        let res_new = are_residual(a, b, q, &rsym, s, &x_new)?;
        if res_new.norm() < res.norm() && x_new.iter().all(|v| v.is_finite()) {
            x = 0.5 * (&x_new + x_new.transpose());
        }
    }
    let acl = a - b * &rinv * (&x * b + s).transpose();
    let sa = spectral_abscissa(&acl)?;
    if sa >= HURWITZ_THRESHOLD {
        return Err(LinalgError::NoStabilizingSolution(format!("closed loop spectral abscissa {sa:e}")));
    }
    Ok(x)
}

/// Roots of Σ c_k z^k (ascending coefficients) via companion eigenvalues.
pub fn poly_roots(coeffs: &[f64]) -> LinalgResult<Vec<Complex64>> {
    let mut c = coeffs.to_vec();
    while c.last() == Some(&0.0) {
        c.pop();
    }
    let deg = c.len().saturating_sub(1);
    if deg == 0 {
        return Ok(vec![]);
    }
    let lead = c[deg];
    let mut comp = DMatrix::zeros(deg, deg);
    for i in 1..deg {
        comp[(i, i - 1)] = 1.0;
    }
    for i in 0..deg {
        comp[(i, deg - 1)] = -c[i] / lead;
    }
    eigenvalues(&comp)
}

/// Univariate polynomial in ω with only even powers; `coeffs[k]` multiplies ω^{2k}.
#[derive(Debug, Clone, PartialEq)]
pub struct EvenPoly(pub Vec<f64>);

impl EvenPoly {
    pub fn eval(&self, omega: f64) -> f64 {
        let w2 = omega * omega;
        self.0.iter().rev().fold(0.0, |acc, c| acc * w2 + c)
    }
}

/// Ratio of real polynomials in s, coefficients ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Rational {
    pub num: Vec<f64>,
    pub den: Vec<f64>,
}

fn horner_c(c: &[f64], s: Complex64) -> Complex64 {
    c.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &v| acc * s + v)
}

impl Rational {
    pub fn eval(&self, s: Complex64) -> Complex64 {
        horner_c(&self.num, s) / horner_c(&self.den, s)
    }

    pub fn poles(&self) -> LinalgResult<Vec<Complex64>> {
        poly_roots(&self.den)
    }

    pub fn zeros(&self) -> LinalgResult<Vec<Complex64>> {
        poly_roots(&self.num)
    }
}

fn poly_from_roots(roots: &[Complex64], lead: f64) -> Vec<f64> {
    let mut c = vec![Complex64::new(lead, 0.0)];
    for r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); c.len() + 1];
        for (i, v) in c.iter().enumerate() {
            next[i + 1] += v;
            next[i] -= v * r;
        }
        c = next;
    }
    c.into_iter().map(|v| v.re).collect()
}

/// Left-half-plane square root n(s) with n(s)n(−s) = p(ω) at s = jω.
fn even_factor(p: &EvenPoly, what: &str, allow_axis: bool) -> LinalgResult<Vec<f64>> {
    let mut c = p.0.clone();
    while c.last() == Some(&0.0) {
        c.pop();
    }
    if c.is_empty() {
        return Err(LinalgError::Indefinite(format!("{what} is identically zero")));
    }
    let top = *c.last().unwrap();
    if top <= 0.0 {
        return Err(LinalgError::Indefinite(format!("{what} has a non-positive leading coefficient")));
    }
    let zero_mult = c.iter().take_while(|&&v| v == 0.0).count();
    if zero_mult > 0 && !allow_axis {
        return Err(LinalgError::Indefinite(format!("{what} vanishes at omega = 0")));
    }
    // r(z) = Σ c_k (−z)^k with z = s²
    let r: Vec<f64> = c[zero_mult..]
        .iter()
        .enumerate()
        .map(|(k, &v)| if (k + zero_mult) % 2 == 0 { v } else { -v })
        .collect();
    let zroots = poly_roots(&r)?;
    let mut sroots: Vec<Complex64> = vec![Complex64::new(0.0, 0.0); zero_mult];
    let mut axis: Vec<f64> = Vec::new();
    for z in zroots {
        if z.im.abs() <= 1e-9 * z.norm().max(1e-300) && z.re < 0.0 {
            axis.push(-z.re);
        } else {
            sroots.push(-z.sqrt());
        }
    }
    if !axis.is_empty() {
        if !allow_axis {
            return Err(LinalgError::Indefinite(format!("{what} vanishes on the imaginary axis")));
        }
        if axis.len() % 2 == 1 {
            return Err(LinalgError::Indefinite(format!("{what} changes sign on the imaginary axis")));
        }
        axis.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in axis.chunks(2) {
            if (pair[0] - pair[1]).abs() > 1e-6 * pair[0].max(1.0) {
                return Err(LinalgError::Indefinite(format!("{what} changes sign on the imaginary axis")));
            }
            let w = (0.5 * (pair[0] + pair[1])).sqrt();
            sroots.push(Complex64::new(0.0, w));
            sroots.push(Complex64::new(0.0, -w));
        }
    }
    Ok(poly_from_roots(&sroots, top.sqrt()))
}

/// Stable minimum-phase ψ(s) with |ψ(jω)|² = num(ω)/den(ω).
pub fn spectral_factor(num: &EvenPoly, den: &EvenPoly) -> LinalgResult<Rational> {
    for k in 0..=200 {
        let w = 10f64.powf(-3.0 + 6.0 * k as f64 / 200.0);
        if num.eval(w) < -1e-12 * num.0.iter().map(|c| c.abs()).sum::<f64>() * (1.0 + w.powi(2 * num.0.len() as i32)) {
            return Err(LinalgError::Indefinite(format!("numerator negative at omega = {w:e}")));
        }
        if den.eval(w) <= 0.0 {
            return Err(LinalgError::Indefinite(format!("denominator non-positive at omega = {w:e}")));
        }
    }
    let n = even_factor(num, "numerator", true)?;
    let d = even_factor(den, "denominator", false)?;
    Ok(Rational { num: n, den: d })
}

fn sigma_max(g: &DMatrix<Complex64>) -> f64 {
    if g.is_empty() {
        return 0.0;
    }
    g.clone().singular_values().iter().copied().fold(0.0, f64::max)
}

/// H∞ norm of a stable realization.
///
/// Bisection on γ: γ exceeds the norm iff the Hamiltonian of the bounded
/// real lemma has no imaginary-axis eigenvalues. Imaginary eigenvalues found
/// along the way raise the lower bound. Falls back to a refined frequency
/// grid if an eigenvalue computation fails.
pub fn hinf_norm(g: &StateSpace, tol: f64) -> LinalgResult<f64> {
    let a = g.a();
    let n = a.nrows();
    let dnorm = if g.d().is_empty() { 0.0 } else { g.d().clone().singular_values().max() };
    if n == 0 {
        return Ok(dnorm);
    }
    let sa = spectral_abscissa(a)?;
    if sa >= HURWITZ_THRESHOLD {
        return Err(LinalgError::NotHurwitz(sa));
    }
    let tol = tol.max(1e-12);
    let eval = |w: f64| -> LinalgResult<f64> { Ok(sigma_max(&g.freq_response(w)?)) };
    let mut lo = dnorm.max(eval(0.0)?);
    for k in 0..=40 {
        let w = 10f64.powf(-3.0 + 6.0 * k as f64 / 40.0);
        lo = lo.max(eval(w)?);
    }
    if lo == 0.0 {
        return Ok(0.0);
    }

    let imag_freqs = |gamma: f64| -> LinalgResult<Vec<f64>> {
        let (b, c, d) = (g.b(), g.c(), g.d());
        let m = b.ncols();
        let p = c.nrows();
        let r = DMatrix::<f64>::identity(m, m) * (gamma * gamma) - d.transpose() * d;
        let rinv = r.try_inverse().ok_or(LinalgError::Singular("γ²I − D'D"))?;
        let ae = a + b * &rinv * d.transpose() * c;
        let mut h = DMatrix::zeros(2 * n, 2 * n);
        h.view_mut((0, 0), (n, n)).copy_from(&ae);
        h.view_mut((0, n), (n, n)).copy_from(&(b * &rinv * b.transpose()));
        let qe = c.transpose() * (DMatrix::<f64>::identity(p, p) + d * &rinv * d.transpose()) * c;
        h.view_mut((n, 0), (n, n)).copy_from(&(-qe));
        h.view_mut((n, n), (n, n)).copy_from(&(-ae.transpose()));
        let eigs = eigenvalues(&h)?;
        Ok(eigs
            .iter()
            .filter(|l| l.re.abs() <= 1e-8 * l.norm().max(1.0))
            .map(|l| l.im.abs())
            .collect())
    };

    let bisect = || -> LinalgResult<f64> {
        let mut lo = lo;
        let mut hi = lo * 2.0;
        let mut guard = 0;
        loop {
            let freqs = imag_freqs(hi)?;
            if freqs.is_empty() {
                break;
            }
            for w in freqs {
                lo = lo.max(eval(w)?);
            }
            hi *= 2.0;
            guard += 1;
            if guard > 200 {
                return Err(LinalgError::Invalid("H∞ upper bound search diverged".into()));
            }
        }
        while hi - lo > tol * lo {
            let mid = 0.5 * (lo + hi);
            let freqs = imag_freqs(mid)?;
            if freqs.is_empty() {
                hi = mid;
            } else {
                let mut best = mid;
                for w in freqs {
                    best = best.max(eval(w)?);
                }
                lo = best.min(hi);
            }
        }
        Ok(0.5 * (lo + hi))
    };
    match bisect() {
        Ok(v) => Ok(v),
        Err(LinalgError::NoConvergence) => grid_peak(g, tol),
        Err(e) => Err(e),
    }
}

fn grid_peak(g: &StateSpace, tol: f64) -> LinalgResult<f64> {
    let eval = |w: f64| -> LinalgResult<f64> { Ok(sigma_max(&g.freq_response(w)?)) };
    let npts = 4000;
    let grid: Vec<f64> = (0..npts).map(|k| 10f64.powf(-4.0 + 8.0 * k as f64 / (npts - 1) as f64)).collect();
    let mut best = (0usize, eval(grid[0])?);
    for (k, &w) in grid.iter().enumerate() {
        let v = eval(w)?;
        if v > best.1 {
            best = (k, v);
        }
    }
    let mut a = grid[best.0.saturating_sub(1)];
    let mut b = grid[(best.0 + 1).min(npts - 1)];
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut peak = best.1.max(eval(0.0)?);
    while (b - a) > tol * b {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        let (fc, fd) = (eval(c)?, eval(d)?);
        peak = peak.max(fc).max(fd);
        if fc > fd {
            b = d;
        } else {
            a = c;
        }
    }
    Ok(peak)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn sorted(mut e: Vec<Complex64>) -> Vec<Complex64> {
        e.sort_by(|a, b| a.re.partial_cmp(&b.re).unwrap().then(a.im.partial_cmp(&b.im).unwrap()));
        e
    }

    #[test]
    fn schur_diagonal_and_rotation() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0]);
        let s = real_schur(&a).unwrap();
        let e = sorted(s.eigs.clone());
        assert!((e[0].re + 2.0).abs() < 1e-14 && (e[1].re + 1.0).abs() < 1e-14);
        let r = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let e = sorted(real_schur(&r).unwrap().eigs);
        assert!(e[0].re.abs() < 1e-14 && (e[0].im + 1.0).abs() < 1e-14);
        assert!((e[1].im - 1.0).abs() < 1e-14);
    }

    #[test]
    fn schur_reconstruction_and_reordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [3, 6, 8] {
            let a = random_matrix(&mut rng, n, n);
            let mut s = real_schur(&a).unwrap();
            let orig = sorted(s.eigs.clone());
            let check = |s: &RealSchur| {
                let rec = &s.q * &s.t * s.q.transpose();
                assert!((&a - rec).norm() / a.norm() <= 1e-10);
                let qtq = s.q.transpose() * &s.q;
                assert!((qtq - DMatrix::<f64>::identity(n, n)).norm() <= 1e-10);
                for i in 0..n {
                    for j in 0..i.saturating_sub(1) {
                        assert_eq!(s.t[(i, j)], 0.0);
                    }
                }
            };
            check(&s);
            let k = s.reorder_stable_first().unwrap();
            check(&s);
            let stable = orig.iter().filter(|l| l.re < 0.0).count();
            assert_eq!(k, stable);
            for (i, l) in s.eigs.iter().enumerate() {
                assert_eq!(l.re < 0.0, i < k, "eigenvalue {l} at position {i}");
            }
            let after = sorted(s.eigs.clone());
            for (x, y) in orig.iter().zip(&after) {
                assert!((x - y).norm() <= 1e-8 * (1.0 + x.norm()));
            }
        }
    }

    #[test]
    fn scalar_are() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let x = solve_are(&(-&one), &one, &one, &one, &DMatrix::zeros(1, 1)).unwrap();
        assert!((x[(0, 0)] - (2f64.sqrt() - 1.0)).abs() < 1e-12);
        let z = DMatrix::zeros(1, 1);
        let x = solve_are(&(-&one), &z, &z, &one, &z).unwrap();
        assert!(x[(0, 0)].abs() < 1e-14);
    }

    #[test]
    fn random_are_residual_and_stability() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let a = random_matrix(&mut rng, 3, 3);
            let b = random_matrix(&mut rng, 3, 2);
            let c = random_matrix(&mut rng, 3, 3);
            let q = c.transpose() * &c + DMatrix::identity(3, 3);
            let r = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
            let s = random_matrix(&mut rng, 3, 2) * 0.1;
            let x = solve_are(&a, &b, &q, &r, &s).unwrap();
            let res = are_residual(&a, &b, &q, &r, &s, &x).unwrap();
            assert!(res.norm() <= 1e-8 * x.norm().max(1.0), "residual {}", res.norm());
            assert!((&x - x.transpose()).norm() <= 1e-10);
            let acl = &a - &b * r.clone().try_inverse().unwrap() * (&x * &b + &s).transpose();
            assert!(is_hurwitz(&acl).unwrap());
        }
    }

    #[test]
    fn are_indefinite_r() {
        // Q = 0, S = 0 with Hurwitz A gives X = 0 regardless of R's signature
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.3, 0.0, -2.0]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]);
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let x = solve_are(&a, &b, &DMatrix::zeros(2, 2), &r, &DMatrix::zeros(2, 2)).unwrap();
        assert!(x.norm() < 1e-12);
    }

    #[test]
    fn are_rejects_singular_r_and_axis_eigs() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let z = DMatrix::zeros(1, 1);
        assert_eq!(solve_are(&(-&one), &one, &one, &z, &z), Err(LinalgError::Singular("R")));
        // A = 0, B = 0: Hamiltonian eigenvalues are 0
        assert!(matches!(solve_are(&z, &z, &one, &one, &z), Err(LinalgError::NoStabilizingSolution(_))));
    }

    fn check_factor(num: &EvenPoly, den: &EvenPoly, psi: &Rational) {
        for k in 0..200 {
            let w = 10f64.powf(-3.0 + 6.0 * k as f64 / 199.0);
            let v = psi.eval(Complex64::new(0.0, w)).norm_sqr() * den.eval(w);
            let target = num.eval(w);
            assert!((v - target).abs() <= 1e-8 * target.abs().max(1e-300) + 1e-300, "w={w} {v} vs {target}");
        }
        assert!(psi.poles().unwrap().iter().all(|p| p.re < 0.0));
        assert!(psi.zeros().unwrap().iter().all(|z| z.re <= 1e-12));
    }

    #[test]
    fn delay_weight_factor() {
        let num = EvenPoly(vec![0.0, 1.0, 0.08]);
        let den = EvenPoly(vec![1.0, 0.13, 0.02]);
        let psi = spectral_factor(&num, &den).unwrap();
        check_factor(&num, &den, &psi);
        let beta = (0.13 + 2.0 * 0.02f64.sqrt()).sqrt();
        assert!((beta - 0.642526).abs() < 5e-6);
        let expect_num = [0.0, 1.0, 0.08f64.sqrt()];
        let expect_den = [1.0, beta, 0.02f64.sqrt()];
        for (a, b) in psi.num.iter().zip(expect_num.iter()) {
            assert!((a - b).abs() < 1e-10, "{:?}", psi.num);
        }
        for (a, b) in psi.den.iter().zip(expect_den.iter()) {
            assert!((a - b).abs() < 1e-10, "{:?}", psi.den);
        }
    }

    #[test]
    fn trivial_factors() {
        let one = EvenPoly(vec![1.0]);
        let psi = spectral_factor(&one, &one).unwrap();
        assert_eq!(psi.num, vec![1.0]);
        assert_eq!(psi.den, vec![1.0]);
        let den = EvenPoly(vec![1.0, 1.0]);
        let psi = spectral_factor(&one, &den).unwrap();
        assert_eq!(psi.num, vec![1.0]);
        assert!((psi.den[0] - 1.0).abs() < 1e-14 && (psi.den[1] - 1.0).abs() < 1e-14);
        check_factor(&one, &den, &psi);
    }

    #[test]
    fn factor_with_axis_zero_and_errors() {
        // (1 - ω²)² = 1 - 2ω² + ω⁴ has a double zero at ω = 1
        let num = EvenPoly(vec![1.0, -2.0, 1.0]);
        let den = EvenPoly(vec![1.0, 0.0, 0.0, 1.0]);
        let psi = spectral_factor(&num, &den).unwrap();
        for k in 0..50 {
            let w = 0.1 + 0.07 * k as f64;
            let v = psi.eval(Complex64::new(0.0, w)).norm_sqr() * den.eval(w);
            assert!((v - num.eval(w)).abs() <= 1e-8 * (1.0 + num.eval(w)));
        }
        assert!(spectral_factor(&EvenPoly(vec![1.0, -1.0]), &den).is_err());
        assert!(spectral_factor(&EvenPoly(vec![1.0]), &EvenPoly(vec![-1.0])).is_err());
    }

    #[test]
    fn hinf_examples() {
        let g = StateSpace::new(
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        assert!((hinf_norm(&g, 1e-9).unwrap() - 1.0).abs() < 1e-8);

        let d = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 4.0, 0.0]);
        let s = StateSpace::static_gain(d);
        assert!((hinf_norm(&s, 1e-9).unwrap() - 5.0).abs() < 1e-12);

        let res = StateSpace::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.1]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let zeta: f64 = 0.05;
        let peak = 1.0 / (2.0 * zeta * (1.0 - zeta * zeta).sqrt());
        let h = hinf_norm(&res, 1e-9).unwrap();
        assert!((h - peak).abs() <= 1e-8 * peak, "{h} vs {peak}");
        assert!((peak - 10.0125).abs() < 1e-4);

        let unstable = StateSpace::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        assert!(matches!(hinf_norm(&unstable, 1e-6), Err(LinalgError::NotHurwitz(_))));
    }

    #[test]
    fn hinf_matches_dense_grid_on_random_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..12 {
            let n = 1 + trial % 8;
            let m = 1 + trial % 2;
            let p = 1 + (trial / 2) % 2;
            let mut a = random_matrix(&mut rng, n, n);
            let sa = spectral_abscissa(&a).unwrap();
            a -= DMatrix::identity(n, n) * (sa + rng.gen_range(0.05..1.0));
            let g = StateSpace::new(a, random_matrix(&mut rng, n, m), random_matrix(&mut rng, p, n), random_matrix(&mut rng, p, m) * 0.3).unwrap();
            let h = hinf_norm(&g, 1e-8).unwrap();
            let mut grid_max: f64 = 0.0;
            for k in 0..4000 {
                let w = 10f64.powf(-3.0 + 6.0 * k as f64 / 3999.0);
                grid_max = grid_max.max(sigma_max(&g.freq_response(w).unwrap()));
            }
            grid_max = grid_max.max(sigma_max(&g.freq_response(0.0).unwrap()));
            assert!(h >= grid_max * (1.0 - 1e-8), "trial {trial}: {h} < {grid_max}");
            assert!((h - grid_max).abs() <= 1e-4 * grid_max, "trial {trial}: {h} vs {grid_max}");
        }
    }
}
