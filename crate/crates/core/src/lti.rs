//! Continuous-time LTI realizations and the J-spectral factorization of
//! combined multipliers.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::linalg::{self, LinalgError, LinalgResult, Rational};

#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
}

impl StateSpace {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> LinalgResult<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(LinalgError::NotSquare("state matrix A"));
        }
        if b.nrows() != n {
            return Err(LinalgError::DimensionMismatch { what: "rows of B", expected: n, got: b.nrows() });
        }
        if c.ncols() != n {
            return Err(LinalgError::DimensionMismatch { what: "columns of C", expected: n, got: c.ncols() });
        }
        if d.nrows() != c.nrows() {
            return Err(LinalgError::DimensionMismatch { what: "rows of D", expected: c.nrows(), got: d.nrows() });
        }
        if d.ncols() != b.ncols() {
            return Err(LinalgError::DimensionMismatch { what: "columns of D", expected: b.ncols(), got: d.ncols() });
        }
        for (m, what) in [(&a, "A"), (&b, "B"), (&c, "C"), (&d, "D")] {
            if !m.iter().all(|v| v.is_finite()) {
                return Err(LinalgError::NonFinite(what));
            }
        }
        Ok(Self { a, b, c, d })
    }

    pub fn static_gain(d: DMatrix<f64>) -> Self {
        let (p, m) = d.shape();
        Self { a: DMatrix::zeros(0, 0), b: DMatrix::zeros(0, m), c: DMatrix::zeros(p, 0), d }
    }

    pub fn identity(m: usize) -> Self {
        Self::static_gain(DMatrix::identity(m, m))
    }

    /// Controllable canonical realization of a proper SISO rational function.
    pub fn from_rational(g: &Rational) -> LinalgResult<Self> {
        let mut den = g.den.clone();
        while den.last() == Some(&0.0) {
            den.pop();
        }
        let mut num = g.num.clone();
        while num.last() == Some(&0.0) {
            num.pop();
        }
        if den.is_empty() {
            return Err(LinalgError::Invalid("zero denominator".into()));
        }
        let n = den.len() - 1;
        if num.len() > n + 1 {
            return Err(LinalgError::Invalid("improper rational function".into()));
        }
        let lead = den[n];
        let den: Vec<f64> = den.iter().map(|v| v / lead).collect();
        let mut num: Vec<f64> = num.iter().map(|v| v / lead).collect();
        num.resize(n + 1, 0.0);
        let dcoef = num[n];
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n.saturating_sub(1) {
            a[(i, i + 1)] = 1.0;
        }
        for j in 0..n {
            if n > 0 {
                a[(n - 1, j)] = -den[j];
            }
        }
        let mut b = DMatrix::zeros(n, 1);
        if n > 0 {
            b[(n - 1, 0)] = 1.0;
        }
        let c = DMatrix::from_fn(1, n, |_, j| num[j] - dcoef * den[j]);
        Self::new(a, b, c, DMatrix::from_element(1, 1, dcoef))
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }
    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }
    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn is_stable(&self) -> LinalgResult<bool> {
        linalg::is_hurwitz(&self.a)
    }

    /// Realization of G(θs) for θ > 0.
    pub fn time_scaled(&self, theta: f64) -> LinalgResult<Self> {
        if !(theta > 0.0) || !theta.is_finite() {
            return Err(LinalgError::Invalid(format!("time scale must be positive, got {theta}")));
        }
        Self::new(&self.a / theta, &self.b / theta, self.c.clone(), self.d.clone())
    }

    /// Diagonal similarity that equalizes row and column norms of A
    /// (power-of-two scalings, so the transfer function is unchanged exactly).
    pub fn balanced(&self) -> Self {
        let n = self.n_states();
        let mut a = self.a.clone();
        let mut t = vec![1.0f64; n];
        for _ in 0..100 {
            let mut done = true;
            for i in 0..n {
                let c: f64 = (0..n).filter(|&k| k != i).map(|k| a[(k, i)].abs()).sum();
                let r: f64 = (0..n).filter(|&k| k != i).map(|k| a[(i, k)].abs()).sum();
                if c == 0.0 || r == 0.0 {
                    continue;
                }
                let mut f = 1.0;
                let (mut cc, mut rr) = (c, r);
                while cc < rr / 2.0 {
                    cc *= 2.0;
                    rr /= 2.0;
                    f *= 2.0;
                }
                while cc >= rr * 2.0 {
                    cc /= 2.0;
                    rr *= 2.0;
                    f /= 2.0;
                }
                if (cc + rr) < 0.95 * (c + r) {
                    done = false;
                    t[i] *= f;
                    for k in 0..n {
                        a[(k, i)] *= f;
                        a[(i, k)] /= f;
                    }
                }
            }
            if done {
                break;
            }
        }
        let b = DMatrix::from_fn(n, self.n_inputs(), |i, j| self.b[(i, j)] / t[i]);
        let c = DMatrix::from_fn(self.n_outputs(), n, |i, j| self.c[(i, j)] * t[j]);
        Self { a, b, c, d: self.d.clone() }
    }

    /// C(jωI − A)⁻¹B + D.
    pub fn freq_response(&self, omega: f64) -> LinalgResult<DMatrix<Complex64>> {
        let n = self.n_states();
        let dc = self.d.map(|v| Complex64::new(v, 0.0));
        if n == 0 {
            return Ok(dc);
        }
        let jw = Complex64::new(0.0, omega);
        let res = DMatrix::from_fn(n, n, |i, j| if i == j { jw - self.a[(i, j)] } else { Complex64::new(-self.a[(i, j)], 0.0) });
        let bc = self.b.map(|v| Complex64::new(v, 0.0));
        let x = res.lu().solve(&bc).ok_or(LinalgError::SingularResolvent(omega))?;
        if !x.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
            return Err(LinalgError::SingularResolvent(omega));
        }
        Ok(self.c.map(|v| Complex64::new(v, 0.0)) * x + dc)
    }

    /// State derivative for input u.
    pub fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    pub fn output(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.c * x + &self.d * u
    }
}

/// Systems sharing one input, outputs stacked.
pub fn stack_outputs(list: &[StateSpace]) -> LinalgResult<StateSpace> {
    let first = list.first().ok_or_else(|| LinalgError::Invalid("empty system list".into()))?;
    let m = first.n_inputs();
    for g in list {
        if g.n_inputs() != m {
            return Err(LinalgError::DimensionMismatch { what: "input dimension in stack", expected: m, got: g.n_inputs() });
        }
    }
    let n: usize = list.iter().map(|g| g.n_states()).sum();
    let p: usize = list.iter().map(|g| g.n_outputs()).sum();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, m);
    let mut c = DMatrix::zeros(p, n);
    let mut d = DMatrix::zeros(p, m);
    let (mut si, mut oi) = (0, 0);
    for g in list {
        let (gn, gp) = (g.n_states(), g.n_outputs());
        a.view_mut((si, si), (gn, gn)).copy_from(&g.a);
        b.view_mut((si, 0), (gn, m)).copy_from(&g.b);
        c.view_mut((oi, si), (gp, gn)).copy_from(&g.c);
        d.view_mut((oi, 0), (gp, m)).copy_from(&g.d);
        si += gn;
        oi += gp;
    }
    StateSpace::new(a, b, c, d)
}

/// Block-diagonal (parallel, separate inputs and outputs) interconnection.
pub fn append(list: &[StateSpace]) -> LinalgResult<StateSpace> {
    let n: usize = list.iter().map(|g| g.n_states()).sum();
    let m: usize = list.iter().map(|g| g.n_inputs()).sum();
    let p: usize = list.iter().map(|g| g.n_outputs()).sum();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, m);
    let mut c = DMatrix::zeros(p, n);
    let mut d = DMatrix::zeros(p, m);
    let (mut si, mut ii, mut oi) = (0, 0, 0);
    for g in list {
        let (gn, gm, gp) = (g.n_states(), g.n_inputs(), g.n_outputs());
        a.view_mut((si, si), (gn, gn)).copy_from(&g.a);
        b.view_mut((si, ii), (gn, gm)).copy_from(&g.b);
        c.view_mut((oi, si), (gp, gn)).copy_from(&g.c);
        d.view_mut((oi, ii), (gp, gm)).copy_from(&g.d);
        si += gn;
        ii += gm;
        oi += gp;
    }
    StateSpace::new(a, b, c, d)
}

/// Ψ(jω)* M Ψ(jω), Hermitian-symmetrized.
pub fn multiplier_freq(psi: &StateSpace, m: &DMatrix<f64>, omega: f64) -> LinalgResult<DMatrix<Complex64>> {
    if m.shape() != (psi.n_outputs(), psi.n_outputs()) {
        return Err(LinalgError::DimensionMismatch { what: "multiplier M", expected: psi.n_outputs(), got: m.nrows() });
    }
    let g = psi.freq_response(omega)?;
    let mc = m.map(|v| Complex64::new(v, 0.0));
    let h = g.adjoint() * mc * &g;
    Ok((&h + h.adjoint()) * Complex64::new(0.5, 0.0))
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(h: &DMatrix<Complex64>) -> Vec<f64> {
    if h.nrows() == 0 {
        return vec![];
    }
    // real symmetric embedding [[Re, −Im], [Im, Re]] doubles each eigenvalue
    let n = h.nrows();
    let mut emb = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let v = h[(i, j)];
            emb[(i, j)] = v.re;
            emb[(i + n, j + n)] = v.re;
            emb[(i, j + n)] = -v.im;
            emb[(i + n, j)] = v.im;
        }
    }
    let e = linalg::sym_eigenvalues(&emb);
    e.into_iter().step_by(2).collect()
}

/// Result of a J-spectral factorization.
#[derive(Debug, Clone)]
pub struct JFactor {
    pub psi: StateSpace,
    pub m: DMatrix<f64>,
    /// Stabilizing Riccati solution used to build the output map.
    pub x: DMatrix<f64>,
}

/// Factorizes Ψ~ M Ψ = Ψ̃~ diag(I_nv, −I_nw) Ψ̃ with Ψ̃ sharing (A, B) with Ψ.
///
/// Requires the inertia of D'MD to be (n_v, n_w) and the multiplier to be
/// nonsingular with the same inertia on `grid`.
pub fn j_spectral_factorize(psi: &StateSpace, m: &DMatrix<f64>, nv: usize, nw: usize, grid: &[f64]) -> LinalgResult<JFactor> {
    let nin = nv + nw;
    if psi.n_inputs() != nin {
        return Err(LinalgError::DimensionMismatch { what: "multiplier filter inputs", expected: nin, got: psi.n_inputs() });
    }
    if m.shape() != (psi.n_outputs(), psi.n_outputs()) {
        return Err(LinalgError::DimensionMismatch { what: "multiplier M", expected: psi.n_outputs(), got: m.nrows() });
    }
    let msym = 0.5 * (m + m.transpose());
    for &w in grid {
        let h = multiplier_freq(psi, &msym, w)?;
        let e = hermitian_eigenvalues(&h);
        let scale = e.iter().map(|v| v.abs()).fold(1e-300, f64::max);
        let tol = 1e-13 * scale;
        let pos = e.iter().filter(|&&v| v > tol).count();
        let neg = e.iter().filter(|&&v| v < -tol).count();
        if pos != nv || neg != nw {
            return Err(LinalgError::InertiaMismatch { exp_pos: nv, exp_neg: nw, pos, neg });
        }
    }
    let (a, b, c, d) = (psi.a(), psi.b(), psi.c(), psi.d());
    let r = d.transpose() * &msym * d;
    let r = 0.5 * (&r + r.transpose());
    let eig = r.clone().symmetric_eigen();
    let rscale = eig.eigenvalues.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    let mut pos_idx: Vec<usize> = (0..nin).filter(|&i| eig.eigenvalues[i] > 1e-12 * rscale).collect();
    let mut neg_idx: Vec<usize> = (0..nin).filter(|&i| eig.eigenvalues[i] < -1e-12 * rscale).collect();
    if pos_idx.len() != nv || neg_idx.len() != nw {
        return Err(LinalgError::InertiaMismatch { exp_pos: nv, exp_neg: nw, pos: pos_idx.len(), neg: neg_idx.len() });
    }
    let cmp = |x: &usize, y: &usize| eig.eigenvalues[*y].abs().partial_cmp(&eig.eigenvalues[*x].abs()).unwrap();
    pos_idx.sort_by(cmp);
    neg_idx.sort_by(cmp);
    let order: Vec<usize> = pos_idx.into_iter().chain(neg_idx).collect();
    // D̃ = |Λ|^{1/2} U', rows positive block first
    let dz = DMatrix::from_fn(nin, nin, |i, j| {
        let k = order[i];
        eig.eigenvalues[k].abs().sqrt() * eig.eigenvectors[(j, k)]
    });
    let mt = DMatrix::from_diagonal(&DVector::from_fn(nin, |i, _| if i < nv { 1.0 } else { -1.0 }));
    let q = c.transpose() * &msym * c;
    let q = 0.5 * (&q + q.transpose());
    let s = c.transpose() * &msym * d;
    let x = linalg::solve_are(a, b, &q, &r, &s)?;
    let dz_inv_t = dz.transpose().try_inverse().ok_or(LinalgError::Singular("D of the J-factor"))?;
    let cz = &mt * dz_inv_t * (b.transpose() * &x + s.transpose());
    let factor = StateSpace::new(a.clone(), b.clone(), cz, dz)?;
    Ok(JFactor { psi: factor, m: mt, x })
}

/// Largest relative deviation between Ψ̃~M̃Ψ̃ and Ψ~MΨ over a grid.
pub fn factorization_residual(psi: &StateSpace, m: &DMatrix<f64>, f: &JFactor, grid: &[f64]) -> LinalgResult<f64> {
    let mut worst: f64 = 0.0;
    for &w in grid {
        let orig = multiplier_freq(psi, m, w)?;
        let fac = multiplier_freq(&f.psi, &f.m, w)?;
        let scale = orig.norm().max(1.0);
        worst = worst.max((orig - fac).norm() / scale);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::EvenPoly;

    fn first_order(pole: f64, gain: f64) -> StateSpace {
        StateSpace::new(
            DMatrix::from_element(1, 1, -pole),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, gain),
            DMatrix::zeros(1, 1),
        )
        .unwrap()
    }

    fn log_grid(n: usize) -> Vec<f64> {
        (0..n).map(|k| 10f64.powf(-3.0 + 6.0 * k as f64 / (n - 1) as f64)).collect()
    }

    #[test]
    fn freq_response_examples() {
        let g = first_order(1.0, 1.0);
        let r0 = g.freq_response(0.0).unwrap()[(0, 0)];
        assert!((r0 - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        let r1 = g.freq_response(1.0).unwrap()[(0, 0)];
        assert!((r1 - Complex64::new(0.5, -0.5)).norm() < 1e-15);
        let s = StateSpace::static_gain(DMatrix::from_row_slice(1, 2, &[2.0, -1.0]));
        for w in [0.0, 3.0, 1e6] {
            let r = s.freq_response(w).unwrap();
            assert_eq!(r[(0, 0)], Complex64::new(2.0, 0.0));
            assert_eq!(r[(0, 1)], Complex64::new(-1.0, 0.0));
        }
        let integrator = StateSpace::new(DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0), DMatrix::zeros(1, 1)).unwrap();
        assert_eq!(integrator.freq_response(0.0), Err(LinalgError::SingularResolvent(0.0)));
    }

    #[test]
    fn constructor_checks_dimensions() {
        let r = StateSpace::new(DMatrix::zeros(2, 2), DMatrix::zeros(1, 1), DMatrix::zeros(1, 2), DMatrix::zeros(1, 1));
        assert!(matches!(r, Err(LinalgError::DimensionMismatch { .. })));
    }

    #[test]
    fn stacking() {
        let g = first_order(1.0, 1.0);
        assert_eq!(stack_outputs(&[g.clone()]).unwrap(), g);
        let h = first_order(3.0, 2.0);
        let st = stack_outputs(&[g.clone(), h.clone()]).unwrap();
        assert_eq!((st.n_states(), st.n_outputs(), st.n_inputs()), (2, 2, 1));
        for w in log_grid(10) {
            let r = st.freq_response(w).unwrap();
            assert!((r[(0, 0)] - g.freq_response(w).unwrap()[(0, 0)]).norm() < 1e-10);
            assert!((r[(1, 0)] - h.freq_response(w).unwrap()[(0, 0)]).norm() < 1e-10);
        }
        let d1 = StateSpace::static_gain(DMatrix::from_row_slice(1, 2, &[1.0, 2.0]));
        let d2 = StateSpace::static_gain(DMatrix::from_row_slice(1, 2, &[3.0, 4.0]));
        let st = stack_outputs(&[d1, d2]).unwrap();
        assert_eq!(st.n_states(), 0);
        assert_eq!(st.d(), &DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let bad = StateSpace::static_gain(DMatrix::zeros(1, 3));
        assert!(stack_outputs(&[g, bad]).is_err());
    }

    #[test]
    fn rational_realization_matches() {
        let beta = (0.13 + 2.0 * 0.02f64.sqrt()).sqrt();
        let psi = Rational { num: vec![0.0, 1.0, 0.08f64.sqrt()], den: vec![1.0, beta, 0.02f64.sqrt()] };
        let g = StateSpace::from_rational(&psi).unwrap();
        assert_eq!(g.n_states(), 2);
        assert!((g.d()[(0, 0)] - 2.0).abs() < 1e-12);
        for w in log_grid(30) {
            let s = Complex64::new(0.0, w);
            assert!((g.freq_response(w).unwrap()[(0, 0)] - psi.eval(s)).norm() < 1e-10);
        }
        let theta = 0.04;
        let gs = g.time_scaled(theta).unwrap();
        let gb = gs.balanced();
        assert!(gb.a().norm() < 0.8 * gs.a().norm());
        assert!((gb.a()[(0, 1)].abs() / gb.a()[(1, 0)].abs() - 1.0).abs() < 1.0);
        for w in log_grid(30) {
            let x = gs.freq_response(w).unwrap()[(0, 0)];
            assert!((gb.freq_response(w).unwrap()[(0, 0)] - x).norm() <= 1e-12 * x.norm().max(1.0));
        }
        for w in log_grid(30) {
            let s = Complex64::new(0.0, w * theta);
            assert!((gs.freq_response(w).unwrap()[(0, 0)] - psi.eval(s)).norm() < 1e-10);
        }
    }

    #[test]
    fn multiplier_examples() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let id = StateSpace::identity(2);
        for w in [0.0, 1.0, 50.0] {
            let h = multiplier_freq(&id, &m, w).unwrap();
            assert_eq!(h, m.map(|v| Complex64::new(v, 0.0)));
        }
        let f = StateSpace::new(
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]),
        )
        .unwrap();
        let h = multiplier_freq(&f, &m, 1e9).unwrap();
        assert!(h[(0, 0)].norm() < 1e-12 && (h[(1, 1)] + 1.0).norm() < 1e-12);

        let psi = linalg::spectral_factor(&EvenPoly(vec![0.0, 1.0, 0.08]), &EvenPoly(vec![1.0, 0.13, 0.02])).unwrap();
        let g = StateSpace::from_rational(&psi).unwrap();
        let p2 = append(&[g, StateSpace::identity(1)]).unwrap();
        let h = multiplier_freq(&p2, &m, 1.0).unwrap();
        assert!((h[(0, 0)].re - 1.08 / 1.15).abs() < 1e-12);
        assert!((1.08f64 / 1.15 - 0.939130).abs() < 1e-6);
        let herm = (&h - h.adjoint()).norm();
        assert!(herm <= 1e-12);
    }

    #[test]
    fn static_j_factor_is_identity() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let f = j_spectral_factorize(&StateSpace::identity(2), &m, 1, 1, &log_grid(20)).unwrap();
        assert_eq!(f.psi.n_states(), 0);
        assert!((f.psi.d().abs() - DMatrix::identity(2, 2)).norm() < 1e-14);
        assert_eq!(f.m, m);
    }

    #[test]
    fn j_factor_rejects_wrong_inertia() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let r = j_spectral_factorize(&StateSpace::identity(2), &m, 1, 1, &[0.0, 1.0]);
        assert!(matches!(r, Err(LinalgError::InertiaMismatch { .. })));
    }

    #[test]
    fn dynamic_j_factor_identity() {
        // Ψ = [ψ(s) 0; 0 1] with a first-order lead, M = diag(1, −1) plus a cross term
        let psi = Rational { num: vec![1.0, 2.0], den: vec![1.0, 1.0] };
        let g = StateSpace::from_rational(&psi).unwrap();
        let p = stack_outputs(&[
            append(&[g, StateSpace::identity(1)]).unwrap(),
            StateSpace::identity(2),
        ])
        .unwrap();
        let mut m = DMatrix::zeros(4, 4);
        m[(0, 0)] = 1.0;
        m[(1, 1)] = -1.0;
        m[(2, 3)] = -0.3;
        m[(3, 2)] = -0.3;
        m[(3, 3)] = -0.5;
        let grid = log_grid(200);
        let f = j_spectral_factorize(&p, &m, 1, 1, &grid).unwrap();
        assert_eq!(f.psi.n_states(), p.n_states());
        assert!(factorization_residual(&p, &m, &f, &grid).unwrap() <= 1e-9);
        assert!(f.psi.is_stable().unwrap());
    }
}
