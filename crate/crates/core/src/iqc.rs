//! Multiplier library for differential IQCs.
//!
//! A multiplier Π = Ψ~MΨ acts on the differential pair (δ_v, δ_w). A
//! [`MultiplierSet`] collects several factorizations over the same channel
//! and stacks their filters into one realization, so that a combination
//! Σ λ_k Π_k is again a single (Ψ, M_λ) pair.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{self, EvenPoly, LinalgError};
use crate::lti::{self, StateSpace};

/// Lower bound imposed on λ₁ to represent λ₁ > 0.
pub const LAMBDA_MIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IqcError {
    #[error("multiplier set is empty")]
    Empty,
    #[error("multiplier {index}: {message}")]
    BadEntry { index: usize, message: String },
    #[error("lambda outside the admissible set: {0}")]
    LambdaOutside(String),
    #[error("step {dt:e} too large for filter (limit {limit:e})")]
    StepTooLarge { dt: f64, limit: f64 },
    #[error("signal length mismatch: {0}")]
    SignalMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type IqcResult<T> = std::result::Result<T, IqcError>;

#[derive(Debug, Clone)]
pub struct MultiplierEntry {
    pub name: String,
    pub psi: StateSpace,
    pub m: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct MultiplierSet {
    nv: usize,
    nw: usize,
    entries: Vec<MultiplierEntry>,
    shared: StateSpace,
    ranges: Vec<Range<usize>>,
    state_ranges: Vec<Range<usize>>,
}

impl MultiplierSet {
    pub fn new(nv: usize, nw: usize, entries: Vec<MultiplierEntry>) -> IqcResult<Self> {
        if entries.is_empty() {
            return Err(IqcError::Empty);
        }
        let mut ranges = Vec::with_capacity(entries.len());
        let mut state_ranges = Vec::with_capacity(entries.len());
        let (mut row, mut st) = (0, 0);
        for (index, e) in entries.iter().enumerate() {
            let bad = |message: String| IqcError::BadEntry { index, message };
            if e.psi.n_inputs() != nv + nw {
                return Err(bad(format!("filter has {} inputs, expected {}", e.psi.n_inputs(), nv + nw)));
            }
            let p = e.psi.n_outputs();
            if e.m.shape() != (p, p) {
                return Err(bad(format!("M is {}x{}, expected {p}x{p}", e.m.nrows(), e.m.ncols())));
            }
            let asym = (&e.m - e.m.transpose()).norm();
            if asym > 1e-12 * e.m.norm().max(1.0) {
                return Err(bad("M is not symmetric".into()));
            }
            if e.psi.n_states() > 0 && !e.psi.is_stable()? {
                return Err(bad("filter is not stable".into()));
            }
            ranges.push(row..row + p);
            state_ranges.push(st..st + e.psi.n_states());
            row += p;
            st += e.psi.n_states();
        }
        let psis: Vec<StateSpace> = entries.iter().map(|e| e.psi.clone()).collect();
        let shared = lti::stack_outputs(&psis)?;
        Ok(Self { nv, nw, entries, shared, ranges, state_ranges })
    }

    pub fn nv(&self) -> usize {
        self.nv
    }
    pub fn nw(&self) -> usize {
        self.nw
    }
    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
    pub fn entries(&self) -> &[MultiplierEntry] {
        &self.entries
    }
    /// Stacked realization of all filters.
    pub fn shared_filter(&self) -> &StateSpace {
        &self.shared
    }
    /// Output rows of entry `k` in the stacked filter.
    pub fn output_range(&self, k: usize) -> Range<usize> {
        self.ranges[k].clone()
    }
    pub fn state_range(&self, k: usize) -> Range<usize> {
        self.state_ranges[k].clone()
    }
    pub fn n_states(&self) -> usize {
        self.shared.n_states()
    }

    /// Whether entry 1 is the normalized norm bound diag(I, −I).
    pub fn first_is_normbound(&self) -> bool {
        let e = &self.entries[0];
        let n = self.nv + self.nw;
        if e.psi.n_states() != 0 || e.psi.d().shape() != (n, n) {
            return false;
        }
        let j = DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| if i < self.nv { 1.0 } else { -1.0 }));
        let pi = e.psi.d().transpose() * &e.m * e.psi.d();
        (pi - j).norm() <= 1e-12
    }

    /// Block-diagonal Σ-weighted M for the stacked filter.
    pub fn weighted_m(&self, lambda: &[f64]) -> IqcResult<DMatrix<f64>> {
        if lambda.len() != self.len() {
            return Err(IqcError::LambdaOutside(format!("{} weights for {} multipliers", lambda.len(), self.len())));
        }
        let p = self.shared.n_outputs();
        let mut m = DMatrix::zeros(p, p);
        for (k, e) in self.entries.iter().enumerate() {
            let r = self.output_range(k);
            m.view_mut((r.start, r.start), (r.len(), r.len())).copy_from(&(&e.m * lambda[k]));
        }
        Ok(m)
    }
}

/// Static Ψ = I with M = diag(I_nv, −I_nw).
pub fn normbound_multiplier(nv: usize, nw: usize) -> MultiplierEntry {
    let n = nv + nw;
    MultiplierEntry {
        name: "normbound".into(),
        psi: StateSpace::identity(n),
        m: DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| if i < nv { 1.0 } else { -1.0 })),
    }
}

pub fn normbound_set(nv: usize, nw: usize) -> IqcResult<MultiplierSet> {
    MultiplierSet::new(nv, nw, vec![normbound_multiplier(nv, nw)])
}

/// The weight η(ω) = (ω² + 0.08ω⁴)/(1 + 0.13ω² + 0.02ω⁴).
pub fn delay_eta(omega: f64) -> f64 {
    let w2 = omega * omega;
    (w2 + 0.08 * w2 * w2) / (1.0 + 0.13 * w2 + 0.02 * w2 * w2)
}

/// Stable minimum-phase ψ with |ψ(jω)|² = η(ω), as a realization.
pub fn delay_weight_filter() -> IqcResult<StateSpace> {
    let r = linalg::spectral_factor(&EvenPoly(vec![0.0, 1.0, 0.08]), &EvenPoly(vec![1.0, 0.13, 0.02]))?;
    Ok(StateSpace::from_rational(&r)?)
}

/// Multipliers for w = v(· − θ) − v with θ ∈ [0, theta_max], scalar channel.
pub fn delay_multipliers(theta_max: f64) -> IqcResult<MultiplierSet> {
    if !(theta_max >= 0.0) || !theta_max.is_finite() {
        return Err(IqcError::InvalidParameter(format!("theta_max must be finite and nonnegative, got {theta_max}")));
    }
    let first = MultiplierEntry {
        name: "delay-energy".into(),
        psi: StateSpace::identity(2),
        m: DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, -1.0]),
    };
    let psi2 = if theta_max > 0.0 {
        let weight = delay_weight_filter()?.time_scaled(theta_max)?.balanced();
        lti::append(&[weight, StateSpace::identity(1)])?
    } else {
        StateSpace::static_gain(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]))
    };
    let second = MultiplierEntry { name: "delay-weighted".into(), psi: psi2, m: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]) };
    MultiplierSet::new(1, 1, vec![first, second])
}

/// 200 log-spaced points in [1e-3, 1e3] plus 0 and 1e6.
pub fn default_grid() -> Vec<f64> {
    let mut g = vec![0.0];
    g.extend((0..200).map(|k| 10f64.powf(-3.0 + 6.0 * k as f64 / 199.0)));
    g.push(1e6);
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignConditionReport {
    pub name: String,
    pub min_vv: f64,
    pub max_ww: f64,
    pub pass: bool,
}

/// Π_vv ⪰ 0 and Π_ww ⪯ 0 over the grid, per entry.
pub fn check_sign_conditions(ms: &MultiplierSet, grid: &[f64]) -> IqcResult<Vec<SignConditionReport>> {
    let (nv, nw) = (ms.nv, ms.nw);
    let mut out = Vec::new();
    for e in &ms.entries {
        let (mut min_vv, mut max_ww) = (f64::INFINITY, f64::NEG_INFINITY);
        for &w in grid {
            let h = lti::multiplier_freq(&e.psi, &e.m, w)?;
            let vv = h.view((0, 0), (nv, nv)).clone_owned();
            let ww = h.view((nv, nv), (nw, nw)).clone_owned();
            min_vv = min_vv.min(lti::hermitian_eigenvalues(&vv).first().copied().unwrap_or(0.0));
            max_ww = max_ww.max(lti::hermitian_eigenvalues(&ww).last().copied().unwrap_or(0.0));
        }
        out.push(SignConditionReport { name: e.name.clone(), min_vv, max_ww, pass: min_vv >= -1e-9 && max_ww <= 1e-9 });
    }
    Ok(out)
}

/// Combined multiplier Π_λ = Σ λ_k Π_k with its partition against the
/// filter state and the feedthrough.
#[derive(Debug, Clone)]
pub struct Combined {
    pub psi: StateSpace,
    pub m: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

pub fn check_lambda(ms: &MultiplierSet, lambda: &[f64], lambda_min: f64) -> IqcResult<()> {
    if lambda.len() != ms.len() {
        return Err(IqcError::LambdaOutside(format!("{} weights for {} multipliers", lambda.len(), ms.len())));
    }
    if lambda.iter().any(|l| !l.is_finite()) {
        return Err(IqcError::LambdaOutside("non-finite weight".into()));
    }
    if lambda[0] < lambda_min {
        return Err(IqcError::LambdaOutside(format!("lambda_1 = {} below {}", lambda[0], lambda_min)));
    }
    if let Some((k, l)) = lambda.iter().enumerate().skip(1).find(|(_, &l)| l < 0.0) {
        return Err(IqcError::LambdaOutside(format!("lambda_{} = {} is negative", k + 1, l)));
    }
    Ok(())
}

pub fn combine(ms: &MultiplierSet, lambda: &[f64], lambda_min: f64) -> IqcResult<Combined> {
    check_lambda(ms, lambda, lambda_min)?;
    let m = ms.weighted_m(lambda)?;
    let psi = ms.shared.clone();
    let (c, d) = (psi.c(), psi.d());
    let q = c.transpose() * &m * c;
    let s = c.transpose() * &m * d;
    let r = d.transpose() * &m * d;
    Ok(Combined { q: 0.5 * (&q + q.transpose()), s, r: 0.5 * (&r + r.transpose()), psi, m })
}

/// Cumulative ∫₀ᵀ z'Mz dt for z = Ψ(v, w), at every sample time.
///
/// The filter starts at rest and is integrated by RK4 with inputs linearly
/// interpolated between samples; the integral uses the trapezoid rule.
pub fn hard_iqc_partial_integrals(psi: &StateSpace, m: &DMatrix<f64>, v: &[DVector<f64>], w: &[DVector<f64>], dt: f64) -> IqcResult<Vec<f64>> {
    if v.len() != w.len() {
        return Err(IqcError::SignalMismatch(format!("v has {} samples, w has {}", v.len(), w.len())));
    }
    if !(dt > 0.0) {
        return Err(IqcError::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let n = psi.n_states();
    if n > 0 {
        let limit = 0.1 / psi.a().norm();
        if dt > limit {
            return Err(IqcError::StepTooLarge { dt, limit });
        }
    }
    if m.shape() != (psi.n_outputs(), psi.n_outputs()) {
        return Err(IqcError::SignalMismatch("M does not match filter outputs".into()));
    }
    let input = |k: usize| -> IqcResult<DVector<f64>> {
        let (vk, wk) = (&v[k], &w[k]);
        let mut u = DVector::zeros(vk.len() + wk.len());
        u.rows_mut(0, vk.len()).copy_from(vk);
        u.rows_mut(vk.len(), wk.len()).copy_from(wk);
        if u.len() != psi.n_inputs() {
            return Err(IqcError::SignalMismatch(format!("sample {k} has {} channels, filter takes {}", u.len(), psi.n_inputs())));
        }
        Ok(u)
    };
    let mut out = Vec::with_capacity(v.len());
    if v.is_empty() {
        return Ok(out);
    }
    let mut x = DVector::zeros(n);
    let mut u_prev = input(0)?;
    let mut z = psi.output(&x, &u_prev);
    let mut f_prev = z.dot(&(m * &z));
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..v.len() {
        let u_next = input(k)?;
        if n > 0 {
            let u_mid = 0.5 * (&u_prev + &u_next);
            let k1 = psi.derivative(&x, &u_prev);
            let k2 = psi.derivative(&(&x + 0.5 * dt * &k1), &u_mid);
            let k3 = psi.derivative(&(&x + 0.5 * dt * &k2), &u_mid);
            let k4 = psi.derivative(&(&x + dt * &k3), &u_next);
            x += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        z = psi.output(&x, &u_next);
        let f = z.dot(&(m * &z));
        acc += 0.5 * dt * (f_prev + f);
        out.push(acc);
        f_prev = f;
        u_prev = u_next;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    #[test]
    fn delay_set_shapes() {
        let ms = delay_multipliers(0.1).unwrap();
        assert_eq!(ms.len(), 2);
        assert_eq!(ms.n_states(), 2);
        assert_eq!(ms.entries()[0].m, DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, -1.0]));
        assert!(!ms.first_is_normbound());
        let ms0 = delay_multipliers(0.0).unwrap();
        assert_eq!(ms0.n_states(), 0);
        let h = lti::multiplier_freq(&ms0.entries()[1].psi, &ms0.entries()[1].m, 3.0).unwrap();
        assert_eq!(h[(0, 0)], Complex64::new(0.0, 0.0));
        assert_eq!(h[(1, 1)], Complex64::new(-1.0, 0.0));
        assert!(delay_multipliers(-1.0).is_err());
    }

    #[test]
    fn energy_multiplier_expansion() {
        // |v|² − |v + w|² = −2vw − w²
        let m = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, -1.0]);
        for (v, w) in [(1.0f64, 2.0f64), (-0.3, 0.7), (2.5, -1.0)] {
            let z = DVector::from_vec(vec![v, w]);
            let q = z.dot(&(&m * &z));
            assert!((q - (v * v - (v + w) * (v + w))).abs() < 1e-14);
        }
    }

    #[test]
    fn eta_at_unit_scale() {
        let ms = delay_multipliers(1.0).unwrap();
        let e = &ms.entries()[1];
        let h = lti::multiplier_freq(&e.psi, &e.m, 1.0).unwrap();
        assert!((h[(0, 0)].re - 1.08 / 1.15).abs() < 1e-12);
        assert!((delay_eta(1.0) - 0.939130).abs() < 1e-6);
        let ms = delay_multipliers(0.25).unwrap();
        let e = &ms.entries()[1];
        for w in [0.1, 1.0, 7.0, 40.0] {
            let h = lti::multiplier_freq(&e.psi, &e.m, w).unwrap();
            assert!((h[(0, 0)].re - delay_eta(0.25 * w)).abs() < 1e-10 * (1.0 + delay_eta(0.25 * w)));
        }
    }

    #[test]
    fn sign_condition_checks() {
        let grid = default_grid();
        assert_eq!(grid.len(), 202);
        let rep = check_sign_conditions(&delay_multipliers(0.1).unwrap(), &grid).unwrap();
        assert!(rep.iter().all(|r| r.pass), "{rep:?}");
        let rep = check_sign_conditions(&normbound_set(1, 1).unwrap(), &grid).unwrap();
        assert!(rep[0].pass);
        let bad = MultiplierSet::new(
            1,
            1,
            vec![MultiplierEntry { name: "flip".into(), psi: StateSpace::identity(2), m: DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]) }],
        )
        .unwrap();
        let rep = check_sign_conditions(&bad, &grid).unwrap();
        assert!(!rep[0].pass && rep[0].min_vv < 0.0 && rep[0].max_ww > 0.0);
    }

    #[test]
    fn normbound_is_static() {
        let e = normbound_multiplier(1, 1);
        assert_eq!(e.m, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]));
        let h0 = lti::multiplier_freq(&e.psi, &e.m, 0.0).unwrap();
        for w in [1.0, 100.0] {
            assert!((lti::multiplier_freq(&e.psi, &e.m, w).unwrap() - &h0).norm() < 1e-14);
        }
        assert!(normbound_set(2, 1).unwrap().first_is_normbound());
    }

    #[test]
    fn combination_linearity() {
        let ms = delay_multipliers(0.04).unwrap();
        let c10 = combine(&ms, &[1.0, 0.0], LAMBDA_MIN).unwrap();
        let c20 = combine(&ms, &[2.0, 0.0], LAMBDA_MIN).unwrap();
        let c11 = combine(&ms, &[1.0, 1.0], LAMBDA_MIN).unwrap();
        let e0 = &ms.entries()[0];
        for w in [0.0, 0.5, 20.0] {
            let p1 = lti::multiplier_freq(&e0.psi, &e0.m, w).unwrap();
            let a = lti::multiplier_freq(&c10.psi, &c10.m, w).unwrap();
            let b = lti::multiplier_freq(&c20.psi, &c20.m, w).unwrap();
            assert!((&a - &p1).norm() < 1e-12);
            assert!((&b - &a * Complex64::new(2.0, 0.0)).norm() < 1e-12);
        }
        let a = lti::multiplier_freq(&c11.psi, &c11.m, 0.0).unwrap();
        let p2 = lti::multiplier_freq(&e0.psi, &e0.m, 0.0).unwrap() + DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, -1.0]).map(|v| Complex64::new(v, 0.0));
        assert!((a - p2).norm() < 1e-12);
        assert!(combine(&ms, &[0.0, 1.0], LAMBDA_MIN).is_err());
        assert!(combine(&ms, &[1.0, -1.0], LAMBDA_MIN).is_err());
        assert!(combine(&ms, &[1.0], LAMBDA_MIN).is_err());
    }

    #[test]
    fn partial_integrals_basic() {
        let e = normbound_multiplier(1, 1);
        let zeros: Vec<DVector<f64>> = (0..100).map(|_| DVector::zeros(1)).collect();
        let p = hard_iqc_partial_integrals(&e.psi, &e.m, &zeros, &zeros, 0.01).unwrap();
        assert!(p.iter().all(|&v| v == 0.0));
        let bump: Vec<DVector<f64>> = (0..100).map(|k| DVector::from_element(1, (std::f64::consts::PI * k as f64 / 99.0).sin())).collect();
        let p = hard_iqc_partial_integrals(&e.psi, &e.m, &zeros, &bump, 0.01).unwrap();
        assert!(p[1..].iter().all(|&v| v < 0.0));
        let ms = delay_multipliers(0.04).unwrap();
        let r = hard_iqc_partial_integrals(ms.shared_filter(), &ms.weighted_m(&[1.0, 1.0]).unwrap(), &zeros, &zeros, 0.5);
        assert!(matches!(r, Err(IqcError::StepTooLarge { .. })));
    }
}
