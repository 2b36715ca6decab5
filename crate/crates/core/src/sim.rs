//! Time-domain validation: RK4 integration of delayed closed loops, the
//! geodesic controller, empirical incremental gains and the regularized
//! friction experiment.

use std::collections::VecDeque;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::PolyMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("step {h} exceeds the stability limit {limit}")]
    StepTooLarge { h: f64, limit: f64 },
    #[error("invalid delay {theta} for step {h}: need theta = 0 or theta >= h")]
    BadDelay { theta: f64, h: f64 },
    #[error("invalid simulation parameter: {0}")]
    Invalid(String),
    #[error("trajectory diverged at t = {t}")]
    Diverged { t: f64 },
    #[error("all trajectory pairs have negligible input difference")]
    Degenerate,
    #[error("trajectory grids do not match")]
    GridMismatch,
}

pub type SimResult<T> = std::result::Result<T, SimError>;

/// Samples on the uniform grid t_k = k·h.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub h: f64,
    pub t: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    /// Applied (delayed) control input.
    pub u: Vec<DVector<f64>>,
    pub d: Vec<DVector<f64>>,
    pub e: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// CSV with columns t, x…, d…, e….
    pub fn to_csv(&self, x_names: &[String], d_names: &[String], e_names: &[String]) -> String {
        let mut out = String::from("t");
        for n in x_names.iter().chain(d_names).chain(e_names) {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for k in 0..self.len() {
            let _ = write!(out, "{}", self.t[k]);
            for v in self.x[k].iter().chain(self.d[k].iter()).chain(self.e[k].iter()) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

type Field<'a> = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'a>;

/// ẋ = f(x) + B u(t − θ) + E d,  e = Cx + D u(t − θ) + D_ed d,  u = κ(x).
///
/// When `output_map` is set it replaces the linear term Cx.
pub struct ClosedLoop<'a> {
    pub f: Field<'a>,
    pub controller: Field<'a>,
    pub output_map: Option<Field<'a>>,
    pub b: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub dmat: DMatrix<f64>,
    pub ded: DMatrix<f64>,
}

impl<'a> ClosedLoop<'a> {
    pub fn nx(&self) -> usize {
        self.b.nrows()
    }
    pub fn nu(&self) -> usize {
        self.b.ncols()
    }
    pub fn nd(&self) -> usize {
        self.e.ncols()
    }

    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>, d: &DVector<f64>) -> DVector<f64> {
        (self.f)(x) + &self.b * u + &self.e * d
    }

    fn output(&self, x: &DVector<f64>, u: &DVector<f64>, d: &DVector<f64>) -> DVector<f64> {
        let base = match &self.output_map {
            Some(h) => h(x),
            None => &self.c * x,
        };
        base + &self.dmat * u + &self.ded * d
    }

    /// Spectral norm of the finite-difference Jacobian of x ↦ f(x) + Bκ(x).
    pub fn lipschitz_estimate(&self, x: &DVector<f64>) -> f64 {
        let n = self.nx();
        let g = |x: &DVector<f64>| (self.f)(x) + &self.b * (self.controller)(x);
        let mut j = DMatrix::zeros(n, n);
        for i in 0..n {
            let step = 1e-6 * (1.0 + x[i].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += step;
            xm[i] -= step;
            j.set_column(i, &((g(&xp) - g(&xm)) / (2.0 * step)));
        }
        j.singular_values().iter().copied().fold(0.0, f64::max)
    }
}

/// Linear time-invariant closed loop without control: ẋ = Ax + Bd, e = Cx + Dd.
pub fn lti_loop<'a>(g: &'a crate::lti::StateSpace) -> ClosedLoop<'a> {
    let n = g.n_states();
    ClosedLoop {
        f: Box::new(move |x| g.a() * x),
        controller: Box::new(|_| DVector::zeros(0)),
        output_map: None,
        b: DMatrix::zeros(n, 0),
        e: g.b().clone(),
        c: g.c().clone(),
        dmat: DMatrix::zeros(g.n_outputs(), 0),
        ded: g.d().clone(),
    }
}

/// History of a delayed signal on the grid, holding only the window the
/// delay needs. Before t = 0 the signal is extended by its first value.
#[derive(Debug, Clone)]
pub struct DelayLine {
    h: f64,
    theta: f64,
    buf: VecDeque<DVector<f64>>,
    first: usize,
    capacity: usize,
}

impl DelayLine {
    pub fn new(h: f64, theta: f64) -> Self {
        let capacity = (theta / h).ceil() as usize + 3;
        Self { h, theta, buf: VecDeque::with_capacity(capacity), first: 0, capacity }
    }

    /// Appends the sample at the next grid point.
    pub fn push(&mut self, v: DVector<f64>) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
            self.first += 1;
        }
        self.buf.push_back(v);
    }

    /// Signal value at time t − θ, linearly interpolated.
    pub fn delayed(&self, t: f64) -> DVector<f64> {
        let tau = t - self.theta;
        let last = self.first + self.buf.len() - 1;
        if tau <= 0.0 || self.buf.len() == 1 {
            return if tau <= 0.0 && self.first == 0 { self.buf[0].clone() } else { self.buf[self.buf.len() - 1].clone() };
        }
        let pos = tau / self.h;
        let k = pos.floor() as usize;
        let frac = pos - k as f64;
        let k = k.clamp(self.first, last);
        if k >= last || frac < 1e-12 {
            return self.buf[k - self.first].clone();
        }
        let a = &self.buf[k - self.first];
        let b = &self.buf[k + 1 - self.first];
        a * (1.0 - frac) + b * frac
    }
}

fn grid_steps(t_end: f64, h: f64) -> SimResult<usize> {
    if !(h > 0.0) || !(t_end > 0.0) || !h.is_finite() || !t_end.is_finite() {
        return Err(SimError::Invalid(format!("need T > 0 and h > 0, got T = {t_end}, h = {h}")));
    }
    Ok((t_end / h).round() as usize)
}

/// RK4 integration of the delayed loop u(t) = κ(x(t − θ)).
pub fn simulate_delay_cl(cl: &ClosedLoop, theta: f64, d: &dyn Fn(f64) -> DVector<f64>, x0: &DVector<f64>, t_end: f64, h: f64) -> SimResult<Trajectory> {
    let steps = grid_steps(t_end, h)?;
    if !(theta >= 0.0) || (theta > 0.0 && theta < h * (1.0 - 1e-12)) {
        return Err(SimError::BadDelay { theta, h });
    }
    let lip = cl.lipschitz_estimate(x0);
    if lip > 0.0 && h > 0.1 / lip {
        return Err(SimError::StepTooLarge { h, limit: 0.1 / lip });
    }
    let mut line = DelayLine::new(h, theta);
    let mut x = x0.clone();
    let mut traj = Trajectory { h, t: Vec::with_capacity(steps + 1), x: vec![], u: vec![], d: vec![], e: vec![] };
    line.push((cl.controller)(&x));
    for k in 0..=steps {
        let t = k as f64 * h;
        let u_now = if theta == 0.0 { (cl.controller)(&x) } else { line.delayed(t) };
        let d_now = d(t);
        traj.e.push(cl.output(&x, &u_now, &d_now));
        traj.t.push(t);
        traj.x.push(x.clone());
        traj.u.push(u_now.clone());
        traj.d.push(d_now.clone());
        if k == steps {
            break;
        }
        let uu = |tt: f64, xs: &DVector<f64>| if theta == 0.0 { (cl.controller)(xs) } else { line.delayed(tt) };
        let dh = d(t + 0.5 * h);
        let k1 = cl.rhs(&x, &u_now, &d_now);
        let x2 = &x + &k1 * (0.5 * h);
        let k2 = cl.rhs(&x2, &uu(t + 0.5 * h, &x2), &dh);
        let x3 = &x + &k2 * (0.5 * h);
        let k3 = cl.rhs(&x3, &uu(t + 0.5 * h, &x3), &dh);
        let x4 = &x + &k3 * h;
        let k4 = cl.rhs(&x4, &uu(t + h, &x4), &d(t + h));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if x.iter().any(|v| !v.is_finite() || v.abs() > 1e8) {
            return Err(SimError::Diverged { t: t + h });
        }
        line.push((cl.controller)(&x));
    }
    Ok(traj)
}

/// u* + ∫₀¹ K(x* + s(x − x*))(x − x*) ds by composite Simpson on 33 nodes.
pub fn geodesic_controller(x: &DVector<f64>, x_star: &DVector<f64>, u_star: &DVector<f64>, k: &dyn Fn(&DVector<f64>) -> DMatrix<f64>) -> DVector<f64> {
    const N: usize = 32;
    let dx = x - x_star;
    let mut acc = DVector::zeros(u_star.len());
    for i in 0..=N {
        let s = i as f64 / N as f64;
        let w = if i == 0 || i == N {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let g = x_star + &dx * s;
        acc += k(&g) * &dx * w;
    }
    u_star + acc / (3.0 * N as f64)
}

/// K(x) from a polynomial gain over a registry whose state indeterminates
/// are `x_vars` (other indeterminates are set to 0).
pub fn poly_gain<'a>(k: &'a PolyMatrix, x_vars: &'a [usize]) -> impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'a {
    move |x: &DVector<f64>| {
        let mut pt = vec![0.0; k.nvars()];
        for (i, &v) in x_vars.iter().enumerate() {
            pt[v] = x[i];
        }
        k.eval(&pt).expect("gain evaluation uses all indeterminates")
    }
}

fn cumulative_energy(a: &[DVector<f64>], b: &[DVector<f64>], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len());
    let mut acc = 0.0;
    let mut prev: Option<f64> = None;
    for (x, y) in a.iter().zip(b) {
        let v = (x - y).norm_squared();
        if let Some(p) = prev {
            acc += 0.5 * h * (p + v);
        }
        prev = Some(v);
        out.push(acc);
    }
    out
}

/// max over pairs and horizons of √(max(0, ‖Δe_T‖² − b)/‖Δd_T‖²).
pub fn empirical_inc_gain(pairs: &[(Trajectory, Trajectory)], b_terms: &[f64]) -> SimResult<f64> {
    if b_terms.len() != pairs.len() {
        return Err(SimError::Invalid(format!("{} bias terms for {} pairs", b_terms.len(), pairs.len())));
    }
    let mut best: Option<f64> = None;
    for ((p, q), &b) in pairs.iter().zip(b_terms) {
        if p.len() != q.len() || (p.h - q.h).abs() > 1e-15 {
            return Err(SimError::GridMismatch);
        }
        let ed = cumulative_energy(&p.d, &q.d, p.h);
        if ed.last().copied().unwrap_or(0.0) < 1e-12 {
            continue;
        }
        let ee = cumulative_energy(&p.e, &q.e, p.h);
        let mut g: f64 = 0.0;
        for (den, num) in ed.iter().zip(&ee) {
            if *den >= 1e-12 {
                g = g.max(((num - b).max(0.0) / den).sqrt());
            }
        }
        best = Some(best.map_or(g, |v: f64| v.max(g)));
    }
    best.ok_or(SimError::Degenerate)
}

/// Σ a_k sin(ω_k t + φ_k), scaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multisine {
    pub amps: Vec<f64>,
    pub freqs: Vec<f64>,
    pub phases: Vec<f64>,
    pub scale: f64,
}

impl Multisine {
    pub fn eval(&self, t: f64) -> f64 {
        self.scale * self.amps.iter().zip(&self.freqs).zip(&self.phases).map(|((a, w), p)| a * (w * t + p).sin()).sum::<f64>()
    }

    /// Trapezoid energy on [0, T] with step h.
    pub fn energy(&self, t_end: f64, h: f64) -> f64 {
        let n = (t_end / h).round() as usize;
        let mut acc = 0.0;
        for k in 0..=n {
            let v = self.eval(k as f64 * h);
            acc += if k == 0 || k == n { 0.5 * v * v } else { v * v };
        }
        acc * h
    }

    /// Rescales to the given energy on [0, T].
    pub fn normalized(mut self, energy: f64, t_end: f64, h: f64) -> Self {
        self.scale = 1.0;
        let e = self.energy(t_end, h);
        if e > 0.0 {
            self.scale = (energy / e).sqrt();
        }
        self
    }
}

/// Band-limited test signals: 8 tones log-spaced in [0.01, 10] with random
/// phases and unit amplitudes, normalized to unit energy on [0, T].
pub fn disturbance_set(n: usize, seed: u64, t_end: f64, h: f64) -> Vec<Multisine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tones = 8;
    let freqs: Vec<f64> = (0..tones).map(|k| 10f64.powf(-2.0 + 3.0 * k as f64 / (tones - 1) as f64)).collect();
    (0..n)
        .map(|_| {
            let phases = (0..tones).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
            Multisine { amps: vec![1.0; tones], freqs: freqs.clone(), phases, scale: 1.0 }.normalized(1.0, t_end, h)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrictionRow {
    pub eps: f64,
    pub input: usize,
    pub gain: f64,
}

/// Largest ε-independent stable step: RK4 is used only while
/// (a + b + c/ε)·h ≤ 2.5.
pub const FRICTION_STEP_LIMIT: f64 = 2.5;

/// ẏ = −(a+b)y − c·tanh(y/ε) + v and its variational equation
/// δẏ = −(a+b)δy − (c/ε)(1 − tanh²(y/ε))δy + δv, from rest.
pub fn friction_variational(a: f64, b: f64, c: f64, eps: f64, v: &dyn Fn(f64) -> f64, dv: &dyn Fn(f64) -> f64, t_end: f64, h: f64) -> SimResult<(Vec<f64>, Vec<f64>)> {
    if !(a > 0.0 && b > 0.0 && c >= 0.0 && eps > 0.0) {
        return Err(SimError::Invalid(format!("need a, b, eps > 0 and c >= 0, got a = {a}, b = {b}, c = {c}, eps = {eps}")));
    }
    let stiff = (a + b + c / eps) * h;
    if stiff > FRICTION_STEP_LIMIT {
        return Err(SimError::StepTooLarge { h, limit: FRICTION_STEP_LIMIT / (a + b + c / eps) });
    }
    let steps = grid_steps(t_end, h)?;
    let f = |t: f64, y: f64, dy: f64| {
        let th = (y / eps).tanh();
        (-(a + b) * y - c * th + v(t), -(a + b) * dy - c / eps * (1.0 - th * th) * dy + dv(t))
    };
    let (mut y, mut dy) = (0.0, 0.0);
    let mut ys = Vec::with_capacity(steps + 1);
    let mut dys = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        ys.push(y);
        dys.push(dy);
        if k == steps {
            break;
        }
        let t = k as f64 * h;
        let k1 = f(t, y, dy);
        let k2 = f(t + 0.5 * h, y + 0.5 * h * k1.0, dy + 0.5 * h * k1.1);
        let k3 = f(t + 0.5 * h, y + 0.5 * h * k2.0, dy + 0.5 * h * k2.1);
        let k4 = f(t + h, y + h * k3.0, dy + h * k3.1);
        y += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        dy += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        if !y.is_finite() || !dy.is_finite() {
            return Err(SimError::Diverged { t: t + h });
        }
    }
    Ok((ys, dys))
}

/// ‖δy‖/‖δv‖ on [0, T] for each ε and each (v, δv) input pair.
pub fn friction_gain_experiment(a: f64, b: f64, c: f64, eps_list: &[f64], inputs: &[(Multisine, Multisine)], t_end: f64, h: f64) -> SimResult<Vec<FrictionRow>> {
    let mut rows = Vec::new();
    for &eps in eps_list {
        for (i, (v, dv)) in inputs.iter().enumerate() {
            let (_, dy) = friction_variational(a, b, c, eps, &|t| v.eval(t), &|t| dv.eval(t), t_end, h)?;
            let zeros = vec![DVector::zeros(1); dy.len()];
            let dys: Vec<DVector<f64>> = dy.iter().map(|&x| DVector::from_element(1, x)).collect();
            let dvs: Vec<DVector<f64>> = (0..dy.len()).map(|k| DVector::from_element(1, dv.eval(k as f64 * h))).collect();
            let ey = cumulative_energy(&dys, &zeros, h).last().copied().unwrap_or(0.0);
            let ev = cumulative_energy(&dvs, &zeros, h).last().copied().unwrap_or(0.0);
            if ev < 1e-12 {
                return Err(SimError::Degenerate);
            }
            rows.push(FrictionRow { eps, input: i, gain: (ey / ev).sqrt() });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::StateSpace;

    fn lag() -> StateSpace {
        StateSpace::new(DMatrix::from_element(1, 1, -1.0), DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0), DMatrix::zeros(1, 1)).unwrap()
    }

    #[test]
    fn step_response_of_lag() {
        let g = lag();
        let cl = lti_loop(&g);
        let tr = simulate_delay_cl(&cl, 0.0, &|_| DVector::from_element(1, 1.0), &DVector::zeros(1), 1.0, 1e-3).unwrap();
        let x1 = tr.x.last().unwrap()[0];
        assert!((x1 - (1.0 - (-1.0f64).exp())).abs() < 1e-6, "{x1}");
    }

    #[test]
    fn rk4_is_fourth_order() {
        let g = lag();
        let cl = lti_loop(&g);
        let exact = 1.0 - (-1.0f64).exp();
        let err = |h: f64| {
            let tr = simulate_delay_cl(&cl, 0.0, &|_| DVector::from_element(1, 1.0), &DVector::zeros(1), 1.0, h).unwrap();
            (tr.x.last().unwrap()[0] - exact).abs()
        };
        let hs = [0.1, 0.05, 0.025, 0.0125];
        for w in hs.windows(2) {
            let r = err(w[0]) / err(w[1]);
            assert!(r >= 12.0, "ratio {r}");
        }
    }

    #[test]
    fn delay_line_interpolates() {
        let mut l = DelayLine::new(0.1, 0.2);
        for k in 0..10 {
            l.push(DVector::from_element(1, k as f64));
        }
        // t − θ = 0.55 → between samples 5 and 6
        assert!((l.delayed(0.75)[0] - 5.5).abs() < 1e-12);
        assert!((l.delayed(0.9)[0] - 7.0).abs() < 1e-12);
        let mut l = DelayLine::new(0.1, 0.2);
        l.push(DVector::from_element(1, 3.0));
        assert_eq!(l.delayed(0.1)[0], 3.0);
    }

    #[test]
    fn delayed_input_is_shifted_control() {
        // stable scalar loop ẋ = −x + u + d, u = −0.5x, delay θ = 5h
        let cl = ClosedLoop {
            f: Box::new(|x| -x),
            controller: Box::new(|x| x * -0.5),
            output_map: None,
            b: DMatrix::from_element(1, 1, 1.0),
            e: DMatrix::from_element(1, 1, 1.0),
            c: DMatrix::from_element(1, 1, 1.0),
            dmat: DMatrix::zeros(1, 1),
            ded: DMatrix::zeros(1, 1),
        };
        let h = 1e-2;
        let tr = simulate_delay_cl(&cl, 5.0 * h, &|t| DVector::from_element(1, t.sin()), &DVector::from_element(1, 0.3), 2.0, h).unwrap();
        for k in 0..tr.len() {
            let src = k.saturating_sub(5);
            let expect = -0.5 * tr.x[src][0];
            assert!((tr.u[k][0] - expect).abs() < 1e-10, "{k}");
        }
        assert!(matches!(simulate_delay_cl(&cl, 0.5 * h, &|_| DVector::zeros(1), &DVector::zeros(1), 1.0, h), Err(SimError::BadDelay { .. })));
    }

    #[test]
    fn zero_delay_matches_undelayed() {
        let cl = ClosedLoop {
            f: Box::new(|x| DVector::from_vec(vec![x[1], -x[0] - x[1] * x[1] * x[1]])),
            controller: Box::new(|x| DVector::from_element(1, -x[0] - 2.0 * x[1])),
            output_map: None,
            b: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            e: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            c: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            dmat: DMatrix::zeros(1, 1),
            ded: DMatrix::zeros(1, 1),
        };
        let d = |t: f64| DVector::from_element(1, (2.0 * t).cos());
        let x0 = DVector::from_vec(vec![0.2, -0.1]);
        let a = simulate_delay_cl(&cl, 0.0, &d, &x0, 3.0, 1e-3).unwrap();
        // hand-written RK4 with undelayed feedback
        let g = |x: &DVector<f64>, t: f64| (cl.f)(x) + &cl.b * (cl.controller)(x) + &cl.e * d(t);
        let mut x = x0.clone();
        let h = 1e-3;
        for k in 0..3000 {
            let t = k as f64 * h;
            let k1 = g(&x, t);
            let k2 = g(&(&x + &k1 * (h / 2.0)), t + h / 2.0);
            let k3 = g(&(&x + &k2 * (h / 2.0)), t + h / 2.0);
            let k4 = g(&(&x + &k3 * h), t + h);
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        assert!((a.x.last().unwrap() - x).amax() < 1e-10);
    }

    #[test]
    fn geodesic_controller_cases() {
        let kc = |_: &DVector<f64>| DMatrix::from_row_slice(1, 2, &[-2.0, 3.0]);
        let x = DVector::from_vec(vec![0.4, -0.3]);
        let xs = DVector::from_vec(vec![0.1, 0.2]);
        let us = DVector::from_element(1, 0.7);
        assert_eq!(geodesic_controller(&xs, &xs, &us, &kc), us);
        let u = geodesic_controller(&x, &xs, &us, &kc);
        assert!((u[0] - (0.7 + (-2.0 * 0.3 + 3.0 * -0.5))).abs() < 1e-12);
        // affine K: Simpson is exact, compare with a fine trapezoid rule
        let ka = |g: &DVector<f64>| DMatrix::from_row_slice(1, 2, &[1.0 + g[0], 2.0 - 3.0 * g[1]]);
        let u = geodesic_controller(&x, &xs, &us, &ka);
        let n = 1000;
        let dx = &x - &xs;
        let mut acc = 0.0;
        for i in 0..=n {
            let s = i as f64 / n as f64;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            acc += w * (ka(&(&xs + &dx * s)) * &dx)[0];
        }
        let trap = 0.7 + acc / n as f64;
        assert!((u[0] - trap).abs() < 1e-6, "{} {}", u[0], trap);
        // exact value: ∫ (1 + xs0 + s dx0) dx0 + (2 − 3 xs1 − 3 s dx1) dx1 ds
        let exact = 0.7 + (1.0 + xs[0] + 0.5 * dx[0]) * dx[0] + (2.0 - 3.0 * xs[1] - 1.5 * dx[1]) * dx[1];
        assert!((u[0] - exact).abs() < 1e-12);
    }

    #[test]
    fn inc_gain_of_lag_at_low_frequency() {
        let g = lag();
        let cl = lti_loop(&g);
        let w = 0.01;
        let a = simulate_delay_cl(&cl, 0.0, &|_| DVector::zeros(1), &DVector::zeros(1), 200.0, 1e-2).unwrap();
        let b = simulate_delay_cl(&cl, 0.0, &|t| DVector::from_element(1, (w * t).cos()), &DVector::zeros(1), 200.0, 1e-2).unwrap();
        let gain = empirical_inc_gain(&[(a.clone(), b)], &[0.0]).unwrap();
        assert!((gain - 1.0).abs() < 2e-2, "{gain}");
        assert!(matches!(empirical_inc_gain(&[(a.clone(), a)], &[0.0]), Err(SimError::Degenerate)));
    }

    #[test]
    fn disturbances_are_normalized_and_seeded() {
        let s = disturbance_set(3, 7, 50.0, 1e-2);
        for m in &s {
            assert!((m.energy(50.0, 1e-2) - 1.0).abs() < 1e-12);
        }
        assert_eq!(s, disturbance_set(3, 7, 50.0, 1e-2));
        assert_ne!(s, disturbance_set(3, 8, 50.0, 1e-2));
    }

    #[test]
    fn friction_step_rule() {
        let z = |_: f64| 0.0;
        assert!(friction_variational(1.0, 1.0, 1.0, 1e-3, &z, &z, 1.0, 1e-3).is_ok());
        assert!(matches!(friction_variational(1.0, 1.0, 1.0, 1e-5, &z, &z, 1.0, 1e-3), Err(SimError::StepTooLarge { .. })));
        let (_, dy) = friction_variational(1.0, 1.0, 1.0, 1e-2, &|t| t.sin(), &z, 5.0, 1e-3).unwrap();
        assert!(dy.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn csv_layout() {
        let g = lag();
        let cl = lti_loop(&g);
        let tr = simulate_delay_cl(&cl, 0.0, &|_| DVector::from_element(1, 1.0), &DVector::zeros(1), 0.002, 1e-3).unwrap();
        let csv = tr.to_csv(&["x".into()], &["d".into()], &["e".into()]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,x,d,e");
        assert_eq!(lines.len(), 4);
    }
}
