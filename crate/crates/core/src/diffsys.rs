//! Differential dynamics of a polynomial nominal system and its series
//! interconnection with a multiplier filter.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::lti::StateSpace;
use crate::poly::{self, PolyError, PolyMatrix, Polynomial, VarRegistry};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffSysError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("variable {0} is listed in more than one role")]
    RoleOverlap(String),
    #[error(transparent)]
    Poly(#[from] PolyError),
}

pub type DiffSysResult<T> = std::result::Result<T, DiffSysError>;

/// ẋ = f(x, w, d), v = g(x, w, d), e = h(x, w, d), polynomial in all arguments.
#[derive(Debug, Clone)]
pub struct NominalSystem {
    pub registry: VarRegistry,
    pub x: Vec<usize>,
    pub w: Vec<usize>,
    pub d: Vec<usize>,
    pub f: Vec<Polynomial>,
    pub g: Vec<Polynomial>,
    pub h: Vec<Polynomial>,
}

impl NominalSystem {
    pub fn new(
        registry: VarRegistry,
        x: Vec<usize>,
        w: Vec<usize>,
        d: Vec<usize>,
        f: Vec<Polynomial>,
        g: Vec<Polynomial>,
        h: Vec<Polynomial>,
    ) -> DiffSysResult<Self> {
        let nvars = registry.len();
        let mut seen = BTreeSet::new();
        for &i in x.iter().chain(&w).chain(&d) {
            if i >= nvars {
                return Err(PolyError::VarOutOfRange { index: i, nvars }.into());
            }
            if !seen.insert(i) {
                return Err(DiffSysError::RoleOverlap(registry.name(i).to_string()));
            }
        }
        if f.len() != x.len() {
            return Err(DiffSysError::DimensionMismatch { what: "state equations", expected: x.len(), got: f.len() });
        }
        for p in f.iter().chain(&g).chain(&h) {
            if p.nvars() != nvars {
                return Err(DiffSysError::DimensionMismatch { what: "polynomial variable count", expected: nvars, got: p.nvars() });
            }
        }
        Ok(Self { registry, x, w, d, f, g, h })
    }
}

/// Jacobian blocks of the nominal system, polynomial in ρ = (x, w, d).
#[derive(Debug, Clone, PartialEq)]
pub struct DiffSystem {
    pub nvars: usize,
    pub x_vars: Vec<usize>,
    pub w_vars: Vec<usize>,
    pub d_vars: Vec<usize>,
    /// Known state equations; `None` where ẋ_i is not available as a polynomial
    /// (for instance when it involves an integral controller).
    pub drift: Vec<Option<Polynomial>>,
    pub a_x: PolyMatrix,
    pub b_xw: PolyMatrix,
    pub b_xd: PolyMatrix,
    pub c_v: PolyMatrix,
    pub d_vw: PolyMatrix,
    pub d_vd: PolyMatrix,
    pub c_e: PolyMatrix,
    pub d_ew: PolyMatrix,
    pub d_ed: PolyMatrix,
}

fn jac(field: &[Polynomial], vars: &[usize], nvars: usize) -> DiffSysResult<PolyMatrix> {
    if field.is_empty() || vars.is_empty() {
        return Ok(PolyMatrix::zeros(nvars, field.len(), vars.len()));
    }
    Ok(poly::jacobian(field, vars)?)
}

fn check_shape(m: &PolyMatrix, what: &'static str, rows: usize, cols: usize, nvars: usize) -> DiffSysResult<()> {
    if m.rows() != rows {
        return Err(DiffSysError::DimensionMismatch { what, expected: rows, got: m.rows() });
    }
    if m.cols() != cols {
        return Err(DiffSysError::DimensionMismatch { what, expected: cols, got: m.cols() });
    }
    if m.nvars() != nvars {
        return Err(DiffSysError::DimensionMismatch { what, expected: nvars, got: m.nvars() });
    }
    Ok(())
}

impl DiffSystem {
    pub fn nx(&self) -> usize {
        self.x_vars.len()
    }
    /// Width of the w channel. When w enters linearly it need not carry
    /// polynomial indeterminates, so `w_vars` may be empty.
    pub fn nw(&self) -> usize {
        self.b_xw.cols()
    }
    pub fn nd(&self) -> usize {
        self.d_vars.len()
    }
    pub fn nv(&self) -> usize {
        self.c_v.rows()
    }
    pub fn ne(&self) -> usize {
        self.c_e.rows()
    }

    /// Checks that all blocks are conformal.
    pub fn validate(&self) -> DiffSysResult<()> {
        let (nx, nw, nd, nv, ne, nvars) = (self.nx(), self.nw(), self.nd(), self.nv(), self.ne(), self.nvars);
        if !self.w_vars.is_empty() && self.w_vars.len() != nw {
            return Err(DiffSysError::DimensionMismatch { what: "w variables", expected: nw, got: self.w_vars.len() });
        }
        check_shape(&self.a_x, "A_x", nx, nx, nvars)?;
        check_shape(&self.b_xw, "B_xw", nx, nw, nvars)?;
        check_shape(&self.b_xd, "B_xd", nx, nd, nvars)?;
        check_shape(&self.c_v, "C_v", nv, nx, nvars)?;
        check_shape(&self.d_vw, "D_vw", nv, nw, nvars)?;
        check_shape(&self.d_vd, "D_vd", nv, nd, nvars)?;
        check_shape(&self.c_e, "C_e", ne, nx, nvars)?;
        check_shape(&self.d_ew, "D_ew", ne, nw, nvars)?;
        check_shape(&self.d_ed, "D_ed", ne, nd, nvars)?;
        if self.drift.len() != nx {
            return Err(DiffSysError::DimensionMismatch { what: "drift", expected: nx, got: self.drift.len() });
        }
        Ok(())
    }

    /// States that a state-dependent storage matrix may depend on: those whose
    /// drift is known and free of w and d.
    pub fn storage_vars(&self) -> Vec<usize> {
        let inputs: BTreeSet<usize> = self.w_vars.iter().chain(&self.d_vars).copied().collect();
        self.x_vars
            .iter()
            .zip(&self.drift)
            .filter(|(_, f)| matches!(f, Some(p) if p.vars_used().is_disjoint(&inputs)))
            .map(|(&x, _)| x)
            .collect()
    }

    /// Blockwise sum (same variables and dimensions).
    pub fn add(&self, other: &DiffSystem) -> DiffSysResult<DiffSystem> {
        let drift = self
            .drift
            .iter()
            .zip(&other.drift)
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => Some(a + b),
                _ => None,
            })
            .collect();
        Ok(DiffSystem {
            nvars: self.nvars,
            x_vars: self.x_vars.clone(),
            w_vars: self.w_vars.clone(),
            d_vars: self.d_vars.clone(),
            drift,
            a_x: self.a_x.add(&other.a_x)?,
            b_xw: self.b_xw.add(&other.b_xw)?,
            b_xd: self.b_xd.add(&other.b_xd)?,
            c_v: self.c_v.add(&other.c_v)?,
            d_vw: self.d_vw.add(&other.d_vw)?,
            d_vd: self.d_vd.add(&other.d_vd)?,
            c_e: self.c_e.add(&other.c_e)?,
            d_ew: self.d_ew.add(&other.d_ew)?,
            d_ed: self.d_ed.add(&other.d_ed)?,
        })
    }
}

/// All nine Jacobian blocks of a nominal system.
pub fn differentiate_system(ns: &NominalSystem) -> DiffSysResult<DiffSystem> {
    let nvars = ns.registry.len();
    let ds = DiffSystem {
        nvars,
        x_vars: ns.x.clone(),
        w_vars: ns.w.clone(),
        d_vars: ns.d.clone(),
        drift: ns.f.iter().cloned().map(Some).collect(),
        a_x: jac(&ns.f, &ns.x, nvars)?,
        b_xw: jac(&ns.f, &ns.w, nvars)?,
        b_xd: jac(&ns.f, &ns.d, nvars)?,
        c_v: jac(&ns.g, &ns.x, nvars)?,
        d_vw: jac(&ns.g, &ns.w, nvars)?,
        d_vd: jac(&ns.g, &ns.d, nvars)?,
        c_e: jac(&ns.h, &ns.x, nvars)?,
        d_ew: jac(&ns.h, &ns.w, nvars)?,
        d_ed: jac(&ns.h, &ns.d, nvars)?,
    };
    ds.validate()?;
    Ok(ds)
}

/// Plant ẋ = f(x) + B(u + w) + E d under a controller with differential
/// δ_u = K(x) δ_x, and performance output e = C x + D (u + w).
///
/// The uncertainty channel is v = u (the controller output) and w enters
/// where u does, which is the input-delay configuration w = v(· − θ) − v.
/// Only the differential of the controller is needed.
pub struct ControlledPlant<'a> {
    pub registry: &'a VarRegistry,
    pub x: Vec<usize>,
    pub d: Vec<usize>,
    pub f: Vec<Polynomial>,
    pub b: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub dmat: DMatrix<f64>,
    pub k: PolyMatrix,
}

impl ControlledPlant<'_> {
    pub fn differential(&self) -> DiffSysResult<DiffSystem> {
        let nvars = self.registry.len();
        let nx = self.x.len();
        let nu = self.b.ncols();
        let nd = self.d.len();
        if self.f.len() != nx {
            return Err(DiffSysError::DimensionMismatch { what: "state equations", expected: nx, got: self.f.len() });
        }
        if self.b.nrows() != nx {
            return Err(DiffSysError::DimensionMismatch { what: "rows of B", expected: nx, got: self.b.nrows() });
        }
        if self.e.shape() != (nx, nd) {
            return Err(DiffSysError::DimensionMismatch { what: "E", expected: nx, got: self.e.nrows() });
        }
        if self.c.ncols() != nx {
            return Err(DiffSysError::DimensionMismatch { what: "columns of C", expected: nx, got: self.c.ncols() });
        }
        if self.dmat.shape() != (self.c.nrows(), nu) {
            return Err(DiffSysError::DimensionMismatch { what: "D", expected: nu, got: self.dmat.ncols() });
        }
        check_shape(&self.k, "K", nu, nx, nvars)?;
        let fx = jac(&self.f, &self.x, nvars)?;
        let b = PolyMatrix::from_dmatrix(nvars, &self.b);
        let c = PolyMatrix::from_dmatrix(nvars, &self.c);
        let dm = PolyMatrix::from_dmatrix(nvars, &self.dmat);
        let a_x = fx.add(&b.mul(&self.k)?)?;
        let c_e = c.add(&dm.mul(&self.k)?)?;
        let ne = self.c.nrows();
        // drift is known for states the control does not reach
        let drift = (0..nx)
            .map(|i| {
                if (0..nu).all(|j| self.b[(i, j)] == 0.0) {
                    let mut p = self.f[i].clone();
                    for (j, &dv) in self.d.iter().enumerate() {
                        p = &p + &Polynomial::var(nvars, dv).scale(self.e[(i, j)]);
                    }
                    Some(p)
                } else {
                    None
                }
            })
            .collect();
        let ds = DiffSystem {
            nvars,
            x_vars: self.x.clone(),
            w_vars: vec![],
            d_vars: self.d.clone(),
            drift,
            a_x,
            b_xw: b.clone(),
            b_xd: PolyMatrix::from_dmatrix(nvars, &self.e),
            c_v: self.k.clone(),
            d_vw: PolyMatrix::zeros(nvars, nu, nu),
            d_vd: PolyMatrix::zeros(nvars, nu, nd),
            c_e,
            d_ew: dm,
            d_ed: PolyMatrix::zeros(nvars, ne, nd),
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// δG in series with the stacked filter Ψ, extended state χ = (x, ψ).
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedSystem {
    pub nx: usize,
    pub npsi: usize,
    pub nw: usize,
    pub nd: usize,
    pub a: PolyMatrix,
    pub b_w: PolyMatrix,
    pub b_d: PolyMatrix,
    pub c_z: PolyMatrix,
    pub d_zw: PolyMatrix,
    pub d_zd: PolyMatrix,
    pub c_e: PolyMatrix,
    pub d_ew: PolyMatrix,
    pub d_ed: PolyMatrix,
}

impl ExtendedSystem {
    pub fn n_chi(&self) -> usize {
        self.nx + self.npsi
    }
    pub fn nz(&self) -> usize {
        self.c_z.rows()
    }
    pub fn ne(&self) -> usize {
        self.c_e.rows()
    }
    pub fn nvars(&self) -> usize {
        self.a.nvars()
    }

    /// Numerical LTI system (inputs (w, d), outputs (z, e)) frozen at ρ.
    pub fn eval(&self, point: &[f64]) -> DiffSysResult<StateSpace> {
        let a = self.a.eval(point)?;
        let b = hcat(&self.b_w.eval(point)?, &self.b_d.eval(point)?);
        let c = vcat(&self.c_z.eval(point)?, &self.c_e.eval(point)?);
        let d = vcat(&hcat(&self.d_zw.eval(point)?, &self.d_zd.eval(point)?), &hcat(&self.d_ew.eval(point)?, &self.d_ed.eval(point)?));
        StateSpace::new(a, b, c, d).map_err(|_| DiffSysError::DimensionMismatch { what: "evaluated extended system", expected: self.n_chi(), got: 0 })
    }
}

pub(crate) fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    out
}

pub(crate) fn vcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((a.nrows(), 0), b.shape()).copy_from(b);
    out
}

pub fn extend(ds: &DiffSystem, filter: &StateSpace) -> DiffSysResult<ExtendedSystem> {
    ds.validate()?;
    let (nx, nw, nd, nv) = (ds.nx(), ds.nw(), ds.nd(), ds.nv());
    if filter.n_inputs() != nv + nw {
        return Err(DiffSysError::DimensionMismatch { what: "filter inputs", expected: nv + nw, got: filter.n_inputs() });
    }
    let nvars = ds.nvars;
    let npsi = filter.n_states();
    let nz = filter.n_outputs();
    let c = |m: DMatrix<f64>| PolyMatrix::from_dmatrix(nvars, &m);
    let a_psi = c(filter.a().clone());
    let b_pv = c(filter.b().columns(0, nv).clone_owned());
    let b_pw = c(filter.b().columns(nv, nw).clone_owned());
    let c_psi = c(filter.c().clone());
    let d_zv = c(filter.d().columns(0, nv).clone_owned());
    let d_zw = c(filter.d().columns(nv, nw).clone_owned());
    let z = |r: usize, cc: usize| PolyMatrix::zeros(nvars, r, cc);

    let a = PolyMatrix::from_blocks(&[vec![&ds.a_x, &z(nx, npsi)], vec![&b_pv.mul(&ds.c_v)?, &a_psi]])?;
    let b_w = PolyMatrix::from_blocks(&[vec![&ds.b_xw], vec![&b_pv.mul(&ds.d_vw)?.add(&b_pw)?]])?;
    let b_d = PolyMatrix::from_blocks(&[vec![&ds.b_xd], vec![&b_pv.mul(&ds.d_vd)?]])?;
    let c_z = PolyMatrix::from_blocks(&[vec![&d_zv.mul(&ds.c_v)?, &c_psi]])?;
    let d_zw_ext = d_zv.mul(&ds.d_vw)?.add(&d_zw)?;
    let d_zd = d_zv.mul(&ds.d_vd)?;
    let c_e = PolyMatrix::from_blocks(&[vec![&ds.c_e, &z(ds.ne(), npsi)]])?;
    let _ = nz;
    Ok(ExtendedSystem { nx, npsi, nw, nd, a, b_w, b_d, c_z, d_zw: d_zw_ext, d_zd, c_e, d_ew: ds.d_ew.clone(), d_ed: ds.d_ed.clone() })
}
