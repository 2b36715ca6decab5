//! Model files: TOML with `[system]`, `[controller]`, `[uncertainty]`,
//! `[analysis]`, `[simulation]` and `[sweep]` tables.

use std::path::Path;

use diqc_core::analysis::GainConfig;
use diqc_core::diffsys::{differentiate_system, ControlledPlant, DiffSystem, NominalSystem};
use diqc_core::iqc::{delay_multipliers, normbound_set, MultiplierSet};
use diqc_core::poly::{PolyError, PolyMatrix, Polynomial, VarRegistry};
use diqc_core::sosp::Region;
use nalgebra::DMatrix;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;
use toml::Spanned;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{path}:{line}:{column}: {message}")]
    At { path: String, line: usize, column: usize, message: String },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    system: RawSystem,
    controller: Option<RawController>,
    #[serde(default)]
    uncertainty: RawUncertainty,
    #[serde(default)]
    analysis: RawAnalysis,
    #[serde(default)]
    simulation: RawSimulation,
    #[serde(default)]
    sweep: RawSweep,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    kind: Spanned<String>,
    states: Vec<String>,
    #[serde(default)]
    disturbances: Vec<String>,
    #[serde(default)]
    uncertainty_inputs: Vec<String>,
    f: Vec<Spanned<String>>,
    #[serde(default)]
    g: Vec<Spanned<String>>,
    #[serde(default)]
    h: Vec<Spanned<String>>,
    #[serde(rename = "B")]
    b: Option<Vec<Vec<f64>>>,
    #[serde(rename = "E")]
    e: Option<Vec<Vec<f64>>>,
    #[serde(rename = "C")]
    c: Option<Vec<Vec<f64>>>,
    #[serde(rename = "D")]
    d: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawController {
    #[serde(rename = "K")]
    k: Option<Vec<Vec<Spanned<String>>>>,
    synthesize: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawUncertainty {
    #[serde(rename = "type")]
    kind: Spanned<String>,
    theta: Option<f64>,
}

impl Default for RawUncertainty {
    fn default() -> Self {
        Self { kind: Spanned::new(0..0, "none".into()), theta: None }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBound {
    var: Spanned<String>,
    lo: f64,
    hi: f64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnalysis {
    #[serde(default)]
    bounds: Vec<RawBound>,
    #[serde(default)]
    generators: Vec<Spanned<String>>,
    p_degree: Option<u32>,
    mult_degree: Option<u32>,
    eps_lmi: Option<f64>,
    lambda_min: Option<f64>,
    seed: Option<u64>,
    n_samples: Option<usize>,
    sample_radius: Option<f64>,
    tol: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSimulation {
    horizon: Option<f64>,
    step: Option<f64>,
    pairs: Option<usize>,
    seed: Option<u64>,
    perturbation: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    #[serde(default)]
    thetas: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum ControllerSpec {
    /// Differential gain K(x), polynomial in the states.
    Gain(PolyMatrix),
    /// Constant-metric synthesis with this closed-loop gain target.
    Synthesize(f64),
}

/// ẋ = f(x) + B u + E d, e = C x + D u, with u realized by the geodesic
/// controller around the origin.
#[derive(Debug, Clone)]
pub struct PlantModel {
    pub f: Vec<Polynomial>,
    pub b: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub dmat: DMatrix<f64>,
    pub controller: ControllerSpec,
}

#[derive(Debug, Clone)]
pub enum SystemSpec {
    Nominal(NominalSystem),
    Plant(PlantModel),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UncertaintySpec {
    None,
    NormBound,
    Delay { theta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSettings {
    pub horizon: f64,
    pub step: f64,
    pub pairs: usize,
    pub seed: u64,
    /// Scale of the second signal added to each reference disturbance.
    pub perturbation: f64,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub path: String,
    /// SHA-256 of the file contents.
    pub hash: String,
    pub registry: VarRegistry,
    pub x: Vec<usize>,
    pub w: Vec<usize>,
    pub d: Vec<usize>,
    pub system: SystemSpec,
    pub uncertainty: UncertaintySpec,
    pub region: Region,
    pub config: GainConfig,
    pub simulation: SimSettings,
    pub sweep: Vec<f64>,
}

/// Everything `min_gain` needs for one uncertainty setting.
pub struct Prepared {
    pub ds: DiffSystem,
    pub ms: Option<MultiplierSet>,
    pub multiplier_id: String,
    /// Differential controller gain for plant models.
    pub gain: Option<PolyMatrix>,
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(src.len());
    let before = &src[..offset];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(offset, |p| offset - p - 1) + 1;
    (line, column)
}

pub fn hash_source(src: &str) -> String {
    hex::encode(Sha256::digest(src.as_bytes()))
}

struct Ctx<'a> {
    path: &'a str,
    src: &'a str,
}

impl Ctx<'_> {
    fn at(&self, offset: usize, message: impl Into<String>) -> ModelError {
        let (line, column) = line_col(self.src, offset);
        ModelError::At { path: self.path.into(), line, column, message: message.into() }
    }

    fn invalid(&self, message: impl Into<String>) -> ModelError {
        ModelError::Invalid { path: self.path.into(), message: message.into() }
    }

    fn poly(&self, s: &Spanned<String>, reg: &VarRegistry) -> Result<Polynomial, ModelError> {
        Polynomial::parse(s.get_ref(), reg).map_err(|e| {
            // the span starts at the opening quote
            let col = match &e {
                PolyError::Parse { column, .. } | PolyError::UnknownVar { column, .. } => *column,
                _ => 1,
            };
            self.at(s.span().start + col, format!("in polynomial \"{}\": {e}", s.get_ref()))
        })
    }

    fn matrix(&self, name: &str, rows: &Option<Vec<Vec<f64>>>, nr: usize, nc: usize) -> Result<DMatrix<f64>, ModelError> {
        let Some(rows) = rows else {
            return if nr == 0 || nc == 0 { Ok(DMatrix::zeros(nr, nc)) } else { Err(self.invalid(format!("system.{name} is required"))) };
        };
        if rows.len() != nr || rows.iter().any(|r| r.len() != nc) {
            return Err(self.invalid(format!("system.{name} must be {nr}x{nc}")));
        }
        Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
    }
}

impl Model {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let p = path.as_ref();
        let src = std::fs::read_to_string(p).map_err(|source| ModelError::Io { path: p.display().to_string(), source })?;
        Self::parse(&src, &p.display().to_string())
    }

    pub fn parse(src: &str, path: &str) -> Result<Self, ModelError> {
        let cx = Ctx { path, src };
        let raw: RawModel = toml::from_str(src).map_err(|e| {
            let off = e.span().map_or(0, |s| s.start);
            cx.at(off, e.message().to_string())
        })?;
        let sys = &raw.system;
        let kind = sys.kind.get_ref().as_str();
        let mut names: Vec<String> = sys.states.clone();
        if kind == "nominal" {
            names.extend(sys.uncertainty_inputs.iter().cloned());
        } else if !sys.uncertainty_inputs.is_empty() {
            return Err(cx.invalid("system.uncertainty_inputs only applies to nominal systems"));
        }
        names.extend(sys.disturbances.iter().cloned());
        let registry = VarRegistry::new(&names).map_err(|e| cx.invalid(e.to_string()))?;
        let nx = sys.states.len();
        let nw = if kind == "nominal" { sys.uncertainty_inputs.len() } else { 0 };
        let nd = sys.disturbances.len();
        let x: Vec<usize> = (0..nx).collect();
        let w: Vec<usize> = (nx..nx + nw).collect();
        let d: Vec<usize> = (nx + nw..nx + nw + nd).collect();
        if nx == 0 {
            return Err(cx.invalid("system.states is empty"));
        }
        if sys.f.len() != nx {
            return Err(cx.invalid(format!("system.f has {} entries for {nx} states", sys.f.len())));
        }
        let f = sys.f.iter().map(|s| cx.poly(s, &registry)).collect::<Result<Vec<_>, _>>()?;
        let system = match kind {
            "nominal" => {
                if raw.controller.is_some() {
                    return Err(cx.invalid("nominal systems take no [controller]"));
                }
                if sys.b.is_some() || sys.e.is_some() || sys.c.is_some() || sys.d.is_some() {
                    return Err(cx.invalid("matrices B, E, C, D only apply to plant systems"));
                }
                let g = sys.g.iter().map(|s| cx.poly(s, &registry)).collect::<Result<Vec<_>, _>>()?;
                let h = sys.h.iter().map(|s| cx.poly(s, &registry)).collect::<Result<Vec<_>, _>>()?;
                let ns = NominalSystem::new(registry.clone(), x.clone(), w.clone(), d.clone(), f, g, h).map_err(|e| cx.invalid(e.to_string()))?;
                SystemSpec::Nominal(ns)
            }
            "plant" => {
                if !sys.g.is_empty() || !sys.h.is_empty() {
                    return Err(cx.invalid("plant systems use C and D instead of g and h"));
                }
                let nu = sys.b.as_ref().and_then(|r| r.first()).map_or(0, |r| r.len());
                let b = cx.matrix("B", &sys.b, nx, nu)?;
                let e = cx.matrix("E", &sys.e, nx, nd)?;
                let ne = sys.c.as_ref().map_or(0, |r| r.len());
                let c = cx.matrix("C", &sys.c, ne, nx)?;
                let dmat = cx.matrix("D", &sys.d, ne, nu)?;
                let ctrl = raw.controller.as_ref().ok_or_else(|| cx.invalid("plant systems need a [controller] table"))?;
                let controller = match (&ctrl.k, ctrl.synthesize) {
                    (Some(rows), None) => {
                        if rows.len() != nu || rows.iter().any(|r| r.len() != nx) {
                            return Err(cx.invalid(format!("controller.K must be {nu}x{nx}")));
                        }
                        let mut entries = Vec::with_capacity(nu * nx);
                        for r in rows {
                            for s in r {
                                let p = cx.poly(s, &registry)?;
                                if p.vars_used().iter().any(|v| *v >= nx) {
                                    return Err(cx.at(s.span().start, "controller.K may depend on the states only"));
                                }
                                entries.push(p);
                            }
                        }
                        ControllerSpec::Gain(PolyMatrix::new(nu, nx, entries).map_err(|e| cx.invalid(e.to_string()))?)
                    }
                    (None, Some(target)) if target > 0.0 => ControllerSpec::Synthesize(target),
                    (None, Some(target)) => return Err(cx.invalid(format!("controller.synthesize must be positive, got {target}"))),
                    _ => return Err(cx.invalid("controller needs exactly one of K and synthesize")),
                };
                SystemSpec::Plant(PlantModel { f, b, e, c, dmat, controller })
            }
            other => return Err(cx.at(sys.kind.span().start, format!("unknown system kind `{other}` (expected plant or nominal)"))),
        };
        let unc = &raw.uncertainty;
        let uncertainty = match unc.kind.get_ref().as_str() {
            "none" => UncertaintySpec::None,
            "normbound" => {
                if !matches!(system, SystemSpec::Nominal(_)) || nw == 0 {
                    return Err(cx.invalid("normbound uncertainty needs a nominal system with uncertainty inputs"));
                }
                UncertaintySpec::NormBound
            }
            "delay" => {
                if !matches!(system, SystemSpec::Plant(_)) {
                    return Err(cx.invalid("delay uncertainty acts on the control input of a plant system"));
                }
                let theta = unc.theta.unwrap_or(0.0);
                if !(theta >= 0.0) || !theta.is_finite() {
                    return Err(cx.invalid(format!("uncertainty.theta must be nonnegative, got {theta}")));
                }
                UncertaintySpec::Delay { theta }
            }
            other => return Err(cx.at(unc.kind.span().start, format!("unknown uncertainty type `{other}` (expected none, normbound or delay)"))),
        };
        let a = &raw.analysis;
        let mut region = Region::everywhere();
        for bnd in &a.bounds {
            let v = registry.index_of(bnd.var.get_ref()).ok_or_else(|| cx.at(bnd.var.span().start, format!("unknown variable `{}`", bnd.var.get_ref())))?;
            if !(bnd.lo < bnd.hi) {
                return Err(cx.at(bnd.var.span().start, format!("empty interval [{}, {}]", bnd.lo, bnd.hi)));
            }
            region = region.with_interval(registry.len(), v, bnd.lo, bnd.hi);
        }
        for g in &a.generators {
            region = region.with_generator(cx.poly(g, &registry)?);
        }
        let mut config = GainConfig::default();
        if let Some(v) = a.p_degree {
            config.p_degree = v;
        }
        if let Some(v) = a.mult_degree {
            config.mult_degree = v;
        }
        if let Some(v) = a.eps_lmi {
            config.eps_lmi = v;
        }
        if let Some(v) = a.lambda_min {
            config.lambda_min = v;
        }
        if let Some(v) = a.seed {
            config.seed = v;
        }
        if let Some(v) = a.n_samples {
            config.n_samples = v;
        }
        if let Some(v) = a.sample_radius {
            config.sample_radius = v;
        }
        if let Some(v) = a.tol {
            config.solver.tol = v;
        }
        let s = &raw.simulation;
        let simulation = SimSettings {
            horizon: s.horizon.unwrap_or(50.0),
            step: s.step.unwrap_or(1e-3),
            pairs: s.pairs.unwrap_or(20),
            seed: s.seed.unwrap_or(1),
            perturbation: s.perturbation.unwrap_or(0.5),
        };
        if !(simulation.horizon > 0.0 && simulation.step > 0.0 && simulation.pairs > 0) {
            return Err(cx.invalid("simulation needs horizon > 0, step > 0 and pairs > 0"));
        }
        Ok(Model {
            path: path.into(),
            hash: hash_source(src),
            registry,
            x,
            w,
            d,
            system,
            uncertainty,
            region,
            config,
            simulation,
            sweep: raw.sweep.thetas.clone(),
        })
    }

    pub fn var_names(&self) -> Vec<String> {
        self.registry.names().to_vec()
    }

    /// Resolves the controller gain, running the synthesis when requested.
    pub fn controller_gain(&self) -> Result<Option<PolyMatrix>, diqc_core::analysis::AnalysisError> {
        let SystemSpec::Plant(p) = &self.system else {
            return Ok(None);
        };
        match &p.controller {
            ControllerSpec::Gain(k) => Ok(Some(k.clone())),
            ControllerSpec::Synthesize(target) => {
                let sp = diqc_core::analysis::SynthesisProblem {
                    nvars: self.registry.len(),
                    x: self.x.clone(),
                    f: p.f.clone(),
                    b: p.b.clone(),
                    e: p.e.clone(),
                    c: p.c.clone(),
                    dmat: p.dmat.clone(),
                    region: self.region.clone(),
                };
                let syn = diqc_core::analysis::ccm_synthesize(&sp, *target, &self.config)?;
                Ok(Some(syn.k_poly(self.registry.len())))
            }
        }
    }

    /// Delay bound in effect, with an optional override.
    pub fn theta(&self, theta: Option<f64>) -> Option<f64> {
        match self.uncertainty {
            UncertaintySpec::Delay { theta: t } => Some(theta.unwrap_or(t)),
            _ => None,
        }
    }

    /// Differential system and multipliers for a given controller gain.
    pub fn prepare(&self, gain: Option<&PolyMatrix>, theta: Option<f64>) -> diqc_core::Result<Prepared> {
        let ds = match &self.system {
            SystemSpec::Nominal(ns) => differentiate_system(ns)?,
            SystemSpec::Plant(p) => {
                let k = gain.cloned().unwrap_or_else(|| PolyMatrix::zeros(self.registry.len(), p.b.ncols(), self.x.len()));
                ControlledPlant {
                    registry: &self.registry,
                    x: self.x.clone(),
                    d: self.d.clone(),
                    f: p.f.clone(),
                    b: p.b.clone(),
                    e: p.e.clone(),
                    c: p.c.clone(),
                    dmat: p.dmat.clone(),
                    k,
                }
                .differential()?
            }
        };
        let (ms, multiplier_id) = match self.uncertainty {
            UncertaintySpec::None => (None, "none".to_string()),
            UncertaintySpec::NormBound => (Some(normbound_set(ds.nv(), ds.nw())?), "normbound".to_string()),
            UncertaintySpec::Delay { .. } => {
                let th = self.theta(theta).unwrap_or(0.0);
                (Some(delay_multipliers(th)?), multiplier_id_for_delay(th))
            }
        };
        Ok(Prepared { ds, ms, multiplier_id, gain: gain.cloned() })
    }
}

pub fn multiplier_id_for_delay(theta: f64) -> String {
    format!("delay(theta={theta})")
}

/// Inverse of [`multiplier_id_for_delay`].
pub fn delay_from_multiplier_id(id: &str) -> Option<f64> {
    id.strip_prefix("delay(theta=")?.strip_suffix(')')?.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    const LAG: &str = r#"
[system]
kind = "nominal"
states = ["x"]
disturbances = ["d"]
f = ["-x + d"]
h = ["x"]
"#;

    #[test]
    fn parses_nominal_model() {
        let m = Model::parse(LAG, "lag.model").unwrap();
        assert_eq!(m.var_names(), vec!["x", "d"]);
        assert_eq!(m.uncertainty, UncertaintySpec::None);
        assert_eq!(m.simulation.pairs, 20);
        assert_eq!(m.hash.len(), 64);
    }

    #[test]
    fn polynomial_errors_carry_location() {
        let src = LAG.replace("\"-x + d\"", "\"-x + * d\"");
        let err = Model::parse(&src, "bad.model").unwrap_err();
        match err {
            ModelError::At { line, column, .. } => {
                assert_eq!(line, 6);
                assert!(column > 5, "{column}");
            }
            e => panic!("{e}"),
        }
        let src = LAG.replace("\"x\"]\n\"", "");
        let src = src.replace("h = [\"x\"]", "h = [\"y\"]");
        assert!(matches!(Model::parse(&src, "bad.model"), Err(ModelError::At { line: 7, .. })));
    }

    #[test]
    fn toml_errors_carry_location() {
        let err = Model::parse("[system]\nkind = \n", "x").unwrap_err();
        assert!(matches!(err, ModelError::At { line: 2, .. }), "{err}");
    }

    #[test]
    fn delay_id_roundtrip() {
        for th in [0.0, 0.04, 0.16] {
            assert_eq!(delay_from_multiplier_id(&multiplier_id_for_delay(th)), Some(th));
        }
        assert_eq!(delay_from_multiplier_id("none"), None);
    }

    #[test]
    fn rejects_mixed_controller() {
        let src = r#"
[system]
kind = "plant"
states = ["x"]
f = ["-x"]
B = [[1.0]]
C = [[1.0]]
[controller]
K = [["-1"]]
synthesize = 1.0
"#;
        assert!(matches!(Model::parse(src, "m"), Err(ModelError::Invalid { .. })));
    }
}
