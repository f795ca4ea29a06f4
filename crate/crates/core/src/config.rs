//! JSON experiment configuration and its resolution onto concrete grids.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridError, SpaceTimeArray, SpatialGrid, TimeGrid};
use crate::inverse::InversionConfig;
use crate::materials::{Excitation, MaterialParams, PhysicalCoefficients, Relaxation, SpaceTimeField};
use crate::observation::ObservationSpec;
use crate::solver::{InitialData, SolverConfig, SolverError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed config at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{field}: {message}")]
    Invalid { field: &'static str, message: String },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        message: message.into(),
    }
}

/// Piecewise-linear sampling of uniformly spaced `values` at `s ∈ [0, 1]`.
fn sample_uniform(values: &[f64], s: f64) -> f64 {
    if values.len() == 1 {
        return values[0];
    }
    let x = s.clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let j = (x.floor() as usize).min(values.len() - 2);
    let w = x - j as f64;
    values[j] * (1.0 - w) + values[j + 1] * w
}

/// A coefficient given as a number or a tagged form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldSpec {
    Scalar(f64),
    Form(FieldForm),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldForm {
    Constant(f64),
    /// Uniformly spaced values on `[0, h]`, interpolated onto the grid.
    Spatial(Vec<f64>),
    /// Rows of uniformly spaced values per uniformly spaced time, interpolated bilinearly.
    Tabulated(Vec<Vec<f64>>),
    /// `base·(1 + z_slope·z/h + t_slope·t/T)`
    Affine {
        base: f64,
        #[serde(default)]
        z_slope: f64,
        #[serde(default)]
        t_slope: f64,
    },
}

impl FieldSpec {
    pub fn resolve(
        &self,
        field: &'static str,
        grid: &SpatialGrid,
        time: &TimeGrid,
    ) -> Result<SpaceTimeField, ConfigError> {
        let h = grid.length();
        Ok(match self {
            Self::Scalar(c) | Self::Form(FieldForm::Constant(c)) => SpaceTimeField::Constant(*c),
            Self::Form(FieldForm::Spatial(v)) => {
                if v.is_empty() {
                    return Err(invalid(field, "spatial table is empty"));
                }
                SpaceTimeField::spatial_fn(grid, |z| sample_uniform(v, z / h))
            }
            Self::Form(FieldForm::Tabulated(rows)) => {
                if rows.is_empty() || rows[0].is_empty() || rows.iter().any(|r| r.len() != rows[0].len()) {
                    return Err(invalid(field, "tabulated rows must be nonempty and equally long"));
                }
                let arr = SpaceTimeArray::from_fn(grid, time, |z, t| {
                    let col: Vec<f64> = rows.iter().map(|r| sample_uniform(r, z / h)).collect();
                    sample_uniform(&col, t / time.end())
                });
                SpaceTimeField::Tabulated(arr)
            }
            Self::Form(FieldForm::Affine { base, z_slope, t_slope }) => {
                if *t_slope == 0.0 {
                    SpaceTimeField::spatial_fn(grid, |z| base * (1.0 + z_slope * z / h))
                } else {
                    SpaceTimeField::from_fn(grid, time, |z, t| {
                        base * (1.0 + z_slope * z / h + t_slope * t / time.end())
                    })
                }
            }
        })
    }
}

/// Spatial profile of an initial field on `[0, h]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Profile {
    #[default]
    Zero,
    Constant(f64),
    /// `amplitude·sin(mode·πz/h)`
    Sine {
        amplitude: f64,
        mode: u32,
    },
    /// `offset + amplitude·cos(mode·πz/h)`
    Cosine {
        offset: f64,
        amplitude: f64,
        mode: u32,
    },
    /// `offset + amplitude·exp(−((z/h − center)/width)²)`
    Gaussian {
        #[serde(default)]
        offset: f64,
        amplitude: f64,
        center: f64,
        width: f64,
    },
    /// Uniformly spaced values on `[0, h]`.
    Nodal(Vec<f64>),
}

impl Profile {
    pub fn eval(&self, z: f64, h: f64) -> f64 {
        let pi = std::f64::consts::PI;
        match self {
            Self::Zero => 0.0,
            Self::Constant(c) => *c,
            Self::Sine { amplitude, mode } => amplitude * (*mode as f64 * pi * z / h).sin(),
            Self::Cosine {
                offset,
                amplitude,
                mode,
            } => offset + amplitude * (*mode as f64 * pi * z / h).cos(),
            Self::Gaussian {
                offset,
                amplitude,
                center,
                width,
            } => offset + amplitude * (-((z / h - center) / width).powi(2)).exp(),
            Self::Nodal(v) if v.is_empty() => 0.0,
            Self::Nodal(v) => sample_uniform(v, z / h),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ExcitationSpec {
    Zero,
    /// `offset + amplitude·sin(2π·frequency·t)` for `t ≤ cycles/frequency`, `offset` after.
    SineBurst {
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        cycles: Option<f64>,
        #[serde(default)]
        offset: f64,
    },
    /// Uniformly spaced samples on `[0, T]`.
    Tabulated(Vec<f64>),
}

impl ExcitationSpec {
    pub fn resolve(&self, time: &TimeGrid) -> Result<Excitation, ConfigError> {
        Ok(match self {
            Self::Zero => Excitation::zero(time),
            Self::SineBurst {
                amplitude,
                frequency,
                cycles,
                offset,
            } => {
                let stop = cycles.map_or(f64::INFINITY, |c| c / frequency);
                Excitation::from_fn(time, |t| {
                    offset
                        + if t <= stop {
                            amplitude * (2.0 * std::f64::consts::PI * frequency * t).sin()
                        } else {
                            0.0
                        }
                })
            }
            Self::Tabulated(v) => {
                if v.is_empty() {
                    return Err(invalid("excitation", "tabulated excitation is empty"));
                }
                Excitation::from_fn(time, |t| sample_uniform(v, t / time.end()))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub length: f64,
    pub n_elem: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    pub end: f64,
    pub n_step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSpec {
    pub epsilon: f64,
    /// Initial-data smoothing in units of `dz²`; zero disables it.
    pub mollify: f64,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            epsilon: 0.0,
            mollify: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSpec {
    pub p1: f64,
    pub p2: FieldSpec,
    pub p3: FieldSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSpec {
    pub rho: FieldSpec,
    pub c_th: FieldSpec,
    pub k: FieldSpec,
    pub beta: f64,
    pub tau: Relaxation,
    pub gamma_min: f64,
    pub gamma_max: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialSpec {
    pub u0: Profile,
    pub u1: Profile,
    pub theta0: Profile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationKindSpec {
    Bulk,
    Window,
    Boundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationSection {
    pub kind: ObservationKindSpec,
    /// Adds the grounded-half channel to the bulk charge.
    pub split: bool,
    /// Window width; defaults to `0.05·h`.
    pub gamma: Option<f64>,
    /// Noise level relative to `‖y‖`.
    pub delta: f64,
    pub seed: u64,
}

impl Default for ObservationSection {
    fn default() -> Self {
        Self {
            kind: ObservationKindSpec::Bulk,
            split: false,
            gamma: None,
            delta: 0.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionSection {
    /// Initial guess for the unknown parameters as a multiple of the true ones.
    pub guess_factor: f64,
    #[serde(flatten)]
    pub settings: InversionConfig,
}

impl Default for InversionSection {
    fn default() -> Self {
        Self {
            guess_factor: 1.0 / 1.2,
            settings: InversionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub epsilons: Vec<f64>,
    pub refinement_levels: usize,
    pub test_functions: usize,
    pub derivative_triples: usize,
    pub seed: u64,
    /// Upper end of the temperature range for the damping-envelope check;
    /// defaults to `2·max θ0 + 1`.
    pub theta_probe: Option<f64>,
}

impl Default for StudySection {
    fn default() -> Self {
        Self {
            epsilons: vec![1e-1, 1e-2, 1e-3, 1e-4],
            refinement_levels: 3,
            test_functions: 32,
            derivative_triples: 20,
            seed: 1,
            theta_probe: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridSpec,
    pub time: TimeSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    pub materials: MaterialSpec,
    pub coefficients: CoefficientSpec,
    pub excitation: ExcitationSpec,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default)]
    pub observation: ObservationSection,
    #[serde(default)]
    pub inversion: InversionSection,
    #[serde(default)]
    pub studies: StudySection,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl Default for ExperimentConfig {
    /// A 1 cm PZT-like layer over 1 ms, driven by a 1 kHz sine at 100 V.
    fn default() -> Self {
        Self {
            grid: GridSpec {
                length: 1e-2,
                n_elem: 128,
            },
            time: TimeSpec { end: 1e-3, n_step: 512 },
            solver: SolverSpec::default(),
            materials: MaterialSpec {
                p1: 1.1e11,
                p2: FieldSpec::Scalar(15.0),
                p3: FieldSpec::Scalar(7.3e-9),
            },
            coefficients: CoefficientSpec {
                rho: FieldSpec::Scalar(7600.0),
                c_th: FieldSpec::Scalar(350.0),
                k: FieldSpec::Scalar(1.2),
                beta: 4.4e5,
                tau: Relaxation::Constant(1e-7),
                gamma_min: 1e3,
                gamma_max: 1e5,
            },
            excitation: ExcitationSpec::SineBurst {
                amplitude: 100.0,
                frequency: 1e3,
                cycles: None,
                offset: 0.0,
            },
            initial: InitialSpec {
                u0: Profile::Zero,
                u1: Profile::Sine {
                    amplitude: 1e-3,
                    mode: 1,
                },
                theta0: Profile::Constant(293.15),
            },
            observation: ObservationSection::default(),
            inversion: InversionSection::default(),
            studies: StudySection::default(),
            output: default_output(),
        }
    }
}

/// A config resolved onto its grids.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub grid: SpatialGrid,
    pub time: TimeGrid,
    pub solver: SolverConfig,
    pub mollify: f64,
    pub f: MaterialParams,
    pub coeffs: PhysicalCoefficients,
    pub excitation: Excitation,
    pub init: InitialData,
    pub observation: ObservationSpec,
    pub delta: f64,
    pub seed: u64,
    pub theta_probe: f64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Same experiment with both grids refined by `2^level`.
    pub fn refined(&self, level: u32) -> Self {
        let mut c = self.clone();
        c.grid.n_elem <<= level;
        c.time.n_step <<= level;
        c
    }

    pub fn resolve(&self) -> Result<Experiment, ConfigError> {
        let grid = SpatialGrid::new(self.grid.length, self.grid.n_elem)?;
        let time = TimeGrid::new(self.time.end, self.time.n_step)?;
        if !(self.solver.epsilon >= 0.0) {
            return Err(invalid("solver.epsilon", "must be nonnegative"));
        }
        if !(self.solver.mollify >= 0.0) {
            return Err(invalid("solver.mollify", "must be nonnegative"));
        }
        if !(self.observation.delta >= 0.0 && self.observation.delta.is_finite()) {
            return Err(invalid("observation.delta", "must be nonnegative"));
        }
        let solver = SolverConfig::new(self.solver.epsilon, time)?;
        let f = MaterialParams {
            p1: self.materials.p1,
            p2: self.materials.p2.resolve("materials.p2", &grid, &time)?,
            p3: self.materials.p3.resolve("materials.p3", &grid, &time)?,
        };
        let c = &self.coefficients;
        let coeffs = PhysicalCoefficients {
            rho: c.rho.resolve("coefficients.rho", &grid, &time)?,
            c_th: c.c_th.resolve("coefficients.c_th", &grid, &time)?,
            k: c.k.resolve("coefficients.k", &grid, &time)?,
            beta: c.beta,
            tau: c.tau.clone(),
            gamma_min: c.gamma_min,
            gamma_max: c.gamma_max,
        };
        let h = grid.length();
        let ini = &self.initial;
        if matches!(ini.theta0, Profile::Nodal(ref v) if v.iter().any(|t| *t < 0.0)) {
            return Err(invalid("initial.theta0", "must be nonnegative"));
        }
        let init = InitialData::from_fns(
            &grid,
            |z| ini.u0.eval(z, h),
            |z| ini.u1.eval(z, h),
            |z| ini.theta0.eval(z, h),
        )
        .map_err(|e| invalid("initial", e.to_string()))?;
        let observation = match self.observation.kind {
            ObservationKindSpec::Bulk => ObservationSpec::Bulk {
                split: self.observation.split,
            },
            ObservationKindSpec::Window => ObservationSpec::Window {
                gamma: self.observation.gamma.unwrap_or(0.05 * h),
            },
            ObservationKindSpec::Boundary => ObservationSpec::Boundary,
        };
        let theta_max = init.theta0.iter().fold(0.0f64, |m, t| m.max(*t));
        Ok(Experiment {
            grid,
            time,
            solver,
            mollify: self.solver.mollify,
            f,
            coeffs,
            excitation: self.excitation.resolve(&time)?,
            init,
            observation,
            delta: self.observation.delta,
            seed: self.observation.seed,
            theta_probe: self.studies.theta_probe.unwrap_or(2.0 * theta_max + 1.0),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        let e = c.resolve().unwrap();
        assert_eq!(e.grid.n_elem(), 128);
        assert_eq!(e.time.n_step(), 512);
        assert_eq!(e.f.p2, SpaceTimeField::Constant(15.0));
    }

    #[test]
    fn malformed_config_names_line_and_field() {
        let text = "{\n  \"grid\": {\"length\": 1.0, \"n_elem\": 4},\n  \"time\": {\"end\": 1.0, \"n_step\": 4, \"bogus\": 1}\n}";
        match ExperimentConfig::from_json(text) {
            Err(ConfigError::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("bogus"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let text = r#"{"grid": {"length": 1.0, "n_elem": 4}}"#;
        let err = ExperimentConfig::from_json(text).unwrap_err().to_string();
        assert!(err.contains("time"), "{err}");
    }

    #[test]
    fn field_specs_resolve() {
        let grid = SpatialGrid::new(2.0, 4).unwrap();
        let time = TimeGrid::new(1.0, 2).unwrap();
        let f: FieldSpec = serde_json::from_str("3.5").unwrap();
        assert_eq!(f.resolve("x", &grid, &time).unwrap(), SpaceTimeField::Constant(3.5));
        let f: FieldSpec = serde_json::from_str(r#"{"spatial": [1.0, 3.0]}"#).unwrap();
        assert_eq!(
            f.resolve("x", &grid, &time).unwrap(),
            SpaceTimeField::Spatial(vec![1.0, 1.5, 2.0, 2.5, 3.0])
        );
        let f: FieldSpec = serde_json::from_str(r#"{"tabulated": [[1.0, 1.0], [3.0, 3.0]]}"#).unwrap();
        let r = f.resolve("x", &grid, &time).unwrap();
        assert_eq!(r.value(2, 1), 2.0);
        let f: FieldSpec = serde_json::from_str(r#"{"affine": {"base": 2.0, "t_slope": 1.0}}"#).unwrap();
        assert_eq!(f.resolve("x", &grid, &time).unwrap().value(0, 2), 4.0);
        let f: FieldSpec = serde_json::from_str(r#"{"tabulated": [[1.0], [3.0, 3.0]]}"#).unwrap();
        assert!(f.resolve("x", &grid, &time).is_err());
    }

    #[test]
    fn excitation_and_profiles() {
        let time = TimeGrid::new(1.0, 4).unwrap();
        let burst = ExcitationSpec::SineBurst {
            amplitude: 2.0,
            frequency: 1.0,
            cycles: Some(0.5),
            offset: 0.0,
        };
        let e = burst.resolve(&time).unwrap();
        assert!((e.values[1] - 2.0).abs() < 1e-12);
        assert_eq!(e.values[3], 0.0);
        assert_eq!(ExcitationSpec::Zero.resolve(&time).unwrap().values, vec![0.0; 5]);
        assert_eq!(Profile::Nodal(vec![0.0, 2.0]).eval(0.25, 1.0), 0.5);
        let p: Profile = serde_json::from_str(r#""zero""#).unwrap();
        assert_eq!(p, Profile::Zero);
    }

    #[test]
    fn refinement_doubles_both_grids() {
        let c = ExperimentConfig::default().refined(2);
        assert_eq!((c.grid.n_elem, c.time.n_step), (512, 2048));
    }

    #[test]
    fn negative_noise_rejected() {
        let mut c = ExperimentConfig::default();
        c.observation.delta = -1.0;
        assert!(c.resolve().is_err());
    }
}
