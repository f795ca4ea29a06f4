//! Material parameters, physical coefficients, the excitation signal and its
//! Dirichlet lift.
//!
//! Space-time coefficients live on the `(time level, node)` lattice and are
//! interpolated linearly in space. The sought parameter triple is
//! `f = (p1, p2, p3)`: elasticity, piezoelectric coupling and permittivity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{SpaceTimeArray, SpatialGrid, TimeGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaterialError {
    #[error("{name} must be positive, found {value} at node {node}, level {level}")]
    NonPositive {
        name: &'static str,
        node: usize,
        level: usize,
        value: f64,
    },
    #[error("{name} is not finite at node {node}, level {level}")]
    NonFinite {
        name: &'static str,
        node: usize,
        level: usize,
    },
    #[error("temperature argument must be nonnegative, got {0}")]
    NegativeTemperature(f64),
    #[error("damping Γ = {gamma} at θ = {theta} leaves the envelope [{lo}, {hi}]")]
    Envelope { theta: f64, gamma: f64, lo: f64, hi: f64 },
    #[error("excitation has zero L² norm on (0, T)")]
    ZeroExcitation,
    #[error("{name}: lattice shape mismatch (expected {expected_nodes} nodes x {expected_levels} levels, got {nodes} x {levels})")]
    Shape {
        name: &'static str,
        expected_nodes: usize,
        expected_levels: usize,
        nodes: usize,
        levels: usize,
    },
    #[error("invalid relaxation table: {0}")]
    BadTau(String),
}

/// A coefficient sampled on the space-time lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceTimeField {
    Constant(f64),
    /// Time-independent nodal profile.
    Spatial(Vec<f64>),
    /// One nodal profile per time level.
    Tabulated(SpaceTimeArray),
}

impl SpaceTimeField {
    pub fn from_fn(grid: &SpatialGrid, time: &TimeGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        Self::Tabulated(SpaceTimeArray::from_fn(grid, time, f))
    }

    pub fn spatial_fn(grid: &SpatialGrid, f: impl Fn(f64) -> f64) -> Self {
        Self::Spatial(grid.nodes().into_iter().map(f).collect())
    }

    pub fn value(&self, node: usize, level: usize) -> f64 {
        match self {
            Self::Constant(c) => *c,
            Self::Spatial(v) => v[node],
            Self::Tabulated(a) => a.get(level, node),
        }
    }

    /// Nodal profile at a time level.
    pub fn level(&self, level: usize, n_nodes: usize) -> Vec<f64> {
        match self {
            Self::Constant(c) => vec![*c; n_nodes],
            Self::Spatial(v) => v.clone(),
            Self::Tabulated(a) => a.row(level).to_vec(),
        }
    }

    /// Time derivative at a level: centered differences inside, one-sided at the ends.
    pub fn time_derivative(&self, level: usize, time: &TimeGrid, n_nodes: usize) -> Vec<f64> {
        match self {
            Self::Tabulated(a) if a.n_levels() > 1 => {
                let last = a.n_levels() - 1;
                let (lo, hi) = if level == 0 {
                    (0, 1)
                } else if level == last {
                    (last - 1, last)
                } else {
                    (level - 1, level + 1)
                };
                let span = (hi - lo) as f64 * time.dt();
                a.row(hi).iter().zip(a.row(lo)).map(|(h, l)| (h - l) / span).collect()
            }
            _ => vec![0.0; n_nodes],
        }
    }

    /// Backward difference `(level - (level-1)) / dt`, zero for `level == 0`.
    pub fn backward_difference(&self, level: usize, time: &TimeGrid, n_nodes: usize) -> Vec<f64> {
        match self {
            Self::Tabulated(a) if level > 0 => a
                .row(level)
                .iter()
                .zip(a.row(level - 1))
                .map(|(h, l)| (h - l) / time.dt())
                .collect(),
            _ => vec![0.0; n_nodes],
        }
    }

    pub fn is_space_constant(&self) -> bool {
        match self {
            Self::Constant(_) => true,
            Self::Spatial(v) => v.windows(2).all(|p| p[0] == p[1]),
            Self::Tabulated(a) => (0..a.n_levels()).all(|n| a.row(n).windows(2).all(|p| p[0] == p[1])),
        }
    }

    pub fn check_shape(&self, name: &'static str, grid: &SpatialGrid, time: &TimeGrid) -> Result<(), MaterialError> {
        let (nodes, levels) = match self {
            Self::Constant(_) => return Ok(()),
            Self::Spatial(v) => (v.len(), time.n_levels()),
            Self::Tabulated(a) => (a.n_nodes(), a.n_levels()),
        };
        if nodes != grid.n_nodes() || levels != time.n_levels() {
            return Err(MaterialError::Shape {
                name,
                expected_nodes: grid.n_nodes(),
                expected_levels: time.n_levels(),
                nodes,
                levels,
            });
        }
        Ok(())
    }

    /// Every stored sample with its `(node, level)` position.
    fn samples(&self) -> Vec<(usize, usize, f64)> {
        match self {
            Self::Constant(c) => vec![(0, 0, *c)],
            Self::Spatial(v) => v.iter().enumerate().map(|(i, x)| (i, 0, *x)).collect(),
            Self::Tabulated(a) => (0..a.n_levels())
                .flat_map(|n| a.row(n).iter().enumerate().map(move |(i, x)| (i, n, *x)))
                .collect(),
        }
    }

    pub fn check_positive(&self, name: &'static str) -> Result<(), MaterialError> {
        for (node, level, value) in self.samples() {
            if !value.is_finite() {
                return Err(MaterialError::NonFinite { name, node, level });
            }
            if value <= 0.0 {
                return Err(MaterialError::NonPositive {
                    name,
                    node,
                    level,
                    value,
                });
            }
        }
        Ok(())
    }

    /// `(min, max, node of min, level of min)` over all samples.
    pub fn range(&self) -> (f64, f64, usize, usize) {
        let mut out = (f64::INFINITY, f64::NEG_INFINITY, 0, 0);
        for (i, n, v) in self.samples() {
            if v < out.0 {
                out.0 = v;
                out.2 = i;
                out.3 = n;
            }
            out.1 = out.1.max(v);
        }
        out
    }

    pub fn scaled(&self, s: f64) -> Self {
        match self {
            Self::Constant(c) => Self::Constant(s * c),
            Self::Spatial(v) => Self::Spatial(v.iter().map(|x| s * x).collect()),
            Self::Tabulated(a) => Self::Tabulated(a.scaled(s)),
        }
    }

    /// `self + s * other`, promoting to the richer representation when needed.
    pub fn axpy(&self, s: f64, other: &Self, n_nodes: usize, n_levels: usize) -> Self {
        match (self, other) {
            (Self::Constant(a), Self::Constant(b)) => Self::Constant(a + s * b),
            (Self::Tabulated(_), _) | (_, Self::Tabulated(_)) => {
                let mut out = SpaceTimeArray::zeros(n_nodes, n_levels);
                for n in 0..n_levels {
                    let (x, y) = (self.level(n, n_nodes), other.level(n, n_nodes));
                    for (o, (a, b)) in out.row_mut(n).iter_mut().zip(x.iter().zip(&y)) {
                        *o = a + s * b;
                    }
                }
                Self::Tabulated(out)
            }
            _ => {
                let (x, y) = (self.level(0, n_nodes), other.level(0, n_nodes));
                Self::Spatial(x.iter().zip(&y).map(|(a, b)| a + s * b).collect())
            }
        }
    }
}

/// The parameter triple `f = (p1, p2, p3)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    /// Elasticity (Pa).
    pub p1: f64,
    /// Piezoelectric coupling (C/m²).
    pub p2: SpaceTimeField,
    /// Permittivity (F/m).
    pub p3: SpaceTimeField,
}

impl MaterialParams {
    pub fn new(p1: f64, p2: SpaceTimeField, p3: SpaceTimeField) -> Result<Self, MaterialError> {
        if !(p1.is_finite() && p1 > 0.0) {
            return Err(MaterialError::NonPositive {
                name: "p1",
                node: 0,
                level: 0,
                value: p1,
            });
        }
        p2.check_positive("p2")?;
        p3.check_positive("p3")?;
        Ok(Self { p1, p2, p3 })
    }

    pub fn constant(p1: f64, p2: f64, p3: f64) -> Result<Self, MaterialError> {
        Self::new(p1, SpaceTimeField::Constant(p2), SpaceTimeField::Constant(p3))
    }

    /// Nodal `p = p1 + p2²/p3` at a time level.
    pub fn effective_stiffness_level(&self, level: usize, n_nodes: usize) -> Vec<f64> {
        let p2 = self.p2.level(level, n_nodes);
        let p3 = self.p3.level(level, n_nodes);
        p2.iter().zip(&p3).map(|(a, b)| self.p1 + a * a / b).collect()
    }

    pub fn check_shape(&self, grid: &SpatialGrid, time: &TimeGrid) -> Result<(), MaterialError> {
        self.p2.check_shape("p2", grid, time)?;
        self.p3.check_shape("p3", grid, time)
    }
}

/// Effective stiffness `p = p1 + p2²/p3` from eliminating the electric potential.
pub fn effective_stiffness(p1: f64, p2: f64, p3: f64) -> Result<f64, MaterialError> {
    if !(p3 > 0.0) {
        return Err(MaterialError::NonPositive {
            name: "p3",
            node: 0,
            level: 0,
            value: p3,
        });
    }
    Ok(p1 + p2 * p2 / p3)
}

/// Kelvin-Voigt relaxation time as a function of temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relaxation {
    Constant(f64),
    /// Piecewise-linear table in θ, held constant beyond its ends.
    Tabulated {
        theta: Vec<f64>,
        tau: Vec<f64>,
    },
    /// `τ0 / (1 + θ)`
    Reciprocal {
        tau0: f64,
    },
}

impl Relaxation {
    pub fn check(&self) -> Result<(), MaterialError> {
        match self {
            Self::Constant(t) | Self::Reciprocal { tau0: t } if !(*t > 0.0 && t.is_finite()) => {
                Err(MaterialError::BadTau(format!("τ must be positive, got {t}")))
            }
            Self::Tabulated { theta, tau } => {
                if theta.is_empty() || theta.len() != tau.len() {
                    return Err(MaterialError::BadTau(
                        "θ and τ columns must be nonempty and equally long".into(),
                    ));
                }
                if theta.windows(2).any(|p| p[1] <= p[0]) {
                    return Err(MaterialError::BadTau("θ column must be strictly increasing".into()));
                }
                if tau.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
                    return Err(MaterialError::BadTau("τ values must be positive".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            Self::Constant(_) => true,
            Self::Tabulated { tau, .. } => tau.windows(2).all(|p| p[0] == p[1]),
            Self::Reciprocal { .. } => false,
        }
    }

    fn bracket(theta: &[f64], x: f64) -> Option<usize> {
        if x <= theta[0] || x >= theta[theta.len() - 1] {
            return None;
        }
        Some(theta.partition_point(|t| *t <= x) - 1)
    }

    pub fn eval(&self, th: f64) -> f64 {
        match self {
            Self::Constant(t) => *t,
            Self::Reciprocal { tau0 } => tau0 / (1.0 + th),
            Self::Tabulated { theta, tau } => match Self::bracket(theta, th) {
                Some(j) => {
                    let s = (th - theta[j]) / (theta[j + 1] - theta[j]);
                    tau[j] * (1.0 - s) + tau[j + 1] * s
                }
                None if th <= theta[0] => tau[0],
                None => tau[tau.len() - 1],
            },
        }
    }

    pub fn derivative(&self, th: f64) -> f64 {
        match self {
            Self::Constant(_) => 0.0,
            Self::Reciprocal { tau0 } => -tau0 / ((1.0 + th) * (1.0 + th)),
            Self::Tabulated { theta, tau } => match Self::bracket(theta, th) {
                Some(j) => (tau[j + 1] - tau[j]) / (theta[j + 1] - theta[j]),
                None => 0.0,
            },
        }
    }
}

/// Fixed physical coefficients of the thermo-mechanical model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicalCoefficients {
    /// Mass density ρ (kg/m³).
    pub rho: SpaceTimeField,
    /// Heat capacity c_th (J/(kg·K)).
    pub c_th: SpaceTimeField,
    /// Thermal conductivity k (W/(m·K)).
    pub k: SpaceTimeField,
    /// Stress coefficient β (Pa/K).
    pub beta: f64,
    pub tau: Relaxation,
    /// Lower envelope c_Γ for Γ = τ(θ)·p1.
    pub gamma_min: f64,
    /// Upper envelope C_Γ for Γ = τ(θ)·p1.
    pub gamma_max: f64,
}

impl PhysicalCoefficients {
    pub fn check(&self, grid: &SpatialGrid, time: &TimeGrid) -> Result<(), MaterialError> {
        for (name, field) in [("rho", &self.rho), ("c_th", &self.c_th), ("k", &self.k)] {
            field.check_shape(name, grid, time)?;
            field.check_positive(name)?;
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(MaterialError::NonPositive {
                name: "beta",
                node: 0,
                level: 0,
                value: self.beta,
            });
        }
        if !(self.gamma_min > 0.0 && self.gamma_min <= self.gamma_max) {
            return Err(MaterialError::BadTau(format!(
                "envelope must satisfy 0 < c_Γ <= C_Γ, got ({}, {})",
                self.gamma_min, self.gamma_max
            )));
        }
        self.tau.check()
    }

    /// Nodal `b = c_th·ρ` at a time level.
    pub fn heat_capacity_level(&self, level: usize, n_nodes: usize) -> Vec<f64> {
        let c = self.c_th.level(level, n_nodes);
        let r = self.rho.level(level, n_nodes);
        c.iter().zip(&r).map(|(a, b)| a * b).collect()
    }

    /// `∂_t b` at a level, from the product rule on the stored fields.
    pub fn heat_capacity_rate(&self, level: usize, time: &TimeGrid, n_nodes: usize) -> Vec<f64> {
        let c = self.c_th.level(level, n_nodes);
        let r = self.rho.level(level, n_nodes);
        let ct = self.c_th.time_derivative(level, time, n_nodes);
        let rt = self.rho.time_derivative(level, time, n_nodes);
        (0..n_nodes).map(|i| ct[i] * r[i] + c[i] * rt[i]).collect()
    }

    /// Γ(θ) used inside the time stepper: Γ is only defined for θ ≥ 0, so
    /// round-off undershoots evaluate τ at 0. Θ itself is never modified.
    pub fn gamma_at(&self, p1: f64, theta: f64) -> f64 {
        self.tau.eval(theta.max(0.0)) * p1
    }

    pub fn gamma_derivative_at(&self, p1: f64, theta: f64) -> f64 {
        if theta < 0.0 {
            0.0
        } else {
            self.tau.derivative(theta) * p1
        }
    }
}

/// Checked damping coefficient Γ = τ(θ)·p1.
pub fn damping_coefficient(
    coeffs: &PhysicalCoefficients,
    f: &MaterialParams,
    theta: f64,
) -> Result<f64, MaterialError> {
    if theta < 0.0 || theta.is_nan() {
        return Err(MaterialError::NegativeTemperature(theta));
    }
    let gamma = coeffs.tau.eval(theta) * f.p1;
    if gamma < coeffs.gamma_min || gamma > coeffs.gamma_max {
        return Err(MaterialError::Envelope {
            theta,
            gamma,
            lo: coeffs.gamma_min,
            hi: coeffs.gamma_max,
        });
    }
    Ok(gamma)
}

/// Pointwise `b = c_th·ρ` on the whole lattice.
pub fn heat_capacity_product(coeffs: &PhysicalCoefficients, grid: &SpatialGrid, time: &TimeGrid) -> SpaceTimeArray {
    let n_nodes = grid.n_nodes();
    let mut out = SpaceTimeArray::zeros(n_nodes, time.n_levels());
    for n in 0..time.n_levels() {
        out.row_mut(n).copy_from_slice(&coeffs.heat_capacity_level(n, n_nodes));
    }
    out
}

/// Electrode voltage φe sampled at every time level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excitation {
    pub values: Vec<f64>,
}

impl Excitation {
    pub fn zero(time: &TimeGrid) -> Self {
        Self {
            values: vec![0.0; time.n_levels()],
        }
    }

    pub fn from_fn(time: &TimeGrid, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: time.times().into_iter().map(f).collect(),
        }
    }

    /// `‖φe‖_{L²(0,T)}` by the trapezoid rule.
    pub fn l2_norm(&self, time: &TimeGrid) -> f64 {
        time.trapezoid_weights()
            .iter()
            .zip(&self.values)
            .map(|(w, v)| w * v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Nodal lift `χ(z, t_n) = (z/h)·φe(t_n)`.
    pub fn lift_level(&self, grid: &SpatialGrid, level: usize) -> Vec<f64> {
        let phi = self.values[level];
        let h = grid.length();
        grid.nodes().iter().map(|z| z / h * phi).collect()
    }

    pub fn lift_gradient(&self, grid: &SpatialGrid, level: usize) -> f64 {
        self.values[level] / grid.length()
    }
}

/// Linear-in-z Dirichlet lift of a nonzero excitation, with its L² norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationLift {
    pub excitation: Excitation,
    pub length: f64,
    pub norm: f64,
}

impl ExcitationLift {
    pub fn phi_e(&self, level: usize) -> f64 {
        self.excitation.values[level]
    }

    pub fn chi(&self, z: f64, level: usize) -> f64 {
        z / self.length * self.phi_e(level)
    }

    /// `χ_z`, constant in z.
    pub fn chi_z(&self, level: usize) -> f64 {
        self.phi_e(level) / self.length
    }
}

pub fn build_lift(
    excitation: &Excitation,
    grid: &SpatialGrid,
    time: &TimeGrid,
) -> Result<ExcitationLift, MaterialError> {
    if excitation.values.len() != time.n_levels() {
        return Err(MaterialError::Shape {
            name: "phi_e",
            expected_nodes: 1,
            expected_levels: time.n_levels(),
            nodes: 1,
            levels: excitation.values.len(),
        });
    }
    let norm = excitation.l2_norm(time);
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(MaterialError::ZeroExcitation);
    }
    Ok(ExcitationLift {
        excitation: excitation.clone(),
        length: grid.length(),
        norm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientRange {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub name: String,
    pub node: Option<usize>,
    pub level: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub ranges: Vec<CoefficientRange>,
    pub violations: Vec<Violation>,
    pub passed: bool,
}

impl ValidationReport {
    pub fn table(&self) -> String {
        let mut s = format!("{:<10} {:>14} {:>14}\n", "coeff", "min", "max");
        for r in &self.ranges {
            s.push_str(&format!("{:<10} {:>14.6e} {:>14.6e}\n", r.name, r.min, r.max));
        }
        for v in &self.violations {
            s.push_str(&format!("FAIL {}: {}\n", v.name, v.message));
        }
        s
    }
}

/// Checks positivity of every coefficient and the damping envelope
/// `c_Γ <= τ(ξ)·p1 <= C_Γ` on `ξ ∈ [0, theta_probe]`.
pub fn validate(
    coeffs: &PhysicalCoefficients,
    f: &MaterialParams,
    grid: &SpatialGrid,
    time: &TimeGrid,
    theta_probe: f64,
) -> ValidationReport {
    let mut ranges = Vec::new();
    let mut violations = Vec::new();
    let n_nodes = grid.n_nodes();

    let mut field = |name: &str, fld: &SpaceTimeField| {
        let key: &'static str = match name {
            "p2" => "p2",
            "p3" => "p3",
            "rho" => "rho",
            "c_th" => "c_th",
            _ => "k",
        };
        if let Err(e) = fld.check_shape(key, grid, time) {
            violations.push(Violation {
                name: name.into(),
                node: None,
                level: None,
                message: e.to_string(),
            });
            return;
        }
        let (min, max, node, level) = fld.range();
        ranges.push(CoefficientRange {
            name: name.into(),
            min,
            max,
        });
        if !(min > 0.0) || !max.is_finite() {
            violations.push(Violation {
                name: name.into(),
                node: Some(node),
                level: Some(level),
                message: format!("{name} must be positive and finite; min {min} at node {node}, level {level}"),
            });
        }
    };
    field("p2", &f.p2);
    field("p3", &f.p3);
    field("rho", &coeffs.rho);
    field("c_th", &coeffs.c_th);
    field("k", &coeffs.k);

    ranges.push(CoefficientRange {
        name: "p1".into(),
        min: f.p1,
        max: f.p1,
    });
    if !(f.p1 > 0.0 && f.p1.is_finite()) {
        violations.push(Violation {
            name: "p1".into(),
            node: None,
            level: None,
            message: format!("p1 must be positive, got {}", f.p1),
        });
    }
    ranges.push(CoefficientRange {
        name: "beta".into(),
        min: coeffs.beta,
        max: coeffs.beta,
    });
    if !(coeffs.beta >= 0.0 && coeffs.beta.is_finite()) {
        violations.push(Violation {
            name: "beta".into(),
            node: None,
            level: None,
            message: format!("beta must be nonnegative, got {}", coeffs.beta),
        });
    }

    if violations.iter().all(|v| v.name != "p2" && v.name != "p3") {
        let mut pmin = f64::INFINITY;
        let mut pmax = f64::NEG_INFINITY;
        for n in 0..time.n_levels() {
            for p in f.effective_stiffness_level(n, n_nodes) {
                pmin = pmin.min(p);
                pmax = pmax.max(p);
            }
        }
        ranges.push(CoefficientRange {
            name: "p".into(),
            min: pmin,
            max: pmax,
        });
    }

    if let Err(e) = coeffs.tau.check() {
        violations.push(Violation {
            name: "tau".into(),
            node: None,
            level: None,
            message: e.to_string(),
        });
    } else {
        let samples = 512;
        let mut gmin = f64::INFINITY;
        let mut gmax = f64::NEG_INFINITY;
        let mut worst = None;
        for j in 0..=samples {
            let th = theta_probe * j as f64 / samples as f64;
            let g = coeffs.tau.eval(th) * f.p1;
            gmin = gmin.min(g);
            gmax = gmax.max(g);
            if worst.is_none() && (g < coeffs.gamma_min || g > coeffs.gamma_max) {
                worst = Some((th, g));
            }
        }
        if let Relaxation::Tabulated { theta, .. } = &coeffs.tau {
            for &th in theta.iter().filter(|t| **t >= 0.0 && **t <= theta_probe) {
                let g = coeffs.tau.eval(th) * f.p1;
                gmin = gmin.min(g);
                gmax = gmax.max(g);
                if worst.is_none() && (g < coeffs.gamma_min || g > coeffs.gamma_max) {
                    worst = Some((th, g));
                }
            }
        }
        ranges.push(CoefficientRange {
            name: "gamma".into(),
            min: gmin,
            max: gmax,
        });
        if let Some((th, g)) = worst {
            violations.push(Violation {
                name: "gamma".into(),
                node: None,
                level: None,
                message: format!(
                    "damping envelope violated: Γ({th}) = {g} outside [{}, {}]",
                    coeffs.gamma_min, coeffs.gamma_max
                ),
            });
        }
    }

    let passed = violations.is_empty();
    ValidationReport {
        ranges,
        violations,
        passed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn coeffs(tau: Relaxation, lo: f64, hi: f64) -> PhysicalCoefficients {
        PhysicalCoefficients {
            rho: SpaceTimeField::Constant(1.0),
            c_th: SpaceTimeField::Constant(1.0),
            k: SpaceTimeField::Constant(1.0),
            beta: 1.0,
            tau,
            gamma_min: lo,
            gamma_max: hi,
        }
    }

    fn lattice() -> (SpatialGrid, TimeGrid) {
        (SpatialGrid::new(1.0, 8).unwrap(), TimeGrid::new(1.0, 4).unwrap())
    }

    #[test]
    fn effective_stiffness_examples() {
        assert_eq!(effective_stiffness(1.0, 0.0, 1.0).unwrap(), 1.0);
        assert_eq!(effective_stiffness(2.0, 2.0, 4.0).unwrap(), 3.0);
        assert!(effective_stiffness(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn damping_examples() {
        let f = MaterialParams::constant(2.0, 1.0, 1.0).unwrap();
        let c = coeffs(Relaxation::Constant(0.5), 0.5, 2.0);
        for th in [0.0, 1.0, 300.0] {
            assert_eq!(damping_coefficient(&c, &f, th).unwrap(), 1.0);
        }
        assert!(matches!(
            damping_coefficient(&c, &f, -1.0),
            Err(MaterialError::NegativeTemperature(_))
        ));

        // τ0 p1 / (1 + θ) = c_Γ at θ* = τ0 p1 / c_Γ − 1 = 3.
        let c = coeffs(Relaxation::Reciprocal { tau0: 1.0 }, 0.5, 2.0);
        assert!(damping_coefficient(&c, &f, 2.9).is_ok());
        assert!(matches!(
            damping_coefficient(&c, &f, 3.1),
            Err(MaterialError::Envelope { .. })
        ));
    }

    #[test]
    fn heat_capacity_examples() {
        let (grid, time) = lattice();
        let c = coeffs(Relaxation::Constant(1.0), 0.1, 10.0);
        let b = heat_capacity_product(&c, &grid, &time);
        assert!(b.as_slice().iter().all(|x| *x == 1.0));

        let c = PhysicalCoefficients {
            c_th: SpaceTimeField::from_fn(&grid, &time, |_, t| 2.0 + t),
            rho: SpaceTimeField::Constant(3.0),
            ..c
        };
        let b = heat_capacity_product(&c, &grid, &time);
        for n in 0..time.n_levels() {
            let t = time.time(n);
            assert!(b.row(n).iter().all(|x| (x - (6.0 + 3.0 * t)).abs() < 1e-14));
        }
    }

    #[test]
    fn lift_examples() {
        let (grid, time) = lattice();
        let lift = build_lift(&Excitation::from_fn(&time, |_| 1.0), &grid, &time).unwrap();
        for z in grid.nodes() {
            assert_eq!(lift.chi(z, 2), z);
        }
        let time = TimeGrid::new(1.0, 16).unwrap();
        let ex = Excitation::from_fn(&time, |t| (2.0 * std::f64::consts::PI * t).sin());
        let lift = build_lift(&ex, &grid, &time).unwrap();
        for n in 0..time.n_levels() {
            assert_eq!(lift.chi(0.5, n), ex.values[n] / 2.0);
            assert_eq!(lift.chi(0.0, n), 0.0);
            assert_eq!(lift.chi(1.0, n), ex.values[n]);
            let chi = ex.lift_level(&grid, n);
            let slopes = crate::grid::element_gradients(&grid, &chi);
            assert!(slopes.iter().all(|s| (s - lift.chi_z(n)).abs() < 1e-13));
        }
        assert!(matches!(
            build_lift(&Excitation::zero(&time), &grid, &time),
            Err(MaterialError::ZeroExcitation)
        ));
    }

    #[test]
    fn validate_examples() {
        let (grid, time) = lattice();
        let f = MaterialParams::constant(1.0, 1.0, 1.0).unwrap();
        let c = coeffs(Relaxation::Constant(1.0), 0.5, 2.0);
        let report = validate(&c, &f, &grid, &time, 10.0);
        assert!(report.passed, "{}", report.table());
        assert!(report.ranges.iter().any(|r| r.name == "p" && r.min == 2.0));

        let mut p3 = vec![1.0; 9];
        p3[5] = -1.0;
        let bad = MaterialParams {
            p3: SpaceTimeField::Spatial(p3),
            ..f.clone()
        };
        let report = validate(&c, &bad, &grid, &time, 10.0);
        assert!(!report.passed);
        let v = &report.violations[0];
        assert_eq!((v.name.as_str(), v.node), ("p3", Some(5)));
        assert!(MaterialParams::new(1.0, bad.p2.clone(), bad.p3.clone()).is_err());

        let c = coeffs(Relaxation::Reciprocal { tau0: 1.0 }, 0.5, 2.0);
        let report = validate(&c, &f, &grid, &time, 10.0);
        assert!(!report.passed);
        assert_eq!(report.violations[0].name, "gamma");
        assert!(report.violations[0].message.contains("envelope"));
    }

    #[test]
    fn tabulated_relaxation() {
        let tau = Relaxation::Tabulated {
            theta: vec![0.0, 1.0, 3.0],
            tau: vec![1.0, 2.0, 2.0],
        };
        tau.check().unwrap();
        assert_eq!(tau.eval(0.5), 1.5);
        assert_eq!(tau.eval(10.0), 2.0);
        assert_eq!(tau.eval(-1.0), 1.0);
        assert_eq!(tau.derivative(0.5), 1.0);
        assert_eq!(tau.derivative(2.0), 0.0);
        assert!(!tau.is_constant());
        let bad = Relaxation::Tabulated {
            theta: vec![1.0, 0.0],
            tau: vec![1.0, 1.0],
        };
        assert!(bad.check().is_err());
    }

    #[test]
    fn time_derivative_of_tabulated_field() {
        let (grid, time) = lattice();
        let f = SpaceTimeField::from_fn(&grid, &time, |z, t| z + 3.0 * t);
        for n in 0..time.n_levels() {
            assert!(f.time_derivative(n, &time, 9).iter().all(|d| (d - 3.0).abs() < 1e-12));
        }
        assert_eq!(f.backward_difference(0, &time, 9), vec![0.0; 9]);
        assert!(SpaceTimeField::Constant(2.0)
            .time_derivative(1, &time, 9)
            .iter()
            .all(|d| *d == 0.0));
    }

    proptest! {
        #[test]
        fn stiffness_monotone(p1 in 0.1f64..10.0, p2 in 0.0f64..10.0, p3 in 0.1f64..10.0, d in 0.01f64..1.0) {
            let base = effective_stiffness(p1, p2, p3).unwrap();
            prop_assert!(base >= p1);
            prop_assert!(effective_stiffness(p1, p2 + d, p3).unwrap() > base || p2 + d == 0.0);
            prop_assert!(effective_stiffness(p1, p2, p3 + d).unwrap() <= base);
        }

        #[test]
        fn stiffness_scaling(p1 in 0.1f64..10.0, p2 in 0.1f64..10.0, p3 in 0.1f64..10.0, l in 0.1f64..10.0) {
            let a = effective_stiffness(p1, l * p2, l * l * p3).unwrap();
            let b = effective_stiffness(p1, p2, p3).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * b);
        }

        #[test]
        fn heat_capacity_is_pointwise_product(seed in proptest::collection::vec(0.1f64..5.0, 18)) {
            let (grid, time) = lattice();
            let c = PhysicalCoefficients {
                c_th: SpaceTimeField::Spatial(seed[..9].to_vec()),
                rho: SpaceTimeField::Spatial(seed[9..].to_vec()),
                ..coeffs(Relaxation::Constant(1.0), 0.1, 10.0)
            };
            let b = heat_capacity_product(&c, &grid, &time);
            for n in 0..time.n_levels() {
                for i in 0..9 {
                    prop_assert_eq!(b.get(n, i), seed[i] * seed[9 + i]);
                }
            }
        }
    }
}
