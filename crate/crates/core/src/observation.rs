//! Surface-charge observations: the bulk integral, its boundary-window
//! variant, the boundary-trace charge and deterministic noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{element_gradients, SpatialGrid, TimeGrid};
use crate::materials::{ExcitationLift, MaterialParams};
use crate::solver::StateTrajectory;

/// Logged with every window-charge trace.
pub const NORMAL_EXTENSION_NOTE: &str = "1D normal extension taken as n_z = +1 on (h - gamma, h); \
the eikonal normalization admits no constant-gradient solution in 1D with n = 0 at both window ends";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObservationError {
    #[error("excitation has zero L² norm on (0, T)")]
    ZeroExcitation,
    #[error("window width gamma = {gamma} must lie in (0, {h})")]
    BadGamma { gamma: f64, h: f64 },
    #[error("boundary charge needs at least 3 elements, got {0}")]
    TooCoarse(usize),
    #[error("noise level must be nonnegative, got {0}")]
    BadDelta(f64),
    #[error("trace length {got} does not match {expected} time levels")]
    Length { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationKind {
    Bulk,
    Window,
    Boundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationTrace {
    pub kind: ObservationKind,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Optional bulk integral over the grounded half `(0, h/2)`.
    pub second: Option<Vec<f64>>,
    pub gamma: Option<f64>,
    pub delta: f64,
    pub seed: Option<u64>,
    pub note: Option<String>,
}

impl ObservationTrace {
    fn new(kind: ObservationKind, time: &TimeGrid, values: Vec<f64>) -> Self {
        Self {
            kind,
            times: time.times(),
            values,
            second: None,
            gamma: None,
            delta: 0.0,
            seed: None,
            note: None,
        }
    }

    fn weights(&self) -> Vec<f64> {
        let n = self.times.len();
        if n < 2 {
            return vec![0.0; n];
        }
        let dt = self.times[1] - self.times[0];
        let mut w = vec![dt; n];
        w[0] *= 0.5;
        w[n - 1] *= 0.5;
        w
    }

    /// All channels as one vector, first channel first.
    pub fn stacked(&self) -> Vec<f64> {
        let mut out = self.values.clone();
        if let Some(s) = &self.second {
            out.extend_from_slice(s);
        }
        out
    }

    /// Trapezoid weights matching [`Self::stacked`].
    pub fn stacked_weights(&self) -> Vec<f64> {
        let w = self.weights();
        let mut out = w.clone();
        if self.second.is_some() {
            out.extend_from_slice(&w);
        }
        out
    }

    /// `L²(0,T)` norm over all channels.
    pub fn l2_norm(&self) -> f64 {
        weighted_norm(&self.stacked(), &self.stacked_weights())
    }

    pub fn distance(&self, other: &Self) -> f64 {
        let d: Vec<f64> = self.stacked().iter().zip(other.stacked()).map(|(a, b)| a - b).collect();
        weighted_norm(&d, &self.stacked_weights())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(if self.second.is_some() {
            "time,value,value_half\n"
        } else {
            "time,value\n"
        });
        for (n, (t, v)) in self.times.iter().zip(&self.values).enumerate() {
            match &self.second {
                Some(h) => s.push_str(&format!("{t:.17e},{v:.17e},{:.17e}\n", h[n])),
                None => s.push_str(&format!("{t:.17e},{v:.17e}\n")),
            }
        }
        s
    }

    /// JSON sidecar with kind, γ, δ, seed and notes.
    pub fn sidecar(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": self.kind,
            "gamma": self.gamma,
            "delta": self.delta,
            "seed": self.seed,
            "channels": if self.second.is_some() { 2 } else { 1 },
            "note": self.note,
        })
    }
}

pub fn weighted_norm(v: &[f64], w: &[f64]) -> f64 {
    v.iter().zip(w).map(|(x, w)| w * x * x).sum::<f64>().max(0.0).sqrt()
}

/// `∫_a^b (p2 u_z − p3 φ_z) g` with `g = ψ_z` for a nodal `ψ`, or `g = 1` when
/// `psi` is `None`. Exact for P1 data with nodal coefficients.
#[allow(clippy::too_many_arguments)]
pub fn flux_integral(
    grid: &SpatialGrid,
    p2: &[f64],
    p3: &[f64],
    u: &[f64],
    phi: &[f64],
    a: f64,
    b: f64,
    psi: Option<&[f64]>,
) -> f64 {
    let dz = grid.dz();
    let uz = element_gradients(grid, u);
    let pz = element_gradients(grid, phi);
    let wz = psi.map(|p| element_gradients(grid, p));
    let mut total = 0.0;
    for e in 0..grid.n_elem() {
        let (z0, z1) = (grid.node(e), grid.node(e + 1));
        let (s0, s1) = (a.max(z0), b.min(z1));
        if s1 <= s0 {
            continue;
        }
        let mid = ((s0 + s1) / 2.0 - z0) / dz;
        let c2 = p2[e] * (1.0 - mid) + p2[e + 1] * mid;
        let c3 = p3[e] * (1.0 - mid) + p3[e + 1] * mid;
        let flux = c2 * uz[e] - c3 * pz[e];
        total += (s1 - s0) * flux * wz.as_ref().map_or(1.0, |w| w[e]);
    }
    total
}

/// `(p2 u_z − p3 φ_z)(h) − (p2 u_z − p3 φ_z)(0)` with one-sided second-order gradients.
pub fn boundary_flux_jump(grid: &SpatialGrid, p2: &[f64], p3: &[f64], u: &[f64], phi: &[f64]) -> f64 {
    let last = grid.n_nodes() - 1;
    let (uz0, uzh) = one_sided_derivatives(u, grid.dz());
    let (pz0, pzh) = one_sided_derivatives(phi, grid.dz());
    (p2[last] * uzh - p3[last] * pzh) - (p2[0] * uz0 - p3[0] * pz0)
}

/// Which observation operator to apply.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservationSpec {
    Bulk {
        #[serde(default)]
        split: bool,
    },
    Window {
        gamma: f64,
    },
    Boundary,
}

impl Default for ObservationSpec {
    fn default() -> Self {
        Self::Bulk { split: false }
    }
}

impl ObservationTrace {
    /// The operator that produced this trace.
    pub fn spec(&self) -> ObservationSpec {
        match self.kind {
            ObservationKind::Bulk => ObservationSpec::Bulk {
                split: self.second.is_some(),
            },
            ObservationKind::Window => ObservationSpec::Window {
                gamma: self.gamma.unwrap_or(0.0),
            },
            ObservationKind::Boundary => ObservationSpec::Boundary,
        }
    }

    /// A trace of the same kind, γ and channel layout with new values.
    pub fn with_values(&self, values: Vec<f64>, second: Option<Vec<f64>>) -> Self {
        Self {
            values,
            second,
            delta: 0.0,
            seed: None,
            ..self.clone()
        }
    }
}

pub fn observe(
    spec: ObservationSpec,
    traj: &StateTrajectory,
    f: &MaterialParams,
    lift: &ExcitationLift,
) -> Result<ObservationTrace, ObservationError> {
    match spec {
        ObservationSpec::Bulk { split: false } => observe_bulk_charge(traj, f, lift),
        ObservationSpec::Bulk { split: true } => observe_bulk_charge_split(traj, f, lift),
        ObservationSpec::Window { gamma } => observe_window_charge(traj, f, gamma),
        ObservationSpec::Boundary => observe_boundary_charge(traj, f),
    }
}

/// Nodal `φ⁰ + χ` at level `n`.
pub fn total_potential(traj: &StateTrajectory, n: usize) -> Vec<f64> {
    traj.phi0.row(n).iter().zip(traj.chi(n)).map(|(a, b)| a + b).collect()
}

fn bulk_channel(
    traj: &StateTrajectory,
    f: &MaterialParams,
    lift: &ExcitationLift,
    b: f64,
) -> Result<Vec<f64>, ObservationError> {
    if !(lift.norm > 0.0) {
        return Err(ObservationError::ZeroExcitation);
    }
    let grid = &traj.grid;
    let nn = grid.n_nodes();
    Ok((0..traj.time.n_levels())
        .map(|n| {
            let (p2, p3) = (f.p2.level(n, nn), f.p3.level(n, nn));
            let phi = total_potential(traj, n);
            flux_integral(grid, &p2, &p3, traj.u.row(n), &phi, 0.0, b, Some(&phi)) / lift.norm
        })
        .collect())
}

/// `C(t) = ‖φe‖⁻¹ ∫_Ω (p2 u_z − p3 φ_z) φ_z`, one value per level.
pub fn observe_bulk_charge(
    traj: &StateTrajectory,
    f: &MaterialParams,
    lift: &ExcitationLift,
) -> Result<ObservationTrace, ObservationError> {
    let values = bulk_channel(traj, f, lift, traj.grid.length())?;
    Ok(ObservationTrace::new(ObservationKind::Bulk, &traj.time, values))
}

/// Bulk charge with a second channel integrating over the grounded half `(0, h/2)`.
pub fn observe_bulk_charge_split(
    traj: &StateTrajectory,
    f: &MaterialParams,
    lift: &ExcitationLift,
) -> Result<ObservationTrace, ObservationError> {
    let mut trace = observe_bulk_charge(traj, f, lift)?;
    trace.second = Some(bulk_channel(traj, f, lift, 0.5 * traj.grid.length())?);
    Ok(trace)
}

/// Extended outward normal on the window `U_γ(h) = (h − γ, h)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalExtension {
    pub gamma: f64,
    /// `n_z` at every grid node inside the closed window.
    pub n_z: Vec<f64>,
    pub first_node: usize,
    pub note: &'static str,
}

impl NormalExtension {
    pub fn measure(&self) -> f64 {
        self.gamma
    }
}

pub fn build_normal_extension(grid: &SpatialGrid, gamma: f64) -> Result<NormalExtension, ObservationError> {
    let h = grid.length();
    if !(gamma > 0.0 && gamma < h) {
        return Err(ObservationError::BadGamma { gamma, h });
    }
    let first_node = grid
        .nodes()
        .iter()
        .position(|z| *z >= h - gamma)
        .unwrap_or(grid.n_nodes() - 1);
    Ok(NormalExtension {
        gamma,
        n_z: vec![1.0; grid.n_nodes() - first_node],
        first_node,
        note: NORMAL_EXTENSION_NOTE,
    })
}

/// `C^γ(t) = γ⁻¹ ∫_{h−γ}^h (p2 u_z − p3 φ_z) n_z`.
pub fn observe_window_charge(
    traj: &StateTrajectory,
    f: &MaterialParams,
    gamma: f64,
) -> Result<ObservationTrace, ObservationError> {
    let grid = &traj.grid;
    let ext = build_normal_extension(grid, gamma)?;
    let h = grid.length();
    let nn = grid.n_nodes();
    let values = (0..traj.time.n_levels())
        .map(|n| {
            let (p2, p3) = (f.p2.level(n, nn), f.p3.level(n, nn));
            flux_integral(
                grid,
                &p2,
                &p3,
                traj.u.row(n),
                &total_potential(traj, n),
                h - gamma,
                h,
                None,
            ) / ext.measure()
        })
        .collect();
    let mut trace = ObservationTrace::new(ObservationKind::Window, &traj.time, values);
    trace.gamma = Some(gamma);
    trace.note = Some(ext.note.to_string());
    Ok(trace)
}

fn one_sided_derivatives(f: &[f64], dz: f64) -> (f64, f64) {
    let n = f.len() - 1;
    (
        (-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * dz),
        (3.0 * f[n] - 4.0 * f[n - 1] + f[n - 2]) / (2.0 * dz),
    )
}

/// `D(h) − D(0)` with second-order one-sided gradients at both ends.
pub fn observe_boundary_charge(
    traj: &StateTrajectory,
    f: &MaterialParams,
) -> Result<ObservationTrace, ObservationError> {
    let grid = &traj.grid;
    if grid.n_elem() < 3 {
        return Err(ObservationError::TooCoarse(grid.n_elem()));
    }
    let nn = grid.n_nodes();
    let values = (0..traj.time.n_levels())
        .map(|n| {
            let (p2, p3) = (f.p2.level(n, nn), f.p3.level(n, nn));
            boundary_flux_jump(grid, &p2, &p3, traj.u.row(n), &total_potential(traj, n))
        })
        .collect();
    Ok(ObservationTrace::new(ObservationKind::Boundary, &traj.time, values))
}

/// Adds seeded noise rescaled so that `‖noisy − clean‖_{L²(0,T)} = δ` over all channels.
pub fn add_noise(trace: &ObservationTrace, delta: f64, seed: u64) -> Result<ObservationTrace, ObservationError> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(ObservationError::BadDelta(delta));
    }
    let mut out = trace.clone();
    out.delta = delta;
    out.seed = Some(seed);
    if delta == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = trace.stacked_weights();
    let mut e: Vec<f64> = (0..w.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = weighted_norm(&e, &w);
    e.iter_mut().for_each(|x| *x *= delta / norm);
    let n = trace.values.len();
    for (v, x) in out.values.iter_mut().zip(&e[..n]) {
        *v += x;
    }
    if let Some(s) = out.second.as_mut() {
        for (v, x) in s.iter_mut().zip(&e[n..]) {
            *v += x;
        }
    }
    Ok(out)
}
