//! The model operator `A`, the forward operator `F = (A, C)`, their
//! derivatives in state and parameters, and an all-at-once reconstruction.
//!
//! Every operator is evaluated on a finite test basis: each image entry is
//! the pairing of one row of the system with one basis member. State
//! quantities on `(t_n, t_{n+1})` are taken at level `n+1`, with time
//! derivatives as backward differences, as in [`crate::diagnostics`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{
    interval_kinematics, pair_row, spatial_samples, DiagnosticsError, IntervalDensities, RowIntegrand, SeparableTest,
    SpaceKind, TestFunctionFamily,
};
use crate::grid::{gradients_at_gauss, values_at_gauss, SpaceTimeArray, SpatialGrid, TimeGrid};
use crate::materials::{
    build_lift, Excitation, ExcitationLift, MaterialError, MaterialParams, PhysicalCoefficients, Relaxation,
    SpaceTimeField,
};
use crate::observation::{
    boundary_flux_jump, flux_integral, observe, total_potential, ObservationError, ObservationSpec, ObservationTrace,
};
use crate::solver::{run_forward, InitialData, SolverConfig, SolverError, StateTrajectory};

#[derive(Debug, Error)]
pub enum InverseError {
    #[error("shape mismatch: {0}")]
    Mismatch(String),
    #[error("the operator needs a temperature-independent relaxation time")]
    NonConstantRelaxation,
    #[error("invalid inversion config: {0}")]
    Config(String),
    #[error("inversion diverged after {} iterations", .0.iterates.len())]
    Divergence(Box<ReconstructionReport>),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Observation(#[from] ObservationError),
    #[error(transparent)]
    Material(#[from] MaterialError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
}

/// Test functions for the momentum (`μ`), potential (`w`) and heat (`ν`) rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteTestBasis {
    pub mu: TestFunctionFamily,
    pub w: TestFunctionFamily,
    pub nu: TestFunctionFamily,
}

impl DiscreteTestBasis {
    pub const DEFAULT_SIZE: usize = 24;

    pub fn new(size: usize, seed: u64, max_mode: u32) -> Self {
        Self {
            mu: TestFunctionFamily::random(size, seed, SpaceKind::Sine, max_mode),
            w: TestFunctionFamily::random(size, seed.wrapping_add(1), SpaceKind::Sine, max_mode),
            nu: TestFunctionFamily::random(size, seed.wrapping_add(2), SpaceKind::Cosine, max_mode),
        }
    }

    pub fn size(&self) -> usize {
        self.mu.members.len()
    }

    fn check(&self) -> Result<(), InverseError> {
        for fam in [&self.mu, &self.w, &self.nu] {
            fam.check_support()?;
        }
        if self.w.members.len() != self.size() || self.nu.members.len() != self.size() {
            return Err(InverseError::Mismatch("test families differ in size".into()));
        }
        Ok(())
    }
}

/// Pairings of the three rows with the basis, plus an optional observation block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperatorImage {
    pub momentum: Vec<f64>,
    pub potential: Vec<f64>,
    pub heat: Vec<f64>,
    pub observation: Option<ObservationTrace>,
}

impl OperatorImage {
    /// Model block as one vector of length `3M`.
    pub fn residual(&self) -> Vec<f64> {
        let mut out = self.momentum.clone();
        out.extend_from_slice(&self.potential);
        out.extend_from_slice(&self.heat);
        out
    }

    pub fn norm_inf(&self) -> f64 {
        max_abs(&self.residual())
    }

    pub fn norm(&self) -> f64 {
        self.residual().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.residual().iter().all(|x| x.is_finite())
            && self
                .observation
                .as_ref()
                .is_none_or(|o| o.stacked().iter().all(|x| x.is_finite()))
    }
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Direction `ξ = (η, ω, κ)` in the state `(u, φ⁰, Θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTangent {
    pub eta: SpaceTimeArray,
    pub omega: SpaceTimeArray,
    pub kappa: SpaceTimeArray,
}

impl StateTangent {
    pub fn zeros(grid: &SpatialGrid, time: &TimeGrid) -> Self {
        let z = SpaceTimeArray::zeros(grid.n_nodes(), time.n_levels());
        Self {
            eta: z.clone(),
            omega: z.clone(),
            kappa: z,
        }
    }

    /// Difference quotient `(b − a)/h` of two trajectories.
    pub fn between(a: &StateTrajectory, b: &StateTrajectory, h: f64) -> Self {
        let s = 1.0 / h;
        Self {
            eta: b.u.axpy(-1.0, &a.u).scaled(s),
            omega: b.phi0.axpy(-1.0, &a.phi0).scaled(s),
            kappa: b.theta.axpy(-1.0, &a.theta).scaled(s),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            eta: self.eta.scaled(s),
            omega: self.omega.scaled(s),
            kappa: self.kappa.scaled(s),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            eta: self.eta.axpy(1.0, &other.eta),
            omega: self.omega.axpy(1.0, &other.omega),
            kappa: self.kappa.axpy(1.0, &other.kappa),
        }
    }

    fn check(&self, traj: &StateTrajectory) -> Result<(), InverseError> {
        for (name, a) in [("eta", &self.eta), ("omega", &self.omega), ("kappa", &self.kappa)] {
            if !a.same_shape(&traj.u) {
                return Err(InverseError::Mismatch(format!(
                    "{name} is {}x{}",
                    a.n_levels(),
                    a.n_nodes()
                )));
            }
        }
        Ok(())
    }
}

/// Direction `q = (q1, q2, q3)` in the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTangent {
    pub q1: f64,
    pub q2: SpaceTimeField,
    pub q3: SpaceTimeField,
}

impl ParamTangent {
    pub fn zero() -> Self {
        Self {
            q1: 0.0,
            q2: SpaceTimeField::Constant(0.0),
            q3: SpaceTimeField::Constant(0.0),
        }
    }
}

/// `f + q` without positivity checks.
pub fn shifted_params(f: &MaterialParams, q: &ParamTangent, grid: &SpatialGrid, time: &TimeGrid) -> MaterialParams {
    let (nn, nl) = (grid.n_nodes(), time.n_levels());
    MaterialParams {
        p1: f.p1 + q.q1,
        p2: f.p2.axpy(1.0, &q.q2, nn, nl),
        p3: f.p3.axpy(1.0, &q.q3, nn, nl),
    }
}

/// `l + s·ξ` as a trajectory with the same data.
pub fn shifted_state(traj: &StateTrajectory, xi: &StateTangent, s: f64) -> StateTrajectory {
    let mut out = traj.clone();
    out.u = traj.u.axpy(s, &xi.eta);
    out.phi0 = traj.phi0.axpy(s, &xi.omega);
    out.theta = traj.theta.axpy(s, &xi.kappa);
    out.min_theta = out.theta.min();
    out.max_theta = out.theta.max();
    out
}

fn relaxation_time(coeffs: &PhysicalCoefficients) -> Result<f64, InverseError> {
    match &coeffs.tau {
        Relaxation::Constant(t) => Ok(*t),
        r @ Relaxation::Tabulated { tau, .. } if r.is_constant() => Ok(tau[0]),
        _ => Err(InverseError::NonConstantRelaxation),
    }
}

type Rows = [RowIntegrand; 3];

fn empty_rows(n_step: usize) -> Rows {
    let r = || RowIntegrand {
        intervals: vec![IntervalDensities::default(); n_step],
        initial: Vec::new(),
    };
    [r(), r(), r()]
}

fn pair_rows(rows: &Rows, basis: &DiscreteTestBasis, grid: &SpatialGrid, time: &TimeGrid) -> OperatorImage {
    let pair = |row: &RowIntegrand, fam: &TestFunctionFamily| -> Vec<f64> {
        fam.members
            .iter()
            .map(|t: &SeparableTest| pair_row(time, row, &spatial_samples(grid, t.space), t))
            .collect()
    };
    OperatorImage {
        momentum: pair(&rows[0], &basis.mu),
        potential: pair(&rows[1], &basis.w),
        heat: pair(&rows[2], &basis.nu),
        observation: None,
    }
}

fn check_state(traj: &StateTrajectory, basis: &DiscreteTestBasis) -> Result<(), InverseError> {
    basis.check()?;
    let (nn, nl) = (traj.grid.n_nodes(), traj.time.n_levels());
    for (name, a) in [("u", &traj.u), ("phi0", &traj.phi0), ("theta", &traj.theta)] {
        if a.n_nodes() != nn || a.n_levels() != nl {
            return Err(InverseError::Mismatch(format!("{name} does not match the grids")));
        }
    }
    if traj.excitation.values.len() != nl {
        return Err(InverseError::Mismatch("excitation length".into()));
    }
    Ok(())
}

fn model_rows(f: &MaterialParams, coeffs: &PhysicalCoefficients, tau: f64, traj: &StateTrajectory) -> Rows {
    let (grid, time) = (&traj.grid, &traj.time);
    let (nn, dt, beta) = (grid.n_nodes(), time.dt(), coeffs.beta);
    let gamma = tau * f.p1;
    let mut rows = empty_rows(time.n_step());
    for n in 0..time.n_step() {
        let m = n + 1;
        let kin = interval_kinematics(grid, dt, &traj.u, &traj.theta, n);
        let rho = values_at_gauss(&coeffs.rho.level(m, nn));
        let rho_t = values_at_gauss(&coeffs.rho.backward_difference(m, time, nn));
        let b = values_at_gauss(&coeffs.heat_capacity_level(m, nn));
        let b_prev = values_at_gauss(&coeffs.heat_capacity_level(n, nn));
        let k = values_at_gauss(&coeffs.k.level(m, nn));
        let p2 = values_at_gauss(&f.p2.level(m, nn));
        let p3 = values_at_gauss(&f.p3.level(m, nn));
        let phi_z = gradients_at_gauss(grid, traj.phi0.row(m));
        let chi_z = traj.excitation.lift_gradient(grid, m);
        let ng = rho.len();
        rows[0].intervals[n] = IntervalDensities {
            a: (0..ng).map(|g| rho[g] * kin.u_t[g]).collect(),
            b: (0..ng).map(|g| -rho_t[g] * kin.u_t[g]).collect(),
            c: (0..ng)
                .map(|g| f.p1 * kin.u_z[g] + gamma * kin.u_zt[g] + p2[g] * (phi_z[g] + chi_z) - beta * kin.theta[g])
                .collect(),
        };
        rows[1].intervals[n].c = (0..ng)
            .map(|g| p2[g] * kin.u_z[g] - p3[g] * (phi_z[g] + chi_z))
            .collect();
        rows[2].intervals[n] = IntervalDensities {
            a: (0..ng).map(|g| b[g] * kin.theta[g]).collect(),
            b: (0..ng)
                .map(|g| {
                    let b_t = (b[g] - b_prev[g]) / dt;
                    -b_t * kin.theta[g] - gamma * kin.u_zt[g] * kin.u_zt[g] + beta * kin.u_zt[g] * kin.theta[g]
                })
                .collect(),
            c: (0..ng).map(|g| k[g] * kin.theta_z[g]).collect(),
        };
    }
    let rho0 = values_at_gauss(&coeffs.rho.level(0, nn));
    let b0 = values_at_gauss(&coeffs.heat_capacity_level(0, nn));
    let u1 = values_at_gauss(&traj.initial.u1);
    let th0 = values_at_gauss(&traj.initial.theta0);
    rows[0].initial = rho0.iter().zip(&u1).map(|(r, v)| -r * v).collect();
    rows[2].initial = b0.iter().zip(&th0).map(|(b, t)| -b * t).collect();
    rows
}

fn state_rows(
    f: &MaterialParams,
    coeffs: &PhysicalCoefficients,
    tau: f64,
    traj: &StateTrajectory,
    xi: &StateTangent,
) -> Rows {
    let (grid, time) = (&traj.grid, &traj.time);
    let (nn, dt, beta) = (grid.n_nodes(), time.dt(), coeffs.beta);
    let gamma = tau * f.p1;
    let mut rows = empty_rows(time.n_step());
    for n in 0..time.n_step() {
        let m = n + 1;
        let kin = interval_kinematics(grid, dt, &traj.u, &traj.theta, n);
        let tan = interval_kinematics(grid, dt, &xi.eta, &xi.kappa, n);
        let rho = values_at_gauss(&coeffs.rho.level(m, nn));
        let rho_t = values_at_gauss(&coeffs.rho.backward_difference(m, time, nn));
        let b = values_at_gauss(&coeffs.heat_capacity_level(m, nn));
        let b_prev = values_at_gauss(&coeffs.heat_capacity_level(n, nn));
        let k = values_at_gauss(&coeffs.k.level(m, nn));
        let p2 = values_at_gauss(&f.p2.level(m, nn));
        let p3 = values_at_gauss(&f.p3.level(m, nn));
        let omega_z = gradients_at_gauss(grid, xi.omega.row(m));
        let ng = rho.len();
        rows[0].intervals[n] = IntervalDensities {
            a: (0..ng).map(|g| rho[g] * tan.u_t[g]).collect(),
            b: (0..ng).map(|g| -rho_t[g] * tan.u_t[g]).collect(),
            c: (0..ng)
                .map(|g| f.p1 * tan.u_z[g] + gamma * tan.u_zt[g] + p2[g] * omega_z[g] - beta * tan.theta[g])
                .collect(),
        };
        rows[1].intervals[n].c = (0..ng).map(|g| p2[g] * tan.u_z[g] - p3[g] * omega_z[g]).collect();
        rows[2].intervals[n] = IntervalDensities {
            a: (0..ng).map(|g| b[g] * tan.theta[g]).collect(),
            b: (0..ng)
                .map(|g| {
                    let b_t = (b[g] - b_prev[g]) / dt;
                    -b_t * tan.theta[g] + beta * (tan.u_zt[g] * kin.theta[g] + kin.u_zt[g] * tan.theta[g])
                        - 2.0 * gamma * tan.u_zt[g] * kin.u_zt[g]
                })
                .collect(),
            c: (0..ng).map(|g| k[g] * tan.theta_z[g]).collect(),
        };
    }
    rows
}

fn param_rows(tau: f64, traj: &StateTrajectory, q: &ParamTangent) -> Rows {
    let (grid, time) = (&traj.grid, &traj.time);
    let (nn, dt) = (grid.n_nodes(), time.dt());
    let mut rows = empty_rows(time.n_step());
    for n in 0..time.n_step() {
        let m = n + 1;
        let kin = interval_kinematics(grid, dt, &traj.u, &traj.theta, n);
        let q2 = values_at_gauss(&q.q2.level(m, nn));
        let q3 = values_at_gauss(&q.q3.level(m, nn));
        let phi_z = gradients_at_gauss(grid, traj.phi0.row(m));
        let chi_z = traj.excitation.lift_gradient(grid, m);
        let ng = q2.len();
        rows[0].intervals[n].c = (0..ng)
            .map(|g| q.q1 * kin.u_z[g] + tau * q.q1 * kin.u_zt[g] + q2[g] * (phi_z[g] + chi_z))
            .collect();
        rows[1].intervals[n].c = (0..ng)
            .map(|g| q2[g] * kin.u_z[g] - q3[g] * (phi_z[g] + chi_z))
            .collect();
        rows[2].intervals[n].b = (0..ng).map(|g| -tau * q.q1 * kin.u_zt[g] * kin.u_zt[g]).collect();
    }
    rows
}

/// `⟨A(f,l), (μ, w, ν)⟩` for every basis member, with `ρu_tt μ` integrated by parts in time.
pub fn apply_model_operator(
    f: &MaterialParams,
    coeffs: &PhysicalCoefficients,
    traj: &StateTrajectory,
    basis: &DiscreteTestBasis,
) -> Result<OperatorImage, InverseError> {
    check_state(traj, basis)?;
    let tau = relaxation_time(coeffs)?;
    Ok(pair_rows(
        &model_rows(f, coeffs, tau, traj),
        basis,
        &traj.grid,
        &traj.time,
    ))
}

/// `F(f,l) = (A(f,l), C(f,l))` with the observation selected by `spec`.
pub fn apply_forward_operator(
    f: &MaterialParams,
    coeffs: &PhysicalCoefficients,
    traj: &StateTrajectory,
    basis: &DiscreteTestBasis,
    spec: ObservationSpec,
) -> Result<OperatorImage, InverseError> {
    let lift = build_lift(&traj.excitation, &traj.grid, &traj.time).map_err(|e| match e {
        MaterialError::ZeroExcitation => InverseError::Observation(ObservationError::ZeroExcitation),
        e => e.into(),
    })?;
    let mut image = apply_model_operator(f, coeffs, traj, basis)?;
    image.observation = Some(observe(spec, traj, f, &lift)?);
    Ok(image)
}

/// `A_l(f,l)ξ`, linear in `ξ`.
pub fn frechet_state(
    f: &MaterialParams,
    coeffs: &PhysicalCoefficients,
    traj: &StateTrajectory,
    xi: &StateTangent,
    basis: &DiscreteTestBasis,
) -> Result<OperatorImage, InverseError> {
    check_state(traj, basis)?;
    xi.check(traj)?;
    let tau = relaxation_time(coeffs)?;
    Ok(pair_rows(
        &state_rows(f, coeffs, tau, traj, xi),
        basis,
        &traj.grid,
        &traj.time,
    ))
}

/// `A_f(f,l)q`; `A` is affine in `f`, so this is also `A(f+q,l) − A(f,l)`.
pub fn frechet_param(
    coeffs: &PhysicalCoefficients,
    traj: &StateTrajectory,
    q: &ParamTangent,
    basis: &DiscreteTestBasis,
) -> Result<OperatorImage, InverseError> {
    check_state(traj, basis)?;
    let tau = relaxation_time(coeffs)?;
    Ok(pair_rows(&param_rows(tau, traj, q), basis, &traj.grid, &traj.time))
}

/// Second-order part of `A` in the state: `(βη_zt κ − Γη_zt²) ν` in the heat row.
pub fn quadratic_block(
    f: &MaterialParams,
    coeffs: &PhysicalCoefficients,
    traj: &StateTrajectory,
    xi: &StateTangent,
    basis: &DiscreteTestBasis,
) -> Result<OperatorImage, InverseError> {
    check_state(traj, basis)?;
    xi.check(traj)?;
    let gamma = relaxation_time(coeffs)? * f.p1;
    let (grid, time) = (&traj.grid, &traj.time);
    let mut rows = empty_rows(time.n_step());
    for n in 0..time.n_step() {
        let tan = interval_kinematics(grid, time.dt(), &xi.eta, &xi.kappa, n);
        rows[2].intervals[n].b = tan
            .u_zt
            .iter()
            .zip(&tan.theta)
            .map(|(ezt, k)| coeffs.beta * ezt * k - gamma * ezt * ezt)
            .collect();
    }
    Ok(pair_rows(&rows, basis, grid, time))
}

/// Directional derivatives of the observation: `(C_l ξ, C_f q)` as traces of
/// the same kind as `spec`. The bulk charge is bilinear, the window and
/// boundary charges are linear, in `(u, φ⁰)` and in `(p2, p3)`.
pub fn observation_derivatives(
    spec: ObservationSpec,
    f: &MaterialParams,
    traj: &StateTrajectory,
    xi: &StateTangent,
    q: &ParamTangent,
    lift: &ExcitationLift,
) -> Result<(ObservationTrace, ObservationTrace), InverseError> {
    xi.check(traj)?;
    let (grid, time) = (&traj.grid, &traj.time);
    let nn = grid.n_nodes();
    let h = grid.length();
    if let ObservationSpec::Window { gamma } = spec {
        if !(gamma > 0.0 && gamma < h) {
            return Err(ObservationError::BadGamma { gamma, h }.into());
        }
    }
    if spec == ObservationSpec::Boundary && grid.n_elem() < 3 {
        return Err(ObservationError::TooCoarse(grid.n_elem()).into());
    }
    let channel = |upper: f64| -> (Vec<f64>, Vec<f64>) {
        (0..time.n_levels())
            .map(|n| {
                let (p2, p3) = (f.p2.level(n, nn), f.p3.level(n, nn));
                let (q2, q3) = (q.q2.level(n, nn), q.q3.level(n, nn));
                let (u, eta, omega) = (traj.u.row(n), xi.eta.row(n), xi.omega.row(n));
                let phi = total_potential(traj, n);
                match spec {
                    ObservationSpec::Bulk { .. } => (
                        (flux_integral(grid, &p2, &p3, eta, omega, 0.0, upper, Some(&phi))
                            + flux_integral(grid, &p2, &p3, u, &phi, 0.0, upper, Some(omega)))
                            / lift.norm,
                        flux_integral(grid, &q2, &q3, u, &phi, 0.0, upper, Some(&phi)) / lift.norm,
                    ),
                    ObservationSpec::Window { gamma } => (
                        flux_integral(grid, &p2, &p3, eta, omega, h - gamma, h, None) / gamma,
                        flux_integral(grid, &q2, &q3, u, &phi, h - gamma, h, None) / gamma,
                    ),
                    ObservationSpec::Boundary => (
                        boundary_flux_jump(grid, &p2, &p3, eta, omega),
                        boundary_flux_jump(grid, &q2, &q3, u, &phi),
                    ),
                }
            })
            .unzip()
    };
    let (dl, df) = channel(h);
    let (dl2, df2) = match spec {
        ObservationSpec::Bulk { split: true } => {
            let (a, b) = channel(0.5 * h);
            (Some(a), Some(b))
        }
        _ => (None, None),
    };
    let template = observe(spec, traj, f, lift)?;
    Ok((template.with_values(dl, dl2), template.with_values(df, df2)))
}

/// Smooth pseudo-random trajectory on the given grids, with zero Dirichlet
/// values for `u` and `φ⁰` and a nonvanishing excitation.
pub fn random_smooth_trajectory(grid: &SpatialGrid, time: &TimeGrid, seed: u64) -> StateTrajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = grid.length();
    let end = time.end();
    let field = |rng: &mut ChaCha8Rng, sine: bool| {
        let c: Vec<[f64; 3]> = (1..=3)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let offset = if sine { 0.0 } else { 1.0 + rng.gen_range(0.0..0.5) };
        let mut a = SpaceTimeArray::from_fn(grid, time, |z, t| {
            let s = t / end;
            offset
                + c.iter()
                    .enumerate()
                    .map(|(k, a)| {
                        let arg = (k + 1) as f64 * std::f64::consts::PI * z / h;
                        let space = if sine { arg.sin() } else { 0.3 * arg.cos() };
                        space * (a[0] + a[1] * s + a[2] * s * s)
                    })
                    .sum::<f64>()
        });
        if sine {
            let last = grid.n_nodes() - 1;
            for n in 0..time.n_levels() {
                a.row_mut(n)[0] = 0.0;
                a.row_mut(n)[last] = 0.0;
            }
        }
        a
    };
    let u = field(&mut rng, true);
    let phi0 = field(&mut rng, true);
    let theta = field(&mut rng, false);
    let a = rng.gen_range(0.5..1.5);
    let w = rng.gen_range(1.0..6.0);
    let excitation = Excitation::from_fn(time, |t| a * (1.0 + 0.5 * (w * t / end).sin()));
    let u1: Vec<f64> = u
        .row(1)
        .iter()
        .zip(u.row(0))
        .map(|(b, a)| (b - a) / time.dt())
        .collect();
    let initial = InitialData::new(grid, u.row(0).to_vec(), u1, theta.row(0).to_vec())
        .expect("smooth data satisfies the boundary and sign conditions");
    let (min_theta, max_theta) = (theta.min(), theta.max());
    StateTrajectory {
        grid: *grid,
        time: *time,
        epsilon: 0.0,
        v: u.clone(),
        u,
        theta,
        phi0,
        excitation,
        initial,
        min_theta,
        max_theta,
    }
}

/// Random positive spatial parameters and a random parameter direction.
pub fn random_params(grid: &SpatialGrid, seed: u64) -> (MaterialParams, ParamTangent) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = grid.length();
    let smooth = |rng: &mut ChaCha8Rng, base: f64, amp: f64| {
        let (a, k) = (rng.gen_range(-amp..amp), rng.gen_range(1..4) as f64);
        SpaceTimeField::spatial_fn(grid, |z| base + a * (k * std::f64::consts::PI * z / h).cos())
    };
    let f = MaterialParams {
        p1: rng.gen_range(0.5..2.0),
        p2: smooth(&mut rng, 1.0, 0.4),
        p3: smooth(&mut rng, 1.0, 0.4),
    };
    let q = ParamTangent {
        q1: rng.gen_range(-0.5..0.5),
        q2: smooth(&mut rng, 0.0, 0.5),
        q3: smooth(&mut rng, 0.0, 0.5),
    };
    (f, q)
}

/// Random smooth state direction in the admissible class: `η`, `κ` vanish at
/// `t = 0` and `η`, `ω` at both ends of the domain.
pub fn random_state_tangent(grid: &SpatialGrid, time: &TimeGrid, seed: u64) -> StateTangent {
    let r = random_smooth_trajectory(grid, time, seed);
    let mut xi = StateTangent {
        eta: r.u,
        omega: r.phi0,
        kappa: r.theta,
    };
    for n in 0..time.n_levels() {
        let s = time.time(n) / time.end();
        xi.eta.row_mut(n).iter_mut().for_each(|x| *x *= s);
        xi.kappa.row_mut(n).iter_mut().for_each(|x| *x *= s);
    }
    xi
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivativeCheckReport {
    pub triples: usize,
    pub basis_size: usize,
    /// Max over triples of `‖A(f+q,l) − A(f,l) − A_f q‖∞ / ‖A_f q‖∞`.
    pub param_exactness: f64,
    /// Max over triples of `ε_mach·(‖A(f+q,l)‖∞ + ‖A(f,l)‖∞) / ‖A_f q‖∞`, the cancellation
    /// floor of `param_exactness`; far above 1e-16 when the coefficients span many decades.
    pub param_roundoff_floor: f64,
    /// Max over triples of `‖A(f,l+ξ) − A(f,l) − A_l ξ − Q(ξ)‖∞ / ‖Q(ξ)‖∞`.
    pub state_taylor: f64,
    /// Max over pairs of `‖A_l(ξ1+ξ2) − A_l ξ1 − A_l ξ2‖∞ / ‖A_l(ξ1+ξ2)‖∞`.
    pub state_additivity: f64,
    pub fd_steps: Vec<f64>,
    /// `‖A(f,l+sξ) − A(f,l) − sA_l ξ‖∞ / s` for each step.
    pub fd_errors: Vec<f64>,
    pub fd_slope: f64,
    /// `q1`-only and `κ`-only directions leave the potential row untouched,
    /// `q3`-only directions leave the momentum row untouched.
    pub sparsity_holds: bool,
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Exactness, Taylor-remainder, additivity, sparsity and finite-difference
/// checks of the derivatives on `triples` random `(f, q, l, ξ)` samples.
pub fn derivative_check(
    grid: &SpatialGrid,
    time: &TimeGrid,
    coeffs: &PhysicalCoefficients,
    basis: &DiscreteTestBasis,
    triples: usize,
    seed: u64,
) -> Result<DerivativeCheckReport, InverseError> {
    let mut report = DerivativeCheckReport {
        triples,
        basis_size: basis.size(),
        param_exactness: 0.0,
        param_roundoff_floor: 0.0,
        state_taylor: 0.0,
        state_additivity: 0.0,
        fd_steps: vec![1e-1, 1e-2, 1e-3, 1e-4],
        fd_errors: Vec::new(),
        fd_slope: f64::NAN,
        sparsity_holds: true,
    };
    for i in 0..triples {
        let s = seed.wrapping_add(17 * i as u64);
        let traj = random_smooth_trajectory(grid, time, s);
        let (f, q) = random_params(grid, s ^ 0x9e37);
        let base = apply_model_operator(&f, coeffs, &traj, basis)?.residual();

        let af = frechet_param(coeffs, &traj, &q, basis)?.residual();
        let shifted = apply_model_operator(&shifted_params(&f, &q, grid, time), coeffs, &traj, basis)?.residual();
        let res: Vec<f64> = shifted
            .iter()
            .zip(&base)
            .zip(&af)
            .map(|((a, b), c)| a - b - c)
            .collect();
        report.param_exactness = report.param_exactness.max(max_abs(&res) / max_abs(&af));
        report.param_roundoff_floor = report
            .param_roundoff_floor
            .max(f64::EPSILON * (max_abs(&shifted) + max_abs(&base)) / max_abs(&af));

        let xi = random_state_tangent(grid, time, s ^ 0x51ed);
        let al = frechet_state(&f, coeffs, &traj, &xi, basis)?.residual();
        let quad = quadratic_block(&f, coeffs, &traj, &xi, basis)?.residual();
        let moved = apply_model_operator(&f, coeffs, &shifted_state(&traj, &xi, 1.0), basis)?.residual();
        let res: Vec<f64> = (0..base.len()).map(|j| moved[j] - base[j] - al[j] - quad[j]).collect();
        report.state_taylor = report.state_taylor.max(max_abs(&res) / max_abs(&quad));

        let xi2 = random_state_tangent(grid, time, s ^ 0xabcd);
        let al2 = frechet_state(&f, coeffs, &traj, &xi2, basis)?.residual();
        let sum = frechet_state(&f, coeffs, &traj, &xi.add(&xi2), basis)?.residual();
        let res: Vec<f64> = (0..sum.len()).map(|j| sum[j] - al[j] - al2[j]).collect();
        report.state_additivity = report.state_additivity.max(max_abs(&res) / max_abs(&sum));

        let q1_only = ParamTangent {
            q1: q.q1,
            ..ParamTangent::zero()
        };
        let q3_only = ParamTangent {
            q3: q.q3.clone(),
            ..ParamTangent::zero()
        };
        let kappa_only = StateTangent {
            kappa: xi.kappa.clone(),
            ..StateTangent::zeros(grid, time)
        };
        report.sparsity_holds &= max_abs(&frechet_param(coeffs, &traj, &q1_only, basis)?.potential) == 0.0
            && max_abs(&frechet_param(coeffs, &traj, &q3_only, basis)?.momentum) == 0.0
            && max_abs(&frechet_state(&f, coeffs, &traj, &kappa_only, basis)?.potential) == 0.0;

        if i == 0 {
            for &step in &report.fd_steps {
                let moved = apply_model_operator(&f, coeffs, &shifted_state(&traj, &xi, step), basis)?.residual();
                let r: Vec<f64> = (0..base.len()).map(|j| moved[j] - base[j] - step * al[j]).collect();
                report.fd_errors.push(max_abs(&r) / step);
            }
            report.fd_slope = loglog_slope(&report.fd_steps, &report.fd_errors);
        }
    }
    Ok(report)
}

/// Everything needed to run the forward solver for given parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardSetup {
    pub grid: SpatialGrid,
    pub init: InitialData,
    pub coeffs: PhysicalCoefficients,
    pub excitation: Excitation,
    pub solver: SolverConfig,
}

impl ForwardSetup {
    pub fn run(&self, f: &MaterialParams) -> Result<StateTrajectory, SolverError> {
        run_forward(&self.grid, &self.init, &self.coeffs, f, &self.excitation, &self.solver)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unknown {
    Known,
    /// One scalar.
    Constant,
    /// One value per grid node, constant in time.
    Field,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterMask {
    pub p1: Unknown,
    pub p2: Unknown,
    pub p3: Unknown,
}

impl Default for ParameterMask {
    fn default() -> Self {
        Self {
            p1: Unknown::Known,
            p2: Unknown::Constant,
            p3: Unknown::Constant,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    /// Multiplier of the steepest-descent step `‖g‖²/‖Jg‖²`.
    pub step: f64,
    pub max_iter: usize,
    pub tikhonov: f64,
    pub tau_dp: f64,
    pub mask: ParameterMask,
    /// Weight of the model block relative to the data block.
    pub model_weight: f64,
    /// Relative step of the finite-difference state sensitivities.
    pub fd_step: f64,
    /// Step halvings allowed per iteration; zero gives fixed-step Landweber.
    pub max_halvings: usize,
    pub basis_size: usize,
    pub basis_seed: u64,
    pub max_mode: u32,
    /// Scale each unknown by its Jacobian column norm before the descent step.
    pub precondition: bool,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            step: 1.0,
            max_iter: 400,
            tikhonov: 0.0,
            tau_dp: 1.5,
            mask: ParameterMask::default(),
            model_weight: 1e-2,
            fd_step: 1e-6,
            max_halvings: 30,
            basis_size: DiscreteTestBasis::DEFAULT_SIZE,
            basis_seed: 7,
            max_mode: 6,
            precondition: true,
        }
    }
}

impl InversionConfig {
    pub fn check(&self) -> Result<(), InverseError> {
        let bad = |m: &str| Err(InverseError::Config(m.into()));
        if !(self.step > 0.0 && self.step.is_finite()) {
            return bad("step must be positive");
        }
        if !(self.tau_dp > 1.0) {
            return bad("tau_dp must exceed 1");
        }
        if !(self.tikhonov >= 0.0 && self.model_weight >= 0.0) {
            return bad("weights must be nonnegative");
        }
        if !(self.fd_step > 0.0) {
            return bad("fd_step must be positive");
        }
        if self.basis_size == 0 {
            return bad("basis_size must be positive");
        }
        if self.mask.p1 == Unknown::Field {
            return bad("p1 is a scalar");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    P1,
    P2(Option<usize>),
    P3(Option<usize>),
}

impl Slot {
    fn name(&self) -> String {
        match self {
            Slot::P1 => "p1".into(),
            Slot::P2(None) => "p2".into(),
            Slot::P3(None) => "p3".into(),
            Slot::P2(Some(i)) => format!("p2[{i}]"),
            Slot::P3(Some(i)) => format!("p3[{i}]"),
        }
    }
}

/// Maps relative unknowns `x` (one at the initial guess) to parameters.
struct Parameterization {
    slots: Vec<Slot>,
    base: Vec<f64>,
    guess: MaterialParams,
    n_nodes: usize,
}

impl Parameterization {
    fn new(guess: &MaterialParams, mask: ParameterMask, grid: &SpatialGrid) -> Result<Self, InverseError> {
        let nn = grid.n_nodes();
        let mut slots = Vec::new();
        let mut base = Vec::new();
        if mask.p1 == Unknown::Constant {
            slots.push(Slot::P1);
            base.push(guess.p1);
        }
        for (which, unknown, field) in [(2, mask.p2, &guess.p2), (3, mask.p3, &guess.p3)] {
            let slot = |i| if which == 2 { Slot::P2(i) } else { Slot::P3(i) };
            match (unknown, field) {
                (Unknown::Known, _) => {}
                (Unknown::Constant, SpaceTimeField::Constant(c)) => {
                    slots.push(slot(None));
                    base.push(*c);
                }
                (Unknown::Field, SpaceTimeField::Constant(_) | SpaceTimeField::Spatial(_)) => {
                    for (i, v) in field.level(0, nn).into_iter().enumerate() {
                        slots.push(slot(Some(i)));
                        base.push(v);
                    }
                }
                _ => {
                    return Err(InverseError::Config(format!(
                        "p{which}: the initial guess does not fit the requested unknown"
                    )))
                }
            }
        }
        if slots.is_empty() {
            return Err(InverseError::Config("mask selects no unknowns".into()));
        }
        if base.contains(&0.0) {
            return Err(InverseError::Config("initial guess has a zero unknown".into()));
        }
        Ok(Self {
            slots,
            base,
            guess: guess.clone(),
            n_nodes: nn,
        })
    }

    fn params(&self, x: &[f64]) -> MaterialParams {
        let mut f = self.guess.clone();
        let nn = self.n_nodes;
        let spatial = |fld: &mut SpaceTimeField| {
            if let SpaceTimeField::Constant(c) = fld {
                *fld = SpaceTimeField::Spatial(vec![*c; nn]);
            }
        };
        for (j, slot) in self.slots.iter().enumerate() {
            let v = x[j] * self.base[j];
            match *slot {
                Slot::P1 => f.p1 = v,
                Slot::P2(None) => f.p2 = SpaceTimeField::Constant(v),
                Slot::P3(None) => f.p3 = SpaceTimeField::Constant(v),
                Slot::P2(Some(i)) => {
                    spatial(&mut f.p2);
                    if let SpaceTimeField::Spatial(a) = &mut f.p2 {
                        a[i] = v;
                    }
                }
                Slot::P3(Some(i)) => {
                    spatial(&mut f.p3);
                    if let SpaceTimeField::Spatial(a) = &mut f.p3 {
                        a[i] = v;
                    }
                }
            }
        }
        f
    }

    /// Parameter direction of a unit change in unknown `j`.
    fn direction(&self, j: usize) -> ParamTangent {
        let b = self.base[j];
        let node = |i: usize| {
            let mut v = vec![0.0; self.n_nodes];
            v[i] = b;
            SpaceTimeField::Spatial(v)
        };
        let mut q = ParamTangent::zero();
        match self.slots[j] {
            Slot::P1 => q.q1 = b,
            Slot::P2(None) => q.q2 = SpaceTimeField::Constant(b),
            Slot::P3(None) => q.q3 = SpaceTimeField::Constant(b),
            Slot::P2(Some(i)) => q.q2 = node(i),
            Slot::P3(Some(i)) => q.q3 = node(i),
        }
        q
    }

    fn values(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.base).map(|(x, b)| x * b).collect()
    }

    fn truth_values(&self, truth: &MaterialParams) -> Vec<f64> {
        let nn = self.n_nodes;
        self.slots
            .iter()
            .map(|s| match *s {
                Slot::P1 => truth.p1,
                Slot::P2(None) => truth.p2.value(0, 0),
                Slot::P3(None) => truth.p3.value(0, 0),
                Slot::P2(Some(i)) => truth.p2.level(0, nn)[i],
                Slot::P3(Some(i)) => truth.p3.level(0, nn)[i],
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Discrepancy,
    MaxIterations,
    /// No step along the negative gradient lowers the objective.
    Stagnation,
    Divergence,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterateRecord {
    pub iteration: usize,
    /// `‖F(f,l) − (0, y^δ)‖` with the model block weighted.
    pub misfit: f64,
    /// `‖C(f,l) − y^δ‖_Y`
    pub data_misfit: f64,
    pub model_residual: f64,
    pub parameters: Vec<f64>,
    pub parameter_error: Option<f64>,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconstructionReport {
    pub unknowns: Vec<String>,
    pub iterates: Vec<IterateRecord>,
    pub stop_reason: StopReason,
    pub parameters: Vec<f64>,
    pub parameter_error: Option<f64>,
    pub delta: f64,
    pub discrepancy_level: f64,
    /// Weight applied to the model block.
    pub model_scale: f64,
    pub misfit_nonincreasing: bool,
    pub data_misfit_nonincreasing: bool,
    pub config: InversionConfig,
}

struct Evaluation {
    f: MaterialParams,
    traj: StateTrajectory,
    r_model: Vec<f64>,
    r_data: Vec<f64>,
    objective: f64,
    data_misfit: f64,
}

/// Landweber-type steepest descent on
/// `½‖s_A A(f,l)‖² + ½‖C(f,l) − y^δ‖²_Y + ½α‖x − 1‖²`
/// over relative parameter unknowns `x`, with the state kept on the solver
/// manifold `l = l(f)`. The Jacobian of the stacked residual is assembled
/// from `A_f`, `A_l`, `C_f`, `C_l` applied to unit parameter directions and
/// finite-difference state sensitivities; its transpose gives the gradient.
pub fn invert_all_at_once(
    setup: &ForwardSetup,
    y_delta: &ObservationTrace,
    guess: &MaterialParams,
    config: &InversionConfig,
    truth: Option<&MaterialParams>,
) -> Result<ReconstructionReport, InverseError> {
    config.check()?;
    let grid = setup.grid;
    let time = setup.solver.time;
    if y_delta.values.len() != time.n_levels() {
        return Err(ObservationError::Length {
            expected: time.n_levels(),
            got: y_delta.values.len(),
        }
        .into());
    }
    relaxation_time(&setup.coeffs)?;
    let basis = DiscreteTestBasis::new(config.basis_size, config.basis_seed, config.max_mode);
    let lift = build_lift(&setup.excitation, &grid, &time)?;
    let spec = y_delta.spec();
    let param = Parameterization::new(guess, config.mask, &grid)?;
    let truth_values = truth.map(|t| param.truth_values(t));
    let y = y_delta.stacked();
    let sqrt_w: Vec<f64> = y_delta.stacked_weights().iter().map(|w| w.sqrt()).collect();
    let y_norm = y_delta.l2_norm();

    let model = |f: &MaterialParams, traj: &StateTrajectory| apply_model_operator(f, &setup.coeffs, traj, &basis);
    let data_residual = |f: &MaterialParams, traj: &StateTrajectory| -> Result<Vec<f64>, InverseError> {
        let c = observe(spec, traj, f, &lift)?.stacked();
        Ok((0..c.len()).map(|i| sqrt_w[i] * (c[i] - y[i])).collect())
    };

    let x0 = vec![1.0; param.slots.len()];
    let f0 = param.params(&x0);
    let traj0 = setup.run(&f0)?;
    let mut model_scale = 0.0f64;
    for j in 0..param.slots.len() {
        model_scale = model_scale.max(frechet_param(&setup.coeffs, &traj0, &param.direction(j), &basis)?.norm());
    }
    let model_scale = if model_scale > 0.0 {
        config.model_weight * if y_norm > 0.0 { y_norm } else { 1.0 } / model_scale
    } else {
        0.0
    };

    let evaluate = |x: &[f64], traj: Option<StateTrajectory>| -> Result<Evaluation, InverseError> {
        let f = param.params(x);
        MaterialParams::new(f.p1, f.p2.clone(), f.p3.clone())?;
        let traj = match traj {
            Some(t) => t,
            None => setup.run(&f)?,
        };
        let r_model: Vec<f64> = model(&f, &traj)?.residual().iter().map(|a| model_scale * a).collect();
        let r_data = data_residual(&f, &traj)?;
        let reg: f64 = x.iter().zip(&x0).map(|(a, b)| (a - b) * (a - b)).sum();
        let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        let objective = 0.5 * (sq(&r_model) + sq(&r_data) + config.tikhonov * reg);
        if !objective.is_finite() {
            return Err(InverseError::Solver(SolverError::Invalid(
                "non-finite objective".into(),
            )));
        }
        Ok(Evaluation {
            data_misfit: sq(&r_data).sqrt(),
            f,
            traj,
            r_model,
            r_data,
            objective,
        })
    };

    let mut x = x0.clone();
    let mut current = evaluate(&x, Some(traj0))?;
    let mut iterates = Vec::new();
    let mut growths = 0usize;
    let mut step_taken = 0.0;
    let level = config.tau_dp * y_delta.delta;
    let record = |k: usize, e: &Evaluation, x: &[f64], step: f64| {
        let values = param.values(x);
        IterateRecord {
            iteration: k,
            misfit: (2.0 * e.objective).sqrt(),
            data_misfit: e.data_misfit,
            model_residual: e.r_model.iter().map(|a| a * a).sum::<f64>().sqrt(),
            parameter_error: truth_values.as_ref().map(|t| {
                values
                    .iter()
                    .zip(t)
                    .fold(0.0f64, |m, (v, t)| m.max((v - t).abs() / t.abs()))
            }),
            parameters: values,
            step,
        }
    };

    let stop = loop {
        let k = iterates.len();
        iterates.push(record(k, &current, &x, step_taken));
        if current.data_misfit <= level {
            break StopReason::Discrepancy;
        }
        if growths >= 10 {
            break StopReason::Divergence;
        }
        if k >= config.max_iter {
            break StopReason::MaxIterations;
        }

        let mut columns = Vec::with_capacity(x.len());
        for j in 0..x.len() {
            let q = param.direction(j);
            let mut xh = x.clone();
            xh[j] += config.fd_step;
            let moved = setup.run(&param.params(&xh))?;
            let sens = StateTangent::between(&current.traj, &moved, config.fd_step);
            let a_f = frechet_param(&setup.coeffs, &current.traj, &q, &basis)?.residual();
            let a_l = frechet_state(&current.f, &setup.coeffs, &current.traj, &sens, &basis)?.residual();
            let (c_l, c_f) = observation_derivatives(spec, &current.f, &current.traj, &sens, &q, &lift)?;
            let mut col: Vec<f64> = a_f.iter().zip(&a_l).map(|(a, b)| model_scale * (a + b)).collect();
            col.extend(
                c_l.stacked()
                    .iter()
                    .zip(c_f.stacked())
                    .zip(&sqrt_w)
                    .map(|((a, b), w)| w * (a + b)),
            );
            columns.push(col);
        }
        let residual: Vec<f64> = current.r_model.iter().chain(&current.r_data).copied().collect();
        // Descent in the variables `ξ_j = d_j x_j`, `d_j = ‖J e_j‖`, when preconditioning.
        let d: Vec<f64> = columns
            .iter()
            .map(|c| {
                if config.precondition {
                    c.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE)
                } else {
                    1.0
                }
            })
            .collect();
        let grad: Vec<f64> = columns
            .iter()
            .enumerate()
            .map(|(j, c)| {
                (c.iter().zip(&residual).map(|(a, r)| a * r).sum::<f64>() + config.tikhonov * (x[j] - 1.0)) / d[j]
            })
            .collect();
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        let jg2: f64 = (0..residual.len())
            .map(|i| {
                columns
                    .iter()
                    .zip(&grad)
                    .zip(&d)
                    .map(|((c, g), d)| c[i] * g / d)
                    .sum::<f64>()
                    .powi(2)
            })
            .sum();
        let reg2: f64 = config.tikhonov * grad.iter().zip(&d).map(|(g, d)| (g / d).powi(2)).sum::<f64>();
        if !(g2 > 0.0) || !(jg2 + reg2 > 0.0) {
            break StopReason::Stagnation;
        }
        let grad: Vec<f64> = grad.iter().zip(&d).map(|(g, d)| g / d).collect();
        let mut alpha = config.step * g2 / (jg2 + reg2);

        let mut accepted = None;
        for _ in 0..=config.max_halvings {
            let trial: Vec<f64> = x.iter().zip(&grad).map(|(x, g)| x - alpha * g).collect();
            match evaluate(&trial, None) {
                Ok(e) if e.objective < current.objective || config.max_halvings == 0 => {
                    accepted = Some((trial, e));
                    break;
                }
                // Without halving, leaving the admissible set ends the run.
                Err(_) if config.max_halvings == 0 => break,
                _ => {}
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((trial, e)) => {
                growths = if e.objective > current.objective {
                    growths + 1
                } else {
                    0
                };
                x = trial;
                current = e;
                step_taken = alpha;
            }
            None if config.max_halvings == 0 => break StopReason::Divergence,
            None => break StopReason::Stagnation,
        }
    };

    let misfits: Vec<f64> = iterates.iter().map(|r| r.misfit).collect();
    let data: Vec<f64> = iterates.iter().map(|r| r.data_misfit).collect();
    let nonincreasing = |v: &[f64]| v.windows(2).all(|p| p[1] <= p[0]);
    let last = iterates.last().expect("at least one iterate");
    let report = ReconstructionReport {
        unknowns: param.slots.iter().map(Slot::name).collect(),
        parameters: last.parameters.clone(),
        parameter_error: last.parameter_error,
        stop_reason: stop,
        delta: y_delta.delta,
        discrepancy_level: level,
        model_scale,
        misfit_nonincreasing: nonincreasing(&misfits),
        data_misfit_nonincreasing: nonincreasing(&data),
        config: config.clone(),
        iterates,
    };
    if stop == StopReason::Divergence {
        return Err(InverseError::Divergence(Box::new(report)));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observation::{add_noise, observe_window_charge};
    use crate::solver::SolverConfig;
    use proptest::prelude::*;

    fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x - y).collect()
    }

    fn coeffs(beta: f64) -> PhysicalCoefficients {
        PhysicalCoefficients {
            rho: SpaceTimeField::Constant(1.0),
            c_th: SpaceTimeField::Constant(1.0),
            k: SpaceTimeField::Constant(0.5),
            beta,
            tau: Relaxation::Constant(0.05),
            gamma_min: 1e-3,
            gamma_max: 10.0,
        }
    }

    fn small() -> (SpatialGrid, TimeGrid, DiscreteTestBasis) {
        (
            SpatialGrid::new(1.0, 12).unwrap(),
            TimeGrid::new(1.0, 16).unwrap(),
            DiscreteTestBasis::new(8, 3, 4),
        )
    }

    fn setup(n_elem: usize, n_step: usize) -> ForwardSetup {
        let grid = SpatialGrid::new(1.0, n_elem).unwrap();
        let time = TimeGrid::new(1.0, n_step).unwrap();
        let pi = std::f64::consts::PI;
        ForwardSetup {
            grid,
            init: InitialData::from_fns(
                &grid,
                |z| 0.3 * (pi * z).sin(),
                |z| (pi * z).sin(),
                |z| 1.0 + 0.2 * (pi * z).cos(),
            )
            .unwrap(),
            coeffs: coeffs(0.1),
            excitation: Excitation::from_fn(&time, |t| 1.0 + 0.5 * (4.0 * t).sin()),
            solver: SolverConfig::new(0.0, time).unwrap(),
        }
    }

    #[test]
    fn zero_state_gives_zero_image() {
        let (grid, time, basis) = small();
        let traj = StateTrajectory {
            grid,
            time,
            epsilon: 0.0,
            u: SpaceTimeArray::zeros(grid.n_nodes(), time.n_levels()),
            v: SpaceTimeArray::zeros(grid.n_nodes(), time.n_levels()),
            theta: SpaceTimeArray::zeros(grid.n_nodes(), time.n_levels()),
            phi0: SpaceTimeArray::zeros(grid.n_nodes(), time.n_levels()),
            excitation: Excitation::zero(&time),
            initial: InitialData::zeros(&grid),
            min_theta: 0.0,
            max_theta: 0.0,
        };
        let f = MaterialParams::constant(1.0, 0.5, 1.0).unwrap();
        let img = apply_model_operator(&f, &coeffs(0.1), &traj, &basis).unwrap();
        assert_eq!(img.residual().len(), 3 * basis.size());
        assert_eq!(img.norm_inf(), 0.0);
        assert!(matches!(
            apply_forward_operator(&f, &coeffs(0.1), &traj, &basis, ObservationSpec::default()),
            Err(InverseError::Observation(ObservationError::ZeroExcitation))
        ));
        let xi = StateTangent::zeros(&grid, &time);
        assert_eq!(
            frechet_state(&f, &coeffs(0.1), &traj, &xi, &basis).unwrap().norm_inf(),
            0.0
        );
        assert_eq!(
            frechet_param(&coeffs(0.1), &traj, &ParamTangent::zero(), &basis)
                .unwrap()
                .norm_inf(),
            0.0
        );
    }

    #[test]
    fn temperature_dependent_relaxation_rejected() {
        let (grid, time, basis) = small();
        let traj = random_smooth_trajectory(&grid, &time, 1);
        let mut c = coeffs(0.1);
        c.tau = Relaxation::Reciprocal { tau0: 0.1 };
        let f = MaterialParams::constant(1.0, 0.5, 1.0).unwrap();
        assert!(matches!(
            apply_model_operator(&f, &c, &traj, &basis),
            Err(InverseError::NonConstantRelaxation)
        ));
    }

    #[test]
    fn derivative_identities_hold() {
        let (grid, time, basis) = small();
        let r = derivative_check(&grid, &time, &coeffs(0.3), &basis, 3, 11).unwrap();
        assert!(r.param_exactness <= 1e-12, "{r:?}");
        assert!(r.state_taylor <= 1e-12, "{r:?}");
        assert!(r.state_additivity <= 1e-12, "{r:?}");
        assert!((r.fd_slope - 1.0).abs() <= 0.1, "{r:?}");
        assert!(r.sparsity_holds);
    }

    #[test]
    fn forward_operator_composes_observation() {
        let s = setup(16, 32);
        let f = MaterialParams::constant(1.0, 0.5, 1.0).unwrap();
        let traj = s.run(&f).unwrap();
        let basis = DiscreteTestBasis::new(6, 1, 3);
        let spec = ObservationSpec::Window { gamma: 0.05 };
        let img = apply_forward_operator(&f, &s.coeffs, &traj, &basis, spec).unwrap();
        let direct = observe_window_charge(&traj, &f, 0.05).unwrap();
        assert_eq!(img.observation.unwrap().values, direct.values);
    }

    #[test]
    fn model_residual_shrinks_under_refinement_and_detects_wrong_parameters() {
        let f = MaterialParams::constant(1.0, 0.5, 1.0).unwrap();
        let basis = DiscreteTestBasis::new(8, 5, 3);
        let res: Vec<f64> = [(8, 16), (16, 32), (32, 64)]
            .iter()
            .map(|&(ne, ns)| {
                let s = setup(ne, ns);
                apply_model_operator(&f, &s.coeffs, &s.run(&f).unwrap(), &basis)
                    .unwrap()
                    .norm_inf()
            })
            .collect();
        assert!(res[1] < res[0] && res[2] < res[1], "{res:?}");

        let s = setup(32, 64);
        let wrong = MaterialParams::constant(1.6, 0.5, 1.0).unwrap();
        let mismatched = apply_model_operator(&f, &s.coeffs, &s.run(&wrong).unwrap(), &basis)
            .unwrap()
            .norm_inf();
        assert!(mismatched >= 10.0 * res[2], "{mismatched} vs {}", res[2]);
    }

    #[test]
    fn observation_derivatives_match_differences() {
        let (grid, time, _) = small();
        let traj = random_smooth_trajectory(&grid, &time, 4);
        let lift = build_lift(&traj.excitation, &grid, &time).unwrap();
        let (f, q) = random_params(&grid, 5);
        let xi = random_state_tangent(&grid, &time, 6);
        for spec in [
            ObservationSpec::Bulk { split: true },
            ObservationSpec::Window { gamma: 0.3 },
            ObservationSpec::Boundary,
        ] {
            let (dl, df) = observation_derivatives(spec, &f, &traj, &xi, &q, &lift).unwrap();
            let base = observe(spec, &traj, &f, &lift).unwrap().stacked();
            let shifted = observe(spec, &traj, &shifted_params(&f, &q, &grid, &time), &lift)
                .unwrap()
                .stacked();
            let exact = diff(&shifted, &base);
            let scale = max_abs(&df.stacked());
            assert!(max_abs(&diff(&exact, &df.stacked())) <= 1e-12 * scale);

            let errs: Vec<f64> = [1e-1, 5e-2, 2.5e-2]
                .iter()
                .map(|&s| {
                    let p = observe(spec, &shifted_state(&traj, &xi, s), &f, &lift)
                        .unwrap()
                        .stacked();
                    let m = observe(spec, &shifted_state(&traj, &xi, -s), &f, &lift)
                        .unwrap()
                        .stacked();
                    let cd: Vec<f64> = p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * s)).collect();
                    max_abs(&diff(&cd, &dl.stacked()))
                })
                .collect();
            // The bulk charge is quadratic, so central differences are exact;
            // the window and boundary charges are linear.
            assert!(errs.iter().all(|e| *e <= 1e-9 * max_abs(&dl.stacked())), "{errs:?}");

            let fwd: Vec<f64> = [1e-1, 5e-2, 2.5e-2, 1.25e-2]
                .iter()
                .map(|&s| {
                    let p = observe(spec, &shifted_state(&traj, &xi, s), &f, &lift)
                        .unwrap()
                        .stacked();
                    let fd: Vec<f64> = p.iter().zip(&base).map(|(a, b)| (a - b) / s).collect();
                    max_abs(&diff(&fd, &dl.stacked()))
                })
                .collect();
            if let ObservationSpec::Bulk { .. } = spec {
                let slope = loglog_slope(&[1e-1, 5e-2, 2.5e-2, 1.25e-2], &fwd);
                assert!((slope - 1.0).abs() < 0.05, "{slope}");
            }
        }
    }

    #[test]
    fn inversion_fixed_point_stops_immediately() {
        let s = setup(12, 24);
        let f = MaterialParams::constant(1.0, 0.5, 1.0).unwrap();
        let traj = s.run(&f).unwrap();
        let lift = build_lift(&s.excitation, &s.grid, &s.solver.time).unwrap();
        let y = observe(ObservationSpec::Bulk { split: true }, &traj, &f, &lift).unwrap();
        let r = invert_all_at_once(&s, &y, &f, &InversionConfig::default(), Some(&f)).unwrap();
        assert_eq!(r.stop_reason, StopReason::Discrepancy);
        assert_eq!(r.iterates.len(), 1);
        assert_eq!(r.iterates[0].data_misfit, 0.0);
    }

    #[test]
    fn inversion_recovers_coupling_pair() {
        let s = setup(12, 48);
        let truth = MaterialParams::constant(1.0, 0.6, 1.2).unwrap();
        let guess = MaterialParams::constant(1.0, 0.5, 1.0).unwrap();
        let lift = build_lift(&s.excitation, &s.grid, &s.solver.time).unwrap();
        let y = observe(
            ObservationSpec::Bulk { split: true },
            &s.run(&truth).unwrap(),
            &truth,
            &lift,
        )
        .unwrap();
        let r = invert_all_at_once(&s, &y, &guess, &InversionConfig::default(), Some(&truth)).unwrap();
        assert!(
            r.parameter_error.unwrap() <= 0.01,
            "{:?}",
            (r.stop_reason, &r.parameters, r.iterates.len())
        );
        assert!(r.misfit_nonincreasing);

        let noisy = add_noise(&y, 0.01 * y.l2_norm(), 9).unwrap();
        let r = invert_all_at_once(&s, &noisy, &guess, &InversionConfig::default(), Some(&truth)).unwrap();
        assert_eq!(r.stop_reason, StopReason::Discrepancy);
        assert!(r.parameter_error.unwrap() <= 0.1);
    }

    #[test]
    fn fixed_step_overshoot_diverges() {
        let s = setup(12, 24);
        let truth = MaterialParams::constant(1.0, 0.6, 1.2).unwrap();
        let guess = MaterialParams::constant(1.0, 0.5, 1.0).unwrap();
        let lift = build_lift(&s.excitation, &s.grid, &s.solver.time).unwrap();
        let y = observe(
            ObservationSpec::Bulk { split: true },
            &s.run(&truth).unwrap(),
            &truth,
            &lift,
        )
        .unwrap();
        let cfg = InversionConfig {
            step: 2.5,
            max_halvings: 0,
            ..Default::default()
        };
        match invert_all_at_once(&s, &y, &guess, &cfg, Some(&truth)) {
            Err(InverseError::Divergence(r)) => assert_eq!(r.stop_reason, StopReason::Divergence),
            Err(e) => panic!("unexpected error {e}"),
            Ok(r) => panic!("expected divergence, got {:?}", r.stop_reason),
        }
    }

    #[test]
    fn config_checks() {
        assert!(InversionConfig {
            tau_dp: 1.0,
            ..Default::default()
        }
        .check()
        .is_err());
        assert!(InversionConfig {
            step: 0.0,
            ..Default::default()
        }
        .check()
        .is_err());
        assert!(InversionConfig::default().check().is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn param_derivative_is_exact(seed in any::<u64>()) {
            let (grid, time, basis) = small();
            let traj = random_smooth_trajectory(&grid, &time, seed);
            let (f, q) = random_params(&grid, seed.wrapping_mul(3));
            let c = coeffs(0.2);
            let a = apply_model_operator(&f, &c, &traj, &basis).unwrap().residual();
            let b = apply_model_operator(&shifted_params(&f, &q, &grid, &time), &c, &traj, &basis).unwrap().residual();
            let d = frechet_param(&c, &traj, &q, &basis).unwrap().residual();
            let res: Vec<f64> = (0..a.len()).map(|i| b[i] - a[i] - d[i]).collect();
            prop_assert!(max_abs(&res) <= 1e-12 * (1.0 + max_abs(&d)));
        }

        #[test]
        fn state_derivative_is_linear(seed in any::<u64>(), s in -3.0f64..3.0) {
            let (grid, time, basis) = small();
            let traj = random_smooth_trajectory(&grid, &time, seed);
            let (f, _) = random_params(&grid, seed);
            let xi = random_state_tangent(&grid, &time, seed ^ 1);
            let c = coeffs(0.2);
            let a = frechet_state(&f, &c, &traj, &xi, &basis).unwrap().residual();
            let b = frechet_state(&f, &c, &traj, &xi.scaled(s), &basis).unwrap().residual();
            let res: Vec<f64> = (0..a.len()).map(|i| s * a[i] - b[i]).collect();
            prop_assert!(max_abs(&res) <= 1e-12 * (1.0 + max_abs(&b)));
        }
    }
}
