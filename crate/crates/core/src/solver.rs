//! Staggered semi-implicit time stepping for the ε-regularized and the
//! physical thermo-piezoelectric system, with the electric potential
//! eliminated through the effective stiffness and recovered each level.
//!
//! One step `n -> n+1`:
//! 1. momentum, implicit in `v` with Γ frozen at Θⁿ (plus the mixed
//!    `w = v_zz` unknown when ε > 0);
//! 2. displacement, `uⁿ⁺¹ = uⁿ + dt(ε uⁿ⁺¹_zz + vⁿ⁺¹)`;
//! 3. heat, lumped mass, implicit diffusion, explicit heating from vⁿ⁺¹ and
//!    the thermoelastic term split by sign so Θ stays nonnegative.

use serde::Serialize;
use thiserror::Error;

use crate::grid::{
    assemble_weighted_mass, assemble_weighted_stiffness, element_gradients, l2_norm, lumped_mass, CoupledTridiagonal,
    GridError, NodalField, SpaceTimeArray, SpatialGrid, TimeGrid, Tridiagonal,
};
use crate::materials::{Excitation, MaterialError, MaterialParams, PhysicalCoefficients};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("linear solve failed at step {step}: {source}")]
    LinearSolve { step: usize, source: GridError },
    #[error("non-finite {field} at step {step}, node {node}")]
    NonFinite {
        step: usize,
        field: &'static str,
        node: usize,
    },
    #[error(transparent)]
    Material(#[from] MaterialError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("invalid input: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitialData {
    pub u0: NodalField,
    /// Initial velocity `u_t(·, 0)`.
    pub u1: NodalField,
    pub theta0: NodalField,
}

impl InitialData {
    pub fn new(grid: &SpatialGrid, u0: Vec<f64>, u1: Vec<f64>, theta0: Vec<f64>) -> Result<Self, SolverError> {
        let u0 = NodalField::new(grid, u0)?;
        let u1 = NodalField::new(grid, u1)?;
        let theta0 = NodalField::new(grid, theta0)?;
        let last = grid.n_nodes() - 1;
        if u0[0] != 0.0 || u0[last] != 0.0 {
            return Err(SolverError::Invalid("u0 must vanish at both boundary nodes".into()));
        }
        if let Some(i) = theta0.iter().position(|t| *t < 0.0) {
            return Err(SolverError::Invalid(format!(
                "theta0 must be nonnegative, found {} at node {i}",
                theta0[i]
            )));
        }
        Ok(Self { u0, u1, theta0 })
    }

    pub fn from_fns(
        grid: &SpatialGrid,
        u0: impl Fn(f64) -> f64,
        u1: impl Fn(f64) -> f64,
        theta0: impl Fn(f64) -> f64,
    ) -> Result<Self, SolverError> {
        let z = grid.nodes();
        let mut a: Vec<f64> = z.iter().map(|x| u0(*x)).collect();
        let last = a.len() - 1;
        a[0] = 0.0;
        a[last] = 0.0;
        Self::new(
            grid,
            a,
            z.iter().map(|x| u1(*x)).collect(),
            z.iter().map(|x| theta0(*x)).collect(),
        )
    }

    pub fn zeros(grid: &SpatialGrid) -> Self {
        Self {
            u0: NodalField::zeros(grid),
            u1: NodalField::zeros(grid),
            theta0: NodalField::zeros(grid),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverConfig {
    /// ε ≥ 0; zero selects the physical system.
    pub epsilon: f64,
    pub time: TimeGrid,
    pub theta_floor_monitoring: bool,
}

impl SolverConfig {
    pub fn new(epsilon: f64, time: TimeGrid) -> Result<Self, SolverError> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(SolverError::Invalid(format!("epsilon must be >= 0, got {epsilon}")));
        }
        Ok(Self {
            epsilon,
            time,
            theta_floor_monitoring: true,
        })
    }

    /// Heuristic warnings that do not stop a run.
    pub fn warnings(&self, grid: &SpatialGrid) -> Vec<String> {
        let mut w = Vec::new();
        if self.time.dt() > grid.dz() {
            w.push(format!(
                "dt = {:e} exceeds dz = {:e}; waves may be under-resolved",
                self.time.dt(),
                grid.dz()
            ));
        }
        w
    }
}

/// Nodal state at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct StepState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    pub grid: SpatialGrid,
    pub time: TimeGrid,
    pub epsilon: f64,
    pub u: SpaceTimeArray,
    pub v: SpaceTimeArray,
    pub theta: SpaceTimeArray,
    pub phi0: SpaceTimeArray,
    pub excitation: Excitation,
    pub initial: InitialData,
    pub min_theta: f64,
    pub max_theta: f64,
}

impl StateTrajectory {
    pub fn state(&self, n: usize) -> StepState {
        StepState {
            u: self.u.row(n).to_vec(),
            v: self.v.row(n).to_vec(),
            theta: self.theta.row(n).to_vec(),
        }
    }

    /// Nodal lift `χ` at level `n`.
    pub fn chi(&self, n: usize) -> Vec<f64> {
        self.excitation.lift_level(&self.grid, n)
    }

    /// Recomputes φ⁰ at every level for the parameters `f`.
    pub fn recompute_potential(&mut self, f: &MaterialParams) -> Result<(), SolverError> {
        for n in 0..self.time.n_levels() {
            let chi = self.chi(n);
            let phi = solve_potential(&self.grid, f, n, &chi, self.u.row(n))?;
            self.phi0.row_mut(n).copy_from_slice(&phi);
        }
        Ok(())
    }

    /// Nonnegativity monitor: `min Θ ≥ -1e-8 (1 + max Θ)`.
    pub fn theta_nonnegative(&self) -> bool {
        self.min_theta >= -1e-8 * (1.0 + self.max_theta)
    }
}

/// Solves `∫ p3 φ⁰_z w_z = ∫ (p2 u_z − p3 χ_z) w_z` for φ⁰ with zero boundary values.
pub fn solve_potential(
    grid: &SpatialGrid,
    f: &MaterialParams,
    level: usize,
    chi: &[f64],
    u: &[f64],
) -> Result<Vec<f64>, SolverError> {
    grid.check_len(chi.len())?;
    grid.check_len(u.len())?;
    let nn = grid.n_nodes();
    let p2 = f.p2.level(level, nn);
    let p3 = f.p3.level(level, nn);
    if let Some(i) = p3.iter().position(|x| !(*x > 0.0)) {
        return Err(MaterialError::NonPositive {
            name: "p3",
            node: i,
            level,
            value: p3[i],
        }
        .into());
    }
    let k2 = assemble_weighted_stiffness(grid, &p2)?;
    let mut k3 = assemble_weighted_stiffness(grid, &p3)?;
    let mut rhs: Vec<f64> = k2.mul_vec(u).iter().zip(k3.mul_vec(chi)).map(|(a, b)| a - b).collect();
    let last = nn - 1;
    k3.set_identity_row(0);
    k3.set_identity_row(last);
    rhs[0] = 0.0;
    rhs[last] = 0.0;
    k3.solve(&rhs)
        .map_err(|e| SolverError::LinearSolve { step: level, source: e })
}

/// Load vector of `β∫Θ ψ_z` for P1 Θ: `β(Θ_{i−1} − Θ_{i+1})/2` with one-sided ends.
pub fn thermal_load(beta: f64, theta: &[f64]) -> Vec<f64> {
    let n = theta.len();
    (0..n)
        .map(|i| {
            let left = if i > 0 { theta[i - 1] } else { theta[i] };
            let right = if i + 1 < n { theta[i + 1] } else { theta[i] };
            0.5 * beta * (left - right)
        })
        .collect()
}

fn zero_row(m: &mut Tridiagonal, i: usize) {
    m.sub[i] = 0.0;
    m.main[i] = 0.0;
    m.sup[i] = 0.0;
}

fn dirichlet(m: &mut Tridiagonal, rhs: &mut [f64]) {
    let last = m.dim() - 1;
    for i in [0, last] {
        m.set_identity_row(i);
        rhs[i] = 0.0;
    }
}

/// One time step for either system; `epsilon == 0` selects the physical one.
pub struct Stepper<'a> {
    pub grid: &'a SpatialGrid,
    pub coeffs: &'a PhysicalCoefficients,
    pub f: &'a MaterialParams,
    pub config: &'a SolverConfig,
}

impl Stepper<'_> {
    pub fn step(&self, n: usize, s: &StepState) -> Result<StepState, SolverError> {
        let grid = self.grid;
        let nn = grid.n_nodes();
        let last = nn - 1;
        let dt = self.config.time.dt();
        let eps = self.config.epsilon;
        let m = n + 1;
        let fail = |e: GridError| SolverError::LinearSolve { step: m, source: e };

        let rho = self.coeffs.rho.level(m, nn);
        let p = self.f.effective_stiffness_level(m, nn);
        let gamma: Vec<f64> = s.theta.iter().map(|t| self.coeffs.gamma_at(self.f.p1, *t)).collect();
        let m_rho = assemble_weighted_mass(grid, &rho)?;
        let k_gamma = assemble_weighted_stiffness(grid, &gamma)?;
        let k_p = assemble_weighted_stiffness(grid, &p)?;

        let mut a11 = m_rho.scaled(1.0 / dt).add_scaled(1.0, &k_gamma).add_scaled(dt, &k_p);
        let ku = k_p.mul_vec(&s.u);
        let mut rhs: Vec<f64> = m_rho
            .mul_vec(&s.v)
            .iter()
            .zip(&ku)
            .zip(thermal_load(self.coeffs.beta, &s.theta))
            .map(|((a, b), c)| a / dt - b + c)
            .collect();
        dirichlet(&mut a11, &mut rhs);

        let v = if eps == 0.0 {
            a11.solve(&rhs).map_err(fail)?
        } else {
            let one = vec![1.0; nn];
            let k = assemble_weighted_stiffness(grid, &one)?;
            let mass = assemble_weighted_mass(grid, &one)?;
            let mut a12 = k.scaled(-eps);
            let mut a21 = k;
            let mut a22 = mass;
            let mut g = vec![0.0; nn];
            for i in [0, last] {
                zero_row(&mut a12, i);
                zero_row(&mut a21, i);
            }
            dirichlet(&mut a22, &mut g);
            CoupledTridiagonal { a11, a12, a21, a22 }
                .solve(&rhs, &g)
                .map_err(fail)?
                .0
        };

        let predicted: Vec<f64> = s.u.iter().zip(&v).map(|(a, b)| a + dt * b).collect();
        let u = if eps == 0.0 {
            predicted
        } else {
            let one = vec![1.0; nn];
            let mass = assemble_weighted_mass(grid, &one)?;
            let mut lhs = mass.add_scaled(dt * eps, &assemble_weighted_stiffness(grid, &one)?);
            let mut r = mass.mul_vec(&predicted);
            dirichlet(&mut lhs, &mut r);
            lhs.solve(&r).map_err(fail)?
        };

        let theta = self.heat_step(m, s, &gamma, &v).map_err(|e| match e {
            SolverError::Grid(g) => fail(g),
            other => other,
        })?;

        for (field, vals) in [("u", &u), ("v", &v), ("theta", &theta)] {
            if let Some(node) = vals.iter().position(|x| !x.is_finite()) {
                return Err(SolverError::NonFinite { step: m, field, node });
            }
        }
        Ok(StepState { u, v, theta })
    }

    fn heat_step(&self, m: usize, s: &StepState, gamma: &[f64], v: &[f64]) -> Result<Vec<f64>, SolverError> {
        let grid = self.grid;
        let nn = grid.n_nodes();
        let dz = grid.dz();
        let dt = self.config.time.dt();
        let beta = self.coeffs.beta;

        let b = self.coeffs.heat_capacity_level(m, nn);
        let kk = self.coeffs.k.level(m, nn);
        let mb = lumped_mass(grid, &b)?;
        let mut lhs = assemble_weighted_stiffness(grid, &kk)?;
        let mut rhs: Vec<f64> = mb.iter().zip(&s.theta).map(|(a, t)| a * t / dt).collect();

        let mut s_plus = vec![0.0; nn];
        let mut s_minus = vec![0.0; nn];
        for (e, g) in element_gradients(grid, v).into_iter().enumerate() {
            let (pos, neg) = (g.max(0.0) * dz * 0.5, (-g).max(0.0) * dz * 0.5);
            let heat = g * g * dz / 6.0;
            for (i, j) in [(e, e + 1), (e + 1, e)] {
                s_plus[i] += pos;
                s_minus[i] += neg;
                rhs[i] += heat * (2.0 * gamma[i] + gamma[j]);
            }
        }
        for i in 0..nn {
            lhs.main[i] += mb[i] / dt + beta * s_plus[i];
            rhs[i] += beta * s_minus[i] * s.theta[i];
        }
        Ok(lhs.solve(&rhs)?)
    }
}

pub fn step_regularized(
    grid: &SpatialGrid,
    n: usize,
    state: &StepState,
    coeffs: &PhysicalCoefficients,
    f: &MaterialParams,
    config: &SolverConfig,
) -> Result<StepState, SolverError> {
    if !(config.epsilon > 0.0) {
        return Err(SolverError::Invalid("step_regularized needs epsilon > 0".into()));
    }
    Stepper {
        grid,
        coeffs,
        f,
        config,
    }
    .step(n, state)
}

pub fn step_physical(
    grid: &SpatialGrid,
    n: usize,
    state: &StepState,
    coeffs: &PhysicalCoefficients,
    f: &MaterialParams,
    config: &SolverConfig,
) -> Result<StepState, SolverError> {
    if config.epsilon != 0.0 {
        return Err(SolverError::Invalid("step_physical needs epsilon = 0".into()));
    }
    Stepper {
        grid,
        coeffs,
        f,
        config,
    }
    .step(n, state)
}

pub fn run_forward(
    grid: &SpatialGrid,
    init: &InitialData,
    coeffs: &PhysicalCoefficients,
    f: &MaterialParams,
    excitation: &Excitation,
    config: &SolverConfig,
) -> Result<StateTrajectory, SolverError> {
    run_forward_with_hook(grid, init, coeffs, f, excitation, config, |_, _| {})
}

/// As [`run_forward`], calling `hook(level, state)` after every level.
pub fn run_forward_with_hook(
    grid: &SpatialGrid,
    init: &InitialData,
    coeffs: &PhysicalCoefficients,
    f: &MaterialParams,
    excitation: &Excitation,
    config: &SolverConfig,
    mut hook: impl FnMut(usize, &StepState),
) -> Result<StateTrajectory, SolverError> {
    let time = config.time;
    let nn = grid.n_nodes();
    let levels = time.n_levels();
    coeffs.check(grid, &time)?;
    f.check_shape(grid, &time)?;
    if excitation.values.len() != levels {
        return Err(SolverError::Invalid(format!(
            "excitation has {} samples, expected {levels}",
            excitation.values.len()
        )));
    }
    for field in [&init.u0, &init.u1, &init.theta0] {
        grid.check_len(field.len())?;
    }

    let mut u = SpaceTimeArray::zeros(nn, levels);
    let mut v = SpaceTimeArray::zeros(nn, levels);
    let mut theta = SpaceTimeArray::zeros(nn, levels);
    let mut phi0 = SpaceTimeArray::zeros(nn, levels);

    let mut state = StepState {
        u: init.u0.to_vec(),
        v: init.u1.to_vec(),
        theta: init.theta0.to_vec(),
    };
    let stepper = Stepper {
        grid,
        coeffs,
        f,
        config,
    };
    for n in 0..levels {
        if n > 0 {
            state = stepper.step(n - 1, &state)?;
        }
        u.row_mut(n).copy_from_slice(&state.u);
        v.row_mut(n).copy_from_slice(&state.v);
        theta.row_mut(n).copy_from_slice(&state.theta);
        let chi = excitation.lift_level(grid, n);
        let phi = solve_potential(grid, f, n, &chi, &state.u)?;
        phi0.row_mut(n).copy_from_slice(&phi);
        hook(n, &state);
    }

    let (min_theta, max_theta) = (theta.min(), theta.max());
    Ok(StateTrajectory {
        grid: *grid,
        time,
        epsilon: config.epsilon,
        u,
        v,
        theta,
        phi0,
        excitation: excitation.clone(),
        initial: init.clone(),
        min_theta,
        max_theta,
    })
}

/// Smooths initial data by four implicit diffusion substeps with lumped mass.
/// `strength` is the total diffusion time in units of `h²`; zero is the identity.
/// Θ keeps its integral and sign, u0 and u1 keep zero boundary values.
pub fn mollify_initial_data(grid: &SpatialGrid, init: &InitialData, strength: f64) -> InitialData {
    if !(strength > 0.0) {
        return init.clone();
    }
    const SUBSTEPS: usize = 4;
    let nn = grid.n_nodes();
    let one = vec![1.0; nn];
    let ml = lumped_mass(grid, &one).expect("grid-sized weight");
    let sigma = strength * grid.length() * grid.length() / SUBSTEPS as f64;
    let mut base = assemble_weighted_stiffness(grid, &one)
        .expect("grid-sized weight")
        .scaled(sigma);
    for (d, m) in base.main.iter_mut().zip(&ml) {
        *d += m;
    }
    let smooth = |x: &[f64], clamp_ends: bool| -> Vec<f64> {
        let mut lhs = base.clone();
        let mut cur = x.to_vec();
        if clamp_ends {
            let mut dummy = vec![0.0; nn];
            dirichlet(&mut lhs, &mut dummy);
        }
        for _ in 0..SUBSTEPS {
            let mut rhs: Vec<f64> = cur.iter().zip(&ml).map(|(a, m)| a * m).collect();
            if clamp_ends {
                rhs[0] = 0.0;
                rhs[nn - 1] = 0.0;
            }
            cur = lhs.solve(&rhs).expect("diagonally dominant system");
        }
        cur
    };
    InitialData {
        u0: NodalField(smooth(&init.u0, true)),
        u1: NodalField(smooth(&init.u1, true)),
        theta0: NodalField(smooth(&init.theta0, false)),
    }
}

/// `L²(Ω)` norm of a state component at each level.
pub fn level_norms(grid: &SpatialGrid, a: &SpaceTimeArray) -> Vec<f64> {
    (0..a.n_levels())
        .map(|n| l2_norm(grid, a.row(n)).unwrap_or(f64::NAN))
        .collect()
}
