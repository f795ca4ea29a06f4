//! Runtime monitors: the energy identity of the regularized system, the
//! a-priori functionals, weak-form residuals against a finite family of
//! smooth test functions, Steklov averaging and the ε-convergence study.

use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{
    assemble_weighted_mass, assemble_weighted_stiffness, element_gradients, gauss_layout, gradients_at_gauss,
    integrate_product, space_time_distance, values_at_gauss, GridError, SpaceTimeArray, SpatialGrid, TimeGrid,
    Tridiagonal, GAUSS3_POINTS, GAUSS3_WEIGHTS,
};
use crate::materials::{Excitation, MaterialParams, PhysicalCoefficients};
use crate::solver::{run_forward, thermal_load, InitialData, SolverConfig, SolverError, StateTrajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("grid or time mismatch: {0}")]
    Mismatch(String),
    #[error("test function {index} does not vanish at the end time")]
    Support { index: usize },
    #[error("averaging width must be positive, got {0}")]
    BadWidth(f64),
    #[error("epsilon list must hold at least two positive, non-increasing values")]
    BadEpsilonList,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// `(lo, hi, span)` for centered differences inside and one-sided ones at the ends.
fn stencil(n: usize, levels: usize, dt: f64) -> (usize, usize, f64) {
    let last = levels - 1;
    let (lo, hi) = if last == 0 {
        (0, 0)
    } else if n == 0 {
        (0, 1)
    } else if n == last {
        (last - 1, last)
    } else {
        (n - 1, n + 1)
    };
    (lo, hi, ((hi - lo) as f64 * dt).max(f64::MIN_POSITIVE))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn quad_form(m: &Tridiagonal, x: &[f64]) -> f64 {
    dot(x, &m.mul_vec(x))
}

/// Trapezoid rule in time over per-level values.
fn time_integral(time: &TimeGrid, vals: &[f64]) -> f64 {
    dot(&time.trapezoid_weights(), vals)
}

/// Discrete second derivative `s` with `M s = −K x` on interior rows and `s = 0` at the ends.
fn discrete_second_derivative(grid: &SpatialGrid, x: &[f64]) -> Result<Vec<f64>, GridError> {
    let one = vec![1.0; grid.n_nodes()];
    let mut m = assemble_weighted_mass(grid, &one)?;
    let k = assemble_weighted_stiffness(grid, &one)?;
    let mut rhs: Vec<f64> = k.mul_vec(x).iter().map(|v| -v).collect();
    let last = grid.n_nodes() - 1;
    for i in [0, last] {
        m.set_identity_row(i);
        rhs[i] = 0.0;
    }
    m.solve(&rhs)
}

/// Terms of the energy identity per time level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyReport {
    pub times: Vec<f64>,
    /// `½ d/dt ∫ρv²`
    pub kinetic_rate: Vec<f64>,
    /// `½ d/dt ∫p u_z²`
    pub elastic_rate: Vec<f64>,
    /// `∫Γ(Θ) v_z²`
    pub dissipation: Vec<f64>,
    /// `∫v_z²`, for the lower bound `dissipation ≥ c_Γ ∫v_z²`
    pub vz2: Vec<f64>,
    /// `ε∫v_zz²`
    pub eps_vzz: Vec<f64>,
    /// `ε∫p u_zz²`
    pub eps_puzz: Vec<f64>,
    /// `ε∫p_z u_z u_zz`
    pub eps_cross: Vec<f64>,
    /// `β∫Θ v_z`
    pub thermal: Vec<f64>,
    /// `½∫ρ_t v²`
    pub rho_t_term: Vec<f64>,
    /// `½∫p_t u_z²`
    pub p_t_term: Vec<f64>,
    pub residual: Vec<f64>,
    /// Time-L² norm of the residual.
    pub aggregate_residual: f64,
    pub max_abs_residual: f64,
    pub gamma_min: f64,
}

impl EnergyReport {
    pub fn dissipation_nonnegative(&self) -> bool {
        self.dissipation.iter().all(|d| *d >= 0.0)
    }

    /// `∫Γ v_z² ≥ c_Γ ∫v_z²` at every level, up to round-off.
    pub fn dissipation_bounded_below(&self) -> bool {
        self.dissipation
            .iter()
            .zip(&self.vz2)
            .all(|(d, v)| *d >= self.gamma_min * v * (1.0 - 1e-12))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "time,kinetic_rate,elastic_rate,dissipation,eps_vzz,eps_puzz,eps_cross,thermal,rho_t_term,p_t_term,residual\n",
        );
        for n in 0..self.times.len() {
            s.push_str(&format!(
                "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                self.times[n],
                self.kinetic_rate[n],
                self.elastic_rate[n],
                self.dissipation[n],
                self.eps_vzz[n],
                self.eps_puzz[n],
                self.eps_cross[n],
                self.thermal[n],
                self.rho_t_term[n],
                self.p_t_term[n],
                self.residual[n]
            ));
        }
        s
    }
}

pub fn energy_identity_residual(
    traj: &StateTrajectory,
    coeffs: &PhysicalCoefficients,
    f: &MaterialParams,
) -> Result<EnergyReport, DiagnosticsError> {
    let grid = &traj.grid;
    let time = &traj.time;
    let nn = grid.n_nodes();
    let levels = time.n_levels();
    let eps = traj.epsilon;
    let dt = time.dt();
    let one = vec![1.0; nn];
    let mass = assemble_weighted_mass(grid, &one)?;

    let mut kinetic = Vec::with_capacity(levels);
    let mut elastic = Vec::with_capacity(levels);
    for n in 0..levels {
        let m_rho = assemble_weighted_mass(grid, &coeffs.rho.level(n, nn))?;
        let k_p = assemble_weighted_stiffness(grid, &f.effective_stiffness_level(n, nn))?;
        kinetic.push(0.5 * quad_form(&m_rho, traj.v.row(n)));
        elastic.push(0.5 * quad_form(&k_p, traj.u.row(n)));
    }

    let mut r = EnergyReport {
        times: time.times(),
        kinetic_rate: vec![0.0; levels],
        elastic_rate: vec![0.0; levels],
        dissipation: vec![0.0; levels],
        vz2: vec![0.0; levels],
        eps_vzz: vec![0.0; levels],
        eps_puzz: vec![0.0; levels],
        eps_cross: vec![0.0; levels],
        thermal: vec![0.0; levels],
        rho_t_term: vec![0.0; levels],
        p_t_term: vec![0.0; levels],
        residual: vec![0.0; levels],
        aggregate_residual: 0.0,
        max_abs_residual: 0.0,
        gamma_min: coeffs.gamma_min,
    };

    for n in 0..levels {
        let (u, v, theta) = (traj.u.row(n), traj.v.row(n), traj.theta.row(n));
        let (lo, hi, span) = stencil(n, levels, dt);
        r.kinetic_rate[n] = (kinetic[hi] - kinetic[lo]) / span;
        r.elastic_rate[n] = (elastic[hi] - elastic[lo]) / span;

        let gamma: Vec<f64> = theta.iter().map(|t| coeffs.gamma_at(f.p1, *t)).collect();
        r.dissipation[n] = quad_form(&assemble_weighted_stiffness(grid, &gamma)?, v);
        r.vz2[n] = quad_form(&assemble_weighted_stiffness(grid, &one)?, v);
        r.thermal[n] = dot(&thermal_load(coeffs.beta, theta), v);

        let rho_t = coeffs.rho.time_derivative(n, time, nn);
        r.rho_t_term[n] = 0.5 * quad_form(&assemble_weighted_mass(grid, &rho_t)?, v);
        let (p_lo, p_hi) = (f.effective_stiffness_level(lo, nn), f.effective_stiffness_level(hi, nn));
        let p_t: Vec<f64> = p_hi.iter().zip(&p_lo).map(|(a, b)| (a - b) / span).collect();
        r.p_t_term[n] = 0.5 * quad_form(&assemble_weighted_stiffness(grid, &p_t)?, u);

        if eps > 0.0 {
            let p = f.effective_stiffness_level(n, nn);
            let w = discrete_second_derivative(grid, v)?;
            let s = discrete_second_derivative(grid, u)?;
            let m_p = assemble_weighted_mass(grid, &p)?;
            let k_p = assemble_weighted_stiffness(grid, &p)?;
            let puzz = quad_form(&m_p, &s);
            r.eps_vzz[n] = eps * quad_form(&mass, &w);
            r.eps_puzz[n] = eps * puzz;
            r.eps_cross[n] = eps * (-dot(&k_p.mul_vec(u), &s) - puzz);
        }

        r.residual[n] =
            r.kinetic_rate[n] + r.elastic_rate[n] + r.dissipation[n] + r.eps_vzz[n] + r.eps_puzz[n] + r.eps_cross[n]
                - r.thermal[n]
                - r.rho_t_term[n]
                - r.p_t_term[n];
    }
    let sq: Vec<f64> = r.residual.iter().map(|x| x * x).collect();
    r.aggregate_residual = time_integral(time, &sq).max(0.0).sqrt();
    r.max_abs_residual = r.residual.iter().fold(0.0, |m, x| m.max(x.abs()));
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentEntry {
    pub order: f64,
    /// Space-time integral.
    pub value: f64,
    /// `max_t / value at t = 0` of the spatial integral; 1 when the initial value is zero.
    pub growth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GronwallFit {
    /// Least-squares slope of `log y(t)`.
    pub rate: f64,
    pub intercept: f64,
    /// RMS residual of the fit in log space.
    pub rms_log_residual: f64,
    /// `y(t) ≤ y(0) exp(max(rate, 0)·T + 2·rms)` at every level.
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AprioriBoundReport {
    pub sup_v2: f64,
    pub sup_u2: f64,
    pub sup_uz2: f64,
    pub sup_theta: f64,
    /// `ε∬v_zz²`
    pub eps_vzz_integral: f64,
    /// `ε∬u_zz²`
    pub eps_uzz_integral: f64,
    /// `∬(Θ+1)^q`
    pub theta_moments: Vec<MomentEntry>,
    /// `∬|Θ_z|^r`
    pub gradient_moments: Vec<MomentEntry>,
    /// `∬(Θ+1)^{p−2} Θ_z²` with `p = 0.5`
    pub weighted_gradient: f64,
    /// `∬v_z²`
    pub vz2_integral: f64,
    /// `y(t) = ½∫ρv² + ½∫u² + ½∫p u_z² + ∫bΘ`
    pub energy: Vec<f64>,
    pub gronwall: GronwallFit,
    /// Set when the q = 2.9 moment grows faster in time than the q = 1.5 one.
    pub high_moment_flag: bool,
}

impl AprioriBoundReport {
    pub fn theta_moment(&self, q: f64) -> Option<f64> {
        self.theta_moments.iter().find(|m| m.order == q).map(|m| m.value)
    }

    pub fn all_finite_nonnegative(&self) -> bool {
        let mut vals = vec![
            self.sup_v2,
            self.sup_u2,
            self.sup_uz2,
            self.eps_vzz_integral,
            self.eps_uzz_integral,
            self.weighted_gradient,
            self.vz2_integral,
        ];
        vals.extend(self.theta_moments.iter().map(|m| m.value));
        vals.extend(self.gradient_moments.iter().map(|m| m.value));
        vals.iter().all(|v| v.is_finite() && *v >= 0.0) && self.sup_theta.is_finite()
    }
}

pub const THETA_MOMENT_ORDERS: [f64; 4] = [1.5, 2.0, 2.5, 2.9];
pub const GRADIENT_MOMENT_ORDERS: [f64; 3] = [1.0, 1.25, 1.4];

fn moment(time: &TimeGrid, per_level: &[f64], order: f64) -> MomentEntry {
    let max = per_level.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    MomentEntry {
        order,
        value: time_integral(time, per_level),
        growth: if per_level[0] > 0.0 { max / per_level[0] } else { 1.0 },
    }
}

fn gronwall_fit(time: &TimeGrid, y: &[f64]) -> GronwallFit {
    if y.iter().any(|v| !(*v > 0.0)) {
        let zero = y.iter().all(|v| *v == 0.0);
        return GronwallFit {
            rate: 0.0,
            intercept: 0.0,
            rms_log_residual: 0.0,
            holds: zero,
        };
    }
    let t = time.times();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = t.len() as f64;
    let (mt, my) = (t.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxx: f64 = t.iter().map(|x| (x - mt) * (x - mt)).sum();
    let sxy: f64 = t.iter().zip(&ly).map(|(x, l)| (x - mt) * (l - my)).sum();
    let rate = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - rate * mt;
    let rms = (t
        .iter()
        .zip(&ly)
        .map(|(x, l)| (l - intercept - rate * x).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let bound = y[0] * (rate.max(0.0) * time.end() + 2.0 * rms).exp() * (1.0 + 1e-12);
    GronwallFit {
        rate,
        intercept,
        rms_log_residual: rms,
        holds: y.iter().all(|v| *v <= bound),
    }
}

pub fn apriori_monitor(
    traj: &StateTrajectory,
    coeffs: &PhysicalCoefficients,
    f: &MaterialParams,
) -> Result<AprioriBoundReport, DiagnosticsError> {
    let grid = &traj.grid;
    let time = &traj.time;
    let nn = grid.n_nodes();
    let levels = time.n_levels();
    let eps = traj.epsilon;
    let (_, gw) = gauss_layout(grid);
    let gsum = |vals: &[f64]| dot(&gw, vals);

    let mut v2 = vec![0.0; levels];
    let mut u2 = vec![0.0; levels];
    let mut uz2 = vec![0.0; levels];
    let mut th = vec![0.0; levels];
    let mut vzz = vec![0.0; levels];
    let mut uzz = vec![0.0; levels];
    let mut vz2 = vec![0.0; levels];
    let mut mixed = vec![0.0; levels];
    let mut energy = vec![0.0; levels];
    let mut tm = vec![vec![0.0; levels]; THETA_MOMENT_ORDERS.len()];
    let mut gm = vec![vec![0.0; levels]; GRADIENT_MOMENT_ORDERS.len()];

    for n in 0..levels {
        let (u, v, theta) = (traj.u.row(n), traj.v.row(n), traj.theta.row(n));
        let (ug, vg, tg) = (values_at_gauss(u), values_at_gauss(v), values_at_gauss(theta));
        let (uzg, vzg, tzg) = (
            gradients_at_gauss(grid, u),
            gradients_at_gauss(grid, v),
            gradients_at_gauss(grid, theta),
        );
        let sq = |a: &[f64]| a.iter().map(|x| x * x).collect::<Vec<_>>();
        v2[n] = gsum(&sq(&vg));
        u2[n] = gsum(&sq(&ug));
        uz2[n] = gsum(&sq(&uzg));
        vz2[n] = gsum(&sq(&vzg));
        th[n] = gsum(&tg);
        for (k, q) in THETA_MOMENT_ORDERS.iter().enumerate() {
            tm[k][n] = gsum(&tg.iter().map(|t| (t + 1.0).max(0.0).powf(*q)).collect::<Vec<_>>());
        }
        for (k, r) in GRADIENT_MOMENT_ORDERS.iter().enumerate() {
            gm[k][n] = gsum(&tzg.iter().map(|g| g.abs().powf(*r)).collect::<Vec<_>>());
        }
        mixed[n] = gsum(
            &tg.iter()
                .zip(&tzg)
                .map(|(t, g)| (t + 1.0).max(f64::MIN_POSITIVE).powf(-1.5) * g * g)
                .collect::<Vec<_>>(),
        );
        if eps > 0.0 {
            let one = vec![1.0; nn];
            let mass = assemble_weighted_mass(grid, &one)?;
            vzz[n] = quad_form(&mass, &discrete_second_derivative(grid, v)?);
            uzz[n] = quad_form(&mass, &discrete_second_derivative(grid, u)?);
        }
        let rho = values_at_gauss(&coeffs.rho.level(n, nn));
        let p = values_at_gauss(&f.effective_stiffness_level(n, nn));
        let b = values_at_gauss(&coeffs.heat_capacity_level(n, nn));
        energy[n] = (0..gw.len())
            .map(|g| {
                gw[g]
                    * (0.5 * rho[g] * vg[g] * vg[g] + 0.5 * ug[g] * ug[g] + 0.5 * p[g] * uzg[g] * uzg[g] + b[g] * tg[g])
            })
            .sum();
    }

    let sup = |a: &[f64]| a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let theta_moments: Vec<MomentEntry> = THETA_MOMENT_ORDERS
        .iter()
        .zip(&tm)
        .map(|(q, vals)| moment(time, vals, *q))
        .collect();
    let gradient_moments = GRADIENT_MOMENT_ORDERS
        .iter()
        .zip(&gm)
        .map(|(r, vals)| moment(time, vals, *r))
        .collect();
    let high_moment_flag = theta_moments[3].growth > theta_moments[0].growth;
    Ok(AprioriBoundReport {
        sup_v2: sup(&v2),
        sup_u2: sup(&u2),
        sup_uz2: sup(&uz2),
        sup_theta: sup(&th),
        eps_vzz_integral: eps * time_integral(time, &vzz),
        eps_uzz_integral: eps * time_integral(time, &uzz),
        theta_moments,
        gradient_moments,
        weighted_gradient: time_integral(time, &mixed),
        vz2_integral: time_integral(time, &vz2),
        gronwall: gronwall_fit(time, &energy),
        energy,
        high_moment_flag,
    })
}

/// Spatial factor of a separable test function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceMode {
    /// `sin(kπz/h)`, vanishing at both ends.
    Sine(u32),
    /// `cos(kπz/h)`, with vanishing normal derivative.
    Cosine(u32),
}

impl SpaceMode {
    pub fn value(&self, z: f64, h: f64) -> f64 {
        match *self {
            Self::Sine(k) => (k as f64 * std::f64::consts::PI * z / h).sin(),
            Self::Cosine(k) => (k as f64 * std::f64::consts::PI * z / h).cos(),
        }
    }

    pub fn derivative(&self, z: f64, h: f64) -> f64 {
        match *self {
            Self::Sine(k) => {
                let a = k as f64 * std::f64::consts::PI / h;
                a * (a * z).cos()
            }
            Self::Cosine(k) => {
                let a = k as f64 * std::f64::consts::PI / h;
                -a * (a * z).sin()
            }
        }
    }
}

/// `W(t) = (1 − t/T)^power (1 + slope·t/T)`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub power: i32,
    pub slope: f64,
}

impl TimeWindow {
    pub fn value(&self, t: f64, end: f64) -> f64 {
        let s = t / end;
        (1.0 - s).powi(self.power) * (1.0 + self.slope * s)
    }

    pub fn derivative(&self, t: f64, end: f64) -> f64 {
        let s = t / end;
        let m = self.power;
        let lead = if m == 0 {
            0.0
        } else {
            -(m as f64) * (1.0 - s).powi(m - 1) * (1.0 + self.slope * s)
        };
        (lead + (1.0 - s).powi(m) * self.slope) / end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparableTest {
    pub space: SpaceMode,
    pub window: TimeWindow,
    pub scale: f64,
}

impl SeparableTest {
    pub fn value(&self, z: f64, t: f64, h: f64, end: f64) -> f64 {
        self.scale * self.space.value(z, h) * self.window.value(t, end)
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            scale: self.scale * a,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    Sine,
    Cosine,
}

/// Finite family of smooth space-time test functions vanishing at `t = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunctionFamily {
    pub members: Vec<SeparableTest>,
}

impl TestFunctionFamily {
    /// Seeded random modes `1..=max_mode` (`0..=max_mode` for cosines), window
    /// powers in `{2, 3, 4}` and slopes in `[−0.5, 0.5]`.
    pub fn random(n: usize, seed: u64, kind: SpaceKind, max_mode: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let members = (0..n)
            .map(|_| {
                let space = match kind {
                    SpaceKind::Sine => SpaceMode::Sine(rng.gen_range(1..=max_mode.max(1))),
                    SpaceKind::Cosine => SpaceMode::Cosine(rng.gen_range(0..=max_mode)),
                };
                SeparableTest {
                    space,
                    window: TimeWindow {
                        power: rng.gen_range(2..=4),
                        slope: rng.gen_range(-0.5..=0.5),
                    },
                    scale: 1.0,
                }
            })
            .collect();
        Self { members }
    }

    pub fn check_support(&self) -> Result<(), DiagnosticsError> {
        match self.members.iter().position(|m| m.window.power < 1) {
            Some(index) => Err(DiagnosticsError::Support { index }),
            None => Ok(()),
        }
    }
}

/// Integrand densities of one row of a weak form on one time interval,
/// sampled at the Gauss points of [`gauss_layout`]. The pairing with
/// `φ = S(z)W(t)` is `∫∫ −a φ_t + b φ + c φ_z`; empty vectors mean zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IntervalDensities {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

/// One weak-form row: densities per interval `(t_n, t_{n+1})` plus an
/// initial-time density paired with `φ(·, 0)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RowIntegrand {
    pub intervals: Vec<IntervalDensities>,
    pub initial: Vec<f64>,
}

/// Precomputed Gauss-point samples of a test function's spatial factor.
pub struct SpatialSamples {
    pub s: Vec<f64>,
    pub ds: Vec<f64>,
}

pub fn spatial_samples(grid: &SpatialGrid, mode: SpaceMode) -> SpatialSamples {
    let (z, w) = gauss_layout(grid);
    let h = grid.length();
    SpatialSamples {
        s: z.iter().zip(&w).map(|(z, w)| w * mode.value(*z, h)).collect(),
        ds: z.iter().zip(&w).map(|(z, w)| w * mode.derivative(*z, h)).collect(),
    }
}

/// `∫ W` over `(t_n, t_{n+1})` by three-point Gauss (exact for the window polynomials).
pub fn window_integrals(time: &TimeGrid, window: TimeWindow) -> Vec<f64> {
    let dt = time.dt();
    (0..time.n_step())
        .map(|n| {
            let t0 = time.time(n);
            GAUSS3_POINTS
                .iter()
                .zip(GAUSS3_WEIGHTS)
                .map(|(s, w)| w * dt * window.value(t0 + s * dt, time.end()))
                .sum()
        })
        .collect()
}

/// Pairs a row integrand with `scale·S(z)W(t)`.
pub fn pair_row(time: &TimeGrid, row: &RowIntegrand, samples: &SpatialSamples, test: &SeparableTest) -> f64 {
    let end = time.end();
    let iw = window_integrals(time, test.window);
    let mut total = 0.0;
    for (n, d) in row.intervals.iter().enumerate() {
        let dw = test.window.value(time.time(n + 1), end) - test.window.value(time.time(n), end);
        if !d.a.is_empty() {
            total -= dw * dot(&d.a, &samples.s);
        }
        let mut inner = 0.0;
        if !d.b.is_empty() {
            inner += dot(&d.b, &samples.s);
        }
        if !d.c.is_empty() {
            inner += dot(&d.c, &samples.ds);
        }
        total += iw[n] * inner;
    }
    if !row.initial.is_empty() {
        total += test.window.value(0.0, end) * dot(&row.initial, &samples.s);
    }
    test.scale * total
}

/// `‖φ‖ + ‖φ_t‖ + ‖φ_z‖` in `L²(Ω × (0,T))`.
pub fn test_norm(grid: &SpatialGrid, time: &TimeGrid, test: &SeparableTest) -> f64 {
    let (z, w) = gauss_layout(grid);
    let h = grid.length();
    let s2: f64 = z.iter().zip(&w).map(|(z, w)| w * test.space.value(*z, h).powi(2)).sum();
    let ds2: f64 = z
        .iter()
        .zip(&w)
        .map(|(z, w)| w * test.space.derivative(*z, h).powi(2))
        .sum();
    let dt = time.dt();
    let end = time.end();
    let (mut w2, mut dw2) = (0.0, 0.0);
    for n in 0..time.n_step() {
        for (s, g) in GAUSS3_POINTS.iter().zip(GAUSS3_WEIGHTS) {
            let t = time.time(n) + s * dt;
            w2 += g * dt * test.window.value(t, end).powi(2);
            dw2 += g * dt * test.window.derivative(t, end).powi(2);
        }
    }
    test.scale.abs() * ((s2 * w2).sqrt() + (s2 * dw2).sqrt() + (ds2 * w2).sqrt())
}

/// Per-interval kinematic quantities of a trajectory at Gauss points, with
/// the state on `(t_n, t_{n+1})` taken at level `n+1`.
pub struct IntervalKinematics {
    pub u_z: Vec<f64>,
    pub u_t: Vec<f64>,
    pub u_zt: Vec<f64>,
    pub theta: Vec<f64>,
    pub theta_z: Vec<f64>,
}

pub fn interval_kinematics(
    grid: &SpatialGrid,
    dt: f64,
    u: &SpaceTimeArray,
    theta: &SpaceTimeArray,
    n: usize,
) -> IntervalKinematics {
    let (u1, u0) = (u.row(n + 1), u.row(n));
    let ut: Vec<f64> = u1.iter().zip(u0).map(|(a, b)| (a - b) / dt).collect();
    IntervalKinematics {
        u_z: gradients_at_gauss(grid, u1),
        u_t: values_at_gauss(&ut),
        u_zt: gradients_at_gauss(grid, &ut),
        theta: values_at_gauss(theta.row(n + 1)),
        theta_z: gradients_at_gauss(grid, theta.row(n + 1)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeakResidualEntry {
    pub index: usize,
    pub momentum: f64,
    pub heat: f64,
    pub momentum_normalized: f64,
    pub heat_normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeakResidualReport {
    pub entries: Vec<WeakResidualEntry>,
    pub max_momentum: f64,
    pub max_heat: f64,
    pub max_normalized: f64,
}

impl WeakResidualReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,momentum,heat,momentum_normalized,heat_normalized\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                e.index, e.momentum, e.heat, e.momentum_normalized, e.heat_normalized
            ));
        }
        s
    }
}

/// Weak-form integrands of the physical system: the momentum row for
/// boundary-vanishing tests and the heat row for Neumann tests.
pub fn weak_integrands(
    traj: &StateTrajectory,
    coeffs: &PhysicalCoefficients,
    f: &MaterialParams,
) -> (RowIntegrand, RowIntegrand) {
    let grid = &traj.grid;
    let time = &traj.time;
    let nn = grid.n_nodes();
    let dt = time.dt();
    let beta = coeffs.beta;
    let mut mom = RowIntegrand::default();
    let mut heat = RowIntegrand::default();
    for n in 0..time.n_step() {
        let m = n + 1;
        let kin = interval_kinematics(grid, dt, &traj.u, &traj.theta, n);
        let rho = values_at_gauss(&coeffs.rho.level(m, nn));
        let rho_t = values_at_gauss(&coeffs.rho.backward_difference(m, time, nn));
        let p = values_at_gauss(&f.effective_stiffness_level(m, nn));
        let b = values_at_gauss(&coeffs.heat_capacity_level(m, nn));
        let b_prev = values_at_gauss(&coeffs.heat_capacity_level(n, nn));
        let k = values_at_gauss(&coeffs.k.level(m, nn));
        let ng = rho.len();
        let gamma: Vec<f64> = kin.theta.iter().map(|t| coeffs.gamma_at(f.p1, *t)).collect();
        mom.intervals.push(IntervalDensities {
            a: (0..ng).map(|g| rho[g] * kin.u_t[g]).collect(),
            b: (0..ng).map(|g| -rho_t[g] * kin.u_t[g]).collect(),
            c: (0..ng)
                .map(|g| gamma[g] * kin.u_zt[g] + p[g] * kin.u_z[g] - beta * kin.theta[g])
                .collect(),
        });
        heat.intervals.push(IntervalDensities {
            a: (0..ng).map(|g| b[g] * kin.theta[g]).collect(),
            b: (0..ng)
                .map(|g| {
                    let b_t = (b[g] - b_prev[g]) / dt;
                    -b_t * kin.theta[g] - gamma[g] * kin.u_zt[g] * kin.u_zt[g] + beta * kin.u_zt[g] * kin.theta[g]
                })
                .collect(),
            c: (0..ng).map(|g| k[g] * kin.theta_z[g]).collect(),
        });
    }
    let rho0 = values_at_gauss(&coeffs.rho.level(0, nn));
    let b0 = values_at_gauss(&coeffs.heat_capacity_level(0, nn));
    let u1 = values_at_gauss(&traj.initial.u1);
    let th0 = values_at_gauss(&traj.initial.theta0);
    mom.initial = rho0.iter().zip(&u1).map(|(r, v)| -r * v).collect();
    heat.initial = b0.iter().zip(&th0).map(|(b, t)| -b * t).collect();
    (mom, heat)
}

/// Residuals of the two weak-form identities. Each member of `tests` is used
/// with its sine factor for the momentum row and the matching cosine factor
/// for the heat row.
pub fn weak_residual(
    traj: &StateTrajectory,
    coeffs: &PhysicalCoefficients,
    f: &MaterialParams,
    tests: &TestFunctionFamily,
) -> Result<WeakResidualReport, DiagnosticsError> {
    tests.check_support()?;
    let grid = &traj.grid;
    let time = &traj.time;
    let (mom, heat) = weak_integrands(traj, coeffs, f);
    let mut entries = Vec::with_capacity(tests.members.len());
    for (index, t) in tests.members.iter().enumerate() {
        let k = match t.space {
            SpaceMode::Sine(k) | SpaceMode::Cosine(k) => k,
        };
        let ts = SeparableTest {
            space: SpaceMode::Sine(k.max(1)),
            ..*t
        };
        let tc = SeparableTest {
            space: SpaceMode::Cosine(k),
            ..*t
        };
        let rm = pair_row(time, &mom, &spatial_samples(grid, ts.space), &ts);
        let rh = pair_row(time, &heat, &spatial_samples(grid, tc.space), &tc);
        entries.push(WeakResidualEntry {
            index,
            momentum: rm,
            heat: rh,
            momentum_normalized: rm.abs() / test_norm(grid, time, &ts).max(f64::MIN_POSITIVE),
            heat_normalized: rh.abs() / test_norm(grid, time, &tc).max(f64::MIN_POSITIVE),
        });
    }
    let max_momentum = entries.iter().fold(0.0f64, |m, e| m.max(e.momentum_normalized));
    let max_heat = entries.iter().fold(0.0f64, |m, e| m.max(e.heat_normalized));
    Ok(WeakResidualReport {
        entries,
        max_momentum,
        max_heat,
        max_normalized: max_momentum.max(max_heat),
    })
}

/// Time reconstruction used between levels by [`steklov_average`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeReconstruction {
    /// Piecewise linear between levels.
    Trapezoid,
    /// Value of level `n+1` on `(t_n, t_{n+1}]`, matching `uⁿ⁺¹ = uⁿ + dt·vⁿ⁺¹`.
    BackwardPiecewiseConstant,
}

/// `(S_h f)(t) = (1/h) ∫_{t−h}^t f(s) ds`, with `f(t) = f(0)` for `t < 0`.
pub fn steklov_average(
    field: &SpaceTimeArray,
    time: &TimeGrid,
    h_avg: f64,
    recon: TimeReconstruction,
) -> Result<SpaceTimeArray, DiagnosticsError> {
    if !(h_avg > 0.0 && h_avg.is_finite()) {
        return Err(DiagnosticsError::BadWidth(h_avg));
    }
    if field.n_levels() != time.n_levels() {
        return Err(DiagnosticsError::Mismatch(format!(
            "field has {} levels, time grid {}",
            field.n_levels(),
            time.n_levels()
        )));
    }
    let nn = field.n_nodes();
    let dt = time.dt();
    let mut out = SpaceTimeArray::zeros(nn, time.n_levels());
    let mut acc = vec![0.0; nn];
    for m in 0..time.n_levels() {
        let b = time.time(m);
        let a = b - h_avg;
        acc.iter_mut().for_each(|x| *x = 0.0);
        let before = (b.min(0.0) - a).max(0.0);
        if before > 0.0 {
            for (x, f0) in acc.iter_mut().zip(field.row(0)) {
                *x += before * f0;
            }
        }
        let start = a.max(0.0);
        if b > start {
            let j0 = ((start / dt).floor() as usize).min(time.n_step().saturating_sub(1));
            for j in j0..m {
                let (t0, t1) = (time.time(j), time.time(j + 1));
                let (s0, s1) = (start.max(t0), b.min(t1));
                if s1 <= s0 {
                    continue;
                }
                let len = s1 - s0;
                let (lo, hi) = (field.row(j), field.row(j + 1));
                match recon {
                    TimeReconstruction::BackwardPiecewiseConstant => {
                        for (x, f1) in acc.iter_mut().zip(hi) {
                            *x += len * f1;
                        }
                    }
                    TimeReconstruction::Trapezoid => {
                        let mid = ((s0 + s1) / 2.0 - t0) / dt;
                        for ((x, f0), f1) in acc.iter_mut().zip(lo).zip(hi) {
                            *x += len * (f0 * (1.0 - mid) + f1 * mid);
                        }
                    }
                }
            }
        }
        for (o, x) in out.row_mut(m).iter_mut().zip(&acc) {
            *o = x / h_avg;
        }
    }
    Ok(out)
}

/// Element gradients of every level, stored as a space-time array over elements.
pub fn gradient_field(grid: &SpatialGrid, a: &SpaceTimeArray) -> SpaceTimeArray {
    let rows: Vec<Vec<f64>> = (0..a.n_levels()).map(|n| element_gradients(grid, a.row(n))).collect();
    SpaceTimeArray::from_rows(&rows).expect("equal row lengths")
}

/// `(û_z(t) − û_z(t−h))/h` with the extension `û = u0 + t·u1` for `t < 0`,
/// evaluated at grid levels for `h` a multiple of `dt`.
pub fn steklov_difference_quotient(traj: &StateTrajectory, k: usize) -> SpaceTimeArray {
    let grid = &traj.grid;
    let h = k as f64 * traj.time.dt();
    let uz = gradient_field(grid, &traj.u);
    let u0z = element_gradients(grid, &traj.initial.u0);
    let u1z = element_gradients(grid, &traj.initial.u1);
    let rows: Vec<Vec<f64>> = (0..traj.time.n_levels())
        .map(|m| {
            let back: Vec<f64> = if m >= k {
                uz.row(m - k).to_vec()
            } else {
                let t = traj.time.time(m) - h;
                u0z.iter().zip(&u1z).map(|(a, b)| a + t * b).collect()
            };
            uz.row(m).iter().zip(&back).map(|(a, b)| (a - b) / h).collect()
        })
        .collect();
    SpaceTimeArray::from_rows(&rows).expect("equal row lengths")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldDistances {
    pub u: f64,
    pub v: f64,
    pub theta: f64,
}

impl FieldDistances {
    fn between(grid: &SpatialGrid, time: &TimeGrid, a: &StateTrajectory, b: &StateTrajectory) -> Self {
        Self {
            u: space_time_distance(grid, time, &a.u, &b.u),
            v: space_time_distance(grid, time, &a.v, &b.v),
            theta: space_time_distance(grid, time, &a.theta, &b.theta),
        }
    }
}

/// ε-independent functionals monitored across the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonitoredFunctionals {
    pub sup_v2: f64,
    pub sup_uz2: f64,
    pub sup_theta: f64,
    pub vz2_integral: f64,
    pub theta_moment_q2: f64,
}

impl MonitoredFunctionals {
    fn from_report(r: &AprioriBoundReport) -> Self {
        Self {
            sup_v2: r.sup_v2,
            sup_uz2: r.sup_uz2,
            sup_theta: r.sup_theta,
            vz2_integral: r.vz2_integral,
            theta_moment_q2: r.theta_moment(2.0).unwrap_or(f64::NAN),
        }
    }

    fn as_array(&self) -> [f64; 5] {
        [
            self.sup_v2,
            self.sup_uz2,
            self.sup_theta,
            self.vz2_integral,
            self.theta_moment_q2,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Monotonicity {
    pub u: bool,
    pub v: bool,
    pub theta: bool,
}

fn strictly_decreasing(d: &[FieldDistances]) -> Monotonicity {
    let dec = |get: fn(&FieldDistances) -> f64| d.windows(2).all(|p| get(&p[1]) < get(&p[0]));
    Monotonicity {
        u: dec(|x| x.u),
        v: dec(|x| x.v),
        theta: dec(|x| x.theta),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsilonStudyReport {
    pub epsilons: Vec<f64>,
    pub distance_to_limit: Vec<FieldDistances>,
    pub consecutive: Vec<FieldDistances>,
    /// `pairwise[i][j]`, including the ε = 0 run as the last index.
    pub pairwise: Vec<Vec<FieldDistances>>,
    pub functionals: Vec<MonitoredFunctionals>,
    pub limit_functionals: MonitoredFunctionals,
    /// max / min of each functional across the positive ε values.
    pub functional_spread: [f64; 5],
    pub limit_decreasing: Monotonicity,
    pub cauchy_decreasing: Monotonicity,
}

pub fn epsilon_convergence_study(
    grid: &SpatialGrid,
    init: &InitialData,
    coeffs: &PhysicalCoefficients,
    f: &MaterialParams,
    excitation: &Excitation,
    time: &TimeGrid,
    eps_list: &[f64],
) -> Result<EpsilonStudyReport, DiagnosticsError> {
    if eps_list.len() < 2 || eps_list.iter().any(|e| !(*e > 0.0)) || eps_list.windows(2).any(|p| p[1] > p[0]) {
        return Err(DiagnosticsError::BadEpsilonList);
    }
    let mut all: Vec<f64> = eps_list.to_vec();
    all.push(0.0);
    let runs: Vec<Result<StateTrajectory, SolverError>> = thread::scope(|s| {
        let handles: Vec<_> = all
            .iter()
            .map(|&eps| {
                s.spawn(move || {
                    let cfg = SolverConfig::new(eps, *time)?;
                    run_forward(grid, init, coeffs, f, excitation, &cfg)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("solver thread panicked"))
            .collect()
    });
    let runs: Vec<StateTrajectory> = runs.into_iter().collect::<Result<_, _>>()?;
    let limit = runs.last().expect("limit run");

    let pairwise: Vec<Vec<FieldDistances>> = runs
        .iter()
        .map(|a| runs.iter().map(|b| FieldDistances::between(grid, time, a, b)).collect())
        .collect();
    let k = eps_list.len();
    let distance_to_limit: Vec<FieldDistances> = (0..k).map(|i| pairwise[i][k]).collect();
    let consecutive: Vec<FieldDistances> = (0..k - 1).map(|i| pairwise[i][i + 1]).collect();

    let mut functionals = Vec::with_capacity(k);
    for r in &runs[..k] {
        functionals.push(MonitoredFunctionals::from_report(&apriori_monitor(r, coeffs, f)?));
    }
    let limit_functionals = MonitoredFunctionals::from_report(&apriori_monitor(limit, coeffs, f)?);
    let mut functional_spread = [0.0; 5];
    for (j, slot) in functional_spread.iter_mut().enumerate() {
        let vals: Vec<f64> = functionals.iter().map(|m| m.as_array()[j]).collect();
        let (lo, hi) = vals
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(l, h), v| (l.min(*v), h.max(*v)));
        *slot = if hi == 0.0 { 1.0 } else { hi / lo };
    }
    Ok(EpsilonStudyReport {
        epsilons: eps_list.to_vec(),
        limit_decreasing: strictly_decreasing(&distance_to_limit),
        cauchy_decreasing: strictly_decreasing(&consecutive),
        distance_to_limit,
        consecutive,
        pairwise,
        functionals,
        limit_functionals,
        functional_spread,
    })
}

/// `∫ f g` at one level, for tests and reports.
pub fn level_inner(grid: &SpatialGrid, a: &[f64], b: &[f64]) -> f64 {
    integrate_product(grid, a, b, None).unwrap_or(f64::NAN)
}
