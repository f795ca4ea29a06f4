//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any criterion fails.

use std::f64::consts::PI;
use std::path::PathBuf;
use std::process::ExitCode;

use thermopiezo::cli::scaled_guess;
use thermopiezo::config::ExperimentConfig;
use thermopiezo::diagnostics::{
    energy_identity_residual, epsilon_convergence_study, gradient_field, steklov_average, steklov_difference_quotient,
    weak_residual, EpsilonStudyReport, SpaceKind, TestFunctionFamily, TimeReconstruction,
};
use thermopiezo::grid::{space_time_distance, SpaceTimeArray, SpatialGrid, TimeGrid};
use thermopiezo::inverse::{
    derivative_check, invert_all_at_once, loglog_slope, DiscreteTestBasis, ForwardSetup, StopReason,
};
use thermopiezo::materials::{
    build_lift, Excitation, MaterialParams, PhysicalCoefficients, Relaxation, SpaceTimeField,
};
use thermopiezo::observation::{add_noise, observe, observe_boundary_charge, observe_window_charge};
use thermopiezo::solver::{mollify_initial_data, run_forward, InitialData, SolverConfig, StateTrajectory};

struct Outcome {
    pass: bool,
    detail: String,
}

fn coeffs(beta: f64, k: f64) -> PhysicalCoefficients {
    PhysicalCoefficients {
        rho: SpaceTimeField::Constant(1.0),
        c_th: SpaceTimeField::Constant(1.0),
        k: SpaceTimeField::Constant(k),
        beta,
        tau: Relaxation::Constant(0.05),
        gamma_min: 0.01,
        gamma_max: 1.0,
    }
}

fn params() -> MaterialParams {
    MaterialParams::constant(1.0, 0.5, 1.0).unwrap()
}

fn coupled_init(grid: &SpatialGrid) -> InitialData {
    InitialData::from_fns(
        grid,
        |z| 0.1 * (PI * z).sin(),
        |z| (PI * z).sin(),
        |z| 1.0 + 0.5 * (PI * z).cos(),
    )
    .unwrap()
}

fn coupled_run(n_elem: usize, n_step: usize, eps: f64) -> StateTrajectory {
    let grid = SpatialGrid::new(1.0, n_elem).unwrap();
    let time = TimeGrid::new(0.5, n_step).unwrap();
    let ex = Excitation::from_fn(&time, |t| 0.5 * (4.0 * t).sin());
    let cfg = SolverConfig::new(eps, time).unwrap();
    run_forward(&grid, &coupled_init(&grid), &coeffs(0.5, 0.5), &params(), &ex, &cfg).unwrap()
}

fn slopes(x: &[f64], e: &[f64]) -> Vec<f64> {
    x.windows(2)
        .zip(e.windows(2))
        .map(|(x, e)| (e[1] / e[0]).ln() / (x[1] / x[0]).ln())
        .collect()
}

fn heat_error(n_elem: usize, n_step: usize) -> f64 {
    // k/b = 1 on (0, 1); the constant 1 keeps Θ ≥ 0 and is carried exactly by the scheme.
    let (end, kb) = (0.1, 1.0);
    let grid = SpatialGrid::new(1.0, n_elem).unwrap();
    let time = TimeGrid::new(end, n_step).unwrap();
    let exact = |z: f64, t: f64| 1.0 + (-kb * PI * PI * t).exp() * (PI * z).cos();
    let init = InitialData::from_fns(&grid, |_| 0.0, |_| 0.0, |z| exact(z, 0.0)).unwrap();
    let cfg = SolverConfig::new(0.0, time).unwrap();
    let traj = run_forward(
        &grid,
        &init,
        &coeffs(0.0, kb),
        &params(),
        &Excitation::zero(&time),
        &cfg,
    )
    .unwrap();
    assert_eq!(traj.u.max_abs(), 0.0);
    space_time_distance(&grid, &time, &traj.theta, &SpaceTimeArray::from_fn(&grid, &time, exact))
}

fn decoupled_heat_orders() -> Outcome {
    let sizes = [16usize, 32, 64];
    let dz: Vec<f64> = sizes.iter().map(|n| 1.0 / *n as f64).collect();
    let ez: Vec<f64> = sizes.iter().map(|n| heat_error(*n, n * n / 2)).collect();
    let steps = [10usize, 20, 40];
    let dt: Vec<f64> = steps.iter().map(|n| 0.1 / *n as f64).collect();
    let et: Vec<f64> = steps.iter().map(|n| heat_error(256, *n)).collect();
    let (sz, st) = (loglog_slope(&dz, &ez), loglog_slope(&dt, &et));
    Outcome {
        pass: (1.8..=2.2).contains(&sz) && (0.8..=1.2).contains(&st),
        detail: format!(
            "dz order {sz:.3} (pairwise {:?}, dt = 0.2·dz²), dt order {st:.3} (pairwise {:?}, 256 elements)",
            slopes(&dz, &ez),
            slopes(&dt, &et)
        ),
    }
}

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn bundled_positivity() -> Outcome {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(configs_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut pass = paths.len() == 10;
    let mut worst = f64::INFINITY;
    let mut failed = Vec::new();
    for p in &paths {
        let exp = ExperimentConfig::load(p).unwrap().resolve().unwrap();
        assert!(exp.init.theta0.iter().all(|t| *t >= 0.0), "{p:?} has negative θ0");
        let init = if exp.mollify > 0.0 {
            mollify_initial_data(&exp.grid, &exp.init, exp.mollify)
        } else {
            exp.init.clone()
        };
        let traj = run_forward(&exp.grid, &init, &exp.coeffs, &exp.f, &exp.excitation, &exp.solver).unwrap();
        let (lo, hi) = (traj.theta.min(), traj.theta.max());
        let margin = lo + 1e-8 * (1.0 + hi);
        worst = worst.min(margin);
        if margin < 0.0 {
            pass = false;
            failed.push(p.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    Outcome {
        pass,
        detail: format!(
            "{} configs, min over configs of min Θ + 1e-8(1 + max Θ) = {worst:e}, failing {failed:?}",
            paths.len()
        ),
    }
}

/// Motion from rest driven by thermal expansion of a nonuniform initial temperature.
fn thermally_driven_run(n_step: usize) -> StateTrajectory {
    let grid = SpatialGrid::new(1.0, 16).unwrap();
    let time = TimeGrid::new(0.5, n_step).unwrap();
    let init = InitialData::from_fns(&grid, |_| 0.0, |_| 0.0, |z| 1.0 + 0.5 * (PI * z).cos()).unwrap();
    let cfg = SolverConfig::new(0.0, time).unwrap();
    run_forward(
        &grid,
        &init,
        &coeffs(0.5, 0.5),
        &params(),
        &Excitation::zero(&time),
        &cfg,
    )
    .unwrap()
}

fn energy_identity() -> Outcome {
    let steps = [50usize, 100, 200];
    let res: Vec<f64> = steps
        .iter()
        .map(|n| {
            energy_identity_residual(&thermally_driven_run(*n), &coeffs(0.5, 0.5), &params())
                .unwrap()
                .aggregate_residual
        })
        .collect();
    let orders: Vec<f64> = res.windows(2).map(|p| (p[0] / p[1]).log2()).collect();
    let grid = SpatialGrid::new(1.0, 16).unwrap();
    let time = TimeGrid::new(0.5, 20).unwrap();
    let zero = run_forward(
        &grid,
        &InitialData::zeros(&grid),
        &coeffs(0.5, 0.5),
        &params(),
        &Excitation::zero(&time),
        &SolverConfig::new(0.0, time).unwrap(),
    )
    .unwrap();
    let z = energy_identity_residual(&zero, &coeffs(0.5, 0.5), &params())
        .unwrap()
        .aggregate_residual;
    Outcome {
        pass: orders.iter().all(|o| *o >= 1.0) && z == 0.0,
        detail: format!("residuals {res:?}, orders {orders:?}, zero trajectory residual {z:e}"),
    }
}

fn epsilon_study() -> EpsilonStudyReport {
    let grid = SpatialGrid::new(1.0, 32).unwrap();
    let time = TimeGrid::new(0.5, 200).unwrap();
    let ex = Excitation::from_fn(&time, |t| 0.5 * (4.0 * t).sin());
    epsilon_convergence_study(
        &grid,
        &coupled_init(&grid),
        &coeffs(0.5, 0.5),
        &params(),
        &ex,
        &time,
        &[1e-1, 1e-2, 1e-3, 1e-4],
    )
    .unwrap()
}

fn uniform_bounds(study: &EpsilonStudyReport) -> Outcome {
    Outcome {
        pass: study.functional_spread.iter().all(|s| *s <= 10.0),
        detail: format!(
            "max/min over ε of [sup∫v², sup∫u_z², sup∫Θ, ∬v_z², ∬(Θ+1)²] = {:?}",
            study.functional_spread
        ),
    }
}

fn limit_convergence(study: &EpsilonStudyReport) -> Outcome {
    let m = study.limit_decreasing;
    let d: Vec<(f64, f64, f64)> = study.distance_to_limit.iter().map(|x| (x.u, x.v, x.theta)).collect();
    Outcome {
        pass: m.u && m.v && m.theta,
        detail: format!("(u, v, Θ) distances to ε = 0: {d:?}"),
    }
}

fn weak_solution_residual() -> Outcome {
    let tests = TestFunctionFamily::random(32, 11, SpaceKind::Sine, 4);
    let levels = [(16usize, 100usize), (32, 200), (64, 400)];
    let trajs: Vec<StateTrajectory> = levels.iter().map(|(n, m)| coupled_run(*n, *m, 0.0)).collect();
    let reports: Vec<_> = trajs
        .iter()
        .map(|t| weak_residual(t, &coeffs(0.5, 0.5), &params(), &tests).unwrap())
        .collect();
    let max: Vec<f64> = reports.iter().map(|r| r.max_normalized).collect();
    let mut bad = trajs[2].clone();
    bad.theta = bad.theta.scaled(2.0);
    let corrupt = weak_residual(&bad, &coeffs(0.5, 0.5), &params(), &tests)
        .unwrap()
        .max_heat;
    let ratio = corrupt / reports[2].max_heat;
    Outcome {
        pass: max.windows(2).all(|p| p[1] < p[0]) && ratio >= 10.0,
        detail: format!("max normalized residual {max:?}, Θ×2 heat inflation {ratio:.1}×"),
    }
}

fn derivatives() -> Outcome {
    let grid = SpatialGrid::new(1.0, 16).unwrap();
    let time = TimeGrid::new(1.0, 24).unwrap();
    let basis = DiscreteTestBasis::new(DiscreteTestBasis::DEFAULT_SIZE, 3, 6);
    let r = derivative_check(&grid, &time, &coeffs(0.1, 0.5), &basis, 20, 5).unwrap();
    Outcome {
        pass: r.param_exactness <= 1e-12 && r.state_taylor <= 1e-12 && (0.9..=1.1).contains(&r.fd_slope),
        detail: format!(
            "A_f exactness {:e}, A_l Taylor remainder vs quadratic block {:e}, FD slope {:.4} over {} triples",
            r.param_exactness, r.state_taylor, r.fd_slope, r.triples
        ),
    }
}

fn handmade(grid: SpatialGrid, time: TimeGrid, ex: Excitation, u: impl Fn(f64, f64) -> f64) -> StateTrajectory {
    StateTrajectory {
        grid,
        time,
        epsilon: 0.0,
        u: SpaceTimeArray::from_fn(&grid, &time, u),
        v: SpaceTimeArray::zeros(grid.n_nodes(), time.n_levels()),
        theta: SpaceTimeArray::zeros(grid.n_nodes(), time.n_levels()),
        phi0: SpaceTimeArray::zeros(grid.n_nodes(), time.n_levels()),
        excitation: ex,
        initial: InitialData::zeros(&grid),
        min_theta: 0.0,
        max_theta: 0.0,
    }
}

fn observation_window() -> Outcome {
    let time = TimeGrid::new(1.0, 8).unwrap();
    let phi_e = |t: f64| 1.0 + 0.5 * (3.0 * t).sin();
    let ex = Excitation::from_fn(&time, phi_e);

    // D = p2 u_z − p3 χ_z = 0.7(1 + t) − 1.3 φe / h on all of (0, h).
    let coarse = SpatialGrid::new(2.0, 10).unwrap();
    let f = MaterialParams::constant(1.0, 0.7, 1.3).unwrap();
    let traj = handmade(coarse, time, ex.clone(), |z, t| (1.0 + t) * z);
    let mut flux_err = 0.0f64;
    for gamma in [0.01, 0.1, 0.5, 1.0, 1.99] {
        let c = observe_window_charge(&traj, &f, gamma).unwrap();
        for (n, v) in c.values.iter().enumerate() {
            let d = 0.7 * (1.0 + time.time(n)) - 1.3 * phi_e(time.time(n)) / 2.0;
            flux_err = flux_err.max((v - d).abs());
        }
    }

    // p2 = p3 = 1, D = A sin(πz/3h): D(0) = 0 and D'(h) ≠ 0.
    let h = 1.0;
    let grid = SpatialGrid::new(h, 512).unwrap();
    let unit = MaterialParams::constant(1.0, 1.0, 1.0).unwrap();
    let a = 0.8;
    let traj = handmade(grid, time, ex, |z, t| {
        phi_e(t) * z / h + a * (3.0 * h / PI) * (1.0 - (PI * z / (3.0 * h)).cos())
    });
    let boundary = observe_boundary_charge(&traj, &unit).unwrap();
    let gammas = [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0];
    let gaps: Vec<f64> = gammas
        .iter()
        .map(|g| {
            let c = observe_window_charge(&traj, &unit, *g).unwrap();
            c.values
                .iter()
                .zip(&boundary.values)
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        })
        .collect();
    let slope = loglog_slope(&gammas, &gaps);
    Outcome {
        pass: flux_err <= 1e-12 && (0.8..=1.2).contains(&slope),
        detail: format!("constant-flux error {flux_err:e}, |C^γ − boundary charge| {gaps:?}, slope {slope:.3}"),
    }
}

fn inversion() -> Outcome {
    let cfg = ExperimentConfig::load(&configs_dir().join("inversion.json")).unwrap();
    let exp = cfg.resolve().unwrap();
    let setup = ForwardSetup {
        grid: exp.grid,
        init: exp.init.clone(),
        coeffs: exp.coeffs.clone(),
        excitation: exp.excitation.clone(),
        solver: exp.solver,
    };
    let lift = build_lift(&exp.excitation, &exp.grid, &exp.time).unwrap();
    let y = observe(exp.observation, &setup.run(&exp.f).unwrap(), &exp.f, &lift).unwrap();
    let guess = scaled_guess(&exp.f, &cfg);
    let settings = &cfg.inversion.settings;

    let clean = invert_all_at_once(&setup, &y, &guess, settings, Some(&exp.f)).unwrap();
    let clean_err = clean.parameter_error.unwrap();

    let noisy_y = add_noise(&y, 0.01 * y.l2_norm(), exp.seed).unwrap();
    let noisy = invert_all_at_once(&setup, &noisy_y, &guess, settings, Some(&exp.f)).unwrap();
    let noisy_err = noisy.parameter_error.unwrap();
    let pass = clean_err <= 0.01
        && clean.misfit_nonincreasing
        && noisy.stop_reason == StopReason::Discrepancy
        && settings.tau_dp == 1.5
        && noisy_err <= 0.1
        && noisy.misfit_nonincreasing;
    Outcome {
        pass,
        detail: format!(
            "clean: {:?} after {} iterations, error {clean_err:.2e}; δ = 1%: {:?} after {} iterations, error {noisy_err:.2e}; misfit non-increasing {} / {}",
            clean.stop_reason,
            clean.iterates.len() - 1,
            noisy.stop_reason,
            noisy.iterates.len() - 1,
            clean.misfit_nonincreasing,
            noisy.misfit_nonincreasing
        ),
    }
}

fn steklov() -> Outcome {
    let traj = coupled_run(32, 128, 0.0);
    let vz = gradient_field(&traj.grid, &traj.v);
    let mut worst = 0.0f64;
    for k in [1usize, 2, 4, 8, 16, 64] {
        let h = k as f64 * traj.time.dt();
        let s = steklov_average(&vz, &traj.time, h, TimeReconstruction::BackwardPiecewiseConstant).unwrap();
        let q = steklov_difference_quotient(&traj, k);
        worst = worst.max(
            s.as_slice()
                .iter()
                .zip(q.as_slice())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs())),
        );
    }
    Outcome {
        pass: worst <= 1e-9,
        detail: format!("max |S_h v_z − (u_z(t) − u_z(t−h))/h| = {worst:e} for h/dt ∈ {{1, 2, 4, 8, 16, 64}}"),
    }
}

fn main() -> ExitCode {
    let study = epsilon_study();
    let outcomes = [
        ("decoupled heat convergence orders", decoupled_heat_orders()),
        ("temperature positivity on bundled configs", bundled_positivity()),
        ("discrete energy identity", energy_identity()),
        ("uniform bounds in ε", uniform_bounds(&study)),
        ("convergence to the ε = 0 trajectory", limit_convergence(&study)),
        ("weak-form residual", weak_solution_residual()),
        ("operator derivatives", derivatives()),
        ("window charge observation", observation_window()),
        ("all-at-once inversion", inversion()),
        ("Steklov identity", steklov()),
    ];
    let mut failures = 0;
    for (i, (name, o)) in outcomes.iter().enumerate() {
        println!(
            "{} {:>2} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
        failures += usize::from(!o.pass);
    }
    println!(
        "acceptance: {} of {} criteria pass",
        outcomes.len() - failures,
        outcomes.len()
    );
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
