//! Batch command line: every command reads one JSON config, writes CSV/JSON
//! reports under the output directory and maps failures to exit codes.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::{ConfigError, Experiment, ExperimentConfig};
use crate::diagnostics::{
    apriori_monitor, energy_identity_residual, epsilon_convergence_study, weak_residual, DiagnosticsError, SpaceKind,
    TestFunctionFamily,
};
use crate::grid::{space_time_distance, SpaceTimeArray, SpatialGrid, TimeGrid};
use crate::inverse::{
    apply_model_operator, derivative_check, invert_all_at_once, DiscreteTestBasis, ForwardSetup, InverseError, Unknown,
};
use crate::materials::{build_lift, validate, MaterialParams};
use crate::observation::{add_noise, observe};
use crate::solver::{mollify_initial_data, run_forward, StateTrajectory};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_SOLVER: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "thermopiezo",
    version,
    about = "Thermo-piezoelectric Kelvin-Voigt simulation and identification"
)]
pub struct Cli {
    /// Experiment config (JSON); the built-in default experiment when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for noise and random test functions, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Run the forward solver and its monitors.
    Forward,
    /// Sweep the regularization parameter and compare with ε = 0.
    EpsilonStudy,
    /// Refine space and time together and report observed orders.
    Convergence,
    /// Exactness and finite-difference checks of the operator derivatives.
    DerivativeCheck,
    /// Synthesize (noisy) charge observations.
    Observe,
    /// Reconstruct parameters from synthetic data.
    Invert,
    /// Check coefficients and print their ranges.
    Validate,
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn invalid(m: impl ToString) -> Self {
        Self {
            code: EXIT_INVALID,
            message: m.to_string(),
        }
    }

    fn solver(m: impl ToString) -> Self {
        Self {
            code: EXIT_SOLVER,
            message: m.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::invalid(e)
    }
}

impl From<DiagnosticsError> for Failure {
    fn from(e: DiagnosticsError) -> Self {
        match e {
            DiagnosticsError::Solver(_) => Self::solver(e),
            e => Self::invalid(e),
        }
    }
}

impl From<InverseError> for Failure {
    fn from(e: InverseError) -> Self {
        match e {
            InverseError::Solver(_) => Self::solver(e),
            InverseError::Divergence(_) => Self {
                code: EXIT_DIVERGED,
                message: e.to_string(),
            },
            e => Self::invalid(e),
        }
    }
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run_command<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.observation.seed = seed;
        cfg.studies.seed = seed;
    }
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    fs::write(dir.join(name), contents).map_err(|e| Failure::invalid(format!("cannot write {name}: {e}")))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), Failure> {
    let mut s = serde_json::to_string_pretty(value).map_err(Failure::invalid)?;
    s.push('\n');
    write(dir, name, &s)
}

/// One row per level: `time` then the nodal values; the header holds the node coordinates.
pub fn field_csv(grid: &SpatialGrid, time: &TimeGrid, a: &SpaceTimeArray) -> String {
    let mut s = String::from("time");
    for z in grid.nodes() {
        s.push_str(&format!(",{z:e}"));
    }
    s.push('\n');
    for n in 0..a.n_levels() {
        s.push_str(&format!("{:e}", time.time(n)));
        for v in a.row(n) {
            s.push_str(&format!(",{v:e}"));
        }
        s.push('\n');
    }
    s
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load(cli)?;
    let exp = cfg.resolve()?;
    fs::create_dir_all(&cfg.output).map_err(|e| Failure::invalid(format!("cannot create output directory: {e}")))?;
    let out = cfg.output.as_path();
    write(out, "resolved_config.json", &(cfg.to_json() + "\n"))?;

    let report = validate(&exp.coeffs, &exp.f, &exp.grid, &exp.time, exp.theta_probe);
    if cli.command == Command::Validate {
        print!("{}", report.table());
        for w in exp.solver.warnings(&exp.grid) {
            println!("warning: {w}");
        }
        write_json(out, "validation.json", &report)?;
        return if report.passed {
            Ok(())
        } else {
            Err(Failure::invalid("coefficient validation failed"))
        };
    }
    if !report.passed {
        eprint!("{}", report.table());
        return Err(Failure::invalid("coefficient validation failed"));
    }
    for w in exp.solver.warnings(&exp.grid) {
        eprintln!("warning: {w}");
    }

    match cli.command {
        Command::Validate => unreachable!(),
        Command::Forward => forward(&cfg, &exp, out),
        Command::EpsilonStudy => epsilon_study(&cfg, &exp, out),
        Command::Convergence => convergence(&cfg, out),
        Command::DerivativeCheck => derivative(&cfg, &exp, out),
        Command::Observe => observe_cmd(&exp, out),
        Command::Invert => invert(&cfg, &exp, out),
    }
}

fn solve(exp: &Experiment) -> Result<StateTrajectory, Failure> {
    let init = if exp.mollify > 0.0 {
        mollify_initial_data(&exp.grid, &exp.init, exp.mollify)
    } else {
        exp.init.clone()
    };
    run_forward(&exp.grid, &init, &exp.coeffs, &exp.f, &exp.excitation, &exp.solver).map_err(Failure::solver)
}

#[derive(Serialize)]
struct ForwardSummary {
    n_elem: usize,
    n_step: usize,
    epsilon: f64,
    min_theta: f64,
    max_theta: f64,
    theta_nonnegative: bool,
    energy_aggregate_residual: f64,
    energy_max_abs_residual: f64,
    weak_residual_max_normalized: f64,
    gronwall_holds: bool,
    warnings: Vec<String>,
}

fn forward(cfg: &ExperimentConfig, exp: &Experiment, out: &Path) -> Result<(), Failure> {
    let traj = solve(exp)?;
    write(out, "u.csv", &field_csv(&exp.grid, &exp.time, &traj.u))?;
    write(out, "v.csv", &field_csv(&exp.grid, &exp.time, &traj.v))?;
    write(out, "theta.csv", &field_csv(&exp.grid, &exp.time, &traj.theta))?;
    write(out, "phi0.csv", &field_csv(&exp.grid, &exp.time, &traj.phi0))?;
    let energy = energy_identity_residual(&traj, &exp.coeffs, &exp.f)?;
    write(out, "energy.csv", &energy.to_csv())?;
    let apriori = apriori_monitor(&traj, &exp.coeffs, &exp.f)?;
    write_json(out, "apriori.json", &apriori)?;
    let tests = TestFunctionFamily::random(cfg.studies.test_functions, cfg.studies.seed, SpaceKind::Sine, 6);
    let weak = weak_residual(&traj, &exp.coeffs, &exp.f, &tests)?;
    write(out, "weak_residual.csv", &weak.to_csv())?;
    let summary = ForwardSummary {
        n_elem: exp.grid.n_elem(),
        n_step: exp.time.n_step(),
        epsilon: traj.epsilon,
        min_theta: traj.min_theta,
        max_theta: traj.max_theta,
        theta_nonnegative: traj.theta_nonnegative(),
        energy_aggregate_residual: energy.aggregate_residual,
        energy_max_abs_residual: energy.max_abs_residual,
        weak_residual_max_normalized: weak.max_normalized,
        gronwall_holds: apriori.gronwall.holds,
        warnings: exp.solver.warnings(&exp.grid),
    };
    write_json(out, "summary.json", &summary)?;
    println!(
        "forward: min theta {:e}, max theta {:e}, energy residual {:e}",
        summary.min_theta, summary.max_theta, summary.energy_aggregate_residual
    );
    Ok(())
}

fn epsilon_study(cfg: &ExperimentConfig, exp: &Experiment, out: &Path) -> Result<(), Failure> {
    let report = epsilon_convergence_study(
        &exp.grid,
        &exp.init,
        &exp.coeffs,
        &exp.f,
        &exp.excitation,
        &exp.time,
        &cfg.studies.epsilons,
    )?;
    write_json(out, "epsilon_study.json", &report)?;
    println!(
        "epsilon-study: functional spread {:?}, distances decreasing u {} v {} theta {}",
        report.functional_spread, report.limit_decreasing.u, report.limit_decreasing.v, report.limit_decreasing.theta
    );
    Ok(())
}

#[derive(Serialize)]
struct ConvergenceLevel {
    n_elem: usize,
    n_step: usize,
    energy_aggregate_residual: f64,
    weak_residual_max_normalized: f64,
    model_residual: Option<f64>,
    /// Distances of `(u, v, θ)` to the next finer level on the coarse nodes and levels.
    distance_to_finer: Option<[f64; 3]>,
}

#[derive(Serialize)]
struct ConvergenceReport {
    levels: Vec<ConvergenceLevel>,
    /// `log2` ratios of consecutive values.
    energy_orders: Vec<f64>,
    weak_orders: Vec<f64>,
    self_convergence_orders: Vec<[f64; 3]>,
}

fn restrict(fine: &SpaceTimeArray, coarse_nodes: usize, coarse_levels: usize) -> SpaceTimeArray {
    let rows: Vec<Vec<f64>> = (0..coarse_levels)
        .map(|n| (0..coarse_nodes).map(|i| fine.get(2 * n, 2 * i)).collect())
        .collect();
    SpaceTimeArray::from_rows(&rows).expect("nonempty")
}

fn orders(v: &[f64]) -> Vec<f64> {
    v.windows(2).map(|p| (p[0] / p[1]).log2()).collect()
}

fn convergence(cfg: &ExperimentConfig, out: &Path) -> Result<(), Failure> {
    let n = cfg.studies.refinement_levels.max(2);
    let runs: Vec<(Experiment, StateTrajectory)> = (0..n)
        .map(|k| {
            let exp = cfg.refined(k as u32).resolve()?;
            let traj = solve(&exp)?;
            Ok((exp, traj))
        })
        .collect::<Result<_, Failure>>()?;
    let tests = TestFunctionFamily::random(cfg.studies.test_functions, cfg.studies.seed, SpaceKind::Sine, 6);
    let basis = DiscreteTestBasis::new(DiscreteTestBasis::DEFAULT_SIZE, cfg.studies.seed, 6);
    let mut levels = Vec::new();
    for (k, (exp, traj)) in runs.iter().enumerate() {
        let energy = energy_identity_residual(traj, &exp.coeffs, &exp.f)?;
        let weak = weak_residual(traj, &exp.coeffs, &exp.f, &tests)?;
        let model = apply_model_operator(&exp.f, &exp.coeffs, traj, &basis)
            .ok()
            .map(|i| i.norm_inf());
        let distance_to_finer = runs.get(k + 1).map(|(_, fine)| {
            let (nn, nl) = (exp.grid.n_nodes(), exp.time.n_levels());
            let d = |a: &SpaceTimeArray, b: &SpaceTimeArray| {
                space_time_distance(&exp.grid, &exp.time, a, &restrict(b, nn, nl))
            };
            [d(&traj.u, &fine.u), d(&traj.v, &fine.v), d(&traj.theta, &fine.theta)]
        });
        levels.push(ConvergenceLevel {
            n_elem: exp.grid.n_elem(),
            n_step: exp.time.n_step(),
            energy_aggregate_residual: energy.aggregate_residual,
            weak_residual_max_normalized: weak.max_normalized,
            model_residual: model,
            distance_to_finer,
        });
    }
    let dist: Vec<[f64; 3]> = levels.iter().filter_map(|l| l.distance_to_finer).collect();
    let report = ConvergenceReport {
        energy_orders: orders(&levels.iter().map(|l| l.energy_aggregate_residual).collect::<Vec<_>>()),
        weak_orders: orders(
            &levels
                .iter()
                .map(|l| l.weak_residual_max_normalized)
                .collect::<Vec<_>>(),
        ),
        self_convergence_orders: dist
            .windows(2)
            .map(|p| [0, 1, 2].map(|i| (p[0][i] / p[1][i]).log2()))
            .collect(),
        levels,
    };
    write_json(out, "convergence.json", &report)?;
    println!(
        "convergence: energy orders {:?}, weak orders {:?}",
        report.energy_orders, report.weak_orders
    );
    Ok(())
}

fn derivative(cfg: &ExperimentConfig, exp: &Experiment, out: &Path) -> Result<(), Failure> {
    let basis = DiscreteTestBasis::new(DiscreteTestBasis::DEFAULT_SIZE, cfg.studies.seed, 6);
    let report = derivative_check(
        &exp.grid,
        &exp.time,
        &exp.coeffs,
        &basis,
        cfg.studies.derivative_triples,
        cfg.studies.seed,
    )?;
    write_json(out, "derivative_check.json", &report)?;
    println!(
        "derivative-check: A_f exactness {:e} (roundoff floor {:e}), A_l Taylor {:e}, FD slope {:.3}",
        report.param_exactness, report.param_roundoff_floor, report.state_taylor, report.fd_slope
    );
    Ok(())
}

fn observe_cmd(exp: &Experiment, out: &Path) -> Result<(), Failure> {
    let traj = solve(exp)?;
    let lift = build_lift(&exp.excitation, &exp.grid, &exp.time).map_err(Failure::invalid)?;
    let clean = observe(exp.observation, &traj, &exp.f, &lift).map_err(Failure::invalid)?;
    let noisy = add_noise(&clean, exp.delta * clean.l2_norm(), exp.seed).map_err(Failure::invalid)?;
    write(out, "observation_clean.csv", &clean.to_csv())?;
    write(out, "observation.csv", &noisy.to_csv())?;
    let mut side = noisy.sidecar();
    side["delta_relative"] = serde_json::json!(exp.delta);
    side["clean_norm"] = serde_json::json!(clean.l2_norm());
    write_json(out, "observation.json", &side)?;
    println!("observe: {} levels, noise {:e}", noisy.values.len(), noisy.delta);
    Ok(())
}

/// The true parameters with every unknown component scaled by `guess_factor`.
pub fn scaled_guess(f: &MaterialParams, cfg: &ExperimentConfig) -> MaterialParams {
    let g = cfg.inversion.guess_factor;
    let mask = cfg.inversion.settings.mask;
    MaterialParams {
        p1: if mask.p1 == Unknown::Known { f.p1 } else { g * f.p1 },
        p2: if mask.p2 == Unknown::Known {
            f.p2.clone()
        } else {
            f.p2.scaled(g)
        },
        p3: if mask.p3 == Unknown::Known {
            f.p3.clone()
        } else {
            f.p3.scaled(g)
        },
    }
}

fn invert(cfg: &ExperimentConfig, exp: &Experiment, out: &Path) -> Result<(), Failure> {
    let traj = solve(exp)?;
    let lift = build_lift(&exp.excitation, &exp.grid, &exp.time).map_err(Failure::invalid)?;
    let clean = observe(exp.observation, &traj, &exp.f, &lift).map_err(Failure::invalid)?;
    let data = add_noise(&clean, exp.delta * clean.l2_norm(), exp.seed).map_err(Failure::invalid)?;
    let setup = ForwardSetup {
        grid: exp.grid,
        init: traj.initial.clone(),
        coeffs: exp.coeffs.clone(),
        excitation: exp.excitation.clone(),
        solver: exp.solver,
    };
    let guess = scaled_guess(&exp.f, cfg);
    match invert_all_at_once(&setup, &data, &guess, &cfg.inversion.settings, Some(&exp.f)) {
        Ok(report) => {
            write_json(out, "reconstruction.json", &report)?;
            println!(
                "invert: {:?} after {} iterations, parameters {:?}, error {:?}",
                report.stop_reason,
                report.iterates.len() - 1,
                report.parameters,
                report.parameter_error
            );
            Ok(())
        }
        Err(InverseError::Divergence(report)) => {
            write_json(out, "reconstruction.json", &report)?;
            Err(InverseError::Divergence(report).into())
        }
        Err(e) => Err(e.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_commands_and_overrides() {
        let cli = Cli::try_parse_from(["thermopiezo", "epsilon-study", "--out", "x", "--seed", "4"]).unwrap();
        assert_eq!(cli.command, Command::EpsilonStudy);
        assert_eq!(cli.seed, Some(4));
        assert!(Cli::try_parse_from(["thermopiezo", "bogus"]).is_err());
    }

    #[test]
    fn unknown_command_and_missing_config_are_invalid() {
        assert_eq!(run_command(["thermopiezo", "bogus"]), EXIT_INVALID);
        assert_eq!(
            run_command(["thermopiezo", "validate", "--config", "/nonexistent/cfg.json"]),
            EXIT_INVALID
        );
        assert_eq!(run_command(["thermopiezo", "--help"]), EXIT_OK);
    }

    #[test]
    fn field_csv_layout() {
        let grid = SpatialGrid::new(1.0, 2).unwrap();
        let time = TimeGrid::new(1.0, 1).unwrap();
        let a = SpaceTimeArray::from_fn(&grid, &time, |z, t| z + t);
        assert_eq!(
            field_csv(&grid, &time, &a),
            "time,0e0,5e-1,1e0\n0e0,0e0,5e-1,1e0\n1e0,1e0,1.5e0,2e0\n"
        );
    }
}
