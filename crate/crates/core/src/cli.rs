//! The `simulate`, `estimate`, and `optimize` entry points behind the
//! command-line binary, and the error-to-exit-code contract:
//! 0 success, 2 configuration error, 3 data error, 4 numerical failure.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{GridConfig, Mode, ModelConfig, RunConfig};
use crate::estimate::{fit_stage2, select_stage1_aic, Side};
use crate::invest::{
    chord_and_boundary_slope, static_optimal, utility_curve, Decision, InvestorProblem,
};
use crate::io::{
    dataset_checksum, load_dataset, save_dataset, simulation_plot_rows, write_plot_csv,
    DatasetPaths, FitReport, PlotRow, Provenance,
};
use crate::sim::{simulate, BookState, SimulationConfig};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Stable classification of failures for scripting.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::InvalidParameter(_)
        | Error::MissingField(_)
        | Error::VectorTooShort { .. }
        | Error::Json(_) => EXIT_CONFIG,
        Error::Parse { .. }
        | Error::NegativeVolume { .. }
        | Error::ShapeMismatch(_)
        | Error::Io(_) => EXIT_DATA,
        Error::SigmaDomain { .. }
        | Error::CflViolation { .. }
        | Error::SingularSystem(_)
        | Error::QuadratureDidNotConverge { .. }
        | Error::Numerical(_)
        | Error::Blowup { .. }
        | Error::InfeasibleBudget { .. }
        | Error::OutOfBook { .. }
        | Error::UtilityInvariant(_) => EXIT_NUMERICAL,
    }
}

/// Everything needed to reproduce a simulation run, written next to its
/// outputs. Deliberately path-free so reruns compare byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub seed: u64,
    pub blowup_threshold: f64,
    pub initial_mid: f64,
    pub truncated: bool,
    pub truncation_step: Option<usize>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Run a simulation and write ask.csv, bid.csv, mid.csv, boundary.csv,
/// manifest.json, and plot.csv into the output directory.
pub fn run_simulate(config: &RunConfig) -> Result<()> {
    let params = config.require_model()?;
    let grid = config.require_grid()?;
    let seed = config.seed.unwrap_or(0);
    let threshold = config.blowup_threshold.unwrap_or(1e6);
    let initial_mid = config.initial_mid.unwrap_or(0.0);
    let sim_config = SimulationConfig::new(grid, seed, threshold)?;

    let result = simulate(&params, &sim_config, initial_mid)?;

    let out = config.out_dir();
    fs::create_dir_all(&out)?;
    save_dataset(&result.dataset, &DatasetPaths::in_dir(&out))?;

    let mut boundary = String::new();
    for s in &result.boundary_path {
        boundary.push_str(&crate::io::format_float(*s));
        boundary.push('\n');
    }
    fs::write(out.join("boundary.csv"), boundary)?;

    let manifest = RunManifest {
        model: ModelConfig::from_params(&params),
        grid: GridConfig {
            dt: grid.dt,
            dx: grid.dx,
            n_time: grid.n_time,
            n_price: grid.n_price,
        },
        seed,
        blowup_threshold: threshold,
        initial_mid,
        truncated: result.truncated,
        truncation_step: result.truncation_step,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    write_plot_csv(&out.join("plot.csv"), &simulation_plot_rows(&result))?;
    Ok(())
}

/// Load a dataset, run both estimation stages, and write report.json.
pub fn run_estimate(config: &RunConfig) -> Result<FitReport> {
    let est = config.estimation.clone().unwrap_or_default();
    est.validate()?;
    let data_dir = config.require_data_dir()?.clone();
    let paths = DatasetPaths::in_dir(&data_dir);
    if est.theta0 > 0.0 && !paths.mid.exists() {
        return Err(Error::MissingField(format!(
            "mid.csv not found in {}; the mid-price path is required when theta0 > 0 (boundary MSE)",
            data_dir.display()
        )));
    }
    let dataset = load_dataset(&paths)?;
    let checksum = dataset_checksum(&paths)?;

    let stage1_ask = select_stage1_aic(&dataset.ask, Side::Ask, &dataset.grid, &est)?;
    let stage1_bid = select_stage1_aic(&dataset.bid, Side::Bid, &dataset.grid, &est)?;
    let stage2 = fit_stage2(&dataset, &stage1_ask, &stage1_bid, &est)?;

    let report = FitReport {
        stage1_ask,
        stage1_bid,
        stage2,
        provenance: Provenance {
            estimation: est,
            dataset_sha256: checksum,
        },
    };
    let out = config.out_dir();
    fs::create_dir_all(&out)?;
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

/// Take a book snapshot from a dataset row, solve the static limit-buy
/// problem, and write decision.json plus the utility / FOC plot series.
pub fn run_optimize(config: &RunConfig) -> Result<Decision> {
    // configuration checks come before any data access
    let wealth = config.wealth.ok_or_else(|| Error::MissingField("wealth".into()))?;
    if !(wealth > 0.0) || !wealth.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "wealth must be positive and finite, got {wealth}"
        )));
    }
    let utility = config
        .utility
        .clone()
        .ok_or_else(|| Error::MissingField("utility".into()))?;
    let params = config.require_model()?;
    let foc_tol = config.foc_tol.unwrap_or(1e-8);

    let data_dir = config.require_data_dir()?.clone();
    let dataset = load_dataset(&DatasetPaths::in_dir(&data_dir))?;
    let row = config.snapshot_row.unwrap_or(dataset.n_time() - 1);
    if row >= dataset.n_time() {
        return Err(Error::InvalidParameter(format!(
            "snapshot_row {row} out of range for a dataset with {} rows",
            dataset.n_time()
        )));
    }
    let grid = dataset.grid;
    let book = BookState {
        ask_rel: dataset.ask.row(row).iter().map(|v| v / grid.dx).collect(),
        bid_rel: dataset.bid.row(row).iter().map(|v| v / grid.dx).collect(),
        mid: dataset.mid[row],
        time: row as f64 * grid.dt,
    };
    let time = book.time;
    let problem = InvestorProblem::new(wealth, time, book, params, grid)?;

    let decision = static_optimal(&problem, &utility, foc_tol)?;

    let out = config.out_dir();
    fs::create_dir_all(&out)?;
    write_json(&out.join("decision.json"), &decision)?;

    let mut rows: Vec<PlotRow> = Vec::new();
    for (b, u, g) in utility_curve(&problem, &utility, 200)? {
        rows.push(PlotRow {
            series: "utility".into(),
            x: b,
            y: u,
        });
        rows.push(PlotRow {
            series: "foc".into(),
            x: b,
            y: g,
        });
    }
    let (chord, slope) = chord_and_boundary_slope(&problem.book, decision.b_star, &grid);
    if chord.is_finite() {
        rows.push(PlotRow {
            series: "chord".into(),
            x: decision.b_star,
            y: chord,
        });
    }
    rows.push(PlotRow {
        series: "boundary_slope".into(),
        x: decision.b_star,
        y: slope,
    });
    write_plot_csv(&out.join("plot.csv"), &rows)?;
    Ok(decision)
}

/// Dispatch on the config's mode discriminator. The subcommand chosen on
/// the command line must agree with it.
pub fn run(config: &RunConfig, requested: Mode) -> Result<()> {
    if config.mode != requested {
        return Err(Error::InvalidParameter(format!(
            "config declares mode {:?} but the {:?} subcommand was invoked",
            config.mode, requested
        )));
    }
    match requested {
        Mode::Simulate => run_simulate(config),
        Mode::Estimate => run_estimate(config).map(|_| ()),
        Mode::Optimize => run_optimize(config).map(|_| ()),
    }
}

/// Load, apply command-line overrides, run, and map errors to the exit
/// code contract.
pub fn execute(
    config_path: &Path,
    requested: Mode,
    seed_override: Option<u64>,
    out_override: Option<std::path::PathBuf>,
) -> i32 {
    let text = match fs::read_to_string(config_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", config_path.display());
            return EXIT_CONFIG;
        }
    };
    let mut config = match RunConfig::from_json(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: invalid config {}: {e}", config_path.display());
            return EXIT_CONFIG;
        }
    };
    if let Some(seed) = seed_override {
        config.seed = Some(seed);
    }
    if let Some(out) = out_override {
        config.out_dir = Some(out);
    }
    match run(&config, requested) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
