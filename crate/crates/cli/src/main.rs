use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use orbitfl_core::contacts::ContactPlan;
use orbitfl_core::orbital::SatelliteId;
use orbitfl_core::orchestration::FailureScheme;
use orbitfl_core::routing::RingDirection;
use orbitfl_core::Error;
use orbitfl_sim::config::{self, preset_names, ScenarioConfig};
use orbitfl_sim::experiments::commload::{run_commload_experiment, CommloadConfig};
use orbitfl_sim::experiments::estimators::{chain_bits_table, nnz_table, Summands};
use orbitfl_sim::experiments::failure::{parse_scheme, run_failure_experiment, FailureConfig};
use orbitfl_sim::metrics::{write_json, write_rows};
use orbitfl_sim::Simulation;

#[derive(Parser)]
#[command(name = "orbitfl", version, about = "Federated learning over LEO satellite constellations")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Overrides the seed of the scenario or experiment.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving the CSV and JSON outputs.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads for sweep cells (default: all cores).
    #[arg(long, global = true)]
    parallel: Option<usize>,
    /// Simulated time limit in seconds for `train` and `windows`.
    #[arg(long, global = true)]
    horizon: Option<f64>,
}

#[derive(Args)]
struct Scenario {
    /// Scenario file (JSON); may name a `preset` to inherit from.
    config: Option<PathBuf>,
    /// Built-in scenario used when no file is given.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario; writes accuracy.csv, traffic.csv and metadata.json.
    Train(Scenario),
    /// Compare sink-failure recovery schemes; writes failure.csv.
    Failure {
        /// Experiment file (JSON); defaults apply to missing fields.
        config: Option<PathBuf>,
        /// Draws per plane size.
        #[arg(long)]
        draws: Option<usize>,
        /// Comma-separated scheme names.
        #[arg(long, value_delimiter = ',')]
        schemes: Option<Vec<String>>,
        /// Exit with status 3 unless pass-to-neighbor takes at least three
        /// times as long as determine-new-sink for every plane of 40 or more.
        #[arg(long)]
        check: bool,
    },
    /// Bits per round with and without in-network aggregation; writes commload.csv.
    Commload {
        config: Option<PathBuf>,
        /// Exit with status 3 if any measured cell exceeds the bound column.
        #[arg(long)]
        check: bool,
    },
    /// Monte Carlo check of the support-size and chain-bits expectations.
    Estimators {
        #[arg(long, value_delimiter = ',', default_values_t = [100usize, 1000, 7850])]
        n_d: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.05, 0.1])]
        q: Vec<f64>,
        /// Largest number of summed vectors.
        #[arg(long, default_value_t = 10)]
        l_max: u32,
        /// Longest chain for the bits table; 0 skips it.
        #[arg(long, default_value_t = 20)]
        h_max: u32,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 32)]
        elem_bits: u32,
        /// Exit with status 3 unless every support-size cell is within three standard errors.
        #[arg(long)]
        check: bool,
    },
    /// Dump PS contact windows and per-plane coverage; writes windows.csv and coverage.csv.
    Windows(Scenario),
    /// List the built-in scenarios.
    Presets,
}

enum Failure {
    Config(Error),
    Runtime(Error),
    Threshold(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Threshold(_) => 3,
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn config_err(e: Error) -> Failure {
    Failure::Config(e)
}

fn runtime(e: Error) -> Failure {
    match e {
        Error::Config(_) => Failure::Config(e),
        other => Failure::Runtime(other),
    }
}

fn scenario(s: &Scenario, g: &Global) -> std::result::Result<ScenarioConfig, Failure> {
    let mut cfg = match (&s.config, &s.preset) {
        (Some(path), _) => config::load(path),
        (None, Some(name)) => config::from_preset(name),
        (None, None) => Err(Error::Config("give a scenario file or --preset".into())),
    }
    .map_err(config_err)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(h) = g.horizon {
        cfg.horizon_s = h;
    }
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

fn train(s: &Scenario, g: &Global) -> Outcome {
    let cfg = scenario(s, g)?;
    let started = Instant::now();
    let sim = Simulation::new(cfg).map_err(runtime)?;
    let meta = sim.metadata();
    let m = sim.run().map_err(runtime)?;
    let out = &g.out_dir;
    m.write_accuracy_csv(&out.join("accuracy.csv")).map_err(runtime)?;
    m.write_traffic_csv(&out.join("traffic.csv")).map_err(runtime)?;
    write_json(&out.join("metadata.json"), &meta).map_err(runtime)?;
    let bits = m.total_bits();
    println!(
        "{}: {} global updates by t = {:.0} s, final accuracy {}, ISL {} bits, PS {} bits ({:.1} s)",
        meta.config.name,
        m.update_times.len(),
        m.end_time,
        m.final_accuracy().map_or("n/a".into(), |a| format!("{a:.4}")),
        bits.isl_bits,
        bits.ps_bits,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn failure(path: Option<&Path>, draws: Option<usize>, schemes: Option<&[String]>, check: bool, g: &Global) -> Outcome {
    let mut cfg: FailureConfig = path.map_or_else(|| Ok(FailureConfig::default()), config::load_json).map_err(config_err)?;
    if let Some(d) = draws {
        cfg.draws = d;
    }
    if let Some(names) = schemes {
        cfg.schemes = names.iter().map(|n| parse_scheme(n)).collect::<orbitfl_core::Result<_>>().map_err(config_err)?;
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(config_err)?;
    let report = run_failure_experiment(&cfg).map_err(runtime)?;
    write_rows(&g.out_dir.join("failure.csv"), &report.rows).map_err(runtime)?;
    for r in &report.rows {
        println!("{:<28} K={:<3} mean {:>8.1} s  stderr {:>6.1} s  failures {}/{}", r.scheme, r.k_p, r.mean_s, r.stderr_s, r.failures, r.draws);
    }
    if check {
        let ptn = FailureScheme::PassToNeighbor { direction: RingDirection::Descending };
        for &k in cfg.k_values.iter().filter(|&&k| k >= 40) {
            let ratio = match (report.mean(&ptn, k), report.mean(&FailureScheme::DetermineNewSink, k)) {
                (Some(p), Some(d)) if d > 0.0 => p / d,
                _ => return Err(Failure::Threshold("--check needs both pass-to-neighbor and determine-new-sink".into())),
            };
            if ratio < 3.0 {
                return Err(Failure::Threshold(format!("K={k}: pass-to-neighbor / determine-new-sink = {ratio:.2} < 3")));
            }
        }
    }
    Ok(())
}

fn commload(path: Option<&Path>, check: bool, g: &Global) -> Outcome {
    let mut cfg: CommloadConfig = path.map_or_else(|| Ok(CommloadConfig::default()), config::load_json).map_err(config_err)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(config_err)?;
    let rows = run_commload_experiment(&cfg).map_err(runtime)?;
    write_rows(&g.out_dir.join("commload.csv"), &rows).map_err(runtime)?;
    for r in &rows {
        println!(
            "q={:<5} K={:<3} IA {:>12.0}  no-IA {:>12.0}  sink-only {:>12.0}  bound {:>12.0}  reduction {:>5.1}%",
            r.q,
            r.k_p,
            r.ia_bits,
            r.no_ia_bits,
            r.sink_only_bits,
            r.bound_bits,
            100.0 * r.reduction()
        );
    }
    if check {
        if let Some(r) = rows.iter().find(|r| r.ia_bits > r.bound_bits) {
            return Err(Failure::Threshold(format!("q={} K={}: IA bits {:.0} above the bound {:.0}", r.q, r.k_p, r.ia_bits, r.bound_bits)));
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn estimators(n_d: &[usize], q: &[f64], l_max: u32, h_max: u32, trials: usize, elem_bits: u32, check: bool, g: &Global) -> Outcome {
    if trials == 0 || l_max == 0 {
        return Err(Failure::Config(Error::Config("trials and --l-max must be positive".into())));
    }
    let seed = g.seed.unwrap_or(1);
    let cells = nnz_table(n_d, q, l_max, trials, seed).map_err(runtime)?;
    println!("{:>6} {:>6} {:>3} {:>12} {:>12} {:>9}", "n_d", "q", "L", "formula", "mc_mean", "stderr");
    for c in &cells {
        println!("{:>6} {:>6} {:>3} {:>12.4} {:>12.4} {:>9.4}", c.n_d, c.q, c.l, c.formula, c.mc_mean, c.stderr);
    }
    write_rows(&g.out_dir.join("estimators_nnz.csv"), &cells).map_err(runtime)?;
    if h_max > 0 {
        for &n in n_d {
            let bits = chain_bits_table(n, elem_bits, q, h_max, trials.min(10_000), Summands::Independent, seed).map_err(runtime)?;
            write_rows(&g.out_dir.join(format!("estimators_bits_{n}.csv")), &bits).map_err(runtime)?;
        }
    }
    if check {
        if let Some(c) = cells.iter().find(|c| !c.agrees(3.0)) {
            return Err(Failure::Threshold(format!("n_d={} q={} L={}: {:.4} vs {:.4} +- {:.4}", c.n_d, c.q, c.l, c.mc_mean, c.formula, c.stderr)));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct WindowRow {
    plane: usize,
    slot: usize,
    begin_s: f64,
    end_s: f64,
}

#[derive(Serialize)]
struct CoverageRow {
    plane: usize,
    coverage: f64,
}

fn windows(s: &Scenario, g: &Global) -> Outcome {
    let cfg = scenario(s, g)?;
    let c = &cfg.constellation;
    let plan = ContactPlan::from_geometry(c, &cfg.ps, 0.0, cfg.horizon_s).map_err(runtime)?;
    let mut rows = Vec::new();
    for plane in 1..=c.num_planes {
        for slot in 1..=c.sats_per_plane {
            for w in plan.windows_of(SatelliteId::new(plane, slot)) {
                rows.push(WindowRow { plane, slot, begin_s: w.begin, end_s: w.end });
            }
        }
    }
    let coverage: Vec<CoverageRow> = (1..=c.num_planes).map(|plane| CoverageRow { plane, coverage: plan.plane_coverage(plane, 0.0, cfg.horizon_s) }).collect();
    write_rows(&g.out_dir.join("windows.csv"), &rows).map_err(runtime)?;
    write_rows(&g.out_dir.join("coverage.csv"), &coverage).map_err(runtime)?;
    for r in &coverage {
        println!("plane {}: PS reachable {:.1}% of the time", r.plane, 100.0 * r.coverage);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let g = &cli.global;
    if let Some(n) = g.parallel {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --parallel {n}: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Train(s) => train(s, g),
        Command::Failure { config, draws, schemes, check } => failure(config.as_deref(), *draws, schemes.as_deref(), *check, g),
        Command::Commload { config, check } => commload(config.as_deref(), *check, g),
        Command::Estimators { n_d, q, l_max, h_max, trials, elem_bits, check } => estimators(n_d, q, *l_max, *h_max, *trials, *elem_bits, *check, g),
        Command::Windows(s) => windows(s, g),
        Command::Presets => {
            preset_names().iter().for_each(|n| println!("{n}"));
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(e) | Failure::Runtime(e) => eprintln!("error: {e}"),
                Failure::Threshold(m) => eprintln!("threshold not met: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
