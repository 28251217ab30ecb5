use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use losslab::checkpoint::{write_atomic, Checkpoint};
use losslab::config::ExperimentConfig;
use losslab::harness::{self, MetricRow};
use losslab::hessian::{Curvature, DEFAULT_CAP};
use losslab::landscape;
use losslab::quadsim::{self, Bound, Policy, QuadScenario, SolveMode};
use losslab::{Error, Result};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_ACCEPTANCE: u8 = 4;

#[derive(Parser)]
#[command(name = "losslab", version, about = "Continual-learning loss-geometry laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full continual experiment over every configured seed.
    Run {
        config: PathBuf,
        /// Run directory; defaults to runs/<name>-<hash prefix>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Quadratic-regime theorem checks.
    Quadsim {
        /// Scenario JSON; the built-in scenario when omitted.
        config: Option<PathBuf>,
        /// Also write the unconstrained run as a run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Perturbation curve along a Hessian eigenvector at a checkpoint.
    Perturb {
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Task whose loss is perturbed; the checkpoint's task by default.
        #[arg(long)]
        task: Option<usize>,
        /// `lo,hi,n` for a log grid.
        #[arg(long, default_value = "1e-3,1e4,25")]
        radii: String,
        #[arg(long, default_value_t = 0)]
        eig_index: usize,
        #[arg(long, default_value_t = landscape::DEFAULT_N_RANDOM)]
        n_random: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Taylor, recursive and quadratic-prediction error tables of a run.
    Approx {
        run_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Landscape scores of one run, or a comparison of several.
    Score {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        #[arg(long)]
        vnc: bool,
        #[arg(long)]
        blockdiag: bool,
        #[arg(long)]
        similarity: bool,
        #[arg(long)]
        ranks: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes the task sequence of one seed as CSV.
    Gen {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Config(problems) = &e {
                for p in problems {
                    eprintln!("  - {p}");
                }
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidConfig(_) | Error::Json(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn dispatch(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out.unwrap_or_else(|| cfg.default_out_dir());
            let summary = harness::run_experiment(&cfg, &dir)?;
            println!("run complete: {} (config {})", summary.dir.display(), &summary.config_hash[..12]);
            Ok(0)
        }
        Command::Quadsim { config, out } => quadsim_cmd(config.as_deref(), out.as_deref()),
        Command::Perturb {
            checkpoint,
            config,
            task,
            radii,
            eig_index,
            n_random,
            seed,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let spec = cfg.spec()?;
            let ckpt = Checkpoint::read(&checkpoint)?;
            let params = ckpt.params_for(&spec)?;
            let seq = harness::build_tasks(&cfg, ckpt.seed)?;
            let task = task.unwrap_or(ckpt.task as usize);
            let data = harness::hessian_subset(&cfg, &seq, task, ckpt.seed)?;
            let eig = Curvature::new(&spec, &params, &data)?.exact(DEFAULT_CAP)?.eigen();
            if eig_index >= eig.len() {
                return Err(Error::InvalidArgument(format!("eig-index {eig_index} ≥ {}", eig.len())));
            }
            let radii = parse_radii(&radii)?;
            let curve =
                landscape::perturbation_score(&spec, &params, &data, &eig.vector(eig_index), &radii, n_random, seed)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["r", "s", "denominator", "denom_stderr", "reliable"])?;
            for p in &curve {
                w.write_record([
                    p.r.to_string(),
                    p.s.to_string(),
                    p.denominator.to_string(),
                    p.denom_stderr.to_string(),
                    p.reliable.to_string(),
                ])?;
            }
            emit(out.as_deref(), w)?;
            match landscape::convergence_radius(&curve) {
                Some(r) => eprintln!("lambda_{eig_index} = {:e}; s(r) within 0.1 of 1 from r = {r:e}", eig.values[eig_index]),
                None => eprintln!("lambda_{eig_index} = {:e}; s(r) never settles near 1 on this grid", eig.values[eig_index]),
            }
            Ok(0)
        }
        Command::Approx { run_dir, out } => {
            let rows = load_run(&run_dir)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in harness::approx_tables(&rows) {
                w.serialize(r)?;
            }
            emit(out.as_deref(), w)?;
            Ok(0)
        }
        Command::Score {
            run_dirs,
            vnc,
            blockdiag,
            similarity,
            ranks,
            out,
        } => {
            let mut w = csv::Writer::from_writer(Vec::new());
            if run_dirs.len() > 1 {
                let mut runs = Vec::new();
                for d in &run_dirs {
                    let algo = ExperimentConfig::load(&d.join(harness::CONFIG_FILE))
                        .map(|c| c.algorithm.name().to_string())
                        .unwrap_or_else(|_| "unknown".into());
                    runs.push((d.display().to_string(), algo, load_run(d)?));
                }
                for r in harness::comparison_table(&runs) {
                    w.serialize(r)?;
                }
            } else {
                let all = !(vnc || blockdiag || similarity || ranks);
                let rows = load_run(&run_dirs[0])?;
                for r in harness::score_tables(&rows, vnc || all, blockdiag || all, similarity || all, ranks || all) {
                    w.serialize(r)?;
                }
            }
            emit(out.as_deref(), w)?;
            Ok(0)
        }
        Command::Gen { config, out, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let seq = harness::build_tasks(&cfg, seed)?;
            seq.write_csv(&out)?;
            println!("wrote {} tasks to {}", seq.len(), out.display());
            Ok(0)
        }
    }
}

fn quadsim_cmd(config: Option<&Path>, out: Option<&Path>) -> Result<u8> {
    let sc = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str::<QuadScenario>(&text).map_err(|e| Error::Config(vec![e.to_string()]))?
        }
        None => QuadScenario::default(),
    };
    let checks = quadsim::theorem_suite(&sc)?;
    for c in &checks {
        let op = match c.bound {
            Bound::Below => "|v| <",
            Bound::Above => "v >",
        };
        println!(
            "{} {:<42} {:>12.3e}  ({op} {:.0e})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.threshold
        );
    }
    if let Some(dir) = out {
        let tasks = quadsim::unconstrained_scenario(&sc)?;
        let run = quadsim::run_sequence(&tasks, &vec![0.0; sc.dim], Policy::Unconstrained, SolveMode::ClosedForm)?;
        let hash = sc.hash();
        let rows = harness::second_order_rows(&run.checkpoints, &run.ledger, &[], &hash, sc.seed)?;
        let sd = harness::seed_dir(dir, sc.seed);
        std::fs::create_dir_all(&sd).map_err(|e| Error::Io { path: sd.clone(), source: e })?;
        harness::write_rows(&sd.join(harness::METRICS_FILE), &rows)?;
        write_atomic(&dir.join("scenario.json"), &serde_json::to_vec_pretty(&sc)?)?;
        harness::aggregate_dir(dir, &[sc.seed])?;
    }
    if checks.iter().all(|c| c.passed) {
        println!("all theorem checks passed");
        Ok(0)
    } else {
        println!("{} theorem check(s) failed", checks.iter().filter(|c| !c.passed).count());
        Ok(EXIT_ACCEPTANCE)
    }
}

fn load_run(dir: &Path) -> Result<Vec<MetricRow>> {
    let seeds = harness::discover_seeds(dir)?;
    if seeds.is_empty() {
        return Err(Error::InvalidArgument(format!("no seed_*/metrics.csv under {}", dir.display())));
    }
    harness::read_seed_rows(dir, &seeds)
}

fn parse_radii(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || Error::InvalidArgument(format!("radii must be lo,hi,n with 0 < lo < hi, got {s:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].parse().map_err(|_| bad())?;
    let n: usize = parts[2].parse().map_err(|_| bad())?;
    if !(lo > 0.0 && hi > lo && n >= 1) {
        return Err(bad());
    }
    Ok(landscape::log_grid(lo, hi, n))
}

fn emit(out: Option<&Path>, w: csv::Writer<Vec<u8>>) -> Result<()> {
    let bytes = w.into_inner().map_err(|e| Error::Io {
        path: PathBuf::from("<csv buffer>"),
        source: e.into_error(),
    })?;
    match out {
        Some(p) => write_atomic(p, &bytes),
        None => {
            print!("{}", String::from_utf8_lossy(&bytes));
            Ok(())
        }
    }
}
