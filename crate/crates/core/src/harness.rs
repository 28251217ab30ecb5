//! Seeded continual-learning runs and their long-format metric files.
//!
//! Run directory layout:
//!
//! ```text
//! <out>/config.json          resolved config, defaults filled in
//! <out>/seed_<s>/metrics.csv per-seed rows
//! <out>/seed_<s>/theta_<t>.ckpt
//! <out>/aggregate.csv        mean and sample std over seeds
//! <out>/manifest.json
//! <out>/FAILED               only after a mid-run failure
//! ```
//!
//! Rows carry `task_o = 0` when a metric is indexed by `t` alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::algos::{self, GpmMemory, OgdVariant, ProjectionMemory, TaskMask};
use crate::checkpoint::{write_atomic, Checkpoint};
use crate::config::{Algorithm, DatasetConfig, ExperimentConfig};
use crate::error::{Error, Result};
use crate::forgetting::{self, CheckpointSet, ForgettingLedger, HessianView};
use crate::hessian::{Curvature, DEFAULT_CAP};
use crate::landscape;
use crate::linalg;
use crate::mlp::{self, Dataset, MlpSpec, ParamVector};
use crate::tasks::{self, TaskSequence};

pub const METRICS_FILE: &str = "metrics.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";
pub const FAILED_MARKER: &str = "FAILED";

/// What each metric name means. Written into the manifest.
pub const METRIC_DOCS: &[(&str, &str)] = &[
    ("test_loss", "L_o(θ_t) on task o's test split"),
    ("test_acc", "a_{t,o}: accuracy on task o's test split at θ_t"),
    ("forgetting_loss", "E_o(t) = L_o(θ_t) − L_o(θ_o), test split"),
    ("forgetting_acc", "a_{o,o} − a_{t,o}, test split"),
    ("avg_forgetting_loss", "E(t) = mean over o ≤ t of forgetting_loss"),
    ("avg_forgetting_acc", "mean over o ≤ t of forgetting_acc"),
    ("bwt", "mean over o < T of a_{o,o} − a_{T,o}"),
    ("steps", "SGD steps taken on task t"),
    ("memory_rank", "protected directions (or frozen coordinates) after task t"),
    ("hessian_loss", "L_o(θ_t) on task o's Hessian subset"),
    ("vnc", "Δ_tᵀ((1/t) Σ_{o<t} H_o⁺)Δ_t"),
    ("theorem1_predicted", "½Δ_tᵀ((1/t) Σ_{o<t} H_o⁺)Δ_t"),
    ("theorem1_measured", "E(t) on the Hessian subsets"),
    ("theorem1_gap", "|theorem1_predicted − theorem1_measured|"),
    ("recursive_estimate", "recursive second-order estimate of E(t)"),
    ("recursive_error", "|recursive_estimate − E(t)|, Hessian subsets"),
    ("taylor_first_order", "(θ_t − θ_o)ᵀ∇L_o(θ_o)"),
    ("taylor_second_order", "½(θ_t − θ_o)ᵀH_o(θ_t − θ_o)"),
    ("taylor_error", "|taylor total − E_o(t)|, Hessian subsets"),
    ("taylor_error_rank_<r>", "taylor_error with the rank-r Hessian"),
    ("param_distance", "‖θ_t − θ_o‖"),
    ("block_diagonality", "D(H_t) over the layer partition"),
    ("spectral_similarity", "S(H_o, H_t)"),
    ("hessian_rank", "numerical rank of (1/(t−1)) Σ_{o<t} H_o"),
    ("effective_rank_<f>", "eigenvalues above f·λ_max of the same average"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub config_hash: String,
    pub seed: u64,
    pub metric: String,
    pub task_o: usize,
    pub task_t: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub config_hash: String,
    pub metric: String,
    pub task_o: usize,
    pub task_t: usize,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

/// Builds the task sequence of one seed.
pub fn build_tasks(cfg: &ExperimentConfig, seed: u64) -> Result<TaskSequence> {
    match &cfg.dataset {
        DatasetConfig::Toy { n_per_class } => tasks::toy_geometric(seed, *n_per_class),
        DatasetConfig::Rotated {
            source,
            angles,
            downscale,
            n_train,
            n_test,
        } => tasks::rotated_digits(source, angles, *downscale, *n_train, *n_test, seed),
        DatasetConfig::Split {
            source,
            classes_per_task,
            downscale,
            n_train,
            n_test,
        } => {
            let (tr, te) = tasks::load_digits(source, *n_train, *n_test, seed)?;
            let train = tasks::digits_dataset(&tr, *downscale, *n_train, seed)?;
            let test = tasks::digits_dataset(&te, *downscale, *n_test, seed.wrapping_add(1))?;
            tasks::split_by_class(&train, &test, 10, *classes_per_task, seed)
        }
    }
}

/// The seeded training subset of task `t` that second-order metrics use.
pub fn hessian_subset(cfg: &ExperimentConfig, seq: &TaskSequence, t: usize, seed: u64) -> Result<Dataset> {
    let train = &seq
        .tasks
        .get(t.wrapping_sub(1))
        .ok_or_else(|| Error::InvalidArgument(format!("task {t} outside 1..={}", seq.len())))?
        .train;
    let idx = algos::sample_subset(train.len(), cfg.diagnostics.hessian_samples, seed ^ (0xC0FFEE + t as u64 - 1));
    train.subset(&idx)
}

enum Memory {
    None,
    Projection(ProjectionMemory),
    Gpm(GpmMemory),
    Mask(TaskMask),
}

/// Everything one seed produced.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub spec: MlpSpec,
    pub ledger: ForgettingLedger,
    /// Losses on the Hessian subsets; empty without Hessians.
    pub hessian_ledger: Option<ForgettingLedger>,
    pub checkpoints: CheckpointSet,
    pub rows: Vec<MetricRow>,
}

/// Trains every task of one seed and derives its metric rows.
/// Checkpoints go to `ckpt_dir` when given.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, ckpt_dir: Option<&Path>) -> Result<SeedRun> {
    cfg.validate()?;
    let hash = cfg.hash();
    let seq = build_tasks(cfg, seed)?;
    let spec = cfg.spec()?;
    let n_tasks = seq.len();
    let p = spec.param_count();
    let layout = spec.layout();
    let mut params = spec.init_params(seed);
    let mut ledger = ForgettingLedger::new(n_tasks);
    let diag = &cfg.diagnostics;
    let mut hledger = diag.hessians.then(|| ForgettingLedger::new(n_tasks));
    let mut cs = CheckpointSet::new(params.values().to_vec());
    let mut rows = Vec::new();
    let mut push = |metric: &str, o: usize, t: usize, value: f64| {
        rows.push(MetricRow {
            config_hash: hash.clone(),
            seed,
            metric: metric.to_string(),
            task_o: o,
            task_t: t,
            value,
        })
    };
    let subsets: Vec<Dataset> = (1..=n_tasks)
        .map(|t| hessian_subset(cfg, &seq, t, seed))
        .collect::<Result<_>>()?;
    let mut memory = match cfg.algorithm {
        Algorithm::Sgd => Memory::None,
        Algorithm::SgdDagger | Algorithm::Ogd | Algorithm::OgdGtl => Memory::Projection(ProjectionMemory::new(p, p)),
        Algorithm::Gpm => Memory::Gpm(GpmMemory::new(&spec)),
        Algorithm::Mask => Memory::Mask(algos::mask_freeze_allocate(p, 1, cfg.memory.mask_fraction, seed)?),
    };

    for t in 1..=n_tasks {
        let task = &seq.tasks[t - 1];
        let tc = cfg.training.for_task(t, seed);
        let outcome = {
            let gpm_hook;
            let hook: Option<&dyn algos::GradientHook> = match &memory {
                Memory::None => None,
                Memory::Projection(m) => Some(m),
                Memory::Gpm(m) => {
                    gpm_hook = m.hook(&layout);
                    Some(&gpm_hook)
                }
                Memory::Mask(m) => Some(m),
            };
            algos::train_sgd(&spec, &params, &task.train, &tc, hook, false)?
        };
        params = outcome.params;
        push("steps", 0, t, outcome.steps as f64);
        for o in 1..=t {
            let test = &seq.tasks[o - 1].test;
            let loss = mlp::mean_loss(&spec, &params, test)?;
            let acc = mlp::accuracy(&spec, &params, test)?;
            ledger.record(t, o, loss, acc)?;
        }
        if let Some(hl) = hledger.as_mut() {
            for o in 1..=t {
                hl.record_loss(t, o, mlp::mean_loss(&spec, &params, &subsets[o - 1])?)?;
            }
            let curv = Curvature::new(&spec, &params, &subsets[t - 1])?;
            let h = curv.exact(DEFAULT_CAP)?;
            let g = mlp::mean_grad(&spec, &params, &subsets[t - 1])?;
            cs.push(params.values().to_vec(), Some(g.into_values()), Some(h))?;
            cs.ensure_spectra();
        } else {
            cs.push(params.values().to_vec(), None, None)?;
        }
        if let Some(dir) = ckpt_dir {
            if diag.save_checkpoints {
                Checkpoint::new(&spec, &params, t as u64, seed).write(&dir.join(format!("theta_{t}.ckpt")))?;
            }
        }
        if t < n_tasks {
            memory = update_memory(cfg, &spec, &params, &seq, &subsets[t - 1], &cs, memory, t, seed)?;
        }
        let rank = match &memory {
            Memory::None => 0,
            Memory::Projection(m) => m.rank(),
            Memory::Gpm(m) => m.ranks().iter().sum(),
            Memory::Mask(m) => m.mask.iter().filter(|&&v| v == 0.0).count(),
        };
        push("memory_rank", 0, t, rank as f64);
    }

    for t in 1..=n_tasks {
        for o in 1..=t {
            push("test_loss", o, t, ledger.loss(t, o)?);
            push("test_acc", o, t, ledger.acc(t, o)?);
            if o < t {
                push("forgetting_loss", o, t, ledger.forgetting(o, t)?);
                push("forgetting_acc", o, t, ledger.accuracy_forgetting(o, t)?);
            }
        }
        push("avg_forgetting_loss", 0, t, ledger.avg_forgetting(t)?);
        push("avg_forgetting_acc", 0, t, ledger.avg_accuracy_forgetting(t)?);
    }
    if n_tasks >= 2 {
        push("bwt", 0, n_tasks, ledger.bwt()?);
    }
    if let Some(hl) = &hledger {
        for r in second_order_rows(&cs, hl, &diag.taylor_ranks, &hash, seed)? {
            rows.push(r);
        }
        for t in 1..=n_tasks {
            let h = cs.hessian(t)?;
            if diag.block_diagonality {
                if let Some(d) = defined(landscape::block_diagonality(h, &layout))? {
                    push_row(&mut rows, &hash, seed, "block_diagonality", 0, t, d);
                }
            }
            if diag.similarity {
                for o in 1..t {
                    if let Some(s) = defined(landscape::spectral_similarity(cs.hessian(o)?, h))? {
                        push_row(&mut rows, &hash, seed, "spectral_similarity", o, t, s);
                    }
                }
            }
        }
        if !diag.rank_fractions.is_empty() && n_tasks >= 2 {
            let mut last = 0;
            for r in landscape::rank_evolution(&cs, &diag.rank_fractions)? {
                if r.t != last {
                    push_row(&mut rows, &hash, seed, "hessian_rank", 0, r.t, r.rank as f64);
                    last = r.t;
                }
                push_row(
                    &mut rows,
                    &hash,
                    seed,
                    &format!("effective_rank_{}", r.lambda_frac),
                    0,
                    r.t,
                    r.eff_rank as f64,
                );
            }
        }
    }
    Ok(SeedRun {
        seed,
        spec,
        ledger,
        hessian_ledger: hledger,
        checkpoints: cs,
        rows,
    })
}

#[allow(clippy::too_many_arguments)]
fn update_memory(
    cfg: &ExperimentConfig,
    spec: &MlpSpec,
    params: &ParamVector,
    seq: &TaskSequence,
    hessian_data: &Dataset,
    cs: &CheckpointSet,
    memory: Memory,
    t: usize,
    seed: u64,
) -> Result<Memory> {
    let data = &seq.tasks[t - 1].train;
    let m = &cfg.memory;
    let salt = seed ^ (t as u64).wrapping_mul(0x5851_F42D_4C95_7F2D);
    Ok(match (cfg.algorithm, memory) {
        (Algorithm::SgdDagger, Memory::Projection(mem)) => {
            let spectrum = cs.spectra.get(t - 1).and_then(|s| s.as_ref());
            Memory::Projection(algos::sgd_dagger_after_task(spec, params, hessian_data, &mem, m.selection(), spectrum)?)
        }
        (Algorithm::Ogd, Memory::Projection(mem)) => Memory::Projection(algos::ogd_after_task(
            spec,
            params,
            data,
            &mem,
            OgdVariant::All,
            m.sample_cap,
            salt,
        )?),
        (Algorithm::OgdGtl, Memory::Projection(mem)) => Memory::Projection(algos::ogd_after_task(
            spec,
            params,
            data,
            &mem,
            OgdVariant::Gtl,
            m.sample_cap,
            salt,
        )?),
        (Algorithm::Gpm, Memory::Gpm(mem)) => {
            Memory::Gpm(algos::gpm_after_task(spec, params, data, &mem, m.epsilon, m.sample_cap, salt)?)
        }
        (Algorithm::Mask, Memory::Mask(_)) => {
            Memory::Mask(algos::mask_freeze_allocate(spec.param_count(), t + 1, m.mask_fraction, seed)?)
        }
        (_, other) => other,
    })
}

/// Scores that are undefined at this checkpoint (say, an all-zero weight
/// Hessian after every unit died) produce no row.
fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Undefined(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn push_row(rows: &mut Vec<MetricRow>, hash: &str, seed: u64, metric: &str, o: usize, t: usize, value: f64) {
    rows.push(MetricRow {
        config_hash: hash.to_string(),
        seed,
        metric: metric.to_string(),
        task_o: o,
        task_t: t,
        value,
    });
}

/// Second-order rows from a checkpoint set with gradients and Hessians
/// and a ledger measured on the same data.
pub fn second_order_rows(
    cs: &CheckpointSet,
    ledger: &ForgettingLedger,
    taylor_ranks: &[usize],
    hash: &str,
    seed: u64,
) -> Result<Vec<MetricRow>> {
    let n = cs.tasks();
    let mut rows = Vec::new();
    for t in 1..=n {
        for o in 1..=t {
            push_row(&mut rows, hash, seed, "hessian_loss", o, t, ledger.loss(t, o)?);
        }
    }
    if n < 2 {
        return Ok(rows);
    }
    let series = forgetting::recursive_series(cs, HessianView::Exact, n)?;
    for t in 2..=n {
        push_row(&mut rows, hash, seed, "vnc", 0, t, forgetting::vnc(cs, t)?);
        let th = forgetting::theorem1_check(cs, ledger, t, forgetting::THEOREM1_THRESHOLD)?;
        push_row(&mut rows, hash, seed, "theorem1_predicted", 0, t, th.predicted);
        push_row(&mut rows, hash, seed, "theorem1_measured", 0, t, th.measured);
        push_row(&mut rows, hash, seed, "theorem1_gap", 0, t, th.gap);
        let e = ledger.avg_forgetting(t)?;
        push_row(&mut rows, hash, seed, "recursive_estimate", 0, t, series[t - 1]);
        push_row(&mut rows, hash, seed, "recursive_error", 0, t, (series[t - 1] - e).abs());
        for o in 1..t {
            let measured = ledger.forgetting(o, t)?;
            let tay = forgetting::taylor_forgetting(cs, HessianView::Exact, o, t)?;
            push_row(&mut rows, hash, seed, "taylor_first_order", o, t, tay.first_order);
            push_row(&mut rows, hash, seed, "taylor_second_order", o, t, tay.second_order);
            push_row(&mut rows, hash, seed, "taylor_error", o, t, (tay.total - measured).abs());
            for &r in taylor_ranks {
                let tr = forgetting::taylor_forgetting(cs, HessianView::Rank(r), o, t)?;
                push_row(
                    &mut rows,
                    hash,
                    seed,
                    &format!("taylor_error_rank_{r}"),
                    o,
                    t,
                    (tr.total - measured).abs(),
                );
            }
            let d = linalg::norm(&linalg::sub(cs.theta(t)?, cs.theta(o)?));
            push_row(&mut rows, hash, seed, "param_distance", o, t, d);
        }
    }
    Ok(rows)
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

pub fn read_rows(path: &Path) -> Result<Vec<MetricRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize().map(|x| x.map_err(Error::from)).collect()
}

/// Mean and sample std over seeds of every `(metric, task_o, task_t)`.
pub fn aggregate(rows: &[MetricRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, String, usize, usize), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.config_hash.clone(), r.metric.clone(), r.task_o, r.task_t))
            .or_default()
            .push(r.value);
    }
    groups
        .into_iter()
        .map(|((config_hash, metric, task_o, task_t), v)| {
            let (mean, std) = mean_std(&v);
            AggregateRow {
                config_hash,
                metric,
                task_o,
                task_t,
                n: v.len(),
                mean,
                std,
            }
        })
        .collect()
}

/// Mean and sample (n − 1) standard deviation; std is 0 when n < 2.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    config_hash: String,
    code_version: &'static str,
    status: &'static str,
    seeds: &'a [u64],
    config: &'a ExperimentConfig,
    metrics: BTreeMap<&'static str, &'static str>,
    notes: Vec<&'static str>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub config_hash: String,
    pub aggregate: Vec<AggregateRow>,
}

pub fn seed_dir(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed_{seed}"))
}

/// Runs every seed into `dir`. A failure leaves the finished seeds in
/// place and writes a `FAILED` marker with the error.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let marker = dir.join(FAILED_MARKER);
    if marker.exists() {
        std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    let hash = cfg.hash();
    write_atomic(&dir.join(CONFIG_FILE), &serde_json::to_vec_pretty(cfg)?)?;
    for &seed in &cfg.seeds {
        let sd = seed_dir(dir, seed);
        let res = std::fs::create_dir_all(&sd)
            .map_err(|e| Error::io(&sd, e))
            .and_then(|_| run_seed(cfg, seed, Some(&sd)))
            .and_then(|run| write_rows(&sd.join(METRICS_FILE), &run.rows));
        if let Err(e) = res {
            write_atomic(&marker, format!("seed {seed}: {e}\n").as_bytes())?;
            write_manifest(cfg, dir, &hash, "failed")?;
            return Err(e);
        }
    }
    let aggregate = aggregate_dir(dir, &cfg.seeds)?;
    write_manifest(cfg, dir, &hash, "complete")?;
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        config_hash: hash,
        aggregate,
    })
}

/// Recomputes `aggregate.csv` from the per-seed files alone.
pub fn aggregate_dir(dir: &Path, seeds: &[u64]) -> Result<Vec<AggregateRow>> {
    let rows = read_seed_rows(dir, seeds)?;
    let agg = aggregate(&rows);
    write_rows(&dir.join(AGGREGATE_FILE), &agg)?;
    Ok(agg)
}

pub fn read_seed_rows(dir: &Path, seeds: &[u64]) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for &s in seeds {
        rows.extend(read_rows(&seed_dir(dir, s).join(METRICS_FILE))?);
    }
    Ok(rows)
}

/// Seeds present in a run directory, ascending.
pub fn discover_seeds(dir: &Path) -> Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if let Some(s) = name.to_str().and_then(|n| n.strip_prefix("seed_")).and_then(|n| n.parse().ok()) {
            if entry.path().join(METRICS_FILE).exists() {
                seeds.push(s);
            }
        }
    }
    seeds.sort_unstable();
    Ok(seeds)
}

fn write_manifest(cfg: &ExperimentConfig, dir: &Path, hash: &str, status: &'static str) -> Result<()> {
    let m = Manifest {
        config_hash: hash.to_string(),
        code_version: env!("CARGO_PKG_VERSION"),
        status,
        seeds: &cfg.seeds,
        config: cfg,
        metrics: METRIC_DOCS.iter().copied().collect(),
        notes: vec![
            "test_* and forgetting_* rows use each task's test split",
            "second-order rows use a seeded subset of each task's training split of size diagnostics.hessian_samples",
            "aggregate.csv is recomputed from the seed_*/metrics.csv files",
            "block_diagonality and spectral_similarity rows are omitted where the score is undefined",
        ],
    };
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&m)?)
}

/// One row of a summary table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub table: String,
    pub statistic: String,
    pub scope: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

/// Per-seed mean of `metric` over rows accepted by `keep`, ordered by seed.
pub fn per_seed_mean(rows: &[MetricRow], metric: &str, keep: impl Fn(&MetricRow) -> bool) -> Vec<f64> {
    let mut by_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.metric == metric && keep(r)) {
        by_seed.entry(r.seed).or_default().push(r.value);
    }
    by_seed.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect()
}

fn table_row(table: &str, statistic: &str, scope: &str, per_seed: &[f64]) -> Option<TableRow> {
    if per_seed.is_empty() {
        return None;
    }
    let (mean, std) = mean_std(per_seed);
    Some(TableRow {
        table: table.into(),
        statistic: statistic.into(),
        scope: scope.into(),
        n: per_seed.len(),
        mean,
        std,
    })
}

/// Approximation-error tables. Each statistic is averaged within a seed,
/// then reported as mean and std across seeds.
pub fn approx_tables(rows: &[MetricRow]) -> Vec<TableRow> {
    let mut out = Vec::new();
    let max_t = rows.iter().map(|r| r.task_t).max().unwrap_or(0);
    let all = |_: &MetricRow| true;
    let prev = |r: &MetricRow| r.task_o + 1 == r.task_t;
    for (metric, label) in [("taylor_error", "taylor_error"), ("param_distance", "param_distance")] {
        out.extend(table_row("taylor", label, "o<t", &per_seed_mean(rows, metric, all)));
        out.extend(table_row("taylor", label, "o=t-1", &per_seed_mean(rows, metric, prev)));
    }
    let mut ranked: Vec<String> = rows
        .iter()
        .filter(|r| r.metric.starts_with("taylor_error_rank_"))
        .map(|r| r.metric.clone())
        .collect();
    ranked.sort_by_key(|m| m.trim_start_matches("taylor_error_rank_").parse::<usize>().unwrap_or(usize::MAX));
    ranked.dedup();
    for m in &ranked {
        out.extend(table_row("taylor_rank", m, "o<t", &per_seed_mean(rows, m, all)));
    }
    for t in 2..=max_t {
        let scope = format!("t={t}");
        out.extend(table_row("recursive", "recursive_error", &scope, &per_seed_mean(rows, "recursive_error", |r| r.task_t == t)));
    }
    for t in 2..=max_t {
        let scope = format!("t={t}");
        out.extend(table_row("theorem1", "theorem1_gap", &scope, &per_seed_mean(rows, "theorem1_gap", |r| r.task_t == t)));
    }
    out
}

/// Landscape-score tables for the requested families.
pub fn score_tables(rows: &[MetricRow], vnc: bool, blockdiag: bool, similarity: bool, ranks: bool) -> Vec<TableRow> {
    let mut out = Vec::new();
    let max_t = rows.iter().map(|r| r.task_t).max().unwrap_or(0);
    let family = |metric: &str, on: bool, out: &mut Vec<TableRow>| {
        if !on {
            return;
        }
        out.extend(table_row(metric, metric, "mean over t", &per_seed_mean(rows, metric, |_| true)));
        for t in 1..=max_t {
            out.extend(table_row(metric, metric, &format!("t={t}"), &per_seed_mean(rows, metric, |r| r.task_t == t)));
        }
    };
    family("vnc", vnc, &mut out);
    family("block_diagonality", blockdiag, &mut out);
    family("spectral_similarity", similarity, &mut out);
    if ranks {
        let mut names: Vec<String> = rows
            .iter()
            .filter(|r| r.metric == "hessian_rank" || r.metric.starts_with("effective_rank_"))
            .map(|r| r.metric.clone())
            .collect();
        names.sort();
        names.dedup();
        for m in names {
            for t in 1..=max_t {
                out.extend(table_row("ranks", &m, &format!("t={t}"), &per_seed_mean(rows, &m, |r| r.task_t == t)));
            }
        }
    }
    out
}

/// Final average forgetting and mean VNC of several runs side by side.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub run: String,
    pub algorithm: String,
    pub statistic: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn comparison_table(runs: &[(String, String, Vec<MetricRow>)]) -> Vec<ComparisonRow> {
    let mut out = Vec::new();
    for (label, algorithm, rows) in runs {
        let last = rows.iter().map(|r| r.task_t).max().unwrap_or(0);
        for (stat, metric, keep) in [
            ("avg_forgetting_acc(T)", "avg_forgetting_acc", Box::new(move |r: &MetricRow| r.task_t == last) as Box<dyn Fn(&MetricRow) -> bool>),
            ("avg_forgetting_loss(T)", "avg_forgetting_loss", Box::new(move |r: &MetricRow| r.task_t == last)),
            ("vnc mean over t", "vnc", Box::new(|_: &MetricRow| true)),
        ] {
            let v = per_seed_mean(rows, metric, keep);
            if v.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&v);
            out.push(ComparisonRow {
                run: label.clone(),
                algorithm: algorithm.clone(),
                statistic: stat.into(),
                n: v.len(),
                mean,
                std,
            });
        }
    }
    out
}
