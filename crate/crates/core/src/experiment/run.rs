//! Executes a configuration and writes its artifacts.
//!
//! Per seed `s` a run directory holds:
//!
//! - `metrics_seed{s}.csv`: one row per epoch, columns `epoch, stage,
//!   L_0..L_K, lambda_0..lambda_K, rel_l2, rel_l1, lr` followed by the task
//!   parameters. Test columns are empty on epochs without test evaluation.
//! - `lambda_seed{s}.csv`: `epoch, lambda_0..lambda_K`, a row whenever the
//!   weights change.
//! - `timing_seed{s}.csv`: `epoch, wall_seconds` (not reproducible).
//! - `histogram_seed{s}.csv`: `epoch, bin_left, bin_right, count_L0..`.
//! - `gradient_stats_seed{s}.csv`: `epoch, objective, mean, std, max_abs`.
//! - `spectrum_seed{s}.csv`: `k, target, model` at the end (periodic grids).
//! - `residual_spectrum_seed{s}.csv`: `epoch, kx, ky, magnitude` at the
//!   snapshot epochs (periodic grids).
//! - `checkpoint_seed{s}_epoch{e}.json` at snapshot epochs and
//!   `checkpoint_seed{s}.json` at the end.
//!
//! plus `config.toml`, `summary.csv` (`seed, rel_l2, rel_l1, L_0..L_K` at the
//! end) and `manifest.json` with SHA-256 hashes of every file.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ConfigError, ProblemKind, RunConfig};
use crate::balancing::ObjectiveGradients;
use crate::diagnostics::{
    gradient_histogram, power_spectrum, residual_spectrum, stiffness_probe, DiagnosticsError, ProbeConfig,
    SpectrumResult, StiffnessProbe,
};
use crate::network::{init_mlp, Checkpoint, MlpConfig, MlpParams};
use crate::problems::{
    fmt_f64, poisson, write_points_csv, GradientRequest, PoissonProblem, Problem, ProblemError, SobolevProblem,
};
use crate::rng;
use crate::training::{train, EpochRecord, TrainingError, TrainingTrace};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("seed {seed}: {source}")]
    Problem {
        seed: u64,
        #[source]
        source: ProblemError,
    },
    #[error("seed {seed}: {source}")]
    Training {
        seed: u64,
        #[source]
        source: TrainingError,
    },
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error("{} of {} repetitions failed: {}", failures.len(), total, failures.join("; "))]
    Failed { failures: Vec<String>, total: usize },
}

impl RunError {
    pub fn is_config(&self) -> bool {
        matches!(self, RunError::Config(_))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> RunError + '_ {
    move |e| RunError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    }
}

/// Outcome of one repetition.
pub struct SeedResult {
    pub seed: u64,
    pub trace: TrainingTrace,
    pub net: MlpParams,
    pub task: Vec<f64>,
    /// Final test errors.
    pub rel_l2: f64,
    pub rel_l1: Option<f64>,
    /// Target and model spectra at the end, on periodic grids.
    pub spectra: Option<(SpectrumResult, SpectrumResult)>,
    /// Files written, relative to the run directory.
    pub files: Vec<String>,
}

pub struct RunReport {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub seeds: Vec<SeedResult>,
    pub probes: Vec<StiffnessProbe>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
    /// Whether reruns reproduce the file exactly.
    pub deterministic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub problem: ProblemKind,
    pub strategy: String,
    pub seeds: Vec<u64>,
    /// `complete`, or `partial` when a repetition failed.
    pub status: String,
    pub failures: Vec<String>,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self, RunError> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| RunError::Io {
            path,
            source: e.into(),
        })
    }

    pub fn hash_of(&self, path: &str) -> Option<&str> {
        self.files.iter().find(|f| f.path == path).map(|f| f.sha256.as_str())
    }
}

pub fn sha256_file(path: &Path) -> std::io::Result<(String, u64)> {
    let bytes = std::fs::read(path)?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

fn build_problem(config: &RunConfig, seed: u64) -> Result<Box<dyn Problem>, ProblemError> {
    Ok(match config.problem {
        ProblemKind::Sobolev | ProblemKind::Forgetting => Box::new(SobolevProblem::new(config.sobolev.clone(), seed)?),
        ProblemKind::Poisson => Box::new(PoissonProblem::new(config.poisson.clone(), seed)?),
        ProblemKind::StiffnessProbe => unreachable!("the probe does not train"),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn metrics_header(k: usize, task: &[String]) -> Vec<String> {
    let mut h = vec!["epoch".to_string(), "stage".to_string()];
    h.extend((0..k).map(|i| format!("L_{i}")));
    h.extend((0..k).map(|i| format!("lambda_{i}")));
    h.extend(["rel_l2", "rel_l1", "lr"].map(String::from));
    h.extend(task.iter().cloned());
    h
}

fn metrics_row(r: &EpochRecord) -> Vec<String> {
    let mut row = vec![r.epoch.to_string(), r.stage.to_string()];
    row.extend(r.losses.iter().map(|&v| fmt_f64(v)));
    row.extend(r.lambda.iter().map(|&v| fmt_f64(v)));
    row.push(opt(r.rel_l2));
    row.push(opt(r.rel_l1));
    row.push(fmt_f64(r.lr));
    row.extend(r.task.iter().map(|&v| fmt_f64(v)));
    row
}

/// Gradient histograms and statistics of every objective over the whole
/// training pool.
fn histogram_rows(
    problem: &mut dyn Problem,
    net: &MlpParams,
    task: &[f64],
    bins: usize,
    epoch: usize,
    hist: &mut Vec<Vec<String>>,
    stats: &mut Vec<Vec<String>>,
) -> Result<(), RunError> {
    let all: Vec<usize> = (0..problem.num_objectives()).collect();
    let mut r = rng::stream(0, "histogram");
    let batch = problem.epoch_batches(problem.pool_size(), &mut r).remove(0);
    let ev = problem.evaluate(net, task, &batch, GradientRequest::PerObjective(&all));
    let grads = ObjectiveGradients::new(ev.grads).map_err(|e| DiagnosticsError::Probe(e.to_string()))?;
    let h = gradient_histogram(&grads, bins)?;
    for b in 0..bins {
        let mut row = vec![epoch.to_string(), fmt_f64(h.edges[b]), fmt_f64(h.edges[b + 1])];
        row.extend(h.counts.iter().map(|c| c[b].to_string()));
        hist.push(row);
    }
    for (k, s) in h.stats.iter().enumerate() {
        stats.push(vec![
            epoch.to_string(),
            k.to_string(),
            fmt_f64(s.mean),
            fmt_f64(s.std),
            fmt_f64(s.max_abs),
        ]);
    }
    Ok(())
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn export_points(problem: &dyn Problem, config: &RunConfig, seed: u64, dir: &Path) -> Result<Vec<String>, RunError> {
    let mut files = Vec::new();
    match config.problem {
        ProblemKind::Poisson => {
            let p = PoissonProblem::new(config.poisson.clone(), seed).map_err(|source| RunError::Problem { seed, source })?;
            let w = config.poisson.omega;
            let f: Vec<f64> = p.interior_points().chunks_exact(2).map(|q| poisson::forcing(w, q[0], q[1])).collect();
            let name = format!("interior_points_seed{seed}.csv");
            write_points_csv(&dir.join(&name), p.interior_points(), &[("f", &f)]).map_err(io_err(&dir.join(&name)))?;
            files.push(name);
            let b: Vec<f64> =
                p.boundary_points().chunks_exact(2).map(|q| poisson::exact_solution(w, q[0], q[1])).collect();
            let name = format!("boundary_points_seed{seed}.csv");
            write_points_csv(&dir.join(&name), p.boundary_points(), &[("u", &b)]).map_err(io_err(&dir.join(&name)))?;
            files.push(name);
        }
        _ => {
            let p = SobolevProblem::new(config.sobolev.clone(), seed).map_err(|source| RunError::Problem { seed, source })?;
            let n = p.grid_points().len() / 2;
            let u: Vec<f64> = (0..n).map(|i| p.target(i, 0)).collect();
            let mut train = vec![0.0; n];
            for &i in p.train_indices() {
                train[i] = 1.0;
            }
            let name = format!("grid_points_seed{seed}.csv");
            write_points_csv(&dir.join(&name), p.grid_points(), &[("u", &u), ("train", &train)])
                .map_err(io_err(&dir.join(&name)))?;
            files.push(name);
        }
    }
    let _ = problem;
    Ok(files)
}

/// Trains one repetition and writes its files into `dir`.
pub fn run_seed(config: &RunConfig, seed: u64, dir: &Path) -> Result<SeedResult, RunError> {
    let mut problem = build_problem(config, seed).map_err(|source| RunError::Problem { seed, source })?;
    let net_config: MlpConfig = config.network.mlp();
    let mut tcfg = config.training.clone();
    tcfg.seed = seed;
    let k = problem.num_objectives();
    let task_names = problem.task_param_names();
    let mut files = Vec::new();

    let metrics_name = format!("metrics_seed{seed}.csv");
    let metrics_path = dir.join(&metrics_name);
    let mut metrics = csv::Writer::from_path(&metrics_path).map_err(csv_err(&metrics_path))?;
    metrics
        .write_record(metrics_header(k, &task_names))
        .map_err(csv_err(&metrics_path))?;

    let out = &config.output;
    let mut hist_rows = Vec::new();
    let mut stat_rows = Vec::new();
    if out.histogram_epochs.contains(&0) {
        let net0 = init_mlp(&net_config.clone().with_seed(seed)).map_err(|e| RunError::Training {
            seed,
            source: e.into(),
        })?;
        let task0 = problem.initial_task_params();
        histogram_rows(problem.as_mut(), &net0, &task0, out.histogram_bins, 0, &mut hist_rows, &mut stat_rows)?;
    }

    let mut snapshots: BTreeMap<usize, (MlpParams, Vec<f64>)> = BTreeMap::new();
    let mut hist_snaps: BTreeMap<usize, (MlpParams, Vec<f64>)> = BTreeMap::new();
    let mut write_error = None;
    let outcome = train(problem.as_mut(), &net_config, &tcfg, &mut |r, net, task| {
        if write_error.is_none() {
            if let Err(e) = metrics.write_record(metrics_row(r)) {
                write_error = Some(e);
            }
        }
        if out.snapshot_epochs.contains(&r.epoch) {
            snapshots.insert(r.epoch, (net.clone(), task.to_vec()));
        }
        if out.histogram_epochs.contains(&(r.epoch + 1)) {
            hist_snaps.insert(r.epoch + 1, (net.clone(), task.to_vec()));
        }
    });
    if let Some(e) = write_error {
        return Err(csv_err(&metrics_path)(e));
    }
    metrics.flush().map_err(io_err(&metrics_path))?;
    drop(metrics);
    files.push(metrics_name);
    let outcome = outcome.map_err(|source| RunError::Training { seed, source })?;
    let trace = outcome.trace;

    // weight trajectory
    let mut lambda_rows: Vec<Vec<String>> = Vec::new();
    let mut last: Option<&Vec<f64>> = None;
    for r in &trace.records {
        if last != Some(&r.lambda) {
            let mut row = vec![r.epoch.to_string()];
            row.extend(r.lambda.iter().map(|&v| fmt_f64(v)));
            lambda_rows.push(row);
            last = Some(&r.lambda);
        }
    }
    let mut header = vec!["epoch".to_string()];
    header.extend((0..k).map(|i| format!("lambda_{i}")));
    let name = format!("lambda_seed{seed}.csv");
    write_rows(&dir.join(&name), &header, &lambda_rows)?;
    files.push(name);

    let timing: Vec<Vec<String>> = trace
        .records
        .iter()
        .map(|r| vec![r.epoch.to_string(), format!("{:.6}", r.wall)])
        .collect();
    let name = format!("timing_seed{seed}.csv");
    write_rows(&dir.join(&name), &strings(&["epoch", "wall_seconds"]), &timing)?;
    files.push(name);

    for (epoch, (net, task)) in &hist_snaps {
        histogram_rows(problem.as_mut(), net, task, out.histogram_bins, *epoch, &mut hist_rows, &mut stat_rows)?;
    }
    if !hist_rows.is_empty() {
        let mut header = strings(&["epoch", "bin_left", "bin_right"]);
        header.extend((0..k).map(|i| format!("count_L{i}")));
        let name = format!("histogram_seed{seed}.csv");
        write_rows(&dir.join(&name), &header, &hist_rows)?;
        files.push(name);
        let name = format!("gradient_stats_seed{seed}.csv");
        write_rows(&dir.join(&name), &strings(&["epoch", "objective", "mean", "std", "max_abs"]), &stat_rows)?;
        files.push(name);
    }

    // spectra on periodic grids
    let mut spectra = None;
    let mut residual_rows = Vec::new();
    for (epoch, (net, _)) in &snapshots {
        if let Some(g) = problem.grid_fields(net).filter(|g| g.side.is_power_of_two()) {
            let r = residual_spectrum(&g.model, &g.target, g.side, *epoch)?;
            for (i, m) in r.magnitude.iter().enumerate() {
                residual_rows.push(vec![
                    epoch.to_string(),
                    (i % g.side).to_string(),
                    (i / g.side).to_string(),
                    fmt_f64(*m),
                ]);
            }
        }
    }
    if !residual_rows.is_empty() {
        let name = format!("residual_spectrum_seed{seed}.csv");
        write_rows(&dir.join(&name), &strings(&["epoch", "kx", "ky", "magnitude"]), &residual_rows)?;
        files.push(name);
    }
    if let Some(g) = problem.grid_fields(&outcome.net).filter(|g| g.side.is_power_of_two()) {
        let target = power_spectrum(&g.target, g.side)?;
        let model = power_spectrum(&g.model, g.side)?;
        let rows: Vec<Vec<String>> = target
            .k
            .iter()
            .map(|&k| vec![k.to_string(), fmt_f64(target.energy[k]), fmt_f64(model.energy[k])])
            .collect();
        let name = format!("spectrum_seed{seed}.csv");
        write_rows(&dir.join(&name), &strings(&["k", "target", "model"]), &rows)?;
        files.push(name);
        spectra = Some((target, model));
    }

    let norm = problem.norm_stats().clone();
    for (epoch, (net, task)) in &snapshots {
        let name = format!("checkpoint_seed{seed}_epoch{epoch}.json");
        let c = Checkpoint::new(&net_config.clone().with_seed(seed), &norm, net, task, *epoch);
        std::fs::write(dir.join(&name), c.to_json()).map_err(io_err(&dir.join(&name)))?;
        files.push(name);
    }
    let last_epoch = trace.records.last().map_or(0, |r| r.epoch);
    let name = format!("checkpoint_seed{seed}.json");
    let c = Checkpoint::new(&net_config.clone().with_seed(seed), &norm, &outcome.net, &outcome.task, last_epoch);
    std::fs::write(dir.join(&name), c.to_json()).map_err(io_err(&dir.join(&name)))?;
    files.push(name);

    if out.points {
        files.extend(export_points(problem.as_ref(), config, seed, dir)?);
    }

    let last = trace.records.last().expect("at least one epoch");
    Ok(SeedResult {
        seed,
        rel_l2: last.rel_l2.expect("the last epoch is always tested"),
        rel_l1: last.rel_l1,
        trace,
        net: outcome.net,
        task: outcome.task,
        spectra,
        files,
    })
}

fn write_manifest(config: &RunConfig, dir: &Path, files: &[String], failures: &[String]) -> Result<(), RunError> {
    let mut entries = Vec::new();
    let mut names: Vec<&String> = files.iter().collect();
    names.sort();
    for name in names {
        let path = dir.join(name);
        let (sha256, bytes) = sha256_file(&path).map_err(io_err(&path))?;
        entries.push(FileEntry {
            path: name.clone(),
            sha256,
            bytes,
            deterministic: !name.starts_with("timing_"),
        });
    }
    let manifest = Manifest {
        problem: config.problem,
        strategy: config.strategy().name().to_string(),
        seeds: config.seeds.clone(),
        status: if failures.is_empty() { "complete" } else { "partial" }.into(),
        failures: failures.to_vec(),
        files: entries,
    };
    let path = dir.join(MANIFEST);
    let mut f = File::create(&path).map_err(io_err(&path))?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    writeln!(f, "{text}").map_err(io_err(&path))
}

/// Stiffness probe over every configured order.
pub fn run_probe(config: &RunConfig, dir: &Path) -> Result<RunReport, RunError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, config.to_toml()).map_err(io_err(&config_path))?;
    let probe_cfg = ProbeConfig {
        net: config.network.mlp(),
        grid: config.probe.grid,
        length: TAU,
        seeds: config.seeds.clone(),
        retries: 3,
        window: config.probe.window,
    };
    let mut probes = Vec::new();
    let mut rows = Vec::new();
    for &m in &config.probe.orders {
        let p = stiffness_probe(m, &config.probe.k0, &probe_cfg)?;
        for (k0, r) in p.k0.iter().zip(&p.ratios) {
            rows.push(vec![m.to_string(), k0.to_string(), fmt_f64(*r), fmt_f64(p.slope)]);
        }
        probes.push(p);
    }
    write_rows(&dir.join("stiffness.csv"), &strings(&["m", "k0", "ratio", "slope"]), &rows)?;
    write_manifest(config, dir, &["config.toml".into(), "stiffness.csv".into()], &[])?;
    Ok(RunReport {
        dir: dir.to_path_buf(),
        config: config.clone(),
        seeds: Vec::new(),
        probes,
    })
}

/// Runs every repetition, in parallel up to the number of available cores,
/// and writes the summary and manifest. A failed repetition leaves the
/// others' files in place and marks the manifest partial.
pub fn run(config: &RunConfig, dir: &Path) -> Result<RunReport, RunError> {
    config.validate()?;
    if config.problem == ProblemKind::StiffnessProbe {
        return run_probe(config, dir);
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, config.to_toml()).map_err(io_err(&config_path))?;

    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).max(1);
    let mut results: Vec<(u64, Result<SeedResult, RunError>)> = Vec::new();
    for group in config.seeds.chunks(workers) {
        std::thread::scope(|s| {
            let handles: Vec<_> = group
                .iter()
                .map(|&seed| (seed, s.spawn(move || run_seed(config, seed, dir))))
                .collect();
            for (seed, h) in handles {
                let r = h.join().unwrap_or_else(|_| {
                    Err(RunError::Failed {
                        failures: vec![format!("seed {seed} panicked")],
                        total: 1,
                    })
                });
                results.push((seed, r));
            }
        });
    }

    let mut files = vec!["config.toml".to_string()];
    let mut failures = Vec::new();
    let mut seeds = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(s) => seeds.push(s),
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    if let Some(first) = seeds.first() {
        let k = first.trace.objectives.len();
        let mut header = strings(&["seed", "rel_l2", "rel_l1"]);
        header.extend((0..k).map(|i| format!("L_{i}")));
        let rows: Vec<Vec<String>> = seeds
            .iter()
            .map(|s| {
                let mut row = vec![s.seed.to_string(), fmt_f64(s.rel_l2), opt(s.rel_l1)];
                row.extend(s.trace.records.last().unwrap().losses.iter().map(|&v| fmt_f64(v)));
                row
            })
            .collect();
        write_rows(&dir.join("summary.csv"), &header, &rows)?;
        files.push("summary.csv".into());
    }
    for s in &seeds {
        files.extend(s.files.iter().cloned());
    }
    write_manifest(config, dir, &files, &failures)?;
    if !failures.is_empty() {
        return Err(RunError::Failed {
            total: config.seeds.len(),
            failures,
        });
    }
    Ok(RunReport {
        dir: dir.to_path_buf(),
        config: config.clone(),
        seeds,
        probes: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(problem: &str) -> RunConfig {
        let text = match problem {
            "poisson" => {
                "extends = \"poisson-desk\"\nseeds = [1, 2]\n[network]\nhidden_layers = 1\nwidth = 6\n\
                 [training]\nepochs = 6\nbatch_size = 20\nmilestones = []\ntest_every = 2\nstrategy = \"max-avg\"\n\
                 [poisson]\ninterior = 40\nper_edge = 5\ntest_grid = 10\n[output]\nsnapshot_epochs = [5]\n\
                 histogram_epochs = [0, 3]\npoints = true\n"
            }
            _ => {
                "extends = \"sobolev-desk\"\nseeds = [3]\n[network]\nhidden_layers = 1\nwidth = 6\n\
                 [training]\nepochs = 7\nbatch_size = 64\nmilestones = [4]\ntest_every = 3\n\
                 [sobolev]\nmodes = 2\ngrid = 16\nmax_order = 2\n[output]\nsnapshot_epochs = [0, 6]\n\
                 histogram_epochs = [0, 5]\npoints = true\n"
            }
        };
        RunConfig::from_toml(text, "tiny", None).unwrap()
    }

    #[test]
    fn sobolev_run_writes_documented_files() {
        let dir = tempfile::tempdir().unwrap();
        let report = run(&tiny("sobolev"), dir.path()).unwrap();
        let m = Manifest::read(dir.path()).unwrap();
        assert_eq!(m.status, "complete");
        let names: Vec<&str> = m.files.iter().map(|f| f.path.as_str()).collect();
        for n in [
            "config.toml",
            "summary.csv",
            "metrics_seed3.csv",
            "lambda_seed3.csv",
            "timing_seed3.csv",
            "histogram_seed3.csv",
            "gradient_stats_seed3.csv",
            "spectrum_seed3.csv",
            "residual_spectrum_seed3.csv",
            "checkpoint_seed3_epoch0.json",
            "checkpoint_seed3_epoch6.json",
            "checkpoint_seed3.json",
            "grid_points_seed3.csv",
        ] {
            assert!(names.contains(&n), "{n} missing from {names:?}");
        }
        let metrics = std::fs::read_to_string(dir.path().join("metrics_seed3.csv")).unwrap();
        let mut lines = metrics.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,stage,L_0,L_1,L_2,lambda_0,lambda_1,lambda_2,rel_l2,rel_l1,lr,xi1,xi2"
        );
        assert_eq!(metrics.lines().count(), 8);
        // epoch 1 is not tested
        let row1: Vec<&str> = metrics.lines().nth(2).unwrap().split(',').collect();
        assert_eq!((row1[8], row1[9]), ("", ""));
        let hist = std::fs::read_to_string(dir.path().join("histogram_seed3.csv")).unwrap();
        assert_eq!(hist.lines().count(), 1 + 2 * 60);
        let residual = std::fs::read_to_string(dir.path().join("residual_spectrum_seed3.csv")).unwrap();
        assert_eq!(residual.lines().count(), 1 + 2 * 256);
        let seed = &report.seeds[0];
        assert_eq!(seed.trace.records.len(), 7);
        assert!(seed.spectra.is_some());
        let hash = m.hash_of("metrics_seed3.csv").unwrap();
        let (again, _) = sha256_file(&dir.path().join("metrics_seed3.csv")).unwrap();
        assert_eq!(hash, again);
    }

    #[test]
    fn reruns_reproduce_hashes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = tiny("poisson");
        run(&cfg, a.path()).unwrap();
        run(&cfg, b.path()).unwrap();
        let (ma, mb) = (Manifest::read(a.path()).unwrap(), Manifest::read(b.path()).unwrap());
        assert_eq!(ma.files.len(), mb.files.len());
        for (fa, fb) in ma.files.iter().zip(&mb.files) {
            assert_eq!(fa.path, fb.path);
            if fa.deterministic {
                assert_eq!(fa.sha256, fb.sha256, "{}", fa.path);
            }
        }
        assert!(ma.files.iter().any(|f| f.path == "timing_seed1.csv" && !f.deterministic));
        // repetitions get one metrics file per seed
        assert!(ma.hash_of("metrics_seed1.csv").is_some() && ma.hash_of("metrics_seed2.csv").is_some());
        assert!(ma.hash_of("boundary_points_seed2.csv").is_some());
        assert!(ma.hash_of("spectrum_seed1.csv").is_none());
    }

    #[test]
    fn failed_runs_are_flagged_partial() {
        let mut cfg = tiny("sobolev");
        cfg.training.lr = 1e300;
        let dir = tempfile::tempdir().unwrap();
        let Err(e) = run(&cfg, dir.path()) else { panic!("run should fail") };
        assert!(matches!(e, RunError::Failed { .. }), "{e}");
        let m = Manifest::read(dir.path()).unwrap();
        assert_eq!(m.status, "partial");
        assert_eq!(m.failures.len(), 1);
    }

    #[test]
    fn probe_run_writes_table() {
        let text = "extends = \"stiffness-probe\"\nseeds = [0]\n[network]\nhidden_layers = 1\nwidth = 8\n\
                    [probe]\norders = [0, 1]\nk0 = [1, 2]\ngrid = 16\n";
        let cfg = RunConfig::from_toml(text, "probe", None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let r = run(&cfg, dir.path()).unwrap();
        assert_eq!(r.probes.len(), 2);
        let t = std::fs::read_to_string(dir.path().join("stiffness.csv")).unwrap();
        assert_eq!(t.lines().next(), Some("m,k0,ratio,slope"));
        assert_eq!(t.lines().count(), 5);
    }
}
