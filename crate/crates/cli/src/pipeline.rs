use std::path::{Path, PathBuf};
use std::time::Instant;

use dpcam_core::analysis::{
    correlation_width, fit_double_gaussian, fitted_capacity, is_rise_then_fall, mse, mutual_information, snr_estimate,
    steering_bound, steering_test, AnalysisReport, ProfileAxis, SteeringVerdict, ThresholdCurve,
};
use dpcam_core::measure::{flux_sweep, noise_margin, simulate_with, write_record, write_sweep_csv, FluxSweepResult, SimOptions};
use dpcam_core::model::{fedorov_capacity, joint_pdf, write_joint, Basis, Dims, JointDistribution, Quadrature};
use dpcam_core::recon::{normalize, solve_bpdn, NormalizeMode, ReconResult};
use dpcam_core::sensing::{generate_patterns, write_patterns, SensingOperator};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{seeds_for, ExperimentConfig, Seeds};
use crate::error::{CliError, Result};
use crate::output::{write_atomic, write_json};

/// Worker count for replicas and sweep points.
pub const WORKERS_ENV: &str = "DPCAM_WORKERS";

/// Rolling-average window for the rise-then-fall test on threshold curves.
const SMOOTH_WINDOW: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub replica: usize,
    pub basis: Basis,
    #[serde(flatten)]
    pub seeds: Seeds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub replica: usize,
    pub basis: Option<Basis>,
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub replica: usize,
    pub basis: Option<Basis>,
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedRecord>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<PathBuf>,
    pub timings: Vec<StageTiming>,
    pub failures: Vec<StageFailure>,
    /// Solves that stopped without meeting the convergence test.
    pub not_converged: Vec<SeedRecord>,
}

impl RunManifest {
    fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            command: command.to_string(),
            config_hash: config.hash(),
            config: config.clone(),
            seeds: Vec::new(),
            artifacts: Vec::new(),
            timings: Vec::new(),
            failures: Vec::new(),
            not_converged: Vec::new(),
        }
    }

    /// True when every stage ran and every solve converged.
    pub fn is_clean(&self) -> bool {
        self.failures.is_empty() && self.not_converged.is_empty()
    }

    fn absorb(&mut self, log: RunLog) {
        self.seeds.extend(log.seeds);
        self.artifacts.extend(log.artifacts);
        self.timings.extend(log.timings);
        self.failures.extend(log.failures);
        self.not_converged.extend(log.not_converged);
    }

    /// Copy with wall-clock timings removed, for reproducibility checks.
    pub fn without_timings(&self) -> Self {
        Self {
            timings: Vec::new(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub iterations: usize,
    pub tau_used: f64,
    pub converged: bool,
    pub final_objective: f64,
}

impl From<&ReconResult> for SolverSummary {
    fn from(r: &ReconResult) -> Self {
        Self {
            iterations: r.iterations,
            tau_used: r.tau_used,
            converged: r.converged,
            final_objective: r.final_objective,
        }
    }
}

/// Everything measured for one basis of one replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisReport {
    pub basis: Basis,
    pub pitch: f64,
    pub mean_count: f64,
    pub noise_margin: Option<f64>,
    pub solver: SolverSummary,
    pub mse: f64,
    pub snr: f64,
    /// MI of the noiseless model table.
    pub mi_ideal: f64,
    /// MI of the reconstruction before thresholding.
    pub mi_raw: f64,
    pub threshold_curve: ThresholdCurve,
    pub threshold_used: f64,
    pub mi_thresholded: f64,
    pub rise_then_fall: bool,
    /// Correlation width per transverse axis: difference profile in
    /// position, sum profile in momentum.
    pub width_horizontal: Option<f64>,
    pub width_vertical: Option<f64>,
    pub sigma_ce: Option<f64>,
    pub sigma_pe: Option<f64>,
    pub fitted_capacity: Option<f64>,
    /// Capacity of the generating model.
    pub model_capacity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaReport {
    pub replica: usize,
    pub bases: Vec<BasisReport>,
    pub analysis: AnalysisReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Self> {
        let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            std,
            count: v.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSummary {
    pub basis: Basis,
    pub mse: Option<Stats>,
    pub mi_thresholded: Option<Stats>,
    pub fitted_capacity: Option<Stats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub config_hash: String,
    pub replicas: Vec<ReplicaReport>,
    pub summary: Vec<BasisSummary>,
}

/// Verdicts against the same bound from thresholded MI and from fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringReplica {
    pub replica: usize,
    pub thresholded: Option<SteeringVerdict>,
    pub fitted: Option<SteeringVerdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringSummary {
    pub i_x: Stats,
    pub i_k: Stats,
    /// Verdict on the replica means.
    pub verdict: SteeringVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringReport {
    pub bound: f64,
    pub n: usize,
    pub d_x: f64,
    pub d_k: f64,
    pub replicas: Vec<SteeringReplica>,
    pub thresholded: Option<SteeringSummary>,
    pub fitted: Option<SteeringSummary>,
}

/// Per-replica bookkeeping merged into the manifest in replica order.
#[derive(Default)]
struct RunLog {
    seeds: Vec<SeedRecord>,
    artifacts: Vec<PathBuf>,
    timings: Vec<StageTiming>,
    failures: Vec<StageFailure>,
    not_converged: Vec<SeedRecord>,
}

impl RunLog {
    fn stage<T>(
        &mut self,
        replica: usize,
        basis: Option<Basis>,
        stage: &str,
        f: impl FnOnce() -> dpcam_core::Result<T>,
    ) -> Option<T> {
        let t = Instant::now();
        let out = f();
        self.timings.push(StageTiming {
            replica,
            basis,
            stage: stage.to_string(),
            seconds: t.elapsed().as_secs_f64(),
        });
        match out {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("replica {replica} {basis:?} {stage}: {e}");
                self.failures.push(StageFailure {
                    replica,
                    basis,
                    stage: stage.to_string(),
                    error: e.to_string(),
                });
                None
            }
        }
    }
}

/// Bounded pool sized by `DPCAM_WORKERS`, defaulting to the core count.
fn pool() -> Result<rayon::ThreadPool> {
    let workers = match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&w| w > 0)
            .ok_or_else(|| CliError::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))
}

fn rel(path: &Path, root: &Path) -> PathBuf {
    path.strip_prefix(root).unwrap_or(path).to_path_buf()
}

fn basis_dir(config: &ExperimentConfig, replica: usize, basis: Basis) -> PathBuf {
    config.out_dir.join(format!("replica-{replica:03}")).join(basis.to_string())
}

/// Model table for one basis; cheap enough to rebuild per replica.
pub fn ideal_joint(config: &ExperimentConfig, basis: Basis) -> Result<JointDistribution> {
    let grid = config.grid(basis)?;
    Ok(joint_pdf(&config.params(), &grid, &grid, Quadrature::default())?)
}

fn width_axis(basis: Basis) -> ProfileAxis {
    match basis {
        Basis::Position => ProfileAxis::Difference,
        Basis::Momentum => ProfileAxis::Sum,
    }
}

fn analyze(
    config: &ExperimentConfig,
    basis: Basis,
    truth: &JointDistribution,
    recon: &JointDistribution,
    result: &ReconResult,
    mean_count: f64,
    margin: Option<f64>,
) -> dpcam_core::Result<BasisReport> {
    let err = mse(recon, truth)?;
    let curve = dpcam_core::analysis::threshold_sweep(recon, &config.thresholds)?;
    let (threshold_used, mi_thresholded) = curve.peak();
    let widths = correlation_width(recon, width_axis(basis)).ok();
    let fit = fit_double_gaussian(recon).ok();
    Ok(BasisReport {
        basis,
        pitch: config.pitch(basis),
        mean_count,
        noise_margin: margin,
        solver: result.into(),
        mse: err,
        snr: snr_estimate(config.n(), err)?,
        mi_ideal: mutual_information(truth)?,
        mi_raw: mutual_information(recon)?,
        rise_then_fall: is_rise_then_fall(&curve.mi, SMOOTH_WINDOW),
        threshold_curve: curve,
        threshold_used,
        mi_thresholded,
        width_horizontal: widths.map(|w| w.horizontal),
        width_vertical: widths.map(|w| w.vertical),
        sigma_ce: fit.map(|f| f.sigma_ce),
        sigma_pe: fit.map(|f| f.sigma_pe),
        fitted_capacity: fit.and_then(|f| fitted_capacity(&f).ok()),
        model_capacity: fedorov_capacity(&config.params(), Dims::Two)?.bits,
    })
}

fn write_text(path: &Path, log: &mut RunLog, root: &Path, fill: impl FnOnce(&mut dyn std::io::Write) -> std::io::Result<()>) -> Result<()> {
    write_atomic(path, fill)?;
    log.artifacts.push(rel(path, root));
    Ok(())
}

/// Model, sense, measure, reconstruct and analyze one basis. Core failures
/// are logged and end this basis; I/O failures abort the run.
fn run_basis(config: &ExperimentConfig, replica: usize, basis: Basis, log: &mut RunLog) -> Result<Option<BasisReport>> {
    let seeds = seeds_for(config.master_seed, replica, basis);
    let record = SeedRecord { replica, basis, seeds };
    log.seeds.push(record.clone());
    let root = config.out_dir.clone();
    let dir = basis_dir(config, replica, basis);
    let b = Some(basis);
    let params = config.params();

    let Some(truth) = log.stage(replica, b, "model", || {
        let grid = dpcam_core::model::GridSpec::new(config.side, config.pitch(basis), basis)?;
        joint_pdf(&params, &grid, &grid, Quadrature::default())
    }) else {
        return Ok(None);
    };
    write_text(&dir.join("truth.txt"), log, &root, |w| write_joint(w, &truth, Some(&params)))?;

    let Some(op) = log.stage(replica, b, "patterns", || {
        generate_patterns(seeds.patterns, config.m, config.n()).map(SensingOperator::new)
    }) else {
        return Ok(None);
    };
    if config.save_patterns {
        write_text(&dir.join("patterns.txt"), log, &root, |w| write_patterns(w, op.patterns()))?;
    }

    let opts = SimOptions {
        t_aq: config.t_aq,
        background: 0.0,
    };
    let Some(rec) = log.stage(replica, b, "measure", || simulate_with(&truth, &op, config.flux, seeds.noise, opts)) else {
        return Ok(None);
    };
    write_text(&dir.join("counts.txt"), log, &root, |w| write_record(w, &rec))?;

    let solver = config.solver_config(false);
    let Some((result, recon)) = log.stage(replica, b, "reconstruct", || {
        let result = solve_bpdn(&op, &rec.y(), &solver)?;
        let recon = normalize(&result.x_hat, NormalizeMode::PerFlux(config.flux), truth.grid_signal, truth.grid_idler)?;
        Ok((result, recon))
    }) else {
        return Ok(None);
    };
    if !result.converged {
        log.not_converged.push(record);
    }
    write_text(&dir.join("recon.txt"), log, &root, |w| write_joint(w, &recon, None))?;
    let summary = SolverSummary::from(&result);
    write_json(&dir.join("recon.json"), &summary)?;
    log.artifacts.push(rel(&dir.join("recon.json"), &root));

    let margin = noise_margin(&rec).ok();
    let Some(report) = log.stage(replica, b, "analyze", || analyze(config, basis, &truth, &recon, &result, rec.mean(), margin)) else {
        return Ok(None);
    };
    write_json(&dir.join("report.json"), &report)?;
    log.artifacts.push(rel(&dir.join("report.json"), &root));
    Ok(Some(report))
}

fn flat_report(config: &ExperimentConfig, bases: &[BasisReport]) -> AnalysisReport {
    let find = |b: Basis| bases.iter().find(|r| r.basis == b);
    let (x, k) = (find(Basis::Position), find(Basis::Momentum));
    let first = bases.first();
    let mut out = AnalysisReport {
        mi_x: x.map(|r| r.mi_thresholded),
        mi_k: k.map(|r| r.mi_thresholded),
        sigma_ce: first.and_then(|r| r.sigma_ce),
        sigma_pe: first.and_then(|r| r.sigma_pe),
        fedorov_bits: first.and_then(|r| r.fitted_capacity),
        mse: first.map(|r| r.mse),
        snr: first.map(|r| r.snr),
        threshold_used: first.map(|r| r.threshold_used),
        ..Default::default()
    };
    if let (Some(x), Some(k)) = (x, k) {
        if let Ok(bound) = steering_bound(config.n(), config.position_pitch, config.momentum_pitch) {
            let v = steering_test(x.mi_thresholded, k.mi_thresholded, bound);
            out.bound = Some(bound);
            out.margin = Some(v.margin);
        }
    }
    out
}

fn run_replicas(config: &ExperimentConfig) -> Result<Vec<(Vec<BasisReport>, RunLog)>> {
    pool()?.install(|| {
        (0..config.replicas)
            .into_par_iter()
            .map(|r| {
                let mut log = RunLog::default();
                let mut reports = Vec::new();
                for &basis in &config.bases {
                    if let Some(rep) = run_basis(config, r, basis, &mut log)? {
                        reports.push(rep);
                    }
                }
                Ok((reports, log))
            })
            .collect()
    })
}

fn summarize(config: &ExperimentConfig, replicas: &[ReplicaReport]) -> Vec<BasisSummary> {
    config
        .bases
        .iter()
        .map(|&basis| {
            let pick = |f: &dyn Fn(&BasisReport) -> Option<f64>| -> Vec<f64> {
                replicas
                    .iter()
                    .flat_map(|r| r.bases.iter().filter(|b| b.basis == basis))
                    .filter_map(f)
                    .collect()
            };
            BasisSummary {
                basis,
                mse: Stats::of(&pick(&|b| Some(b.mse))),
                mi_thresholded: Stats::of(&pick(&|b| Some(b.mi_thresholded))),
                fitted_capacity: Stats::of(&pick(&|b| b.fitted_capacity)),
            }
        })
        .collect()
}

fn finish(manifest: &mut RunManifest, config: &ExperimentConfig, name: &str) -> Result<()> {
    let path = config.out_dir.join(name);
    write_json(&path, manifest)
}

/// Full pipeline for every basis and replica. Writes per-basis artifacts,
/// `report.json` and `manifest.json` under the output directory.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<(RunReport, RunManifest)> {
    config.validate()?;
    let mut manifest = RunManifest::new("run", config);
    let mut replicas = Vec::new();
    for (r, (bases, log)) in run_replicas(config)?.into_iter().enumerate() {
        manifest.absorb(log);
        let analysis = flat_report(config, &bases);
        replicas.push(ReplicaReport { replica: r, bases, analysis });
    }
    let report = RunReport {
        name: config.name.clone(),
        config_hash: manifest.config_hash.clone(),
        summary: summarize(config, &replicas),
        replicas,
    };
    let path = config.out_dir.join("report.json");
    write_json(&path, &report)?;
    manifest.artifacts.push(rel(&path, &config.out_dir));
    finish(&mut manifest, config, "manifest.json")?;
    Ok((report, manifest))
}

/// Reconstruction MSE against flux for the first basis of replica 0, with
/// the configured τ held across the grid and no debiasing. Writes
/// `sweep.csv` and `sweep-manifest.json`.
pub fn run_flux_sweep(config: &ExperimentConfig, flux_grid: &[f64]) -> Result<(FluxSweepResult, RunManifest)> {
    config.validate()?;
    if flux_grid.is_empty() || flux_grid.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
        return Err(CliError::Config("flux grid must hold positive values".into()));
    }
    let basis = config.bases[0];
    let seeds = seeds_for(config.master_seed, 0, basis);
    let mut manifest = RunManifest::new("sweep", config);
    manifest.seeds.push(SeedRecord { replica: 0, basis, seeds });
    let truth = ideal_joint(config, basis)?;
    let op = SensingOperator::new(generate_patterns(seeds.patterns, config.m, config.n())?);
    let t = Instant::now();
    let result = pool()?.install(|| flux_sweep(&truth, &op, flux_grid, &config.solver_config(true), seeds.noise))?;
    manifest.timings.push(StageTiming {
        replica: 0,
        basis: Some(basis),
        stage: "sweep".into(),
        seconds: t.elapsed().as_secs_f64(),
    });
    for (flux, e) in flux_grid.iter().zip(&result.errors) {
        if let Some(e) = e {
            manifest.failures.push(StageFailure {
                replica: 0,
                basis: Some(basis),
                stage: format!("sweep at flux {flux:e}"),
                error: e.clone(),
            });
        }
    }
    let path = config.out_dir.join("sweep.csv");
    write_atomic(&path, |w| write_sweep_csv(w, &result))?;
    manifest.artifacts.push(rel(&path, &config.out_dir));
    finish(&mut manifest, config, "sweep-manifest.json")?;
    Ok((result, manifest))
}

fn steering_summary(verdicts: &[SteeringVerdict], bound: f64) -> Option<SteeringSummary> {
    let i_x = Stats::of(&verdicts.iter().map(|v| v.i_x).collect::<Vec<_>>())?;
    let i_k = Stats::of(&verdicts.iter().map(|v| v.i_k).collect::<Vec<_>>())?;
    let verdict = steering_test(i_x.mean, i_k.mean, bound);
    Some(SteeringSummary { i_x, i_k, verdict })
}

/// Position and momentum pipelines on matched grids, judged against the
/// entropic bound with both thresholded MI and fitted capacities. Writes
/// `steering.json` and `steering-manifest.json` in `config_x.out_dir`.
pub fn run_steering(config_x: &ExperimentConfig, config_k: &ExperimentConfig) -> Result<(SteeringReport, RunManifest)> {
    config_x.validate()?;
    config_k.validate()?;
    if config_x.bases != [Basis::Position] || config_k.bases != [Basis::Momentum] {
        return Err(CliError::Config("steering needs a position config and a momentum config".into()));
    }
    if config_x.side != config_k.side {
        return Err(CliError::Config(format!(
            "steering needs matched grids (sides {} and {})",
            config_x.side, config_k.side
        )));
    }
    if config_x.replicas != config_k.replicas {
        return Err(CliError::Config("both bases need the same replica count".into()));
    }
    let n = config_x.n();
    let (d_x, d_k) = (config_x.position_pitch, config_k.momentum_pitch);
    let bound = steering_bound(n, d_x, d_k)?;
    let mut manifest = RunManifest::new("steer", config_x);
    let xs = run_replicas(config_x)?;
    let ks = run_replicas(&ExperimentConfig {
        out_dir: config_x.out_dir.clone(),
        ..config_k.clone()
    })?;
    let mut replicas = Vec::new();
    for (r, ((x, lx), (k, lk))) in xs.into_iter().zip(ks).enumerate() {
        manifest.absorb(lx);
        manifest.absorb(lk);
        let (x, k) = (x.first(), k.first());
        let pair = |f: &dyn Fn(&BasisReport) -> Option<f64>| match (x.and_then(f), k.and_then(f)) {
            (Some(a), Some(b)) => Some(steering_test(a, b, bound)),
            _ => None,
        };
        replicas.push(SteeringReplica {
            replica: r,
            thresholded: pair(&|b| Some(b.mi_thresholded)),
            fitted: pair(&|b| b.fitted_capacity),
        });
    }
    let thr: Vec<_> = replicas.iter().filter_map(|r| r.thresholded).collect();
    let fit: Vec<_> = replicas.iter().filter_map(|r| r.fitted).collect();
    let report = SteeringReport {
        bound,
        n,
        d_x,
        d_k,
        thresholded: steering_summary(&thr, bound),
        fitted: steering_summary(&fit, bound),
        replicas,
    };
    let path = config_x.out_dir.join("steering.json");
    write_json(&path, &report)?;
    manifest.artifacts.push(rel(&path, &config_x.out_dir));
    finish(&mut manifest, config_x, "steering-manifest.json")?;
    Ok((report, manifest))
}

/// Split a two-basis config into the pair `run_steering` takes.
pub fn steering_pair(config: &ExperimentConfig) -> Result<(ExperimentConfig, ExperimentConfig)> {
    if !(config.bases.contains(&Basis::Position) && config.bases.contains(&Basis::Momentum)) {
        return Err(CliError::Config("steering needs both position and momentum bases".into()));
    }
    Ok((config.for_basis(Basis::Position), config.for_basis(Basis::Momentum)))
}
