//! Batch workflows behind the command line: target solving, the
//! optimal-versus-feasible comparison, linearity tables, and the
//! sensitivity sweep. Each workflow writes a JSON result bundle plus CSV
//! files ready for plotting.
//!
//! Output is deterministic for a fixed resolved configuration: work is
//! parallelized with order-preserving maps, no timestamps or host details
//! enter the bundle, and floats are printed in shortest round-trip form.

use crate::config::{ConfigError, RunConfig, TargetConfig};
use crate::geometry::PlatformGeometry;
use crate::ik::{refine, solve_feasible, solve_multiple, solve_optimal, SolveError, SolveResult};
use crate::kinematics::{jacobian_2d, StackState};
use crate::monte_carlo::{
    f_factor, fn_vs_median_regression, get_n_perturbations, predicted_covariance, NoiseSpec,
    PerturbationDataset, PerturbationStats, Regression,
};
use rayon::prelude::*;
use serde::Serialize;
use std::path::Path;
use thiserror::Error;

/// Recorded in every bundle so a result archive identifies the exact
/// sampling scheme.
const RNG_ALGORITHM: &str = "chacha12, one stream per sample index";

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write {path}: {source}")]
    Output {
        path: String,
        source: std::io::Error,
    },
}

impl CommandError {
    /// 2 for configuration problems (no output written), 1 for runtime
    /// output failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Config(_) => 2,
            CommandError::Output { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveOutcome {
    Converged,
    NoConvergence,
    InfeasibleTarget,
}

/// One solver run; `result` holds the best attempt even on failure.
#[derive(Debug, Clone, Serialize)]
pub struct SolveRecord {
    pub target: String,
    pub label: String,
    pub requested: TargetConfig,
    pub outcome: SolveOutcome,
    pub result: SolveResult,
}

/// Perturbation summary of one converged pose.
#[derive(Debug, Clone, Serialize)]
pub struct PoseStatsRecord {
    pub target: String,
    pub label: String,
    /// Frobenius norm (not squared) of the pose's end effector Jacobian.
    pub fn_norm: f64,
    pub stats: PerturbationStats,
}

/// Predicted-versus-observed covariance at one pose and noise level.
#[derive(Debug, Clone, Serialize)]
pub struct LinearityRecord {
    pub sigma_t: f64,
    pub sigma_theta: f64,
    pub n_samples: usize,
    pub target: String,
    pub label: String,
    pub predicted: [[f64; 2]; 2],
    pub observed: [[f64; 2]; 2],
    /// `None` marks the undefined zero-observed-covariance case.
    pub f_factor: Option<f64>,
}

/// One sweep grid point; ratios are optimal over feasible, `None` where a
/// solve failed or the denominator vanished.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRecord {
    pub rho: f64,
    pub z: f64,
    pub theta: f64,
    pub reachable: bool,
    pub fn_optimal: Option<f64>,
    pub fn_feasible: Option<f64>,
    pub fn_ratio: Option<f64>,
    pub median_optimal: Option<f64>,
    pub median_feasible: Option<f64>,
    pub median_ratio: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ToolInfo {
    pub name: &'static str,
    pub version: &'static str,
    pub rng_algorithm: &'static str,
}

impl Default for ToolInfo {
    fn default() -> Self {
        Self {
            name: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            rng_algorithm: RNG_ALGORITHM,
        }
    }
}

/// Everything a workflow produced, echoing the resolved configuration so
/// the run is reproducible from the bundle alone.
#[derive(Debug, Clone, Serialize)]
pub struct ResultBundle {
    pub tool: ToolInfo,
    pub command: &'static str,
    pub all_converged: bool,
    pub config: RunConfig,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub solves: Vec<SolveRecord>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub pose_stats: Vec<PoseStatsRecord>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub linearity: Vec<LinearityRecord>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regression: Option<Regression>,
}

impl ResultBundle {
    fn new(command: &'static str, config: &RunConfig) -> Self {
        Self {
            tool: ToolInfo::default(),
            command,
            all_converged: false,
            config: config.clone(),
            solves: Vec::new(),
            pose_stats: Vec::new(),
            linearity: Vec::new(),
            sweep: Vec::new(),
            regression: None,
        }
    }
}

fn write_file(out: &Path, name: &str, contents: &str) -> Result<(), CommandError> {
    let wrap = |path: &Path, source: std::io::Error| CommandError::Output {
        path: path.display().to_string(),
        source,
    };
    std::fs::create_dir_all(out).map_err(|e| wrap(out, e))?;
    let path = out.join(name);
    std::fs::write(&path, contents).map_err(|e| wrap(&path, e))
}

fn write_bundle(out: &Path, bundle: &ResultBundle) -> Result<(), CommandError> {
    let mut json = serde_json::to_string_pretty(bundle).expect("bundle serializes");
    json.push('\n');
    write_file(out, "result.json", &json)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| x.to_string())
}

fn unpack(res: Result<SolveResult, SolveError>) -> (SolveOutcome, SolveResult) {
    match res {
        Ok(r) => (SolveOutcome::Converged, r),
        Err(SolveError::NoConvergence { best }) => (SolveOutcome::NoConvergence, *best),
        Err(SolveError::InfeasibleTarget { best }) => (SolveOutcome::InfeasibleTarget, *best),
    }
}

fn require_targets(config: &RunConfig) -> Result<(), CommandError> {
    if config.targets.is_empty() {
        return Err(ConfigError::Invalid("targets: at least one target required".into()).into());
    }
    Ok(())
}

/// Converged pose ready for perturbation experiments.
struct PoseRef {
    label: String,
    state: StackState,
    fn_norm: f64,
}

/// All solver output for one target: records in emission order (optimal
/// first), plus the converged poses.
struct TargetPoseSet {
    target_label: String,
    records: Vec<SolveRecord>,
    poses: Vec<PoseRef>,
}

/// Solves one optimal pose plus `k` distinct feasible poses per target.
/// The optimal pose also gets a refinement pass from every feasible state,
/// keeping the best, so it never loses to its own comparison set.
fn solve_target_sets(
    config: &RunConfig,
    geom: &PlatformGeometry,
    k: usize,
) -> Vec<TargetPoseSet> {
    config
        .targets
        .par_iter()
        .enumerate()
        .map(|(i, requested)| {
            let target_label = format!("t{}", i + 1);
            let target = requested.to_target();
            let mut records = Vec::new();
            let mut poses = Vec::new();

            let feasible: Vec<(SolveOutcome, SolveResult)> = if k == 0 {
                Vec::new()
            } else {
                match solve_multiple(&target, config.n, geom, &config.solver, k) {
                    Ok(results) => results
                        .into_iter()
                        .map(|r| (SolveOutcome::Converged, r))
                        .collect(),
                    Err(e) => vec![unpack(Err(e))],
                }
            };

            let (mut outcome, mut best) =
                unpack(solve_optimal(&target, config.n, geom, &config.solver));
            for (f_outcome, f) in &feasible {
                if *f_outcome != SolveOutcome::Converged {
                    continue;
                }
                if let Ok(polished) = refine(&f.state, &target, geom, &config.solver) {
                    if !matches!(outcome, SolveOutcome::Converged)
                        || polished.fn_value < best.fn_value
                    {
                        outcome = SolveOutcome::Converged;
                        best = polished;
                    }
                }
            }
            let optimal_label = format!("{target_label}_optimal");
            if outcome == SolveOutcome::Converged {
                poses.push(PoseRef {
                    label: optimal_label.clone(),
                    state: best.state.clone(),
                    fn_norm: best.fn_value.sqrt(),
                });
            }
            records.push(SolveRecord {
                target: target_label.clone(),
                label: optimal_label,
                requested: *requested,
                outcome,
                result: best,
            });

            for (j, (f_outcome, f)) in feasible.into_iter().enumerate() {
                let label = format!("{target_label}_feasible{}", j + 1);
                if f_outcome == SolveOutcome::Converged {
                    poses.push(PoseRef {
                        label: label.clone(),
                        state: f.state.clone(),
                        fn_norm: f.fn_value.sqrt(),
                    });
                }
                records.push(SolveRecord {
                    target: target_label.clone(),
                    label,
                    requested: *requested,
                    outcome: f_outcome,
                    result: f,
                });
            }
            TargetPoseSet {
                target_label,
                records,
                poses,
            }
        })
        .collect()
}

/// Per-platform poses of every recorded solve, best attempt included.
fn poses_csv(records: &[SolveRecord]) -> String {
    let mut csv = String::from("target,label,platform,rho,z,theta,phi\n");
    for record in records {
        let state = &record.result.state;
        for (p, pose) in state.platforms.iter().enumerate() {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                record.target,
                record.label,
                p + 1,
                pose.rho,
                pose.z,
                pose.theta,
                state.phi
            ));
        }
    }
    csv
}

/// One scatter file per pose: the shared draw δx and the pose's perturbed
/// end effector output, one row per sample.
fn samples_csv(dataset: &PerturbationDataset, pose_idx: usize, n_platforms: usize) -> String {
    let mut header = String::from("sample");
    for p in 1..=n_platforms {
        header.push_str(&format!(",drho{p},dz{p},dtheta{p}"));
    }
    header.push_str(",rho,z,theta\n");
    let mut csv = header;
    for (i, delta) in dataset.deltas.iter().enumerate() {
        csv.push_str(&i.to_string());
        for d in delta {
            csv.push(',');
            csv.push_str(&d.to_string());
        }
        let out = &dataset.outputs[pose_idx][i];
        csv.push_str(&format!(",{},{},{}\n", out.rho, out.z, out.theta));
    }
    csv
}

fn all_converged(records: &[SolveRecord]) -> bool {
    records.iter().all(|r| r.outcome == SolveOutcome::Converged)
}

/// Runs the shared-noise experiment for each target set and appends pose
/// statistics to the bundle; returns the per-set datasets for CSV export.
fn perturb_sets(
    sets: &[TargetPoseSet],
    noise: &NoiseSpec,
    bundle: &mut ResultBundle,
) -> Vec<Option<PerturbationDataset>> {
    let datasets: Vec<Option<PerturbationDataset>> = sets
        .par_iter()
        .map(|set| {
            if set.poses.is_empty() || noise.n_samples < 2 {
                return None;
            }
            let states: Vec<StackState> = set.poses.iter().map(|p| p.state.clone()).collect();
            Some(get_n_perturbations(&states, noise))
        })
        .collect();
    for (set, dataset) in sets.iter().zip(&datasets) {
        let Some(dataset) = dataset else { continue };
        for (idx, pose) in set.poses.iter().enumerate() {
            bundle.pose_stats.push(PoseStatsRecord {
                target: set.target_label.clone(),
                label: pose.label.clone(),
                fn_norm: pose.fn_norm,
                stats: dataset.stats(idx),
            });
        }
    }
    datasets
}

fn write_sample_files(
    out: &Path,
    sets: &[TargetPoseSet],
    datasets: &[Option<PerturbationDataset>],
    n_platforms: usize,
) -> Result<(), CommandError> {
    for (set, dataset) in sets.iter().zip(datasets) {
        let Some(dataset) = dataset else { continue };
        for (idx, pose) in set.poses.iter().enumerate() {
            write_file(
                out,
                &format!("samples_{}.csv", pose.label),
                &samples_csv(dataset, idx, n_platforms),
            )?;
        }
    }
    Ok(())
}

/// Optimal solve per target; emits the bundle and per-platform pose CSV.
pub fn cmd_solve(config: &RunConfig, out: &Path) -> Result<ResultBundle, CommandError> {
    require_targets(config)?;
    let geom = config.platform.build()?;
    let mut bundle = ResultBundle::new("solve", config);
    let sets = solve_target_sets(config, &geom, 0);
    for set in sets {
        bundle.solves.extend(set.records);
    }
    bundle.all_converged = all_converged(&bundle.solves);
    write_file(out, "poses.csv", &poses_csv(&bundle.solves))?;
    write_bundle(out, &bundle)?;
    Ok(bundle)
}

/// Distinct feasible (no-objective) solves per target.
pub fn cmd_feasible(config: &RunConfig, out: &Path) -> Result<ResultBundle, CommandError> {
    require_targets(config)?;
    let geom = config.platform.build()?;
    let k = config.feasible_count.max(1);
    let mut bundle = ResultBundle::new("feasible", config);
    let per_target: Vec<Vec<SolveRecord>> = config
        .targets
        .par_iter()
        .enumerate()
        .map(|(i, requested)| {
            let target_label = format!("t{}", i + 1);
            let target = requested.to_target();
            let results: Vec<(SolveOutcome, SolveResult)> =
                match solve_multiple(&target, config.n, &geom, &config.solver, k) {
                    Ok(results) => results
                        .into_iter()
                        .map(|r| (SolveOutcome::Converged, r))
                        .collect(),
                    Err(e) => vec![unpack(Err(e))],
                };
            results
                .into_iter()
                .enumerate()
                .map(|(j, (outcome, result))| SolveRecord {
                    target: target_label.clone(),
                    label: format!("{target_label}_feasible{}", j + 1),
                    requested: *requested,
                    outcome,
                    result,
                })
                .collect()
        })
        .collect();
    bundle.solves = per_target.into_iter().flatten().collect();
    bundle.all_converged = all_converged(&bundle.solves);
    write_file(out, "poses.csv", &poses_csv(&bundle.solves))?;
    write_bundle(out, &bundle)?;
    Ok(bundle)
}

/// Optimal versus feasible poses under one shared noise stream per target:
/// solves, perturbation statistics, a per-pose summary table, and per-pose
/// scatter files.
pub fn cmd_compare(config: &RunConfig, out: &Path) -> Result<ResultBundle, CommandError> {
    require_targets(config)?;
    let geom = config.platform.build()?;
    let noise = config.noise[0];
    let mut bundle = ResultBundle::new("compare", config);
    let sets = solve_target_sets(config, &geom, config.feasible_count);
    let datasets = perturb_sets(&sets, &noise, &mut bundle);

    let mut table = String::from("target,label,fn,median,ci_lo,ci_hi\n");
    for record in &bundle.pose_stats {
        table.push_str(&format!(
            "{},{},{},{},{},{}\n",
            record.target,
            record.label,
            record.fn_norm,
            record.stats.median_distance,
            record.stats.ci95.0,
            record.stats.ci95.1
        ));
    }
    write_file(out, "table1.csv", &table)?;
    write_sample_files(out, &sets, &datasets, config.n)?;
    for set in sets {
        bundle.solves.extend(set.records);
    }
    bundle.all_converged = all_converged(&bundle.solves);
    write_bundle(out, &bundle)?;
    Ok(bundle)
}

/// Raw perturbation experiment on the optimal pose of each target.
pub fn cmd_perturb(config: &RunConfig, out: &Path) -> Result<ResultBundle, CommandError> {
    require_targets(config)?;
    let geom = config.platform.build()?;
    let noise = config.noise[0];
    let mut bundle = ResultBundle::new("perturb", config);
    let sets = solve_target_sets(config, &geom, 0);
    let datasets = perturb_sets(&sets, &noise, &mut bundle);
    write_sample_files(out, &sets, &datasets, config.n)?;
    for set in sets {
        bundle.solves.extend(set.records);
    }
    bundle.all_converged = all_converged(&bundle.solves);
    write_bundle(out, &bundle)?;
    Ok(bundle)
}

/// Predicted versus observed covariance per pose and noise level, as a
/// JSON record list and a flat CSV table.
pub fn cmd_linearity(config: &RunConfig, out: &Path) -> Result<ResultBundle, CommandError> {
    require_targets(config)?;
    let geom = config.platform.build()?;
    let mut bundle = ResultBundle::new("linearity", config);
    let sets = solve_target_sets(config, &geom, config.feasible_count);

    for noise in &config.noise {
        let datasets: Vec<Option<PerturbationDataset>> = sets
            .par_iter()
            .map(|set| {
                if set.poses.is_empty() || noise.n_samples < 2 {
                    return None;
                }
                let states: Vec<StackState> = set.poses.iter().map(|p| p.state.clone()).collect();
                Some(get_n_perturbations(&states, noise))
            })
            .collect();
        for (set, dataset) in sets.iter().zip(&datasets) {
            let Some(dataset) = dataset else { continue };
            for (idx, pose) in set.poses.iter().enumerate() {
                let predicted = predicted_covariance(&jacobian_2d(&pose.state), noise);
                let observed = dataset.stats(idx).observed_matrix();
                bundle.linearity.push(LinearityRecord {
                    sigma_t: noise.sigma_t,
                    sigma_theta: noise.sigma_theta,
                    n_samples: noise.n_samples,
                    target: set.target_label.clone(),
                    label: pose.label.clone(),
                    predicted: [
                        [predicted[(0, 0)], predicted[(0, 1)]],
                        [predicted[(1, 0)], predicted[(1, 1)]],
                    ],
                    observed: [
                        [observed[(0, 0)], observed[(0, 1)]],
                        [observed[(1, 0)], observed[(1, 1)]],
                    ],
                    f_factor: f_factor(&predicted, &observed),
                });
            }
        }
    }

    let mut table = String::from("sigma_t,sigma_theta,n_samples,target,label,f_factor\n");
    for r in &bundle.linearity {
        table.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.sigma_t,
            r.sigma_theta,
            r.n_samples,
            r.target,
            r.label,
            fmt_opt(r.f_factor)
        ));
    }
    write_file(out, "table2.csv", &table)?;
    for set in sets {
        bundle.solves.extend(set.records);
    }
    bundle.all_converged = all_converged(&bundle.solves);
    write_bundle(out, &bundle)?;
    Ok(bundle)
}

/// Grid sweep: per reachable point an optimal and a feasible solve, their
/// FN and median-distance ratios, and the ratio-on-ratio regression.
pub fn cmd_sweep(config: &RunConfig, out: &Path) -> Result<ResultBundle, CommandError> {
    let geom = config.platform.build()?;
    let base_noise = config.noise[0];
    let noise = NoiseSpec {
        n_samples: config.sweep.n_samples,
        ..base_noise
    };
    let mut bundle = ResultBundle::new("sweep", config);

    let grid = config.sweep.targets();
    bundle.sweep = grid
        .par_iter()
        .map(|point| {
            let mut record = SweepRecord {
                rho: point.rho,
                z: point.z,
                theta: point.theta,
                reachable: false,
                fn_optimal: None,
                fn_feasible: None,
                fn_ratio: None,
                median_optimal: None,
                median_feasible: None,
                median_ratio: None,
            };
            let target = point.to_target();
            let Ok(feasible) = solve_feasible(&target, config.n, &geom, &config.solver) else {
                return record;
            };
            let optimal = match solve_optimal(&target, config.n, &geom, &config.solver) {
                Ok(direct) => match refine(&feasible.state, &target, &geom, &config.solver) {
                    Ok(polished) if polished.fn_value < direct.fn_value => polished,
                    _ => direct,
                },
                Err(_) => match refine(&feasible.state, &target, &geom, &config.solver) {
                    Ok(polished) => polished,
                    Err(_) => return record,
                },
            };
            record.reachable = true;
            let fn_opt = optimal.fn_value.sqrt();
            let fn_feas = feasible.fn_value.sqrt();
            record.fn_optimal = Some(fn_opt);
            record.fn_feasible = Some(fn_feas);
            record.fn_ratio = (fn_feas > 0.0).then(|| fn_opt / fn_feas);
            if noise.n_samples >= 2 {
                let dataset =
                    get_n_perturbations(&[optimal.state.clone(), feasible.state.clone()], &noise);
                let med_opt = dataset.stats(0).median_distance;
                let med_feas = dataset.stats(1).median_distance;
                record.median_optimal = Some(med_opt);
                record.median_feasible = Some(med_feas);
                record.median_ratio = (med_feas > 0.0).then(|| med_opt / med_feas);
            }
            record
        })
        .collect();

    let pairs: Vec<(f64, f64)> = bundle
        .sweep
        .iter()
        .filter_map(|r| Some((r.fn_ratio?, r.median_ratio?)))
        .collect();
    bundle.regression = fn_vs_median_regression(&pairs).ok();

    let mut csv = String::from(
        "rho,z,theta,reachable,fn_optimal,fn_feasible,fn_ratio,median_optimal,median_feasible,median_ratio\n",
    );
    for r in &bundle.sweep {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.rho,
            r.z,
            r.theta,
            r.reachable,
            fmt_opt(r.fn_optimal),
            fmt_opt(r.fn_feasible),
            fmt_opt(r.fn_ratio),
            fmt_opt(r.median_optimal),
            fmt_opt(r.median_feasible),
            fmt_opt(r.median_ratio)
        ));
    }
    write_file(out, "sweep.csv", &csv)?;
    bundle.all_converged = bundle.sweep.iter().any(|r| r.reachable);
    write_bundle(out, &bundle)?;
    Ok(bundle)
}
