//! Orchestrated reproductions: goal-reaching accuracy, generalization from
//! pruned datasets, reassessment, training curves and fitness of the
//! conditioned model. Each run returns in-memory tables and can write them
//! as CSV plus SVG charts with a provenance record.

mod report;
pub mod svg;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use report::{
    config_hash, mean_std, sha256_hex, slug, to_csv, version_string, OutputFile, Provenance, ReportWriter,
};

use crate::dataset::{inspect, prune_dataset, PruneScheme, TrajectoryDataset};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::geometry::{BdSpace, Centroids};
use crate::qd::{reassess, Repertoire};
use crate::qdt::{
    evaluate_goals, fit, goal_episode_seeds, EvalPlan, FitOutcome, GoalEvaluation, GridEvaluation, QdtConfig,
    QdtModel, TrainingLog,
};

/// Histogram resolution of dataset density maps.
pub const DENSITY_BINS: usize = 20;

fn bounds(space: &BdSpace) -> ([f64; 2], [f64; 2]) {
    ([space.lower[0], space.lower[1]], [space.upper[0], space.upper[1]])
}

/// Color-scale ceiling of distance maps: half the first axis' width.
fn distance_scale(space: &BdSpace) -> f64 {
    0.5 * (space.upper[0] - space.lower[0])
}

fn write_grid(w: &mut ReportWriter, stem: &str, grid: &GridEvaluation, space: &BdSpace, title: &str) -> Result<()> {
    let text = w.csv(&format!("{stem}.csv"), &grid.rows)?;
    let svg = svg::goal_heatmap(&text, bounds(space), Some(distance_scale(space)), title)?;
    w.text(&format!("{stem}.svg"), &svg)
}

fn write_density(w: &mut ReportWriter, stem: &str, ds: &TrajectoryDataset, space: &BdSpace, title: &str) -> Result<()> {
    let text = inspect(ds, space, DENSITY_BINS);
    w.text(&format!("{stem}.csv"), &text)?;
    w.text(&format!("{stem}.svg"), &svg::density_map(&text, title)?)
}

// ---------------------------------------------------------------- accuracy

/// What serves the goals of one method.
#[derive(Clone, Copy, Debug)]
pub enum Artifact<'a> {
    /// Each goal is served by the elite whose stored descriptor is nearest.
    Repertoire(&'a Repertoire),
    /// The transformer is conditioned on the goal directly.
    Qdt(&'a QdtModel),
}

#[derive(Clone, Debug)]
pub struct MethodRun<'a> {
    pub method: String,
    pub seed: u64,
    pub artifact: Artifact<'a>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub method: String,
    pub seed: u64,
    pub goal_x: f64,
    pub goal_y: f64,
    pub mean_distance: f64,
    pub mean_fitness: f64,
    pub spread: f64,
    pub n_episodes: usize,
}

/// Per-method overall numbers, mean and std over seeds of per-seed means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub n_seeds: usize,
    pub distance_mean: f64,
    pub distance_std: f64,
    pub spread_mean: f64,
    pub spread_std: f64,
    pub fitness_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyReport {
    pub rows: Vec<AccuracyRow>,
    pub summary: Vec<MethodSummary>,
}

/// Plays `n_episodes` of the repertoire elite nearest to each goal.
pub fn evaluate_repertoire_goals(
    rep: &Repertoire,
    goals: &Centroids,
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<GoalEvaluation>> {
    let seeds = goal_episode_seeds(seed, n_episodes);
    let points: Vec<&[f64]> = goals.iter().collect();
    points
        .par_iter()
        .map(|goal| {
            let (_, elite) = rep
                .nearest_elite(goal)
                .ok_or_else(|| Error::invalid("repertoire has no elites"))?;
            let mut episodes = Vec::with_capacity(n_episodes);
            for &s in &seeds {
                let mut policy = elite.genotype.policy();
                episodes.push(rep.env.rollout(&mut policy, s)?);
            }
            GoalEvaluation::from_episodes(goal, &episodes)
        })
        .collect()
}

fn method_order<'r>(names: impl Iterator<Item = &'r str>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for n in names {
        if !out.iter().any(|m| m == n) {
            out.push(n.to_string());
        }
    }
    out
}

pub fn run_accuracy(env: &EnvSpec, goals: &Centroids, runs: &[MethodRun<'_>], n_episodes: usize) -> Result<AccuracyReport> {
    if runs.is_empty() {
        return Err(Error::invalid("no methods to evaluate"));
    }
    let mut rows = Vec::new();
    for run in runs {
        let evals = match run.artifact {
            Artifact::Repertoire(rep) => {
                if rep.env != *env {
                    return Err(Error::invalid(format!(
                        "{}: repertoire was evolved on {} with T = {}",
                        run.method,
                        rep.env.name(),
                        rep.env.episode_len
                    )));
                }
                evaluate_repertoire_goals(rep, goals, n_episodes, run.seed)?
            }
            Artifact::Qdt(model) => evaluate_goals(model, env, goals, n_episodes, run.seed)?,
        };
        for e in evals {
            rows.push(AccuracyRow {
                method: run.method.clone(),
                seed: run.seed,
                goal_x: e.goal[0],
                goal_y: e.goal[1],
                mean_distance: e.mean_distance,
                mean_fitness: e.mean_fitness,
                spread: e.spread,
                n_episodes: e.achieved.len(),
            });
        }
    }
    let summary = method_order(runs.iter().map(|r| r.method.as_str()))
        .into_iter()
        .map(|method| summarize_method(&method, runs, &rows))
        .collect();
    Ok(AccuracyReport { rows, summary })
}

fn summarize_method(method: &str, runs: &[MethodRun<'_>], rows: &[AccuracyRow]) -> MethodSummary {
    let (mut dist, mut spread, mut fit) = (Vec::new(), Vec::new(), Vec::new());
    for run in runs.iter().filter(|r| r.method == method) {
        let mine: Vec<&AccuracyRow> = rows
            .iter()
            .filter(|r| r.method == method && r.seed == run.seed)
            .collect();
        let n = mine.len() as f64;
        dist.push(mine.iter().map(|r| r.mean_distance).sum::<f64>() / n);
        spread.push(mine.iter().map(|r| r.spread).sum::<f64>() / n);
        fit.push(mine.iter().map(|r| r.mean_fitness).sum::<f64>() / n);
    }
    let (distance_mean, distance_std) = mean_std(&dist);
    let (spread_mean, spread_std) = mean_std(&spread);
    MethodSummary {
        method: method.to_string(),
        n_seeds: dist.len(),
        distance_mean,
        distance_std,
        spread_mean,
        spread_std,
        fitness_mean: mean_std(&fit).0,
    }
}

impl AccuracyReport {
    pub fn summary_of(&self, method: &str) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    /// Overall mean distance of one method under one seed.
    pub fn seed_distance(&self, method: &str, seed: u64) -> Option<f64> {
        let d: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.seed == seed)
            .map(|r| r.mean_distance)
            .collect();
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    }

    /// Per-goal table of one method averaged over seeds, goals in first-seen order.
    pub fn method_grid(&self, method: &str) -> GridEvaluation {
        let mut acc: Vec<(f64, f64, Vec<&AccuracyRow>)> = Vec::new();
        for r in self.rows.iter().filter(|r| r.method == method) {
            match acc.iter_mut().find(|(x, y, _)| *x == r.goal_x && *y == r.goal_y) {
                Some(slot) => slot.2.push(r),
                None => acc.push((r.goal_x, r.goal_y, vec![r])),
            }
        }
        let rows = acc
            .into_iter()
            .map(|(x, y, rs)| {
                let n = rs.len() as f64;
                crate::qdt::GoalRow {
                    goal_x: x,
                    goal_y: y,
                    mean_distance: rs.iter().map(|r| r.mean_distance).sum::<f64>() / n,
                    mean_fitness: rs.iter().map(|r| r.mean_fitness).sum::<f64>() / n,
                    spread: rs.iter().map(|r| r.spread).sum::<f64>() / n,
                    n_episodes: rs.iter().map(|r| r.n_episodes).sum(),
                }
            })
            .collect();
        GridEvaluation { rows }
    }

    pub fn write(&self, w: &mut ReportWriter, space: &BdSpace) -> Result<()> {
        w.csv("accuracy_goals.csv", &self.rows)?;
        w.csv("accuracy_summary.csv", &self.summary)?;
        for s in &self.summary {
            let grid = self.method_grid(&s.method);
            write_grid(w, &format!("heatmap_{}", slug(&s.method)), &grid, space, &s.method)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------- generalization

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneralizationConfig {
    /// Prune schemes in `density:P`, `tiles:N:PARITY` or `upper-part:AXIS:T`
    /// notation; an unpruned `full` arm always runs first.
    pub arms: Vec<String>,
    pub n_episodes: usize,
}

impl Default for GeneralizationConfig {
    fn default() -> Self {
        Self {
            arms: ["density:0.5", "density:0.3", "density:0.1", "tiles:4:0", "upper-part:1:0"]
                .map(String::from)
                .to_vec(),
            n_episodes: 10,
        }
    }
}

impl GeneralizationConfig {
    pub fn schemes(&self) -> Result<Vec<PruneScheme>> {
        self.arms
            .iter()
            .map(|a| {
                let s: PruneScheme = a.parse()?;
                s.validate()?;
                Ok(s)
            })
            .collect()
    }
}

pub struct ArmResult {
    pub name: String,
    pub scheme: Option<PruneScheme>,
    pub dataset: TrajectoryDataset,
    pub outcome: FitOutcome,
    pub grid: GridEvaluation,
    /// Per goal, whether the arm's pruning keeps that region of the space.
    pub goal_retained: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub n_records: usize,
    pub best_epoch: usize,
    pub overall_distance: f64,
    pub n_removed_goals: usize,
    pub retained_distance: f64,
    pub removed_distance: Option<f64>,
    /// The unpruned model's distance on this arm's removed goals.
    pub full_removed_distance: Option<f64>,
}

pub struct GeneralizationReport {
    pub arms: Vec<ArmResult>,
    pub summary: Vec<ArmSummary>,
}

fn masked_mean(grid: &GridEvaluation, mask: &[bool], keep: bool) -> Option<f64> {
    let d: Vec<f64> = grid
        .rows
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m == keep)
        .map(|(r, _)| r.mean_distance)
        .collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

/// Trains one model on the full dataset and one per pruned variant, all with
/// the same seed, and evaluates each on the goal grid (best phase).
pub fn run_generalization(
    base: &TrajectoryDataset,
    env: &EnvSpec,
    goals: &Centroids,
    qdt: &QdtConfig,
    config: &GeneralizationConfig,
    seed: u64,
    mut progress: impl FnMut(&str, &crate::qdt::EpochRow),
) -> Result<GeneralizationReport> {
    let space = env.bd_space();
    let schemes = config.schemes()?;
    let plan = EvalPlan {
        env,
        goals,
        n_episodes: config.n_episodes,
        seed,
    };
    let mut arms: Vec<ArmResult> = Vec::new();
    let variants = std::iter::once(("full".to_string(), None))
        .chain(config.arms.iter().cloned().zip(schemes.into_iter().map(Some)));
    for (name, scheme) in variants {
        let dataset = match scheme {
            None => base.clone(),
            Some(s) => prune_dataset(base, s, &space, seed)?,
        };
        if dataset.is_empty() {
            return Err(Error::invalid(format!("arm `{name}` pruned every trajectory")));
        }
        let outcome = fit(&dataset, qdt, Some(&plan), seed, |row| progress(&name, row))?;
        let grid = outcome.best_grid.clone().expect("evaluation plan given");
        let goal_retained = goals
            .iter()
            .map(|g| {
                let g32: Vec<f32> = g.iter().map(|&x| x as f32).collect();
                scheme.map_or(true, |s| s.keeps_bd(&g32, &space))
            })
            .collect();
        arms.push(ArmResult {
            name,
            scheme,
            dataset,
            outcome,
            grid,
            goal_retained,
        });
    }
    let full = &arms[0].grid;
    let summary = arms
        .iter()
        .map(|a| ArmSummary {
            arm: a.name.clone(),
            n_records: a.dataset.len(),
            best_epoch: a.outcome.best_epoch,
            overall_distance: a.grid.overall_distance(),
            n_removed_goals: a.goal_retained.iter().filter(|k| !**k).count(),
            retained_distance: masked_mean(&a.grid, &a.goal_retained, true).unwrap_or(f64::NAN),
            removed_distance: masked_mean(&a.grid, &a.goal_retained, false),
            full_removed_distance: masked_mean(full, &a.goal_retained, false),
        })
        .collect();
    Ok(GeneralizationReport { arms, summary })
}

impl GeneralizationReport {
    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.summary.iter().find(|s| s.arm == name)
    }

    pub fn write(&self, w: &mut ReportWriter, space: &BdSpace) -> Result<()> {
        w.csv("generalization_summary.csv", &self.summary)?;
        for a in &self.arms {
            let s = slug(&a.name);
            write_density(w, &format!("density_{s}"), &a.dataset, space, &format!("dataset: {}", a.name))?;
            write_grid(w, &format!("grid_{s}"), &a.grid, space, &format!("QDT trained on {}", a.name))?;
            w.csv(&format!("training_{s}.csv"), &a.outcome.log.rows)?;
        }
        Ok(())
    }
}

// ------------------------------------------------------------ reassessment

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReassessRow {
    pub method: String,
    pub seed: u64,
    pub phase: String,
    pub coverage: f64,
    pub max_fitness: f64,
    pub qd_score: f64,
}

/// Table-3-shaped rows: initial and recalculated statistics per repertoire.
pub fn run_reassessment(reps: &[(String, u64, &Repertoire)], evals: usize) -> Result<Vec<ReassessRow>> {
    let mut rows = Vec::with_capacity(2 * reps.len());
    for (method, seed, rep) in reps {
        let (_, table) = reassess(rep, evals, *seed)?;
        for (phase, s) in [("initial", table.initial), ("recalc", table.recalc)] {
            rows.push(ReassessRow {
                method: method.clone(),
                seed: *seed,
                phase: phase.to_string(),
                coverage: s.coverage,
                max_fitness: s.max_fitness,
                qd_score: s.qd_score,
            });
        }
    }
    Ok(rows)
}

// --------------------------------------------------------- training curves

#[derive(Clone, Debug)]
pub struct CurveInput<'a> {
    pub variant: String,
    pub seed: u64,
    pub dataset: &'a TrajectoryDataset,
}

pub struct CurveRun {
    pub variant: String,
    pub seed: u64,
    pub outcome: FitOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub variant: String,
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub mean_distance: Option<f64>,
    pub max_fitness: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub variant: String,
    pub epoch: usize,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

pub struct CurvesReport {
    pub runs: Vec<CurveRun>,
    pub rows: Vec<CurveRow>,
    pub curve: Vec<CurvePoint>,
}

pub fn run_training_curves(
    inputs: &[CurveInput<'_>],
    env: &EnvSpec,
    goals: &Centroids,
    qdt: &QdtConfig,
    n_episodes: usize,
    mut progress: impl FnMut(&str, u64, &crate::qdt::EpochRow),
) -> Result<CurvesReport> {
    let mut runs = Vec::with_capacity(inputs.len());
    let mut rows = Vec::new();
    for input in inputs {
        let plan = EvalPlan {
            env,
            goals,
            n_episodes,
            seed: input.seed,
        };
        let outcome = fit(input.dataset, qdt, Some(&plan), input.seed, |r| progress(&input.variant, input.seed, r))?;
        rows.extend(curve_rows(&input.variant, input.seed, &outcome.log));
        runs.push(CurveRun {
            variant: input.variant.clone(),
            seed: input.seed,
            outcome,
        });
    }
    let curve = summarize_curves(&rows);
    Ok(CurvesReport { runs, rows, curve })
}

pub fn curve_rows(variant: &str, seed: u64, log: &TrainingLog) -> Vec<CurveRow> {
    log.rows
        .iter()
        .map(|r| CurveRow {
            variant: variant.to_string(),
            seed,
            epoch: r.epoch,
            train_loss: r.train_loss,
            mean_distance: r.mean_distance,
            max_fitness: r.max_fitness,
        })
        .collect()
}

/// Mean and std over seeds of the distance at every evaluated epoch.
pub fn summarize_curves(rows: &[CurveRow]) -> Vec<CurvePoint> {
    let mut out = Vec::new();
    for variant in method_order(rows.iter().map(|r| r.variant.as_str())) {
        let mut epochs: Vec<usize> = rows
            .iter()
            .filter(|r| r.variant == variant && r.mean_distance.is_some())
            .map(|r| r.epoch)
            .collect();
        epochs.sort_unstable();
        epochs.dedup();
        for epoch in epochs {
            let d: Vec<f64> = rows
                .iter()
                .filter(|r| r.variant == variant && r.epoch == epoch)
                .filter_map(|r| r.mean_distance)
                .collect();
            let (mean, std) = mean_std(&d);
            out.push(CurvePoint {
                variant: variant.clone(),
                epoch,
                mean,
                std,
                n_seeds: d.len(),
            });
        }
    }
    out
}

impl CurvesReport {
    /// Mean over seeds of the distance at the last evaluated epoch.
    pub fn final_distance(&self, variant: &str) -> Option<f64> {
        self.curve.iter().filter(|p| p.variant == variant).last().map(|p| p.mean)
    }

    pub fn write(&self, w: &mut ReportWriter) -> Result<()> {
        w.csv("curves.csv", &self.rows)?;
        let text = w.csv("curve_summary.csv", &self.curve)?;
        w.text(
            "curves.svg",
            &svg::curves(&text, "QDT training curves", "mean distance to goal")?,
        )
    }
}

// ----------------------------------------------------------- fitness eval

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitnessRow {
    pub source: String,
    pub epoch: Option<usize>,
    pub max_fitness: f64,
}

/// Max over goals of the per-goal mean fitness at every evaluation phase of
/// `log`, plus the reassessed maximum fitness of a reference repertoire.
pub fn run_fitness_eval(
    label: &str,
    log: &TrainingLog,
    reference: Option<(&str, &Repertoire, u64)>,
    reassess_evals: usize,
) -> Result<Vec<FitnessRow>> {
    let mut rows: Vec<FitnessRow> = log
        .rows
        .iter()
        .filter_map(|r| {
            r.max_fitness.map(|f| FitnessRow {
                source: label.to_string(),
                epoch: Some(r.epoch),
                max_fitness: f,
            })
        })
        .collect();
    if let Some((name, rep, seed)) = reference {
        let (_, table) = reassess(rep, reassess_evals, seed)?;
        rows.push(FitnessRow {
            source: format!("{name} (initial)"),
            epoch: None,
            max_fitness: table.initial.max_fitness,
        });
        rows.push(FitnessRow {
            source: format!("{name} (recalc)"),
            epoch: None,
            max_fitness: table.recalc.max_fitness,
        });
    }
    Ok(rows)
}
