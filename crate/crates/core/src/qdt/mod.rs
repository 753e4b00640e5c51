//! The behavior-conditioned causal transformer: tokenization of
//! `(bd, obs, act)` triples, supervised training on whole trajectories and
//! autoregressive goal-conditioned evaluation.

mod decoder;
mod eval;
mod model;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use decoder::Decoder;
pub use eval::{
    conditioning_contrast, evaluate_goal, evaluate_goals, evaluate_grid, goal_episode_seeds, rollout_goal, GoalEvaluation, GoalRow,
    GridEvaluation, DEFAULT_GOAL_EPISODES, DEFAULT_N_GOALS,
};
pub use model::{Activation, ModelDims, QdtConfig, QdtModel, TokenBatch};
pub use train::{batch_loss, StepStats, Trainer};

use crate::dataset::TrajectoryDataset;
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::geometry::Centroids;
use crate::qd::csv_error;

/// Goal grid used for the periodic evaluation phases while training.
#[derive(Clone, Debug)]
pub struct EvalPlan<'a> {
    pub env: &'a EnvSpec,
    pub goals: &'a Centroids,
    pub n_episodes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub mean_distance: Option<f64>,
    /// Largest per-goal mean fitness of the evaluation phase.
    pub max_fitness: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<EpochRow>,
}

impl TrainingLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        if self.rows.is_empty() {
            w.write_record(["epoch", "train_loss", "mean_distance", "max_fitness"])
                .map_err(|e| csv_error(path, e))?;
        }
        for row in &self.rows {
            w.serialize(row).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<EpochRow>, _>>()
            .map_err(|e| csv_error(path, e))?;
        Ok(Self { rows })
    }

    /// `(epoch, distance)` of the evaluation phases.
    pub fn distances(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.rows.iter().filter_map(|r| r.mean_distance.map(|d| (r.epoch, d)))
    }
}

pub struct FitOutcome {
    pub last: QdtModel,
    /// The model from the evaluation phase with the lowest mean distance, or
    /// the last model when no evaluation ran.
    pub best: QdtModel,
    pub best_epoch: usize,
    pub best_grid: Option<GridEvaluation>,
    pub log: TrainingLog,
}

/// Trains for `config.epochs` epochs, evaluating on the goal grid every
/// `config.eval_every` epochs and after the last one.
pub fn fit(
    dataset: &TrajectoryDataset,
    config: &QdtConfig,
    eval: Option<&EvalPlan<'_>>,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<FitOutcome> {
    let model = QdtModel::new(config.clone(), ModelDims::of(&dataset.header), seed)?;
    let mut trainer = Trainer::new(model, seed);
    let mut log = TrainingLog::default();
    let mut best: Option<(QdtModel, usize, GridEvaluation)> = None;
    for epoch in 1..=config.epochs {
        let train_loss = trainer.train_epoch(dataset)?;
        let due = epoch % config.eval_every == 0 || epoch == config.epochs;
        let (mut mean_distance, mut max_fitness) = (None, None);
        if let (Some(plan), true) = (eval, due) {
            let grid = evaluate_grid(&trainer.model, plan.env, plan.goals, plan.n_episodes, plan.seed)?;
            let d = grid.overall_distance();
            mean_distance = Some(d);
            max_fitness = Some(grid.max_fitness());
            if best.as_ref().map_or(true, |(_, _, g)| d < g.overall_distance()) {
                best = Some((trainer.model.clone(), epoch, grid));
            }
        }
        let row = EpochRow {
            epoch,
            train_loss,
            mean_distance,
            max_fitness,
        };
        on_epoch(&row);
        log.rows.push(row);
    }
    let last = trainer.model;
    Ok(match best {
        Some((model, epoch, grid)) => FitOutcome {
            last,
            best: model,
            best_epoch: epoch,
            best_grid: Some(grid),
            log,
        },
        None => FitOutcome {
            best: last.clone(),
            last,
            best_epoch: config.epochs,
            best_grid: None,
            log,
        },
    })
}
