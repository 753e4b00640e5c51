use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::decoder::Decoder;
use super::model::QdtModel;
use crate::envs::{EnvSpec, Trajectory};
use crate::error::{Error, Result};
use crate::geometry::{euclidean, spread_of, BehaviorDescriptor, Centroids};
use crate::qd::csv_error;
use crate::rng::{derive_seed, stream};

pub const DEFAULT_GOAL_EPISODES: usize = 10;
pub const DEFAULT_N_GOALS: usize = 64;

/// Episode seeds used for every goal: `derive_seed(seed, GOAL_EPISODES, 0) + e`.
pub fn goal_episode_seeds(seed: u64, n_episodes: usize) -> Vec<u64> {
    let base = derive_seed(seed, stream::GOAL_EPISODES, 0);
    (0..n_episodes as u64).map(|e| base.wrapping_add(e)).collect()
}

/// Plays `n_episodes` conditioned on `goal`, all in one decoding batch.
pub fn rollout_goal(
    model: &QdtModel,
    env: &EnvSpec,
    goal: &[f64],
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if goal.len() != env.bd_dim() {
        return Err(Error::DimensionMismatch {
            expected: env.bd_dim(),
            actual: goal.len(),
        });
    }
    if env.episode_len > model.config.max_t {
        return Err(Error::invalid(format!(
            "episode length {} exceeds max_t = {}",
            env.episode_len, model.config.max_t
        )));
    }
    let mut decoder = Decoder::broadcast(model, goal, n_episodes)?;
    env.rollout_batch(&mut decoder, &goal_episode_seeds(seed, n_episodes))
}

/// Outcome of conditioning on one goal.
#[derive(Clone, Debug, PartialEq)]
pub struct GoalEvaluation {
    pub goal: Vec<f64>,
    pub mean_distance: f64,
    pub mean_fitness: f64,
    /// Spread of the achieved descriptors; zero for a single episode.
    pub spread: f64,
    pub achieved: Vec<BehaviorDescriptor>,
    pub fitnesses: Vec<f64>,
}

impl GoalEvaluation {
    pub fn from_episodes(goal: &[f64], episodes: &[Trajectory]) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::invalid("a goal needs at least one episode"));
        }
        let n = episodes.len() as f64;
        let achieved: Vec<BehaviorDescriptor> = episodes.iter().map(|t| t.bd.clone()).collect();
        let fitnesses: Vec<f64> = episodes.iter().map(|t| t.fitness).collect();
        let mean_distance = achieved.iter().map(|b| euclidean(b.coords(), goal)).sum::<f64>() / n;
        let points: Vec<&[f64]> = achieved.iter().map(|b| b.coords()).collect();
        let spread = if points.len() < 2 { 0.0 } else { spread_of(&points)? };
        Ok(Self {
            goal: goal.to_vec(),
            mean_distance,
            mean_fitness: fitnesses.iter().sum::<f64>() / n,
            spread,
            achieved,
            fitnesses,
        })
    }
}

pub fn evaluate_goal(
    model: &QdtModel,
    env: &EnvSpec,
    goal: &[f64],
    n_episodes: usize,
    seed: u64,
) -> Result<GoalEvaluation> {
    let episodes = rollout_goal(model, env, goal, n_episodes, seed)?;
    GoalEvaluation::from_episodes(goal, &episodes)
}

/// One line of the per-goal evaluation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalRow {
    pub goal_x: f64,
    pub goal_y: f64,
    pub mean_distance: f64,
    pub mean_fitness: f64,
    pub spread: f64,
    pub n_episodes: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GridEvaluation {
    pub rows: Vec<GoalRow>,
}

impl GridEvaluation {
    pub fn from_goals(goals: &[GoalEvaluation]) -> Result<Self> {
        let rows = goals
            .iter()
            .map(|g| {
                if g.goal.len() != 2 {
                    return Err(Error::DimensionMismatch {
                        expected: 2,
                        actual: g.goal.len(),
                    });
                }
                Ok(GoalRow {
                    goal_x: g.goal[0],
                    goal_y: g.goal[1],
                    mean_distance: g.mean_distance,
                    mean_fitness: g.mean_fitness,
                    spread: g.spread,
                    n_episodes: g.achieved.len(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    /// Arithmetic mean of the per-goal mean distances.
    pub fn overall_distance(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.mean_distance))
    }

    pub fn overall_fitness(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.mean_fitness))
    }

    pub fn overall_spread(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.spread))
    }

    pub fn max_fitness(&self) -> f64 {
        self.rows.iter().map(|r| r.mean_fitness).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        if self.rows.is_empty() {
            w.write_record(["goal_x", "goal_y", "mean_distance", "mean_fitness", "spread", "n_episodes"])
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
            .collect::<std::result::Result<Vec<GoalRow>, _>>()
            .map_err(|e| csv_error(path, e))?;
        Ok(Self { rows })
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Evaluates every centroid as a goal, goals in parallel.
pub fn evaluate_goals(
    model: &QdtModel,
    env: &EnvSpec,
    goals: &Centroids,
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<GoalEvaluation>> {
    if goals.dim != env.bd_dim() {
        return Err(Error::DimensionMismatch {
            expected: env.bd_dim(),
            actual: goals.dim,
        });
    }
    let points: Vec<&[f64]> = goals.iter().collect();
    points
        .par_iter()
        .map(|g| evaluate_goal(model, env, g, n_episodes, seed))
        .collect()
}

pub fn evaluate_grid(
    model: &QdtModel,
    env: &EnvSpec,
    goals: &Centroids,
    n_episodes: usize,
    seed: u64,
) -> Result<GridEvaluation> {
    GridEvaluation::from_goals(&evaluate_goals(model, env, goals, n_episodes, seed)?)
}

/// Fraction of goals `g` for which conditioning on `g` lands closer to `g`
/// than conditioning on the goal farthest from `g` does.
///
/// `evals` must hold one evaluation per goal of the same grid.
pub fn conditioning_contrast(evals: &[GoalEvaluation]) -> f64 {
    if evals.len() < 2 {
        return f64::NAN;
    }
    let mut wins = 0;
    for e in evals {
        let far = evals
            .iter()
            .max_by(|a, b| {
                euclidean(&a.goal, &e.goal)
                    .partial_cmp(&euclidean(&b.goal, &e.goal))
                    .expect("finite goals")
            })
            .expect("non-empty");
        let off = far.achieved.iter().map(|b| euclidean(b.coords(), &e.goal)).sum::<f64>()
            / far.achieved.len() as f64;
        if e.mean_distance < off {
            wins += 1;
        }
    }
    wins as f64 / evals.len() as f64
}
