use std::collections::BTreeMap;

use crate::envs::{EnvSpec, Trajectory};
use crate::error::{Error, Result};
use crate::geometry::{geometric_median, spread_of, BehaviorDescriptor, Centroids};
use crate::policy::Genotype;
use crate::rng::stable_mean;

/// Tolerance and iteration budget for the sampling baseline's median.
pub const MEDIAN_TOL: f64 = 1e-9;
pub const MEDIAN_MAX_ITERS: usize = 500;

/// How a multi-episode evaluation is summarised into one descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BdSummary {
    ModalCell,
    GeometricMedian,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub fitness: f64,
    pub bd: BehaviorDescriptor,
    /// Absent for single-episode evaluations.
    pub spread: Option<f64>,
    pub trajectories: Vec<Trajectory>,
}

impl Evaluation {
    pub fn n_evals(&self) -> usize {
        self.trajectories.len()
    }
}

/// Plays `evals` episodes with seeds `base_seed..base_seed + evals` and
/// summarises them with the modal-cell descriptor.
pub fn evaluate_solution(
    genotype: &Genotype,
    env: &EnvSpec,
    centroids: &Centroids,
    evals: usize,
    base_seed: u64,
) -> Result<Evaluation> {
    evaluate_with(genotype, env, centroids, evals, base_seed, BdSummary::ModalCell)
}

pub fn evaluate_with(
    genotype: &Genotype,
    env: &EnvSpec,
    centroids: &Centroids,
    evals: usize,
    base_seed: u64,
    summary: BdSummary,
) -> Result<Evaluation> {
    if evals == 0 {
        return Err(Error::invalid("an evaluation needs at least one episode"));
    }
    let mut policy = genotype.policy();
    let trajectories = (0..evals as u64)
        .map(|i| env.rollout(&mut policy, base_seed.wrapping_add(i)))
        .collect::<Result<Vec<_>>>()?;
    summarize(trajectories, centroids, summary)
}

pub(crate) fn summarize(
    trajectories: Vec<Trajectory>,
    centroids: &Centroids,
    summary: BdSummary,
) -> Result<Evaluation> {
    let fitness = stable_mean(trajectories.iter().map(|t| t.fitness));
    let bds: Vec<&[f64]> = trajectories.iter().map(|t| t.bd.coords()).collect();
    let bd = match summary {
        _ if bds.len() == 1 => trajectories[0].bd.clone(),
        BdSummary::ModalCell => modal_cell_bd(&bds, centroids).1,
        BdSummary::GeometricMedian => {
            let owned: Vec<BehaviorDescriptor> =
                trajectories.iter().map(|t| t.bd.clone()).collect();
            geometric_median(&owned, MEDIAN_TOL, MEDIAN_MAX_ITERS)?
        }
    };
    let spread = if bds.len() >= 2 {
        Some(spread_of(&bds)?)
    } else {
        None
    };
    Ok(Evaluation {
        fitness,
        bd,
        spread,
        trajectories,
    })
}

/// Most frequent cell among the episode descriptors (lowest index on ties)
/// and the component-wise mean of the descriptors that landed there.
pub fn modal_cell_bd(bds: &[&[f64]], centroids: &Centroids) -> (usize, BehaviorDescriptor) {
    let mut hits: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for bd in bds {
        hits.entry(centroids.nearest_cell(bd)).or_default().push(bd);
    }
    let mut best: Option<(usize, &Vec<&[f64]>)> = None;
    for (cell, members) in &hits {
        if best.map_or(true, |(_, b)| members.len() > b.len()) {
            best = Some((*cell, members));
        }
    }
    let (cell, members) = best.expect("at least one descriptor");
    let dim = members[0].len();
    let mean = (0..dim)
        .map(|d| stable_mean(members.iter().map(|m| m[d])))
        .collect();
    (cell, BehaviorDescriptor(mean))
}
