use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::evaluate::{evaluate_with, BdSummary, Evaluation};
use super::repertoire::{CellRecord, Repertoire, Variant};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::geometry::Centroids;
use crate::policy::{isoline_variation, Architecture, Genotype};
use crate::rng::{derive_seed, derived_rng, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolutionConfig {
    pub variant: Variant,
    pub iterations: usize,
    pub batch_size: usize,
    /// Number of random candidates before variation starts (`G`).
    pub init_solutions: usize,
    /// Episodes per candidate; `None` uses the variant's default.
    pub evals: Option<usize>,
    pub iso_sigma: f64,
    pub line_sigma: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            variant: Variant::MeLs,
            iterations: 300,
            batch_size: 64,
            init_solutions: 64,
            evals: None,
            iso_sigma: 0.02,
            line_sigma: 0.1,
            hidden: vec![32, 32],
            seed: 0,
        }
    }
}

impl EvolutionConfig {
    pub fn evals(&self) -> usize {
        self.evals.unwrap_or_else(|| self.variant.default_evals())
    }

    pub fn architecture(&self, env: &EnvSpec) -> Architecture {
        Architecture::new(env.obs_dim(), self.hidden.clone(), env.act_dim())
    }

    /// Every problem with the configuration, one message per field.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_size == 0 {
            out.push("batch_size: must be at least 1".to_string());
        }
        if self.init_solutions == 0 {
            out.push("init_solutions: must be at least 1".to_string());
        }
        let evals = self.evals();
        if evals == 0 {
            out.push("evals: must be at least 1".to_string());
        }
        if matches!(self.variant, Variant::MeLs | Variant::MeSampling) && evals < 2 {
            out.push(format!("evals: {} needs at least 2 episodes per candidate", self.variant));
        }
        if !(self.iso_sigma >= 0.0 && self.iso_sigma.is_finite()) {
            out.push("iso_sigma: must be finite and non-negative".to_string());
        }
        if !(self.line_sigma >= 0.0 && self.line_sigma.is_finite()) {
            out.push("line_sigma: must be finite and non-negative".to_string());
        }
        if self.hidden.contains(&0) {
            out.push("hidden: layer widths must be positive".to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(problems.join("; ")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub env_interactions: u64,
    pub coverage: f64,
    pub max_fitness: f64,
    pub qd_score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QdMetrics {
    pub rows: Vec<MetricsRow>,
}

impl QdMetrics {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| csv_error(path, e))?;
        }
        if self.rows.is_empty() {
            w.write_record(["env_interactions", "coverage", "max_fitness", "qd_score"])
                .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<MetricsRow>, _>>()
            .map_err(|e| csv_error(path, e))?;
        Ok(Self { rows })
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

/// Stepwise driver of one evolution run.
pub struct Evolution {
    env: EnvSpec,
    config: EvolutionConfig,
    arch: Architecture,
    repertoire: Repertoire,
    metrics: QdMetrics,
    iteration: usize,
    next_candidate: u64,
}

impl Evolution {
    pub fn new(env: &EnvSpec, centroids: &Centroids, config: &EvolutionConfig) -> Result<Self> {
        config.validate()?;
        env.validate()?;
        if centroids.dim != env.bd_dim() {
            return Err(Error::DimensionMismatch {
                expected: env.bd_dim(),
                actual: centroids.dim,
            });
        }
        Ok(Self {
            env: env.clone(),
            arch: config.architecture(env),
            config: config.clone(),
            repertoire: Repertoire::new(centroids.clone(), env.clone(), config.variant, config.seed),
            metrics: QdMetrics::default(),
            iteration: 0,
            next_candidate: 0,
        })
    }

    pub fn repertoire(&self) -> &Repertoire {
        &self.repertoire
    }

    pub fn metrics(&self) -> &QdMetrics {
        &self.metrics
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    /// Generates, evaluates and inserts one batch; returns its metrics row.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let cfg = &self.config;
        let evals = cfg.evals();
        let first = self.next_candidate;
        let batch = cfg.batch_size as u64;
        // The occupied cells at the start of the batch; parents are drawn from here.
        let parents: Vec<&Genotype> = self.repertoire.cells.values().map(|c| &c.genotype).collect();
        let candidates: Vec<Genotype> = (first..first + batch)
            .map(|j| self.candidate(j, &parents))
            .collect::<Result<_>>()?;
        let summary = match cfg.variant {
            Variant::MeSampling => BdSummary::GeometricMedian,
            Variant::Me | Variant::MeLs => BdSummary::ModalCell,
        };
        let env = &self.env;
        let centroids = &self.repertoire.centroids;
        let seed = cfg.seed;
        let evaluations: Vec<Evaluation> = candidates
            .par_iter()
            .enumerate()
            .map(|(i, g)| {
                let base = derive_seed(seed, stream::EVALUATION, first + i as u64);
                evaluate_with(g, env, centroids, evals, base, summary)
            })
            .collect::<Result<_>>()?;
        let variant = cfg.variant;
        for (genotype, ev) in candidates.into_iter().zip(evaluations) {
            let record = CellRecord {
                genotype,
                fitness: ev.fitness,
                bd: ev.bd,
                spread: ev.spread,
                n_evals: evals as u32,
            };
            self.repertoire.insert(variant, record)?;
        }
        self.next_candidate += batch;
        self.iteration += 1;
        let stats = self.repertoire.stats();
        let previous = self.metrics.rows.last().map_or(0, |r| r.env_interactions);
        let row = MetricsRow {
            env_interactions: previous + batch * evals as u64 * self.env.episode_len as u64,
            coverage: stats.coverage,
            max_fitness: stats.max_fitness,
            qd_score: stats.qd_score,
        };
        self.metrics.rows.push(row);
        Ok(row)
    }

    /// Candidate `j` of the run: random while `j < G` (or while the archive
    /// is still empty), otherwise an isoline child of two distinct elites.
    fn candidate(&self, j: u64, parents: &[&Genotype]) -> Result<Genotype> {
        let cfg = &self.config;
        if j < cfg.init_solutions as u64 || parents.is_empty() {
            return Ok(Genotype::init_random(
                &self.arch,
                derive_seed(cfg.seed, stream::INIT, j),
            ));
        }
        let mut rng = derived_rng(cfg.seed, stream::VARIATION, j);
        let n = parents.len();
        let a = rng.random_range(0..n);
        let b = if n > 1 {
            let b = rng.random_range(0..n - 1);
            if b >= a {
                b + 1
            } else {
                b
            }
        } else {
            a
        };
        isoline_variation(parents[a], parents[b], cfg.iso_sigma, cfg.line_sigma, rng.random())
    }

    pub fn finish(self) -> (Repertoire, QdMetrics) {
        (self.repertoire, self.metrics)
    }
}

pub fn run_evolution(
    env: &EnvSpec,
    centroids: &Centroids,
    config: &EvolutionConfig,
) -> Result<(Repertoire, QdMetrics)> {
    let mut evo = Evolution::new(env, centroids, config)?;
    while !evo.is_done() {
        evo.step()?;
    }
    Ok(evo.finish())
}
