use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::evaluate::{evaluate_solution, Evaluation};
use super::repertoire::{CellRecord, Repertoire, RepertoireStats};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};

/// Episodes used for reassessment and post-hoc spread measurements.
pub const POSTHOC_EVALS: usize = 10;

/// "Initial" versus "recalculated" archive statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReassessmentTable {
    pub initial: RepertoireStats,
    pub recalc: RepertoireStats,
}

/// Re-evaluates every elite over `evals` fresh episodes (the same seeds for
/// each elite) and rebuilds an archive from the recalculated values with the
/// plain fitness rule.
pub fn reassess(rep: &Repertoire, evals: usize, seed: u64) -> Result<(Repertoire, ReassessmentTable)> {
    if rep.is_empty() {
        return Err(Error::invalid("cannot reassess an empty repertoire"));
    }
    let evaluations = reevaluate(rep, evals, derive_seed(seed, stream::REASSESS, 0))?;
    let mut fresh = rep.empty_like();
    for (rec, ev) in rep.cells.values().zip(evaluations) {
        fresh.insert_me(CellRecord {
            genotype: rec.genotype.clone(),
            fitness: ev.fitness,
            bd: ev.bd,
            spread: ev.spread,
            n_evals: evals as u32,
        })?;
    }
    let table = ReassessmentTable {
        initial: rep.stats(),
        recalc: fresh.stats(),
    };
    Ok((fresh, table))
}

/// Spread of every elite over [`POSTHOC_EVALS`] fresh episodes shared by all
/// elites, in cell order.
pub fn posthoc_spreads(rep: &Repertoire, seed: u64) -> Result<Vec<f64>> {
    let evaluations = reevaluate(rep, POSTHOC_EVALS, derive_seed(seed, stream::POSTHOC, 0))?;
    Ok(evaluations
        .into_iter()
        .map(|e| e.spread.expect("ten episodes"))
        .collect())
}

fn reevaluate(rep: &Repertoire, evals: usize, base: u64) -> Result<Vec<Evaluation>> {
    let records: Vec<&CellRecord> = rep.cells.values().collect();
    records
        .par_iter()
        .map(|rec| evaluate_solution(&rec.genotype, &rep.env, &rep.centroids, evals, base))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvKind, EnvSpec};
    use crate::geometry::build_cvt;
    use crate::qd::{run_evolution, EvolutionConfig, Variant};

    fn evolved(sigma: f64) -> Repertoire {
        let env = EnvSpec::new(EnvKind::PointOmni)
            .with_episode_len(30)
            .with_init_noise(sigma);
        let c = build_cvt(&env.bd_space(), 32, 3200, 50, 1).unwrap();
        let cfg = EvolutionConfig {
            variant: Variant::Me,
            iterations: 5,
            batch_size: 16,
            init_solutions: 16,
            hidden: vec![8],
            ..EvolutionConfig::default()
        };
        run_evolution(&env, &c, &cfg).unwrap().0
    }

    #[test]
    fn noiseless_reassessment_changes_nothing() {
        let rep = evolved(0.0);
        let (fresh, table) = reassess(&rep, 10, 3).unwrap();
        assert_eq!(table.initial, table.recalc);
        assert_eq!(
            fresh.cells.keys().collect::<Vec<_>>(),
            rep.cells.keys().collect::<Vec<_>>()
        );
    }

    #[test]
    fn single_policy_occupies_one_cell() {
        let mut rep = evolved(0.3);
        let (&k, _) = rep.cells.iter().next().unwrap();
        rep.cells.retain(|c, _| *c == k);
        let (fresh, table) = reassess(&rep, 10, 3).unwrap();
        assert_eq!(fresh.len(), 1);
        assert!(table.recalc.coverage <= table.initial.coverage);
        assert!(reassess(&rep.empty_like(), 10, 0).is_err());
    }

    #[test]
    fn recalc_never_exceeds_initial_coverage() {
        let rep = evolved(0.3);
        let (_, table) = reassess(&rep, 10, 9).unwrap();
        assert!(table.recalc.coverage <= table.initial.coverage);
        let spreads = posthoc_spreads(&rep, 1).unwrap();
        assert_eq!(spreads.len(), rep.len());
        assert!(spreads.iter().all(|s| *s >= 0.0));
    }
}
