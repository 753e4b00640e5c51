//! MAP-Elites, MAP-Elites Low-Spread and MAP-Elites-Sampling over a CVT
//! archive, plus training metrics and reassessment.

mod evaluate;
mod evolution;
mod reassess;
mod repertoire;

pub use evaluate::{
    evaluate_solution, evaluate_with, modal_cell_bd, BdSummary, Evaluation, MEDIAN_MAX_ITERS,
    MEDIAN_TOL,
};
pub use evolution::{run_evolution, Evolution, EvolutionConfig, MetricsRow, QdMetrics};
pub(crate) use evolution::csv_error;
pub use reassess::{posthoc_spreads, reassess, ReassessmentTable, POSTHOC_EVALS};
pub use repertoire::{CellRecord, Repertoire, RepertoireStats, Variant};
