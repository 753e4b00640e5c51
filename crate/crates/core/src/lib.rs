//! Quality-diversity neuroevolution with behaviorally consistent elites, and a
//! behavior-conditioned causal transformer distilled from the resulting archives.

pub mod dataset;
pub mod envs;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod nn;
pub mod policy;
pub mod qd;
pub mod qdt;
pub mod rng;

pub use envs::{EnvKind, EnvSpec, Trajectory};
pub use error::{Error, Result};
pub use geometry::{build_cvt, spread, BdSpace, BehaviorDescriptor, Centroids, CvtParams};
pub use policy::{isoline_variation, Architecture, Genotype};
pub use qd::{CellRecord, Repertoire, Variant};
