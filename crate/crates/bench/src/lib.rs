//! Fixtures shared by the benchmarks.

use qdlab::dataset::{generate_dataset, TrajectoryDataset};
use qdlab::envs::EnvKind;
use qdlab::qdt::{QdtConfig, TokenBatch};
use qdlab::rng::{derived_rng, stream};
use qdlab::{Architecture, BehaviorDescriptor, EnvSpec, Genotype};
use rand::Rng as _;

pub fn point_env() -> EnvSpec {
    EnvSpec::new(EnvKind::PointOmni)
}

pub fn desk_policy(seed: u64) -> Genotype {
    Genotype::init_random(&Architecture::new(4, vec![32, 32], 2), seed)
}

pub fn random_bds(k: usize, seed: u64) -> Vec<BehaviorDescriptor> {
    let mut rng = derived_rng(seed, stream::INIT, 0);
    (0..k)
        .map(|_| BehaviorDescriptor(vec![rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0)]))
        .collect()
}

/// Trajectories of a few random desk policies.
pub fn small_dataset(n: usize, seed: u64) -> TrajectoryDataset {
    let policies: Vec<Genotype> = (0..4).map(|i| desk_policy(seed + i)).collect();
    let refs: Vec<&Genotype> = policies.iter().collect();
    generate_dataset(&refs, &point_env(), n, seed).expect("dataset")
}

pub fn batch_of(ds: &TrajectoryDataset, n: usize) -> TokenBatch<f32> {
    let records: Vec<_> = ds.records.iter().take(n).collect();
    TokenBatch::from_records(&records, &ds.header)
}

pub fn desk_qdt() -> QdtConfig {
    QdtConfig::default()
}
