#![allow(dead_code)]

use fedtwin::federated::{ClientState, StationPolicy};
use fedtwin::harness::{partition, prepare_client, prepare_cohort, synth_cohort, SynthParams};
use fedtwin::projection::{FlatTable, ProjectionSpec};
use fedtwin::survival::TrainingConfig;

pub fn small_params(n: usize) -> SynthParams {
    SynthParams {
        n,
        // A higher hazard keeps small cohorts informative.
        baseline_hazard: 0.03,
        ..SynthParams::default()
    }
}

pub fn small_table(n: usize, seed: u64) -> FlatTable {
    let cohort = synth_cohort(&small_params(n), seed).unwrap();
    prepare_cohort(&cohort.dataset, &ProjectionSpec::default_spec()).unwrap().table
}

pub fn quick_training(seed: u64) -> TrainingConfig {
    TrainingConfig {
        learning_rate: 0.1,
        epochs: 4,
        dropout: 0.25,
        seed,
        patience: 10,
    }
}

pub fn stations(table: &FlatTable, fractions: &[f64], seed: u64) -> Vec<ClientState> {
    let policy = StationPolicy::for_spec(&ProjectionSpec::default_spec());
    partition(table, fractions, seed)
        .unwrap()
        .iter()
        .enumerate()
        .map(|(k, part)| {
            let (data, _) = prepare_client(part, [0.6, 0.2, 0.2], seed + k as u64).unwrap();
            ClientState::new(k as u32 + 1, data, Some(policy.clone()), quick_training(100 + k as u64))
        })
        .collect()
}
