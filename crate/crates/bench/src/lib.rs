//! Shared fixtures for the criterion benches.

use lomoe_core::denoiser::DEFAULT_HEAD_SEED;
use lomoe_core::pipeline::timing_job;
use lomoe_core::toy::{toy_suite, ToySpec, BENCH_SEED};
use lomoe_core::{AttentionHead, EditJob, JobConfig, ToyWorld};

pub struct Fixture {
    pub world: ToyWorld,
    pub head: AttentionHead,
    pub jobs: Vec<EditJob>,
}

/// The first `n` seeded bench cases under the default configuration.
pub fn bench_fixture(n: usize) -> Fixture {
    let spec = ToySpec::bench();
    let world = spec.build().expect("bench world");
    let config = JobConfig::default().with_seed(BENCH_SEED);
    let head = AttentionHead::for_world(&world, config.t_total, DEFAULT_HEAD_SEED).expect("head");
    let jobs = toy_suite(&spec, &world, n, BENCH_SEED)
        .expect("suite")
        .iter()
        .map(|c| c.job(&config))
        .collect();
    Fixture { world, head, jobs }
}

/// One timing-world job per mask count.
pub fn timing_fixture(n_masks: &[usize]) -> Fixture {
    let spec = ToySpec::timing();
    let world = spec.build().expect("timing world");
    let config = JobConfig::default();
    let head = AttentionHead::for_world(&world, config.t_total, DEFAULT_HEAD_SEED).expect("head");
    let jobs = n_masks
        .iter()
        .map(|&n| timing_job(&spec, &world, n, &config).expect("timing job"))
        .collect();
    Fixture { world, head, jobs }
}
