//! Regenerates the shipped toy bench and its golden metrics.
//!
//! cargo run --release -p lomoe-core --example make_toy_bench [-- <dir>]

use std::path::PathBuf;

use lomoe_core::denoiser::{AttentionHead, DEFAULT_HEAD_SEED};
use lomoe_core::io::report::{CaseRow, Golden, Thresholds};
use lomoe_core::io::{load_case_full, load_world};
use lomoe_core::pipeline::{run_edit, EditJob, JobConfig};
use lomoe_core::toy::{toy_suite, write_suite, ToySpec, BENCH_CASES, BENCH_SEED, GOLDEN_FILE, WORLD_FILE};

fn main() -> lomoe_core::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data/toy_bench".into()));
    std::fs::create_dir_all(&dir).expect("create output dir");
    let spec = ToySpec::bench();
    let world = spec.build()?;
    let cases = toy_suite(&spec, &world, BENCH_CASES, BENCH_SEED)?;
    let paths = write_suite(&world, &cases, &dir)?;

    // golden runs use the files as loaded, so f32 storage is accounted for
    let world = load_world(&dir.join(WORLD_FILE))?;
    let config = JobConfig::default().with_seed(BENCH_SEED);
    let head = AttentionHead::for_world(&world, config.t_total, DEFAULT_HEAD_SEED)?;
    let mut golden = Golden {
        config: config.clone(),
        thresholds: Thresholds::default(),
        cases: Vec::new(),
    };
    for p in &paths {
        let case = load_case_full(p, &world)?;
        let r = run_edit(&EditJob::from_case(&case, &config), &world, &head)?;
        println!("{} {:?}", r.id, r.metrics);
        golden.cases.push(CaseRow {
            id: r.id.clone(),
            n_masks: case.masks.len(),
            start: r.start,
            metrics: r.metrics,
        });
    }
    let golden_path = dir.join(GOLDEN_FILE);
    std::fs::create_dir_all(golden_path.parent().expect("nested path")).expect("create golden dir");
    std::fs::write(golden_path, golden.to_json()).expect("write golden");
    Ok(())
}
