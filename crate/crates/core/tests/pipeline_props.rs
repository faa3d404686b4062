use lomoe_core::numerics::masked_l2;
use lomoe_core::pipeline::run_edit_random_start;
use lomoe_core::toy::{toy_suite, ToyCase, ToySpec};
use lomoe_core::{run_edit, run_iterative, AttentionHead, JobConfig, ToyWorld};

fn setup(n: usize) -> (ToyWorld, Vec<ToyCase>, AttentionHead) {
    let spec = ToySpec::bench();
    let world = spec.build().unwrap();
    let cases = toy_suite(&spec, &world, n, 7).unwrap();
    let head = AttentionHead::for_world(&world, 1000, 42).unwrap();
    (world, cases, head)
}

fn config(lambda_b: f64) -> JobConfig {
    let mut c = JobConfig::default().with_seed(7);
    c.steps = 20;
    c.guidance.lambda_b = lambda_b;
    c
}

#[test]
fn background_weight_never_hurts_the_background() {
    let (world, cases, head) = setup(16);
    for case in &cases {
        let cfg = |lambda_b: f64| {
            let mut c = JobConfig::default().with_seed(7);
            c.guidance.lambda_b = lambda_b;
            c
        };
        let m0 = case.job(&cfg(0.0)).mask_set().unwrap().background().clone();
        let err = |lb: f64| {
            let r = run_edit(&case.job(&cfg(lb)), &world, &head).unwrap();
            masked_l2(&r.edited.sub(&r.reconstruction).unwrap(), &m0).unwrap()
        };
        let (strong, none) = (err(5.0), err(0.0));
        assert!(strong <= none, "{}: {strong:e} vs {none:e}", case.id);
    }
}

#[test]
fn edits_are_deterministic() {
    let (world, cases, head) = setup(2);
    for case in &cases {
        let job = case.job(&config(1.75));
        let a = run_edit(&job, &world, &head).unwrap();
        let b = run_edit(&job, &world, &head).unwrap();
        assert_eq!(a.edited.as_slice(), b.edited.as_slice());
        assert_eq!(a.metrics, b.metrics);
        let t = &a.timings;
        assert!(t.inversion + t.reconstruction + t.edit + t.metrics <= t.total);
        let ra = run_edit_random_start(&job, &world, &head).unwrap();
        let rb = run_edit_random_start(&job, &world, &head).unwrap();
        assert_eq!(ra.edited.as_slice(), rb.edited.as_slice());
    }
}

#[test]
fn one_mask_iterative_matches_single_pass() {
    let (world, cases, head) = setup(8);
    let single: Vec<_> = cases.iter().filter(|c| c.masks.len() == 1).collect();
    assert!(!single.is_empty());
    for case in single {
        let job = case.job(&config(1.75));
        let a = run_edit(&job, &world, &head).unwrap();
        let b = run_iterative(&job, &world, &head).unwrap();
        assert_eq!(a.edited.as_slice(), b.edited.as_slice());
        assert_eq!(a.metrics, b.metrics);
    }
}

#[test]
fn random_start_loses_the_input() {
    let (world, cases, head) = setup(1);
    let mut job = cases[0].job(&config(1.75));
    job.masks.clear();
    job.targets.clear();
    let full = lomoe_core::LatentGrid::filled(job.x0.height(), job.x0.width(), 1, 1.0);
    let psnr = |r: &lomoe_core::EditResult| lomoe_core::io::metrics::bg_psnr(&r.edited, &job.x0, &full).unwrap();
    let inv = run_edit(&job, &world, &head).unwrap();
    let rnd = run_edit_random_start(&job, &world, &head).unwrap();
    assert!(psnr(&rnd) + 10.0 < psnr(&inv), "{} vs {}", psnr(&rnd), psnr(&inv));
}
