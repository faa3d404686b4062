use std::path::{Path, PathBuf};

use lomoe_core::io::case::BenchCase;
use lomoe_core::io::formats::{decode_latent, decode_pgm_mask, decode_ppm, encode_latent, encode_pgm_mask, encode_ppm};
use lomoe_core::io::metrics::{bg_psnr, bg_ssim, fidelity_scores};
use lomoe_core::io::{list_cases, load_case_full, load_world};
use lomoe_core::toy::{toy_suite, write_suite, ToySpec, BENCH_CASES, BENCH_SEED, WORLD_FILE};
use lomoe_core::{build_mask_set, Error, LatentGrid, SeededRng};
use proptest::prelude::*;

fn bench_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy_bench")
}

fn grid(seed: u64, h: usize, w: usize, c: usize) -> LatentGrid {
    LatentGrid::standard_normal(h, w, c, &mut SeededRng::new(seed, 0))
}

fn rect_mask(h: usize, w: usize) -> LatentGrid {
    LatentGrid::from_fn(h, w, 1, |y, x, _| if y < h / 2 && x < w / 2 { 1.0 } else { 0.0 })
}

const CASE_JSON: &str = r#"{"id":"c","image":"c.lat","masks":["m.pgm"],"tip":"scene, red disc","smp":["red disc"],"tmp":["blue disc"],"ein":"make it blue","bindings":{}}"#;

proptest! {
    #[test]
    fn latent_round_trip(seed in any::<u64>(), h in 1usize..9, w in 1usize..9, c in 1usize..5) {
        let g = grid(seed, h, w, c).map(|v| v as f32 as f64);
        let bytes = encode_latent(&g);
        let back = decode_latent(&bytes, "x").unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(encode_latent(&back), bytes);
    }

    #[test]
    fn netpbm_round_trip(data in prop::collection::vec(any::<u8>(), 12), bits in prop::collection::vec(any::<bool>(), 4)) {
        let mut ppm = b"P6\n2 2\n255\n".to_vec();
        ppm.extend(&data);
        let img = decode_ppm(&ppm, "x").unwrap();
        prop_assert_eq!(encode_ppm(&img).unwrap(), ppm);
        let mask = LatentGrid::from_fn(2, 2, 1, |y, x, _| if bits[y * 2 + x] { 1.0 } else { 0.0 });
        prop_assert_eq!(decode_pgm_mask(&encode_pgm_mask(&mask).unwrap(), "x").unwrap(), mask);
    }

    #[test]
    fn latent_loader_never_panics(seed in any::<u64>(), flips in prop::collection::vec((any::<usize>(), any::<u8>()), 0..6), cut in any::<usize>()) {
        let mut bytes = encode_latent(&grid(seed, 3, 2, 2));
        for (i, b) in flips {
            let n = bytes.len();
            bytes[i % n] = b;
        }
        bytes.truncate(cut % (bytes.len() + 1));
        if let Err(e) = decode_latent(&bytes, "x") {
            prop_assert!(matches!(e, Error::Format { .. }), "{e}");
        }
    }

    #[test]
    fn netpbm_loaders_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..40), prefix in prop::sample::select(vec!["P5\n", "P6\n", "P5\n2 2\n", "P6\n1 1\n255\n"])) {
        let mut b = prefix.as_bytes().to_vec();
        b.extend(bytes);
        let _ = decode_ppm(&b, "x");
        let _ = decode_pgm_mask(&b, "x");
    }

    #[test]
    fn case_parser_never_panics(pos in 0usize..CASE_JSON.len(), cut in 0usize..CASE_JSON.len(), junk in "[a-z{}\\[\\]\",:0-9 ]{0,4}") {
        let mut text = CASE_JSON.to_string();
        if CASE_JSON.is_char_boundary(pos) {
            text.insert_str(pos, &junk);
        }
        text.truncate(cut.min(text.len()));
        let dir = Path::new(".");
        if let Err(e) = BenchCase::from_json(&text, Path::new("c.json"), dir) {
            prop_assert!(matches!(e, Error::Format { .. } | Error::Schema { .. }), "{e}");
        }
    }

    #[test]
    fn background_metrics_are_symmetric_and_mask_blind(seed in any::<u64>(), other in any::<u64>(), bump in -3.0f64..3.0) {
        let (h, w) = (12, 12);
        let a = grid(seed, h, w, 3);
        let b = a.zip_map(&grid(other, h, w, 3), |x, n| x + 0.1 * n).unwrap();
        let m = rect_mask(h, w);
        let m0 = m.map(|v| 1.0 - v);
        prop_assert_eq!(bg_psnr(&a, &b, &m0).unwrap(), bg_psnr(&b, &a, &m0).unwrap());
        let s_ab = bg_ssim(&a, &b, &m0).unwrap();
        prop_assert!((s_ab - bg_ssim(&b, &a, &m0).unwrap()).abs() < 1e-12);
        // edits confined to the mask do not move background scores
        let mut c = b.clone();
        for p in 0..h * w {
            if m.as_slice()[p] == 1.0 {
                for v in c.pixel_mut(p) {
                    *v += bump;
                }
            }
        }
        prop_assert_eq!(bg_psnr(&a, &c, &m0).unwrap(), bg_psnr(&a, &b, &m0).unwrap());
    }
}

#[test]
fn fidelity_ignores_the_background() {
    let world = load_world(&bench_dir().join(WORLD_FILE)).unwrap();
    for path in list_cases(&bench_dir()).unwrap().iter().take(4) {
        let case = load_case_full(path, &world).unwrap();
        let (h, w, c) = world.shape();
        let ms = build_mask_set(h, w, &case.masks).unwrap();
        let f = fidelity_scores(&case.image, &ms, &case.source, &case.targets, &world).unwrap();
        let noise = grid(3, h, w, c);
        let mut y = case.image.clone();
        for p in 0..h * w {
            if ms.background().as_slice()[p] == 1.0 {
                y.pixel_mut(p).copy_from_slice(noise.pixel(p));
            }
        }
        let g = fidelity_scores(&y, &ms, &case.source, &case.targets, &world).unwrap();
        assert_eq!(f, g);
    }
}

#[test]
fn shipped_bench_is_byte_stable() {
    let dir = bench_dir();
    for path in list_cases(&dir).unwrap() {
        let text = std::fs::read_to_string(&path).unwrap();
        let case = BenchCase::from_json(&text, &path, &dir).unwrap();
        assert_eq!(case.to_json(), text, "{}", path.display());
    }
    let spec = ToySpec::bench();
    let world = spec.build().unwrap();
    let cases = toy_suite(&spec, &world, BENCH_CASES, BENCH_SEED).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    write_suite(&world, &cases, tmp.path()).unwrap();
    let mut n = 0;
    for entry in walk(tmp.path()) {
        let rel = entry.strip_prefix(tmp.path()).unwrap();
        let shipped = std::fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("{}: {e}", rel.display()));
        assert_eq!(std::fs::read(&entry).unwrap(), shipped, "{}", rel.display());
        n += 1;
    }
    assert!(n > BENCH_CASES * 3);
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}
