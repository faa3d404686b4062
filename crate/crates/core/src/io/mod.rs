//! File formats, bench cases, metrics and reports.

pub mod case;
pub mod formats;
pub mod metrics;
pub mod report;
pub mod world_file;

pub use case::{list_cases, load_case, load_case_full, save_case, BenchCase, LoadedCase};
pub use formats::{
    load_image_any, load_image_ppm, load_latent, load_mask_any, load_mask_pgm, save_image_ppm, save_latent,
    save_mask_pgm,
};
pub use metrics::{bg_psnr, bg_ssim, compute_metrics, fidelity_scores, structural_proxy, MetricsRecord};
pub use world_file::{load_world, save_world};
