//! Localized multi-object latent editing over an analytic toy diffusion world.
pub mod compose;
pub mod denoiser;
pub mod error;
pub mod inversion;
pub mod io;
pub mod numerics;
pub mod pipeline;
pub mod preserve;
pub mod schedule;
pub mod toy;

pub use compose::{build_mask_set, BootstrapConfig, MaskSet};
pub use denoiser::{AttentionHead, AttentionMap, PromptSpec, ToyWorld};
pub use error::{Error, Result};
pub use inversion::{invert, InversionTrace, RegConfig};
pub use io::metrics::MetricsRecord;
pub use numerics::{LatentGrid, Pyramid, SeededRng};
pub use pipeline::{run_edit, run_iterative, AblationAxis, AblationReport, EditJob, EditResult, JobConfig};
pub use preserve::{reconstruct, GuidanceConfig, ReconCache};
pub use schedule::{NoiseSchedule, ScheduleKind, StepIndexMap};
