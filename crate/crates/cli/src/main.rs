use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lomoe_core::denoiser::{AttentionHead, DEFAULT_HEAD_SEED};
use lomoe_core::inversion::{invert, l_kl};
use lomoe_core::io::metrics::{bg_psnr, compute_metrics};
use lomoe_core::io::report::{
    render_ablation, render_edit, render_timing, render_timings, write_report, EditReport, ReportFormat, TimingEntry,
};
use lomoe_core::io::{list_cases, load_case_full, load_latent, load_world, save_latent, LoadedCase};
use lomoe_core::pipeline::{
    bench_timing, run_ablation, run_edit, run_edit_random_start, run_iterative, AblationAxis, EditJob, JobConfig,
};
use lomoe_core::preserve::reconstruct;
use lomoe_core::toy::{ToySpec, WORLD_FILE};
use lomoe_core::{build_mask_set, Error, ToyWorld};

#[derive(Parser, Debug)]
#[command(name = "lomoe", version, about = "Localized multi-object editing over an analytic toy diffusion world")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Inference steps
    #[arg(long, global = true, default_value_t = 50)]
    steps: usize,
    /// Length of the noise schedule
    #[arg(long = "t-total", global = true, default_value_t = 1000)]
    t_total: usize,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Attention temperature
    #[arg(long, global = true, default_value_t = 1.25)]
    tau: f64,
    /// Bootstrapping iterations
    #[arg(long, global = true, default_value_t = 10)]
    tb: usize,
    #[arg(long = "lambda-xa", global = true, default_value_t = 1.0)]
    lambda_xa: f64,
    #[arg(long = "lambda-b", global = true, default_value_t = 1.75)]
    lambda_b: f64,
    /// Weight of the noise regularizer during inversion
    #[arg(long = "lambda-reg", global = true, default_value_t = 20.0)]
    lambda_reg: f64,
    /// Gradient steps of the preservation update
    #[arg(long, global = true, default_value_t = 1)]
    kg: usize,
    /// Step size of the preservation update
    #[arg(long = "eta-g", global = true, default_value_t = 0.1)]
    eta_g: f64,
    /// Classifier-free guidance scale
    #[arg(long, global = true, default_value_t = 1.0)]
    guidance: f64,
    /// World file; defaults to world/world.txt next to the case, then the built-in bench world
    #[arg(long, global = true)]
    world: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    report: Format,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Axis {
    Tau,
    Tb,
    Inversion,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Invert a case image and write x_inv
    Invert { case: PathBuf },
    /// Reconstruct a case image from its inversion
    Recon { case: PathBuf },
    /// Edit one case
    Edit {
        case: PathBuf,
        /// One pass per mask instead of a single composed pass
        #[arg(long)]
        iterative: bool,
        /// Start from seeded noise instead of the inversion
        #[arg(long = "random-start")]
        random_start: bool,
    },
    /// Run every case of a bench directory, or time single-pass vs iterative editing with --masks
    Bench {
        dir: Option<PathBuf>,
        /// Mask counts for the timing table
        #[arg(long, value_delimiter = ',')]
        masks: Option<Vec<usize>>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Sweep one parameter over a bench directory or a single case
    Ablate {
        input: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Score an edited latent against a case
    Metrics {
        case: PathBuf,
        #[arg(long)]
        edited: PathBuf,
        /// Reconstruction to compare the background against; defaults to the input image
        #[arg(long)]
        recon: Option<PathBuf>,
    },
}

impl Common {
    fn config(&self) -> JobConfig {
        let mut c = JobConfig::default().with_seed(self.seed);
        c.steps = self.steps;
        c.t_total = self.t_total;
        c.guidance.tau = self.tau;
        c.guidance.lambda_xa = self.lambda_xa;
        c.guidance.lambda_b = self.lambda_b;
        c.guidance.steps = self.kg;
        c.guidance.step_size = self.eta_g;
        c.bootstrap.t_b = self.tb;
        c.reg.lambda_reg = self.lambda_reg;
        c.guidance_scale = self.guidance;
        c
    }

    fn format(&self) -> ReportFormat {
        match self.report {
            Format::Json => ReportFormat::Json,
            Format::Csv => ReportFormat::Csv,
        }
    }

    fn report_name(&self, stem: &str) -> PathBuf {
        let ext = match self.report {
            Format::Json => "json",
            Format::Csv => "csv",
        };
        self.out.join(format!("{stem}.{ext}"))
    }

    /// The world for cases under `dir`.
    fn world_for(&self, dir: &Path) -> lomoe_core::Result<ToyWorld> {
        if let Some(w) = &self.world {
            return load_world(w);
        }
        let sibling = dir.join(WORLD_FILE);
        if sibling.is_file() {
            load_world(&sibling)
        } else {
            ToySpec::bench().build()
        }
    }
}

fn parent(p: &Path) -> &Path {
    p.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn case_paths(input: &Path) -> lomoe_core::Result<(PathBuf, Vec<PathBuf>)> {
    if input.is_dir() {
        Ok((input.to_path_buf(), list_cases(input)?))
    } else {
        Ok((parent(input).to_path_buf(), vec![input.to_path_buf()]))
    }
}

fn mkdir(dir: &Path) -> lomoe_core::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn run(cli: &Cli) -> lomoe_core::Result<()> {
    let c = &cli.common;
    let config = c.config();
    config.validate()?;
    match &cli.command {
        Command::Invert { case } => {
            let world = c.world_for(parent(case))?;
            let lc = load_case_full(case, &world)?;
            let sched = config.schedule()?;
            let trace = invert(&lc.image, &lc.source, config.steps, &config.reg, &world, &sched)?;
            mkdir(&c.out)?;
            save_latent(&c.out.join(format!("{}_xinv.lat", lc.case.id)), trace.x_inv())?;
            let eps = trace.eps_hats.last().expect("at least one step");
            let report = serde_json::json!({
                "id": lc.case.id,
                "steps": config.steps,
                "final_l_kl": l_kl(eps, config.reg.epsilon_stab),
                "config": config,
            });
            write_report(&c.out.join("invert.json"), format!("{report:#}\n").as_bytes())?;
            println!("{}: x_inv written", lc.case.id);
        }
        Command::Recon { case } => {
            let world = c.world_for(parent(case))?;
            let lc = load_case_full(case, &world)?;
            let sched = config.schedule()?;
            let head = AttentionHead::for_world(&world, config.t_total, DEFAULT_HEAD_SEED)?;
            let trace = invert(&lc.image, &lc.source, config.steps, &config.reg, &world, &sched)?;
            let cache = reconstruct(&trace, &world, &sched, &head, config.guidance.tau, config.guidance_scale, config.rectify)?;
            mkdir(&c.out)?;
            save_latent(&c.out.join(format!("{}_recon.lat", lc.case.id)), cache.x_prime_0())?;
            let full = lomoe_core::LatentGrid::filled(lc.image.height(), lc.image.width(), 1, 1.0);
            let psnr = bg_psnr(cache.x_prime_0(), &lc.image, &full)?;
            let report = serde_json::json!({
                "id": lc.case.id,
                "psnr_vs_input": if psnr.is_infinite() { serde_json::json!("inf") } else { serde_json::json!(psnr) },
                "max_abs_error": cache.x_prime_0().max_abs_diff(&lc.image)?,
                "config": config,
            });
            write_report(&c.out.join("recon.json"), format!("{report:#}\n").as_bytes())?;
            println!("{}: reconstruction written", lc.case.id);
        }
        Command::Edit {
            case,
            iterative,
            random_start,
        } => {
            if *iterative && *random_start {
                return Err(Error::InvalidArgument("--iterative and --random-start are exclusive".into()));
            }
            let (dir, paths) = case_paths(case)?;
            edit_cases(c, &config, &dir, &paths, *iterative, *random_start, "edit")?;
        }
        Command::Bench { dir, masks, reps } => match (dir, masks) {
            (_, Some(masks)) => {
                let rows = bench_timing(masks, *reps, &config)?;
                mkdir(&c.out)?;
                write_report(&c.report_name("timing"), &render_timing(&rows, c.format())?)?;
                for r in &rows {
                    println!(
                        "N={}: single {:.3}s iterative {:.3}s speedup {:.2}",
                        r.n_masks, r.single_pass, r.iterative, r.speedup
                    );
                }
            }
            (Some(dir), None) => {
                let paths = list_cases(dir)?;
                edit_cases(c, &config, dir, &paths, false, false, "bench")?;
            }
            (None, None) => {
                return Err(Error::InvalidArgument("bench needs a case directory or --masks".into()));
            }
        },
        Command::Ablate { input, axis, values } => {
            let (dir, paths) = case_paths(input)?;
            let world = c.world_for(&dir)?;
            let head = AttentionHead::for_world(&world, config.t_total, DEFAULT_HEAD_SEED)?;
            let jobs = paths
                .iter()
                .map(|p| Ok(EditJob::from_case(&load_case_full(p, &world)?, &config)))
                .collect::<lomoe_core::Result<Vec<_>>>()?;
            let axis = match axis {
                Axis::Tau => AblationAxis::Tau,
                Axis::Tb => AblationAxis::Tb,
                Axis::Inversion => AblationAxis::Inversion,
            };
            let report = run_ablation(&jobs, axis, values, &world, &head)?;
            mkdir(&c.out)?;
            write_report(&c.report_name("ablation"), &render_ablation(&report, c.format())?)?;
            println!("{} rows", report.rows.len());
        }
        Command::Metrics { case, edited, recon } => {
            let world = c.world_for(parent(case))?;
            let lc = load_case_full(case, &world)?;
            let y = load_latent(edited)?;
            let r = match recon {
                Some(p) => load_latent(p)?,
                None => lc.image.clone(),
            };
            let ms = build_mask_set(lc.image.height(), lc.image.width(), &lc.masks)?;
            let m = compute_metrics(&lc.image, &y, &r, &ms, &lc.source, &lc.targets, &world)?;
            let mut report = EditReport::new(&config, false);
            report.cases.push(lomoe_core::io::report::CaseRow {
                id: lc.case.id.clone(),
                n_masks: lc.masks.len(),
                start: Default::default(),
                metrics: m,
            });
            mkdir(&c.out)?;
            write_report(&c.report_name("metrics"), &render_edit(&report, c.format())?)?;
        }
    }
    Ok(())
}

fn edit_cases(
    c: &Common,
    config: &JobConfig,
    dir: &Path,
    paths: &[PathBuf],
    iterative: bool,
    random_start: bool,
    stem: &str,
) -> lomoe_core::Result<()> {
    let world = c.world_for(dir)?;
    let head = AttentionHead::for_world(&world, config.t_total, DEFAULT_HEAD_SEED)?;
    let cases: Vec<LoadedCase> = paths.iter().map(|p| load_case_full(p, &world)).collect::<lomoe_core::Result<_>>()?;
    mkdir(&c.out)?;
    let mut report = EditReport::new(config, iterative);
    let mut timings = Vec::with_capacity(cases.len());
    for lc in &cases {
        let job = EditJob::from_case(lc, config);
        let r = if iterative {
            run_iterative(&job, &world, &head)?
        } else if random_start {
            run_edit_random_start(&job, &world, &head)?
        } else {
            run_edit(&job, &world, &head)?
        };
        save_latent(&c.out.join(format!("{}_edited.lat", r.id)), &r.edited)?;
        save_latent(&c.out.join(format!("{}_recon.lat", r.id)), &r.reconstruction)?;
        report.push(&r, lc.masks.len());
        timings.push(TimingEntry {
            id: r.id.clone(),
            timings: r.timings.clone(),
        });
        let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        println!(
            "{}: target {} source {} bg_psnr {}",
            r.id,
            show(r.metrics.target_fidelity),
            show(r.metrics.source_fidelity),
            show(r.metrics.bg_psnr)
        );
    }
    write_report(&c.report_name(stem), &render_edit(&report, c.format())?)?;
    write_report(&c.out.join("timings.json"), &render_timings(&timings))?;
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Format { .. } | Error::Schema { .. } | Error::Io { .. } | Error::InvalidArgument(_) => 2,
        Error::NumericFailure(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
