use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use headgrow::eval::LightingMode;
use headgrow::synth::{canonical_poses, HeadSceneOptions};
use headgrow::{Error, Result};
use headgrow_cli::commands::{self, EvalTarget};
use headgrow_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "headgrow", version, about = "Head mesh reconstruction from pose-clustered photo collections")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "HEADGROW_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic Lambertian dataset with ground truth.
    Synth(SynthArgs),
    /// Reconstruct a head mesh from a dataset manifest.
    Reconstruct(ReconstructArgs),
    /// Score a reconstruction, or run the photo-count ablation.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for the dataset.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Head mesh (OBJ or PLY, y up, facing +z); the procedural head when absent.
    #[arg(long)]
    mesh: Option<PathBuf>,
    #[arg(long)]
    lights: Option<usize>,
    /// Number of canonical views, nearest the frontal first.
    #[arg(long)]
    poses: Option<usize>,
    /// Explicit view azimuths in degrees.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "poses")]
    azimuths: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Square image side in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Uneven per-view photo counts (most photos frontal).
    #[arg(long)]
    uneven: bool,
}

#[derive(Args)]
struct Thresholds {
    /// |n_z| below which a pixel gets a tangential constraint.
    #[arg(long, allow_negative_numbers = true)]
    nz_degenerate: Option<f64>,
    /// Blend ramp width in pixels.
    #[arg(long, allow_negative_numbers = true)]
    blend_band: Option<f64>,
    /// Residual gate multiple of the median residual.
    #[arg(long, allow_negative_numbers = true)]
    gate_multiplier: Option<f64>,
    /// Require a third of the photos to survive the gate.
    #[arg(long, allow_negative_numbers = true)]
    n_over_3: Option<bool>,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Dataset manifest.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Clusters to reconstruct (the frontal one is always included).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    clusters: Option<Vec<i32>>,
    #[command(flatten)]
    thresholds: Thresholds,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset manifest.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Report directory (default: the run directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output directory of a reconstruct run.
    #[arg(long, conflicts_with = "mesh")]
    run: Option<PathBuf>,
    /// A mesh in the dataset's world frame, scored at the nominal poses.
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// Constant albedo for --mesh (default: the dataset's ground truth).
    #[arg(long, requires = "mesh")]
    albedo: Option<f64>,
    /// Use each photo's recorded light instead of refitting it.
    #[arg(long)]
    gt_lighting: bool,
    /// Run the photo-count ablation.
    #[arg(long)]
    ablate: bool,
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    thresholds: Thresholds,
}

impl Thresholds {
    fn apply(&self, c: &mut RunConfig) {
        let p = &mut c.pipeline;
        if let Some(v) = self.nz_degenerate {
            p.integration.nz_degenerate = v;
        }
        if let Some(v) = self.blend_band {
            p.blend_band = v;
        }
        if let Some(v) = self.gate_multiplier {
            p.gate.multiplier = v;
        }
        if let Some(v) = self.n_over_3 {
            p.gate.n_over_3 = v;
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidConfig("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Synth(a) => {
            if a.uneven {
                let uneven = HeadSceneOptions::uneven();
                config.synth.lights = uneven.lights;
                config.synth.lights_per_pose = uneven.lights_per_pose;
            }
            set(&mut config.output, a.out.map(Some));
            set(&mut config.seed, a.seed);
            set(&mut config.synth.lights, a.lights);
            set(&mut config.synth.poses, a.poses.map(canonical_poses));
            set(&mut config.synth.poses, a.azimuths);
            set(&mut config.synth.image_size, a.size.map(|s| (s, s)));
            config.synth.seed = config.seed;
            let manifest = commands::synth(&config, a.mesh.as_deref())?;
            println!("{}", manifest.display());
        }
        Command::Reconstruct(a) => {
            set(&mut config.dataset, a.dataset.map(Some));
            set(&mut config.output, a.out.map(Some));
            set(&mut config.clusters, a.clusters.map(Some));
            a.thresholds.apply(&mut config);
            let state = commands::reconstruct(&config)?;
            println!(
                "reconstructed clusters {:?}: {} vertices, {} faces",
                state.completed,
                state.mesh.vertices.len(),
                state.mesh.faces.len()
            );
        }
        Command::Eval(a) => {
            set(&mut config.dataset, a.dataset.map(Some));
            set(&mut config.output, a.out.map(Some));
            set(&mut config.fractions, a.fractions);
            set(&mut config.seed, a.seed);
            a.thresholds.apply(&mut config);
            let mode = if a.gt_lighting {
                LightingMode::GroundTruth
            } else {
                LightingMode::Fitted
            };
            let target = match (&a.run, &a.mesh) {
                (Some(dir), _) => Some(EvalTarget::Run(dir)),
                (None, Some(path)) => Some(EvalTarget::Mesh { path, albedo: a.albedo }),
                (None, None) => None,
            };
            if target.is_none() && !a.ablate {
                return Err(Error::InvalidConfig("nothing to evaluate: give --run, --mesh or --ablate".into()));
            }
            if let Some(t) = &target {
                let r = commands::eval(&config, t, mode)?;
                println!("reprojection {:.3} +- {:.3} over {} photos", r.reprojection_mean, r.reprojection_std, r.per_photo.len());
            }
            if a.ablate {
                for row in commands::ablate(&config)? {
                    match (&row.failure, row.reprojection_mean) {
                        (Some(f), _) => println!("fraction {}: failed ({f})", row.fraction),
                        (None, Some(m)) => println!("fraction {}: reprojection {m:.3}", row.fraction),
                        _ => {}
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.name());
            ExitCode::FAILURE
        }
    }
}
