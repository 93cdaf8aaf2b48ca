mod commands;
mod error;
mod manifest;
mod png;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::{CliError, EXIT_USAGE};

const FORMATS: &str = "\
FILE FORMATS
  Grid (.occ), little-endian:
    b\"OCCGRID1\" | u32 nx | u32 ny | u32 nz | u8 mode (0 probability, 1 density, 2 sdf)
    | f32 beta | f32 min[3] | f32 max[3] | f32 values[nx*ny*nz], x fastest then y then z
  Depth map (.pgm): binary PGM \"P5\\n<w> <h>\\n65535\\n\" then big-endian u16 per pixel,
    row-major, depth in millimeters rounded to nearest, 0 = invalid, saturating at 65535
  Depth map (any other extension, e.g. .f32): little-endian u32 width | u32 height
    | f32 depth[w*h] row-major in meters, 0.0 = invalid
  Point cloud (.xyz or any text file): one \"x y z\" per line, '#' starts a comment
  Point cloud (PCBIN1, written for .bin/.pcbin): b\"PCBIN1\" | u32 count | f32 xyz[count][3]
    little-endian; readers detect it by the magic
  Labels (.csv): header \"x,y,z,occupied\", one labeled point per row, occupied is 0 or 1
  Mesh (.ply): PLY 1.0 ascii (default) or binary_little_endian (--binary);
    element vertex with float x, y, z; element face with list uchar int vertex_indices;
    triangles wound counter-clockwise seen from outside
  Rig (.json): {\"cameras\": [{\"name\", \"fx\", \"fy\", \"cx\", \"cy\", \"width\", \"height\",
    \"cam_to_world\": [16 numbers, row-major 4x4]}]}; camera looks along +z, x right, y down
  Scene (.json): {\"grid\": {\"min\": [3], \"max\": [3], \"dims\": [3]},
    \"primitives\": [{\"type\": \"ground\", \"height\": h} | {\"type\": \"box\", \"min\": [3], \"max\": [3]}],
    \"rig\": \"rig.json\" (relative to the scene file) or an inline rig object,
    \"lidar\": {\"origin\": [3], \"rings\", \"azimuth_steps\", \"elevation_min_deg\", \"elevation_max_deg\"}}
    `--scene default` selects the built-in 64x8x64 street scene.
  Metric CSV: header \"abs_rel,sq_rel,rmse,rmse_log,a1,a2,a3,n\" (a1..a3: delta < 1.25^k), values
    printed with shortest round-trip formatting
  manifest.json in --out: command, arguments (minus --out), resolved config, and every artifact
    with size and SHA-256; timing artifacts are marked non-deterministic and listed by name only

EXIT CODES
  0 success, 1 usage error (bad flags, missing input files), 2 data error (malformed or
  inconsistent input, failed self-check)

ENVIRONMENT
  THREADS  maximum worker threads (default: all cores)";

#[derive(Parser, Debug)]
#[command(name = "occ", version, about = "Volume-rendered occupancy grids: labels, rendering, evaluation, fitting and meshing")]
#[command(after_long_help = FORMATS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct OutArgs {
    /// Directory for artifacts and manifest.json
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct SceneArgs {
    /// Scene file, or `default` for the built-in scene
    #[arg(long, default_value = "default")]
    pub scene: String,
}

#[derive(Args, Debug, Clone)]
pub struct CloudArgs {
    /// Point cloud (XYZ text or PCBIN1)
    #[arg(long)]
    pub cloud: PathBuf,
    /// Sensor origin as x,y,z; defaults to the scene's lidar origin
    #[arg(long, value_parser = commands::parse_point)]
    pub origin: Option<[f64; 3]>,
    #[command(flatten)]
    pub scene: SceneArgs,
}

#[derive(Args, Debug, Clone)]
pub struct WalkArgs {
    /// Spacing of evaluation points along each lidar ray (m)
    #[arg(long, default_value_t = occ_core::metrics::DEPTH_STEP)]
    pub step: f64,
    /// Farthest evaluated distance (m)
    #[arg(long, default_value_t = occ_core::metrics::DEPTH_MAX)]
    pub max_depth: f64,
}

#[derive(Args, Debug, Clone)]
pub struct RenderArgs {
    /// Samples per ray
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.4)]
    pub near: f64,
    /// Far bound; defaults to the grid diagonal
    #[arg(long)]
    pub far: Option<f64>,
    /// trilinear or nearest
    #[arg(long, default_value = "trilinear")]
    pub interp: String,
    /// Stratified jitter seed; midpoints when absent
    #[arg(long)]
    pub jitter_seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Occupied/empty key points from a lidar cloud
    GenLabels {
        #[command(flatten)]
        scene: SceneArgs,
        /// Lidar cloud; the scene's simulated scan when absent
        #[arg(long)]
        cloud: Option<PathBuf>,
        #[arg(long, value_parser = commands::parse_point)]
        origin: Option<[f64; 3]>,
        /// Empty samples drawn per lidar ray
        #[arg(long, default_value_t = occ_core::labeler::SAMPLES_PER_RAY)]
        samples_per_ray: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Volume-rendered depth maps of a grid for every rig camera
    RenderDepth {
        #[arg(long)]
        grid: PathBuf,
        #[command(flatten)]
        scene: SceneArgs,
        /// Rig file; overrides the scene's rig
        #[arg(long)]
        rig: Option<PathBuf>,
        #[command(flatten)]
        render: RenderArgs,
        /// Pixels with total opacity below this are invalid
        #[arg(long, default_value_t = 1e-4)]
        opacity_floor: f64,
        /// pgm or f32
        #[arg(long, default_value = "pgm")]
        format: String,
        /// Also write ray-cast ground-truth depth of the scene
        #[arg(long)]
        truth: bool,
        /// Also write 8-bit colormapped PNG previews (not metric data)
        #[arg(long)]
        png: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Discrete depth metrics of a grid against a lidar cloud
    EvalOcc {
        #[arg(long)]
        grid: PathBuf,
        #[command(flatten)]
        cloud: CloudArgs,
        /// Occupancy threshold; 0.5 (probability, density) or 0 (sdf) by default
        #[arg(long)]
        threshold: Option<f64>,
        #[command(flatten)]
        walk: WalkArgs,
        /// Labels CSV for classification metrics
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Negative SDF means occupied
        #[arg(long)]
        flip_sign: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Depth-map metrics between predicted and ground-truth maps (pooled)
    EvalDepth {
        /// Predicted maps, paired in order with --gt
        #[arg(long, required = true, num_args = 1..)]
        pred: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        gt: Vec<PathBuf>,
        /// Ground truth farther than this is ignored (m)
        #[arg(long, default_value_t = 80.0)]
        cap: f64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Discrete depth metrics over a range of thresholds
    SweepThreshold {
        #[arg(long)]
        grid: PathBuf,
        #[command(flatten)]
        cloud: CloudArgs,
        /// Range start; 0 (probability, density) or -0.5 (sdf) by default
        #[arg(long)]
        lo: Option<f64>,
        #[arg(long)]
        hi: Option<f64>,
        #[arg(long, default_value_t = 0.05)]
        th_step: f64,
        #[command(flatten)]
        walk: WalkArgs,
        #[arg(long)]
        flip_sign: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Fit a grid to a synthetic scene by gradient descent
    FitSynthetic {
        #[command(flatten)]
        scene: SceneArgs,
        /// Comma-separated losses with optional weights: silog, bce, l1, photometric (e.g. silog:1,photometric:0.1)
        #[arg(long, default_value = "silog")]
        loss: String,
        /// probability, density or sdf; chosen from the first loss when absent
        #[arg(long)]
        mode: Option<String>,
        #[arg(long, default_value_t = 2000)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 1024)]
        ray_batch: usize,
        #[arg(long, default_value_t = 4096)]
        label_batch: usize,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        /// Threshold for the held-out discrete evaluation
        #[arg(long)]
        threshold: Option<f64>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Marching-cubes mesh of a grid's level set
    ExtractMesh {
        #[arg(long)]
        grid: PathBuf,
        /// Iso level on the activated field; 0.5 (probability, density) or 0 (sdf) by default
        #[arg(long)]
        iso: Option<f64>,
        #[arg(long)]
        flip_sign: bool,
        /// Binary little-endian PLY instead of ASCII
        #[arg(long)]
        binary: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Gradient and oracle suites
    Selfcheck {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 10_000)]
        rays: usize,
        #[arg(long, default_value_t = 100)]
        render_instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Re-run the command recorded in a manifest into a new directory
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::usage(format!("THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(format!("cannot configure {n} threads: {e}")))
}

/// Parses and runs `args` (without the program name).
fn dispatch(args: &[String]) -> Result<(), CliError> {
    let cli = match Cli::try_parse_from(std::iter::once("occ".to_string()).chain(args.iter().cloned())) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = std::io::Write::write_all(&mut std::io::stdout(), e.render().to_string().as_bytes());
            return Ok(());
        }
        Err(e) => {
            let msg = e.render().to_string();
            return Err(CliError::usage(msg.trim_start_matches("error: ").trim_end()));
        }
    };
    let recorded = manifest::strip_out(args);
    match cli.command {
        Command::GenLabels {
            scene,
            cloud,
            origin,
            samples_per_ray,
            seed,
            out,
        } => commands::gen_labels(&recorded, &scene, cloud.as_deref(), origin, samples_per_ray, seed, &out),
        Command::RenderDepth {
            grid,
            scene,
            rig,
            render,
            opacity_floor,
            format,
            truth,
            png,
            out,
        } => commands::render_depth(&recorded, &commands::RenderDepthArgs {
            grid,
            scene,
            rig,
            render,
            opacity_floor,
            format,
            truth,
            png,
            out,
        }),
        Command::EvalOcc {
            grid,
            cloud,
            threshold,
            walk,
            labels,
            flip_sign,
            out,
        } => commands::eval_occ(&recorded, &grid, &cloud, threshold, &walk, labels.as_deref(), flip_sign, &out),
        Command::EvalDepth { pred, gt, cap, out } => commands::eval_depth(&recorded, &pred, &gt, cap, &out),
        Command::SweepThreshold {
            grid,
            cloud,
            lo,
            hi,
            th_step,
            walk,
            flip_sign,
            out,
        } => commands::sweep_threshold(&recorded, &grid, &cloud, lo, hi, th_step, &walk, flip_sign, &out),
        Command::FitSynthetic {
            scene,
            loss,
            mode,
            iters,
            seed,
            lr,
            ray_batch,
            label_batch,
            samples,
            threshold,
            out,
        } => commands::fit_synthetic(&recorded, &commands::FitArgs {
            scene,
            loss,
            mode,
            iters,
            seed,
            lr,
            ray_batch,
            label_batch,
            samples,
            threshold,
            out,
        }),
        Command::ExtractMesh {
            grid,
            iso,
            flip_sign,
            binary,
            out,
        } => commands::extract_mesh(&recorded, &grid, iso, flip_sign, binary, &out),
        Command::Selfcheck {
            instances,
            rays,
            render_instances,
            seed,
            out,
        } => commands::selfcheck(&recorded, instances, rays, render_instances, seed, &out),
        Command::Replay { manifest, out } => {
            let m = manifest::Manifest::read(&manifest)?;
            if m.command == "replay" {
                return Err(CliError::data("a replay manifest cannot be replayed"));
            }
            let mut args = m.args.clone();
            if let Some(dir) = &out.out {
                args.push("--out".into());
                args.push(dir.display().to_string());
            }
            dispatch(&args)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::new().filter_level(log::LevelFilter::Warn).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let result = init_threads().and_then(|_| dispatch(&args));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(EXIT_USAGE as u8))
        }
    }
}
