use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;

use occ_core::fitter::{
    fit, initial_grid, scan, synthetic_targets, LossKind, LossTerm, OptimConfig, SyntheticSetup,
};
use occ_core::geometry::{GridSpec, Point3};
use occ_core::image::DepthMap;
use occ_core::io;
use occ_core::labeler::{generate_labels, LabelSet, PointCloud};
use occ_core::meshing::{default_iso, marching_cubes, ply_bytes, PlyFormat};
use occ_core::metrics::{
    classification_metrics, depth_maps_metrics, discrete_depth_metrics, threshold_sweep, ConfusionReport, ThresholdRange,
    WalkConfig, CSV_HEADER,
};
use occ_core::render::{render_depth_map, Jitter, RenderConfig};
use occ_core::selfcheck::{run_all, SelfcheckConfig};
use occ_core::volume::{ActivationMode, Interp, ScalarGrid};

use crate::error::{CliError, CliResult};
use crate::manifest::OutDir;
use crate::{png, CloudArgs, OutArgs, RenderArgs, SceneArgs, WalkArgs};

pub fn parse_point(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|c| c.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("expected x,y,z: {e}"))?;
    match v.as_slice() {
        [x, y, z] if v.iter().all(|c| c.is_finite()) => Ok([*x, *y, *z]),
        _ => Err("expected three finite numbers x,y,z".into()),
    }
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!("input file {} does not exist", path.display())))
    }
}

fn load_setup(scene: &SceneArgs) -> CliResult<SyntheticSetup> {
    if scene.scene == "default" {
        return Ok(SyntheticSetup::default_setup());
    }
    let path = Path::new(&scene.scene);
    require_file(path)?;
    Ok(io::read_scene(path)?)
}

fn load_grid(path: &Path, flip_sign: bool) -> CliResult<ScalarGrid> {
    require_file(path)?;
    let grid = io::read_grid(path)?;
    if flip_sign && grid.mode != ActivationMode::Sdf {
        return Err(CliError::usage("--flip-sign only applies to sdf grids"));
    }
    Ok(grid.with_sign_flip(flip_sign))
}

fn load_cloud(args: &CloudArgs) -> CliResult<PointCloud> {
    require_file(&args.cloud)?;
    let origin = match args.origin {
        Some(o) => o,
        None => load_setup(&args.scene)?.lidar.origin,
    };
    Ok(io::read_cloud(&args.cloud, Point3::new(origin[0], origin[1], origin[2]))?)
}

fn default_threshold(mode: ActivationMode) -> f64 {
    match mode {
        ActivationMode::Sdf => 0.0,
        _ => 0.5,
    }
}

fn walk_config(args: &WalkArgs) -> CliResult<WalkConfig> {
    if !(args.step > 0.0 && args.max_depth > args.step && args.max_depth.is_finite()) {
        return Err(CliError::usage("need 0 < --step < --max-depth"));
    }
    Ok(WalkConfig {
        step: args.step,
        max: args.max_depth,
    })
}

fn render_config(args: &RenderArgs, opacity_floor: f64) -> CliResult<RenderConfig> {
    let interp: Interp = args.interp.parse()?;
    if args.samples == 0 {
        return Err(CliError::usage("--samples must be positive"));
    }
    Ok(RenderConfig {
        samples: args.samples,
        near: args.near,
        far: args.far,
        interp,
        jitter: args.jitter_seed.map_or(Jitter::Off, Jitter::Stratified),
        opacity_floor,
    })
}

fn to_json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

pub fn labels_csv(labels: &LabelSet) -> String {
    let mut s = String::from("x,y,z,occupied\n");
    for (p, occ) in labels.labeled_points() {
        let _ = writeln!(s, "{},{},{},{}", p.x, p.y, p.z, occ as u8);
    }
    s
}

pub fn parse_labels_csv(text: &str, path: &Path, spec: &GridSpec, origin: Point3) -> CliResult<LabelSet> {
    let fail = |offset: usize, msg: &str| CliError::data(format!("{}: malformed labels at offset {offset}: {msg}", path.display()));
    let mut labels = LabelSet {
        occupied: Vec::new(),
        empty: Vec::new(),
        empty_source: Vec::new(),
        origin,
        samples_per_ray: 0,
        voxel_size: {
            let v = spec.voxel_size();
            [v.x, v.y, v.z]
        },
    };
    let mut offset = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let body = line.trim();
        if i == 0 {
            if body != "x,y,z,occupied" {
                return Err(fail(0, "expected header x,y,z,occupied"));
            }
        } else if !body.is_empty() {
            let f: Vec<&str> = body.split(',').collect();
            if f.len() != 4 {
                return Err(fail(offset, "expected four fields"));
            }
            let c: Vec<f64> = f[..3]
                .iter()
                .map(|v| v.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| fail(offset, "bad coordinate"))?;
            let p = Point3::new(c[0], c[1], c[2]);
            match f[3] {
                "1" => labels.occupied.push(p),
                "0" => {
                    labels.empty.push(p);
                    labels.empty_source.push(0);
                }
                _ => return Err(fail(offset, "occupied must be 0 or 1")),
            }
        }
        offset += line.len();
    }
    if labels.is_empty() {
        return Err(fail(offset, "no labeled points"));
    }
    Ok(labels)
}

pub fn gen_labels(
    recorded: &[String],
    scene: &SceneArgs,
    cloud: Option<&Path>,
    origin: Option<[f64; 3]>,
    samples_per_ray: usize,
    seed: u64,
    out: &OutArgs,
) -> CliResult<()> {
    let setup = load_setup(scene)?;
    let mut dir = OutDir::new(out.out.as_deref())?;
    let cloud = match cloud {
        Some(path) => {
            require_file(path)?;
            let o = origin.unwrap_or(setup.lidar.origin);
            io::read_cloud(path, Point3::new(o[0], o[1], o[2]))?
        }
        None => {
            let c = scan(&setup.scene, &setup.lidar, false);
            dir.write("cloud.xyz", &io::xyz_bytes(&c.points))?;
            c
        }
    };
    let labels = generate_labels(&cloud, &setup.scene.grid, samples_per_ray, seed)?;
    dir.write("labels.csv", labels_csv(&labels).as_bytes())?;
    println!("occupied {} empty {}", labels.occupied.len(), labels.empty.len());
    dir.finish(
        "gen-labels",
        recorded,
        json!({
            "scene": scene.scene,
            "grid": to_json(&setup.scene.grid),
            "origin": [cloud.origin.x, cloud.origin.y, cloud.origin.z],
            "points": cloud.len(),
            "samples_per_ray": samples_per_ray,
            "seed": seed,
        }),
    )
}

pub struct RenderDepthArgs {
    pub grid: PathBuf,
    pub scene: SceneArgs,
    pub rig: Option<PathBuf>,
    pub render: RenderArgs,
    pub opacity_floor: f64,
    pub format: String,
    pub truth: bool,
    pub png: bool,
    pub out: OutArgs,
}

pub fn render_depth(recorded: &[String], a: &RenderDepthArgs) -> CliResult<()> {
    let format = match a.format.as_str() {
        "pgm" => "pgm",
        "f32" => "f32",
        other => return Err(CliError::usage(format!("unknown depth format '{other}' (pgm or f32)"))),
    };
    if a.out.out.is_none() {
        return Err(CliError::usage("render-depth needs --out"));
    }
    let grid = load_grid(&a.grid, false)?;
    let setup = load_setup(&a.scene)?;
    let rig = match &a.rig {
        Some(p) => {
            require_file(p)?;
            io::read_rig(p)?
        }
        None => setup.rig.clone(),
    };
    let cfg = render_config(&a.render, a.opacity_floor)?;
    let bytes = |m: &DepthMap| match format {
        "pgm" => io::pgm_bytes(m),
        _ => io::depth_f32_bytes(m),
    };
    let mut dir = OutDir::new(a.out.out.as_deref())?;
    for (i, cam) in rig.cameras.iter().enumerate() {
        let map = render_depth_map(&grid, cam, &cfg)?;
        dir.write(&format!("depth_{i:02}.{format}"), &bytes(&map))?;
        if a.png {
            dir.write(&format!("depth_{i:02}.png"), &png::depth_png(&map)?)?;
        }
        if a.truth {
            let (truth, _) = occ_core::fitter::render_truth(&setup.scene, cam);
            dir.write(&format!("truth_{i:02}.{format}"), &bytes(&truth))?;
        }
        println!("{} {}: {} valid pixels", i, cam.name, map.valid_count());
    }
    dir.finish(
        "render-depth",
        recorded,
        json!({
            "grid": a.grid,
            "scene": a.scene.scene,
            "rig": to_json(&rig.to_json_value()),
            "render": to_json(&cfg),
            "format": format,
            "truth": a.truth,
            "png": a.png,
        }),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn eval_occ(
    recorded: &[String],
    grid_path: &Path,
    cloud_args: &CloudArgs,
    threshold: Option<f64>,
    walk: &WalkArgs,
    labels: Option<&Path>,
    flip_sign: bool,
    out: &OutArgs,
) -> CliResult<()> {
    let grid = load_grid(grid_path, flip_sign)?;
    let cloud = load_cloud(cloud_args)?;
    let walk = walk_config(walk)?;
    let threshold = threshold.unwrap_or_else(|| default_threshold(grid.mode));
    let report = discrete_depth_metrics(&grid, &cloud, threshold, walk)?;
    let mut csv = format!("threshold,{CSV_HEADER},skipped\n");
    let _ = writeln!(csv, "{threshold},{},{}", report.report.csv_row(), report.skipped);
    print!("{csv}");
    let mut dir = OutDir::new(out.out.as_deref())?;
    dir.write("eval_occ.csv", csv.as_bytes())?;
    if let Some(path) = labels {
        require_file(path)?;
        let text = std::fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let labels = parse_labels_csv(&text, path, &grid.spec, cloud.origin)?;
        let c = classification_metrics(&grid, &labels, threshold)?;
        let row = format!("threshold,{}\n{threshold},{}\n", ConfusionReport::CSV_HEADER, c.csv_row());
        print!("{row}");
        dir.write("classification.csv", row.as_bytes())?;
    }
    dir.finish(
        "eval-occ",
        recorded,
        json!({
            "grid": grid_path,
            "cloud": cloud_args.cloud,
            "origin": [cloud.origin.x, cloud.origin.y, cloud.origin.z],
            "threshold": threshold,
            "walk": to_json(&walk),
            "labels": labels,
            "flip_sign": flip_sign,
        }),
    )
}

pub fn eval_depth(recorded: &[String], pred: &[PathBuf], gt: &[PathBuf], cap: f64, out: &OutArgs) -> CliResult<()> {
    if pred.len() != gt.len() {
        return Err(CliError::usage(format!("{} --pred maps but {} --gt maps", pred.len(), gt.len())));
    }
    if !(cap > 0.0) {
        return Err(CliError::usage("--cap must be positive"));
    }
    let read = |p: &PathBuf| -> CliResult<DepthMap> {
        require_file(p)?;
        Ok(io::read_depth(p)?)
    };
    let preds = pred.iter().map(read).collect::<CliResult<Vec<_>>>()?;
    let gts = gt.iter().map(read).collect::<CliResult<Vec<_>>>()?;
    let pairs: Vec<(&DepthMap, &DepthMap)> = preds.iter().zip(&gts).collect();
    let report = depth_maps_metrics(&pairs, cap)?;
    let csv = format!("{CSV_HEADER}\n{}\n", report.csv_row());
    print!("{csv}");
    let mut dir = OutDir::new(out.out.as_deref())?;
    dir.write("eval_depth.csv", csv.as_bytes())?;
    dir.finish("eval-depth", recorded, json!({ "pred": pred, "gt": gt, "cap": cap }))
}

#[allow(clippy::too_many_arguments)]
pub fn sweep_threshold(
    recorded: &[String],
    grid_path: &Path,
    cloud_args: &CloudArgs,
    lo: Option<f64>,
    hi: Option<f64>,
    th_step: f64,
    walk: &WalkArgs,
    flip_sign: bool,
    out: &OutArgs,
) -> CliResult<()> {
    let grid = load_grid(grid_path, flip_sign)?;
    let cloud = load_cloud(cloud_args)?;
    let walk = walk_config(walk)?;
    let d = ThresholdRange::for_mode(grid.mode);
    let range = ThresholdRange::new(lo.unwrap_or(d.lo), hi.unwrap_or(d.hi), th_step)?;
    let sweep = threshold_sweep(&grid, &cloud, range, walk)?;
    let csv = sweep.csv();
    print!("{csv}");
    let best = sweep.best();
    eprintln!("best threshold {} abs_rel {}", best.threshold, best.report.report.abs_rel);
    let mut dir = OutDir::new(out.out.as_deref())?;
    dir.write("sweep.csv", csv.as_bytes())?;
    dir.finish(
        "sweep-threshold",
        recorded,
        json!({
            "grid": grid_path,
            "cloud": cloud_args.cloud,
            "origin": [cloud.origin.x, cloud.origin.y, cloud.origin.z],
            "range": to_json(&range),
            "walk": to_json(&walk),
            "flip_sign": flip_sign,
            "best_threshold": best.threshold,
        }),
    )
}

pub struct FitArgs {
    pub scene: SceneArgs,
    pub loss: String,
    pub mode: Option<String>,
    pub iters: usize,
    pub seed: u64,
    pub lr: f64,
    pub ray_batch: usize,
    pub label_batch: usize,
    pub samples: usize,
    pub threshold: Option<f64>,
    pub out: OutArgs,
}

pub fn parse_losses(spec: &str) -> CliResult<Vec<LossTerm>> {
    let mut terms = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, weight) = match part.split_once(':') {
            Some((n, w)) => (
                n,
                w.parse::<f64>()
                    .ok()
                    .filter(|w| w.is_finite() && *w > 0.0)
                    .ok_or_else(|| CliError::usage(format!("bad loss weight in '{part}'")))?,
            ),
            None => (part, 1.0),
        };
        terms.push(LossTerm {
            kind: name.parse::<LossKind>()?,
            weight,
        });
    }
    if terms.is_empty() {
        return Err(CliError::usage("--loss needs at least one loss"));
    }
    Ok(terms)
}

/// Fitted grid as stored on disk, so later evaluations of the file agree
/// with the ones reported here.
fn stored(grid: &ScalarGrid) -> ScalarGrid {
    io::parse_grid(&io::grid_bytes(grid), Path::new("grid.occ")).expect("grid bytes round-trip")
}

pub fn fit_synthetic(recorded: &[String], a: &FitArgs) -> CliResult<()> {
    if a.out.out.is_none() {
        return Err(CliError::usage("fit-synthetic needs --out"));
    }
    let setup = load_setup(&a.scene)?;
    let losses = parse_losses(&a.loss)?;
    let mode = match &a.mode {
        Some(m) => m.parse::<ActivationMode>()?,
        None => losses[0].kind.default_mode(),
    };
    let mut cfg = OptimConfig::single(losses[0].kind, a.iters);
    cfg.losses = losses;
    cfg.lr = a.lr;
    cfg.ray_batch = a.ray_batch;
    cfg.label_batch = a.label_batch;
    cfg.render.samples = a.samples;
    cfg.validate()?;

    let (views, targets) = synthetic_targets(&setup, &cfg.losses, a.seed)?;
    let init = initial_grid(setup.scene.grid, mode)?;
    let result = fit(&init, &targets, &cfg, a.seed)?;
    let grid = stored(&result.grid);
    eprintln!(
        "fit: {} iterations in {:.1} s, final loss {}",
        a.iters,
        result.wall_ms / 1e3,
        result.curve.last().map_or(f64::NAN, |p| p.loss)
    );

    let eval_render = RenderConfig {
        jitter: Jitter::Off,
        ..cfg.render
    };
    let rendered = setup
        .rig
        .cameras
        .iter()
        .map(|c| render_depth_map(&grid, c, &eval_render))
        .collect::<Result<Vec<_>, _>>()?;
    let pairs: Vec<(&DepthMap, &DepthMap)> = rendered.iter().zip(&views.depth).collect();
    let rendered_report = depth_maps_metrics(&pairs, occ_core::metrics::DEPTH_MAX)?;
    let heldout = scan(&setup.scene, &setup.lidar, true);
    let threshold = a.threshold.unwrap_or_else(|| default_threshold(mode));
    let discrete = discrete_depth_metrics(&grid, &heldout, threshold, WalkConfig::default())?;

    let mut dir = OutDir::new(a.out.out.as_deref())?;
    dir.write("grid.occ", &io::grid_bytes(&grid))?;
    let mut curve = String::from("iter,loss\n");
    let mut timing = String::from("iter,wall_ms\n");
    for p in &result.curve {
        let _ = writeln!(curve, "{},{}", p.iter, p.loss);
        let _ = writeln!(timing, "{},{:.3}", p.iter, p.wall_ms);
    }
    dir.write("curve.csv", curve.as_bytes())?;
    dir.write_timing("timing.csv", timing.as_bytes())?;
    dir.write("scene.json", io::scene_json(&setup).as_bytes())?;
    dir.write("train_cloud.xyz", &io::xyz_bytes(&views.cloud.points))?;
    dir.write("heldout_cloud.xyz", &io::xyz_bytes(&heldout.points))?;
    for (i, d) in views.depth.iter().enumerate() {
        dir.write(&format!("truth_{i:02}.f32"), &io::depth_f32_bytes(d))?;
    }
    let mut eval = format!("eval,threshold,{CSV_HEADER}\n");
    let _ = writeln!(eval, "rendered,,{}", rendered_report.csv_row());
    let _ = writeln!(eval, "discrete,{threshold},{}", discrete.report.csv_row());
    print!("{eval}");
    dir.write("fit_eval.csv", eval.as_bytes())?;
    dir.finish(
        "fit-synthetic",
        recorded,
        json!({
            "scene": a.scene.scene,
            "mode": mode.name(),
            "optim": to_json(&cfg),
            "seed": a.seed,
            "threshold": threshold,
            "rising_windows": result.rising_windows,
        }),
    )
}

pub fn extract_mesh(
    recorded: &[String],
    grid_path: &Path,
    iso: Option<f64>,
    flip_sign: bool,
    binary: bool,
    out: &OutArgs,
) -> CliResult<()> {
    if out.out.is_none() {
        return Err(CliError::usage("extract-mesh needs --out"));
    }
    let grid = load_grid(grid_path, flip_sign)?;
    let iso = iso.unwrap_or_else(|| default_iso(grid.mode));
    let mesh = marching_cubes(&grid, iso)?;
    let format = if binary {
        PlyFormat::BinaryLittleEndian
    } else {
        PlyFormat::Ascii
    };
    let mut dir = OutDir::new(out.out.as_deref())?;
    dir.write("mesh.ply", &ply_bytes(&mesh, format))?;
    println!(
        "vertices {} triangles {} watertight {}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        mesh.is_watertight()
    );
    dir.finish(
        "extract-mesh",
        recorded,
        json!({ "grid": grid_path, "iso": iso, "flip_sign": flip_sign, "binary": binary }),
    )
}

pub fn selfcheck(
    recorded: &[String],
    instances: usize,
    rays: usize,
    render_instances: usize,
    seed: u64,
    out: &OutArgs,
) -> CliResult<()> {
    if instances == 0 || rays == 0 || render_instances == 0 {
        return Err(CliError::usage("suite sizes must be positive"));
    }
    let cfg = SelfcheckConfig {
        instances,
        rays,
        render_instances,
        seed,
    };
    let reports = run_all(&cfg);
    let mut csv = String::from("suite,passed,total,worst\n");
    for r in &reports {
        println!("{}", r.line());
        let _ = writeln!(csv, "{},{},{},{:e}", r.name, r.passed, r.total, r.worst);
    }
    let failed = reports.iter().filter(|r| !r.ok()).count();
    let mut dir = OutDir::new(out.out.as_deref())?;
    dir.write("selfcheck.csv", csv.as_bytes())?;
    dir.finish(
        "selfcheck",
        recorded,
        json!({ "instances": instances, "rays": rays, "render_instances": render_instances, "seed": seed }),
    )?;
    if failed > 0 {
        return Err(CliError::data(format!("{failed} of {} suites failed", reports.len())));
    }
    println!("all {} suites passed", reports.len());
    Ok(())
}
