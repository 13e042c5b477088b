//! Command-line surface: rendering, training, evaluation, gradient
//! checking, and depth fusion.
//!
//! Exit codes: 0 success, 1 validation error (bad arguments, malformed
//! files), 2 numeric failure (NaN losses, degenerate geometry, failed
//! gradient check).

mod gradcheck;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use solidsplat_core::depth::{render_view, RenderOptions};
use solidsplat_core::eval::{chamfer, cycle_reprojection_map, fuse_depths};
use solidsplat_core::io::{
    load_cameras, load_ply, read_depth_pfm, read_rgb_pfm, save_checkpoint, write_depth_pfm,
    write_depth_png16, write_point_cloud_ply, write_rgb_pfm, CheckpointMeta, IoError,
};
use solidsplat_core::optimize::{train, OptimizeError, TrainConfig, TrainView};

#[derive(Parser)]
#[command(name = "solidsplat", about = "Ray-based stochastic-solid Gaussian renderer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DepthMode {
    /// Median of the continuous transmittance (the default).
    Stochastic,
    /// Discrete step-function median.
    Step,
    /// Alpha-weighted expected depth.
    Expected,
}

#[derive(Subcommand)]
enum Command {
    /// Render depth and color for every camera in a rig.
    Render {
        scene: PathBuf,
        cameras: PathBuf,
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value = "stochastic")]
        depth_mode: DepthMode,
        /// Half-width of the median search interval.
        #[arg(long, default_value_t = solidsplat_core::depth::DEFAULT_BRACKET_R)]
        bracket_r: f64,
        /// 8-ary traversals of the search interval.
        #[arg(long, default_value_t = solidsplat_core::depth::DEFAULT_TRAVERSALS)]
        traversals: u32,
        /// Worker threads; 0 uses all cores.
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// Also write 16-bit PNG depth visualizations.
        #[arg(long)]
        png: bool,
    },
    /// Fit a scene to observed views.
    Optimize {
        /// Directory holding cameras.json and view_NNN.pfm color images.
        views_dir: PathBuf,
        /// Training configuration (JSON).
        config: PathBuf,
        /// Output checkpoint base path (writes .ply and .json).
        output: PathBuf,
        /// Initial scene.
        #[arg(long)]
        init: PathBuf,
    },
    /// Cycle-reprojection consistency between two posed depth maps.
    EvalConsistency {
        cameras: PathBuf,
        #[arg(long)]
        ref_index: usize,
        #[arg(long)]
        nbr_index: usize,
        /// Reference/neighbor depth maps; omit both to render them from
        /// --scene instead.
        #[arg(long)]
        ref_depth: Option<PathBuf>,
        #[arg(long)]
        nbr_depth: Option<PathBuf>,
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Write the full report (JSON) here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Chamfer distance between two point clouds.
    EvalChamfer { cloud: PathBuf, reference: PathBuf },
    /// Finite-difference check of the analytic depth gradients.
    Gradcheck {
        scene: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Back-project posed depth maps into a fused point cloud.
    Fuse {
        /// Directory holding cameras.json and depth_NNN.pfm.
        depth_dir: PathBuf,
        output: PathBuf,
        /// Voxel down-sampling size (world units).
        #[arg(long)]
        voxel: Option<f64>,
    },
}

enum CliError {
    Validation(String),
    Numeric(String),
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<OptimizeError> for CliError {
    fn from(e: OptimizeError) -> Self {
        match e {
            OptimizeError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successful exits; everything else is
            // a validation failure.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Render {
            scene,
            cameras,
            out_dir,
            depth_mode,
            bracket_r,
            traversals,
            workers,
            png,
        } => cmd_render(
            &scene, &cameras, &out_dir, depth_mode, bracket_r, traversals, workers, png,
        ),
        Command::Optimize {
            views_dir,
            config,
            output,
            init,
        } => cmd_optimize(&views_dir, &config, &output, &init),
        Command::EvalConsistency {
            cameras,
            ref_index,
            nbr_index,
            ref_depth,
            nbr_depth,
            scene,
            output,
        } => cmd_eval_consistency(
            &cameras, ref_index, nbr_index, ref_depth, nbr_depth, scene, output,
        ),
        Command::EvalChamfer { cloud, reference } => cmd_eval_chamfer(&cloud, &reference),
        Command::Gradcheck { scene, seed } => cmd_gradcheck(&scene, seed),
        Command::Fuse {
            depth_dir,
            output,
            voxel,
        } => cmd_fuse(&depth_dir, &output, voxel),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_render(
    scene_path: &Path,
    cameras_path: &Path,
    out_dir: &Path,
    depth_mode: DepthMode,
    bracket_r: f64,
    traversals: u32,
    workers: usize,
    png: bool,
) -> Result<(), CliError> {
    if bracket_r <= 0.0 || traversals == 0 {
        return Err(CliError::Validation(
            "--bracket-r must be positive and --traversals >= 1".into(),
        ));
    }
    let scene = load_ply(scene_path)?;
    let cameras = load_cameras(cameras_path)?;
    std::fs::create_dir_all(out_dir).map_err(IoError::from)?;
    let options = RenderOptions {
        bracket_r,
        traversals,
        workers,
        ..RenderOptions::default()
    };
    for (i, camera) in cameras.iter().enumerate() {
        let result = render_view(&scene, camera, &options);
        let depth = match depth_mode {
            DepthMode::Stochastic => &result.median_depth,
            DepthMode::Step => &result.step_median_depth,
            DepthMode::Expected => &result.expected_depth,
        };
        if depth.data.iter().any(|v| v.is_nan()) {
            return Err(CliError::Numeric(format!("NaN depth in view {i}")));
        }
        write_depth_pfm(depth, &result.valid_mask, &out_dir.join(format!("depth_{i:03}.pfm")))?;
        write_rgb_pfm(&result.color, &out_dir.join(format!("color_{i:03}.pfm")))?;
        if png {
            write_depth_png16(
                depth,
                &result.valid_mask,
                &out_dir.join(format!("depth_{i:03}.png")),
            )?;
        }
    }
    println!("rendered {} views to {}", cameras.len(), out_dir.display());
    Ok(())
}

fn cmd_optimize(
    views_dir: &Path,
    config_path: &Path,
    output: &Path,
    init: &Path,
) -> Result<(), CliError> {
    let cameras = load_cameras(&views_dir.join("cameras.json"))?;
    let mut views = Vec::with_capacity(cameras.len());
    for (i, camera) in cameras.into_iter().enumerate() {
        let image = read_rgb_pfm(&views_dir.join(format!("view_{i:03}.pfm")))?;
        if image.width != camera.width || image.height != camera.height {
            return Err(CliError::Validation(format!(
                "view {i}: image is {}x{} but camera expects {}x{}",
                image.width, image.height, camera.width, camera.height
            )));
        }
        views.push(TrainView { camera, image });
    }
    let config_text = std::fs::read_to_string(config_path).map_err(IoError::from)?;
    let config: TrainConfig = serde_json::from_str(&config_text)
        .map_err(|e| CliError::Validation(format!("config: {e}")))?;
    let scene = load_ply(init)?;
    match train(&scene, &views, &config) {
        Ok((final_scene, log)) => {
            let meta = CheckpointMeta {
                iteration: log.len(),
                config_hash: config.hash(),
                loss_history: log.iter().map(|r| r.total_loss).collect(),
            };
            save_checkpoint(output, &final_scene, &meta)?;
            if let Some(last) = log.last() {
                println!(
                    "finished {} iterations; final loss {:.6e}; mean cycle error {:.4e}",
                    log.len(),
                    last.total_loss,
                    last.mean_cycle_error
                );
            }
            Ok(())
        }
        Err(OptimizeError::NonFiniteLoss {
            iteration,
            checkpoint,
        }) => {
            let (last_scene, log) = *checkpoint;
            let meta = CheckpointMeta {
                iteration: log.len(),
                config_hash: config.hash(),
                loss_history: log.iter().map(|r| r.total_loss).collect(),
            };
            save_checkpoint(output, &last_scene, &meta)?;
            Err(CliError::Numeric(format!(
                "non-finite loss at iteration {iteration}; last good state saved to {}",
                output.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_eval_consistency(
    cameras_path: &Path,
    ref_index: usize,
    nbr_index: usize,
    ref_depth: Option<PathBuf>,
    nbr_depth: Option<PathBuf>,
    scene: Option<PathBuf>,
    output: Option<PathBuf>,
) -> Result<(), CliError> {
    let cameras = load_cameras(cameras_path)?;
    let get = |i: usize| {
        cameras.get(i).ok_or_else(|| {
            CliError::Validation(format!("camera index {i} out of range ({})", cameras.len()))
        })
    };
    let cam_r = get(ref_index)?;
    let cam_n = get(nbr_index)?;
    let ((depth_r, mask_r), (depth_n, mask_n)) = match (ref_depth, nbr_depth, scene) {
        (Some(a), Some(b), None) => (read_depth_pfm(&a)?, read_depth_pfm(&b)?),
        (None, None, Some(scene_path)) => {
            let scene = load_ply(&scene_path)?;
            let options = RenderOptions::default();
            let ra = render_view(&scene, cam_r, &options);
            let rb = render_view(&scene, cam_n, &options);
            (
                (ra.median_depth, ra.valid_mask),
                (rb.median_depth, rb.valid_mask),
            )
        }
        _ => {
            return Err(CliError::Validation(
                "provide either --ref-depth and --nbr-depth, or --scene".into(),
            ))
        }
    };
    let report = cycle_reprojection_map(&depth_r, &mask_r, cam_r, &depth_n, &mask_n, cam_n);
    let summary = serde_json::json!({
        "valid_fraction": report.valid_fraction,
        "mean_error": report.mean_error,
        "median_error": report.median_error,
    });
    println!("{summary}");
    if let Some(out) = output {
        std::fs::write(&out, serde_json::to_string_pretty(&summary).expect("summary serializes"))
            .map_err(IoError::from)?;
    }
    Ok(())
}

fn cmd_eval_chamfer(cloud_path: &Path, reference_path: &Path) -> Result<(), CliError> {
    let cloud = solidsplat_core::io::read_point_cloud_ply(cloud_path)?;
    let reference = solidsplat_core::io::read_point_cloud_ply(reference_path)?;
    let value =
        chamfer(&cloud, &reference).map_err(|e| CliError::Validation(e.to_string()))?;
    println!("{}", serde_json::json!({ "chamfer": value }));
    Ok(())
}

fn cmd_gradcheck(scene_path: &Path, seed: u64) -> Result<(), CliError> {
    let scene = load_ply(scene_path)?;
    let Some(max_rel) = gradcheck::run(&scene, seed) else {
        return Err(CliError::Numeric(
            "no comparable gradient samples found (scene invisible or degenerate)".into(),
        ));
    };
    println!("max relative error: {max_rel:.3e}");
    if max_rel < 1e-3 {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed: max relative error {max_rel:.3e} >= 1e-3"
        )))
    }
}

fn cmd_fuse(depth_dir: &Path, output: &Path, voxel: Option<f64>) -> Result<(), CliError> {
    let cameras = load_cameras(&depth_dir.join("cameras.json"))?;
    let mut maps = Vec::with_capacity(cameras.len());
    for (i, camera) in cameras.iter().enumerate() {
        let (depth, mask) = read_depth_pfm(&depth_dir.join(format!("depth_{i:03}.pfm")))?;
        if depth.width != camera.width || depth.height != camera.height {
            return Err(CliError::Validation(format!(
                "depth {i}: map is {}x{} but camera expects {}x{}",
                depth.width, depth.height, camera.width, camera.height
            )));
        }
        maps.push((depth, mask));
    }
    let views: Vec<_> = maps
        .iter()
        .zip(&cameras)
        .map(|((d, m), c)| (d, m, c))
        .collect();
    let points = fuse_depths(&views, voxel);
    write_point_cloud_ply(output, &points, true)?;
    println!("fused {} points to {}", points.len(), output.display());
    Ok(())
}
