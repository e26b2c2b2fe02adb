//! Batch command-line surface for the reconstruction pipeline.
//!
//! Exit codes: 2 for flag/config errors, 3 for I/O and format errors,
//! 4 for a numeric abort during training (diagnostics are dumped first).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use sdfrec_core::config::{parse_mode, RunConfig};
use sdfrec_core::field::SdfFieldModel;
use sdfrec_core::formats::{load_dataset, read_obj, write_obj};
use sdfrec_core::mesh::{chamfer, marching_cubes, normal_mae_degrees, DEFAULT_BOUNDS};
use sdfrec_core::scene::{generate_dataset, AnalyticShape, DepthMode};
use sdfrec_core::train::{render_normal_map, NormalMode, Trainer};
use sdfrec_core::Error as CoreError;

#[derive(Parser)]
#[command(
    name = "sdfrec",
    about = "Neural signed-distance surface reconstruction from posed RGB views",
    version
)]
struct Cli {
    /// Cap on worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset (images, depth, normals, masks, cameras).
    Generate {
        /// Shape preset: sphere | torus | box | blend.
        #[arg(long)]
        shape: String,
        /// Number of views on the camera ring (>= 2).
        #[arg(long, default_value_t = 8)]
        views: usize,
        /// Square image resolution in pixels.
        #[arg(long, default_value_t = 64)]
        res: usize,
        /// Depth channel mode: metric | relative | relative-noisy.
        #[arg(long, default_value = "metric")]
        depth_mode: String,
        /// Noise std-dev as a fraction of the depth range (noisy mode).
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Also extract the analytic ground-truth mesh at this grid
        /// resolution (0 disables).
        #[arg(long, default_value_t = 160)]
        gt_mesh_res: usize,
    },
    /// Train the field on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON run configuration; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Normal supervision mode override: off | accumulated | localized.
        #[arg(long)]
        mode: Option<String>,
        /// Output directory for logs and checkpoints.
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract a mesh from a trained checkpoint via marching cubes.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Grid resolution (cells per axis).
        #[arg(long, default_value_t = 128)]
        res: usize,
        /// Output OBJ path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a predicted mesh against a ground-truth mesh.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Metrics JSON output path.
        #[arg(long)]
        out: PathBuf,
        /// Surface samples per mesh for the Chamfer metric.
        #[arg(long, default_value_t = sdfrec_core::mesh::CHAMFER_SAMPLES)]
        samples: usize,
    },
    /// Train all three normal-supervision arms with a shared seed and
    /// report Chamfer and rendered-normal error per arm.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (per-arm subdirectories plus ablate.json).
        #[arg(long)]
        out: PathBuf,
    },
}

fn config_help() -> String {
    let mut s = String::from("Run configuration keys and defaults (JSON, section.key):\n");
    for (k, v) in RunConfig::document_defaults() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s
}

fn main() -> ExitCode {
    let help: &'static str = Box::leak(config_help().into_boxed_str());
    let cmd = Cli::command().after_long_help(help);
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}

fn classify(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::NumericAbort { .. }) => 4,
        Some(CoreError::Io { .. }) | Some(CoreError::Format { .. }) | Some(CoreError::Json(_)) => 3,
        Some(_) => 2,
        None => {
            if err.downcast_ref::<std::io::Error>().is_some() {
                3
            } else {
                2
            }
        }
    }
}

fn load_config(path: Option<&PathBuf>) -> anyhow::Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| anyhow::Error::from(CoreError::io(p.clone(), e)))?;
            Ok(RunConfig::from_json(&text)?)
        }
    }
}

fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::Generate {
            shape,
            views,
            res,
            depth_mode,
            noise,
            seed,
            out,
            gt_mesh_res,
        } => {
            let mode: DepthMode = depth_mode
                .parse()
                .map_err(|e: String| CoreError::Config(e))?;
            let ds = generate_dataset(&shape, views, res, mode, noise, seed, &out)?;
            if gt_mesh_res >= 8 {
                let analytic = AnalyticShape::by_name(&shape)
                    .ok_or_else(|| CoreError::Config(format!("unknown shape '{shape}'")))?;
                let mesh = marching_cubes(&analytic, gt_mesh_res, DEFAULT_BOUNDS, 0.0);
                write_obj(&out.join("mesh_gt.obj"), &mesh)?;
            }
            println!(
                "generated {} views of '{}' at {}x{} ({:?}, seed {}) in {}",
                ds.views.len(),
                shape,
                res,
                res,
                ds.meta.depth_mode,
                seed,
                out.display()
            );
            Ok(())
        }
        Cmd::Train {
            data,
            config,
            mode,
            out,
        } => {
            let mut run_cfg = load_config(config.as_ref())?;
            if let Some(m) = mode {
                run_cfg.train.mode = parse_mode(&m)?;
            }
            let dataset = load_dataset(&data)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| CoreError::io(out.clone(), e))?;
            std::fs::write(
                out.join("resolved_config.json"),
                serde_json::to_string_pretty(&run_cfg)?,
            )
            .map_err(|e| CoreError::io(out.join("resolved_config.json"), e))?;
            let mut trainer = Trainer::new(dataset, Some(&data), &out, run_cfg)?;
            let total = trainer.total_steps();
            let t0 = std::time::Instant::now();
            let last = trainer.run_to_completion()?;
            println!(
                "trained {total} steps in {:.1}s: color {:.4} eik {:.4} dnc {:.4} s {:.1}; log {}",
                t0.elapsed().as_secs_f64(),
                last.loss_color,
                last.loss_eik,
                last.loss_dnc,
                last.s,
                out.join("train_log.jsonl").display()
            );
            Ok(())
        }
        Cmd::Extract {
            checkpoint,
            res,
            out,
        } => {
            let (model, step) = SdfFieldModel::load_checkpoint(&checkpoint)?;
            let mesh = marching_cubes(&model, res, DEFAULT_BOUNDS, 0.0);
            write_obj(&out, &mesh)?;
            println!(
                "extracted {} vertices / {} faces at {res}^3 from step-{step} checkpoint into {}",
                mesh.vertices.len(),
                mesh.faces.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::Eval {
            pred,
            gt,
            out,
            samples,
        } => {
            let mesh_pred = read_obj(&pred)?;
            let mesh_gt = read_obj(&gt)?;
            let cd = chamfer(&mesh_pred, &mesh_gt, samples)?;
            let mae = normal_mae_degrees(&mesh_pred, &mesh_gt)?;
            let doc = serde_json::json!({
                "chamfer": cd,
                "chamfer_x1000": cd * 1000.0,
                "normal_mae_deg": mae,
                "samples": samples,
            });
            std::fs::write(&out, serde_json::to_string_pretty(&doc)?)
                .map_err(|e| CoreError::io(out.clone(), e))?;
            println!("chamfer {cd:.6} ({:.3} x1000), normal mae {mae:.3} deg", cd * 1000.0);
            Ok(())
        }
        Cmd::Ablate { data, config, out } => {
            let run_cfg = load_config(config.as_ref())?;
            let dataset = load_dataset(&data)?;
            let analytic = AnalyticShape::by_name(&dataset.meta.shape).ok_or_else(|| {
                CoreError::Config(format!("dataset shape '{}' unknown", dataset.meta.shape))
            })?;
            let gt_mesh = marching_cubes(&analytic, run_cfg.eval.mc_resolution, DEFAULT_BOUNDS, 0.0);
            std::fs::create_dir_all(&out).map_err(|e| CoreError::io(out.clone(), e))?;

            let arms = [NormalMode::Off, NormalMode::Accumulated, NormalMode::Localized];
            let mut rows = Vec::new();
            println!("mode         seed   chamfer     mae_render(deg)");
            for mode in arms {
                let mut cfg = run_cfg.clone();
                cfg.train.mode = mode;
                let arm_dir = out.join(mode.to_string());
                let mut trainer =
                    Trainer::new(dataset.clone(), Some(&data), &arm_dir, cfg.clone())?;
                trainer.run_to_completion()?;
                let mesh = marching_cubes(
                    &trainer.model,
                    cfg.eval.mc_resolution,
                    DEFAULT_BOUNDS,
                    0.0,
                );
                write_obj(&arm_dir.join("mesh.obj"), &mesh)?;
                let cd = chamfer(&mesh, &gt_mesh, cfg.eval.chamfer_samples)?;
                let mae = rendered_normal_mae(&trainer.model, &dataset, &cfg, mode);
                println!("{:<12} {:<6} {:<11.6} {:.3}", mode.to_string(), cfg.train.seed, cd, mae);
                rows.push(serde_json::json!({
                    "mode": mode.to_string(),
                    "seed": cfg.train.seed,
                    "chamfer": cd,
                    "rendered_normal_mae_deg": mae,
                }));
            }
            let doc = serde_json::json!({ "rows": rows });
            std::fs::write(out.join("ablate.json"), serde_json::to_string_pretty(&doc)?)
                .map_err(|e| CoreError::io(out.join("ablate.json"), e))?;
            Ok(())
        }
    }
}

/// Mean angular error of rendered normals against the dataset's oracle
/// normal maps, averaged over the foreground of the first view.
fn rendered_normal_mae(
    model: &SdfFieldModel,
    dataset: &sdfrec_core::formats::Dataset,
    cfg: &RunConfig,
    mode: NormalMode,
) -> f64 {
    let view = &dataset.views[0];
    let rendered = render_normal_map(model, view, &cfg.sampling, mode, cfg.train.seed);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, n) in rendered.iter().enumerate() {
        if let Some(n) = n {
            let gt = nalgebra_vec(view.normal[i]);
            if gt.norm() < 0.5 {
                continue;
            }
            let cos = n.normalize().dot(&gt.normalize()).clamp(-1.0, 1.0);
            sum += cos.acos().to_degrees();
            count += 1;
        }
    }
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

fn nalgebra_vec(v: [f64; 3]) -> sdfrec_core::Vec3 {
    sdfrec_core::Vec3::new(v[0], v[1], v[2])
}
