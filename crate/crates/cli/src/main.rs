use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use semap_core::config::toml_sets_seed;
use semap_core::dataset::{read_boxes, read_xyzl, FrameSource};
use semap_core::eval::{class_iou, crop_labeled, even_subsample, sample_mesh_surface, MetricsReport};
use semap_core::geometry::{crop_and_normalize_instance, Obb};
use semap_core::instance::{
    fit_latent, load_prior, place_in_scene, reconstruct_instance, save_prior, train_prior, undo_yaw,
    FitReport, SyntheticShapeFamily,
};
use semap_core::mesh::{colorize, extract_mesh, grid_spec, observed_grid, read_ply, write_ply, LabelSource, Palette, PlyFormat};
use semap_core::synth::{write_dataset, Scenario, SynthConfig};
use semap_core::trainer::RunReport;
use semap_core::{checkpoint, run_sequence, Error, Point3, Result, RunConfig};

#[derive(Parser)]
#[command(name = "semap", version, about = "Continual neural semantic mapping")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ColorArg {
    /// Nearest labeled input point.
    Nearest,
    /// Semantic head of the field.
    Head,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled scan sequence.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "street")]
        scenario: String,
        #[arg(long, default_value_t = 9)]
        frames: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Fit the field to a frame sequence.
    Map {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        frames: Option<PathBuf>,
        #[arg(long)]
        poses: Option<PathBuf>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Optimizer steps per keyframe.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Marching cubes on a checkpoint.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Samples along x and y.
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long, allow_hyphen_values = true)]
        z_min: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        z_max: Option<f64>,
        /// Run report whose observed box sets the z range and crop.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum)]
        color: Option<ColorArg>,
        /// Labeled points (`.xyzl`, world frame) for nearest coloring.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        ascii: bool,
    },
    /// Reconstruction and segmentation metrics.
    Eval {
        /// Mesh (`.ply`) or point cloud (`.xyzl`).
        #[arg(long)]
        input: PathBuf,
        /// Ground-truth labeled points (`.xyzl`).
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Crop ground truth to the observed box of this run report.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Checkpoint and config for mIoU on the ground-truth points.
        #[arg(long, requires = "config")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the instance shape prior on the synthetic shape family.
    PriorTrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Complete boxed instances with the shape prior.
    InstanceFit {
        #[arg(long)]
        prior: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Minimum points inside a box to attempt a fit.
        #[arg(long, default_value_t = 50)]
        min_points: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error kind=input msg=\"{e}\"");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('"', "'").replace('\n', " ");
            eprintln!("error kind={} msg=\"{msg}\"", e.kind());
            ExitCode::from(match e.kind() {
                "numerical" => 3,
                "io" => 4,
                _ => 2,
            })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            out,
            scenario,
            frames,
            seed,
        } => {
            let scenario: Scenario = scenario.parse()?;
            let summary = write_dataset(&out, &SynthConfig::new(scenario, frames, seed))?;
            println!("{}", to_json(&summary));
        }
        Command::Map {
            config,
            seed,
            frames,
            poses,
            run_dir,
            epochs,
        } => {
            let (mut cfg, has_seed) = load_config(&config)?;
            match seed {
                Some(s) => cfg.seed = s,
                None if !has_seed => {
                    return Err(Error::Config("--seed is required when the config sets no seed".into()))
                }
                None => {}
            }
            if let Some(e) = epochs {
                cfg.trainer.epochs_per_update = e;
            }
            let frames = frames.or(cfg.paths.frames.clone()).ok_or_else(|| missing("frames"))?;
            let poses = poses.or(cfg.paths.poses.clone()).ok_or_else(|| missing("poses"))?;
            let run_dir = run_dir.or(cfg.paths.run_dir.clone()).ok_or_else(|| missing("run_dir"))?;
            cfg.validate()?;
            let source = FrameSource::open(&frames, &poses)?;
            let out = run_sequence(&cfg, &source, Some(&run_dir))?;
            fs::write(run_dir.join("config.toml"), cfg.to_toml())?;
            println!("{}", to_json(&out.report));
        }
        Command::Extract {
            checkpoint: ckpt,
            config,
            out,
            resolution,
            z_min,
            z_max,
            report,
            color,
            labels,
            ascii,
        } => {
            let (cfg, _) = load_config(&config)?;
            let field = checkpoint::load(&ckpt)?;
            let bounds = cfg.scene.bounds()?;
            let n_x = resolution.unwrap_or(cfg.grid.resolution);
            let observed = report.as_deref().map(read_report).transpose()?.and_then(|r| r.observed);
            let grid = if z_min.is_some() || z_max.is_some() {
                grid_spec(&bounds, z_min.unwrap_or(bounds.g_min), z_max.unwrap_or(bounds.g_max), n_x)?
            } else if let Some([lo, hi]) = observed {
                observed_grid(&bounds, lo[2], hi[2], n_x, cfg.grid.z_padding_cells)?
            } else {
                grid_spec(&bounds, bounds.g_min, bounds.g_max, n_x)?
            };
            eprintln!(
                "grid n_x={} n_y={} n_z={} z_start={} spacing={:.6}",
                grid.n_x,
                grid.n_y,
                grid.n_z,
                grid.z_start,
                grid.spacing()
            );
            let mut mesh = extract_mesh(&field, &grid);
            if let Some([lo, hi]) = observed {
                mesh = mesh.crop(&lo.into(), &hi.into());
            }
            if mesh.is_empty() {
                return Err(Error::DegenerateCode);
            }
            let palette = match &cfg.scene.palette {
                Some(p) => Palette::read(p)?,
                None => Palette::default_for(cfg.scene.classes),
            };
            let mode = color.unwrap_or(if labels.is_some() { ColorArg::Nearest } else { ColorArg::Head });
            match mode {
                ColorArg::Nearest => {
                    let path = labels.ok_or_else(|| missing("labels"))?;
                    let (points, labels) = read_xyzl(&path)?;
                    colorize(&mut mesh, &LabelSource::Points { points: &points, labels: &labels }, &palette)?;
                }
                ColorArg::Head => colorize(&mut mesh, &LabelSource::Head { field: &field, bounds }, &palette)?,
            }
            let format = if ascii || !cfg.grid.binary_ply {
                PlyFormat::Ascii
            } else {
                PlyFormat::BinaryLittleEndian
            };
            let comments = vec![format!("config_hash {}", cfg.hash()), format!("seed {}", cfg.seed)];
            write_ply(&mesh, &out, format, &comments)?;
            println!(
                "{}",
                to_json(&serde_json::json!({
                    "vertices": mesh.vertices.len(),
                    "triangles": mesh.triangles.len(),
                    "n_z": grid.n_z,
                    "z_start": grid.z_start,
                    "config_hash": cfg.hash(),
                    "seed": cfg.seed,
                }))
            );
        }
        Command::Eval {
            input,
            gt,
            tau,
            samples,
            seed,
            report,
            checkpoint: ckpt,
            config,
            out,
        } => {
            let (mut gt_points, mut gt_labels) = read_xyzl(&gt)?;
            if let Some(r) = report.as_deref() {
                if let Some([lo, hi]) = read_report(r)?.observed {
                    (gt_points, gt_labels) = crop_labeled(&gt_points, &gt_labels, &lo.into(), &hi.into());
                }
            }
            if gt_points.is_empty() {
                return Err(Error::Input {
                    path: gt,
                    reason: "no ground-truth points".into(),
                });
            }
            let gt_points = even_subsample(&gt_points, samples);
            let gt_labels = even_subsample(&gt_labels, samples);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rec = match input.extension().and_then(|e| e.to_str()) {
                Some("ply") => sample_mesh_surface(&read_ply(&input)?, samples, &mut rng)?,
                Some("xyzl") => even_subsample(&read_xyzl(&input)?.0, samples),
                _ => {
                    return Err(Error::Input {
                        path: input,
                        reason: "expected a .ply mesh or .xyzl points".into(),
                    })
                }
            };
            let mut metrics = MetricsReport::geometric(&rec, &gt_points, tau, seed)?;
            if let (Some(ckpt), Some(config)) = (ckpt, config) {
                let (cfg, _) = load_config(&config)?;
                let field = checkpoint::load(&ckpt)?;
                let bounds = cfg.scene.bounds()?;
                let normalized: Vec<Point3> =
                    gt_points.iter().map(|p| p.map(|v| bounds.normalize_scalar(v))).collect();
                let pred = field.predict_labels(&normalized);
                let (m, per_class) = class_iou(&pred, &gt_labels, field.classes().max(max_label(&gt_labels) + 1))?;
                metrics.miou = Some(m);
                metrics.class_iou = Some(per_class);
            }
            print!("{}", metrics.table());
            if let Some(out) = out {
                fs::write(out, to_json(&metrics) + "\n")?;
            }
        }
        Command::PriorTrain { config, seed, out } => {
            let (cfg, has_seed) = load_config(&config)?;
            let seed = match seed {
                Some(s) => s,
                None if has_seed => cfg.seed,
                None => return Err(Error::Config("--seed is required when the config sets no seed".into())),
            };
            let family = SyntheticShapeFamily::new(seed);
            let (prior, report) = train_prior(&family, &cfg.instance, seed)?;
            save_prior(&prior, &out)?;
            let summary = serde_json::json!({
                "report": report,
                "seed": seed,
                "config_hash": cfg.hash(),
            });
            fs::write(out.with_extension("json"), to_json(&summary) + "\n")?;
            println!("{}", to_json(&summary));
        }
        Command::InstanceFit {
            prior,
            frames,
            poses,
            boxes,
            out,
            config,
            seed,
            min_points,
        } => {
            let instance_cfg = match config {
                Some(c) => load_config(&c)?.0.instance,
                None => Default::default(),
            };
            let prior = load_prior(&prior)?;
            let source = FrameSource::open(&frames, &poses)?;
            let boxes = read_boxes(&boxes)?;
            fs::create_dir_all(&out)?;
            let mut jobs = Vec::new();
            for (k, b) in boxes.iter().enumerate() {
                let Some(position) = source.indices().position(|i| i == b.frame) else {
                    continue;
                };
                let frame = source.load(position)?;
                let obs = match crop_and_normalize_instance(&frame.points, &b.obb) {
                    Ok(p) if p.len() >= min_points => p,
                    _ => continue,
                };
                // Box in world coordinates for placement.
                let world_box = Obb::new(frame.pose.compose(&b.obb.pose), b.obb.half_extents, b.obb.class_id)?;
                jobs.push((k, b.frame, obs, world_box));
            }
            let results: Vec<Result<InstanceRecord>> = jobs
                .par_iter()
                .map(|(k, frame, obs, world_box)| {
                    let fit = fit_latent(&prior, obs, &instance_cfg, seed.wrapping_add(*k as u64))?;
                    let mut record = InstanceRecord {
                        instance: *k,
                        frame: *frame,
                        points: obs.len(),
                        mesh: None,
                        error: None,
                        fit: fit.report.clone(),
                    };
                    match reconstruct_instance(&prior, &fit.z, instance_cfg.grid_res) {
                        Ok(mut mesh) => {
                            undo_yaw(&mut mesh, fit.report.yaw);
                            let placed = place_in_scene(&mesh, world_box);
                            let path = out.join(format!("instance_{k:04}.ply"));
                            let comments = vec![format!("instance {k} frame {frame}"), format!("seed {seed}")];
                            write_ply(&placed, &path, PlyFormat::BinaryLittleEndian, &comments)?;
                            record.mesh = Some(path);
                        }
                        Err(e @ Error::DegenerateCode) => record.error = Some(e.to_string()),
                        Err(e) => return Err(e),
                    }
                    Ok(record)
                })
                .collect();
            let mut lines = String::new();
            for r in results {
                lines += &serde_json::to_string(&r?).expect("record serializes");
                lines.push('\n');
            }
            fs::write(out.join("fits.jsonl"), &lines)?;
            print!("{lines}");
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct InstanceRecord {
    instance: usize,
    frame: u64,
    points: usize,
    mesh: Option<PathBuf>,
    error: Option<String>,
    fit: FitReport,
}

fn load_config(path: &Path) -> Result<(RunConfig, bool)> {
    let text = fs::read_to_string(path).map_err(|e| Error::Input {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let cfg = RunConfig::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok((cfg, toml_sets_seed(&text)))
}

fn read_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::Input {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Input {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn missing(what: &str) -> Error {
    Error::Config(format!("no {what} path given on the command line or in [paths]"))
}

fn max_label(labels: &[u32]) -> usize {
    labels.iter().copied().max().unwrap_or(0) as usize
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes")
}
