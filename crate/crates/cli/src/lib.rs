//! The `tbn` command line.
//!
//! Every subcommand takes `--seed`, `--config <json>` and `--out <dir>`.
//! Exit codes: 0 success, 2 bad arguments or inputs, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tbn_core::flow::RigidPose;
use tbn_core::io::{load_model, load_pnm, output_path, read_dataset, save_model, write_dataset, write_loss_log};
use tbn_core::net::{Arch, TbnModel};
use tbn_core::recon::{extract_mesh, iou_table, optimal_threshold_iou, reconstruct_with_recycling, Recycling, SamplingMode};
use tbn_core::scenes::{make_dataset, make_scene, DatasetConfig};
use tbn_core::script::{apply_script, decode_scripted, parse_script, script_to_json};
use tbn_core::train::{gradcheck, heldout_l1, train, TrainConfig, GRADCHECK_STEP};
use tbn_core::{Dataset32, ImagePlane32, TbnError, TbnModel32};
use tbn_service::pngio;

/// Gradient checks pass below this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] TbnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numeric(_) | CliError::Core(TbnError::NonFinite(_)) => 3,
            _ => 2,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "tbn", version, about = "Transformable bottleneck networks on synthetic voxel scenes")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Overrides the dataset, training and initialization seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON file with optional `dataset`, `arch`, `train` and `model_seed` entries.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic dataset to disk.
    GenData,
    /// Train a model and write its checkpoint and loss log.
    Train {
        /// Dataset directory written by `gen-data`; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides `train.max_steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Worker threads; 1 gives bitwise reproducible runs.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Novel view from posed input images.
    Synth {
        #[arg(long)]
        model: PathBuf,
        /// Input image (PNG or PPM); repeat together with `--pose`.
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        /// `azimuth,elevation[,tx,ty,tz]` in degrees, one per input.
        #[arg(long = "pose", required = true, value_parser = parse_pose)]
        poses: Vec<RigidPose>,
        #[arg(long, value_parser = parse_pose)]
        target: RigidPose,
    },
    /// Test-split occupancy reconstruction, IoU report and OBJ export.
    Recon {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Recycled views per scene.
        #[arg(long, default_value_t = 0)]
        extra: usize,
        /// regular, random or real.
        #[arg(long, default_value = "regular")]
        mode: SamplingMode,
        /// Write one OBJ per scene at this normalized iso-level.
        #[arg(long)]
        mesh: Option<f64>,
    },
    /// Apply a JSON manipulation script to the bottleneck of posed images.
    Manip {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long = "pose", required = true, value_parser = parse_pose)]
        poses: Vec<RigidPose>,
        /// Script file, a JSON array of flow specs.
        #[arg(long)]
        script: PathBuf,
        /// View pose of the decoded image.
        #[arg(long, value_parser = parse_pose)]
        view: Option<RigidPose>,
        /// Also write the scripted occupancy mesh at this iso-level.
        #[arg(long)]
        mesh: Option<f64>,
    },
    /// Compare analytic and finite-difference gradients of a fresh model.
    Gradcheck {
        /// Check every n-th parameter value; defaults to about 600 checks.
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, default_value_t = GRADCHECK_STEP)]
        step: f64,
        /// Use the small test architecture instead of the configured one.
        #[arg(long)]
        tiny: bool,
    },
    /// Start the manipulation service.
    Serve {
        /// Checkpoint as `id=path`, or a bare path registered as `default`.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Only this origin may call the service from a browser.
        #[arg(long)]
        cors_origin: Option<String>,
    },
}

/// Contents of `--config`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub arch: Arch,
    pub train: TrainConfig,
    pub model_seed: u64,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| usage(format!("bad config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.dataset.seed = s;
            cfg.train.seed = s;
            cfg.model_seed = s;
        }
        cfg.dataset.validate()?;
        cfg.arch.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

pub fn parse_pose(s: &str) -> std::result::Result<RigidPose, String> {
    let v = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let pose = match v[..] {
        [az, el] => RigidPose::new(az, el),
        [az, el, x, y, z] => RigidPose {
            azimuth: az,
            elevation: el,
            translation: [x, y, z],
        },
        _ => return Err(format!("expected azimuth,elevation[,tx,ty,tz], got {s:?}")),
    };
    if !pose.is_finite() {
        return Err(format!("non-finite pose {s:?}"));
    }
    Ok(pose)
}

pub fn load_image(path: &Path) -> Result<ImagePlane32> {
    let image = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => pngio::decode_png(&fs::read(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))?,
        Some("ppm") | Some("pnm") => load_pnm(path)?,
        _ => return Err(usage(format!("{}: expected a .png or .ppm image", path.display()))),
    };
    if image.channels() != 3 {
        return Err(usage(format!("{}: expected an RGB image", path.display())));
    }
    Ok(image)
}

pub fn save_png(path: &Path, image: &ImagePlane32) -> Result<()> {
    let bytes = pngio::encode_png(image).map_err(|e| CliError::Numeric(e.to_string()))?;
    fs::write(path, bytes)?;
    Ok(())
}

fn load_dataset(data: Option<&Path>, cfg: &RunConfig) -> Result<Dataset32> {
    Ok(match data {
        Some(dir) => read_dataset(dir)?,
        None => make_dataset(&cfg.dataset)?,
    })
}

fn posed_inputs(inputs: &[PathBuf], poses: &[RigidPose]) -> Result<Vec<(ImagePlane32, RigidPose)>> {
    if inputs.len() != poses.len() {
        return Err(usage(format!("{} inputs but {} poses", inputs.len(), poses.len())));
    }
    inputs
        .iter()
        .zip(poses)
        .map(|(p, pose)| Ok((load_image(p)?, *pose)))
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value).map_err(TbnError::from)?)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let Common { seed, config, out } = cli.common;
    let cfg = RunConfig::load(config.as_deref(), seed)?;
    match cli.command {
        Command::GenData => gen_data(&cfg, &out),
        Command::Train { data, steps, init, threads } => {
            let job = || train_cmd(&cfg, &out, data.as_deref(), steps, init.as_deref());
            match threads {
                Some(n) => rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| usage(e.to_string()))?
                    .install(job),
                None => job(),
            }
        }
        Command::Synth { model, inputs, poses, target } => synth(&out, &model, &inputs, &poses, &target),
        Command::Recon { model, data, extra, mode, mesh } => recon(&cfg, &out, &model, data.as_deref(), extra, mode, mesh),
        Command::Manip { model, inputs, poses, script, view, mesh } => manip(&out, &model, &inputs, &poses, &script, view, mesh),
        Command::Gradcheck { stride, step, tiny } => gradcheck_cmd(&cfg, &out, stride, step, tiny),
        Command::Serve { models, addr, cors_origin } => serve(&models, &addr, cors_origin),
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data: Dataset32 = make_dataset(&cfg.dataset)?;
    fs::create_dir_all(out)?;
    write_dataset(out, &data)?;
    println!(
        "wrote {} scenes ({} train, {} test) to {}",
        data.scenes.len(),
        data.train().len(),
        data.test().len(),
        out.display()
    );
    Ok(())
}

fn train_cmd(cfg: &RunConfig, out: &Path, data: Option<&Path>, steps: Option<usize>, init: Option<&Path>) -> Result<()> {
    let data = load_dataset(data, cfg)?;
    if data.config.image_size != cfg.arch.image_size {
        return Err(usage(format!(
            "dataset images are {0}x{0} but the architecture expects {1}x{1}",
            data.config.image_size, cfg.arch.image_size
        )));
    }
    let mut model = match init {
        Some(p) => load_model(p)?,
        None => TbnModel32::new(cfg.arch, cfg.model_seed)?,
    };
    let mut tc = cfg.train.clone();
    if steps.is_some() {
        tc.max_steps = steps;
    }
    let mut resolved = cfg.clone();
    resolved.dataset = data.config.clone();
    resolved.train = tc.clone();
    resolved.arch = model.arch();
    write_json(&output_path(out, "config.json")?, &resolved)?;
    let validation = (!data.test().is_empty()).then(|| data.test());
    let outcome = train(&mut model, data.train(), validation, &tc, |e| {
        if e.step % 100 == 0 {
            eprintln!("step {:>6}  L_R {:.4}  L_S {:.4}  L_M {:.2}  total {:.4}", e.step, e.l_r, e.l_s, e.l_m, e.total);
        }
    })?;
    save_model(&out.join("model.vbm"), &model)?;
    let mut log = Vec::new();
    write_loss_log(&mut log, &outcome.log)?;
    fs::write(out.join("loss.jsonl"), log)?;
    let heldout = match validation {
        Some(v) => Some(heldout_l1(&model, v)?),
        None => None,
    };
    let summary = json!({
        "steps": outcome.steps,
        "stopped_early": outcome.stopped_early,
        "heldout_l1": heldout,
    });
    write_json(&out.join("summary.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn synth(out: &Path, model: &Path, inputs: &[PathBuf], poses: &[RigidPose], target: &RigidPose) -> Result<()> {
    let model: TbnModel32 = load_model(model)?;
    let views = posed_inputs(inputs, poses)?;
    let (image, _) = model.synthesize(&views, target)?;
    let path = output_path(out, "synth.png")?;
    save_png(&path, &image.rgb()?)?;
    save_png(&out.join("synth_mask.png"), &image.mask()?)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn recon(
    cfg: &RunConfig,
    out: &Path,
    model: &Path,
    data: Option<&Path>,
    extra: usize,
    mode: SamplingMode,
    mesh: Option<f64>,
) -> Result<()> {
    let model: TbnModel32 = load_model(model)?;
    let data = load_dataset(data, cfg)?;
    if model.arch().side != data.config.side || model.arch().image_size != data.config.image_size {
        return Err(usage("model architecture does not match the dataset grid or image size"));
    }
    let test = data.test();
    if test.is_empty() {
        return Err(usage("the dataset has no test scenes"));
    }
    let seed = cfg.train.seed;
    let preds = test
        .par_iter()
        .map(|s| {
            let n = s.views.len();
            let i = s.id % n;
            let input = &s.views[i];
            let others: Vec<(ImagePlane32, RigidPose)> = (1..n)
                .map(|k| &s.views[(i + k) % n])
                .map(|v| (v.image.clone(), v.pose))
                .collect();
            let recycling = match mode {
                SamplingMode::Regular => Recycling::Regular,
                SamplingMode::Random => Recycling::Random {
                    seed: seed.wrapping_add(s.id as u64),
                },
                SamplingMode::Real => Recycling::Real(&others),
            };
            reconstruct_with_recycling(&model, &input.image, &input.pose, extra, &recycling)
        })
        .collect::<tbn_core::Result<Vec<_>>>()?;
    let truths: Vec<Vec<bool>> = test.iter().map(|s| s.shape.occupied().to_vec()).collect();
    let report = optimal_threshold_iou(&preds, &truths, extra, mode)?;
    write_json(&output_path(out, "iou.json")?, &report)?;
    let table = iou_table(std::slice::from_ref(&report));
    fs::write(out.join("iou.txt"), &table)?;
    print!("{table}");
    println!("threshold {:.4}", report.threshold);
    if let Some(level) = mesh {
        let dir = out.join("meshes");
        fs::create_dir_all(&dir)?;
        for (s, occ) in test.iter().zip(&preds) {
            fs::write(dir.join(format!("scene_{:05}.obj", s.id)), extract_mesh(occ, level)?.to_obj())?;
        }
    }
    Ok(())
}

fn manip(
    out: &Path,
    model: &Path,
    inputs: &[PathBuf],
    poses: &[RigidPose],
    script: &Path,
    view: Option<RigidPose>,
    mesh: Option<f64>,
) -> Result<()> {
    let model: TbnModel32 = load_model(model)?;
    let views = posed_inputs(inputs, poses)?;
    let text = fs::read_to_string(script).map_err(|e| usage(format!("cannot read {}: {e}", script.display())))?;
    let script = parse_script(&text).map_err(|e| usage(format!("bad script: {e}")))?;
    let view = view.unwrap_or_else(RigidPose::identity);
    let base = model.aggregate_views(&views, &RigidPose::identity())?;
    let image = decode_scripted(&model, &base, &script, &view)?;
    let path = output_path(out, "manip.png")?;
    save_png(&path, &image.rgb()?)?;
    fs::write(out.join("script.json"), script_to_json(&script))?;
    if let Some(level) = mesh {
        let occ = model.decode_occupancy(&apply_script(&base, &script, &RigidPose::identity())?)?;
        fs::write(out.join("manip.obj"), extract_mesh(&occ, level)?.to_obj())?;
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn gradcheck_cmd(cfg: &RunConfig, out: &Path, stride: Option<usize>, step: f64, tiny: bool) -> Result<()> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(usage("--step must be positive"));
    }
    let arch = if tiny { Arch::tiny() } else { cfg.arch };
    let scene_cfg = DatasetConfig {
        image_size: arch.image_size,
        ..cfg.dataset.clone()
    };
    let scene = make_scene::<f64>(&scene_cfg, 0)?;
    let model = TbnModel::<f64>::new(arch, cfg.model_seed)?;
    let n = scene.views.len();
    let stride = stride.unwrap_or(model.param_count() / 600).max(1);
    let report = gradcheck(&model, &scene, &[0, 2 % n], 5 % n, &cfg.train, step, stride)?;
    write_json(&output_path(out, "gradcheck.json")?, &report)?;
    println!(
        "max relative error {:.3e} at {} over {} parameters (step {:e})",
        report.max_rel_error, report.worst_param, report.checked, report.step
    );
    if report.max_rel_error < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed: {:.3e} >= {GRADCHECK_TOLERANCE:e}",
            report.max_rel_error
        )))
    }
}

fn serve(models: &[String], addr: &str, cors_origin: Option<String>) -> Result<()> {
    let mut pairs: Vec<(String, PathBuf)> = Vec::new();
    for m in models {
        let (id, path) = match m.split_once('=') {
            Some((id, p)) => (id.to_string(), PathBuf::from(p)),
            None => (tbn_service::DEFAULT_MODEL.to_string(), PathBuf::from(m)),
        };
        if pairs.iter().any(|(seen, _)| *seen == id) {
            return Err(usage(format!("model id {id:?} given twice")));
        }
        pairs.push((id, path));
    }
    let refs: Vec<(String, &Path)> = pairs.iter().map(|(id, p)| (id.clone(), p.as_path())).collect();
    let mut state = tbn_service::AppState::from_checkpoints(&refs)?;
    if let Some(origin) = cors_origin {
        state = state.with_cors_origin(origin);
    }
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| usage(format!("cannot bind {addr}: {e}")))?;
        println!("listening on http://{}", listener.local_addr()?);
        tbn_service::serve(listener, state).await?;
        Ok(())
    })
}
