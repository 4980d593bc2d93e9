//! Command-line front end: `synth`, `train`, `eval`, `ablate`, `probe`.
//!
//! Every command resolves the config (file plus `--set` overrides), takes a
//! lock on its output directory and writes `manifest.json` before any work.
//! Exit codes: 0 success, 1 usage or config error, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::backbone::{pca_project, stability_probe, Backbone, BackboneKind};
use crate::config::Config;
use crate::degradation::{make_dataset, make_eval_pairs, DegradationKind, DegradationSpec, SamplePair};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::procedural;
use crate::trainer::{
    ablation_layers, ablation_task_count, evaluate, init_model, load_checkpoint, save_checkpoint, train, write_json,
    AblationSetup, CheckpointMeta,
};

#[derive(Debug, Parser)]
#[command(name = "restorelab", version, about = "Backbone-guided multi-task image restoration lab")]
pub struct Cli {
    /// TOML config file; built-in defaults when omitted.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(short, long, global = true)]
    pub output: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write degraded/clean PNG pairs for every spec in the training mix.
    Synth {
        /// Directory of clean PNGs (default: `data.clean_dir` or procedural scenes).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train a model and write checkpoint, logs and final metrics.
    Train,
    /// Evaluate a checkpoint (or the freshly initialised model) per task and level.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// A `synth` output directory; default: pairs generated from the config.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run an ablation harness.
    Ablate {
        #[arg(long, value_enum)]
        which: Which,
    },
    /// Feature stability probe and PCA projections.
    Probe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Layers,
    Tasks,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Probe => "probe",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub resolved_config_hash: String,
    pub resolved_config: Config,
    pub output_dir: PathBuf,
    pub timestamp: String,
    pub version: String,
}

/// Held for the lifetime of a command; removes the lock file on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Map an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Argument(_) => 1,
        _ => 2,
    }
}

/// Parse arguments and run; returns the process exit code.
pub fn main_with_args(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli, args: &[String]) -> Result<()> {
    let config = Config::load(cli.config.as_deref(), &cli.overrides)?;
    let out = cli
        .output
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    let _lock = OutputLock::acquire(&out)?;
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        args: args.to_vec(),
        config_path: cli.config.clone(),
        overrides: cli.overrides.clone(),
        resolved_config_hash: config.hash()?,
        resolved_config: config.clone(),
        output_dir: out.clone(),
        timestamp: chrono::Utc::now().to_rfc3339(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    log::info!("{} -> {} (config {})", manifest.command, out.display(), manifest.resolved_config_hash);

    match &cli.command {
        Command::Synth { input } => cmd_synth(&config, input.as_deref(), &out),
        Command::Train => cmd_train(&config, &out),
        Command::Eval { checkpoint, dataset } => cmd_eval(&config, checkpoint.as_deref(), dataset.as_deref(), &out),
        Command::Ablate { which } => cmd_ablate(&config, *which, &out),
        Command::Probe => cmd_probe(&config, &out),
    }
}

/// PNGs of a directory in name order, with their file stems.
pub fn load_image_dir(dir: &Path) -> Result<Vec<(String, Image)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Empty(format!("no PNG files in {}", dir.display())));
    }
    paths
        .into_iter()
        .map(|p| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((stem, Image::load_png(&p)?))
        })
        .collect()
}

fn clean_images(config: &Config, dir: Option<&Path>) -> Result<Vec<(String, Image)>> {
    match dir.or(config.data.clean_dir.as_deref()) {
        Some(d) => load_image_dir(d),
        None => Ok(procedural::scenes(
            config.data.scene_count,
            config.data.scene_size,
            config.data.scene_size,
            config.sub_seed("scenes"),
        )
        .into_iter()
        .enumerate()
        .map(|(i, img)| (format!("scene{i:03}"), img))
        .collect()),
    }
}

fn eval_images(config: &Config) -> Result<Vec<Image>> {
    match &config.data.eval_dir {
        Some(d) => Ok(load_image_dir(d)?.into_iter().map(|(_, i)| i).collect()),
        None => Ok(procedural::scenes(
            config.data.eval_count,
            config.data.eval_size,
            config.data.eval_size,
            config.sub_seed("eval_scenes"),
        )),
    }
}

fn load_backbone(config: &Config) -> Result<Backbone> {
    Backbone::from_config(&config.backbone, DType::F32, &Device::Cpu)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub kind: DegradationKind,
    pub spec: DegradationSpec,
    pub clean: PathBuf,
    pub degraded: PathBuf,
}

fn cmd_synth(config: &Config, input: Option<&Path>, out: &Path) -> Result<()> {
    let images = clean_images(config, input)?;
    let seed = config.sub_seed("synth");
    let mut index = Vec::new();
    for (si, spec) in config.train.task_mix.iter().enumerate() {
        let kind = spec.kind.name();
        let dir = out.join(kind);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (ii, (stem, img)) in images.iter().enumerate() {
            let pair = SamplePair::new(img.clone(), spec, seed ^ ((si as u64) << 32) ^ ii as u64)?;
            let base = format!("{stem}_t{si}");
            let clean = PathBuf::from(kind).join(format!("{base}_clean.png"));
            let degraded = PathBuf::from(kind).join(format!("{base}_{kind}.png"));
            pair.clean.save_png(&out.join(&clean))?;
            pair.degraded.save_png(&out.join(&degraded))?;
            index.push(PairEntry {
                kind: spec.kind,
                spec: spec.clone(),
                clean,
                degraded,
            });
        }
    }
    write_json(&out.join("pairs.json"), &index)?;
    log::info!("wrote {} pairs", index.len());
    Ok(())
}

/// Read the pairs written by `synth`.
pub fn load_pairs(dir: &Path) -> Result<Vec<SamplePair>> {
    let path = dir.join("pairs.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let entries: Vec<PairEntry> = serde_json::from_str(&text)?;
    entries
        .into_iter()
        .map(|e| {
            Ok(SamplePair {
                clean: Image::load_png(&dir.join(&e.clean))?,
                degraded: Image::load_png(&dir.join(&e.degraded))?,
                spec: e.spec,
            })
        })
        .collect()
}

fn config_eval_pairs(config: &Config) -> Result<Vec<SamplePair>> {
    make_eval_pairs(&eval_images(config)?, &config.eval_specs(), config.sub_seed("eval"))
}

fn cmd_train(config: &Config, out: &Path) -> Result<()> {
    let images: Vec<Image> = clean_images(config, None)?.into_iter().map(|(_, i)| i).collect();
    let needs_backbone = config.net.guidance.uses_backbone() || config.train.lambda > 0.0;
    let backbone = needs_backbone.then(|| load_backbone(config)).transpose()?;
    let model = init_model(&config.net, &config.train, backbone.as_ref())?;
    log::info!("model has {} parameters", model.count_parameters());
    let mut data = make_dataset(
        &images,
        &config.train.task_mix,
        config.train.patch_size,
        crate::config::sub_seed(config.train.seed, "data"),
    )?;
    let eval_pairs = config_eval_pairs(config)?;
    let log = train(&config.train, &mut data, &model, backbone.as_ref(), &eval_pairs, Some(out))?;
    log.write_csv(out)?;
    let meta = CheckpointMeta::new(&model, &config.train, &config.backbone, config.train.steps, Some(config.hash()?))?;
    let path = save_checkpoint(&model, &meta, out, "model")?;
    let table = evaluate(&model, &eval_pairs, backbone.as_ref())?;
    table.write_csv(&out.join("metrics.csv"))?;
    write_json(&out.join("metrics.json"), &table)?;
    log::info!("checkpoint {}", path.display());
    Ok(())
}

fn cmd_eval(config: &Config, checkpoint: Option<&Path>, dataset: Option<&Path>, out: &Path) -> Result<()> {
    let (model, backbone_cfg) = match checkpoint {
        Some(p) => {
            let (m, meta) = load_checkpoint(p)?;
            (m, meta.backbone)
        }
        None => {
            let bb = config.net.guidance.uses_backbone().then(|| load_backbone(config)).transpose()?;
            (init_model(&config.net, &config.train, bb.as_ref())?, config.backbone.clone())
        }
    };
    let backbone = if model.config().guidance.uses_backbone() {
        Some(Backbone::from_config(&backbone_cfg, DType::F32, &Device::Cpu)?)
    } else {
        None
    };
    let pairs = match dataset {
        Some(d) => load_pairs(d)?,
        None => config_eval_pairs(config)?,
    };
    let table = evaluate(&model, &pairs, backbone.as_ref())?;
    table.write_csv(&out.join("metrics.csv"))?;
    write_json(&out.join("metrics.json"), &table)?;
    for r in &table.rows {
        println!("{:<6} {:<22} psnr {:>7.3} dB  ssim {:.4}  (n={})", r.task.name(), r.level, r.psnr, r.ssim, r.count);
    }
    Ok(())
}

fn cmd_ablate(config: &Config, which: Which, out: &Path) -> Result<()> {
    let train_images: Vec<Image> = clean_images(config, None)?.into_iter().map(|(_, i)| i).collect();
    let eval = eval_images(config)?;
    let backbone = load_backbone(config)?;
    let setup = AblationSetup {
        net: config.net.clone(),
        train: config.train.clone(),
        backbone: &backbone,
        train_images: &train_images,
        eval_images: &eval,
    };
    match which {
        Which::Layers => {
            let t = ablation_layers(&setup)?;
            t.write(out)?;
            for r in &t.rows {
                println!("{} psnr {:.3} ssim {:.4}", r.variant, r.psnr, r.ssim);
            }
            if let Some(g) = t.full.gating {
                println!(
                    "full psnr {:.3} gating scores {:.3} {:.3} {:.3}",
                    t.full.psnr, g.s_shallow, g.s_medium, g.s_deep
                );
            }
        }
        Which::Tasks => {
            let t = ablation_task_count(&setup)?;
            t.write(out)?;
            for r in &t.rows {
                println!(
                    "{:<18} baseline {:.3}/{:.4} guided {:.3}/{:.4}",
                    r.tasks, r.baseline_psnr, r.baseline_ssim, r.guided_psnr, r.guided_ssim
                );
            }
        }
    }
    Ok(())
}

fn cmd_probe(config: &Config, out: &Path) -> Result<()> {
    let p = &config.probe;
    let images: Vec<Image> = match &config.data.eval_dir {
        Some(d) => load_image_dir(d)?.into_iter().map(|(_, i)| i).take(p.images).collect(),
        None => procedural::scenes(p.images, p.image_size, p.image_size, config.sub_seed("probe_scenes")),
    };
    let backbone = load_backbone(config)?;
    let report = stability_probe(&images, &p.sigmas, &backbone, config.sub_seed("probe"))?;
    let csv_path = out.join("probe.csv");
    fs::write(&csv_path, report.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
    let holds = report.ordering_holds();
    write_json(
        &out.join("probe.json"),
        &serde_json::json!({ "report": report, "ordering_holds": holds, "backbone": backbone.kind() }),
    )?;

    let deep = backbone.tap_indices()[2];
    let max_sigma = p.sigmas.iter().cloned().fold(f64::MIN, f64::max);
    for (i, img) in images.iter().take(p.pca_images).enumerate() {
        let noisy = crate::degradation::add_gaussian_noise(img, max_sigma, config.sub_seed("probe_pca") ^ i as u64)?;
        for (tag, im) in [("clean".to_string(), img), (format!("sigma{max_sigma}"), &noisy)] {
            let x = im.to_tensor(backbone.dtype(), backbone.params().device())?;
            let fmap = backbone.features_at(&x, &[deep])?.remove(0);
            let proj = pca_project(&fmap, 3)?.upscale_nearest(backbone.patch_size());
            proj.save_png(&out.join(format!("pca_{i}_{tag}.png")))?;
        }
    }
    let v = &report.variances;
    println!("variance raw {:.4} f_image {:.4} f_dino {:.4}", v.raw, v.f_image, v.f_dino);
    if backbone.kind() == BackboneKind::PretrainedVit && !holds {
        return Err(Error::Check(format!(
            "expected variance ordering f_dino < f_image < raw, got {:.4} / {:.4} / {:.4}",
            v.f_dino, v.f_image, v.raw
        )));
    }
    Ok(())
}
