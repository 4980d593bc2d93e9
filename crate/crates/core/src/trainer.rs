//! Optimization loop, checkpoints, evaluation sweeps and the two ablation
//! harnesses (guidance layer and task count).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{backprop::GradStore, DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::config::{hash_json, sub_seed};
use crate::degradation::{make_dataset, make_eval_pairs, DegradationKind, DegradationSpec, SamplePair};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::objective::{psnr, ssim, total_loss, DpcConfig, LossBreakdown};
use crate::psf::GatingScores;
use crate::restoration::{Guidance, NetConfig, RestorationModel};

fn default_task_mix() -> Vec<DegradationSpec> {
    vec![
        DegradationSpec::noise(15.0),
        DegradationSpec::noise(25.0),
        DegradationSpec::noise(50.0),
        DegradationSpec::blur(15, 2.0, 3.1),
        DegradationSpec::rain(0.02, 10.0),
        DegradationSpec::haze(1.2, 0.9),
    ]
}

/// Training hyperparameters. Paper-scale runs used batch 8 and patch 160
/// (batch 32 / patch 128 single-task); the defaults here are desk-scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lr_initial: f64,
    pub lr_final: f64,
    /// Step at which the cosine schedule reaches `lr_final`; defaults to `steps`.
    pub lr_decay_steps: Option<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub lambda: f64,
    /// Root of every training random stream. Filled from the top-level seed
    /// when loaded through [`crate::config::Config`].
    pub seed: u64,
    pub task_mix: Vec<DegradationSpec>,
    pub dpc: DpcConfig,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Evaluate every `eval_every` steps (0 = only at the end).
    pub eval_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lr_initial: 2e-4,
            lr_final: 1e-4,
            lr_decay_steps: None,
            steps: 200,
            batch_size: 4,
            patch_size: 64,
            lambda: 1.0,
            seed: 0,
            task_mix: default_task_mix(),
            dpc: DpcConfig::default(),
            grad_clip: Some(1.0),
            eval_every: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::config(format!("train.{k}"), m));
        if self.steps == 0 {
            return bad("steps", "must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.patch_size == 0 {
            return bad("patch_size", "must be >= 1");
        }
        if !(self.lr_initial >= 0.0 && self.lr_final >= 0.0) {
            return bad("lr_initial", "learning rates must be >= 0");
        }
        if self.lr_final > self.lr_initial {
            return bad("lr_final", "must not exceed lr_initial");
        }
        if self.lr_decay_steps == Some(0) {
            return bad("lr_decay_steps", "must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "Adam betas must lie in [0, 1)");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be finite and >= 0");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip", "must be > 0 when set");
            }
        }
        if self.task_mix.is_empty() {
            return bad("task_mix", "must not be empty");
        }
        for (i, s) in self.task_mix.iter().enumerate() {
            s.validate()
                .map_err(|e| Error::config(format!("train.task_mix[{i}]"), e.to_string()))?;
        }
        Ok(())
    }

    /// Cosine decay from `lr_initial` at step 0 to `lr_final` at the decay
    /// step, constant afterwards.
    pub fn lr_at(&self, step: usize) -> f64 {
        let d = self.lr_decay_steps.unwrap_or(self.steps).max(1);
        let t = step.min(d) as f64 / d as f64;
        self.lr_final + 0.5 * (self.lr_initial - self.lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l1: f64,
    pub dpc: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub task: String,
    pub level: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Append-only training log with monotone step indices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    steps: Vec<StepRecord>,
    evals: Vec<EvalRecord>,
}

impl RunLog {
    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn evals(&self) -> &[EvalRecord] {
        &self.evals
    }

    pub fn push_step(&mut self, rec: StepRecord) -> Result<()> {
        if let Some(last) = self.steps.last() {
            if rec.step <= last.step {
                return Err(Error::arg(format!("step {} after step {}", rec.step, last.step)));
            }
        }
        self.steps.push(rec);
        Ok(())
    }

    pub fn push_eval(&mut self, rec: EvalRecord) -> Result<()> {
        if let Some(last) = self.evals.last() {
            if rec.step < last.step {
                return Err(Error::arg(format!("eval at step {} after step {}", rec.step, last.step)));
            }
        }
        self.evals.push(rec);
        Ok(())
    }

    /// Mean total loss over a range of logged steps (by position).
    pub fn mean_total(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.steps[range];
        s.iter().map(|r| r.total).sum::<f64>() / s.len() as f64
    }

    /// Writes `steps.csv` and `evals.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        write_csv(&dir.join("steps.csv"), &self.steps)?;
        write_csv(&dir.join("evals.csv"), &self.evals)
    }
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

/// JSON sidecar written next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub seed: u64,
    pub step: usize,
    pub task_mix: Vec<DegradationSpec>,
    pub net: NetConfig,
    pub train: TrainingConfig,
    pub backbone: BackboneConfig,
    pub guidance_channels: usize,
    pub model_seed: u64,
    pub weights_sha256: String,
}

impl CheckpointMeta {
    pub fn new(
        model: &RestorationModel,
        train: &TrainingConfig,
        backbone: &BackboneConfig,
        step: usize,
        config_hash: Option<String>,
    ) -> Result<Self> {
        let config_hash = match config_hash {
            Some(h) => h,
            None => hash_json(&(model.config(), train, backbone))?,
        };
        Ok(Self {
            config_hash,
            seed: train.seed,
            step,
            task_mix: train.task_mix.clone(),
            net: model.config().clone(),
            train: train.clone(),
            backbone: backbone.clone(),
            guidance_channels: model.guidance_channels(),
            model_seed: model_seed(train.seed),
            weights_sha256: model.params().checksum()?,
        })
    }
}

pub fn model_seed(seed: u64) -> u64 {
    sub_seed(seed, "model")
}

/// Build the freshly initialised model a training run with this config starts from.
pub fn init_model(net: &NetConfig, train: &TrainingConfig, backbone: Option<&Backbone>) -> Result<RestorationModel> {
    let channels = backbone.map_or(0, Backbone::width);
    RestorationModel::new(net, channels, DType::F32, &Device::Cpu, model_seed(train.seed))
}

/// Writes `<stem>.safetensors` and `<stem>.json`; returns the weights path.
pub fn save_checkpoint(model: &RestorationModel, meta: &CheckpointMeta, dir: &Path, stem: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let weights = dir.join(format!("{stem}.safetensors"));
    model.save(&weights)?;
    write_json(&weights.with_extension("json"), meta)?;
    Ok(weights)
}

/// Rebuild a model from a weights file and its JSON sidecar.
pub fn load_checkpoint(weights: &Path) -> Result<(RestorationModel, CheckpointMeta)> {
    let sidecar = weights.with_extension("json");
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let mut model = RestorationModel::new(
        &meta.net,
        meta.guidance_channels,
        DType::F32,
        &Device::Cpu,
        meta.model_seed,
    )?;
    model.load_weights(weights)?;
    Ok((model, meta))
}

fn batch_tensors(pairs: &[SamplePair], device: &Device) -> Result<(Tensor, Tensor)> {
    let clean: Vec<&Image> = pairs.iter().map(|p| &p.clean).collect();
    let degraded: Vec<&Image> = pairs.iter().map(|p| &p.degraded).collect();
    Ok((
        Image::batch_to_tensor(&clean, DType::F32, device)?,
        Image::batch_to_tensor(&degraded, DType::F32, device)?,
    ))
}

fn write_snapshot(dir: &Path, step: usize, loss: LossBreakdown, pairs: &[SamplePair]) -> Result<PathBuf> {
    let snap = dir.join(format!("diverged_step{step}"));
    fs::create_dir_all(&snap).map_err(|e| Error::io(&snap, e))?;
    for (i, p) in pairs.iter().enumerate() {
        p.clean.save_png(&snap.join(format!("{i}_clean.png")))?;
        p.degraded.save_png(&snap.join(format!("{i}_degraded.png")))?;
    }
    let specs: Vec<&DegradationSpec> = pairs.iter().map(|p| &p.spec).collect();
    write_json(&snap.join("snapshot.json"), &serde_json::json!({ "step": step, "loss": loss, "specs": specs }))?;
    Ok(snap)
}

fn clip_gradients(grads: &mut GradStore, vars: &[candle_core::Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for v in vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                let g = g.affine(scale, 0.0)?;
                grads.insert(v.as_tensor(), g);
            }
        }
    }
    Ok(norm)
}

/// Runs `config.steps` Adam updates of `model` on `L1 + λ·DPC` over batches
/// drawn from `dataset`. Data synthesis is serial, so a run is bit-reproducible
/// from `(config, seed)`. A non-finite loss aborts the run after writing the
/// offending batch under `snapshot_dir` (or the system temp dir).
pub fn train(
    config: &TrainingConfig,
    dataset: &mut dyn Iterator<Item = SamplePair>,
    model: &RestorationModel,
    backbone: Option<&Backbone>,
    eval_pairs: &[SamplePair],
    snapshot_dir: Option<&Path>,
) -> Result<RunLog> {
    config.validate()?;
    let guided = model.config().guidance.uses_backbone();
    if (guided || config.lambda > 0.0) && backbone.is_none() {
        return Err(Error::arg("guided model or lambda > 0 requires a backbone"));
    }
    let backbone_sum = backbone.map(Backbone::weight_checksum).transpose()?;
    let vars = model.params().all_vars();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: config.lr_initial,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            weight_decay: 0.0,
        },
    )?;
    let device = model.device().clone();
    let mut log = RunLog::default();

    for step in 0..config.steps {
        let pairs: Vec<SamplePair> = (&mut *dataset).take(config.batch_size).collect();
        if pairs.len() < config.batch_size {
            return Err(Error::Empty("dataset exhausted before training finished".into()));
        }
        let (clean, degraded) = batch_tensors(&pairs, &device)?;
        let taps = if guided {
            Some(backbone.expect("checked above").extract_taps(&degraded)?)
        } else {
            None
        };
        let v = model.forward(&degraded, taps.as_ref())?.image;
        let (loss, parts) = total_loss(&v, &clean, &degraded, config.lambda, &config.dpc, backbone)?;
        if !parts.total.is_finite() {
            let dir = snapshot_dir.map_or_else(std::env::temp_dir, Path::to_path_buf);
            let snapshot = write_snapshot(&dir, step, parts, &pairs)?;
            return Err(Error::Diverged {
                step,
                loss: parts.total,
                snapshot,
            });
        }
        let mut grads = loss.backward()?;
        if let Some(max) = config.grad_clip {
            clip_gradients(&mut grads, &vars, max)?;
        }
        let lr = config.lr_at(step);
        opt.set_learning_rate(lr);
        opt.step(&grads)?;
        log.push_step(StepRecord {
            step,
            l1: parts.l1,
            dpc: parts.dpc,
            total: parts.total,
            lr,
        })?;
        if step % 20 == 0 {
            log::info!("step {step}: total {:.5} (l1 {:.5}, dpc {:.5}) lr {lr:.2e}", parts.total, parts.l1, parts.dpc);
        }
        let last = step + 1 == config.steps;
        let periodic = config.eval_every > 0 && (step + 1) % config.eval_every == 0;
        if !eval_pairs.is_empty() && (last || periodic) {
            for row in evaluate(model, eval_pairs, backbone)?.rows {
                log.push_eval(EvalRecord {
                    step,
                    task: row.task.to_string(),
                    level: row.level,
                    psnr: row.psnr,
                    ssim: row.ssim,
                })?;
            }
        }
    }

    if let (Some(bb), Some(before)) = (backbone, backbone_sum) {
        if bb.weight_checksum()? != before {
            return Err(Error::arg("backbone weights changed during training"));
        }
    }
    Ok(log)
}

/// Mean metrics for one degradation kind and level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub task: DegradationKind,
    pub level: String,
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
    /// Mean gating scores over the evaluated inputs (full fusion gate only).
    pub gating: Option<GatingScores>,
}

impl MetricTable {
    pub fn row(&self, task: DegradationKind) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.task == task)
    }

    /// Count-weighted mean over all rows of one kind.
    pub fn task_mean(&self, task: DegradationKind) -> Option<(f64, f64)> {
        let rows: Vec<&MetricRow> = self.rows.iter().filter(|r| r.task == task).collect();
        let n: usize = rows.iter().map(|r| r.count).sum();
        (n > 0).then(|| {
            let p = rows.iter().map(|r| r.psnr * r.count as f64).sum::<f64>() / n as f64;
            let s = rows.iter().map(|r| r.ssim * r.count as f64).sum::<f64>() / n as f64;
            (p, s)
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.rows)
    }
}

/// Full-image evaluation: mean PSNR/SSIM of the clipped restoration per
/// degradation kind and level, in first-seen order.
pub fn evaluate(model: &RestorationModel, pairs: &[SamplePair], backbone: Option<&Backbone>) -> Result<MetricTable> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut order: Vec<(DegradationKind, String)> = Vec::new();
    let mut acc: BTreeMap<(DegradationKind, String), (usize, f64, f64)> = BTreeMap::new();
    let mut scores = Vec::new();
    let psf = model.config().guidance == Guidance::PsfFull;
    for p in pairs {
        let restored = if psf {
            let bb = backbone.ok_or_else(|| Error::arg("guided model requires a backbone"))?;
            let x = p.degraded.to_tensor(model.dtype(), model.device())?;
            let taps = bb.extract_taps(&x)?;
            let out = model.forward(&x, Some(&taps))?;
            if let Some(s) = &out.scores {
                scores.extend(GatingScores::from_tensor(s)?);
            }
            Image::from_tensor(&out.image.clamp(0.0, 1.0)?)?.remove(0)
        } else {
            model.restore(&p.degraded, backbone)?
        };
        let key = (p.spec.kind, p.spec.level());
        if !acc.contains_key(&key) {
            order.push(key.clone());
        }
        let e = acc.entry(key).or_insert((0, 0.0, 0.0));
        e.0 += 1;
        e.1 += psnr(&restored, &p.clean, 1.0)?;
        e.2 += ssim(&restored, &p.clean)?;
    }
    let rows = order
        .into_iter()
        .map(|key| {
            let (n, ps, ss) = acc[&key];
            MetricRow {
                task: key.0,
                level: key.1,
                count: n,
                psnr: ps / n as f64,
                ssim: ss / n as f64,
            }
        })
        .collect();
    Ok(MetricTable {
        rows,
        gating: (!scores.is_empty()).then(|| GatingScores::mean(&scores)),
    })
}

/// Shared inputs of the ablation harnesses.
pub struct AblationSetup<'a> {
    pub net: NetConfig,
    pub train: TrainingConfig,
    pub backbone: &'a Backbone,
    pub train_images: &'a [Image],
    pub eval_images: &'a [Image],
}

/// Outcome of one ablation training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub guidance: Guidance,
    pub lambda: f64,
    pub steps: usize,
    pub seed: u64,
    pub backbone_calls: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub gating: Option<GatingScores>,
    pub first_loss: f64,
    pub last_loss: f64,
}

impl AblationSetup<'_> {
    fn run(&self, guidance: Guidance, lambda: f64, mix: &[DegradationSpec], eval_spec: &DegradationSpec) -> Result<RunSummary> {
        let net = NetConfig {
            guidance,
            ..self.net.clone()
        };
        let tcfg = TrainingConfig {
            lambda,
            task_mix: mix.to_vec(),
            ..self.train.clone()
        };
        let calls_before = self.backbone.calls();
        let model = init_model(&net, &tcfg, guidance.uses_backbone().then_some(self.backbone))?;
        let mut data = make_dataset(self.train_images, mix, tcfg.patch_size, sub_seed(tcfg.seed, "data"))?;
        let bb = (guidance.uses_backbone() || lambda > 0.0).then_some(self.backbone);
        let log = train(&tcfg, &mut data, &model, bb, &[], None)?;
        let pairs = make_eval_pairs(self.eval_images, std::slice::from_ref(eval_spec), sub_seed(tcfg.seed, "eval"))?;
        let table = evaluate(&model, &pairs, bb)?;
        let (psnr, ssim) = table.task_mean(eval_spec.kind).expect("one row per eval spec");
        Ok(RunSummary {
            guidance,
            lambda,
            steps: tcfg.steps,
            seed: tcfg.seed,
            backbone_calls: self.backbone.calls() - calls_before,
            psnr,
            ssim,
            gating: table.gating,
            first_loss: log.steps()[0].total,
            last_loss: log.steps()[log.steps().len() - 1].total,
        })
    }

    fn spec_of(&self, kind: DegradationKind) -> DegradationSpec {
        self.train
            .task_mix
            .iter()
            .find(|s| s.kind == kind)
            .cloned()
            .unwrap_or_else(|| default_task_mix().into_iter().find(|s| s.kind == kind).expect("every kind has a default"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub variant: String,
    pub shallow: bool,
    pub medium: bool,
    pub deep: bool,
    pub psnr: f64,
    pub ssim: f64,
    pub steps: usize,
    pub seed: u64,
    pub backbone_calls: usize,
}

/// Guidance-layer ablation: V0 (no guidance) and V1–V3 (shallow, medium,
/// deep tap alone), plus the full gated model whose learned scores are
/// reported. Every run shares steps, seed and data and trains with `λ = 0`
/// so that only the guidance path differs. Evaluated on deraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAblation {
    pub eval_task: DegradationKind,
    pub rows: Vec<LayerRow>,
    pub full: RunSummary,
}

impl LayerAblation {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_csv(&dir.join("ablation_layers.csv"), &self.rows)?;
        write_json(&dir.join("ablation_layers.json"), self)
    }
}

pub fn ablation_layers(setup: &AblationSetup) -> Result<LayerAblation> {
    let rain = setup.spec_of(DegradationKind::Rain);
    let mix = setup.train.task_mix.clone();
    let variants = [
        ("V0", Guidance::None),
        ("V1", Guidance::ShallowOnly),
        ("V2", Guidance::MediumOnly),
        ("V3", Guidance::DeepOnly),
    ];
    let mut rows = Vec::new();
    for (name, g) in variants {
        log::info!("layer ablation: training {name}");
        let r = setup.run(g, 0.0, &mix, &rain)?;
        rows.push(LayerRow {
            variant: name.to_string(),
            shallow: g == Guidance::ShallowOnly,
            medium: g == Guidance::MediumOnly,
            deep: g == Guidance::DeepOnly,
            psnr: r.psnr,
            ssim: r.ssim,
            steps: r.steps,
            seed: r.seed,
            backbone_calls: r.backbone_calls,
        });
    }
    log::info!("layer ablation: training the full gated model");
    let full = setup.run(Guidance::PsfFull, 0.0, &mix, &rain)?;
    Ok(LayerAblation {
        eval_task: DegradationKind::Rain,
        rows,
        full,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub tasks: String,
    pub task_count: usize,
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
    pub guided_psnr: f64,
    pub guided_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskAblation {
    pub eval_task: DegradationKind,
    pub rows: Vec<TaskRow>,
    /// The task mix each row trained on.
    pub mixes: Vec<Vec<DegradationSpec>>,
}

impl TaskAblation {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_csv(&dir.join("ablation_tasks.csv"), &self.rows)?;
        write_json(&dir.join("ablation_tasks.json"), self)
    }
}

/// Nested task mixes `{B}`, `{B,N}`, `{B,N,R}`, `{B,N,R,H}`.
pub fn nested_task_mixes(setup: &AblationSetup) -> Vec<Vec<DegradationSpec>> {
    let order = [
        DegradationKind::Blur,
        DegradationKind::Noise,
        DegradationKind::Rain,
        DegradationKind::Haze,
    ];
    (1..=4).map(|n| order[..n].iter().map(|&k| setup.spec_of(k)).collect()).collect()
}

/// Task-count ablation: for each nested mix, trains the unguided baseline
/// (`λ = 0`) and the full guided model (configured `λ`) and reports the
/// deblurring metrics.
pub fn ablation_task_count(setup: &AblationSetup) -> Result<TaskAblation> {
    let blur = setup.spec_of(DegradationKind::Blur);
    let mixes = nested_task_mixes(setup);
    let letters = ["B", "N", "R", "H"];
    let mut rows = Vec::new();
    for (i, mix) in mixes.iter().enumerate() {
        let label = format!("{} ({})", i + 1, letters[..=i].join(" + "));
        log::info!("task ablation: row {label}");
        let base = setup.run(Guidance::None, 0.0, mix, &blur)?;
        let guided = setup.run(Guidance::PsfFull, setup.train.lambda, mix, &blur)?;
        rows.push(TaskRow {
            tasks: label,
            task_count: i + 1,
            baseline_psnr: base.psnr,
            baseline_ssim: base.ssim,
            guided_psnr: guided.psnr,
            guided_ssim: guided.ssim,
        });
    }
    Ok(TaskAblation {
        eval_task: DegradationKind::Blur,
        rows,
        mixes,
    })
}
