//! Run orchestration: config parsing, the training loop, probe evaluation,
//! and cross-run comparison tables.

use crate::dataset::{
    generate_dataset_from, load_dataset, sample_frame_batch, sample_transition_batch, Dataset,
};
use crate::error::{Error, Result};
use crate::fsio::atomic_write;
use crate::loss::{loss_supervised, total_loss, LossConfig};
use crate::metrics::{
    importance_matrix, slot_compactness, slot_modularity, MetricsReport, Provenance, SeedEcho,
    TargetR2, CONVENTIONS_NOTE,
};
use crate::model::{
    init_model, load_checkpoint, load_model, save_checkpoint, ArchConfig, ModelOptions,
    ModelParams,
};
use crate::optim::{AdamHyper, AdamState};
use crate::probe::{build_probe_dataset, fit_probe, slot_accuracy, LinearProbe};
use crate::rng::{counter_rng, Stream, PROBE_SPLIT_COUNTER};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::world::WorldConfig;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Independent seeds for the three random-number streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedConfig {
    pub data: u64,
    pub init: u64,
    pub sampling: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig { data: 17, init: 42, sampling: 1234 }
    }
}

/// Which model/objective a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "scn")]
    Scn,
    #[serde(rename = "scn_loss1only")]
    ScnLoss1Only,
    #[serde(rename = "random-cnn")]
    RandomCnn,
    #[serde(rename = "supervised")]
    Supervised,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Scn => "scn",
            Variant::ScnLoss1Only => "scn_loss1only",
            Variant::RandomCnn => "random-cnn",
            Variant::Supervised => "supervised",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "scn" => Some(Variant::Scn),
            "scn_loss1only" => Some(Variant::ScnLoss1Only),
            "random-cnn" => Some(Variant::RandomCnn),
            "supervised" => Some(Variant::Supervised),
            _ => None,
        }
    }

    fn is_contrastive(&self) -> bool {
        matches!(self, Variant::Scn | Variant::ScnLoss1Only)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Convolution-stack preset; input extents always come from the world config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchPreset {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "reduced")]
    Reduced,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub k: usize,
    pub c: usize,
    pub d: usize,
    pub arch: ArchPreset,
    pub separate_scorers: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { k: 3, c: 16, d: 32, arch: ArchPreset::Base, separate_scorers: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub steps: u64,
    pub batch: usize,
    #[serde(flatten)]
    pub adam: AdamHyper,
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Scn,
            steps: 1_500,
            batch: 128,
            adam: AdamHyper::default(),
            checkpoint_interval: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub frames: usize,
    pub split: f64,
    pub ridge: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { frames: 5000, split: 0.8, ridge: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathConfig {
    pub data: PathBuf,
    pub out: PathBuf,
}

impl Default for PathConfig {
    fn default() -> Self {
        PathConfig { data: "data".into(), out: "out".into() }
    }
}

/// Everything a run needs; parseable from key=value text and embedded as JSON
/// in run.json and metrics.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seeds: SeedConfig,
    pub world: WorldConfig,
    pub episodes: usize,
    pub probe_episodes: usize,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub paths: PathConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seeds = SeedConfig::default();
        let mut world = WorldConfig::default();
        world.seed = seeds.data;
        RunConfig {
            seeds,
            world,
            episodes: 200,
            probe_episodes: 50,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            paths: PathConfig::default(),
        }
    }
}

impl RunConfig {
    /// The data seed owns the world; keep the copies in sync.
    fn normalize(mut self) -> Self {
        self.world.seed = self.seeds.data;
        self
    }

    /// Model architecture at this run's frame size.
    pub fn arch(&self) -> ArchConfig {
        let m = &self.model;
        let mut arch = match m.arch {
            ArchPreset::Base => ArchConfig::base(m.k, m.c, m.d),
            ArchPreset::Reduced => ArchConfig::reduced(m.k, m.c, m.d),
        };
        arch.in_h = self.world.height;
        arch.in_w = self.world.width;
        arch
    }

    /// λ actually trained with: the ablation variant pins it to zero.
    pub fn effective_lambda(&self) -> f64 {
        match self.train.variant {
            Variant::ScnLoss1Only => 0.0,
            _ => self.loss.lambda_diversity,
        }
    }

    pub fn train_data_dir(&self) -> PathBuf {
        self.paths.data.join("train")
    }

    pub fn probe_data_dir(&self) -> PathBuf {
        self.paths.data.join("probe")
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.loss.validate()?;
        self.arch().shapes()?;
        if self.episodes == 0 || self.probe_episodes == 0 {
            return Err(Error::Argument("world.episodes and world.probe_episodes must be ≥ 1".into()));
        }
        if self.train.batch == 0 {
            return Err(Error::Argument("train.batch must be ≥ 1".into()));
        }
        let a = &self.train.adam;
        if !(a.lr.is_finite() && a.lr > 0.0)
            || !(0.0..1.0).contains(&a.beta1)
            || !(0.0..1.0).contains(&a.beta2)
            || !(a.eps.is_finite() && a.eps > 0.0)
        {
            return Err(Error::Argument(format!(
                "optimizer hyperparameters out of range: lr {}, beta1 {}, beta2 {}, eps {}",
                a.lr, a.beta1, a.beta2, a.eps
            )));
        }
        if self.probe.frames < 2 {
            return Err(Error::Argument("probe.frames must be ≥ 2".into()));
        }
        if !(self.probe.split > 0.0 && self.probe.split < 1.0) {
            return Err(Error::Argument(format!(
                "probe.split must lie strictly between 0 and 1, got {}",
                self.probe.split
            )));
        }
        if !self.probe.ridge.is_finite() || self.probe.ridge < 0.0 {
            return Err(Error::Argument(format!(
                "probe.ridge must be non-negative and finite, got {}",
                self.probe.ridge
            )));
        }
        if self.train.variant == Variant::Supervised && self.model.k != self.world.num_objects {
            return Err(Error::Argument(format!(
                "supervised training needs model.k == world.objects, got {} vs {}",
                self.model.k, self.world.num_objects
            )));
        }
        Ok(())
    }
}

// ---- key=value config parsing ----

fn parse_color(hex: &str) -> Option<[u8; 3]> {
    let hex = hex.trim();
    if hex.len() != 6 {
        return None;
    }
    let byte = |i: usize| u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).ok();
    Some([byte(0)?, byte(1)?, byte(2)?])
}

/// Parses the flat `key = value` config dialect (`#` starts a comment,
/// unknown or repeated keys are rejected) into a validated-shape `RunConfig`.
/// Call `validate()` before running.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen: HashSet<String> = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = match content.split_once('=') {
            Some((k, v)) => (k.trim().to_string(), v.trim().to_string()),
            None => {
                return Err(Error::Config {
                    line,
                    key: content.to_string(),
                    msg: "expected `key = value`".into(),
                })
            }
        };
        if !seen.insert(key.clone()) {
            return Err(Error::Config { line, key, msg: "key set more than once".into() });
        }
        let bad = |msg: String| Error::Config { line, key: key.clone(), msg };
        macro_rules! num {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|e| bad(format!("bad value `{value}`: {e}")))
            };
        }
        let parse_bool = || match value.as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(bad(format!("expected true or false, got `{value}`"))),
        };
        match key.as_str() {
            "seed.data" => cfg.seeds.data = num!(u64)?,
            "seed.init" => cfg.seeds.init = num!(u64)?,
            "seed.sampling" => cfg.seeds.sampling = num!(u64)?,
            "world.width" => cfg.world.width = num!(usize)?,
            "world.height" => cfg.world.height = num!(usize)?,
            "world.objects" => cfg.world.num_objects = num!(usize)?,
            "world.radius" => cfg.world.sprite_radius = num!(f64)?,
            "world.speed_min" => cfg.world.speed_min = num!(f64)?,
            "world.speed_max" => cfg.world.speed_max = num!(f64)?,
            "world.episode_length" => cfg.world.episode_length = num!(usize)?,
            "world.episodes" => cfg.episodes = num!(usize)?,
            "world.probe_episodes" => cfg.probe_episodes = num!(usize)?,
            "world.palette" => {
                cfg.world.palette = value
                    .split(',')
                    .map(|c| parse_color(c).ok_or_else(|| bad(format!("bad color `{}` (want rrggbb hex)", c.trim()))))
                    .collect::<Result<Vec<_>>>()?;
            }
            "world.background" => {
                cfg.world.background =
                    parse_color(&value).ok_or_else(|| bad(format!("bad color `{value}` (want rrggbb hex)")))?;
            }
            "model.k" => cfg.model.k = num!(usize)?,
            "model.c" => cfg.model.c = num!(usize)?,
            "model.d" => cfg.model.d = num!(usize)?,
            "model.arch" => {
                cfg.model.arch = match value.as_str() {
                    "base" => ArchPreset::Base,
                    "reduced" => ArchPreset::Reduced,
                    _ => return Err(bad(format!("unknown architecture `{value}` (base or reduced)"))),
                }
            }
            "model.separate_scorers" => cfg.model.separate_scorers = parse_bool()?,
            "loss.lambda" => cfg.loss.lambda_diversity = num!(f64)?,
            "train.variant" => {
                cfg.train.variant = Variant::parse(&value).ok_or_else(|| {
                    bad(format!("unknown variant `{value}` (scn, scn_loss1only, random-cnn, supervised)"))
                })?
            }
            "train.steps" => cfg.train.steps = num!(u64)?,
            "train.batch" => cfg.train.batch = num!(usize)?,
            "train.lr" => cfg.train.adam.lr = num!(f64)?,
            "train.beta1" => cfg.train.adam.beta1 = num!(f64)?,
            "train.beta2" => cfg.train.adam.beta2 = num!(f64)?,
            "train.eps" => cfg.train.adam.eps = num!(f64)?,
            "train.checkpoint_interval" => cfg.train.checkpoint_interval = num!(u64)?,
            "probe.frames" => cfg.probe.frames = num!(usize)?,
            "probe.split" => cfg.probe.split = num!(f64)?,
            "probe.ridge" => cfg.probe.ridge = num!(f64)?,
            "paths.data" => cfg.paths.data = PathBuf::from(&value),
            "paths.out" => cfg.paths.out = PathBuf::from(&value),
            _ => return Err(Error::Config { line, key, msg: "unknown key".into() }),
        }
    }
    Ok(cfg.normalize())
}

/// Reads a config from either dialect: key=value text, a bare JSON config, or
/// a run.json record (whose embedded config is extracted).
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::format(path.display().to_string(), "open", e.to_string()))?;
    if text.trim_start().starts_with('{') {
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::format(path.display().to_string(), format!("line {}", e.line()), e.to_string()))?;
        let config_value = if value.get("config").is_some() { &value["config"] } else { &value };
        let cfg: RunConfig = serde_json::from_value(config_value.clone())
            .map_err(|e| Error::format(path.display().to_string(), "config", e.to_string()))?;
        Ok(cfg.normalize())
    } else {
        parse_config(&text)
    }
}

// ---- gen ----

/// Writes the training and held-out probe datasets; returns the manifest echo.
pub fn cmd_gen(config: &RunConfig) -> Result<String> {
    config.validate()?;
    let train = generate_dataset_from(&config.world, 0, config.episodes, &config.train_data_dir())?;
    let probe = generate_dataset_from(
        &config.world,
        config.episodes as u64,
        config.probe_episodes,
        &config.probe_data_dir(),
    )?;
    let echo = serde_json::json!({ "train": train, "probe": probe });
    let mut s = serde_json::to_string_pretty(&echo).expect("manifests serialize");
    s.push('\n');
    Ok(s)
}

// ---- train ----

/// Summary of the last update's loss values.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossSummary {
    pub total: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saliency: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diversity: Option<f32>,
}

/// What a completed (or resumed) training run recorded; serialized as
/// run.json. The per-step series lives in `losses_file`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub variant: String,
    pub completed_steps: u64,
    pub wall_time_seconds: f64,
    pub final_checkpoint: String,
    pub losses_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<LossSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone, Copy)]
struct LossRow {
    step: u64,
    total: f32,
    saliency: f32,
    diversity: f32,
}

fn losses_header(variant: Variant) -> &'static str {
    if variant.is_contrastive() {
        "step,total,saliency,diversity"
    } else {
        "step,total"
    }
}

fn losses_csv(variant: Variant, rows: &[LossRow]) -> String {
    let mut out = String::from(losses_header(variant));
    out.push('\n');
    for r in rows {
        if variant.is_contrastive() {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.total, r.saliency, r.diversity));
        } else {
            out.push_str(&format!("{},{}\n", r.step, r.total));
        }
    }
    out
}

fn flush_losses(out_dir: &Path, variant: Variant, rows: &[LossRow]) -> Result<()> {
    atomic_write(&out_dir.join("losses.csv"), losses_csv(variant, rows).as_bytes())
}

/// Re-reads rows logged before an interruption, keeping steps ≤ `up_to`.
fn reload_losses(path: &Path, variant: Variant, up_to: u64) -> Result<Vec<LossRow>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let path_str = path.display().to_string();
    let mut lines = text.lines();
    let header = losses_header(variant);
    if lines.next() != Some(header) {
        return Err(Error::format(path_str, "line 1", format!("expected header `{header}`")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let want = if variant.is_contrastive() { 4 } else { 2 };
        let parsed: Option<LossRow> = (fields.len() == want)
            .then(|| {
                Some(LossRow {
                    step: fields[0].parse().ok()?,
                    total: fields[1].parse().ok()?,
                    saliency: if want == 4 { fields[2].parse().ok()? } else { 0.0 },
                    diversity: if want == 4 { fields[3].parse().ok()? } else { 0.0 },
                })
            })
            .flatten();
        match parsed {
            Some(row) if row.step <= up_to => rows.push(row),
            Some(_) => {}
            None => {
                return Err(Error::format(path_str, format!("line {}", i + 2), format!("bad row `{line}`")))
            }
        }
    }
    Ok(rows)
}

fn check_dataset_matches(ds: &Dataset, config: &RunConfig) -> Result<()> {
    let m = &ds.manifest;
    if (m.width, m.height, m.channels) != (config.world.width, config.world.height, 3) {
        return Err(Error::Argument(format!(
            "dataset frames are {}×{}×{}, config wants {}×{}×3",
            m.channels, m.height, m.width, config.world.height, config.world.width
        )));
    }
    if m.objects.len() != config.world.num_objects {
        return Err(Error::Argument(format!(
            "dataset has {} objects, config wants {}",
            m.objects.len(),
            config.world.num_objects
        )));
    }
    Ok(())
}

/// Normalized [b, p, 2] coordinate targets for the given frames.
fn frame_targets(ds: &Dataset, indices: &[usize]) -> Tensor<f32> {
    let p = ds.num_objects();
    let (w, h) = (ds.manifest.width as f64, ds.manifest.height as f64);
    let mut t = Tensor::zeros(vec![indices.len(), p, 2]);
    for (row, &i) in indices.iter().enumerate() {
        for obj in 0..p {
            let [x, y] = ds.label(i, obj);
            t.data_mut()[(row * p + obj) * 2] = (x / w) as f32;
            t.data_mut()[(row * p + obj) * 2 + 1] = (y / h) as f32;
        }
    }
    t
}

/// Trains (or, for random-cnn, merely initializes) a model, writing losses,
/// checkpoints, and run.json under the config's out directory.
pub fn cmd_train(config: &RunConfig, resume: Option<&Path>) -> Result<RunRecord> {
    config.validate()?;
    let started = Instant::now();
    let variant = config.train.variant;
    let arch = config.arch();
    let out_dir = &config.paths.out;
    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;

    let ds = load_dataset(&config.train_data_dir())?;
    check_dataset_matches(&ds, config)?;

    let total_steps = if variant == Variant::RandomCnn { 0 } else { config.train.steps };
    let options = ModelOptions {
        separate_scorers: config.model.separate_scorers,
        with_readout: variant == Variant::Supervised,
    };
    let (mut params, mut adam, start_step, mut rows) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.variant != variant.as_str() {
                return Err(Error::Argument(format!(
                    "checkpoint was trained as `{}`, config says `{variant}`",
                    ckpt.variant
                )));
            }
            if ckpt.arch != arch {
                return Err(Error::format(
                    path.display().to_string(),
                    "header",
                    "checkpoint architecture differs from the config's".to_string(),
                ));
            }
            let adam = ckpt.adam.ok_or_else(|| {
                Error::format(
                    path.display().to_string(),
                    "header",
                    "checkpoint carries no optimizer state; cannot resume".to_string(),
                )
            })?;
            let rows = reload_losses(&out_dir.join("losses.csv"), variant, ckpt.step)?;
            (ckpt.params, adam, ckpt.step, rows)
        }
        None => {
            let mut rng = counter_rng(config.seeds.init, Stream::Init, 0);
            let params: ModelParams<f32> = init_model(&arch, options, &mut rng)?;
            let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.numel()).collect();
            let adam = AdamState::new(&sizes, config.train.adam);
            (params, adam, 0u64, Vec::new())
        }
    };

    let loss_cfg = LossConfig { lambda_diversity: config.effective_lambda() };
    let interval = config.train.checkpoint_interval;
    for step in start_step..total_steps {
        let mut rng = counter_rng(config.seeds.sampling, Stream::Sampling, step);
        let mut tape = Tape::<f32>::new();
        let ids = load_model(&mut tape, &params, true);
        let (root, row) = if variant.is_contrastive() {
            let batch = sample_transition_batch::<f32, _>(&ds, config.train.batch, &mut rng)?;
            let tl = total_loss(&mut tape, &arch, &ids, &batch, &loss_cfg)?;
            let row = LossRow {
                step: step + 1,
                total: tape.value_scalar(tl.total)?,
                saliency: tape.value_scalar(tl.saliency)?,
                diversity: tape.value_scalar(tl.diversity)?,
            };
            (tl.total, row)
        } else {
            let (frames, indices) = sample_frame_batch::<f32, _>(&ds, config.train.batch, &mut rng)?;
            let targets = frame_targets(&ds, &indices);
            let l = loss_supervised(&mut tape, &arch, &ids, &frames, &targets)?;
            let row = LossRow {
                step: step + 1,
                total: tape.value_scalar(l)?,
                saliency: 0.0,
                diversity: 0.0,
            };
            (l, row)
        };
        if !row.total.is_finite() {
            flush_losses(out_dir, variant, &rows)?;
            return Err(Error::Numeric(format!(
                "loss became non-finite ({}) at step {}; aborting",
                row.total,
                step + 1
            )));
        }
        tape.backward(root)?;
        let ordered = ids.ordered();
        let mut tensors = params.tensors_mut();
        for (i, id) in ordered.iter().enumerate() {
            let g = match tape.grad(*id) {
                Some(g) => g.to_vec(),
                // Parameters outside this variant's objective stay put.
                None => vec![0.0; tensors[i].numel()],
            };
            tensors[i].set_grad(g)?;
        }
        adam.adam_step(&mut tensors)?;
        rows.push(row);
        if interval > 0 && (step + 1) % interval == 0 && step + 1 < total_steps {
            save_checkpoint(
                &ckpt_dir.join(format!("step_{}.scn", step + 1)),
                variant.as_str(),
                &arch,
                &params,
                step + 1,
                Some(&adam),
            )?;
            flush_losses(out_dir, variant, &rows)?;
        }
    }

    // A resume target already past the configured step count keeps its count.
    let completed = total_steps.max(start_step);
    let final_rel = "checkpoints/final.scn";
    save_checkpoint(&out_dir.join(final_rel), variant.as_str(), &arch, &params, completed, Some(&adam))?;
    flush_losses(out_dir, variant, &rows)?;
    let final_loss = rows.last().map(|r| LossSummary {
        total: r.total,
        saliency: variant.is_contrastive().then_some(r.saliency),
        diversity: variant.is_contrastive().then_some(r.diversity),
    });
    let record = RunRecord {
        config: config.clone(),
        variant: variant.as_str().to_string(),
        completed_steps: completed,
        wall_time_seconds: started.elapsed().as_secs_f64(),
        final_checkpoint: final_rel.to_string(),
        losses_file: "losses.csv".to_string(),
        final_loss,
        metrics: None,
    };
    write_run_record(out_dir, &record)?;
    Ok(record)
}

fn write_run_record(out_dir: &Path, record: &RunRecord) -> Result<()> {
    let mut json = serde_json::to_string_pretty(record).expect("record serializes");
    json.push('\n');
    atomic_write(&out_dir.join("run.json"), json.as_bytes())
}

// ---- probe ----

/// Evaluates a checkpoint on a labeled dataset: fits linear probes, computes
/// accuracy/compactness/modularity, writes metrics.json and metrics.csv under
/// `out_dir`, and fills run.json's metrics field when one is present.
pub fn cmd_probe(
    checkpoint_path: &Path,
    data_dir: &Path,
    config: &RunConfig,
    out_dir: &Path,
) -> Result<MetricsReport> {
    config.validate()?;
    let ckpt = load_checkpoint(checkpoint_path)?;
    let arch = config.arch();
    if ckpt.arch != arch {
        return Err(Error::format(
            checkpoint_path.display().to_string(),
            "header",
            format!(
                "checkpoint architecture (k={}, c={}, d={}, input {}×{}) differs from config (k={}, c={}, d={}, input {}×{})",
                ckpt.arch.k, ckpt.arch.c, ckpt.arch.d, ckpt.arch.in_h, ckpt.arch.in_w,
                arch.k, arch.c, arch.d, arch.in_h, arch.in_w
            ),
        ));
    }
    let ds = load_dataset(data_dir)?;
    check_dataset_matches(&ds, config)?;
    let mut rng = counter_rng(config.seeds.sampling, Stream::Sampling, PROBE_SPLIT_COUNTER);
    let pd = build_probe_dataset(&ds, &arch, &ckpt.params, config.probe.frames, config.probe.split, &mut rng)?;
    let probes: Vec<LinearProbe> = (0..pd.descriptors.len())
        .map(|t| fit_probe(&pd, t, config.probe.ridge))
        .collect::<Result<_>>()?;
    let acc = slot_accuracy(&pd, &probes)?;
    let object_map: Vec<usize> = (0..pd.descriptors.len()).map(|t| t / 2).collect();
    let imp = importance_matrix(&probes, arch.k, arch.d, &object_map)?;
    let compactness = slot_compactness(&imp);
    let modularity = slot_modularity(&imp);

    let mut degenerate_flags: Vec<String> = Vec::new();
    for desc in &acc.skipped {
        degenerate_flags.push(format!("target {desc} constant on the test split; excluded from accuracy"));
    }
    for desc in &imp.degenerate_targets {
        degenerate_flags.push(format!("probe for {desc} has all-zero weights; importance row set uniform"));
    }
    if let Some(m) = &modularity {
        for &j in &m.degenerate_slots {
            degenerate_flags.push(format!("slot {j} carries no importance mass; column scored as uniform"));
        }
    }

    let report = MetricsReport {
        r2_per_target: acc
            .per_target
            .iter()
            .map(|(d, r2)| TargetR2 { object: d.object.clone(), coord: d.coord.to_string(), r2: *r2 })
            .collect(),
        slot_accuracy_mean: acc.mean,
        compactness,
        modularity: modularity.map(|m| m.value),
        degenerate_flags,
        config: serde_json::to_value(config).expect("config serializes"),
        conventions: CONVENTIONS_NOTE.to_string(),
        provenance: Provenance {
            checkpoint: checkpoint_path.display().to_string(),
            dataset: data_dir.display().to_string(),
            seeds: SeedEcho {
                data: config.seeds.data,
                init: config.seeds.init,
                sampling: config.seeds.sampling,
            },
        },
    };
    std::fs::create_dir_all(out_dir)?;
    atomic_write(&out_dir.join("metrics.json"), report.to_json().as_bytes())?;
    atomic_write(&out_dir.join("metrics.csv"), report.to_csv().as_bytes())?;
    let run_json = out_dir.join("run.json");
    if run_json.exists() {
        let text = std::fs::read_to_string(&run_json)?;
        if let Ok(mut record) = serde_json::from_str::<RunRecord>(&text) {
            record.metrics = Some(report.clone());
            write_run_record(out_dir, &record)?;
        }
    }
    Ok(report)
}

// ---- report ----

const VARIANT_COLUMN_ORDER: [&str; 4] = ["random-cnn", "scn", "scn_loss1only", "supervised"];

/// One run's metrics plus its identifying variant label.
struct RunColumn {
    label: String,
    variant_rank: usize,
    input_rank: usize,
    report: serde_json::Value,
}

/// Builds the cross-run comparison table (CSV) from completed run
/// directories, columns in fixed variant order, values copied byte-for-byte
/// from each metrics.json.
pub fn cmd_report(dirs: &[PathBuf]) -> Result<String> {
    if dirs.is_empty() {
        return Err(Error::Argument("report needs at least one run directory".into()));
    }
    let mut columns = Vec::new();
    for (input_rank, dir) in dirs.iter().enumerate() {
        let path = dir.join("metrics.json");
        let text = std::fs::read(&path).map_err(|e| {
            Error::format(path.display().to_string(), "open", format!("missing metrics report: {e}"))
        })?;
        let report: serde_json::Value = serde_json::from_slice(&text)
            .map_err(|e| Error::format(path.display().to_string(), "json", e.to_string()))?;
        let variant = report
            .get("config")
            .and_then(|c| c.get("train"))
            .and_then(|t| t.get("variant"))
            .and_then(|v| v.as_str())
            .unwrap_or("unknown")
            .to_string();
        let variant_rank = VARIANT_COLUMN_ORDER
            .iter()
            .position(|v| *v == variant)
            .unwrap_or(VARIANT_COLUMN_ORDER.len());
        columns.push(RunColumn { label: variant, variant_rank, input_rank, report });
    }
    columns.sort_by_key(|c| (c.variant_rank, c.input_rank));
    let mut labels: Vec<String> = columns.iter().map(|c| c.label.clone()).collect();
    // Disambiguate repeated variants by their input directory name.
    for i in 0..labels.len() {
        if labels.iter().filter(|l| **l == columns[i].label).count() > 1 {
            let dir = &dirs[columns[i].input_rank];
            let base = dir.file_name().map(|n| n.to_string_lossy().into_owned());
            labels[i] = format!("{}({})", columns[i].label, base.unwrap_or_default());
        }
    }

    // Row order: the scalar metrics, then per-target rows as first seen.
    let mut metric_rows: Vec<String> =
        vec!["slot_accuracy_mean".into(), "compactness".into(), "modularity".into()];
    for c in &columns {
        if let Some(targets) = c.report.get("r2_per_target").and_then(|v| v.as_array()) {
            for t in targets {
                if let (Some(obj), Some(coord)) = (
                    t.get("object").and_then(|v| v.as_str()),
                    t.get("coord").and_then(|v| v.as_str()),
                ) {
                    let row = format!("r2.{obj}.{coord}");
                    if !metric_rows.contains(&row) {
                        metric_rows.push(row);
                    }
                }
            }
        }
    }

    let cell = |c: &RunColumn, metric: &str| -> String {
        let value = if let Some(rest) = metric.strip_prefix("r2.") {
            let (obj, coord) = rest.split_once('.').unwrap_or((rest, ""));
            c.report
                .get("r2_per_target")
                .and_then(|v| v.as_array())
                .and_then(|targets| {
                    targets.iter().find(|t| {
                        t.get("object").and_then(|v| v.as_str()) == Some(obj)
                            && t.get("coord").and_then(|v| v.as_str()) == Some(coord)
                    })
                })
                .and_then(|t| t.get("r2"))
        } else {
            c.report.get(metric)
        };
        match value {
            Some(v) if !v.is_null() => serde_json::to_string(v).expect("serializable cell"),
            _ => String::new(),
        }
    };

    let mut out = String::from("metric");
    for label in &labels {
        out.push(',');
        out.push_str(label);
    }
    out.push('\n');
    for metric in &metric_rows {
        let cells: Vec<String> = columns.iter().map(|c| cell(c, metric)).collect();
        if cells.iter().all(|c| c.is_empty()) {
            continue;
        }
        out.push_str(metric);
        for c in &cells {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
    }

    // Advisory ablation delta when both contrastive variants are present.
    let mean_of = |name: &str| -> Option<f64> {
        columns
            .iter()
            .find(|c| c.label == name)
            .and_then(|c| c.report.get("slot_accuracy_mean"))
            .and_then(|v| v.as_f64())
    };
    if let (Some(full), Some(ablated)) = (mean_of("scn"), mean_of("scn_loss1only")) {
        out.push_str(&format!(
            "# advisory: slot_accuracy_mean delta (scn − scn_loss1only) = {}\n",
            full - ablated
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    /// A 16×16 single-object world that trains in milliseconds.
    fn tiny_config(root: &Path) -> RunConfig {
        let text = format!(
            "world.width = 16\nworld.height = 16\nworld.objects = 1\nworld.radius = 3\n\
             world.speed_min = 1\nworld.speed_max = 2\nworld.episode_length = 6\n\
             world.episodes = 2\nworld.probe_episodes = 2\nworld.palette = ff4040\n\
             model.k = 2\nmodel.c = 2\nmodel.d = 4\nmodel.arch = reduced\n\
             train.steps = 3\ntrain.batch = 2\ntrain.checkpoint_interval = 2\n\
             probe.frames = 10\nprobe.split = 0.8\nprobe.ridge = 0.0001\n\
             paths.data = {0}/data\npaths.out = {0}/out\n",
            root.display()
        );
        parse_config(&text).unwrap()
    }

    #[test]
    fn defaults_parse_from_empty_text_and_round_trip_as_json() {
        let cfg = parse_config("# only a comment\n\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.seeds, SeedConfig { data: 17, init: 42, sampling: 1234 });
        assert_eq!(cfg.world.seed, 17);
        assert_eq!((cfg.episodes, cfg.probe_episodes), (200, 50));
        assert_eq!((cfg.train.steps, cfg.train.batch), (1_500, 128));
        assert_eq!(cfg.model, ModelConfig { k: 3, c: 16, d: 32, arch: ArchPreset::Base, separate_scorers: true });
        cfg.validate().unwrap();

        let json = serde_json::to_value(&cfg).unwrap();
        let back: RunConfig = serde_json::from_value(json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn parser_rejects_unknown_duplicate_and_malformed_lines() {
        let unknown = parse_config("model.q = 3\n").unwrap_err();
        match unknown {
            Error::Config { line, key, .. } => {
                assert_eq!(line, 1);
                assert_eq!(key, "model.q");
            }
            other => panic!("{other}"),
        }
        let dup = parse_config("model.k = 2\nmodel.k = 3\n").unwrap_err();
        assert!(matches!(dup, Error::Config { line: 2, .. }), "{dup}");
        assert!(parse_config("model.k\n").is_err());
        assert!(parse_config("model.k = owl\n").is_err());
        // Comments are allowed anywhere, including after values.
        let cfg = parse_config("model.k = 4 # four slots\n").unwrap();
        assert_eq!(cfg.model.k, 4);
    }

    #[test]
    fn palette_parsing_and_world_validation() {
        let cfg = parse_config("world.objects = 2\nworld.palette = FF0000,00ff00\n").unwrap();
        assert_eq!(cfg.world.palette, vec![[255, 0, 0], [0, 255, 0]]);
        assert!(parse_config("world.palette = ff00\n").is_err(), "short hex");
        assert!(parse_config("world.palette = ggff00\n").is_err(), "bad digit");

        let dup = parse_config("world.objects = 2\nworld.palette = ff0000,ff0000\n").unwrap();
        let err = dup.validate().unwrap_err();
        assert!(err.to_string().contains("palette"), "{err}");
    }

    #[test]
    fn variant_rules() {
        for (s, v) in [
            ("scn", Variant::Scn),
            ("scn_loss1only", Variant::ScnLoss1Only),
            ("random-cnn", Variant::RandomCnn),
            ("supervised", Variant::Supervised),
        ] {
            let cfg = parse_config(&format!("train.variant = {s}\n")).unwrap();
            assert_eq!(cfg.train.variant, v);
        }
        assert!(parse_config("train.variant = vae\n").is_err());

        let mut cfg = RunConfig::default();
        cfg.train.variant = Variant::Supervised;
        cfg.model.k = 2; // world has 3 objects
        assert!(cfg.validate().is_err());

        cfg = RunConfig::default();
        cfg.train.variant = Variant::ScnLoss1Only;
        cfg.loss.lambda_diversity = 0.5;
        assert_eq!(cfg.effective_lambda(), 0.0);
        cfg.train.variant = Variant::Scn;
        assert_eq!(cfg.effective_lambda(), 0.5);
    }

    #[test]
    fn gen_writes_continuing_episode_regions_and_echoes_manifests() {
        let dir = TempDir::new().unwrap();
        let cfg = tiny_config(dir.path());
        let echo = cmd_gen(&cfg).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&echo).unwrap();
        assert_eq!(parsed["train"]["frame_count"], 12);
        assert_eq!(parsed["train"]["episodes"], serde_json::json!([0, 6]));
        assert_eq!(parsed["probe"]["frame_count"], 12);

        let train = load_dataset(&cfg.train_data_dir()).unwrap();
        let probe = load_dataset(&cfg.probe_data_dir()).unwrap();
        assert_ne!(
            train.frame_bytes(0),
            probe.frame_bytes(0),
            "probe episodes are held out, not repeats"
        );
    }

    #[test]
    fn random_cnn_checkpoint_equals_initialization() {
        let dir = TempDir::new().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.train.variant = Variant::RandomCnn;
        cfg.train.steps = 50;
        cmd_gen(&cfg).unwrap();
        let record = cmd_train(&cfg, None).unwrap();
        assert_eq!(record.completed_steps, 0);
        assert!(record.final_loss.is_none());

        let ckpt = load_checkpoint(&cfg.paths.out.join("checkpoints/final.scn")).unwrap();
        let mut rng = counter_rng(cfg.seeds.init, Stream::Init, 0);
        let fresh: ModelParams<f32> = init_model(&cfg.arch(), ModelOptions::default(), &mut rng).unwrap();
        for ((name, a), (_, b)) in ckpt.params.named_tensors().iter().zip(fresh.named_tensors()) {
            assert_eq!(a.data(), b.data(), "{name}");
        }
        let losses = std::fs::read_to_string(cfg.paths.out.join("losses.csv")).unwrap();
        assert_eq!(losses, "step,total\n");
    }

    #[test]
    fn scn_training_logs_checkpoints_and_is_deterministic() {
        let dir = TempDir::new().unwrap();
        let cfg = tiny_config(dir.path());
        cmd_gen(&cfg).unwrap();
        let record = cmd_train(&cfg, None).unwrap();
        assert_eq!(record.completed_steps, 3);
        let summary = record.final_loss.unwrap();
        assert!(summary.saliency.is_some() && summary.diversity.is_some());

        let out = &cfg.paths.out;
        assert!(out.join("checkpoints/step_2.scn").exists());
        assert!(out.join("checkpoints/final.scn").exists());
        let losses = std::fs::read_to_string(out.join("losses.csv")).unwrap();
        let lines: Vec<&str> = losses.lines().collect();
        assert_eq!(lines[0], "step,total,saliency,diversity");
        assert_eq!(lines.len(), 4, "one row per completed step");
        assert!(lines[1].starts_with("1,"));

        // Same config, fresh directories: byte-identical loss series.
        let dir2 = TempDir::new().unwrap();
        let cfg2 = tiny_config(dir2.path());
        cmd_gen(&cfg2).unwrap();
        cmd_train(&cfg2, None).unwrap();
        let losses2 = std::fs::read_to_string(cfg2.paths.out.join("losses.csv")).unwrap();
        assert_eq!(losses, losses2);

        let record_text = std::fs::read_to_string(out.join("run.json")).unwrap();
        let parsed: RunRecord = serde_json::from_str(&record_text).unwrap();
        assert_eq!(parsed.config, cfg);
        assert_eq!(parsed.variant, "scn");
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_trajectory() {
        let straight_dir = TempDir::new().unwrap();
        let mut straight_cfg = tiny_config(straight_dir.path());
        straight_cfg.train.steps = 5;
        cmd_gen(&straight_cfg).unwrap();
        cmd_train(&straight_cfg, None).unwrap();
        let want = std::fs::read_to_string(straight_cfg.paths.out.join("losses.csv")).unwrap();

        // Interrupted twin: stop after 2 steps, then resume to 5.
        let dir = TempDir::new().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.train.steps = 2;
        cmd_gen(&cfg).unwrap();
        cmd_train(&cfg, None).unwrap();
        cfg.train.steps = 5;
        let resumed = cmd_train(&cfg, Some(&cfg.paths.out.join("checkpoints/final.scn"))).unwrap();
        assert_eq!(resumed.completed_steps, 5);
        let got = std::fs::read_to_string(cfg.paths.out.join("losses.csv")).unwrap();
        assert_eq!(got, want, "resumed series equals the uninterrupted one");

        // Mismatched variant and architecture are rejected.
        let ckpt = cfg.paths.out.join("checkpoints/final.scn");
        let mut wrong = cfg.clone();
        wrong.train.variant = Variant::Supervised;
        wrong.model.k = 1;
        assert!(cmd_train(&wrong, Some(&ckpt)).is_err());
        let mut wrong_d = cfg.clone();
        wrong_d.model.d = 8;
        assert!(matches!(cmd_train(&wrong_d, Some(&ckpt)), Err(Error::Format { .. })));
    }

    #[test]
    fn non_finite_loss_aborts_with_the_step_number() {
        let dir = TempDir::new().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.train.steps = 1;
        cmd_gen(&cfg).unwrap();
        cmd_train(&cfg, None).unwrap();

        // Poison the scorer and resume: every pair score, hence the loss,
        // becomes NaN on the next step.
        let ckpt_path = cfg.paths.out.join("checkpoints/final.scn");
        let mut ckpt = load_checkpoint(&ckpt_path).unwrap();
        ckpt.params.scorer.w.data_mut()[0] = f32::NAN;
        save_checkpoint(
            &ckpt_path,
            &ckpt.variant,
            &ckpt.arch,
            &ckpt.params,
            ckpt.step,
            ckpt.adam.as_ref(),
        )
        .unwrap();
        cfg.train.steps = 3;
        let err = cmd_train(&cfg, Some(&ckpt_path)).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
        assert!(err.to_string().contains("step 2"), "{err}");
        let losses = std::fs::read_to_string(cfg.paths.out.join("losses.csv")).unwrap();
        assert_eq!(losses.lines().count(), 2, "header plus the one good row");
    }

    #[test]
    fn probe_reports_metrics_with_modularity_absent_for_one_object() {
        let dir = TempDir::new().unwrap();
        let cfg = tiny_config(dir.path());
        cmd_gen(&cfg).unwrap();
        cmd_train(&cfg, None).unwrap();
        let ckpt = cfg.paths.out.join("checkpoints/final.scn");
        let report = cmd_probe(&ckpt, &cfg.probe_data_dir(), &cfg, &cfg.paths.out).unwrap();

        assert_eq!(report.r2_per_target.len(), 2);
        assert!((0.0..=1.0).contains(&report.compactness));
        assert!(report.modularity.is_none(), "single object, no modularity");
        assert_eq!(report.provenance.seeds.data, 17);

        let json = std::fs::read_to_string(cfg.paths.out.join("metrics.json")).unwrap();
        assert!(!json.contains("\"modularity\""));
        let csv = std::fs::read_to_string(cfg.paths.out.join("metrics.csv")).unwrap();
        assert!(csv.contains("r2.obj0.x,"));
        // run.json gained the metrics field.
        let record: RunRecord =
            serde_json::from_str(&std::fs::read_to_string(cfg.paths.out.join("run.json")).unwrap()).unwrap();
        let embedded = record.metrics.unwrap();
        assert_eq!(embedded.slot_accuracy_mean, report.slot_accuracy_mean);

        // run.json can stand in for the config file.
        let from_record = load_config(&cfg.paths.out.join("run.json")).unwrap();
        assert_eq!(from_record, cfg);

        // A checkpoint with different dims is a format error.
        let mut wrong = cfg.clone();
        wrong.model.d = 8;
        assert!(matches!(
            cmd_probe(&ckpt, &wrong.probe_data_dir(), &wrong, &wrong.paths.out),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn report_orders_columns_and_copies_values_verbatim() {
        let root = TempDir::new().unwrap();
        let mk = |name: &str, variant: &str, mean: &str, extra: &str| -> PathBuf {
            let dir = root.path().join(name);
            std::fs::create_dir_all(&dir).unwrap();
            let json = format!(
                r#"{{"r2_per_target":[{{"object":"obj0","coord":"x","r2":0.25}}],
                    "slot_accuracy_mean":{mean},"compactness":0.5,{extra}
                    "degenerate_flags":[],"config":{{"train":{{"variant":"{variant}"}}}},
                    "conventions":"","provenance":{{"checkpoint":"c","dataset":"d",
                    "seeds":{{"data":1,"init":2,"sampling":3}}}}}}"#
            );
            std::fs::write(dir.join("metrics.json"), json).unwrap();
            dir
        };
        let sup = mk("a", "supervised", "0.8517283950617284", "");
        let rnd = mk("b", "random-cnn", "0.1", "\"modularity\":0.3,");
        let scn = mk("c", "scn", "0.45", "");
        let abl = mk("d", "scn_loss1only", "0.4", "");

        let table = cmd_report(&[sup.clone(), rnd, scn, abl]).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "metric,random-cnn,scn,scn_loss1only,supervised");
        assert!(lines.iter().any(|l| l.starts_with("slot_accuracy_mean,0.1,0.45,0.4,0.8517283950617284")));
        let modularity_row = lines.iter().find(|l| l.starts_with("modularity,")).unwrap();
        assert_eq!(*modularity_row, "modularity,0.3,,,", "absent cells stay empty");
        assert!(lines.iter().any(|l| l.starts_with("r2.obj0.x,0.25,0.25,0.25,0.25")));
        let advisory = lines.iter().find(|l| l.starts_with("#")).unwrap();
        assert!(advisory.contains("delta"), "{advisory}");

        let single = cmd_report(&[sup]).unwrap();
        assert!(single.lines().next().unwrap().eq("metric,supervised"));

        let missing = root.path().join("nope");
        std::fs::create_dir_all(&missing).unwrap();
        let err = cmd_report(&[missing.clone()]).unwrap_err();
        assert!(err.to_string().contains("nope"), "{err}");
    }
}
