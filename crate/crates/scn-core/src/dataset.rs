//! On-disk dataset format, generation, loading, and batch sampling.
//!
//! A dataset directory holds exactly three files:
//! - `meta.json` — the manifest (schema_version 1);
//! - `frames.bin` — raw frames, each channels×height×width u8, row-major
//!   (C,H,W), concatenated with no header;
//! - `labels.csv` — `frame,object,coord,value` rows, one per (frame, object,
//!   x|y), values in decimal pixels.
//!
//! The same reader serves generated sprite data and any externally produced
//! corpus written in this layout. Datasets at this scale are held in memory.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::fsio::{atomic_write, AtomicFile};
use crate::rng::{counter_rng, Stream};
use crate::tensor::Tensor;
use crate::world::{init_state, render_u8, simulate_step, WorldConfig};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

/// Manifest of a dataset directory; serialized field order is the meta.json
/// key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub frame_count: usize,
    /// Object names in label order.
    pub objects: Vec<String>,
    /// Episode start frame indices: strictly increasing, starting at 0.
    pub episodes: Vec<usize>,
    pub seed: u64,
}

impl DatasetManifest {
    /// How stored values map to model inputs and probe targets.
    pub fn normalization_note(&self) -> &'static str {
        "frames: u8 scaled by 1/255 into [0,1]; labels: pixels, normalized by width/height at probe time"
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let err = |msg: String| Error::format(path.display().to_string(), "episodes", msg);
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::format(
                path.display().to_string(),
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if self.episodes.first() != Some(&0) {
            return Err(err("first episode must start at frame 0".into()));
        }
        for pair in self.episodes.windows(2) {
            if pair[1] <= pair[0] {
                return Err(err(format!("episode starts not strictly increasing: {} then {}", pair[0], pair[1])));
            }
        }
        if let Some(&last) = self.episodes.last() {
            if last >= self.frame_count {
                return Err(err(format!(
                    "episode start {last} beyond frame count {}",
                    self.frame_count
                )));
            }
        }
        Ok(())
    }
}

/// A pair batch: `second.data` row i is the frame immediately following
/// `first.data` row i inside one episode.
#[derive(Debug, Clone)]
pub struct TransitionBatch<T: Element> {
    pub first: Tensor<T>,
    pub second: Tensor<T>,
}

impl<T: Element> TransitionBatch<T> {
    pub fn batch_size(&self) -> usize {
        self.first.shape()[0]
    }
}

/// Renders episodes of a sprite world to a dataset directory, episode RNG
/// regions starting at `first_episode`.
pub fn generate_dataset_from(
    config: &WorldConfig,
    first_episode: u64,
    num_episodes: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    config.validate()?;
    if num_episodes == 0 {
        return Err(Error::Argument("generate_dataset: need at least one episode".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let objects = config.object_names();
    let mut frames = AtomicFile::create(&out_dir.join("frames.bin"))?;
    let mut labels = AtomicFile::create(&out_dir.join("labels.csv"))?;
    writeln!(labels.writer(), "frame,object,coord,value")?;
    let mut frame_idx = 0usize;
    let mut episodes = Vec::with_capacity(num_episodes);
    for e in 0..num_episodes {
        episodes.push(frame_idx);
        let mut rng = counter_rng(config.seed, Stream::Data, first_episode + e as u64);
        let mut state = init_state(config, &mut rng);
        for t in 0..config.episode_length {
            frames.writer().write_all(&render_u8(&state, config))?;
            for (obj, pos) in objects.iter().zip(&state.positions) {
                writeln!(labels.writer(), "{frame_idx},{obj},x,{}", pos[0])?;
                writeln!(labels.writer(), "{frame_idx},{obj},y,{}", pos[1])?;
            }
            frame_idx += 1;
            if t + 1 < config.episode_length {
                state = simulate_step(&state, config);
            }
        }
    }
    frames.commit()?;
    labels.commit()?;
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        width: config.width,
        height: config.height,
        channels: 3,
        frame_count: frame_idx,
        objects,
        episodes,
        seed: config.seed,
    };
    let mut meta = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    meta.push(b'\n');
    atomic_write(&out_dir.join("meta.json"), &meta)?;
    Ok(manifest)
}

/// `generate_dataset_from` with episode regions starting at 0.
pub fn generate_dataset(config: &WorldConfig, num_episodes: usize, out_dir: &Path) -> Result<DatasetManifest> {
    generate_dataset_from(config, 0, num_episodes, out_dir)
}

/// In-memory dataset with random frame/label access.
#[derive(Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    frames: Vec<u8>,
    /// 2·P pixel values per frame: (x,y) per object, object-major.
    labels: Vec<f64>,
    /// Frame indices t where t and t+1 belong to the same episode.
    pair_starts: Vec<u32>,
}

/// Reads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let meta_bytes = std::fs::read(&meta_path).map_err(|e| {
        Error::format(meta_path.display().to_string(), "open", e.to_string())
    })?;
    let manifest: DatasetManifest = serde_json::from_slice(&meta_bytes).map_err(|e| {
        Error::format(meta_path.display().to_string(), format!("line {}", e.line()), e.to_string())
    })?;
    manifest.validate(&meta_path)?;

    let frames_path = dir.join("frames.bin");
    let frames = std::fs::read(&frames_path).map_err(|e| {
        Error::format(frames_path.display().to_string(), "open", e.to_string())
    })?;
    let expected = manifest.frame_count * manifest.channels * manifest.height * manifest.width;
    if frames.len() != expected {
        return Err(Error::format(
            frames_path.display().to_string(),
            format!("byte {}", frames.len().min(expected)),
            format!("expected exactly {expected} bytes, found {}", frames.len()),
        ));
    }

    let labels_path = dir.join("labels.csv");
    let labels_text = std::fs::read_to_string(&labels_path).map_err(|e| {
        Error::format(labels_path.display().to_string(), "open", e.to_string())
    })?;
    let labels = parse_labels(&labels_text, &manifest, &labels_path)?;

    let mut pair_starts = Vec::new();
    for (i, &start) in manifest.episodes.iter().enumerate() {
        let end = manifest.episodes.get(i + 1).copied().unwrap_or(manifest.frame_count);
        for t in start..end.saturating_sub(1) {
            pair_starts.push(t as u32);
        }
    }
    Ok(Dataset { manifest, frames, labels, pair_starts })
}

fn parse_labels(text: &str, manifest: &DatasetManifest, path: &Path) -> Result<Vec<f64>> {
    let path_str = path.display().to_string();
    let err = |line: usize, msg: String| Error::format(path_str.clone(), format!("line {line}"), msg);
    let p = manifest.objects.len();
    let mut lines = text.lines();
    match lines.next() {
        Some("frame,object,coord,value") => {}
        other => {
            return Err(err(1, format!(
                "expected header `frame,object,coord,value`, found {other:?}"
            )));
        }
    }
    let mut labels = vec![0.0f64; manifest.frame_count * p * 2];
    let mut row = 0usize;
    for (lineno, line) in lines.enumerate() {
        let lineno = lineno + 2;
        if line.is_empty() {
            continue;
        }
        let expected_total = manifest.frame_count * p * 2;
        if row >= expected_total {
            return Err(err(lineno, format!("more than {expected_total} label rows")));
        }
        let frame = row / (p * 2);
        let obj = (row / 2) % p;
        let coord = row % 2;
        let mut fields = line.splitn(4, ',');
        let (f_s, o_s, c_s, v_s) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
            _ => return Err(err(lineno, format!("expected 4 comma-separated fields, found `{line}`"))),
        };
        if f_s.parse::<usize>().ok() != Some(frame) {
            return Err(err(lineno, format!("expected frame {frame}, found `{f_s}`")));
        }
        if o_s != manifest.objects[obj] {
            return Err(err(lineno, format!("expected object `{}`, found `{o_s}`", manifest.objects[obj])));
        }
        let expected_coord = if coord == 0 { "x" } else { "y" };
        if c_s != expected_coord {
            return Err(err(lineno, format!("expected coord `{expected_coord}`, found `{c_s}`")));
        }
        let v: f64 = v_s
            .parse()
            .map_err(|_| err(lineno, format!("bad value `{v_s}`")))?;
        labels[row] = v;
        row += 1;
    }
    let expected_total = manifest.frame_count * p * 2;
    if row != expected_total {
        return Err(err(
            text.lines().count(),
            format!("expected {expected_total} label rows, found {row}"),
        ));
    }
    Ok(labels)
}

impl Dataset {
    pub fn frame_count(&self) -> usize {
        self.manifest.frame_count
    }

    pub fn num_objects(&self) -> usize {
        self.manifest.objects.len()
    }

    fn frame_elems(&self) -> usize {
        self.manifest.channels * self.manifest.height * self.manifest.width
    }

    pub fn frame_bytes(&self, idx: usize) -> &[u8] {
        let n = self.frame_elems();
        &self.frames[idx * n..(idx + 1) * n]
    }

    /// Copies frame `idx` into `out`, scaled to [0,1].
    pub fn fill_frame<T: Element>(&self, idx: usize, out: &mut [T]) {
        for (o, &b) in out.iter_mut().zip(self.frame_bytes(idx)) {
            *o = T::from_f64(b as f64 / 255.0);
        }
    }

    /// Frame `idx` as a [C,H,W] tensor in [0,1].
    pub fn frame<T: Element>(&self, idx: usize) -> Result<Tensor<T>> {
        if idx >= self.frame_count() {
            return Err(Error::Argument(format!(
                "frame index {idx} out of range for {} frames",
                self.frame_count()
            )));
        }
        let m = &self.manifest;
        let mut t = Tensor::zeros(vec![m.channels, m.height, m.width]);
        self.fill_frame(idx, t.data_mut());
        Ok(t)
    }

    /// Pixel-space (x, y) of one object at one frame.
    pub fn label(&self, frame: usize, object: usize) -> [f64; 2] {
        let p = self.num_objects();
        let base = (frame * p + object) * 2;
        [self.labels[base], self.labels[base + 1]]
    }

    /// Frame indices that begin an intra-episode consecutive pair.
    pub fn pair_starts(&self) -> &[u32] {
        &self.pair_starts
    }

    fn gather<T: Element>(&self, indices: &[usize]) -> Tensor<T> {
        let m = &self.manifest;
        let n = self.frame_elems();
        let mut out = Tensor::zeros(vec![indices.len(), m.channels, m.height, m.width]);
        for (row, &idx) in indices.iter().enumerate() {
            self.fill_frame(idx, &mut out.data_mut()[row * n..(row + 1) * n]);
        }
        out
    }
}

/// Draws N consecutive-frame pairs uniformly over all intra-episode positions.
pub fn sample_transition_batch<T: Element, R: Rng>(
    ds: &Dataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<TransitionBatch<T>> {
    if batch_size == 0 {
        return Err(Error::Argument("sample_transition_batch: batch_size must be ≥ 1".into()));
    }
    if ds.pair_starts.is_empty() {
        return Err(Error::Argument(
            "dataset too small: no episode contains two consecutive frames".into(),
        ));
    }
    let mut first = Vec::with_capacity(batch_size);
    let mut second = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let t = ds.pair_starts[rng.random_range(0..ds.pair_starts.len())] as usize;
        first.push(t);
        second.push(t + 1);
    }
    Ok(TransitionBatch { first: ds.gather(&first), second: ds.gather(&second) })
}

/// Draws N frames uniformly (any frame), returning the tensor and the indices
/// (for label lookup).
pub fn sample_frame_batch<T: Element, R: Rng>(
    ds: &Dataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if batch_size == 0 {
        return Err(Error::Argument("sample_frame_batch: batch_size must be ≥ 1".into()));
    }
    let indices: Vec<usize> = (0..batch_size)
        .map(|_| rng.random_range(0..ds.frame_count()))
        .collect();
    Ok((ds.gather(&indices), indices))
}
