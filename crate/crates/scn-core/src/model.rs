//! The slot encoder — shared CNN backbone, per-slot-map head — plus the
//! bilinear scorer and binary checkpoints.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::fsio::atomic_write;
use crate::kernels::{mm_nn, mm_nt};
use crate::optim::{AdamHyper, AdamState};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Architecture hyperparameters. The backbone is two strided convolutions
/// (the second producing k·c channels); each contiguous c-channel slot map
/// passes through one shared stride-1 convolution and a two-layer MLP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub conv1_out: usize,
    pub conv1_k: usize,
    pub conv1_s: usize,
    pub conv2_k: usize,
    pub conv2_s: usize,
    pub head_k: usize,
    pub mlp_hidden: usize,
    /// Slot count.
    pub k: usize,
    /// Channels per slot map.
    pub c: usize,
    /// Slot vector dimension.
    pub d: usize,
}

/// Spatial extents at each stage, derived from an `ArchConfig`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchShapes {
    pub conv1_hw: [usize; 2],
    pub conv2_hw: [usize; 2],
    pub head_hw: [usize; 2],
    /// Flattened head output per slot: c · head_h · head_w.
    pub mlp_in: usize,
}

fn conv_extent(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || input < kernel {
        None
    } else {
        Some((input - kernel) / stride + 1)
    }
}

impl ArchConfig {
    /// Full-size preset for 64×64 frames: conv(→32, k8, s4), conv(→k·c, k4,
    /// s2), head conv k3, hidden 256.
    pub fn base(k: usize, c: usize, d: usize) -> Self {
        ArchConfig {
            in_channels: 3,
            in_h: 64,
            in_w: 64,
            conv1_out: 32,
            conv1_k: 8,
            conv1_s: 4,
            conv2_k: 4,
            conv2_s: 2,
            head_k: 3,
            mlp_hidden: 256,
            k,
            c,
            d,
        }
    }

    /// Small preset for 16×16 frames, sized so finite-difference gradient
    /// checks stay cheap.
    pub fn reduced(k: usize, c: usize, d: usize) -> Self {
        ArchConfig {
            in_channels: 3,
            in_h: 16,
            in_w: 16,
            conv1_out: 8,
            conv1_k: 4,
            conv1_s: 2,
            conv2_k: 3,
            conv2_s: 2,
            head_k: 2,
            mlp_hidden: 32,
            k,
            c,
            d,
        }
    }

    /// Derives per-stage spatial extents, rejecting configs where any stage
    /// collapses below 1×1.
    pub fn shapes(&self) -> Result<ArchShapes> {
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("conv1_out", self.conv1_out),
            ("mlp_hidden", self.mlp_hidden),
            ("k", self.k),
            ("c", self.c),
            ("d", self.d),
        ] {
            if v == 0 {
                return Err(Error::Argument(format!("architecture: {name} must be ≥ 1")));
            }
        }
        let stage = |which: &str, h: usize, w: usize, kern: usize, stride: usize| {
            match (conv_extent(h, kern, stride), conv_extent(w, kern, stride)) {
                (Some(oh), Some(ow)) => Ok([oh, ow]),
                _ => Err(Error::dimension(
                    format!("architecture {which}"),
                    format!("kernel {kern} stride {stride} to fit"),
                    format!("{h}×{w} input"),
                )),
            }
        };
        let conv1_hw = stage("conv1", self.in_h, self.in_w, self.conv1_k, self.conv1_s)?;
        let conv2_hw = stage("conv2", conv1_hw[0], conv1_hw[1], self.conv2_k, self.conv2_s)?;
        let head_hw = stage("head", conv2_hw[0], conv2_hw[1], self.head_k, 1)?;
        Ok(ArchShapes { conv1_hw, conv2_hw, head_hw, mlp_in: self.c * head_hw[0] * head_hw[1] })
    }
}

/// Encoder weights, in checkpoint declaration order.
#[derive(Debug, Clone)]
pub struct EncoderParams<T: Element> {
    pub conv1_w: Tensor<T>,
    pub conv1_b: Tensor<T>,
    pub conv2_w: Tensor<T>,
    pub conv2_b: Tensor<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
    pub mlp1_w: Tensor<T>,
    pub mlp1_b: Tensor<T>,
    pub mlp2_w: Tensor<T>,
    pub mlp2_b: Tensor<T>,
}

/// Bilinear map(s) for the contrastive scores. `w_div`, when present, serves
/// the diversity objective while `w` serves saliency; otherwise `w` serves
/// both.
#[derive(Debug, Clone)]
pub struct ScorerParams<T: Element> {
    pub w: Tensor<T>,
    pub w_div: Option<Tensor<T>>,
}

/// Per-slot linear position readouts (supervised baseline): slot j's d-vector
/// to that object's (x, y).
#[derive(Debug, Clone)]
pub struct ReadoutParams<T: Element> {
    pub heads: Vec<(Tensor<T>, Tensor<T>)>,
}

/// Everything trainable, as one unit for optimization and checkpointing.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Element> {
    pub encoder: EncoderParams<T>,
    pub scorer: ScorerParams<T>,
    pub readout: Option<ReadoutParams<T>>,
}

impl<T: Element> ModelParams<T> {
    /// Tensors with their checkpoint section names, in declaration order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let e = &self.encoder;
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("conv1_w".into(), &e.conv1_w),
            ("conv1_b".into(), &e.conv1_b),
            ("conv2_w".into(), &e.conv2_w),
            ("conv2_b".into(), &e.conv2_b),
            ("head_w".into(), &e.head_w),
            ("head_b".into(), &e.head_b),
            ("mlp1_w".into(), &e.mlp1_w),
            ("mlp1_b".into(), &e.mlp1_b),
            ("mlp2_w".into(), &e.mlp2_w),
            ("mlp2_b".into(), &e.mlp2_b),
            ("scorer_w".into(), &self.scorer.w),
        ];
        if let Some(wd) = &self.scorer.w_div {
            out.push(("scorer_w_div".into(), wd));
        }
        if let Some(r) = &self.readout {
            for (j, (w, b)) in r.heads.iter().enumerate() {
                out.push((format!("readout{j}_w"), w));
                out.push((format!("readout{j}_b"), b));
            }
        }
        out
    }

    /// Mutable view in the same order as `named_tensors`.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let e = &mut self.encoder;
        let mut out: Vec<&mut Tensor<T>> = vec![
            &mut e.conv1_w,
            &mut e.conv1_b,
            &mut e.conv2_w,
            &mut e.conv2_b,
            &mut e.head_w,
            &mut e.head_b,
            &mut e.mlp1_w,
            &mut e.mlp1_b,
            &mut e.mlp2_w,
            &mut e.mlp2_b,
            &mut self.scorer.w,
        ];
        if let Some(wd) = &mut self.scorer.w_div {
            out.push(wd);
        }
        if let Some(r) = &mut self.readout {
            for (w, b) in &mut r.heads {
                out.push(w);
                out.push(b);
            }
        }
        out
    }
}

/// Optional trainable blocks beyond encoder + shared scorer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ModelOptions {
    /// Give the diversity objective its own bilinear map.
    pub separate_scorers: bool,
    /// Attach per-slot (x, y) readout heads (supervised baseline).
    pub with_readout: bool,
}

fn uniform_fan_in<T: Element, R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("init shape consistent")
}

fn normal_scaled<T: Element, R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("init shape consistent")
}

/// Fresh parameters: weights fan-in-scaled uniform, biases zero, bilinear maps
/// normal with std 1/√d. All draws are f64 before narrowing, so a given seed
/// yields the same model at either precision.
pub fn init_model<T: Element, R: Rng>(
    arch: &ArchConfig,
    options: ModelOptions,
    rng: &mut R,
) -> Result<ModelParams<T>> {
    let shapes = arch.shapes()?;
    let (k, c, d) = (arch.k, arch.c, arch.d);
    let conv1_w = uniform_fan_in(
        vec![arch.conv1_out, arch.in_channels, arch.conv1_k, arch.conv1_k],
        arch.in_channels * arch.conv1_k * arch.conv1_k,
        rng,
    );
    let conv2_w = uniform_fan_in(
        vec![k * c, arch.conv1_out, arch.conv2_k, arch.conv2_k],
        arch.conv1_out * arch.conv2_k * arch.conv2_k,
        rng,
    );
    let head_w = uniform_fan_in(vec![c, c, arch.head_k, arch.head_k], c * arch.head_k * arch.head_k, rng);
    let mlp1_w = uniform_fan_in(vec![shapes.mlp_in, arch.mlp_hidden], shapes.mlp_in, rng);
    let mlp2_w = uniform_fan_in(vec![arch.mlp_hidden, d], arch.mlp_hidden, rng);
    let scorer_std = 1.0 / (d as f64).sqrt();
    let w = normal_scaled(vec![d, d], scorer_std, rng);
    let w_div = options.separate_scorers.then(|| normal_scaled(vec![d, d], scorer_std, rng));
    let readout = options.with_readout.then(|| ReadoutParams {
        heads: (0..k)
            .map(|_| (uniform_fan_in(vec![d, 2], d, rng), Tensor::zeros(vec![2])))
            .collect(),
    });
    Ok(ModelParams {
        encoder: EncoderParams {
            conv1_w,
            conv1_b: Tensor::zeros(vec![arch.conv1_out]),
            conv2_w,
            conv2_b: Tensor::zeros(vec![k * c]),
            head_w,
            head_b: Tensor::zeros(vec![c]),
            mlp1_w,
            mlp1_b: Tensor::zeros(vec![arch.mlp_hidden]),
            mlp2_w,
            mlp2_b: Tensor::zeros(vec![d]),
        },
        scorer: ScorerParams { w, w_div },
        readout,
    })
}

/// Tape handles for loaded model parameters, same fields as `ModelParams`.
#[derive(Debug, Clone)]
pub struct ModelIds {
    pub conv1_w: ValueId,
    pub conv1_b: ValueId,
    pub conv2_w: ValueId,
    pub conv2_b: ValueId,
    pub head_w: ValueId,
    pub head_b: ValueId,
    pub mlp1_w: ValueId,
    pub mlp1_b: ValueId,
    pub mlp2_w: ValueId,
    pub mlp2_b: ValueId,
    pub scorer_w: ValueId,
    pub scorer_w_div: Option<ValueId>,
    pub readout: Vec<(ValueId, ValueId)>,
}

impl ModelIds {
    /// Ids in `named_tensors` order, for grad extraction.
    pub fn ordered(&self) -> Vec<ValueId> {
        let mut out = vec![
            self.conv1_w,
            self.conv1_b,
            self.conv2_w,
            self.conv2_b,
            self.head_w,
            self.head_b,
            self.mlp1_w,
            self.mlp1_b,
            self.mlp2_w,
            self.mlp2_b,
            self.scorer_w,
        ];
        out.extend(self.scorer_w_div);
        for &(w, b) in &self.readout {
            out.push(w);
            out.push(b);
        }
        out
    }
}

/// Copies parameters onto a tape; `trainable` decides whether gradients will
/// be tracked back to them.
pub fn load_model<T: Element>(tape: &mut Tape<T>, params: &ModelParams<T>, trainable: bool) -> ModelIds {
    let mut put = |t: &Tensor<T>| if trainable { tape.watch(t) } else { tape.constant(t) };
    let e = &params.encoder;
    ModelIds {
        conv1_w: put(&e.conv1_w),
        conv1_b: put(&e.conv1_b),
        conv2_w: put(&e.conv2_w),
        conv2_b: put(&e.conv2_b),
        head_w: put(&e.head_w),
        head_b: put(&e.head_b),
        mlp1_w: put(&e.mlp1_w),
        mlp1_b: put(&e.mlp1_b),
        mlp2_w: put(&e.mlp2_w),
        mlp2_b: put(&e.mlp2_b),
        scorer_w: put(&params.scorer.w),
        scorer_w_div: params.scorer.w_div.as_ref().map(&mut put),
        readout: params
            .readout
            .iter()
            .flat_map(|r| &r.heads)
            .map(|(w, b)| (put(w), put(b)))
            .collect(),
    }
}

/// Encodes a frame batch [n, c_in, h, w] to slot vectors [n, k, d]: backbone
/// once, then the shared head over each contiguous c-channel slot map.
pub fn encode<T: Element>(
    tape: &mut Tape<T>,
    arch: &ArchConfig,
    ids: &ModelIds,
    frames: ValueId,
) -> Result<ValueId> {
    let shapes = arch.shapes()?;
    let fs = tape.shape(frames)?;
    if fs.len() != 4 || fs[1] != arch.in_channels || fs[2] != arch.in_h || fs[3] != arch.in_w {
        return Err(Error::dimension(
            "encode input",
            format!("[n, {}, {}, {}]", arch.in_channels, arch.in_h, arch.in_w),
            format!("{fs:?}"),
        ));
    }
    let n = fs[0];
    let h1 = tape.conv2d(frames, ids.conv1_w, ids.conv1_b, arch.conv1_s)?;
    let h1 = tape.relu(h1)?;
    let h2 = tape.conv2d(h1, ids.conv2_w, ids.conv2_b, arch.conv2_s)?;
    let h2 = tape.relu(h2)?;
    let mut slots = Vec::with_capacity(arch.k);
    for j in 0..arch.k {
        let map = tape.narrow_dim1(h2, j * arch.c, arch.c)?;
        let s = tape.conv2d(map, ids.head_w, ids.head_b, 1)?;
        let s = tape.relu(s)?;
        let s = tape.reshape(s, vec![n, shapes.mlp_in])?;
        let s = tape.linear(s, ids.mlp1_w, ids.mlp1_b)?;
        let s = tape.relu(s)?;
        let s = tape.linear(s, ids.mlp2_w, ids.mlp2_b)?;
        slots.push(s);
    }
    tape.stack_dim1(&slots)
}

/// Inference-only encoding on a throwaway tape.
pub fn encode_frames<T: Element>(
    arch: &ArchConfig,
    params: &ModelParams<T>,
    frames: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let ids = load_model(&mut tape, params, false);
    let f = tape.constant(frames);
    let out = encode(&mut tape, arch, &ids, f)?;
    tape.to_tensor(out)
}

/// All pairwise bilinear scores: entry (i, j) = a_i ᵀ W b_j.
pub fn score_matrix<T: Element>(
    slots_a: &Tensor<T>,
    w: &Tensor<T>,
    slots_b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = match w.shape()[..] {
        [r, c] if r == c => r,
        _ => return Err(Error::dimension("score_matrix map", "[d, d]", format!("{:?}", w.shape()))),
    };
    let rows = |t: &Tensor<T>, name: &str| match t.shape()[..] {
        [k, td] if td == d => Ok(k),
        _ => Err(Error::dimension(format!("score_matrix {name}"), format!("[k, {d}]"), format!("{:?}", t.shape()))),
    };
    let ka = rows(slots_a, "first slots")?;
    let kb = rows(slots_b, "second slots")?;
    let mut proj = vec![T::zero(); ka * d];
    mm_nn(&mut proj, slots_a.data(), w.data(), ka, d, d);
    let mut out = Tensor::zeros(vec![ka, kb]);
    mm_nt(out.data_mut(), &proj, slots_b.data(), ka, d, kb);
    Ok(out)
}

// ---- checkpoints ----
//
// File layout: magic "SCN1", little-endian u32 header byte length, JSON
// header, then every section's f32 values little-endian, concatenated in
// header order. Sections are the named parameter tensors, then (if optimizer
// state is saved) `adam.m.<name>` and `adam.v.<name>` mirrors.

const CHECKPOINT_MAGIC: &[u8; 4] = b"SCN1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct SectionHeader {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamHeader {
    step_count: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    variant: String,
    k: usize,
    c: usize,
    d: usize,
    arch: ArchConfig,
    step: u64,
    sections: Vec<SectionHeader>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adam: Option<AdamHeader>,
}

/// A loaded checkpoint: parameters plus optional optimizer state for resume.
#[derive(Debug)]
pub struct Checkpoint {
    pub variant: String,
    pub arch: ArchConfig,
    pub step: u64,
    pub params: ModelParams<f32>,
    pub adam: Option<AdamState<f32>>,
}

pub fn save_checkpoint(
    path: &Path,
    variant: &str,
    arch: &ArchConfig,
    params: &ModelParams<f32>,
    step: u64,
    adam: Option<&AdamState<f32>>,
) -> Result<()> {
    let named = params.named_tensors();
    let mut sections = Vec::new();
    let mut payload = Vec::new();
    let mut emit = |sections: &mut Vec<SectionHeader>, name: String, data: &[f32]| {
        sections.push(SectionHeader { name, len: data.len() });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, t) in &named {
        emit(&mut sections, name.clone(), t.data());
    }
    let adam_header = match adam {
        Some(state) => {
            let (m, v) = state.moments();
            if m.len() != named.len() {
                return Err(Error::Argument(format!(
                    "checkpoint: optimizer tracks {} buffers for {} parameters",
                    m.len(),
                    named.len()
                )));
            }
            for (buf, (name, t)) in m.iter().zip(&named) {
                if buf.len() != t.numel() {
                    return Err(Error::Argument(format!(
                        "checkpoint: moment buffer for {name} has {} values, parameter has {}",
                        buf.len(),
                        t.numel()
                    )));
                }
                emit(&mut sections, format!("adam.m.{name}"), buf);
            }
            for (buf, (name, _)) in v.iter().zip(&named) {
                emit(&mut sections, format!("adam.v.{name}"), buf);
            }
            let h = state.hyper;
            Some(AdamHeader {
                step_count: state.step_count(),
                lr: h.lr,
                beta1: h.beta1,
                beta2: h.beta2,
                eps: h.eps,
            })
        }
        None => None,
    };
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        variant: variant.to_string(),
        k: arch.k,
        c: arch.c,
        d: arch.d,
        arch: arch.clone(),
        step,
        sections,
        adam: adam_header,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(8 + header_json.len() + payload.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);
    atomic_write(path, &bytes)
}

/// Section names and shapes a checkpoint of this architecture must contain,
/// in order, given which optional blocks its section list declares.
fn expected_sections(arch: &ArchConfig, with_w_div: bool, with_readout: bool) -> Result<Vec<(String, Vec<usize>)>> {
    let shapes = arch.shapes()?;
    let (k, c, d) = (arch.k, arch.c, arch.d);
    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("conv1_w".into(), vec![arch.conv1_out, arch.in_channels, arch.conv1_k, arch.conv1_k]),
        ("conv1_b".into(), vec![arch.conv1_out]),
        ("conv2_w".into(), vec![k * c, arch.conv1_out, arch.conv2_k, arch.conv2_k]),
        ("conv2_b".into(), vec![k * c]),
        ("head_w".into(), vec![c, c, arch.head_k, arch.head_k]),
        ("head_b".into(), vec![c]),
        ("mlp1_w".into(), vec![shapes.mlp_in, arch.mlp_hidden]),
        ("mlp1_b".into(), vec![arch.mlp_hidden]),
        ("mlp2_w".into(), vec![arch.mlp_hidden, d]),
        ("mlp2_b".into(), vec![d]),
        ("scorer_w".into(), vec![d, d]),
    ];
    if with_w_div {
        out.push(("scorer_w_div".into(), vec![d, d]));
    }
    if with_readout {
        for j in 0..k {
            out.push((format!("readout{j}_w"), vec![d, 2]));
            out.push((format!("readout{j}_b"), vec![2]));
        }
    }
    Ok(out)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let path_str = path.display().to_string();
    let fail = |loc: &str, msg: String| Error::format(path_str.clone(), loc, msg);
    let bytes = std::fs::read(path).map_err(|e| Error::format(path_str.clone(), "open", e.to_string()))?;
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(fail("byte 0", "not a checkpoint (bad magic)".into()));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if 8 + header_len > bytes.len() {
        return Err(fail("byte 4", format!("header length {header_len} exceeds file size {}", bytes.len())));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| fail("header", e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(fail("header", format!("unsupported version {} (expected {CHECKPOINT_VERSION})", header.version)));
    }
    let arch = header.arch;
    if (header.k, header.c, header.d) != (arch.k, arch.c, arch.d) {
        return Err(fail(
            "header",
            format!(
                "k/c/d fields ({}, {}, {}) disagree with architecture ({}, {}, {})",
                header.k, header.c, header.d, arch.k, arch.c, arch.d
            ),
        ));
    }
    let with_w_div = header.sections.iter().any(|s| s.name == "scorer_w_div");
    let with_readout = header.sections.iter().any(|s| s.name == "readout0_w");
    let expected = expected_sections(&arch, with_w_div, with_readout)?;
    let mut expected_all: Vec<(String, usize)> =
        expected.iter().map(|(n, s)| (n.clone(), s.iter().product())).collect();
    if header.adam.is_some() {
        for prefix in ["adam.m", "adam.v"] {
            for (n, s) in &expected {
                expected_all.push((format!("{prefix}.{n}"), s.iter().product()));
            }
        }
    }
    if header.sections.len() != expected_all.len() {
        return Err(fail(
            "header",
            format!("expected {} sections, found {}", expected_all.len(), header.sections.len()),
        ));
    }
    for (got, (name, len)) in header.sections.iter().zip(&expected_all) {
        if got.name != *name || got.len != *len {
            return Err(fail(
                "header",
                format!("expected section {name} of {len} values, found {} of {}", got.name, got.len),
            ));
        }
    }
    let total: usize = expected_all.iter().map(|(_, l)| l).sum();
    let payload = &bytes[8 + header_len..];
    if payload.len() != total * 4 {
        return Err(fail(
            &format!("byte {}", 8 + header_len + payload.len().min(total * 4)),
            format!("expected {} payload bytes, found {}", total * 4, payload.len()),
        ));
    }
    let mut cursor = 0usize;
    let mut buffers: Vec<Vec<f32>> = Vec::with_capacity(expected_all.len());
    for (_, len) in &expected_all {
        let raw = &payload[cursor * 4..(cursor + len) * 4];
        buffers.push(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect());
        cursor += len;
    }
    let core_count = expected.len();
    let mut it = buffers.drain(..core_count).zip(expected.iter());
    let mut take = || {
        let (data, (_, shape)) = it.next().expect("section count checked");
        Tensor::new(shape.clone(), data).expect("section length checked")
    };
    let encoder = EncoderParams {
        conv1_w: take(),
        conv1_b: take(),
        conv2_w: take(),
        conv2_b: take(),
        head_w: take(),
        head_b: take(),
        mlp1_w: take(),
        mlp1_b: take(),
        mlp2_w: take(),
        mlp2_b: take(),
    };
    let scorer = ScorerParams { w: take(), w_div: with_w_div.then(&mut take) };
    let readout = with_readout.then(|| ReadoutParams {
        heads: (0..arch.k).map(|_| (take(), take())).collect(),
    });
    drop(it);
    let adam = header.adam.map(|a| {
        let m: Vec<Vec<f32>> = buffers.drain(..core_count).collect();
        let v: Vec<Vec<f32>> = buffers.drain(..core_count).collect();
        AdamState::from_parts(
            m,
            v,
            a.step_count,
            AdamHyper { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps },
        )
    });
    Ok(Checkpoint {
        variant: header.variant,
        arch,
        step: header.step,
        params: ModelParams { encoder, scorer, readout },
        adam,
    })
}
