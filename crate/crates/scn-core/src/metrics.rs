//! Importance matrices, entropy-based compactness/modularity, and the
//! metrics report emitted after probing.

use crate::error::{Error, Result};
use crate::probe::{LinearProbe, TargetDescriptor};
use serde::{Deserialize, Serialize};

/// Methodology choices a reader of the report should know; echoed verbatim
/// into metrics.json.
pub const CONVENTIONS_NOTE: &str = "probes: closed-form ridge regression on centered features, \
intercept excluded from importance; accuracy: R² averaged over targets; importance: per-probe \
|w| normalized to sum 1, slot blocks averaged, object rows average that object's x and y targets \
then renormalize; entropy: logarithm base equals the distribution length, so scores lie in [0,1]";

/// Per-target and per-object attribution of probe weight mass to slots.
#[derive(Debug, Clone)]
pub struct ImportanceMatrix {
    /// [p, k] row-major; each row a distribution over slots.
    pub slot_importance: Vec<f64>,
    /// [t, k·d] row-major; each row a distribution over features.
    pub feature_importance: Vec<f64>,
    pub p: usize,
    pub k: usize,
    /// Targets whose probe weights were identically zero (row set uniform).
    pub degenerate_targets: Vec<TargetDescriptor>,
}

/// Distributes each probe's |weight| mass over slots, then aggregates targets
/// into object rows via `object_map` (target index → object index).
pub fn importance_matrix(
    probes: &[LinearProbe],
    k: usize,
    d: usize,
    object_map: &[usize],
) -> Result<ImportanceMatrix> {
    if probes.is_empty() {
        return Err(Error::Argument("importance_matrix needs at least one probe".into()));
    }
    if object_map.len() != probes.len() {
        return Err(Error::dimension(
            "importance_matrix object map",
            format!("{} entries", probes.len()),
            object_map.len().to_string(),
        ));
    }
    let p = object_map.iter().max().unwrap() + 1;
    for obj in 0..p {
        if !object_map.contains(&obj) {
            return Err(Error::Argument(format!(
                "object map skips object {obj} (objects must be contiguous from 0)"
            )));
        }
    }
    let f = k * d;
    let t_count = probes.len();
    let mut feature_importance = vec![0.0f64; t_count * f];
    let mut slot_share = vec![0.0f64; t_count * k];
    let mut degenerate_targets = Vec::new();
    for (t, probe) in probes.iter().enumerate() {
        if probe.weights.len() != f {
            return Err(Error::dimension(
                format!("probe {} weights", probe.descriptor),
                format!("{f} entries"),
                probe.weights.len().to_string(),
            ));
        }
        let total: f64 = probe.weights.iter().map(|w| w.abs()).sum();
        let row = &mut feature_importance[t * f..(t + 1) * f];
        if total == 0.0 {
            row.fill(1.0 / f as f64);
            degenerate_targets.push(probe.descriptor.clone());
        } else {
            for (dst, w) in row.iter_mut().zip(&probe.weights) {
                *dst = w.abs() / total;
            }
        }
        for j in 0..k {
            slot_share[t * k + j] = row[j * d..(j + 1) * d].iter().sum::<f64>() / d as f64;
        }
    }
    let mut slot_importance = vec![0.0f64; p * k];
    for obj in 0..p {
        let members: Vec<usize> = (0..t_count).filter(|&t| object_map[t] == obj).collect();
        let row = &mut slot_importance[obj * k..(obj + 1) * k];
        for &t in &members {
            for (dst, v) in row.iter_mut().zip(&slot_share[t * k..(t + 1) * k]) {
                *dst += v / members.len() as f64;
            }
        }
        let sum: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(ImportanceMatrix { slot_importance, feature_importance, p, k, degenerate_targets })
}

/// Entropy of a distribution with logarithm base `base.len()`; 0·log 0 = 0.
fn entropy_base_len(dist: &[f64]) -> f64 {
    if dist.len() < 2 {
        return 0.0;
    }
    let ln_base = (dist.len() as f64).ln();
    -dist.iter().filter(|&&p| p > 0.0).map(|&p| p * (p.ln() / ln_base)).sum::<f64>()
}

/// Mean over object rows of 1 − entropy; 1 when each object concentrates in
/// one slot, 0 when spread uniformly. Defined as 1 for k = 1.
pub fn slot_compactness(imp: &ImportanceMatrix) -> f64 {
    if imp.k == 1 {
        return 1.0;
    }
    let mean = (0..imp.p)
        .map(|obj| 1.0 - entropy_base_len(&imp.slot_importance[obj * imp.k..(obj + 1) * imp.k]))
        .sum::<f64>()
        / imp.p as f64;
    mean.clamp(0.0, 1.0)
}

/// Column-entropy score with the columns listed that carried no mass (these
/// are scored as uniform).
#[derive(Debug, Clone)]
pub struct ModularityScore {
    pub value: f64,
    pub degenerate_slots: Vec<usize>,
}

/// Mean over slot columns of 1 − entropy of the column's object distribution;
/// absent when only one object exists.
pub fn slot_modularity(imp: &ImportanceMatrix) -> Option<ModularityScore> {
    if imp.p == 1 {
        return None;
    }
    let mut degenerate_slots = Vec::new();
    let mut acc = 0.0;
    for j in 0..imp.k {
        let mut col: Vec<f64> = (0..imp.p).map(|obj| imp.slot_importance[obj * imp.k + j]).collect();
        let sum: f64 = col.iter().sum();
        if sum == 0.0 {
            col.fill(1.0 / imp.p as f64);
            degenerate_slots.push(j);
        } else {
            for v in &mut col {
                *v /= sum;
            }
        }
        acc += 1.0 - entropy_base_len(&col);
    }
    Some(ModularityScore { value: (acc / imp.k as f64).clamp(0.0, 1.0), degenerate_slots })
}

/// One probe target's test-split accuracy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetR2 {
    pub object: String,
    pub coord: String,
    pub r2: f64,
}

/// Seeds a run was driven by.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedEcho {
    pub data: u64,
    pub init: u64,
    pub sampling: u64,
}

/// Where the evaluated model and data came from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint: String,
    pub dataset: String,
    pub seeds: SeedEcho,
}

/// The full evaluation result, serialized to metrics.json; metrics.csv
/// mirrors the numeric rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r2_per_target: Vec<TargetR2>,
    pub slot_accuracy_mean: f64,
    pub compactness: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modularity: Option<f64>,
    pub degenerate_flags: Vec<String>,
    pub config: serde_json::Value,
    pub conventions: String,
    pub provenance: Provenance,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// `metric,value` rows; numbers formatted exactly as in the JSON.
    pub fn to_csv(&self) -> String {
        let num = |v: f64| serde_json::to_string(&v).expect("finite numbers");
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("slot_accuracy_mean,{}\n", num(self.slot_accuracy_mean)));
        out.push_str(&format!("compactness,{}\n", num(self.compactness)));
        if let Some(m) = self.modularity {
            out.push_str(&format!("modularity,{}\n", num(m)));
        }
        for t in &self.r2_per_target {
            out.push_str(&format!("r2.{}.{},{}\n", t.object, t.coord, num(t.r2)));
        }
        out
    }
}
