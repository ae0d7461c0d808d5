//! Frozen-encoder linear probing: dataset assembly, closed-form ridge
//! regression, and R² slot accuracy.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kernels::mm_tn;
use crate::model::{encode_frames, ArchConfig, ModelParams};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use std::fmt;

const ENCODE_CHUNK: usize = 64;

/// Which coordinate of which object a probe target tracks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetDescriptor {
    pub object: String,
    pub coord: char,
}

impl fmt::Display for TargetDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.object, self.coord)
    }
}

/// Representations and normalized targets for probe fitting. Feature row i is
/// frame i's K slots concatenated; target column order is object-major
/// (obj0.x, obj0.y, obj1.x, …).
#[derive(Debug, Clone)]
pub struct ProbeDataset {
    /// [m, k·d], row-major.
    pub representations: Vec<f64>,
    /// [m, t], row-major, values in [0,1].
    pub targets: Vec<f64>,
    pub descriptors: Vec<TargetDescriptor>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub k: usize,
    pub d: usize,
}

impl ProbeDataset {
    pub fn num_rows(&self) -> usize {
        self.targets.len() / self.descriptors.len().max(1)
    }

    pub fn feature_width(&self) -> usize {
        self.k * self.d
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        let f = self.feature_width();
        &self.representations[i * f..(i + 1) * f]
    }

    pub fn target_at(&self, row: usize, target: usize) -> f64 {
        self.targets[row * self.descriptors.len() + target]
    }
}

/// Encodes the first `num_frames` frames without gradients and pairs them
/// with width/height-normalized positions, split train/test by shuffled index.
pub fn build_probe_dataset<R: Rng>(
    ds: &Dataset,
    arch: &ArchConfig,
    params: &ModelParams<f32>,
    num_frames: usize,
    split_fraction: f64,
    rng: &mut R,
) -> Result<ProbeDataset> {
    if num_frames < 2 {
        return Err(Error::Argument("probe dataset needs at least 2 frames".into()));
    }
    if num_frames > ds.frame_count() {
        return Err(Error::Argument(format!(
            "probe dataset wants {num_frames} frames, dataset holds {}",
            ds.frame_count()
        )));
    }
    let n_train = (num_frames as f64 * split_fraction).round() as usize;
    if !(0.0..=1.0).contains(&split_fraction) || n_train == 0 || n_train >= num_frames {
        return Err(Error::Argument(format!(
            "split fraction {split_fraction} leaves an empty train or test side for {num_frames} frames"
        )));
    }
    let m = &ds.manifest;
    let (k, d) = (arch.k, arch.d);
    let f = k * d;
    let mut representations = vec![0.0f64; num_frames * f];
    let frame_elems = m.channels * m.height * m.width;
    let mut start = 0usize;
    while start < num_frames {
        let b = ENCODE_CHUNK.min(num_frames - start);
        let mut frames = Tensor::<f32>::zeros(vec![b, m.channels, m.height, m.width]);
        for row in 0..b {
            ds.fill_frame(start + row, &mut frames.data_mut()[row * frame_elems..(row + 1) * frame_elems]);
        }
        let slots = encode_frames(arch, params, &frames)?;
        for (dst, &v) in representations[start * f..(start + b) * f].iter_mut().zip(slots.data()) {
            *dst = v as f64;
        }
        start += b;
    }

    let p = ds.num_objects();
    let mut targets = vec![0.0f64; num_frames * p * 2];
    let mut descriptors = Vec::with_capacity(p * 2);
    for obj in &m.objects {
        descriptors.push(TargetDescriptor { object: obj.clone(), coord: 'x' });
        descriptors.push(TargetDescriptor { object: obj.clone(), coord: 'y' });
    }
    for frame in 0..num_frames {
        for obj in 0..p {
            let [x, y] = ds.label(frame, obj);
            targets[(frame * p + obj) * 2] = x / m.width as f64;
            targets[(frame * p + obj) * 2 + 1] = y / m.height as f64;
        }
    }

    let mut order: Vec<usize> = (0..num_frames).collect();
    order.shuffle(rng);
    let test_idx = order.split_off(n_train);
    Ok(ProbeDataset {
        representations,
        targets,
        descriptors,
        train_idx: order,
        test_idx,
        k,
        d,
    })
}

/// One fitted regressor: normalized target ≈ features · weights + intercept.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub descriptor: TargetDescriptor,
}

impl LinearProbe {
    /// Predictions for the given dataset rows.
    pub fn predict(&self, ds: &ProbeDataset, rows: &[usize]) -> Vec<f64> {
        rows.iter()
            .map(|&i| {
                self.intercept
                    + ds.feature_row(i).iter().zip(&self.weights).map(|(x, w)| x * w).sum::<f64>()
            })
            .collect()
    }
}

/// In-place Cholesky solve of the symmetric positive-definite system a·x = b.
fn cholesky_solve(a: &mut [f64], b: &mut [f64], n: usize) -> Result<()> {
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for t in 0..j {
                s -= a[i * n + t] * a[j * n + t];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Numeric(
                        "probe normal equations are singular; refit with ridge > 0".into(),
                    ));
                }
                a[i * n + i] = s.sqrt();
            } else {
                a[i * n + j] = s / a[j * n + j];
            }
        }
    }
    for i in 0..n {
        let mut s = b[i];
        for t in 0..i {
            s -= a[i * n + t] * b[t];
        }
        b[i] = s / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for t in i + 1..n {
            s -= a[t * n + i] * b[t];
        }
        b[i] = s / a[i * n + i];
    }
    Ok(())
}

/// Closed-form ridge regression on the train split, centered:
/// w = (XcᵀXc + ridge·I)⁻¹ Xcᵀ yc, intercept = ȳ − x̄ᵀw.
pub fn fit_probe(ds: &ProbeDataset, target_index: usize, ridge: f64) -> Result<LinearProbe> {
    if target_index >= ds.descriptors.len() {
        return Err(Error::Argument(format!(
            "target index {target_index} out of range for {} targets",
            ds.descriptors.len()
        )));
    }
    if !ridge.is_finite() || ridge < 0.0 {
        return Err(Error::Argument(format!("ridge must be a non-negative finite number, got {ridge}")));
    }
    let f = ds.feature_width();
    let m = ds.train_idx.len();
    if m < 2 {
        return Err(Error::Argument(format!("probe fitting needs ≥ 2 train rows, got {m}")));
    }
    let mut x_mean = vec![0.0f64; f];
    let mut y_mean = 0.0f64;
    for &i in &ds.train_idx {
        for (acc, &v) in x_mean.iter_mut().zip(ds.feature_row(i)) {
            *acc += v;
        }
        y_mean += ds.target_at(i, target_index);
    }
    for v in &mut x_mean {
        *v /= m as f64;
    }
    y_mean /= m as f64;

    let mut xc = vec![0.0f64; m * f];
    let mut yc = vec![0.0f64; m];
    for (row, &i) in ds.train_idx.iter().enumerate() {
        for (c, (&v, &mu)) in ds.feature_row(i).iter().zip(&x_mean).enumerate() {
            xc[row * f + c] = v - mu;
        }
        yc[row] = ds.target_at(i, target_index) - y_mean;
    }
    let mut gram = vec![0.0f64; f * f];
    mm_tn(&mut gram, &xc, &xc, f, m, f);
    for i in 0..f {
        gram[i * f + i] += ridge;
    }
    let mut rhs = vec![0.0f64; f];
    mm_tn(&mut rhs, &xc, &yc, f, m, 1);
    cholesky_solve(&mut gram, &mut rhs, f)?;
    let intercept = y_mean - x_mean.iter().zip(&rhs).map(|(x, w)| x * w).sum::<f64>();
    Ok(LinearProbe { weights: rhs, intercept, descriptor: ds.descriptors[target_index].clone() })
}

/// Coefficient of determination, 1 − SSE/SStot. Undefined (error) when the
/// truth is constant.
pub fn r2_score(predictions: &[f64], truth: &[f64]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::dimension(
            "r2_score",
            format!("{} predictions", truth.len()),
            predictions.len().to_string(),
        ));
    }
    let m = truth.len();
    if m < 2 {
        return Err(Error::Argument(format!("r2_score needs ≥ 2 points, got {m}")));
    }
    let mean = truth.iter().sum::<f64>() / m as f64;
    let ss_tot: f64 = truth.iter().map(|&t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Numeric("r2_score undefined: truth is constant".into()));
    }
    let sse: f64 = predictions.iter().zip(truth).map(|(&p, &t)| (p - t) * (p - t)).sum();
    Ok(1.0 - sse / ss_tot)
}

/// Test-split R² per target plus their mean; targets constant on the test
/// split are excluded and listed.
#[derive(Debug, Clone)]
pub struct SlotAccuracy {
    pub per_target: Vec<(TargetDescriptor, f64)>,
    pub mean: f64,
    pub skipped: Vec<TargetDescriptor>,
}

pub fn slot_accuracy(ds: &ProbeDataset, probes: &[LinearProbe]) -> Result<SlotAccuracy> {
    if probes.len() != ds.descriptors.len() {
        return Err(Error::Argument(format!(
            "{} probes for {} targets",
            probes.len(),
            ds.descriptors.len()
        )));
    }
    let mut per_target = Vec::new();
    let mut skipped = Vec::new();
    for (t, probe) in probes.iter().enumerate() {
        if probe.descriptor != ds.descriptors[t] {
            return Err(Error::Argument(format!(
                "probe {t} fitted for {} but target is {}",
                probe.descriptor, ds.descriptors[t]
            )));
        }
        let predictions = probe.predict(ds, &ds.test_idx);
        let truth: Vec<f64> = ds.test_idx.iter().map(|&i| ds.target_at(i, t)).collect();
        match r2_score(&predictions, &truth) {
            Ok(r2) => per_target.push((probe.descriptor.clone(), r2)),
            Err(Error::Numeric(_)) => skipped.push(probe.descriptor.clone()),
            Err(e) => return Err(e),
        }
    }
    if per_target.is_empty() {
        return Err(Error::Numeric("every probe target is constant on the test split".into()));
    }
    let mean = per_target.iter().map(|(_, r)| r).sum::<f64>() / per_target.len() as f64;
    Ok(SlotAccuracy { per_target, mean, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, load_dataset};
    use crate::model::{init_model, ModelOptions};
    use crate::rng::{stream_rng, Stream};
    use crate::world::WorldConfig;
    use rand_distr::{Distribution, Normal};
    use tempfile::TempDir;

    /// Synthetic dataset: y = X·w* + c (+ noise), split front/back.
    fn synthetic(
        m: usize,
        f: usize,
        w_star: &[f64],
        intercept: f64,
        noise: f64,
        seed: u64,
    ) -> ProbeDataset {
        let mut rng = stream_rng(seed, Stream::Sampling);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let representations: Vec<f64> = (0..m * f).map(|_| normal.sample(&mut rng)).collect();
        let targets: Vec<f64> = (0..m)
            .map(|i| {
                let row = &representations[i * f..(i + 1) * f];
                let base: f64 = row.iter().zip(w_star).map(|(x, w)| x * w).sum();
                base + intercept + noise * normal.sample(&mut rng)
            })
            .collect();
        let n_train = m * 4 / 5;
        ProbeDataset {
            representations,
            targets,
            descriptors: vec![TargetDescriptor { object: "obj0".into(), coord: 'x' }],
            train_idx: (0..n_train).collect(),
            test_idx: (n_train..m).collect(),
            k: 1,
            d: f,
        }
    }

    #[test]
    fn probe_dataset_shapes_split_and_normalization() {
        let dir = TempDir::new().unwrap();
        let world = WorldConfig {
            width: 16,
            height: 16,
            num_objects: 2,
            sprite_radius: 2.0,
            speed_min: 1.0,
            speed_max: 2.0,
            episode_length: 13,
            palette: vec![[255, 0, 0], [0, 255, 0]],
            background: [0, 0, 0],
            seed: 3,
        };
        generate_dataset(&world, 2, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        let arch = ArchConfig::reduced(2, 2, 4);
        let params = init_model(&arch, ModelOptions::default(), &mut stream_rng(1, Stream::Init)).unwrap();
        let mut rng = stream_rng(7, Stream::Sampling);
        let pd = build_probe_dataset(&ds, &arch, &params, 20, 0.8, &mut rng).unwrap();

        assert_eq!(pd.feature_width(), 8);
        assert_eq!(pd.num_rows(), 20);
        assert_eq!(pd.train_idx.len(), 16);
        assert_eq!(pd.test_idx.len(), 4);
        let mut all: Vec<usize> = pd.train_idx.iter().chain(&pd.test_idx).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>(), "disjoint, covering split");
        assert_eq!(
            pd.descriptors.iter().map(|d| d.to_string()).collect::<Vec<_>>(),
            ["obj0.x", "obj0.y", "obj1.x", "obj1.y"]
        );
        for frame in 0..20 {
            for obj in 0..2 {
                let [x, y] = ds.label(frame, obj);
                let nx = pd.target_at(frame, obj * 2);
                let ny = pd.target_at(frame, obj * 2 + 1);
                assert!((0.0..=1.0).contains(&nx) && (0.0..=1.0).contains(&ny));
                assert!((nx * 16.0 - x).abs() < 1e-6, "denormalized x reproduces the label");
                assert!((ny * 16.0 - y).abs() < 1e-6);
            }
        }
        // Representations match a direct single-frame encode.
        let frame: Tensor<f32> = ds.frame(5).unwrap();
        let one = Tensor::new(vec![1, 3, 16, 16], frame.data().to_vec()).unwrap();
        let slots = encode_frames(&arch, &params, &one).unwrap();
        for (a, &b) in pd.feature_row(5).iter().zip(slots.data()) {
            assert_eq!(*a, b as f64);
        }
    }

    #[test]
    fn bad_sizes_and_splits_are_argument_errors() {
        let dir = TempDir::new().unwrap();
        let world = WorldConfig {
            width: 16,
            height: 16,
            num_objects: 1,
            sprite_radius: 2.0,
            speed_min: 1.0,
            speed_max: 1.0,
            episode_length: 5,
            palette: vec![[10, 20, 30]],
            background: [0, 0, 0],
            seed: 0,
        };
        generate_dataset(&world, 1, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        let arch = ArchConfig::reduced(1, 2, 4);
        let params = init_model(&arch, ModelOptions::default(), &mut stream_rng(0, Stream::Init)).unwrap();
        let mut rng = stream_rng(0, Stream::Sampling);
        for (frames, split) in [(6, 0.8), (5, 0.0), (5, 1.0), (5, 0.01), (1, 0.5)] {
            assert!(
                matches!(
                    build_probe_dataset(&ds, &arch, &params, frames, split, &mut rng),
                    Err(Error::Argument(_))
                ),
                "frames {frames}, split {split}"
            );
        }
    }

    #[test]
    fn realizable_linear_target_is_recovered_exactly() {
        let w_star = [0.5, -1.25, 2.0, 0.125];
        let pd = synthetic(50, 4, &w_star, 0.3, 0.0, 11);
        let probe = fit_probe(&pd, 0, 0.0).unwrap();
        for (got, want) in probe.weights.iter().zip(&w_star) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
        assert!((probe.intercept - 0.3).abs() < 1e-9);
        let train_truth: Vec<f64> = pd.train_idx.iter().map(|&i| pd.target_at(i, 0)).collect();
        let r2 = r2_score(&probe.predict(&pd, &pd.train_idx), &train_truth).unwrap();
        assert!(r2 > 1.0 - 1e-9, "train R² {r2}");
    }

    #[test]
    fn huge_ridge_shrinks_to_the_mean_predictor() {
        let pd = synthetic(60, 3, &[1.0, -2.0, 0.5], 0.7, 0.0, 13);
        let probe = fit_probe(&pd, 0, 1e12).unwrap();
        assert!(probe.weights.iter().all(|w| w.abs() < 1e-6), "{:?}", probe.weights);
        let y_mean = pd.train_idx.iter().map(|&i| pd.target_at(i, 0)).sum::<f64>()
            / pd.train_idx.len() as f64;
        assert!((probe.intercept - y_mean).abs() < 1e-6);
    }

    #[test]
    fn three_point_fixture_matches_hand_solved_normal_equations() {
        let pd = ProbeDataset {
            representations: vec![0.0, 1.0, 2.0],
            targets: vec![1.0, 3.0, 4.0],
            descriptors: vec![TargetDescriptor { object: "obj0".into(), coord: 'x' }],
            train_idx: vec![0, 1, 2],
            test_idx: vec![],
            k: 1,
            d: 1,
        };
        let probe = fit_probe(&pd, 0, 0.0).unwrap();
        // Centered: XᵀX = 2, Xᵀy = 3 → w = 1.5; intercept = 8/3 − 1.5.
        assert!((probe.weights[0] - 1.5).abs() < 1e-12);
        assert!((probe.intercept - (8.0 / 3.0 - 1.5)).abs() < 1e-12);
    }

    #[test]
    fn singular_system_advises_ridge() {
        // Two identical feature columns make XᵀX rank-1.
        let mut pd = synthetic(20, 2, &[1.0, 1.0], 0.0, 0.0, 17);
        for i in 0..20 {
            pd.representations[i * 2 + 1] = pd.representations[i * 2];
        }
        let err = fit_probe(&pd, 0, 0.0).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(err.to_string().contains("ridge"), "{err}");
        assert!(fit_probe(&pd, 0, 1e-6).is_ok(), "regularized fit succeeds");
    }

    #[test]
    fn r2_fixed_cases_and_affine_invariance() {
        assert_eq!(r2_score(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(r2_score(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(r2_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), -3.0);

        let truth = [0.2, 0.9, 0.4, 0.7, 0.1];
        let preds = [0.25, 0.8, 0.5, 0.6, 0.15];
        let base = r2_score(&preds, &truth).unwrap();
        let scale = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| 3.5 * x - 1.2).collect() };
        let scaled = r2_score(&scale(&preds), &scale(&truth)).unwrap();
        assert!((base - scaled).abs() < 1e-9, "{base} vs {scaled}");

        assert!(matches!(r2_score(&[1.0, 2.0], &[5.0, 5.0]), Err(Error::Numeric(_))));
        assert!(matches!(r2_score(&[1.0], &[1.0]), Err(Error::Argument(_))));
        assert!(matches!(r2_score(&[1.0], &[1.0, 2.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn closed_form_agrees_with_gradient_descent_oracle() {
        let pd = synthetic(300, 8, &[0.8, -0.3, 1.4, 0.0, 0.2, -1.1, 0.6, 0.05], 0.4, 0.05, 19);
        let probe = fit_probe(&pd, 0, 1e-8).unwrap();

        // Independent solver: full-batch gradient descent on centered data.
        let m = pd.train_idx.len();
        let f = pd.feature_width();
        let mut x_mean = vec![0.0f64; f];
        let mut y_mean = 0.0;
        for &i in &pd.train_idx {
            for (a, &v) in x_mean.iter_mut().zip(pd.feature_row(i)) {
                *a += v / m as f64;
            }
            y_mean += pd.target_at(i, 0) / m as f64;
        }
        let mut w = vec![0.0f64; f];
        let lr = 0.05;
        for _ in 0..4000 {
            let mut grad = vec![0.0f64; f];
            for &i in &pd.train_idx {
                let xc: Vec<f64> = pd.feature_row(i).iter().zip(&x_mean).map(|(x, mu)| x - mu).collect();
                let err: f64 =
                    xc.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() - (pd.target_at(i, 0) - y_mean);
                for (g, &x) in grad.iter_mut().zip(&xc) {
                    *g += 2.0 * err * x / m as f64;
                }
            }
            for (wi, g) in w.iter_mut().zip(&grad) {
                *wi -= lr * g;
            }
        }
        let intercept = y_mean - x_mean.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>();
        let gd = LinearProbe { weights: w, intercept, descriptor: probe.descriptor.clone() };

        let truth: Vec<f64> = pd.test_idx.iter().map(|&i| pd.target_at(i, 0)).collect();
        let r2_cf = r2_score(&probe.predict(&pd, &pd.test_idx), &truth).unwrap();
        let r2_gd = r2_score(&gd.predict(&pd, &pd.test_idx), &truth).unwrap();
        assert!((r2_cf - r2_gd).abs() < 0.02, "closed-form {r2_cf} vs descent {r2_gd}");
    }

    #[test]
    fn slot_accuracy_on_realizable_and_constant_representations() {
        // Two targets sharing one realizable feature map.
        let base = synthetic(100, 4, &[1.0, 0.5, -0.5, 0.25], 0.1, 0.0, 23);
        let mut targets2 = Vec::with_capacity(200);
        for i in 0..100 {
            targets2.push(base.targets[i]);
            let row = base.feature_row(i);
            targets2.push(row[0] - row[3] + 0.2);
        }
        let pd = ProbeDataset {
            representations: base.representations.clone(),
            targets: targets2,
            descriptors: vec![
                TargetDescriptor { object: "obj0".into(), coord: 'x' },
                TargetDescriptor { object: "obj0".into(), coord: 'y' },
            ],
            train_idx: base.train_idx.clone(),
            test_idx: base.test_idx.clone(),
            k: 2,
            d: 2,
        };
        let probes: Vec<LinearProbe> =
            (0..2).map(|t| fit_probe(&pd, t, 1e-8).unwrap()).collect();
        let acc = slot_accuracy(&pd, &probes).unwrap();
        assert!(acc.mean > 0.999, "realizable targets, mean {}", acc.mean);
        assert!(acc.per_target.iter().all(|(_, r)| *r <= 1.0));
        assert!(acc.skipped.is_empty());

        // Constant representations carry no information: R² ≤ 0.
        let mut flat = pd.clone();
        flat.representations.fill(0.25);
        let probes: Vec<LinearProbe> =
            (0..2).map(|t| fit_probe(&flat, t, 1e-4).unwrap()).collect();
        let acc = slot_accuracy(&flat, &probes).unwrap();
        assert!(acc.per_target.iter().all(|(_, r)| *r <= 0.0), "{:?}", acc.per_target);

        // Probe order must match target order.
        let swapped: Vec<LinearProbe> = probes.iter().rev().cloned().collect();
        assert!(slot_accuracy(&pd, &swapped).is_err());
    }
}
