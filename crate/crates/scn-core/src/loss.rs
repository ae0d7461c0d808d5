//! Training objectives: the two contrastive terms, their weighted sum, and
//! the supervised position-regression baseline.

use crate::dataset::TransitionBatch;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::model::{encode, ArchConfig, ModelIds};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Weighting of the slot-diversity term in the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub lambda_diversity: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_diversity: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda_diversity.is_finite() || self.lambda_diversity < 0.0 {
            return Err(Error::Argument(format!(
                "loss.lambda must be a non-negative finite number, got {}",
                self.lambda_diversity
            )));
        }
        Ok(())
    }
}

/// Handles to the combined loss and its components (diversity is always
/// evaluated for logging, even at λ=0 where it does not train).
#[derive(Debug, Clone, Copy)]
pub struct TotalLoss {
    pub total: ValueId,
    pub saliency: ValueId,
    pub diversity: ValueId,
}

/// Mean classification loss of picking each pair's true second frame among
/// the batch's N second frames, scored per slot by f_jj.
fn saliency_from_slots<T: Element>(
    tape: &mut Tape<T>,
    slots_t: ValueId,
    w: ValueId,
    slots_next: ValueId,
) -> Result<ValueId> {
    let (n, k) = match tape.shape(slots_t)? {
        [n, k, _] => (*n, *k),
        s => return Err(Error::dimension("saliency slots", "[n, k, d]", format!("{s:?}"))),
    };
    let scores = tape.saliency_scores(slots_t, w, slots_next)?;
    // Row j·N + p classifies pair p's own second frame: class p.
    let targets = (0..k).flat_map(|_| 0..n).collect();
    let per_row = tape.nce_rows(scores, targets)?;
    tape.mean_all(per_row)
}

/// Mean classification loss of matching slot j at time t to slot j (among all
/// K slots) at time t+1, scored by f_ji.
fn diversity_from_slots<T: Element>(
    tape: &mut Tape<T>,
    slots_t: ValueId,
    w: ValueId,
    slots_next: ValueId,
) -> Result<ValueId> {
    let (n, k) = match tape.shape(slots_t)? {
        [n, k, _] => (*n, *k),
        s => return Err(Error::dimension("diversity slots", "[n, k, d]", format!("{s:?}"))),
    };
    let scores = tape.diversity_scores(slots_t, w, slots_next)?;
    // Row p·K + j classifies the same slot across the step: class j.
    let targets = (0..n).flat_map(|_| 0..k).collect();
    let per_row = tape.nce_rows(scores, targets)?;
    tape.mean_all(per_row)
}

fn encode_pair<T: Element>(
    tape: &mut Tape<T>,
    arch: &ArchConfig,
    ids: &ModelIds,
    batch: &TransitionBatch<T>,
) -> Result<(ValueId, ValueId)> {
    let first = tape.constant(&batch.first);
    let second = tape.constant(&batch.second);
    Ok((encode(tape, arch, ids, first)?, encode(tape, arch, ids, second)?))
}

/// Time-contrastive term alone.
pub fn loss_saliency<T: Element>(
    tape: &mut Tape<T>,
    arch: &ArchConfig,
    ids: &ModelIds,
    batch: &TransitionBatch<T>,
) -> Result<ValueId> {
    let (st, sn) = encode_pair(tape, arch, ids, batch)?;
    saliency_from_slots(tape, st, ids.scorer_w, sn)
}

/// Slot-diversity term alone (uses the dedicated map when the model carries
/// one, the shared map otherwise).
pub fn loss_diversity<T: Element>(
    tape: &mut Tape<T>,
    arch: &ArchConfig,
    ids: &ModelIds,
    batch: &TransitionBatch<T>,
) -> Result<ValueId> {
    let (st, sn) = encode_pair(tape, arch, ids, batch)?;
    let w = ids.scorer_w_div.unwrap_or(ids.scorer_w);
    diversity_from_slots(tape, st, w, sn)
}

/// L = L1 + λ·L2, encoding each frame once. Components are returned for
/// logging; at λ=0 the total aliases L1 and L2 stays out of the gradient.
pub fn total_loss<T: Element>(
    tape: &mut Tape<T>,
    arch: &ArchConfig,
    ids: &ModelIds,
    batch: &TransitionBatch<T>,
    config: &LossConfig,
) -> Result<TotalLoss> {
    config.validate()?;
    let (st, sn) = encode_pair(tape, arch, ids, batch)?;
    let saliency = saliency_from_slots(tape, st, ids.scorer_w, sn)?;
    let w_div = ids.scorer_w_div.unwrap_or(ids.scorer_w);
    let diversity = diversity_from_slots(tape, st, w_div, sn)?;
    let total = if config.lambda_diversity == 0.0 {
        saliency
    } else {
        let scaled = tape.scale(diversity, T::from_f64(config.lambda_diversity))?;
        tape.add(saliency, scaled)?
    };
    Ok(TotalLoss { total, saliency, diversity })
}

/// Supervised baseline: slot j's linear readout regresses object j's
/// normalized (x, y); mean squared error over batch, slots, and coordinates.
pub fn loss_supervised<T: Element>(
    tape: &mut Tape<T>,
    arch: &ArchConfig,
    ids: &ModelIds,
    frames: &Tensor<T>,
    targets: &Tensor<T>,
) -> Result<ValueId> {
    let (b, p) = match targets.shape()[..] {
        [b, p, 2] => (b, p),
        _ => {
            return Err(Error::dimension(
                "supervised targets",
                "[batch, objects, 2]",
                format!("{:?}", targets.shape()),
            ))
        }
    };
    if p != arch.k {
        return Err(Error::Argument(format!(
            "supervised training needs one slot per object: {} slots vs {p} objects",
            arch.k
        )));
    }
    if ids.readout.len() != arch.k {
        return Err(Error::Argument(format!(
            "model carries {} readout heads, need {}",
            ids.readout.len(),
            arch.k
        )));
    }
    if frames.shape().first() != Some(&b) {
        return Err(Error::dimension(
            "supervised batch",
            format!("{b} frames to match targets"),
            format!("{:?}", frames.shape()),
        ));
    }
    let f = tape.constant(frames);
    let slots = encode(tape, arch, ids, f)?;
    let mut acc: Option<ValueId> = None;
    for (j, &(rw, rb)) in ids.readout.iter().enumerate() {
        let slot = tape.narrow_dim1(slots, j, 1)?;
        let slot = tape.reshape(slot, vec![b, arch.d])?;
        let pred = tape.linear(slot, rw, rb)?;
        let tj: Vec<T> = (0..b)
            .flat_map(|bi| {
                let base = (bi * p + j) * 2;
                [targets.data()[base], targets.data()[base + 1]]
            })
            .collect();
        let tj = tape.constant_owned(Tensor::new(vec![b, 2], tj)?);
        let mse = tape.mse_mean(pred, tj)?;
        acc = Some(match acc {
            None => mse,
            Some(a) => tape.add(a, mse)?,
        });
    }
    let sum = acc.expect("k ≥ 1 by architecture validation");
    tape.scale(sum, T::from_f64(1.0 / arch.k as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, load_dataset};
    use crate::model::{init_model, load_model, ModelOptions, ModelParams};
    use crate::optim::{AdamHyper, AdamState};
    use crate::rng::{stream_rng, Stream};
    use crate::world::WorldConfig;
    use rand::Rng;

    fn tiny_model<T: Element>(k: usize, seed: u64, options: ModelOptions) -> (ArchConfig, ModelParams<T>) {
        let arch = ArchConfig::reduced(k, 2, 4);
        let params = init_model(&arch, options, &mut stream_rng(seed, Stream::Init)).unwrap();
        (arch, params)
    }

    fn random_batch<T: Element>(arch: &ArchConfig, n: usize, seed: u64) -> TransitionBatch<T> {
        let mut rng = stream_rng(seed, Stream::Data);
        let numel = n * arch.in_channels * arch.in_h * arch.in_w;
        let mut draw = || {
            let data = (0..numel).map(|_| T::from_f64(rng.random_range(0.0..1.0))).collect();
            Tensor::new(vec![n, arch.in_channels, arch.in_h, arch.in_w], data).unwrap()
        };
        TransitionBatch { first: draw(), second: draw() }
    }

    #[test]
    fn single_pair_saliency_is_exactly_zero() {
        let (arch, params) = tiny_model::<f64>(2, 1, ModelOptions::default());
        let batch = random_batch(&arch, 1, 2);
        let mut tape = Tape::new();
        let ids = load_model(&mut tape, &params, false);
        let l1 = loss_saliency(&mut tape, &arch, &ids, &batch).unwrap();
        assert_eq!(tape.value_scalar(l1).unwrap(), 0.0);
    }

    #[test]
    fn single_slot_diversity_is_exactly_zero() {
        let (arch, params) = tiny_model::<f64>(1, 3, ModelOptions::default());
        let batch = random_batch(&arch, 3, 4);
        let mut tape = Tape::new();
        let ids = load_model(&mut tape, &params, false);
        let l2 = loss_diversity(&mut tape, &arch, &ids, &batch).unwrap();
        assert_eq!(tape.value_scalar(l2).unwrap(), 0.0);
    }

    #[test]
    fn zero_scorer_gives_log_uniform_losses_and_their_sum() {
        let (arch, mut params) = tiny_model::<f64>(2, 5, ModelOptions::default());
        params.scorer.w.data_mut().fill(0.0);
        let batch = random_batch(&arch, 3, 6);
        let mut tape = Tape::new();
        let ids = load_model(&mut tape, &params, false);
        let tl = total_loss(&mut tape, &arch, &ids, &batch, &LossConfig::default()).unwrap();
        assert_eq!(tape.value_scalar(tl.saliency).unwrap(), 3f64.ln());
        assert_eq!(tape.value_scalar(tl.diversity).unwrap(), 2f64.ln());
        assert_eq!(tape.value_scalar(tl.total).unwrap(), 3f64.ln() + 2f64.ln());
    }

    #[test]
    fn two_pair_single_slot_saliency_matches_hand_enumeration() {
        // Slots at t: [1,0] and [0,1]; at t+1: [2,0] and [0,3]; W = I.
        let mut tape = Tape::<f64>::new();
        let st = tape.constant_owned(Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let sn = tape.constant_owned(Tensor::new(vec![2, 1, 2], vec![2.0, 0.0, 0.0, 3.0]).unwrap());
        let w = tape.constant_owned(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let l1 = saliency_from_slots(&mut tape, st, w, sn).unwrap();
        // Pair 0 scores [2, 0] with class 0; pair 1 scores [0, 3] with class 1.
        let want = ((1.0 + (-2.0f64).exp()).ln() + (1.0 + (-3.0f64).exp()).ln()) / 2.0;
        assert!((tape.value_scalar(l1).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn two_slot_diversity_matches_hand_enumeration() {
        // One pair, two slots; W = I.
        let mut tape = Tape::<f64>::new();
        let st = tape.constant_owned(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let sn = tape.constant_owned(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap());
        let w = tape.constant_owned(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let l2 = diversity_from_slots(&mut tape, st, w, sn).unwrap();
        // Slot 0 scores [1, 1] with class 0; slot 1 scores [0, 1] with class 1.
        let row0 = (1f64.exp() + 1f64.exp()).ln() - 1.0;
        let row1 = (1.0 + 1f64.exp()).ln() - 1.0;
        let want = (row0 + row1) / 2.0;
        assert!((tape.value_scalar(l2).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn lambda_composes_the_reported_components() {
        let (arch, params) = tiny_model::<f64>(3, 7, ModelOptions::default());
        let batch = random_batch(&arch, 4, 8);
        for lambda in [0.0, 0.3, 1.0, 2.5] {
            let mut tape = Tape::new();
            let ids = load_model(&mut tape, &params, false);
            let cfg = LossConfig { lambda_diversity: lambda };
            let tl = total_loss(&mut tape, &arch, &ids, &batch, &cfg).unwrap();
            let (t, l1, l2) = (
                tape.value_scalar(tl.total).unwrap(),
                tape.value_scalar(tl.saliency).unwrap(),
                tape.value_scalar(tl.diversity).unwrap(),
            );
            assert!((t - (l1 + lambda * l2)).abs() < 1e-12, "λ={lambda}");
            assert!(l1 >= 0.0 && l2 >= 0.0);
            if lambda == 0.0 {
                assert_eq!(t, l1);
            }
        }
        assert!(total_loss(
            &mut Tape::<f64>::new(),
            &arch,
            &load_model(&mut Tape::new(), &params, false),
            &batch,
            &LossConfig { lambda_diversity: -1.0 },
        )
        .is_err());
    }

    #[test]
    fn separate_diversity_map_is_used_when_present() {
        let (arch, mut params) =
            tiny_model::<f64>(2, 9, ModelOptions { separate_scorers: true, with_readout: false });
        // Zero the diversity map only: L2 pins to ln K while L1 stays generic.
        params.scorer.w_div.as_mut().unwrap().data_mut().fill(0.0);
        let batch = random_batch(&arch, 3, 10);
        let mut tape = Tape::new();
        let ids = load_model(&mut tape, &params, false);
        let tl = total_loss(&mut tape, &arch, &ids, &batch, &LossConfig::default()).unwrap();
        assert_eq!(tape.value_scalar(tl.diversity).unwrap(), 2f64.ln());
        assert_ne!(tape.value_scalar(tl.saliency).unwrap(), 3f64.ln());
    }

    #[test]
    fn supervised_loss_is_zero_against_its_own_predictions() {
        let (arch, params) = tiny_model::<f64>(2, 11, ModelOptions { separate_scorers: false, with_readout: true });
        let batch = random_batch(&arch, 3, 12);
        // First pass reads the model's outputs, second pass uses them as targets.
        let mut probe_tape = Tape::new();
        let ids = load_model(&mut probe_tape, &params, false);
        let f = probe_tape.constant(&batch.first);
        let slots = encode(&mut probe_tape, &arch, &ids, f).unwrap();
        let mut targets = Tensor::zeros(vec![3, 2, 2]);
        for (j, &(rw, rb)) in ids.readout.iter().enumerate() {
            let slot = probe_tape.narrow_dim1(slots, j, 1).unwrap();
            let slot = probe_tape.reshape(slot, vec![3, arch.d]).unwrap();
            let pred = probe_tape.linear(slot, rw, rb).unwrap();
            for bi in 0..3 {
                for c in 0..2 {
                    targets.data_mut()[(bi * 2 + j) * 2 + c] =
                        probe_tape.value(pred).unwrap()[bi * 2 + c];
                }
            }
        }
        let mut tape = Tape::new();
        let ids = load_model(&mut tape, &params, false);
        let l = loss_supervised(&mut tape, &arch, &ids, &batch.first, &targets).unwrap();
        assert_eq!(tape.value_scalar(l).unwrap(), 0.0);
    }

    #[test]
    fn constant_half_readout_against_uniform_targets_is_one_twelfth() {
        let (arch, mut params) = tiny_model::<f64>(2, 13, ModelOptions { separate_scorers: false, with_readout: true });
        for (w, b) in &mut params.readout.as_mut().unwrap().heads {
            w.data_mut().fill(0.0);
            b.data_mut().fill(0.5);
        }
        let n = 2000;
        let batch = random_batch::<f64>(&arch, n, 14);
        let mut rng = stream_rng(99, Stream::Sampling);
        let targets = Tensor::new(
            vec![n, 2, 2],
            (0..n * 4).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let ids = load_model(&mut tape, &params, false);
        let l = loss_supervised(&mut tape, &arch, &ids, &batch.first, &targets).unwrap();
        let got = tape.value_scalar(l).unwrap();
        assert!((got - 1.0 / 12.0).abs() < 5e-3, "{got} vs 1/12");
    }

    #[test]
    fn duplicating_the_batch_preserves_supervised_loss() {
        let (arch, params) = tiny_model::<f64>(2, 15, ModelOptions { separate_scorers: false, with_readout: true });
        let batch = random_batch::<f64>(&arch, 3, 16);
        let mut rng = stream_rng(4, Stream::Sampling);
        let targets: Vec<f64> = (0..3 * 4).map(|_| rng.random_range(0.0..1.0)).collect();
        let t1 = Tensor::new(vec![3, 2, 2], targets.clone()).unwrap();
        let mut doubled_frames = batch.first.data().to_vec();
        doubled_frames.extend_from_within(..);
        let f2 = Tensor::new(vec![6, 3, 16, 16], doubled_frames).unwrap();
        let mut doubled_targets = targets.clone();
        doubled_targets.extend_from_within(..);
        let t2 = Tensor::new(vec![6, 2, 2], doubled_targets).unwrap();

        let eval = |frames: &Tensor<f64>, targets: &Tensor<f64>| {
            let mut tape = Tape::new();
            let ids = load_model(&mut tape, &params, false);
            let l = loss_supervised(&mut tape, &arch, &ids, frames, targets).unwrap();
            tape.value_scalar(l).unwrap()
        };
        let (a, b) = (eval(&batch.first, &t1), eval(&f2, &t2));
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn slot_object_mismatch_is_an_argument_error() {
        let (arch, params) = tiny_model::<f64>(2, 17, ModelOptions { separate_scorers: false, with_readout: true });
        let batch = random_batch::<f64>(&arch, 2, 18);
        let targets = Tensor::<f64>::zeros(vec![2, 3, 2]);
        let mut tape = Tape::new();
        let ids = load_model(&mut tape, &params, false);
        assert!(matches!(
            loss_supervised(&mut tape, &arch, &ids, &batch.first, &targets),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn overfitting_a_fixed_eight_pair_batch_cuts_saliency_below_nine_tenths_log_n() {
        let dir = tempfile::TempDir::new().unwrap();
        let world = WorldConfig {
            width: 16,
            height: 16,
            num_objects: 1,
            sprite_radius: 3.0,
            speed_min: 1.0,
            speed_max: 2.0,
            episode_length: 9,
            palette: vec![[255, 64, 64]],
            background: [0, 0, 0],
            seed: 23,
        };
        generate_dataset(&world, 1, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        let gather = |idxs: &[usize]| {
            let mut t = Tensor::<f32>::zeros(vec![idxs.len(), 3, 16, 16]);
            let n = t.numel() / idxs.len();
            for (row, &i) in idxs.iter().enumerate() {
                ds.fill_frame(i, &mut t.data_mut()[row * n..(row + 1) * n]);
            }
            t
        };
        let batch = TransitionBatch {
            first: gather(&[0, 1, 2, 3, 4, 5, 6, 7]),
            second: gather(&[1, 2, 3, 4, 5, 6, 7, 8]),
        };

        let arch = ArchConfig::reduced(2, 4, 8);
        let mut params: ModelParams<f32> =
            init_model(&arch, ModelOptions::default(), &mut stream_rng(31, Stream::Init)).unwrap();
        let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.numel()).collect();
        let mut adam = AdamState::new(&sizes, AdamHyper { lr: 1e-3, ..AdamHyper::default() });
        let cfg = LossConfig { lambda_diversity: 0.0 };
        let mut last = f32::INFINITY;
        for _ in 0..200 {
            let mut tape = Tape::new();
            let ids = load_model(&mut tape, &params, true);
            let tl = total_loss(&mut tape, &arch, &ids, &batch, &cfg).unwrap();
            tape.backward(tl.total).unwrap();
            let ordered = ids.ordered();
            let mut tensors = params.tensors_mut();
            for (i, id) in ordered.iter().enumerate() {
                let g = match tape.grad(*id) {
                    Some(g) => g.to_vec(),
                    None => vec![0.0; tensors[i].numel()],
                };
                tensors[i].set_grad(g).unwrap();
            }
            adam.adam_step(&mut tensors).unwrap();
            last = tape.value_scalar(tl.saliency).unwrap();
        }
        let bound = 0.9 * 8f32.ln();
        assert!(last < bound, "saliency {last} after 200 steps, need < {bound}");
    }
}
