//! The training recipe: combined BCE+dice loss, seeded 80:10:10 splitting,
//! the epoch loop with Adam and early stopping, and evaluation.

use std::time::Instant;

use indexmap::IndexMap;

use crate::adam::{adam_step, AdamParams, OptimizerState};
use crate::blocks::{Forward, ModelPlan};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{binarize, confusion, ConfusionCounts, MetricsReport};
use crate::params::ParameterStore;
use crate::rng::SeededRng;
use crate::tape::{Mode, NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// Clamp band applied to predictions before the logs in the BCE term.
pub const PRED_CLAMP: (f64, f64) = (1e-7, 1.0 - 1e-7);
/// Smoothing constant of the soft dice term.
pub const DICE_EPS: f64 = 1e-6;
/// Threshold used to binarize predictions for metrics.
pub const BINARIZE_THRESHOLD: f32 = 0.5;

/// Training hyperparameters; the defaults follow the full-scale recipe
/// (Adam at 1e-4, batch 16, 200 epochs with early stopping).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stopping patience in epochs; 0 stops after the first
    /// non-improving epoch.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 16,
            max_epochs: 200,
            patience: 20,
            seed: 42,
        }
    }
}

impl TrainConfig {
    /// Desk-scale default: batch of 4.
    pub fn tiny() -> Self {
        TrainConfig {
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy plus soft dice loss, summed.
///
/// BCE clamps predictions into `[1e-7, 1-1e-7]` before the logs as an
/// explicit recorded op (exact 0/1 would otherwise produce infinities);
/// the dice term uses the raw predictions with `eps = 1e-6` smoothing.
pub fn bce_dice_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: NodeId,
    target: NodeId,
) -> Result<NodeId> {
    let ps = tape.value(pred).shape();
    let ts = tape.value(target).shape();
    if ps != ts {
        return Err(Error::Shape(format!(
            "bce_dice_loss: prediction {ps:?} vs target {ts:?}"
        )));
    }
    if !tape.value(target).data().iter().all(|&v| v == T::ZERO || v == T::ONE) {
        return Err(Error::Numerical("bce_dice_loss target must be binary".into()));
    }

    // BCE over clamped predictions
    let p = tape.clamp(pred, PRED_CLAMP.0, PRED_CLAMP.1)?;
    let log_p = tape.ln(p)?;
    let one_minus_p = tape.affine(p, -1.0, 1.0)?;
    let log_q = tape.ln(one_minus_p)?;
    let one_minus_t = tape.affine(target, -1.0, 1.0)?;
    let pos = tape.mul(target, log_p)?;
    let neg = tape.mul(one_minus_t, log_q)?;
    let ll = tape.add(pos, neg)?;
    let nll = tape.affine(ll, -1.0, 0.0)?;
    let bce = tape.mean_all(nll)?;

    // soft dice on the raw predictions: 1 - (2*sum(pt) + eps) / (sum(p) + sum(t) + eps)
    let pt = tape.mul(pred, target)?;
    let sum_pt = tape.sum_all(pt)?;
    let sum_p = tape.sum_all(pred)?;
    let sum_t = tape.sum_all(target)?;
    let num = tape.affine(sum_pt, 2.0, DICE_EPS)?;
    let den_sum = tape.add(sum_p, sum_t)?;
    let den = tape.affine(den_sum, 1.0, DICE_EPS)?;
    let overlap = tape.div(num, den)?;
    let dice = tape.affine(overlap, -1.0, 1.0)?;

    tape.add(bce, dice)
}

/// Deterministic shuffled split with floor-based partition sizes and the
/// remainder assigned to train. A nonzero-ratio partition that floors to
/// zero takes one sample (so tiny datasets still produce all parts).
pub fn split_dataset<S>(
    samples: Vec<S>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<S>, Vec<S>, Vec<S>)> {
    let (r_train, r_val, r_test) = ratios;
    for r in [r_train, r_val, r_test] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Config(format!("split ratio {r} outside [0,1]")));
        }
    }
    let n = samples.len();
    let needed = 1 + usize::from(r_val > 0.0) + usize::from(r_test > 0.0);
    if n < needed {
        return Err(Error::Data(format!(
            "{n} samples cannot fill {needed} partitions"
        )));
    }
    let mut n_val = (r_val * n as f64).floor() as usize;
    let mut n_test = (r_test * n as f64).floor() as usize;
    if r_val > 0.0 && n_val == 0 {
        n_val = 1;
    }
    if r_test > 0.0 && n_test == 0 {
        n_test = 1;
    }
    if n_val + n_test >= n {
        return Err(Error::Data(format!(
            "{n} samples leave no training data after {n_val} val / {n_test} test"
        )));
    }
    let n_train = n - n_val - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::new(seed).shuffle(&mut order);
    let mut slots: Vec<Option<S>> = samples.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<S> {
        idx.iter()
            .map(|&i| slots[i].take().expect("index used once"))
            .collect()
    };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok((train, val, test))
}

/// Stacks samples into `[B,3,S,S]` image and `[B,1,S,S]` mask batches.
pub fn stack_batch<T: Scalar>(samples: &[&Sample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("empty batch".into()))?;
    let s = first.image.shape().to_vec();
    let b = samples.len();
    let mut images = Vec::with_capacity(b * first.image.len());
    let mut masks = Vec::with_capacity(b * first.mask.len());
    for sample in samples {
        if sample.image.shape() != s.as_slice() {
            return Err(Error::Data(format!(
                "sample '{}' shape {:?} differs from batch shape {s:?}",
                sample.id,
                sample.image.shape()
            )));
        }
        images.extend(sample.image.data().iter().map(|&v| T::from_f64(v as f64)));
        masks.extend(sample.mask.data().iter().map(|&v| T::from_f64(v as f64)));
    }
    let image = Tensor::new(vec![b, 3, s[1], s[2]], images)?;
    let mask = Tensor::new(vec![b, 1, s[1], s[2]], masks)?;
    Ok((image, mask))
}

/// One row of the training history CSV.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// `epoch,train_loss,val_loss,lr,seconds` with wall-clock seconds last.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,lr,seconds\n");
    for r in history {
        out.push_str(&format!(
            "{},{:.6},{:.6},{},{:.3}\n",
            r.epoch, r.train_loss, r.val_loss, r.lr, r.seconds
        ));
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome<T: Scalar> {
    /// Parameters (and running statistics) of the best-validation epoch.
    pub params: ParameterStore<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Tape, registered parameter nodes, output node and loss node of one batch.
type BatchGraph<T> = (Tape<T>, Vec<(String, NodeId)>, NodeId, NodeId);

/// Forward + loss over one batch.
fn batch_loss<T: Scalar>(
    plan: &ModelPlan,
    store: &mut ParameterStore<T>,
    images: &Tensor<T>,
    masks: &Tensor<T>,
    mode: Mode,
) -> Result<BatchGraph<T>> {
    let mut tape = Tape::new();
    let img = tape.leaf(images.clone());
    let mut fwd = Forward::new(&mut tape, store, mode);
    let out = plan.forward(&mut fwd, img)?;
    let registered = fwd.registered_params().to_vec();
    drop(fwd);
    let target = tape.leaf(masks.clone());
    let loss = bce_dice_loss(&mut tape, out, target)?;
    Ok((tape, registered, out, loss))
}

/// The epoch loop: seeded shuffling, minibatch Adam steps, per-epoch
/// validation, early stopping on the validation loss with best-weights
/// restoration.
pub fn train<T: Scalar>(
    plan: &ModelPlan,
    mut store: ParameterStore<T>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("train and val sets must be non-empty".into()));
    }
    let mut rng = SeededRng::new(cfg.seed);
    let mut opt_state = OptimizerState::new(&store);
    let opt = AdamParams::with_lr(cfg.lr);

    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = store.clone();
    let mut epochs_without_improvement = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (images, masks) = stack_batch::<T>(&batch)?;
            let (tape, registered, _out, loss) =
                batch_loss(plan, &mut store, &images, &masks, Mode::Train)?;
            let loss_v = tape.value(loss).item().to_f64();
            if !loss_v.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_index}"
                )));
            }
            let grads = tape.backward(loss)?;
            let mut by_name: IndexMap<String, Tensor<T>> = IndexMap::new();
            for (name, id) in registered {
                by_name.insert(name, grads.get_or_zeros(&tape, id));
            }
            adam_step(&mut store, &by_name, &mut opt_state, &opt)?;
            loss_sum += loss_v * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = loss_sum / seen as f64;
        let val_loss = dataset_loss(plan, &store, val_set, cfg.batch_size)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: cfg.lr,
            seconds: t0.elapsed().as_secs_f64(),
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = store.clone();
            epochs_without_improvement = 0;
        } else {
            epochs_without_improvement += 1;
            if epochs_without_improvement > cfg.patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        params: best_params,
        history,
        best_epoch,
        best_val_loss: best_val,
    })
}

/// Mean loss over a dataset in eval mode (no parameter mutation).
pub fn dataset_loss<T: Scalar>(
    plan: &ModelPlan,
    store: &ParameterStore<T>,
    data: &[Sample],
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let mut local = store.clone();
    let mut loss_sum = 0.0;
    for chunk in data.chunks(batch_size.max(1)) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let (images, masks) = stack_batch::<T>(&batch)?;
        let (tape, _, _, loss) = batch_loss(plan, &mut local, &images, &masks, Mode::Eval)?;
        loss_sum += tape.value(loss).item().to_f64() * batch.len() as f64;
    }
    Ok(loss_sum / data.len() as f64)
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub mean_loss: f64,
    pub report: MetricsReport,
}

/// Eval-mode loss and metrics over a dataset. Pure: runs on a copy of the
/// store, so evaluating twice yields identical reports.
pub fn evaluate<T: Scalar>(
    plan: &ModelPlan,
    store: &ParameterStore<T>,
    data: &[Sample],
    batch_size: usize,
) -> Result<EvalOutcome> {
    if data.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let mut local = store.clone();
    let mut counts: Vec<ConfusionCounts> = Vec::with_capacity(data.len());
    let mut loss_sum = 0.0;
    for chunk in data.chunks(batch_size.max(1)) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let (images, masks) = stack_batch::<T>(&batch)?;
        let (tape, _, out, loss) = batch_loss(plan, &mut local, &images, &masks, Mode::Eval)?;
        loss_sum += tape.value(loss).item().to_f64() * batch.len() as f64;
        let pred: Tensor<f32> = tape.value(out).cast();
        let pred_bin = binarize(&pred, BINARIZE_THRESHOLD)?;
        for (i, sample) in chunk.iter().enumerate() {
            let plane = sample.mask.len();
            let img_pred = Tensor::new(
                sample.mask.shape().to_vec(),
                pred_bin.data()[i * plane..(i + 1) * plane].to_vec(),
            )?;
            counts.push(confusion(&img_pred, &sample.mask)?);
        }
    }
    let report = MetricsReport::from_counts(&counts)?;
    Ok(EvalOutcome {
        mean_loss: loss_sum / data.len() as f64,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_field<T: Scalar>(shape: &[usize], vals: &[f64]) -> Tensor<T> {
        Tensor::new(
            shape.to_vec(),
            vals.iter().map(|&v| T::from_f64(v)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn loss_zero_when_prediction_matches_target() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::full(vec![1, 1, 2, 2], 1.0 - 1e-9));
        let t = tape.leaf(Tensor::ones(vec![1, 1, 2, 2]));
        let loss = bce_dice_loss(&mut tape, p, t).unwrap();
        assert!(tape.value(loss).item() < 1e-6);
    }

    #[test]
    fn loss_hand_value_for_half_predictions() {
        // pred all 0.5, target all 1: BCE = ln 2, dice = 1/3
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::full(vec![1, 1, 4, 4], 0.5));
        let t = tape.leaf(Tensor::ones(vec![1, 1, 4, 4]));
        let loss = bce_dice_loss(&mut tape, p, t).unwrap();
        let want = std::f64::consts::LN_2 + 1.0 / 3.0;
        assert!(
            (tape.value(loss).item() - want).abs() < 1e-6,
            "{} vs {want}",
            tape.value(loss).item()
        );
    }

    #[test]
    fn loss_handles_exact_zero_one_predictions() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(scalar_field(&[1, 1, 1, 2], &[0.0, 1.0]));
        let t = tape.leaf(scalar_field(&[1, 1, 1, 2], &[0.0, 1.0]));
        let loss = bce_dice_loss(&mut tape, p, t).unwrap();
        assert!(tape.value(loss).item().is_finite());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(5);
        let target = Tensor::from_fn(vec![1, 1, 4, 4], |_| {
            if rng.uniform() < 0.5 {
                0.0
            } else {
                1.0
            }
        });
        let point = Tensor::from_fn(vec![1, 1, 4, 4], |_| rng.uniform_in(0.05, 0.95));
        let t_c = target.clone();
        let err = crate::gradcheck::finite_diff_check(
            move |tape, p| {
                let t = tape.leaf(t_c.clone());
                bce_dice_loss(tape, p, t)
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "bce+dice gradient err {err}");
    }

    #[test]
    fn loss_is_non_negative_on_random_inputs() {
        let mut rng = SeededRng::new(21);
        for _ in 0..50 {
            let mut tape = Tape::<f64>::new();
            let p = tape.leaf(Tensor::from_fn(vec![1, 1, 3, 3], |_| rng.uniform()));
            let t = tape.leaf(Tensor::from_fn(vec![1, 1, 3, 3], |_| {
                if rng.uniform() < 0.5 {
                    0.0
                } else {
                    1.0
                }
            }));
            let loss = bce_dice_loss(&mut tape, p, t).unwrap();
            assert!(tape.value(loss).item() >= 0.0);
        }
    }

    #[test]
    fn loss_rejects_non_binary_target() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::full(vec![1, 1, 2, 2], 0.5));
        let t = tape.leaf(Tensor::full(vec![1, 1, 2, 2], 0.3));
        assert!(bce_dice_loss(&mut tape, p, t).is_err());
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let sizes = |n: usize| {
            let samples: Vec<usize> = (0..n).collect();
            let (tr, va, te) = split_dataset(samples, (0.8, 0.1, 0.1), 1).unwrap();
            (tr.len(), va.len(), te.len())
        };
        assert_eq!(sizes(100), (80, 10, 10));
        assert_eq!(sizes(10), (8, 1, 1));
        assert_eq!(sizes(11), (9, 1, 1)); // remainder to train
        assert_eq!(sizes(3), (1, 1, 1)); // nonzero ratios keep one sample
    }

    #[test]
    fn split_partitions_are_disjoint_and_cover() {
        let samples: Vec<usize> = (0..37).collect();
        let (tr, va, te) = split_dataset(samples, (0.8, 0.1, 0.1), 9).unwrap();
        let mut all: Vec<usize> = tr.iter().chain(&va).chain(&te).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..37).collect::<Vec<_>>());

        // deterministic per seed
        let again = split_dataset((0..37).collect::<Vec<usize>>(), (0.8, 0.1, 0.1), 9).unwrap();
        assert_eq!(tr, again.0);
        assert_eq!(va, again.1);
        assert_eq!(te, again.2);
    }

    #[test]
    fn split_rejects_too_few_samples() {
        assert!(split_dataset(vec![1usize, 2], (0.8, 0.1, 0.1), 0).is_err());
    }
}
