//! Mini-batch training on negative soft dice with plateau LR halving, early
//! stopping, and best-validation checkpointing.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::net::{Mode, NetDef, Tensor};
use super::{batch_from_features, ProbMap, SegModel};
use crate::error::{Error, Result};
use crate::raster::{LabelGrid, Sample};

/// Smoothing constant added to both numerator and denominator of the dice
/// coefficient so empty masks do not divide by zero.
pub const DICE_SMOOTHING: f64 = 1.0;

/// Training schedule constants. Defaults: initial LR 1e-1 halved after 5
/// stagnant validation epochs (floored at 1e-5), early stop after 20 stagnant
/// epochs, at most 50 epochs, batches of 16, dropout 0.2.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub initial_lr: f64,
    pub lr_halving_patience: usize,
    pub min_lr: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub dropout_rate: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            initial_lr: 1e-1,
            lr_halving_patience: 5,
            min_lr: 1e-5,
            early_stop_patience: 20,
            max_epochs: 50,
            batch_size: 16,
            dropout_rate: 0.2,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr <= self.initial_lr) {
            return Err(Error::domain(format!(
                "min_lr {} must be <= initial_lr {}",
                self.min_lr, self.initial_lr
            )));
        }
        if self.lr_halving_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::domain("patiences must be >= 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::domain("batch_size must be >= 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::domain(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Outcome of feeding one validation loss to the scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchedulerStep {
    pub improved: bool,
    pub halved: bool,
    pub stop: bool,
}

/// Plateau learning-rate scheduler with early stopping.
///
/// "Improvement" means a new strict minimum of the validation loss; ties
/// count as stagnation. After `lr_halving_patience` stagnant epochs the
/// learning rate halves once (floored at `min_lr`); it does not halve again
/// until a new strict minimum starts a fresh plateau. Early stop fires once
/// `early_stop_patience` consecutive stagnant epochs accumulate.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    min_lr: f64,
    halving_patience: usize,
    stop_patience: usize,
    best: Option<f64>,
    stagnant: usize,
    halved_this_plateau: bool,
}

impl PlateauScheduler {
    pub fn new(sched: &TrainSchedule) -> PlateauScheduler {
        PlateauScheduler {
            lr: sched.initial_lr,
            min_lr: sched.min_lr,
            halving_patience: sched.lr_halving_patience,
            stop_patience: sched.early_stop_patience,
            best: None,
            stagnant: 0,
            halved_this_plateau: false,
        }
    }

    /// Learning rate to use for the next epoch.
    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Feeds the validation loss observed at the end of an epoch.
    pub fn observe(&mut self, val_loss: f64) -> SchedulerStep {
        let improved = self.best.map_or(true, |b| val_loss < b);
        if improved {
            self.best = Some(val_loss);
            self.stagnant = 0;
            self.halved_this_plateau = false;
            return SchedulerStep {
                improved: true,
                halved: false,
                stop: false,
            };
        }
        self.stagnant += 1;
        let mut halved = false;
        if self.stagnant == self.halving_patience && !self.halved_this_plateau {
            let next = (self.lr / 2.0).max(self.min_lr);
            halved = next < self.lr;
            self.lr = next;
            self.halved_this_plateau = true;
        }
        SchedulerStep {
            improved: false,
            halved,
            stop: self.stagnant >= self.stop_patience,
        }
    }
}

/// One epoch of the training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_secs: f64,
}

/// Per-epoch training curve: losses, learning rate, wall time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainCurve {
    pub epochs: Vec<EpochRecord>,
}

impl TrainCurve {
    pub fn final_val_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val_loss)
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.epochs
            .iter()
            .map(|e| e.val_loss)
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.min(v))))
    }
}

/// Soft dice coefficient `(2*sum(p*t) + s) / (sum(p) + sum(t) + s)` with
/// smoothing `s = 1`. The training loss is its negative.
pub fn dice_coeff(pred: &ProbMap, target: &LabelGrid) -> Result<f64> {
    if pred.height() != target.height() || pred.width() != target.width() {
        return Err(Error::domain(format!(
            "dice dims differ: pred {}x{}, target {}x{}",
            pred.height(),
            pred.width(),
            target.height(),
            target.width()
        )));
    }
    Ok(dice_from_slices(pred.values(), target.values()))
}

pub(crate) fn dice_from_slices(p: &[f64], t: &[u8]) -> f64 {
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut tsum = 0.0;
    for (&pv, &tv) in p.iter().zip(t) {
        inter += pv * tv as f64;
        psum += pv;
        tsum += tv as f64;
    }
    (2.0 * inter + DICE_SMOOTHING) / (psum + tsum + DICE_SMOOTHING)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize) -> Adam {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, def: &NetDef, values: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for range in &def.trainable {
            for i in range.clone() {
                let g = grads[i];
                self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
                self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
                let mhat = self.m[i] / bc1;
                let vhat = self.v[i] / bc2;
                values[i] -= lr * mhat / (vhat.sqrt() + Self::EPS);
            }
        }
    }
}

/// Computes the weighted mean negative dice over a forward trace and the
/// gradient of that loss w.r.t. the sigmoid outputs.
fn batch_loss_and_dprobs(
    probs: &Tensor,
    targets: &[&LabelGrid],
    weights: &[f64],
) -> (f64, Tensor) {
    let total_weight: f64 = weights.iter().sum();
    let mut loss = 0.0;
    let mut d = Tensor::zeros(probs.n, 1, probs.h, probs.w);
    for (i, target) in targets.iter().enumerate() {
        let p = probs.plane(i, 0);
        let t = target.values();
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut tsum = 0.0;
        for (&pv, &tv) in p.iter().zip(t) {
            inter += pv * tv as f64;
            psum += pv;
            tsum += tv as f64;
        }
        let num = 2.0 * inter + DICE_SMOOTHING;
        let den = psum + tsum + DICE_SMOOTHING;
        loss += weights[i] * (-num / den);
        let scale = weights[i] / total_weight;
        let dp = d.plane_mut(i, 0);
        for (dv, &tv) in dp.iter_mut().zip(t) {
            // d(-dice)/dp = -(2t*den - num) / den^2
            *dv = scale * (-(2.0 * tv as f64 * den - num) / (den * den));
        }
    }
    (loss / total_weight, d)
}

/// Single-sample loss (and optionally its parameter gradient) under
/// deterministic train-mode statistics: batch-norm uses the sample's own
/// statistics, dropout is off, running averages are untouched. This is the
/// function the finite-difference gradient check probes.
pub(crate) fn sample_loss_and_grad(
    def: &NetDef,
    values: &mut [f64],
    sample: &Sample,
    compute_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let input = batch_from_features(&[&sample.features]);
    let mut mode = Mode::Train {
        dropout_rate: 0.0,
        rng: None,
        update_running: false,
    };
    let trace = def.forward(values, input, &mut mode);
    let (loss, d_probs) =
        batch_loss_and_dprobs(&trace.probs, &[&sample.labels], &[sample.weight]);
    if !compute_grad {
        return (loss, None);
    }
    let mut grads = vec![0.0; def.len];
    def.backward(values, &trace, d_probs, &mut grads);
    (loss, Some(grads))
}

fn check_sample_dims(model: &SegModel, samples: &[Sample], what: &str) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        if s.features.channels() != model.spec().in_channels {
            return Err(Error::domain(format!(
                "{what} sample {i} has {} channels, model expects {}",
                s.features.channels(),
                model.spec().in_channels
            )));
        }
        let m = model.spec().dim_multiple();
        if s.features.height() % m != 0 || s.features.width() % m != 0 {
            return Err(Error::domain(format!(
                "{what} sample {i} dims {}x{} not divisible by {m}",
                s.features.height(),
                s.features.width()
            )));
        }
        if s.features.height() != s.labels.height() || s.features.width() != s.labels.width() {
            return Err(Error::domain(format!(
                "{what} sample {i} feature/label dims differ"
            )));
        }
        if !(s.weight > 0.0) || !s.weight.is_finite() {
            return Err(Error::domain(format!(
                "{what} sample {i} weight must be positive and finite"
            )));
        }
    }
    Ok(())
}

/// Groups sample indices into batches of at most `batch_size`, splitting
/// whenever spatial dims change (samples of different sizes cannot share a
/// batch tensor).
fn batch_indices(order: &[usize], samples: &[Sample], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = Vec::new();
    for &i in order {
        let dims = (samples[i].features.height(), samples[i].features.width());
        match batches.last_mut() {
            Some(batch)
                if batch.len() < batch_size
                    && (samples[batch[0]].features.height(), samples[batch[0]].features.width())
                        == dims =>
            {
                batch.push(i)
            }
            _ => batches.push(vec![i]),
        }
    }
    batches
}

fn run_batch(
    model: &mut SegModel,
    samples: &[Sample],
    batch: &[usize],
    sched: &TrainSchedule,
    rng: &mut ChaCha8Rng,
) -> (f64, f64, Vec<f64>) {
    let features: Vec<_> = batch.iter().map(|&i| &samples[i].features).collect();
    let targets: Vec<_> = batch.iter().map(|&i| &samples[i].labels).collect();
    let weights: Vec<_> = batch.iter().map(|&i| samples[i].weight).collect();
    let input = batch_from_features(&features);
    let mut mode = Mode::Train {
        dropout_rate: sched.dropout_rate,
        rng: Some(rng),
        update_running: true,
    };
    let trace = model.def.forward(&mut model.values, input, &mut mode);
    let (loss, d_probs) = batch_loss_and_dprobs(&trace.probs, &targets, &weights);
    let mut grads = vec![0.0; model.def.len];
    model.def.backward(&model.values, &trace, d_probs, &mut grads);
    let weight_sum: f64 = weights.iter().sum();
    (loss, weight_sum, grads)
}

/// Weighted mean negative dice over `samples` in eval mode (frozen batch-norm
/// statistics, no dropout).
pub(crate) fn eval_loss(model: &SegModel, samples: &[Sample], batch_size: usize) -> f64 {
    let order: Vec<usize> = (0..samples.len()).collect();
    let mut total = 0.0;
    let mut total_weight = 0.0;
    let mut values = model.values.clone();
    for batch in batch_indices(&order, samples, batch_size) {
        let features: Vec<_> = batch.iter().map(|&i| &samples[i].features).collect();
        let input = batch_from_features(&features);
        let trace = model.def.forward(&mut values, input, &mut Mode::Eval);
        for (k, &i) in batch.iter().enumerate() {
            let d = dice_from_slices(trace.probs.plane(k, 0), samples[i].labels.values());
            total += samples[i].weight * (-d);
            total_weight += samples[i].weight;
        }
    }
    total / total_weight
}

/// Trains `model` on `train_set` with mini-batch Adam on negative dice,
/// halving the learning rate on validation plateaus and stopping early when
/// validation stagnates. Returns the parameters that achieved the best
/// validation loss together with the full per-epoch curve.
pub fn train(
    model: SegModel,
    train_set: &[Sample],
    val_set: &[Sample],
    sched: &TrainSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(SegModel, TrainCurve)> {
    sched.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::domain(
            "train and validation sets must be non-empty".to_string(),
        ));
    }
    check_sample_dims(&model, train_set, "train")?;
    check_sample_dims(&model, val_set, "validation")?;

    let mut model = model;
    let mut adam = Adam::new(model.def.len);
    let mut scheduler = PlateauScheduler::new(sched);
    let mut curve = TrainCurve::default();
    let mut best_values = model.values.clone();
    let mut best_val = f64::INFINITY;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=sched.max_epochs {
        let start = Instant::now();
        let lr = scheduler.lr();
        order.shuffle(rng);
        let mut train_loss_sum = 0.0;
        let mut train_weight_sum = 0.0;
        for (batch_idx, batch) in batch_indices(&order, train_set, sched.batch_size)
            .iter()
            .enumerate()
        {
            let (loss, weight, grads) = run_batch(&mut model, train_set, batch, sched, rng);
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: batch_idx,
                    message: format!("non-finite training loss {loss}"),
                });
            }
            adam.step(&model.def, &mut model.values, &grads, lr);
            train_loss_sum += loss * weight;
            train_weight_sum += weight;
        }
        let train_loss = train_loss_sum / train_weight_sum;
        let val_loss = eval_loss(&model, val_set, sched.batch_size);
        if !val_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                batch: 0,
                message: format!("non-finite validation loss {val_loss}"),
            });
        }
        curve.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            wall_secs: start.elapsed().as_secs_f64(),
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_values = model.values.clone();
        }
        let step = scheduler.observe(val_loss);
        if step.stop {
            break;
        }
    }
    model.values = best_values;
    Ok((model, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::raster::FeatureGrid;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    #[test]
    fn dice_perfect_overlap_is_one() {
        let target = LabelGrid::from_values(2, 2, vec![1, 0, 1, 0]).unwrap();
        let pred = ProbMap::from_values(
            2,
            2,
            vec![1.0 - 1e-12, 1e-12, 1.0 - 1e-12, 1e-12],
        )
        .unwrap();
        assert_relative_eq!(dice_coeff(&pred, &target).unwrap(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn dice_half_probability_closed_form() {
        // p = 0.5 everywhere, t = 1 on N pixels: (N + 1) / (1.5 N + 1).
        for n in [4usize, 64, 1024] {
            let side = (n as f64).sqrt() as usize;
            let n = side * side;
            let target = LabelGrid::from_values(side, side, vec![1; n]).unwrap();
            let pred = ProbMap::constant(side, side, 0.5).unwrap();
            let expect = (n as f64 + 1.0) / (1.5 * n as f64 + 1.0);
            assert_relative_eq!(dice_coeff(&pred, &target).unwrap(), expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn dice_disjoint_masks_is_smoothing_dominated() {
        let n = 32;
        let mut t = vec![0u8; n * n];
        let mut p = vec![1e-9; n * n];
        for i in 0..n * n / 2 {
            t[i] = 1;
        }
        for v in p.iter_mut().skip(n * n / 2) {
            *v = 1.0 - 1e-9;
        }
        let target = LabelGrid::from_values(n, n, t).unwrap();
        let pred = ProbMap::from_values(n, n, p).unwrap();
        assert!(dice_coeff(&pred, &target).unwrap() < 0.01);
    }

    #[test]
    fn dice_rejects_dim_mismatch() {
        let target = LabelGrid::zeros(4, 4).unwrap();
        let pred = ProbMap::constant(4, 8, 0.5).unwrap();
        assert!(dice_coeff(&pred, &target).is_err());
    }

    #[test]
    fn dice_monotone_in_true_pixel_probability() {
        let target = LabelGrid::from_values(2, 2, vec![1, 0, 0, 1]).unwrap();
        let mut last = -1.0;
        for &p0 in &[0.1, 0.3, 0.5, 0.7, 0.9] {
            let pred = ProbMap::from_values(2, 2, vec![p0, 0.2, 0.2, 0.6]).unwrap();
            let d = dice_coeff(&pred, &target).unwrap();
            assert!(d > last);
            last = d;
        }
    }

    #[test]
    fn scheduler_halves_once_per_plateau_and_stops() {
        // Scripted trace: improve x3, stagnate x5, a local (non-record)
        // improvement, stagnate x20.
        let sched = TrainSchedule::default();
        let mut s = PlateauScheduler::new(&sched);
        let mut trace = vec![1.0, 0.9, 0.8];
        trace.extend([0.85; 5]);
        trace.push(0.82);
        trace.extend([0.9; 20]);

        let mut halvings = Vec::new();
        let mut stop_epoch = None;
        for (i, &v) in trace.iter().enumerate() {
            let epoch = i + 1;
            let step = s.observe(v);
            if step.halved {
                halvings.push(epoch);
            }
            if step.stop {
                stop_epoch = Some(epoch);
                break;
            }
        }
        // One halving, 5 stagnant epochs after the last improvement (epoch 3).
        assert_eq!(halvings, vec![8]);
        assert_relative_eq!(s.lr(), 0.05);
        // Early stop exactly 20 epochs after the last improvement.
        assert_eq!(stop_epoch, Some(23));
    }

    #[test]
    fn scheduler_floors_at_min_lr() {
        let sched = TrainSchedule {
            initial_lr: 2e-5,
            min_lr: 1e-5,
            lr_halving_patience: 1,
            early_stop_patience: 100,
            ..TrainSchedule::default()
        };
        let mut s = PlateauScheduler::new(&sched);
        s.observe(1.0);
        for k in 0..4 {
            // Alternate improvements and stagnations to allow repeated halving.
            s.observe(2.0);
            assert!(s.lr() >= 1e-5);
            s.observe(0.5 - k as f64 * 0.01);
        }
        assert_relative_eq!(s.lr(), 1e-5);
    }

    fn toy_samples(n: usize, size: usize, seed: u64) -> Vec<Sample> {
        // Channel 0 is the label with noise; channel 1 is a distractor.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut f = FeatureGrid::zeros(size, size, 2, 1.0).unwrap();
                let mut l = LabelGrid::zeros(size, size).unwrap();
                for r in 0..size {
                    for c in 0..size {
                        let on = rand::Rng::gen_bool(&mut rng, 0.3);
                        l.set(r, c, u8::from(on));
                        f.set(
                            r,
                            c,
                            0,
                            if on { 2.0 } else { -2.0 } + rand::Rng::gen_range(&mut rng, -0.2..0.2),
                        );
                        f.set(r, c, 1, rand::Rng::gen_range(&mut rng, -1.0..1.0));
                    }
                }
                Sample::new(f, l)
            })
            .collect()
    }

    #[test]
    fn train_single_epoch_returns_single_row_curve() {
        let model = SegModel::init(ModelSpec::linear(2), 3);
        let samples = toy_samples(4, 8, 10);
        let sched = TrainSchedule {
            max_epochs: 1,
            ..TrainSchedule::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, curve) = train(model, &samples, &samples, &sched, &mut rng).unwrap();
        assert_eq!(curve.epochs.len(), 1);
        assert_eq!(curve.epochs[0].epoch, 1);
        assert_relative_eq!(curve.epochs[0].lr, 0.1);
    }

    #[test]
    fn train_loss_decreases_on_separable_toy_data() {
        let model = SegModel::init(ModelSpec::linear(2), 3);
        let samples = toy_samples(8, 8, 11);
        let sched = TrainSchedule {
            max_epochs: 30,
            dropout_rate: 0.0,
            initial_lr: 1e-2,
            ..TrainSchedule::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (trained, curve) = train(model, &samples, &samples, &sched, &mut rng).unwrap();
        let first = curve.epochs.first().unwrap().train_loss;
        let best = curve.best_val_loss().unwrap();
        assert!(best < first, "no improvement: first {first}, best {best}");
        // The returned model matches the best validation loss, not the last.
        let reloaded_loss = eval_loss(&trained, &samples, sched.batch_size);
        assert_relative_eq!(reloaded_loss, best, epsilon = 1e-9);
    }

    #[test]
    fn train_lr_sequence_is_non_increasing_and_floored() {
        let model = SegModel::init(ModelSpec::linear(2), 3);
        let samples = toy_samples(4, 8, 12);
        let sched = TrainSchedule {
            max_epochs: 40,
            initial_lr: 1e-3,
            ..TrainSchedule::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, curve) = train(model, &samples, &samples, &sched, &mut rng).unwrap();
        for pair in curve.epochs.windows(2) {
            assert!(pair[1].lr <= pair[0].lr);
            assert!(pair[1].lr >= sched.min_lr);
        }
    }

    #[test]
    fn train_rejects_empty_sets() {
        let model = SegModel::init(ModelSpec::linear(2), 3);
        let samples = toy_samples(2, 8, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(train(
            model.clone(),
            &[],
            &samples,
            &TrainSchedule::default(),
            &mut rng
        )
        .is_err());
        assert!(train(
            model,
            &samples,
            &[],
            &TrainSchedule::default(),
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn first_steps_descend_on_fixed_batch() {
        // Strictly decreasing loss over the first 5 steps at a small LR.
        let model = SegModel::init(ModelSpec::compact(2), 5);
        let samples = toy_samples(2, 8, 14);
        let sched = TrainSchedule {
            dropout_rate: 0.0,
            ..TrainSchedule::default()
        };
        let mut m = model;
        let mut adam = Adam::new(m.def.len);
        let mut losses = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..6 {
            let (loss, _, grads) = run_batch(&mut m, &samples, &[0, 1], &sched, &mut rng);
            losses.push(loss);
            adam.step(&m.def, &mut m.values, &grads, 1e-3);
        }
        for pair in losses.windows(2) {
            assert!(
                pair[1] < pair[0],
                "loss did not decrease: {:?}",
                losses
            );
        }
    }
}
