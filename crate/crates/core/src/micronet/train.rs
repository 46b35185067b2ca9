use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, compute_loss, AdamState, LossKind, MicroNet, Tensor};
use crate::error::{Error, Result};
use crate::seed::{mix_seed, rng_from};

/// One supervised sample. `mask` gates the offset term of `sn_combined`.
#[derive(Debug, Clone)]
pub struct Example {
    pub input: Tensor,
    pub target: Vec<f64>,
    pub mask: f64,
}

impl Example {
    pub fn new(input: Tensor, target: Vec<f64>) -> Self {
        Example {
            input,
            target,
            mask: 1.0,
        }
    }
}

/// Produces training examples on demand so augmentation can draw fresh
/// randomness each epoch.
pub trait ExampleSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn example(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<Example>;
}

impl ExampleSource for [Example] {
    fn len(&self) -> usize {
        <[Example]>::len(self)
    }

    fn example(&self, index: usize, _rng: &mut ChaCha8Rng) -> Result<Example> {
        Ok(self[index].clone())
    }
}

impl ExampleSource for Vec<Example> {
    fn len(&self) -> usize {
        <[Example]>::len(self)
    }

    fn example(&self, index: usize, _rng: &mut ChaCha8Rng) -> Result<Example> {
        Ok(self[index].clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSegment {
    pub from_epoch: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub epochs: usize,
    /// Piecewise-constant learning rate; the last segment whose
    /// `from_epoch` is reached applies.
    pub lr_segments: Vec<LrSegment>,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl Schedule {
    pub fn constant(epochs: usize, lr: f64, batch_size: usize, seed: u64) -> Self {
        Schedule {
            epochs,
            lr_segments: vec![LrSegment { from_epoch: 0, lr }],
            batch_size,
            seed,
            weight_decay: 0.0,
        }
    }

    /// 120 epochs, 1e-3 then 5e-4 from epoch 80, decay 1e-4.
    pub fn sv_regressor(seed: u64) -> Self {
        Schedule {
            epochs: 120,
            lr_segments: vec![
                LrSegment { from_epoch: 0, lr: 1e-3 },
                LrSegment { from_epoch: 80, lr: 5e-4 },
            ],
            batch_size: 16,
            seed,
            weight_decay: 1e-4,
        }
    }

    pub fn sv_classifier(seed: u64) -> Self {
        Schedule {
            lr_segments: vec![LrSegment { from_epoch: 0, lr: 1e-4 }],
            ..Schedule::sv_regressor(seed)
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_segments
            .iter()
            .filter(|s| s.from_epoch <= epoch)
            .max_by_key(|s| s.from_epoch)
            .map(|s| s.lr)
            .unwrap_or(0.0)
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be positive"));
        }
        if self.epochs > 0 && !self.lr_segments.iter().any(|s| s.from_epoch == 0) {
            return Err(Error::arg("learning-rate schedule must start at epoch 0"));
        }
        if self.lr_segments.iter().any(|s| !(s.lr >= 0.0 && s.lr.is_finite())) || self.weight_decay < 0.0 {
            return Err(Error::arg("learning rates and decay must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean example loss per epoch.
    pub history: Vec<f64>,
}

/// Mini-batch Adam training. The epoch order is a seeded shuffle and
/// gradients are summed in batch order, so equal seeds give equal bytes.
pub fn train(net: &mut MicroNet, data: &dyn ExampleSource, loss: LossKind, schedule: &Schedule) -> Result<TrainReport> {
    schedule.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(Error::arg("empty training set"));
    }
    let mut state = AdamState::new(net.param_count()).with_decay(schedule.weight_decay);
    let mut history = Vec::with_capacity(schedule.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    let mut grads = vec![0.0; net.param_count()];
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut rng_from(mix_seed(schedule.seed, epoch as u64, u64::MAX)));
        let mut total = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            grads.fill(0.0);
            for &idx in batch {
                let mut rng = rng_from(mix_seed(schedule.seed, epoch as u64, idx as u64));
                let ex = data.example(idx, &mut rng)?;
                let (out, cache) = net.forward(&ex.input)?;
                if out.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::Diverged {
                        epoch,
                        loss: f64::NAN,
                    });
                }
                let (l, up) = compute_loss(loss, out.data(), &ex.target, ex.mask)?;
                if !l.is_finite() {
                    return Err(Error::Diverged { epoch, loss: l });
                }
                total += l;
                net.backward_accumulate(&cache, &up, &mut grads)?;
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.iter_mut() {
                *g *= scale;
            }
            adam_step(net.params_mut(), &grads, &mut state, lr)?;
            if net.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    loss: f64::NAN,
                });
            }
        }
        history.push(total / n as f64);
    }
    Ok(TrainReport { history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micronet::{Head, InputSpec, LayerSpec, MicroNetConfig};

    fn linear_config() -> MicroNetConfig {
        MicroNetConfig {
            input: InputSpec {
                height: 1,
                width: 2,
                channels: 1,
            },
            layers: vec![LayerSpec::Flatten],
            head: Head::BinaryClassifier,
            param_budget: None,
        }
    }

    fn separable() -> Vec<Example> {
        let pts = [(-2.0, -1.0, 0.0), (-1.5, 0.5, 0.0), (-1.0, -2.0, 0.0), (1.0, 2.0, 1.0), (2.0, 0.5, 1.0), (1.5, -0.5, 1.0)];
        pts.iter()
            .map(|&(a, b, t)| Example::new(Tensor::new(vec![1, 1, 2], vec![a, b]).unwrap(), vec![t]))
            .collect()
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let mut net = MicroNet::new(linear_config(), 1).unwrap();
        let before = net.params().to_vec();
        let report = train(&mut net, &separable(), LossKind::Bce, &Schedule::constant(0, 0.1, 2, 1)).unwrap();
        assert!(report.history.is_empty());
        assert_eq!(net.params(), &before[..]);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut net = MicroNet::new(linear_config(), 1).unwrap();
        let empty: Vec<Example> = Vec::new();
        assert!(train(&mut net, &empty, LossKind::Bce, &Schedule::constant(1, 0.1, 2, 1)).is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let run = || {
            let mut net = MicroNet::new(linear_config(), 5).unwrap();
            train(&mut net, &separable(), LossKind::Bce, &Schedule::constant(10, 0.05, 2, 9)).unwrap();
            net.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn full_batch_history_does_not_increase_on_separable_data() {
        let mut net = MicroNet::new(linear_config(), 2).unwrap();
        let report = train(&mut net, &separable(), LossKind::Bce, &Schedule::constant(60, 0.01, 6, 3)).unwrap();
        for w in report.history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", report.history);
        }
        assert!(report.history.last().unwrap() < &report.history[0]);
    }

    #[test]
    fn lr_segments_switch() {
        let s = Schedule::sv_regressor(0);
        assert_eq!(s.lr_at(0), 1e-3);
        assert_eq!(s.lr_at(79), 1e-3);
        assert_eq!(s.lr_at(80), 5e-4);
        assert_eq!(Schedule::sv_classifier(0).lr_at(100), 1e-4);
    }

    #[test]
    fn nan_inputs_abort() {
        let mut net = MicroNet::new(linear_config(), 2).unwrap();
        let data = vec![Example::new(Tensor::new(vec![1, 1, 2], vec![f64::NAN, 0.0]).unwrap(), vec![1.0])];
        let err = train(&mut net, &data, LossKind::Mse, &Schedule::constant(1, 0.1, 1, 0)).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 0, .. }));
    }
}
