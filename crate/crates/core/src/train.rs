//! Training loop: per-sample forward, loss, reverse pass and an optimizer
//! step, with a held-out validation split.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backprop::{loss_and_grad, loss_and_gradients};
use crate::data::{Dataset, Sample};
use crate::error::{LanternError, Result};
use crate::net::{reconstruct, LanternParams};

pub const DEFAULT_LEARNING_RATE: f64 = 0.01;
pub const DEFAULT_EPOCHS: usize = 400;
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.1;
pub const DEFAULT_CLIP_NORM: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    GradientDescent,
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = LanternError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gd" | "sgd" | "gradient_descent" => Ok(Optimizer::GradientDescent),
            "adam" => Ok(Optimizer::Adam),
            other => Err(LanternError::InvalidParameter(format!(
                "unknown optimizer {other:?} (expected gd or adam)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Global gradient-norm clip; off unless set.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: DEFAULT_EPOCHS,
            batch_size: 1,
            optimizer: Optimizer::GradientDescent,
            seed: 0,
            validation_fraction: DEFAULT_VALIDATION_FRACTION,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LanternError::InvalidParameter(msg));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be >= 0, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!(
                "validation fraction must lie in [0, 1), got {}",
                self.validation_fraction
            ));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip norm must be positive, got {c}"));
            }
        }
        Ok(())
    }

    /// Number of samples held out from `n` for validation; at least one
    /// sample always remains for training.
    pub fn validation_count(&self, n: usize) -> usize {
        ((self.validation_fraction * n as f64).round() as usize).min(n.saturating_sub(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss over each epoch's samples, measured before each
    /// sample's update.
    pub train_loss: Vec<f64>,
    /// Mean validation loss after each epoch; empty without a validation
    /// split.
    pub val_loss: Vec<f64>,
    /// Loss of the initial parameters on the training split.
    pub initial_train_loss: f64,
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// `epoch,train_loss,val_loss` rows, epochs counted from 1.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,val_loss")?;
        for (i, t) in self.train_loss.iter().enumerate() {
            match self.val_loss.get(i) {
                Some(v) => writeln!(w, "{},{t:e},{v:e}", i + 1)?,
                None => writeln!(w, "{},{t:e},", i + 1)?,
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).map_err(|e| LanternError::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| LanternError::io(path, e))
    }
}

/// Mean loss of `params` over `samples`.
pub fn mean_loss(params: &LanternParams, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let x = reconstruct(&s.kspace, &s.mask, params)?;
        total += loss_and_grad(&x, &s.truth)?.0;
    }
    Ok(total / samples.len().max(1) as f64)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            theta[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Progress of one finished epoch, passed to the observer of
/// [`train_with_observer`].
#[derive(Debug, Clone, Copy)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

pub fn train(dataset: &Dataset, init: &LanternParams, cfg: &TrainConfig) -> Result<(LanternParams, TrainReport)> {
    train_with_observer(dataset, init, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_observer(
    dataset: &Dataset,
    init: &LanternParams,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochSummary),
) -> Result<(LanternParams, TrainReport)> {
    cfg.validate()?;
    let shape = dataset
        .shape()
        .ok_or_else(|| LanternError::InvalidParameter("dataset is empty".into()))?;
    init.validate_for(shape)?;
    let start = Instant::now();
    let n_val = cfg.validation_count(dataset.len());
    let (train_set, val_set) = dataset.samples().split_at(dataset.len() - n_val);

    let mut params = init.clone();
    let mut theta = params.to_vector();
    let mut adam = Adam::new(theta.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport {
        train_loss: Vec::with_capacity(cfg.epochs),
        val_loss: Vec::with_capacity(if val_set.is_empty() { 0 } else { cfg.epochs }),
        initial_train_loss: mean_loss(&params, train_set)?,
        wall_time_secs: 0.0,
    };

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; theta.len()];
            for &i in batch {
                let s = &train_set[i];
                let (loss, g) = loss_and_gradients(&params, &s.kspace, &s.mask, &s.truth)?;
                let g = g.to_vector(&params);
                if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                    return Err(LanternError::Diverged {
                        epoch,
                        sample: i,
                        loss,
                    });
                }
                epoch_loss += loss;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b / batch.len() as f64;
                }
            }
            if let Some(c) = cfg.clip_norm {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > c {
                    grad.iter_mut().for_each(|g| *g *= c / norm);
                }
            }
            match cfg.optimizer {
                Optimizer::GradientDescent => {
                    for (t, g) in theta.iter_mut().zip(&grad) {
                        *t -= cfg.learning_rate * g;
                    }
                }
                Optimizer::Adam => adam.step(&mut theta, &grad, cfg.learning_rate),
            }
            if theta.iter().any(|t| !t.is_finite()) {
                return Err(LanternError::Diverged {
                    epoch,
                    sample: *batch.last().expect("non-empty batch"),
                    loss: f64::NAN,
                });
            }
            params.set_from_vector(&theta)?;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        report.train_loss.push(train_loss);
        let val_loss = if val_set.is_empty() {
            None
        } else {
            let v = mean_loss(&params, val_set)?;
            report.val_loss.push(v);
            Some(v)
        };
        observer(&EpochSummary {
            epoch,
            train_loss,
            val_loss,
        });
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DynamicImage, Shape};
    use crate::net::ArchConfig;
    use crate::sampling::{forward_undersample, make_mask_1d_random};
    use num_complex::Complex64;

    fn tiny_dataset(n: usize) -> Dataset {
        let shape = Shape::new(8, 8, 2);
        (0..n)
            .map(|i| {
                let data = (0..shape.len())
                    .map(|j| {
                        let x = (j % 8) as f64;
                        let y = ((j / 8) % 8) as f64;
                        let r = ((x - 3.5).powi(2) + (y - 3.5).powi(2)).sqrt();
                        let v = if r < 2.0 + 0.3 * i as f64 { 1.0 } else { 0.2 };
                        Complex64::new(v, 0.1 * v)
                    })
                    .collect();
                let truth = DynamicImage::new(shape, data).unwrap();
                let mask = make_mask_1d_random(shape, 2.0, 2, i as u64).unwrap();
                let kspace = forward_undersample(&truth, &mask, 0.0, 0).unwrap();
                Sample { kspace, mask, truth }
            })
            .collect()
    }

    fn small_params() -> LanternParams {
        LanternParams::build(
            Shape::new(8, 8, 2),
            &ArchConfig {
                stages: 2,
                ..ArchConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_configs() {
        let data = tiny_dataset(2);
        for cfg in [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
            TrainConfig { validation_fraction: 1.0, ..TrainConfig::default() },
            TrainConfig { clip_norm: Some(0.0), ..TrainConfig::default() },
        ] {
            assert!(train(&data, &small_params(), &cfg).is_err());
        }
        let empty = Dataset::new(vec![]).unwrap();
        assert!(train(&empty, &small_params(), &TrainConfig::default()).is_err());
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let data = tiny_dataset(3);
        let init = small_params();
        for optimizer in [Optimizer::GradientDescent, Optimizer::Adam] {
            let cfg = TrainConfig {
                learning_rate: 0.0,
                epochs: 3,
                optimizer,
                validation_fraction: 0.0,
                ..TrainConfig::default()
            };
            let (p, r) = train(&data, &init, &cfg).unwrap();
            assert_eq!(p, init);
            assert_eq!(r.train_loss.len(), 3);
            assert!(r.val_loss.is_empty());
            assert!(r.train_loss.iter().all(|&l| l == r.train_loss[0]));
            assert!((r.train_loss[0] - r.initial_train_loss).abs() < 1e-15);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let data = tiny_dataset(4);
        let cfg = TrainConfig {
            epochs: 2,
            seed: 9,
            validation_fraction: 0.25,
            ..TrainConfig::default()
        };
        let (a, ra) = train(&data, &small_params(), &cfg).unwrap();
        let (b, rb) = train(&data, &small_params(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.train_loss, rb.train_loss);
        assert_eq!(ra.val_loss.len(), 2);
    }

    #[test]
    fn descent_lowers_loss_and_keeps_rho_positive() {
        let data = tiny_dataset(3);
        let cfg = TrainConfig {
            epochs: 8,
            optimizer: Optimizer::Adam,
            learning_rate: 0.01,
            validation_fraction: 0.0,
            ..TrainConfig::default()
        };
        let (p, r) = train(&data, &small_params(), &cfg).unwrap();
        assert!(r.train_loss.last().unwrap() < &r.initial_train_loss);
        assert!(p.stages.iter().all(|s| s.rho() > 0.0) && p.final_rho() > 0.0);
    }

    #[test]
    fn validation_split_sizes() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.validation_count(22), 2);
        assert_eq!(cfg.validation_count(1), 0);
        assert_eq!(cfg.validation_count(10), 1);
        let cfg = TrainConfig { validation_fraction: 0.9, ..cfg };
        assert_eq!(cfg.validation_count(3), 2);
    }

    #[test]
    fn divergence_is_reported() {
        let data = tiny_dataset(2);
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 1e6,
            validation_fraction: 0.0,
            ..TrainConfig::default()
        };
        match train(&data, &small_params(), &cfg) {
            Err(LanternError::Diverged { epoch, .. }) => assert!(epoch >= 1),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("expected divergence"),
        }
    }

    #[test]
    fn csv_export() {
        let r = TrainReport {
            train_loss: vec![0.5, 0.25],
            val_loss: vec![0.6, 0.3],
            initial_train_loss: 0.7,
            wall_time_secs: 1.0,
        };
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,train_loss,val_loss");
        let cols: Vec<f64> = lines[2].split(',').skip(1).map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols, vec![0.25, 0.3]);
    }
}
