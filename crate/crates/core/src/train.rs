//! Optimizer, learning-rate schedule, and the train/eval loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraint::{
    parameter_penalty, parameter_penalty_graph, parameter_step, SemiOrthoConfig, SemiOrthoMode,
};
use crate::data::FrameBatch;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::Parameter;
use crate::tensor::{Mode, Tensor};

fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    4
}
fn default_lr_start() -> f64 {
    1e-3
}
fn default_lr_end() -> f64 {
    1e-5
}
fn default_clip() -> f64 {
    5.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Sequences per optimizer step (gradients accumulate across them).
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr_start")]
    pub lr_start: f64,
    #[serde(default = "default_lr_end")]
    pub lr_end: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; 0 disables clipping.
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub semi_ortho: SemiOrthoConfig,
    /// Batch-order shuffling seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_shuffle")]
    pub shuffle: bool,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_shuffle() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr_start: default_lr_start(),
            lr_end: default_lr_end(),
            optimizer: default_optimizer(),
            grad_clip: default_clip(),
            semi_ortho: SemiOrthoConfig::default(),
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.lr_start >= self.lr_end && self.lr_end > 0.0) {
            return Err(Error::Config(format!(
                "learning rates must satisfy lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::Config("train.grad_clip must be >= 0".into()));
        }
        self.semi_ortho.validate()
    }
}

/// Exponential decay from lr_start to lr_end:
/// lr(step) = lr_start * (lr_end/lr_start)^(step/total_steps).
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    if total_steps == 0 || cfg.lr_start == cfg.lr_end {
        return cfg.lr_start;
    }
    let frac = (step as f64 / total_steps as f64).clamp(0.0, 1.0);
    cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(frac)
}

/// SGD or Adam over a fixed parameter list, with global-norm clipping.
pub struct Optimizer {
    kind: OptimizerKind,
    grad_clip: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &[Parameter], grad_clip: f64) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Optimizer { kind, grad_clip, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m, v }
    }

    /// Apply one update from the accumulated gradients, then clear them.
    pub fn step(&mut self, params: &[Parameter], lr: f64) {
        let grads: Vec<Vec<f64>> = params
            .iter()
            .map(|p| p.tensor().grad().unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect();
        let norm: f64 = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let clip_scale = if self.grad_clip > 0.0 && norm > self.grad_clip {
            self.grad_clip / norm
        } else {
            1.0
        };

        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter().zip(&grads) {
                    p.tensor().with_values_mut(|v| {
                        for (vi, gi) in v.iter_mut().zip(g) {
                            *vi -= lr * clip_scale * gi;
                        }
                    });
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let bc1 = 1.0 - self.beta1.powi(self.t as i32);
                let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                for ((p, g), (m, v)) in
                    params.iter().zip(&grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    p.tensor().with_values_mut(|vals| {
                        for i in 0..vals.len() {
                            let gi = g[i] * clip_scale;
                            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                            let mhat = m[i] / bc1;
                            let vhat = v[i] / bc2;
                            vals[i] -= lr * mhat / (vhat.sqrt() + self.eps);
                        }
                    });
                }
            }
        }
        for p in params {
            p.tensor().clear_grad();
        }
    }
}

/// Per-epoch training metrics, one JSON line per record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub semi_ortho_penalty: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
}

impl EpochMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

fn batch_tensors(batch: &FrameBatch) -> Result<(Tensor, Vec<usize>)> {
    let labels = batch
        .label_indices()
        .ok_or_else(|| Error::Contract("training data must carry labels".into()))?;
    let features = Tensor::new(vec![batch.len(), batch.input_dim], batch.feature_rows())?;
    Ok((features, labels))
}

fn count_correct(logits: &Tensor, labels: &[usize], classes: usize) -> usize {
    let v = logits.values();
    labels
        .iter()
        .enumerate()
        .filter(|(t, &label)| {
            let row = &v[t * classes..(t + 1) * classes];
            let mut best = 0;
            for (j, x) in row.iter().enumerate() {
                if *x > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count()
}

/// Driver for epoch-based training with gradient accumulation over
/// `batch_size` sequences per optimizer step.
pub struct Trainer<'a> {
    model: &'a Model,
    cfg: TrainConfig,
    opt: Optimizer,
    constrained: Vec<Parameter>,
    shuffle_rng: ChaCha8Rng,
    global_step: usize,
    total_steps: usize,
    optimizer_steps: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a Model, cfg: TrainConfig, steps_per_epoch: usize) -> Trainer<'a> {
        let opt = Optimizer::new(cfg.optimizer, model.parameters(), cfg.grad_clip);
        let constrained = model.constrained_parameters();
        let shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let total_steps = cfg.epochs * steps_per_epoch;
        Trainer {
            model,
            cfg,
            opt,
            constrained,
            shuffle_rng,
            global_step: 0,
            total_steps,
            optimizer_steps: 0,
        }
    }

    pub fn steps_per_epoch(data_len: usize, batch_size: usize) -> usize {
        data_len.div_ceil(batch_size)
    }

    /// Mean penalty over constrained factors (0 when there are none).
    pub fn mean_constraint_penalty(&self) -> Result<f64> {
        if self.constrained.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for p in &self.constrained {
            total += parameter_penalty(p)?;
        }
        Ok(total / self.constrained.len() as f64)
    }

    pub fn max_constraint_penalty(&self) -> Result<f64> {
        let mut max = 0.0f64;
        for p in &self.constrained {
            max = max.max(parameter_penalty(p)?);
        }
        Ok(max)
    }

    /// One pass over the data: forward, cross-entropy, backward, optimizer
    /// update, then the constraint step when due.
    pub fn train_epoch(&mut self, epoch: usize, data: &[FrameBatch]) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::EmptyInput("train_epoch: no sequences".into()));
        }
        let classes = self.model.config().num_classes;
        let mut order: Vec<usize> = (0..data.len()).collect();
        if self.cfg.shuffle {
            order.shuffle(&mut self.shuffle_rng);
        }

        let mut total_loss = 0.0;
        let mut total_frames = 0usize;
        let mut total_correct = 0usize;
        let mut last_lr = self.cfg.lr_start;

        for chunk in order.chunks(self.cfg.batch_size) {
            let lr = lr_schedule(self.global_step, self.total_steps, &self.cfg);
            last_lr = lr;
            let chunk_frames: usize = chunk.iter().map(|&i| data[i].len()).sum();

            self.model.zero_grads();
            for &i in chunk {
                let (features, labels) = batch_tensors(&data[i])?;
                let logits = self.model.forward(&features, Mode::Train)?;
                let loss_sum = logits.cross_entropy_sum(&labels)?;
                let loss_value = loss_sum.values()[0];
                if !loss_value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "step {}: loss is not finite ({loss_value})",
                        self.global_step
                    )));
                }
                total_loss += loss_value;
                total_frames += labels.len();
                total_correct += count_correct(&logits, &labels, classes);
                let loss = loss_sum.scale(1.0 / chunk_frames as f64);
                loss.backward()?;
            }
            if self.cfg.semi_ortho.mode == SemiOrthoMode::Penalty && !self.constrained.is_empty() {
                let mut term: Option<Tensor> = None;
                for p in &self.constrained {
                    let f = parameter_penalty_graph(p)?;
                    term = Some(match term {
                        None => f,
                        Some(acc) => acc.add(&f)?,
                    });
                }
                let term = term.expect("non-empty").scale(self.cfg.semi_ortho.penalty_weight);
                term.backward()?;
            }

            self.opt.step(self.model.parameters(), lr);
            self.optimizer_steps += 1;
            if self.cfg.semi_ortho.mode == SemiOrthoMode::Step
                && self.optimizer_steps % self.cfg.semi_ortho.interval as u64 == 0
            {
                for p in &self.constrained {
                    parameter_step(p, self.cfg.semi_ortho.step_scale)?;
                }
            }
            self.global_step += 1;
        }

        Ok(EpochMetrics {
            epoch,
            loss: total_loss / total_frames as f64,
            accuracy: total_correct as f64 / total_frames as f64,
            lr: last_lr,
            semi_ortho_penalty: self.mean_constraint_penalty()?,
            eval_loss: None,
            eval_accuracy: None,
        })
    }
}

/// Deterministic infer-mode evaluation: dropout off, batch norm on running
/// statistics.
pub fn evaluate(model: &Model, data: &[FrameBatch]) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluate: no sequences".into()));
    }
    let classes = model.config().num_classes;
    let mut total_loss = 0.0;
    let mut frames = 0usize;
    let mut correct = 0usize;
    for batch in data {
        let (features, labels) = batch_tensors(batch)?;
        let logits = model.forward(&features, Mode::Infer)?;
        total_loss += logits.cross_entropy_sum(&labels)?.values()[0];
        correct += count_correct(&logits, &labels, classes);
        frames += labels.len();
    }
    Ok((total_loss / frames as f64, correct as f64 / frames as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BlockConfig, ModelConfig, StreamConfig};

    fn tiny_model(dropout: f64) -> Model {
        let mut cfg = ModelConfig::new(3, 3);
        cfg.d_model = 8;
        cfg.d_q = 2;
        cfg.d_k = 2;
        cfg.d_v = 4;
        cfg.bottleneck = 4;
        cfg.dropout = dropout;
        cfg.seed = 5;
        cfg.blocks = vec![BlockConfig {
            streams: vec![StreamConfig {
                rate: 1,
                conv_layers: 1,
                heads: Some(2),
                left: 2,
                right: 2,
            }],
            head_budget: None,
        }];
        Model::build(cfg).unwrap()
    }

    #[test]
    fn lr_schedule_hits_paper_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, 100, &cfg), 1e-3);
        let end = lr_schedule(100, 100, &cfg);
        assert!((end - 1e-5).abs() < 1e-18);
        let mid = lr_schedule(50, 100, &cfg);
        assert!((mid - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule_zero_total_steps_returns_start() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, 0, &cfg), 1e-3);
    }

    #[test]
    fn lr_schedule_is_log_linear_and_decreasing() {
        let cfg = TrainConfig::default();
        let total = 1000;
        let points: Vec<f64> = (0..10).map(|i| lr_schedule(i * 100, total, &cfg)).collect();
        let slope = (points[1].ln() - points[0].ln()) / 100.0;
        for i in 1..10 {
            assert!(points[i] < points[i - 1], "not strictly decreasing at {i}");
            let expected = points[0].ln() + slope * (i as f64 * 100.0);
            assert!((points[i].ln() - expected).abs() <= 1e-12, "not log-linear at {i}");
        }
    }

    #[test]
    fn optimizer_zero_gradient_leaves_params_unchanged() {
        let model = tiny_model(0.0);
        let before: Vec<Vec<f64>> = model.parameters().iter().map(|p| p.tensor().values()).collect();
        let mut sgd = Optimizer::new(OptimizerKind::Sgd, model.parameters(), 5.0);
        sgd.step(model.parameters(), 1e-3);
        let mut adam = Optimizer::new(OptimizerKind::Adam, model.parameters(), 5.0);
        adam.step(model.parameters(), 1e-3);
        for (p, b) in model.parameters().iter().zip(&before) {
            assert_eq!(&p.tensor().values(), b, "{} changed", p.name());
        }
    }

    #[test]
    fn zero_lr_epoch_preserves_parameters() {
        // Plain FF, no convs: no constrained factors, so the only mutable
        // training state is batch-norm statistics.
        let mut cfg = ModelConfig::new(3, 3);
        cfg.d_model = 8;
        cfg.d_q = 2;
        cfg.d_k = 2;
        cfg.d_v = 4;
        cfg.ff_mode = crate::model::FfMode::Plain;
        cfg.d_ff = 8;
        cfg.dropout = 0.0;
        cfg.blocks = vec![BlockConfig {
            streams: vec![StreamConfig { rate: 1, conv_layers: 0, heads: Some(1), left: 1, right: 1 }],
            head_budget: None,
        }];
        let model = Model::build(cfg).unwrap();
        assert!(model.constrained_parameters().is_empty());
        let before: Vec<Vec<f64>> = model.parameters().iter().map(|p| p.tensor().values()).collect();

        let tc = TrainConfig { lr_start: 0.0, lr_end: 0.0, optimizer: OptimizerKind::Sgd, ..Default::default() };
        let data = crate::data::generate_synthetic(&crate::data::TaskSpec {
            num_classes: 3,
            input_dim: 3,
            min_len: 10,
            max_len: 12,
            event_scales: vec![2, 4],
            noise_sigma: 0.1,
            amplitude: 1.0,
            background_fraction: 0.4,
            num_sequences: 4,
            num_eval_sequences: 1,
            seed: 1,
        })
        .unwrap();
        let mut trainer = Trainer::new(&model, tc, 1);
        trainer.train_epoch(0, &data).unwrap();
        for (p, b) in model.parameters().iter().zip(&before) {
            assert_eq!(&p.tensor().values(), b, "{} changed under lr=0", p.name());
        }
    }

    #[test]
    fn evaluate_is_deterministic_and_rejects_empty() {
        let model = tiny_model(0.3);
        let data = crate::data::generate_synthetic(&crate::data::TaskSpec {
            num_classes: 3,
            input_dim: 3,
            min_len: 10,
            max_len: 14,
            event_scales: vec![2, 5],
            noise_sigma: 0.2,
            amplitude: 1.0,
            background_fraction: 0.4,
            num_sequences: 3,
            num_eval_sequences: 1,
            seed: 2,
        })
        .unwrap();
        // Initialize batch-norm stats.
        let mut trainer = Trainer::new(&model, TrainConfig::default(), 1);
        trainer.train_epoch(0, &data).unwrap();
        let a = evaluate(&model, &data).unwrap();
        let b = evaluate(&model, &data).unwrap();
        assert_eq!(a, b);
        assert!(matches!(evaluate(&model, &[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn penalty_mode_keeps_constrained_factors_near_orthogonal() {
        use crate::constraint::{SemiOrthoConfig, SemiOrthoMode};
        let model = tiny_model(0.0);
        // Knock the constrained factors off the manifold, then train with the
        // additive-penalty objective instead of the projection step.
        for p in model.constrained_parameters() {
            p.tensor().with_values_mut(|v| v.iter_mut().for_each(|x| *x *= 1.5));
        }
        let mut before = 0.0f64;
        for p in model.constrained_parameters() {
            before = before.max(crate::constraint::parameter_penalty(&p).unwrap());
        }
        let data = crate::data::generate_synthetic(&crate::data::TaskSpec {
            num_classes: 3,
            input_dim: 3,
            min_len: 12,
            max_len: 16,
            event_scales: vec![2, 4],
            noise_sigma: 0.2,
            amplitude: 1.0,
            background_fraction: 0.4,
            num_sequences: 4,
            num_eval_sequences: 1,
            seed: 9,
        })
        .unwrap();
        let tc = TrainConfig {
            epochs: 30,
            batch_size: 2,
            semi_ortho: SemiOrthoConfig {
                mode: SemiOrthoMode::Penalty,
                penalty_weight: 1.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut trainer = Trainer::new(&model, tc, Trainer::steps_per_epoch(data.len(), 2));
        for epoch in 0..30 {
            trainer.train_epoch(epoch, &data).unwrap();
        }
        let after = trainer.max_constraint_penalty().unwrap();
        assert!(
            after < before / 10.0,
            "penalty mode did not reduce the constraint residual: {before} -> {after}"
        );
    }

    #[test]
    fn train_config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.lr_end = 2e-3;
        assert!(cfg.validate().is_err());
        cfg.lr_end = 0.0;
        assert!(cfg.validate().is_err());
    }
}
