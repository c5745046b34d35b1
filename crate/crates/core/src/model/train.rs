use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Pipeline;
use crate::attacks::{pgd_step, AttackConfig, Norm};
use crate::autodiff::{SurrogateKind, SurrogateRegistry, SurrogateRule, Tape};
use crate::error::{Error, Result};
use crate::frontend::hwc_to_chw;
use crate::harness::Dataset;
use crate::model::LossKind;
use crate::nn::init_rng;
use crate::tensor::{Float, Tensor};

/// One triangular cycle: `base·η_max` at step 0, `η_max` at `peak` of the
/// way through, back to `base·η_max` at the end.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub base_fraction: f64,
    pub peak_fraction: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_fraction: 0.1,
            peak_fraction: 0.45,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, step: usize, total_steps: usize, lr_max: f64) -> f64 {
        let base = self.base_fraction * lr_max;
        if total_steps == 0 {
            return base;
        }
        let t = step.min(total_steps) as f64;
        let peak = self.peak_fraction * total_steps as f64;
        if t <= peak {
            base + (lr_max - base) * t / peak
        } else {
            lr_max - (lr_max - base) * (t - peak) / (total_steps as f64 - peak)
        }
    }
}

pub fn cyclic_lr(step: usize, total_steps: usize, lr_max: f64) -> f64 {
    LrSchedule::default().at(step, total_steps, lr_max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TrainMode {
    #[default]
    Natural,
    /// Train on sign-PGD examples in the ℓ∞ ball.
    Adversarial { eps: f64, step: f64, steps: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub horizontal_flip: bool,
    pub schedule: LrSchedule,
    /// Rescale the batch gradient to at most this global ℓ2 norm.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr_max: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            mode: TrainMode::Natural,
            horizontal_flip: false,
            schedule: LrSchedule::default(),
            grad_clip: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr_max >= 0.0 && self.lr_max.is_finite()) {
            return Err(Error::Config(format!("lr_max = {} must be >= 0", self.lr_max)));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if let TrainMode::Adversarial { eps, step, .. } = self.mode {
            if !(eps > 0.0 && step > 0.0) {
                return Err(Error::Config("adversarial training needs eps, step > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr_end: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

/// Backward rules used while training through the encoder: straight-through
/// quantizer, gradient routed through the kept top-T coefficients.
pub(crate) fn training_surrogates() -> SurrogateRegistry {
    let mut reg = SurrogateRegistry::default();
    reg.register(SurrogateKind::Quantizer, SurrogateRule::Identity)
        .expect("identity applies to the quantizer");
    reg
}

fn flip<F: Float>(image: &Tensor<F>) -> Tensor<F> {
    let s = image.shape();
    let (n, w, c) = (s[0], s[1], s[2]);
    let mut out = image.clone();
    for y in 0..n {
        for x in 0..w {
            for k in 0..c {
                out.data_mut()[(y * w + x) * c + k] = image.data()[(y * w + (w - 1 - x)) * c + k];
            }
        }
    }
    out
}

fn adversarial_example<F: Float>(
    pipeline: &Pipeline<F>,
    image: &Tensor<F>,
    label: usize,
    (eps, step, steps): (f64, f64, usize),
    rng: &mut impl Rng,
    surrogates: &SurrogateRegistry,
) -> Result<Tensor<F>> {
    let cfg = AttackConfig {
        norm: Norm::Linf,
        eps,
        step,
        steps,
        restarts: 1,
        ..Default::default()
    };
    let x = image.to_f64_vec();
    let mut e: Vec<f64> = x
        .iter()
        .map(|&p| (p + rng.random_range(-eps..=eps)).clamp(0.0, 1.0) - p)
        .collect();
    for _ in 0..steps {
        let adv: Vec<f64> = x.iter().zip(&e).map(|(a, b)| a + b).collect();
        let g = pipeline.input_gradient(
            &Tensor::from_f64(image.shape().to_vec(), &adv)?,
            label,
            LossKind::CrossEntropy,
            surrogates,
        )?;
        e = pgd_step(&x, &e, &g.gradient.to_f64_vec(), &cfg)?.perturbation;
    }
    let adv: Vec<f64> = x.iter().zip(&e).map(|(a, b)| a + b).collect();
    Tensor::from_f64(image.shape().to_vec(), &adv)
}

/// SGD with momentum on cross-entropy through the whole pipeline; the
/// dictionary stays frozen. Per-sample gradients are summed in batch order.
pub fn train<F: Float>(pipeline: &mut Pipeline<F>, data: &Dataset, config: &TrainConfig) -> Result<TrainHistory> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if data.image_size() != pipeline.image_size() || data.num_classes() > pipeline.num_classes() {
        return Err(Error::invalid(format!(
            "dataset ({0}x{0}, {1} classes) does not fit the pipeline ({2}x{2}, {3} classes)",
            data.image_size(),
            data.num_classes(),
            pipeline.image_size(),
            pipeline.num_classes()
        )));
    }
    let surrogates = training_surrogates();
    let batches = data.len().div_ceil(config.batch_size);
    let total = config.epochs * batches;
    let mut velocity: Vec<Vec<Tensor<F>>> = pipeline
        .param_stores()
        .iter()
        .map(|s| s.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect())
        .collect();
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut global_step = 0;
    for epoch in 0..config.epochs {
        let mut rng = init_rng(config.seed, 1000 + epoch as u64);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut lr = 0.0;
        for batch in order.chunks(config.batch_size) {
            lr = config.schedule.at(global_step, total, config.lr_max);
            let mut grads: Vec<Vec<Tensor<F>>> = velocity
                .iter()
                .map(|v| v.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect())
                .collect();
            for &i in batch {
                let label = data.label(i);
                let mut image = data.image::<F>(i);
                if config.horizontal_flip && rng.random::<bool>() {
                    image = flip(&image);
                }
                if let TrainMode::Adversarial { eps, step, steps } = config.mode {
                    image = adversarial_example(pipeline, &image, label, (eps, step, steps), &mut rng, &surrogates)?;
                }
                let mut tape = Tape::with_surrogates(surrogates.clone());
                let x = tape.constant(hwc_to_chw(&image)?);
                let bound = pipeline.bind(&mut tape, true);
                let out = pipeline.forward(&mut tape, &bound, x)?;
                let loss = tape.cross_entropy(out.logits, label)?;
                let value = tape.value(loss).item()?.as_f64();
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                loss_sum += value;
                correct += (tape.value(out.logits).argmax() == label) as usize;
                let mut g = tape.backward(loss)?;
                let per_store = bound.collect_grads(pipeline, &mut g);
                for (acc, new) in grads.iter_mut().zip(per_store) {
                    for (a, n) in acc.iter_mut().zip(new) {
                        a.add_assign(&n);
                    }
                }
            }
            let mut scale = 1.0 / batch.len() as f64;
            if let Some(clip) = config.grad_clip {
                let norm = grads
                    .iter()
                    .flatten()
                    .flat_map(|t| t.data())
                    .map(|g| g.as_f64() * g.as_f64())
                    .sum::<f64>()
                    .sqrt()
                    * scale;
                if !norm.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                if norm > clip {
                    scale *= clip / norm;
                }
            }
            let scale = F::of(scale);
            let (mu, wd, lr_f) = (F::of(config.momentum), F::of(config.weight_decay), F::of(lr));
            for ((store, vel), grad) in pipeline.param_stores_mut().into_iter().zip(&mut velocity).zip(&grads) {
                for ((w, v), g) in store.tensors_mut().iter_mut().zip(vel).zip(grad) {
                    for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                        *vi = mu * *vi + *gi * scale + wd * *wi;
                        *wi = *wi - lr_f * *vi;
                    }
                }
            }
            global_step += 1;
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
            lr_end: lr,
        };
        if !stats.loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        info!("epoch {epoch}: loss {:.4} acc {:.3} lr {:.4}", stats.loss, stats.accuracy, lr);
        history.epochs.push(stats);
    }
    Ok(history)
}

/// Fraction of argmax-correct predictions.
pub fn evaluate<F: Float>(pipeline: &Pipeline<F>, data: &Dataset) -> Result<f64> {
    let mut correct = 0;
    for i in 0..data.len() {
        correct += (pipeline.predict(&data.image::<F>(i))? == data.label(i)) as usize;
    }
    Ok(accuracy_of(correct, data.len()))
}

pub(crate) fn accuracy_of(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}
