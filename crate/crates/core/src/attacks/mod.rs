//! Adaptive attacks: PGD under ℓ∞/ℓ2/ℓ1 with restarts, surrogate backward
//! passes and gradient smoothing, plus the decision-boundary attack.
//!
//! Attack state is kept in `f64` regardless of the pipeline precision.

mod boundary;
mod pgd;
mod report;

pub use boundary::{boundary_attack, BoundaryConfig, BoundaryOutcome};
pub use pgd::{pgd_attack, pgd_attack_from, pgd_step, AttackOutcome, StepOutcome};
pub use report::{run_attack, run_attack_warm, AttackReport, ReportRow};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{SurrogateKind, SurrogateRegistry, SurrogateRule};
use crate::error::{Error, Result};
use crate::model::{LossKind, Pipeline};
use crate::nn::init_rng;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "1", alias = "l1")]
    L1,
    #[serde(rename = "2", alias = "l2")]
    L2,
    #[serde(rename = "inf", alias = "linf")]
    Linf,
}

impl Norm {
    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::L1 => "1",
            Norm::L2 => "2",
            Norm::Linf => "inf",
        })
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "l1" => Ok(Norm::L1),
            "2" | "l2" => Ok(Norm::L2),
            "inf" | "linf" | "∞" => Ok(Norm::Linf),
            other => Err(Error::Config(format!("unknown norm {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepMode {
    /// `δ · g / ‖g‖_p`.
    LpNormalized,
    /// `δ · sign(g)`; ℓ∞ only.
    Sign,
}

/// Backward pass through the quantizer during an attack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationBackward {
    /// True derivative: zero almost everywhere.
    ExactZero,
    #[default]
    Identity,
    Smooth,
}

/// Backward pass through top-T selection during an attack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "rule")]
pub enum SelectionBackward {
    /// Through the `T` kept coefficients.
    #[default]
    TopT,
    TopU { u: usize },
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub activation: ActivationBackward,
    pub steepness: f64,
    pub selection: SelectionBackward,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            activation: ActivationBackward::Identity,
            steepness: 4.0,
            selection: SelectionBackward::TopT,
        }
    }
}

impl SurrogateConfig {
    /// `top_t` is the pipeline's `T`, used to check `U ≥ T`.
    pub fn validate(&self, top_t: Option<usize>) -> Result<()> {
        if !(self.steepness > 0.0 && self.steepness.is_finite()) {
            return Err(Error::Config(format!("steepness {} must be positive", self.steepness)));
        }
        if let (SelectionBackward::TopU { u }, Some(t)) = (self.selection, top_t) {
            if u < t {
                return Err(Error::Config(format!("top-U routing needs U >= T, got U = {u}, T = {t}")));
            }
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<SurrogateRegistry> {
        let mut reg = SurrogateRegistry::default();
        match self.activation {
            ActivationBackward::ExactZero => {}
            ActivationBackward::Identity => reg.register(SurrogateKind::Quantizer, SurrogateRule::Identity)?,
            ActivationBackward::Smooth => reg.register(
                SurrogateKind::Quantizer,
                SurrogateRule::SmoothActivation {
                    steepness: self.steepness,
                },
            )?,
        }
        match self.selection {
            SelectionBackward::TopT => {}
            SelectionBackward::TopU { u } => reg.register(SurrogateKind::Selection, SurrogateRule::TopURouting { u })?,
            SelectionBackward::Identity => reg.register(SurrogateKind::Selection, SurrogateRule::Identity)?,
        }
        Ok(reg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingConfig {
    pub samples: usize,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub norm: Norm,
    pub eps: f64,
    /// Step size δ.
    pub step: f64,
    /// PGD steps per restart, `N_s`.
    pub steps: usize,
    /// Restarts, `N_r`.
    pub restarts: usize,
    pub loss: LossKind,
    pub seed: u64,
    /// Defaults to sign steps for ℓ∞ and normalized steps otherwise.
    pub step_mode: Option<StepMode>,
    /// Start each restart at a random point of the ball instead of `e = 0`.
    pub random_init: bool,
    pub surrogate: SurrogateConfig,
    pub smoothing: Option<SmoothingConfig>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        let eps = 8.0 / 255.0;
        Self {
            norm: Norm::Linf,
            eps,
            step: eps / 8.0,
            steps: 40,
            restarts: 100,
            loss: LossKind::CrossEntropy,
            seed: 0,
            step_mode: None,
            random_init: true,
            surrogate: SurrogateConfig::default(),
            smoothing: None,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps = {} must be finite and >= 0", self.eps)));
        }
        // a zero budget admits a zero step
        if !((self.step > 0.0 || self.eps == 0.0) && self.step >= 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!("step = {} must be positive", self.step)));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be >= 1".into()));
        }
        if self.step_mode == Some(StepMode::Sign) && self.norm != Norm::Linf {
            return Err(Error::Config("sign steps are only defined for the inf norm".into()));
        }
        if let Some(s) = self.smoothing {
            if s.samples == 0 || !(s.radius >= 0.0) {
                return Err(Error::Config("smoothing needs samples >= 1 and radius >= 0".into()));
            }
        }
        self.surrogate.validate(None)
    }

    pub fn step_mode(&self) -> StepMode {
        self.step_mode.unwrap_or(match self.norm {
            Norm::Linf => StepMode::Sign,
            _ => StepMode::LpNormalized,
        })
    }
}

/// What an attack may ask of a model. Inputs are flat `[0, 1]` vectors.
pub trait AttackTarget {
    fn input_len(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn logits(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// Loss, logits and input gradient under the given backward rules.
    fn loss_and_grad(
        &self,
        x: &[f64],
        label: usize,
        loss: LossKind,
        surrogates: &SurrogateRegistry,
    ) -> Result<(f64, Vec<f64>, Vec<f64>)>;
    /// `T` of the frontend, if there is one.
    fn top_t(&self) -> Option<usize> {
        None
    }

    fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }
}

impl<F: Float> AttackTarget for Pipeline<F> {
    fn input_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    fn num_classes(&self) -> usize {
        Pipeline::num_classes(self)
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(Pipeline::logits(self, &Tensor::from_f64(self.image_shape().to_vec(), x)?)?.to_f64_vec())
    }

    fn loss_and_grad(
        &self,
        x: &[f64],
        label: usize,
        loss: LossKind,
        surrogates: &SurrogateRegistry,
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let image = Tensor::from_f64(self.image_shape().to_vec(), x)?;
        let g = self.input_gradient(&image, label, loss, surrogates)?;
        Ok((g.loss.as_f64(), g.logits.to_f64_vec(), g.gradient.to_f64_vec()))
    }

    fn top_t(&self) -> Option<usize> {
        self.frontend().map(|f| f.encoder.top_t())
    }
}

/// Multiclass linear model `z = W x + b`, used for closed-form checks.
#[derive(Clone, Debug)]
pub struct LinearTarget {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl AttackTarget for LinearTarget {
    fn input_len(&self) -> usize {
        self.weights[0].len()
    }

    fn num_classes(&self) -> usize {
        self.weights.len()
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_len() {
            return Err(Error::shape("linear target", &[x.len()], &[self.input_len()]));
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b)
            .collect())
    }

    fn loss_and_grad(
        &self,
        x: &[f64],
        label: usize,
        loss: LossKind,
        _surrogates: &SurrogateRegistry,
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let z = self.logits(x)?;
        let (value, dz) = match loss {
            LossKind::CrossEntropy => {
                let p = softmax(&z);
                let mut dz = p.clone();
                dz[label] -= 1.0;
                (-p[label].ln(), dz)
            }
            LossKind::CwMargin => {
                let value = cw_margin_loss(&z, label)?;
                let other = (0..z.len())
                    .filter(|&i| i != label)
                    .fold(None::<usize>, |best, i| match best {
                        Some(b) if z[b] >= z[i] => Some(b),
                        _ => Some(i),
                    })
                    .expect("two classes");
                let mut dz = vec![0.0; z.len()];
                dz[other] += 1.0;
                dz[label] -= 1.0;
                (value, dz)
            }
        };
        let mut g = vec![0.0; x.len()];
        for (w, d) in self.weights.iter().zip(&dz) {
            for (gi, wi) in g.iter_mut().zip(w) {
                *gi += d * wi;
            }
        }
        Ok((value, z, g))
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Largest incorrect logit minus the correct one; positive iff misclassified
/// (up to ties).
pub fn cw_margin_loss(logits: &[f64], label: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::invalid("margin loss needs at least two classes"));
    }
    if label >= logits.len() {
        return Err(Error::invalid(format!("label {label} outside {} classes", logits.len())));
    }
    let other = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(other - logits[label])
}

/// Euclidean projection onto the ε-ball of the given norm.
pub fn project_lp_ball(e: &[f64], norm: Norm, eps: f64) -> Vec<f64> {
    match norm {
        Norm::Linf => e.iter().map(|v| v.clamp(-eps, eps)).collect(),
        Norm::L2 => {
            let n = Norm::L2.of(e);
            if n <= eps {
                e.to_vec()
            } else {
                e.iter().map(|v| v * (eps / n)).collect()
            }
        }
        Norm::L1 => project_l1(e, eps),
    }
}

/// Sort-and-threshold projection onto the ℓ1 ball.
fn project_l1(e: &[f64], eps: f64) -> Vec<f64> {
    if Norm::L1.of(e) <= eps {
        return e.to_vec();
    }
    if eps == 0.0 {
        return vec![0.0; e.len()];
    }
    let mut u: Vec<f64> = e.iter().map(|v| v.abs()).collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - eps) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    e.iter().map(|&v| v.signum() * (v.abs() - theta).max(0.0)).collect()
}

/// Mean gradient over `samples` points drawn uniformly from the ℓ∞ box of
/// the given radius around `point`.
pub fn smoothed_gradient(
    point: &[f64],
    samples: usize,
    radius: f64,
    seed: u64,
    mut grad: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(Error::invalid("smoothing needs at least one sample"));
    }
    let mut rng = init_rng(seed, 23);
    let mut acc = vec![0.0; point.len()];
    let mut probe = point.to_vec();
    for _ in 0..samples {
        for (p, &x) in probe.iter_mut().zip(point) {
            *p = if radius > 0.0 { x + rng.random_range(-radius..=radius) } else { x };
        }
        for (a, g) in acc.iter_mut().zip(grad(&probe)?) {
            *a += g;
        }
    }
    acc.iter_mut().for_each(|a| *a /= samples as f64);
    Ok(acc)
}

/// Checks that `x + e` is a valid image; used on every report row.
pub(crate) fn check_pixels(x: &[f64], e: &[f64]) -> bool {
    x.iter().zip(e).all(|(a, b)| (0.0..=1.0).contains(&(a + b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn margin_examples() {
        assert_eq!(cw_margin_loss(&[2.0, 5.0, 1.0], 0).unwrap(), 3.0);
        assert_eq!(cw_margin_loss(&[4.0, 1.0, 1.5], 0).unwrap(), -2.5);
        assert_eq!(cw_margin_loss(&[0.0, 3.0, 3.0], 0).unwrap(), 3.0);
        assert!(cw_margin_loss(&[1.0], 0).is_err());
    }

    #[test]
    fn projections() {
        assert_eq!(project_lp_ball(&[0.6, 0.8], Norm::L2, 0.5), vec![0.3, 0.4]);
        let p = project_lp_ball(&[0.8, 0.3], Norm::L1, 0.5);
        assert!((p[0] - 0.5).abs() < 1e-15 && p[1] == 0.0);
        assert_eq!(project_lp_ball(&[0.2, -0.7], Norm::Linf, 0.5), vec![0.2, -0.5]);
        let inside = [0.1, -0.1];
        for norm in [Norm::L1, Norm::L2, Norm::Linf] {
            assert_eq!(project_lp_ball(&inside, norm, 1.0), inside.to_vec());
        }
    }

    #[test]
    fn smoothing_degenerate_and_linear() {
        let g = smoothed_gradient(&[0.3, 0.4], 1, 0.0, 0, |p| Ok(p.to_vec())).unwrap();
        assert_eq!(g, vec![0.3, 0.4]);
        let g = smoothed_gradient(&[0.3, 0.4], 40, 0.1, 0, |_| Ok(vec![1.5, -2.0])).unwrap();
        assert_eq!(g, vec![1.5, -2.0]);
    }

    #[test]
    fn smoothing_quadratic_mean() {
        let (r, s) = (0.2, 400);
        let g = smoothed_gradient(&[0.5, -0.25, 0.1], s, r, 9, |p| Ok(p.to_vec())).unwrap();
        for (a, b) in g.iter().zip([0.5, -0.25, 0.1]) {
            assert!((a - b).abs() < 3.0 * r / (s as f64).sqrt());
        }
    }

    #[test]
    fn surrogate_configs_validate() {
        let top_u = SurrogateConfig {
            selection: SelectionBackward::TopU { u: 3 },
            ..Default::default()
        };
        assert!(top_u.validate(Some(4)).is_err());
        assert!(top_u.validate(Some(3)).is_ok());
        let reg = top_u.registry().unwrap();
        assert_eq!(reg.get(SurrogateKind::Selection), Some(SurrogateRule::TopURouting { u: 3 }));
        assert_eq!(reg.get(SurrogateKind::Quantizer), Some(SurrogateRule::Identity));
        let exact = SurrogateConfig {
            activation: ActivationBackward::ExactZero,
            ..Default::default()
        };
        assert_eq!(exact.registry().unwrap().get(SurrogateKind::Quantizer), None);
    }

    #[test]
    fn linear_target_gradient_matches_differences() {
        let t = LinearTarget {
            weights: vec![vec![1.0, -2.0], vec![0.5, 0.3], vec![-1.0, 1.0]],
            bias: vec![0.0, 0.1, -0.2],
        };
        let x = [0.3, 0.6];
        for loss in [LossKind::CrossEntropy, LossKind::CwMargin] {
            let (_, _, g) = t.loss_and_grad(&x, 1, loss, &SurrogateRegistry::default()).unwrap();
            for i in 0..2 {
                let h = 1e-6;
                let mut a = x;
                let mut b = x;
                a[i] += h;
                b[i] -= h;
                let fa = t.loss_and_grad(&a, 1, loss, &Default::default()).unwrap().0;
                let fb = t.loss_and_grad(&b, 1, loss, &Default::default()).unwrap().0;
                assert!(((fa - fb) / (2.0 * h) - g[i]).abs() < 1e-6);
            }
        }
    }
}
