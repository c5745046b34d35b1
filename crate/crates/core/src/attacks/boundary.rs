use std::collections::VecDeque;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{AttackTarget, Norm};
use crate::error::{Error, Result};
use crate::nn::init_rng;

/// Decision-boundary attack settings. Defaults follow the common reference
/// implementation rather than anything tuned here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundaryConfig {
    pub steps: usize,
    /// Orthogonal step, relative to the current distance.
    pub spherical_step: f64,
    /// Step toward the clean input, relative to the current distance.
    pub source_step: f64,
    pub step_adaptation: f64,
    /// Proposals between step-size adaptations.
    pub adaptation_trials: usize,
    pub seed: u64,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            spherical_step: 0.01,
            source_step: 0.01,
            step_adaptation: 1.5,
            adaptation_trials: 25,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryOutcome {
    pub perturbation: Vec<f64>,
    pub l2_norm: f64,
    /// ℓ2 distance after initialization and after every accepted proposal.
    pub accepted_norms: Vec<f64>,
    pub queries: usize,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Walks along the decision boundary toward `x`, starting from the nearest
/// pool point whose true label differs from `label` and which the target
/// already misclassifies. Only decisions are queried.
pub fn boundary_attack<T: AttackTarget + ?Sized>(
    target: &T,
    x: &[f64],
    label: usize,
    pool: &[Vec<f64>],
    pool_labels: &[usize],
    config: &BoundaryConfig,
) -> Result<BoundaryOutcome> {
    if pool.len() != pool_labels.len() {
        return Err(Error::shape("boundary pool", &[pool.len()], &[pool_labels.len()]));
    }
    let mut queries = 1;
    if target.predict(x)? != label {
        return Ok(BoundaryOutcome {
            perturbation: vec![0.0; x.len()],
            l2_norm: 0.0,
            accepted_norms: vec![0.0],
            queries,
        });
    }
    let mut order: Vec<usize> = (0..pool.len()).filter(|&i| pool_labels[i] != label).collect();
    if order.is_empty() {
        return Err(Error::invalid("no differently-labeled point to start from"));
    }
    order.sort_by(|&a, &b| dist(&pool[a], x).total_cmp(&dist(&pool[b], x)).then(a.cmp(&b)));
    let mut adv = None;
    for i in order {
        queries += 1;
        if target.predict(&pool[i])? != label {
            adv = Some(pool[i].clone());
            break;
        }
    }
    let mut adv = adv.ok_or_else(|| Error::invalid("no differently-labeled point is misclassified"))?;
    let mut d = dist(&adv, x);
    let mut accepted_norms = vec![d];

    let mut rng = init_rng(config.seed, 31);
    let (mut spherical, mut source) = (config.spherical_step, config.source_step);
    let window = config.adaptation_trials.max(1);
    let mut sph_stats: VecDeque<bool> = VecDeque::with_capacity(window);
    let mut step_stats: VecDeque<bool> = VecDeque::with_capacity(window);
    let n = x.len();
    for step in 1..=config.steps {
        if d == 0.0 {
            break;
        }
        // orthogonal perturbation on the sphere around x
        let toward: Vec<f64> = x.iter().zip(&adv).map(|(a, b)| a - b).collect();
        let unit: Vec<f64> = toward.iter().map(|v| v / d).collect();
        let mut eta: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let en = Norm::L2.of(&eta).max(f64::MIN_POSITIVE);
        eta.iter_mut().for_each(|v| *v *= spherical * d / en);
        let proj: f64 = eta.iter().zip(&unit).map(|(a, b)| a * b).sum();
        eta.iter_mut().zip(&unit).for_each(|(v, u)| *v -= proj * u);
        let shrink = 1.0 / (spherical * spherical + 1.0).sqrt();
        let sph: Vec<f64> = (0..n)
            .map(|i| (x[i] + shrink * (eta[i] - toward[i])).clamp(0.0, 1.0))
            .collect();
        queries += 1;
        let sph_ok = target.predict(&sph)? != label;
        push(&mut sph_stats, sph_ok, window);
        if sph_ok {
            // then move toward x by `source · d`, measured from the new radius
            let new_d = dist(&sph, x);
            let length = ((source * d + new_d - d).max(0.0)) / new_d.max(f64::MIN_POSITIVE);
            let cand: Vec<f64> = (0..n)
                .map(|i| (sph[i] + length * (x[i] - sph[i])).clamp(0.0, 1.0))
                .collect();
            queries += 1;
            let ok = target.predict(&cand)? != label;
            let cd = dist(&cand, x);
            push(&mut step_stats, ok, window);
            if ok && cd < d {
                adv = cand;
                d = cd;
                accepted_norms.push(d);
            }
        }
        if step % window == 0 {
            let rate = |s: &VecDeque<bool>| s.iter().filter(|&&b| b).count() as f64 / s.len().max(1) as f64;
            if sph_stats.len() == window {
                let p = rate(&sph_stats);
                if p > 0.5 {
                    spherical *= config.step_adaptation;
                    source *= config.step_adaptation;
                } else if p < 0.2 {
                    spherical /= config.step_adaptation;
                    source /= config.step_adaptation;
                }
                sph_stats.clear();
            }
            if step_stats.len() == window {
                let p = rate(&step_stats);
                if p > 0.5 {
                    source *= config.step_adaptation;
                } else if p < 0.2 {
                    source /= config.step_adaptation;
                }
                step_stats.clear();
            }
        }
    }
    let perturbation: Vec<f64> = adv.iter().zip(x).map(|(a, b)| a - b).collect();
    Ok(BoundaryOutcome {
        l2_norm: Norm::L2.of(&perturbation),
        perturbation,
        accepted_norms,
        queries,
    })
}

fn push(stats: &mut VecDeque<bool>, v: bool, window: usize) {
    if stats.len() == window {
        stats.pop_front();
    }
    stats.push_back(v);
}
