use rand::Rng;
use rand_distr::StandardNormal;

use super::{argmax, project_lp_ball, smoothed_gradient, AttackConfig, AttackTarget, Norm, StepMode};
use crate::error::{Error, Result};
use crate::nn::init_rng;

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub perturbation: Vec<f64>,
    /// The gradient was identically zero and no step was taken.
    pub stalled: bool,
}

/// One projected step: move along the (normalized or signed) gradient, project
/// onto the ε-ball, clamp `x + e` to `[0, 1]` and re-derive `e` from the
/// clamped image.
pub fn pgd_step(x: &[f64], e: &[f64], grad: &[f64], config: &AttackConfig) -> Result<StepOutcome> {
    if x.len() != e.len() || x.len() != grad.len() {
        return Err(Error::shape("pgd step", &[x.len(), e.len()], &[grad.len()]));
    }
    if grad.iter().all(|&g| g == 0.0) {
        return Ok(StepOutcome {
            perturbation: e.to_vec(),
            stalled: true,
        });
    }
    let moved: Vec<f64> = match config.step_mode() {
        StepMode::Sign => e
            .iter()
            .zip(grad)
            .map(|(ei, g)| ei + config.step * sign(*g))
            .collect(),
        StepMode::LpNormalized => {
            let n = config.norm.of(grad);
            e.iter().zip(grad).map(|(ei, g)| ei + config.step * g / n).collect()
        }
    };
    let projected = project_lp_ball(&moved, config.norm, config.eps);
    Ok(StepOutcome {
        perturbation: clamp_to_image(x, &projected, config),
        stalled: false,
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `clamp(x + e, 0, 1) − x`, re-projected if the rounding pushed it out of
/// the ball.
fn clamp_to_image(x: &[f64], e: &[f64], config: &AttackConfig) -> Vec<f64> {
    let mut out: Vec<f64> = x.iter().zip(e).map(|(a, b)| (a + b).clamp(0.0, 1.0) - a).collect();
    if config.norm.of(&out) > config.eps {
        out = project_lp_ball(&out, config.norm, config.eps);
        // projection only shrinks magnitudes, so the pixels stay valid up to
        // rounding; pin them exactly
        for (o, a) in out.iter_mut().zip(x) {
            if a + *o > 1.0 || a + *o < 0.0 {
                *o = 0.0;
            }
        }
    }
    out
}

fn random_start(x: &[f64], config: &AttackConfig, rng: &mut impl Rng) -> Vec<f64> {
    if !config.random_init || config.eps == 0.0 {
        return vec![0.0; x.len()];
    }
    let e: Vec<f64> = match config.norm {
        Norm::Linf => (0..x.len()).map(|_| rng.random_range(-config.eps..=config.eps)).collect(),
        norm => {
            let dir: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
            let n = norm.of(&dir).max(f64::MIN_POSITIVE);
            let r = config.eps * rng.random::<f64>();
            dir.iter().map(|d| d * r / n).collect()
        }
    };
    clamp_to_image(x, &e, config)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome {
    pub perturbation: Vec<f64>,
    pub clean_correct: bool,
    pub success: bool,
    /// Largest loss seen over every evaluated iterate.
    pub final_loss: f64,
    /// Restarts started before the attack ended.
    pub restarts_used: usize,
    pub stalled_steps: usize,
}

/// PGD with `N_r` restarts of `N_s` steps. Restart `j` draws its start from a
/// stream derived from `(seed, j)`, so a longer run replays a shorter one
/// before continuing. Returns the first misclassifying iterate, otherwise the
/// highest-loss one.
pub fn pgd_attack<T: AttackTarget + ?Sized>(
    target: &T,
    x: &[f64],
    label: usize,
    config: &AttackConfig,
) -> Result<AttackOutcome> {
    pgd_attack_from(target, x, label, config, None)
}

/// [`pgd_attack`] with an extra first run of `N_s` steps started from `init`
/// (projected into the ball), e.g. the solution found at a smaller budget.
pub fn pgd_attack_from<T: AttackTarget + ?Sized>(
    target: &T,
    x: &[f64],
    label: usize,
    config: &AttackConfig,
    init: Option<&[f64]>,
) -> Result<AttackOutcome> {
    config.validate()?;
    config.surrogate.validate(target.top_t())?;
    if x.len() != target.input_len() {
        return Err(Error::shape("attack input", &[x.len()], &[target.input_len()]));
    }
    let surrogates = config.surrogate.registry()?;
    let eval = |point: &[f64]| target.loss_and_grad(point, label, config.loss, &surrogates);
    let (clean_loss, clean_logits, _) = eval(x)?;
    if argmax(&clean_logits) != label {
        return Ok(AttackOutcome {
            perturbation: vec![0.0; x.len()],
            clean_correct: false,
            success: true,
            final_loss: clean_loss,
            restarts_used: 0,
            stalled_steps: 0,
        });
    }
    let mut best_e = vec![0.0; x.len()];
    let mut best_loss = clean_loss;
    let mut stalled_steps = 0;
    let mut point = vec![0.0; x.len()];
    let warm = init.map(|e0| {
        let e = project_lp_ball(e0, config.norm, config.eps);
        clamp_to_image(x, &e, config)
    });
    let runs = warm.is_some() as usize + config.restarts;
    for run in 0..runs {
        let restart = run - (warm.is_some() && run > 0) as usize;
        let mut e = match (&warm, run) {
            (Some(w), 0) => w.clone(),
            _ => random_start(x, config, &mut init_rng(config.seed, restart as u64)),
        };
        for step in 0..=config.steps {
            for ((p, a), b) in point.iter_mut().zip(x).zip(&e) {
                *p = a + b;
            }
            let (loss, logits, grad) = eval(&point)?;
            if !loss.is_finite() {
                return Err(Error::invalid(format!("non-finite attack loss in run {run}")));
            }
            if loss > best_loss {
                best_loss = loss;
                best_e.clone_from(&e);
            }
            if argmax(&logits) != label {
                return Ok(AttackOutcome {
                    perturbation: e,
                    clean_correct: true,
                    success: true,
                    final_loss: best_loss,
                    restarts_used: run + 1,
                    stalled_steps,
                });
            }
            if step == config.steps {
                break;
            }
            let grad = match config.smoothing {
                Some(s) => smoothed_gradient(
                    &point,
                    s.samples,
                    s.radius,
                    config.seed ^ ((run as u64) << 32 | step as u64),
                    |p| Ok(eval(p)?.2),
                )?,
                None => grad,
            };
            let out = pgd_step(x, &e, &grad, config)?;
            stalled_steps += out.stalled as usize;
            e = out.perturbation;
        }
    }
    Ok(AttackOutcome {
        perturbation: best_e,
        clean_correct: true,
        success: false,
        final_loss: best_loss,
        restarts_used: runs,
        stalled_steps,
    })
}
