mod common;

use common::{random_dictionary, rng};
use proptest::prelude::*;
use rand::Rng;
use sparse_frontend::attacks::{
    boundary_attack, pgd_attack, run_attack_warm, ActivationBackward, AttackConfig, AttackTarget, BoundaryConfig,
    LinearTarget, Norm, SelectionBackward, SmoothingConfig, StepMode, SurrogateConfig,
};
use sparse_frontend::frontend::{DecoderConfig, FrontendConfig};
use sparse_frontend::model::{ClassifierConfig, LossKind, Pipeline};

fn small_defended() -> Pipeline<f32> {
    let mut r = rng(4);
    let dict = random_dictionary(&mut r, 48, 16);
    let fcfg = FrontendConfig {
        top_t: 3,
        eps: 0.02,
        decoder: DecoderConfig { hidden: [8, 4], layers: None },
        ..Default::default()
    };
    Pipeline::defended(8, dict, &fcfg, &ClassifierConfig::linear(3)).unwrap()
}

fn images(seed: u64, count: usize, len: usize) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..count).map(|_| (0..len).map(|_| r.random::<f64>()).collect()).collect()
}

/// Labels each image with the target's own prediction so every example
/// starts correctly classified.
fn cases<T: AttackTarget>(t: &T, xs: Vec<Vec<f64>>) -> Vec<(usize, Vec<f64>, usize)> {
    xs.into_iter()
        .enumerate()
        .map(|(i, x)| {
            let y = t.predict(&x).unwrap();
            (i, x, y)
        })
        .collect()
}

fn check_rows(cases: &[(usize, Vec<f64>, usize)], es: &[Vec<f64>], cfg: &AttackConfig) {
    for ((_, x, _), e) in cases.iter().zip(es) {
        let n = match cfg.norm {
            Norm::L1 => e.iter().map(|v| v.abs()).sum::<f64>(),
            Norm::L2 => e.iter().map(|v| v * v).sum::<f64>().sqrt(),
            Norm::Linf => e.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        };
        assert!(n <= cfg.eps * (1.0 + 1e-9), "norm {n} over budget {}", cfg.eps);
        assert!(x.iter().zip(e).all(|(a, b)| (0.0..=1.0).contains(&(a + b))));
    }
}

fn config_strategy() -> impl Strategy<Value = AttackConfig> {
    (
        prop_oneof![Just(Norm::L1), Just(Norm::L2), Just(Norm::Linf)],
        0.0f64..1.5,
        0.05f64..0.5,
        0usize..6,
        1usize..4,
        any::<bool>(),
        any::<bool>(),
        any::<bool>(),
        0usize..3,
        0usize..3,
        any::<u64>(),
        any::<bool>(),
    )
        .prop_map(|(norm, eps, ratio, steps, restarts, cw, sign, init, act, sel, seed, smooth)| {
            let eps = match norm {
                Norm::Linf => eps * 0.2,
                Norm::L2 => eps,
                Norm::L1 => eps * 5.0,
            };
            AttackConfig {
                norm,
                eps,
                step: if eps == 0.0 { 0.0 } else { ratio * eps },
                steps,
                restarts,
                loss: if cw { LossKind::CwMargin } else { LossKind::CrossEntropy },
                seed,
                step_mode: (norm == Norm::Linf).then_some(if sign { StepMode::Sign } else { StepMode::LpNormalized }),
                random_init: init,
                surrogate: SurrogateConfig {
                    activation: [ActivationBackward::ExactZero, ActivationBackward::Identity, ActivationBackward::Smooth]
                        [act],
                    steepness: 4.0,
                    selection: [SelectionBackward::TopT, SelectionBackward::TopU { u: 5 }, SelectionBackward::Identity][sel],
                },
                smoothing: smooth.then_some(SmoothingConfig { samples: 3, radius: 0.01 }),
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_row_respects_budget_and_pixels(cfg in config_strategy(), seed in 0u64..100) {
        let p = small_defended();
        let cs = cases(&p, images(seed, 3, p.input_len()));
        let (rep, es) = run_attack_warm(&p, &cs, &cfg, None).unwrap();
        check_rows(&cs, &es, &cfg);
        for (row, e) in rep.rows.iter().zip(&es) {
            prop_assert!((row.lp_norm - cfg.norm.of(e)).abs() < 1e-12);
        }
        let lin = LinearTarget {
            weights: (0..3).map(|k| (0..12).map(|i| ((i * 7 + k * 3) % 5) as f64 - 2.0).collect()).collect(),
            bias: vec![0.0, 0.1, -0.1],
        };
        let cs = cases(&lin, images(seed + 1, 4, 12));
        let (_, es) = run_attack_warm(&lin, &cs, &cfg, None).unwrap();
        check_rows(&cs, &es, &cfg);
    }
}

#[test]
fn warm_starts_stay_in_budget() {
    let p = small_defended();
    let cs = cases(&p, images(1, 4, p.input_len()));
    let big = vec![vec![0.9; p.input_len()]; cs.len()];
    for norm in [Norm::L1, Norm::L2, Norm::Linf] {
        let cfg = AttackConfig {
            norm,
            eps: 0.1,
            step: 0.02,
            steps: 3,
            restarts: 1,
            ..Default::default()
        };
        let (_, es) = run_attack_warm(&p, &cs, &cfg, Some(&big)).unwrap();
        check_rows(&cs, &es, &cfg);
    }
}

#[test]
fn attacks_are_deterministic_and_restarts_nest() {
    let p = small_defended();
    let cs = cases(&p, images(2, 6, p.input_len()));
    let cfg = |restarts| AttackConfig {
        eps: 0.05,
        step: 0.01,
        steps: 5,
        restarts,
        seed: 17,
        ..Default::default()
    };
    for (_, x, y) in &cs {
        let a = pgd_attack(&p, x, *y, &cfg(4)).unwrap();
        let b = pgd_attack(&p, x, *y, &cfg(4)).unwrap();
        assert_eq!(a, b);
        let one = pgd_attack(&p, x, *y, &cfg(1)).unwrap();
        if one.success {
            // the longer run replays restart 0 first and stops at the same iterate
            assert_eq!(one.perturbation, a.perturbation);
        }
        assert!(a.final_loss >= one.final_loss);
    }
}

#[test]
fn boundary_attack_approaches_the_linear_margin() {
    // decision z0 − z1 = 2(x0 − 0.5): ℓ2 distance from x to the boundary is |x0 − 0.5|
    let t = LinearTarget {
        weights: vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
        bias: vec![-0.5, 0.5],
    };
    let pool = vec![vec![0.1, 0.9], vec![0.2, 0.1], vec![0.9, 0.5]];
    let labels = vec![1, 1, 0];
    let cfg = BoundaryConfig {
        steps: 2000,
        ..Default::default()
    };
    for x in [[0.7, 0.5], [0.62, 0.2], [0.9, 0.8]] {
        let out = boundary_attack(&t, &x, 0, &pool, &labels, &cfg).unwrap();
        let true_d = x[0] - 0.5;
        assert!(out.l2_norm <= true_d * 1.1, "{x:?}: {} vs {true_d}", out.l2_norm);
        assert!(out.l2_norm >= true_d * (1.0 - 1e-9));
        let adv: Vec<f64> = x.iter().zip(&out.perturbation).map(|(a, b)| a + b).collect();
        assert_eq!(t.predict(&adv).unwrap(), 1);
        for w in out.accepted_norms.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }
    assert!(boundary_attack(&t, &[0.7, 0.5], 0, &pool[2..], &labels[2..], &cfg).is_err());
}
