mod common;

use common::{random_dictionary, rng};
use rand::Rng;
use sparse_frontend::dictlearn::{read_dictionary, write_dictionary};
use sparse_frontend::frontend::{DecoderConfig, FrontendConfig};
use sparse_frontend::harness::{synth_dataset, Dataset, Provenance, SynthSpec};
use sparse_frontend::model::{
    cyclic_lr, evaluate, load_pipeline, save_pipeline, train, ClassifierConfig, Pipeline, TrainConfig, TrainMode,
};
use sparse_frontend::{Error, Tensor};

fn dataset(pixels: Vec<f32>, labels: Vec<usize>, n: usize, classes: usize) -> Dataset {
    Dataset::new(n, classes, pixels, labels, Provenance::File { path: "memory".into() }).unwrap()
}

/// Two classes split by mean brightness, with per-pixel jitter.
fn separable(count: usize) -> Dataset {
    let mut r = rng(2);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for i in 0..count {
        let y = i % 2;
        let base = if y == 0 { 0.3 } else { 0.7 };
        pixels.extend((0..4 * 4 * 3).map(|_| base + r.random_range(-0.25f32..0.25)));
        labels.push(y);
    }
    dataset(pixels, labels, 4, 2)
}

fn tiny_cnn(classes: usize) -> ClassifierConfig {
    ClassifierConfig {
        stem_channels: 4,
        blocks: vec![sparse_frontend::model::BlockSpec { channels: 4, stride: 2 }],
        num_classes: classes,
        ..Default::default()
    }
}

fn params(p: &Pipeline<f32>) -> Vec<Vec<f32>> {
    p.param_stores()
        .iter()
        .flat_map(|s| s.tensors().iter().map(|t| t.data().to_vec()))
        .collect()
}

#[test]
fn schedule_points() {
    assert!((cyclic_lr(45, 100, 0.05) - 0.05).abs() < 1e-15);
    assert!((cyclic_lr(0, 100, 0.05) - 0.005).abs() < 1e-15);
    assert!((cyclic_lr(100, 100, 0.05) - 0.005).abs() < 1e-15);
    assert!((0..=100).all(|s| cyclic_lr(s, 100, 0.0) == 0.0));
}

#[test]
fn linear_model_separates_two_classes() {
    let data = separable(200);
    let mut p = Pipeline::<f32>::natural(4, &ClassifierConfig::linear(2)).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 16,
        lr_max: 0.05,
        ..Default::default()
    };
    let history = train(&mut p, &data, &cfg).unwrap();
    assert_eq!(history.epochs.len(), 50);
    assert!(evaluate(&p, &data).unwrap() >= 0.99);
}

#[test]
fn zero_learning_rate_leaves_weights_bit_identical() {
    let data = separable(20);
    let mut p = Pipeline::<f32>::natural(4, &tiny_cnn(2)).unwrap();
    let before = params(&p);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        lr_max: 0.0,
        ..Default::default()
    };
    assert!(cfg.validate().is_err() || train(&mut p, &data, &cfg).is_ok());
    assert_eq!(params(&p), before);
}

#[test]
fn training_is_deterministic_and_keeps_the_dictionary_frozen() {
    let data = synth_dataset(&SynthSpec { samples: 24, image_size: 8, ..Default::default() }, 3).unwrap();
    let mut r = rng(1);
    let dict = random_dictionary(&mut r, 48, 16);
    let mut dict_bytes = Vec::new();
    write_dictionary(&dict, &mut dict_bytes).unwrap();
    let fcfg = FrontendConfig {
        top_t: 3,
        decoder: DecoderConfig { hidden: [8, 4], layers: None },
        ..Default::default()
    };
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        horizontal_flip: true,
        ..Default::default()
    };
    let run = || {
        let mut p = Pipeline::<f32>::defended(8, dict.clone(), &fcfg, &tiny_cnn(4)).unwrap();
        let h = train(&mut p, &data, &cfg).unwrap();
        (p, h)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(params(&a), params(&b));
    assert_eq!(ha, hb);
    let mut after = Vec::new();
    write_dictionary(a.frontend().unwrap().encoder.dictionary(), &mut after).unwrap();
    assert_eq!(after, dict_bytes);
}

#[test]
fn adversarial_mode_trains() {
    let data = synth_dataset(&SynthSpec { samples: 16, image_size: 8, ..Default::default() }, 4).unwrap();
    let mut p = Pipeline::<f32>::natural(8, &tiny_cnn(4)).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        mode: TrainMode::Adversarial {
            eps: 8.0 / 255.0,
            step: 1.0 / 255.0,
            steps: 10,
        },
        ..Default::default()
    };
    let before = params(&p);
    let h = train(&mut p, &data, &cfg).unwrap();
    assert!(h.epochs[0].loss.is_finite());
    assert_ne!(params(&p), before);
}

#[test]
fn divergence_reports_the_epoch() {
    let data = separable(16);
    let mut p = Pipeline::<f32>::natural(4, &ClassifierConfig::linear(2)).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        lr_max: 1e38,
        grad_clip: None,
        ..Default::default()
    };
    match train(&mut p, &data, &cfg) {
        Err(Error::Diverged { epoch }) => assert!(epoch < 3),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn small_cnn_overfits_a_fixed_batch() {
    let data = synth_dataset(&SynthSpec { samples: 32, ..Default::default() }, 5).unwrap();
    let mut p = Pipeline::<f32>::natural(16, &ClassifierConfig { num_classes: 4, ..Default::default() }).unwrap();
    let cfg = TrainConfig {
        epochs: 500,
        batch_size: 32,
        ..Default::default()
    };
    let h = train(&mut p, &data, &cfg).unwrap();
    let last = h.epochs.last().unwrap().loss;
    assert!(last < 0.01, "final loss {last}");
}

#[test]
fn evaluate_counts_exactly() {
    let mut r = rng(8);
    let n = 4;
    let p = Pipeline::<f32>::natural(n, &tiny_cnn(10)).unwrap();
    let pixels: Vec<f32> = (0..100 * n * n * 3).map(|_| r.random()).collect();
    // labels equal to the net's own predictions: a perfect predictor
    let unlabeled = dataset(pixels.clone(), vec![0; 100], n, 10);
    let predicted: Vec<usize> = (0..100).map(|i| p.predict(&unlabeled.image(i)).unwrap()).collect();
    let perfect = dataset(pixels.clone(), predicted.clone(), n, 10);
    assert_eq!(evaluate(&p, &perfect.take(10)).unwrap(), 1.0);

    // random labels: an untrained net stays near chance
    let random: Vec<usize> = (0..100).map(|_| r.random_range(0..10)).collect();
    let acc = evaluate(&p, &dataset(pixels.clone(), random.clone(), n, 10)).unwrap();
    assert!((0.0..=0.3).contains(&acc), "{acc}");

    // permutation invariance
    let order: Vec<usize> = (0..100).rev().collect();
    let shuffled = dataset(pixels.clone(), random, n, 10);
    assert_eq!(evaluate(&p, &shuffled).unwrap(), evaluate(&p, &shuffled.subset(&order)).unwrap());

    // constant predictor on a balanced set
    let mut c = Pipeline::<f32>::natural(n, &ClassifierConfig::linear(10)).unwrap();
    for store in c.param_stores_mut() {
        for t in store.tensors_mut() {
            let is_bias = t.shape() == [10];
            for (k, v) in t.data_mut().iter_mut().enumerate() {
                *v = if is_bias && k == 3 { 1.0 } else { 0.0 };
            }
        }
    }
    let balanced = dataset(pixels, (0..100).map(|i| i % 10).collect(), n, 10);
    assert_eq!(evaluate(&c, &balanced).unwrap(), 0.1);
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(6);
    let dict = random_dictionary(&mut r, 48, 16);
    let dict_path = dir.path().join("d.scfd");
    write_dictionary(&dict, std::fs::File::create(&dict_path).unwrap()).unwrap();
    // the file stores f32 atoms; build from what a load will see
    let dict = read_dictionary(std::fs::File::open(&dict_path).unwrap()).unwrap();
    let fcfg = FrontendConfig {
        top_t: 3,
        decoder: DecoderConfig { hidden: [8, 4], layers: None },
        ..Default::default()
    };
    let img = Tensor::new(vec![8, 8, 3], (0..192).map(|i| (i % 13) as f32 / 12.0).collect()).unwrap();

    let defended = Pipeline::<f32>::defended(8, dict, &fcfg, &tiny_cnn(3)).unwrap();
    let path = dir.path().join("d.scfw");
    save_pipeline(&defended, &path, Some(&dict_path)).unwrap();
    let back = load_pipeline::<f32>(&path).unwrap();
    assert_eq!(back.config_hash(), defended.config_hash());
    assert_eq!(back.logits(&img).unwrap(), defended.logits(&img).unwrap());

    let natural = Pipeline::<f32>::natural(8, &tiny_cnn(3)).unwrap();
    let npath = dir.path().join("n.scfw");
    save_pipeline(&natural, &npath, None).unwrap();
    assert_eq!(load_pipeline::<f32>(&npath).unwrap().logits(&img).unwrap(), natural.logits(&img).unwrap());

    // a changed dictionary file no longer matches the recorded digest
    let mut bytes = std::fs::read(&dict_path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&dict_path, bytes).unwrap();
    assert!(load_pipeline::<f32>(&path).is_err());

    let mut ck = std::fs::read(&npath).unwrap();
    ck.truncate(ck.len() - 3);
    std::fs::write(&npath, &ck).unwrap();
    assert!(matches!(load_pipeline::<f32>(&npath), Err(Error::Format { .. })));
}
