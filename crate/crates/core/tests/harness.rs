use std::fs;

use sparse_frontend::attacks::{run_attack, AttackConfig, SelectionBackward};
use sparse_frontend::harness::{
    compare_defenses, load_dataset, prepare_data, rerun_manifest, run_sweep, AttackSpec, ExperimentSpec, Manifest,
    Variant, CIFAR_RECORD,
};
use sparse_frontend::model::{load_pipeline, BlockSpec};

fn tiny_spec(dir: &std::path::Path) -> ExperimentSpec {
    let mut s = ExperimentSpec::from_toml(
        r#"
seed = 2
[data]
train = 48
test = 12
[data.synthetic]
samples = 60
image_size = 8
[dictionary]
patches = 400
[dictionary.learn]
atoms = 16
iterations = 4
[frontend]
top_t = 3
[frontend.decoder]
hidden = [8, 4]
[train]
epochs = 2
batch_size = 8
[sweep]
eps = [0.2, 0.05]
examples = 6
"#,
    )
    .unwrap();
    s.output_dir = dir.to_path_buf();
    s.classifier.stem_channels = 4;
    s.classifier.blocks = vec![BlockSpec { channels: 4, stride: 2 }];
    s.attacks = vec![AttackSpec {
        name: "linf".into(),
        attack: AttackConfig {
            steps: 4,
            restarts: 2,
            ..Default::default()
        },
    }];
    s
}

#[test]
fn single_point_sweep_matches_a_direct_attack() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tiny_spec(dir.path());
    spec.sweep.eps = vec![0.05];
    spec.sweep.warm_start = false;
    let out = run_sweep(&spec, 1).unwrap();
    assert_eq!(out.rows.len(), 1);
    let row = &out.rows[0];
    assert_eq!(row.status, "ok");
    assert_eq!(row.config_hash, spec.config_hash());

    let p = load_pipeline::<f32>(&dir.path().join("defended.scfw")).unwrap();
    let (_, test) = prepare_data(&spec).unwrap();
    let cfg = AttackConfig {
        eps: 0.05,
        step: 0.05 * 0.125,
        ..spec.attacks[0].attack.clone()
    };
    let examples = (0..6).map(|i| (i, test.image::<f64>(i).to_f64_vec(), test.label(i)));
    let rep = run_attack(&p, examples, &cfg).unwrap();
    assert_eq!(row.adversarial_accuracy, rep.adversarial_accuracy());
    assert_eq!(row.clean_accuracy, rep.clean_accuracy());
    assert_eq!(row.mean_l2, rep.mean_l2());
}

#[test]
fn sweeps_are_reproducible_and_isolate_failures() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tiny_spec(&dir.path().join("a"));
    spec.sweep.variants = vec![Variant::Defended, Variant::Natural];
    let mut broken = spec.attacks[0].clone();
    broken.name = "broken".into();
    // routing through fewer coefficients than are selected is rejected
    broken.attack.surrogate.selection = SelectionBackward::TopU { u: 2 };
    spec.attacks.push(broken);
    let out = run_sweep(&spec, 2).unwrap();
    // defended × 2 attacks × 2 ε, natural × 2 attacks × 2 ε
    assert_eq!(out.rows.len(), 8);
    let failed: Vec<_> = out.rows.iter().filter(|r| r.status != "ok").collect();
    assert_eq!(failed.len(), 2);
    assert!(failed.iter().all(|r| r.variant == "defended" && r.attack == "broken"));
    // ε ascends within a chain regardless of the configured order
    assert!(out.rows[0].eps < out.rows[1].eps);
    let csv = fs::read_to_string(&out.csv).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.starts_with(&spec.config_hash())));

    let manifest = Manifest::load(&out.manifest).unwrap();
    assert!(manifest.outputs.contains_key("defended.scfw"));
    let differing = rerun_manifest(&manifest, &dir.path().join("b"), 1).unwrap();
    assert!(differing.is_empty(), "{differing:?}");
    assert_eq!(fs::read(&out.csv).unwrap(), fs::read(dir.path().join("b/sweep.csv")).unwrap());

    let mut tampered = manifest.clone();
    tampered.spec.seed += 1;
    assert!(rerun_manifest(&tampered, &dir.path().join("c"), 1).is_err());
}

#[test]
fn comparison_has_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tiny_spec(dir.path());
    spec.compare.examples = 4;
    spec.compare.boundary_examples = 2;
    spec.compare.boundary.steps = 50;
    for a in [&mut spec.compare.linf, &mut spec.compare.l2, &mut spec.compare.l1] {
        a.steps = 3;
        a.restarts = 1;
    }
    let rows = compare_defenses(&spec).unwrap();
    assert_eq!(rows.iter().map(|r| r.variant.as_str()).collect::<Vec<_>>(), ["natural", "defended"]);
    let text = fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    assert!(text.starts_with("config_hash,variant,clean,linf_pgd,linf_cw,l2_pgd,l1_pgd,boundary_l2\n"));
    spec.compare.variants = vec![Variant::Natural];
    assert!(compare_defenses(&spec).is_err());
}

#[test]
fn cifar_batches_load_in_hwc_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for label in [3u8, 7] {
        bytes.push(label);
        // planes R, G, B of 1024 bytes each
        for c in 0..3u8 {
            bytes.extend(std::iter::repeat_n(c * 100, 1024));
        }
    }
    assert_eq!(bytes.len(), 2 * CIFAR_RECORD);
    let path = dir.path().join("data_batch_1.bin");
    fs::write(&path, &bytes).unwrap();
    let data = load_dataset(&path).unwrap();
    assert_eq!((data.len(), data.image_size()), (2, 32));
    assert_eq!(data.labels(), &[3, 7]);
    assert_eq!(&data.pixels(0)[..3], &[0.0, 100.0 / 255.0, 200.0 / 255.0]);
    assert!(load_dataset(dir.path()).is_ok());

    fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    let err = load_dataset(&path).unwrap_err().to_string();
    assert!(err.contains("byte"), "{err}");
}
