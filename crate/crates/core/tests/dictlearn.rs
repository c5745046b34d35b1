mod common;

use common::{planted_patches, recovery_rate};
use sparse_frontend::dictlearn::{learn_dictionary_traced, read_dictionary, write_dictionary, DictLearnConfig};

fn planted_config(batch_size: usize) -> DictLearnConfig {
    DictLearnConfig {
        atoms: 16,
        lambda: 0.3,
        iterations: 100,
        batch_size,
        seed: 1,
        ..Default::default()
    }
}

#[test]
fn recovers_planted_atoms() {
    let planted = planted_patches(7, 8, 16, 5000, 2, 0.01);
    let fit = learn_dictionary_traced(&planted.patches, &planted_config(5000)).unwrap();
    let rate = recovery_rate(&planted.atoms, &fit.dictionary, 0.95);
    assert!(rate >= 0.8, "recovered {rate}");
    for w in fit.objective_trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-8, "objective rose: {w:?}");
    }
    for (before, after) in &fit.update_steps {
        assert!(after <= &(before + 1e-8));
    }
}

#[test]
fn online_updates_descend_on_their_surrogate() {
    let planted = planted_patches(8, 8, 16, 5000, 2, 0.01);
    let mut cfg = planted_config(256);
    cfg.iterations = 100;
    let fit = learn_dictionary_traced(&planted.patches, &cfg).unwrap();
    assert_eq!(fit.update_steps.len(), 100);
    for (before, after) in &fit.update_steps {
        assert!(after <= &(before + 1e-8));
    }
    for l in 0..16 {
        let norm: f64 = fit.dictionary.atom(l).iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-9);
    }
}

#[test]
fn learned_dictionary_round_trips() {
    let planted = planted_patches(9, 8, 16, 500, 2, 0.01);
    let mut cfg = planted_config(500);
    cfg.iterations = 3;
    let dict = learn_dictionary_traced(&planted.patches, &cfg).unwrap().dictionary;
    let mut buf = Vec::new();
    write_dictionary(&dict, &mut buf).unwrap();
    let back = read_dictionary(&buf[..]).unwrap();
    for l in 0..16 {
        for (a, b) in dict.atom(l).iter().zip(back.atom(l)) {
            assert!((a - b).abs() < 1e-6);
        }
    }
    assert!(read_dictionary(&buf[..buf.len() - 1]).is_err());
}
