use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use sparse_frontend::dictlearn::{write_dictionary, Dictionary};
use sparse_frontend::frontend::{DecoderConfig, FrontendConfig};
use sparse_frontend::model::{save_pipeline, ClassifierConfig, Pipeline};
use sparse_frontend_ffi::*;

const N: usize = 8;

fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let mut atoms = Vec::new();
    for l in 0..16 {
        for k in 0..48 {
            atoms.push((((l * 7 + k * 13) % 11) as f64 - 5.0) / 5.0);
        }
    }
    let dict = Dictionary::from_columns_normalized(48, atoms).unwrap();
    let dict_path = dir.join("dict.scfd");
    write_dictionary(&dict, std::fs::File::create(&dict_path).unwrap()).unwrap();
    let fcfg = FrontendConfig {
        top_t: 3,
        decoder: DecoderConfig { hidden: [8, 4], layers: None },
        ..Default::default()
    };
    let p = Pipeline::<f32>::defended(N, dict, &fcfg, &ClassifierConfig::linear(3)).unwrap();
    let model = dir.join("model.scfw");
    save_pipeline(&p, &model, Some(&dict_path)).unwrap();
    (dict_path, model)
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = sf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn load_classify_attack() {
    let dir = tempfile::tempdir().unwrap();
    let (dict_path, model) = fixture(dir.path());
    unsafe {
        let mut dict = ptr::null_mut();
        assert_eq!(sf_dictionary_load(cpath(&dict_path).as_ptr(), &mut dict), SfStatus::Ok);
        let (mut dim, mut atoms) = (0, 0);
        assert_eq!(sf_dictionary_shape(dict, &mut dim, &mut atoms), SfStatus::Ok);
        assert_eq!((dim, atoms), (48, 16));
        let patch = vec![0.5; 48];
        let mut code = vec![0.0; 16];
        assert_eq!(sf_dictionary_sparse_code(dict, patch.as_ptr(), 48, 0.1, code.as_mut_ptr(), 16), SfStatus::Ok);
        assert!(code.iter().any(|&c| c != 0.0));
        sf_dictionary_free(dict);

        let mut p = ptr::null_mut();
        assert_eq!(sf_pipeline_load(cpath(&model).as_ptr(), &mut p), SfStatus::Ok);
        let (mut size, mut classes, mut defended) = (0, 0, 0);
        assert_eq!(sf_pipeline_info(p, &mut size, &mut classes, &mut defended), SfStatus::Ok);
        assert_eq!((size, classes, defended), (N, 3, 1));

        let img: Vec<f32> = (0..N * N * 3).map(|i| (i % 17) as f32 / 16.0).collect();
        let mut logits = [0.0f32; 3];
        assert_eq!(sf_pipeline_logits(p, img.as_ptr(), img.len(), logits.as_mut_ptr(), 3), SfStatus::Ok);
        let mut class = 99;
        assert_eq!(sf_pipeline_predict(p, img.as_ptr(), img.len(), &mut class), SfStatus::Ok);
        let best = (0..3).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap();
        assert_eq!(class, best);

        let cfg = CString::new("eps = 0.05\nstep = 0.01\nsteps = 3\nrestarts = 1\n").unwrap();
        let mut e = vec![1.0f32; img.len()];
        let mut success = -1;
        let st = sf_pipeline_attack(p, img.as_ptr(), img.len(), class, cfg.as_ptr(), e.as_mut_ptr(), e.len(), &mut success);
        assert_eq!(st, SfStatus::Ok);
        assert!(success == 0 || success == 1);
        assert!(e.iter().all(|v| v.abs() <= 0.05 + 1e-6));
        sf_pipeline_free(p);
    }
}

#[test]
fn errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = fixture(dir.path());
    unsafe {
        let mut p = ptr::null_mut();
        let missing = cpath(&dir.path().join("nope.scfw"));
        assert_eq!(sf_pipeline_load(missing.as_ptr(), &mut p), SfStatus::Io);
        assert!(p.is_null());
        assert!(!last_error().is_empty());

        let junk = dir.path().join("junk.scfw");
        std::fs::write(&junk, b"SCFWxxxx").unwrap();
        assert_eq!(sf_pipeline_load(cpath(&junk).as_ptr(), &mut p), SfStatus::Format);
        assert_eq!(sf_pipeline_load(ptr::null(), &mut p), SfStatus::NullPointer);

        assert_eq!(sf_pipeline_load(cpath(&model).as_ptr(), &mut p), SfStatus::Ok);
        let short = vec![0.5f32; 10];
        let mut class = 0;
        assert_eq!(sf_pipeline_predict(p, short.as_ptr(), short.len(), &mut class), SfStatus::ShapeMismatch);
        assert!(last_error().contains("expects"));
        let bad = vec![2.0f32; N * N * 3];
        assert_eq!(sf_pipeline_predict(p, bad.as_ptr(), bad.len(), &mut class), SfStatus::InvalidArgument);
        let img = vec![0.5f32; N * N * 3];
        let mut logits = [0.0f32; 2];
        assert_eq!(sf_pipeline_logits(p, img.as_ptr(), img.len(), logits.as_mut_ptr(), 2), SfStatus::ShapeMismatch);
        let cfg = CString::new("norm = \"7\"").unwrap();
        let mut e = vec![0.0f32; img.len()];
        let mut s = 0;
        assert_eq!(
            sf_pipeline_attack(p, img.as_ptr(), img.len(), 0, cfg.as_ptr(), e.as_mut_ptr(), e.len(), &mut s),
            SfStatus::Config
        );
        assert_eq!(
            sf_pipeline_attack(p, img.as_ptr(), img.len(), 5, ptr::null(), e.as_mut_ptr(), e.len(), &mut s),
            SfStatus::InvalidArgument
        );
        sf_pipeline_free(p);
        sf_pipeline_free(ptr::null_mut());
        assert_eq!(sf_pipeline_info(ptr::null(), &mut 0, &mut 0, &mut 0), SfStatus::NullPointer);
    }
    assert_eq!(unsafe { CStr::from_ptr(sf_version()) }.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

/// Compiles a C program against the generated header and the static library.
#[test]
fn c_program_links_against_the_header() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = manifest.join("include/sparse_frontend.h");
    assert!(header.is_file());
    // target/<profile>/ sits next to the CARGO_TARGET_TMPDIR (target/tmp)
    let target = Path::new(env!("CARGO_TARGET_TMPDIR")).parent().unwrap().to_path_buf();
    let lib = ["debug", "release"]
        .iter()
        .map(|p| target.join(p).join("libsparse_frontend_ffi.a"))
        .filter(|p| p.is_file())
        .max_by_key(|p| p.metadata().and_then(|m| m.modified()).ok());
    let Some(lib) = lib else {
        eprintln!("static library not built; skipping");
        return;
    };
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = fixture(dir.path());
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "sparse_frontend.h"
int main(int argc, char **argv) {
    SfPipeline *p = NULL;
    if (sf_pipeline_load("/nonexistent.scfw", &p) != SF_STATUS_IO || p != NULL) return 1;
    if (sf_last_error() == NULL) return 2;
    if (sf_pipeline_load(argv[1], &p) != SF_STATUS_OK) { fprintf(stderr, "%s\n", sf_last_error()); return 3; }
    size_t n, k; int defended;
    sf_pipeline_info(p, &n, &k, &defended);
    float img[8 * 8 * 3];
    for (size_t i = 0; i < n * n * 3; i++) img[i] = 0.5f;
    size_t cls = 99;
    if (sf_pipeline_predict(p, img, n * n * 3, &cls) != SF_STATUS_OK || cls >= k) return 4;
    sf_pipeline_free(p);
    printf("%zu %zu %d\n", n, k, defended);
    return argc == 2 ? 0 : 5;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).arg(&model).output().unwrap();
    assert!(out.status.success(), "{out:?}");
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "8 3 1");
}
