use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::{load_dataset, synth_dataset, Dataset};
use super::spec::{DataSource, ExperimentSpec, Variant};
use crate::attacks::{boundary_attack, run_attack_warm, AttackConfig, AttackReport, AttackTarget, SelectionBackward};
use crate::dictlearn::{learn_dictionary, read_dictionary, write_dictionary, Dictionary};
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::model::{checkpoint_of, evaluate, train, write_checkpoint, DictionaryRef, Pipeline, TrainConfig};
use crate::patches::PatchGrid;

/// Train/test split described by the spec.
pub fn prepare_data(spec: &ExperimentSpec) -> Result<(Dataset, Dataset)> {
    let d = &spec.data;
    let all = match d.source {
        DataSource::Synthetic => synth_dataset(&d.synthetic, d.seed)?,
        DataSource::File => load_dataset(d.path.as_deref().expect("validated"))?,
    };
    if all.len() < d.train + d.test {
        return Err(Error::Config(format!(
            "need {} images for the split, dataset has {}",
            d.train + d.test,
            all.len()
        )));
    }
    let (train_set, rest) = all.split_at(d.train);
    let (test, _) = rest.split_at(d.test);
    let mut test = test;
    test.split = "test".into();
    Ok((train_set, test))
}

/// Loads the configured dictionary, or learns one from training patches and
/// writes it to `out`.
pub fn prepare_dictionary(spec: &ExperimentSpec, train_set: &Dataset, out: &Path) -> Result<(Dictionary, PathBuf)> {
    if let Some(path) = &spec.dictionary.path {
        let dict = read_dictionary(fs::File::open(path).map(std::io::BufReader::new)?)?;
        return Ok((dict, path.clone()));
    }
    let grid = PatchGrid::new(train_set.image_size(), spec.frontend.patch_size, spec.frontend.stride)?;
    let patches = train_set.sample_patches(&grid, spec.dictionary.patches, spec.seed)?;
    let dict = learn_dictionary(&patches, &spec.dictionary.learn)?;
    let mut buf = Vec::new();
    write_dictionary(&dict, &mut buf)?;
    fs::write(out, &buf)?;
    // use exactly what a later load of the file sees
    Ok((read_dictionary(&buf[..])?, out.to_path_buf()))
}

/// Trains one pipeline variant. `top_t` overrides the frontend's `T`.
pub fn train_variant(
    spec: &ExperimentSpec,
    variant: Variant,
    top_t: Option<usize>,
    train_set: &Dataset,
    dictionary: Option<&Dictionary>,
) -> Result<Pipeline<f32>> {
    let n = train_set.image_size();
    let mut config: TrainConfig = spec.train.clone();
    let mut pipeline = match variant {
        Variant::Natural => Pipeline::natural(n, &spec.classifier)?,
        Variant::Adversarial => {
            config.mode = spec.adversarial_training;
            Pipeline::natural(n, &spec.classifier)?
        }
        Variant::Defended => {
            let dict = dictionary.ok_or_else(|| Error::invalid("defended variant needs a dictionary"))?;
            let frontend = FrontendConfig {
                top_t: top_t.unwrap_or(spec.frontend.top_t),
                ..spec.frontend.clone()
            };
            Pipeline::defended(n, dict.clone(), &frontend, &spec.classifier)?
        }
    };
    let history = train(&mut pipeline, train_set, &config)?;
    if let Some(last) = history.epochs.last() {
        info!("{variant} (T = {top_t:?}): final train loss {:.4}, accuracy {:.3}", last.loss, last.accuracy);
    }
    Ok(pipeline)
}

/// One CSV row: an attack setting evaluated on one pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config_hash: String,
    pub variant: String,
    pub attack: String,
    pub norm: String,
    pub loss: String,
    pub eps: f64,
    pub step: f64,
    pub steps: usize,
    pub restarts: usize,
    pub top_t: Option<usize>,
    pub top_u: Option<usize>,
    pub examples: usize,
    pub clean_accuracy: f64,
    pub adversarial_accuracy: f64,
    pub mean_l2: Option<f64>,
    pub mean_lp: Option<f64>,
    pub status: String,
}

#[derive(Clone, Debug)]
struct GridPoint {
    variant: Variant,
    top_t: Option<usize>,
    attack: usize,
    restarts: Option<usize>,
    top_u: Option<usize>,
}

fn axis<T: Copy>(values: &[T]) -> Vec<Option<T>> {
    if values.is_empty() {
        vec![None]
    } else {
        values.iter().copied().map(Some).collect()
    }
}

fn grid(spec: &ExperimentSpec) -> Vec<GridPoint> {
    let s = &spec.sweep;
    let mut points = Vec::new();
    for &variant in &s.variants {
        let defended = variant == Variant::Defended;
        let ts = if defended { axis(&s.top_t) } else { vec![None] };
        for top_t in ts {
            for attack in 0..spec.attacks.len() {
                for restarts in axis(&s.restarts) {
                    let us = if defended { axis(&s.top_u) } else { vec![None] };
                    for top_u in us {
                        points.push(GridPoint {
                            variant,
                            top_t,
                            attack,
                            restarts,
                            top_u,
                        });
                    }
                }
            }
        }
    }
    points
}

fn eps_values(spec: &ExperimentSpec, base: &AttackConfig) -> Vec<f64> {
    let mut eps = if spec.sweep.eps.is_empty() {
        vec![base.eps]
    } else {
        spec.sweep.eps.clone()
    };
    eps.sort_by(f64::total_cmp);
    eps
}

fn examples(test: &Dataset, count: usize) -> Vec<(usize, Vec<f64>, usize)> {
    (0..count.min(test.len()))
        .map(|i| (i, test.image::<f64>(i).to_f64_vec(), test.label(i)))
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = v.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn report_row(hash: &str, point: &GridPoint, name: &str, cfg: &AttackConfig, rep: &AttackReport, status: &str) -> SweepRow {
    let fooled = rep.rows.iter().filter(|r| r.clean_correct && r.attack_success);
    SweepRow {
        config_hash: hash.to_string(),
        variant: point.variant.to_string(),
        attack: name.to_string(),
        norm: cfg.norm.to_string(),
        loss: serde_json::to_value(cfg.loss)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default(),
        eps: cfg.eps,
        step: cfg.step,
        steps: cfg.steps,
        restarts: cfg.restarts,
        top_t: point.top_t,
        top_u: point.top_u,
        examples: rep.rows.len(),
        clean_accuracy: rep.clean_accuracy(),
        adversarial_accuracy: rep.adversarial_accuracy(),
        mean_l2: rep.mean_l2(),
        mean_lp: mean(fooled.map(|r| r.lp_norm)),
        status: status.to_string(),
    }
}

fn run_point(
    spec: &ExperimentSpec,
    hash: &str,
    point: &GridPoint,
    pipeline: &Pipeline<f32>,
    cases: &[(usize, Vec<f64>, usize)],
) -> Vec<SweepRow> {
    let named = &spec.attacks[point.attack];
    let mut base = named.attack.clone();
    if let Some(r) = point.restarts {
        base.restarts = r;
    }
    if let Some(u) = point.top_u {
        base.surrogate.selection = SelectionBackward::TopU { u };
    }
    let mut rows = Vec::new();
    let mut warm: Option<Vec<Vec<f64>>> = None;
    for eps in eps_values(spec, &base) {
        let mut cfg = base.clone();
        cfg.eps = eps;
        if let Some(ratio) = spec.sweep.step_ratio {
            cfg.step = ratio * eps;
        }
        let inits = if spec.sweep.warm_start { warm.as_deref() } else { None };
        match run_attack_warm(pipeline, cases, &cfg, inits) {
            Ok((rep, perturbations)) => {
                rows.push(report_row(hash, point, &named.name, &cfg, &rep, "ok"));
                warm = Some(perturbations);
            }
            Err(e) => {
                warn!("grid point {point:?} at eps {eps} failed: {e}");
                let empty = AttackReport {
                    config: cfg.clone(),
                    rows: Vec::new(),
                };
                rows.push(report_row(hash, point, &named.name, &cfg, &empty, &format!("error: {e}")));
            }
        }
    }
    rows
}

/// Hash-stamped record of a sweep: the spec that produced it and the SHA-256
/// of every file it wrote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub version: String,
    pub spec: ExperimentSpec,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn checkpoint_name(variant: Variant, top_t: Option<usize>) -> String {
    match top_t {
        Some(t) => format!("{variant}-t{t}.scfw"),
        None => format!("{variant}.scfw"),
    }
}

/// Trained pipelines keyed by variant and `T`, built once per sweep.
type Trained = BTreeMap<(Variant, Option<usize>), Result<Pipeline<f32>, String>>;

fn train_all(
    spec: &ExperimentSpec,
    wanted: &[(Variant, Option<usize>)],
    train_set: &Dataset,
    dictionary: Option<&Dictionary>,
    dict_path: Option<&Path>,
    out: &Path,
) -> Trained {
    let mut trained = Trained::new();
    for &(variant, t) in wanted {
        if trained.contains_key(&(variant, t)) {
            continue;
        }
        let result = train_variant(spec, variant, t, train_set, dictionary).and_then(|p| {
            let dict = match dict_path.filter(|_| variant == Variant::Defended) {
                Some(path) => {
                    let mut r = DictionaryRef::for_file(path)?;
                    // keep the run directory relocatable
                    if path.parent() == Some(out) {
                        r.path = PathBuf::from(path.file_name().expect("file path"));
                    }
                    Some(r)
                }
                None => None,
            };
            let mut buf = Vec::new();
            write_checkpoint(&checkpoint_of(&p, dict)?, &mut buf)?;
            fs::write(out.join(checkpoint_name(variant, t)), buf)?;
            Ok(p)
        });
        trained.insert((variant, t), result.map_err(|e| e.to_string()));
    }
    trained
}

/// Result of [`run_sweep`].
#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    pub csv: PathBuf,
    pub manifest: PathBuf,
}

/// Trains every pipeline the grid needs, runs each grid point (up to `jobs`
/// at a time) and writes per-point CSVs, the merged `sweep.csv` and
/// `manifest.json` under the spec's output directory. A failing point is
/// recorded in its rows' `status` and the sweep continues.
pub fn run_sweep(spec: &ExperimentSpec, jobs: usize) -> Result<SweepOutput> {
    spec.validate()?;
    let out = spec.output_dir.clone();
    fs::create_dir_all(out.join("points"))?;
    let hash = spec.config_hash();
    let (train_set, test) = prepare_data(spec)?;
    let points = grid(spec);
    let needs_dict = points.iter().any(|p| p.variant == Variant::Defended);
    let dict = if needs_dict {
        Some(prepare_dictionary(spec, &train_set, &out.join("dictionary.scfd"))?)
    } else {
        None
    };
    let wanted: Vec<_> = points.iter().map(|p| (p.variant, p.top_t)).collect();
    let trained = train_all(
        spec,
        &wanted,
        &train_set,
        dict.as_ref().map(|d| &d.0),
        dict.as_ref().map(|d| d.1.as_path()),
        &out,
    );
    let cases = examples(&test, spec.sweep.examples);

    let results: Vec<Mutex<Option<Vec<SweepRow>>>> = points.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, points.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(point) = points.get(i) else { break };
                let rows = match &trained[&(point.variant, point.top_t)] {
                    Ok(p) => run_point(spec, &hash, point, p, &cases),
                    Err(e) => {
                        let cfg = spec.attacks[point.attack].attack.clone();
                        let empty = AttackReport { config: cfg.clone(), rows: Vec::new() };
                        vec![report_row(&hash, point, &spec.attacks[point.attack].name, &cfg, &empty, &format!("error: training failed: {e}"))]
                    }
                };
                *results[i].lock().expect("no poisoned workers") = Some(rows);
            });
        }
    });

    let mut outputs = BTreeMap::new();
    let mut all = Vec::new();
    for (i, slot) in results.into_iter().enumerate() {
        let rows = slot.into_inner().expect("no poisoned workers").unwrap_or_default();
        let rel = format!("points/{i:04}.csv");
        write_rows(&out.join(&rel), &rows)?;
        outputs.insert(rel.clone(), sha256_file(&out.join(&rel))?);
        all.extend(rows);
    }
    let mut binaries: Vec<String> = trained
        .keys()
        .map(|(v, t)| checkpoint_name(*v, *t))
        .chain(needs_dict.then(|| "dictionary.scfd".to_string()))
        .filter(|rel| out.join(rel).is_file())
        .collect();
    binaries.dedup();
    for rel in binaries {
        outputs.insert(rel.clone(), sha256_file(&out.join(&rel))?);
    }
    let csv = out.join("sweep.csv");
    write_rows(&csv, &all)?;
    outputs.insert("sweep.csv".into(), sha256_file(&csv)?);
    let manifest = Manifest {
        config_hash: hash,
        version: env!("CARGO_PKG_VERSION").to_string(),
        spec: spec.clone(),
        outputs,
    };
    let manifest_path = out.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(SweepOutput {
        rows: all,
        csv,
        manifest: manifest_path,
    })
}

/// Re-runs the sweep recorded in a manifest into `output_dir` and returns the
/// recorded outputs whose bytes differ.
pub fn rerun_manifest(manifest: &Manifest, output_dir: &Path, jobs: usize) -> Result<Vec<String>> {
    let mut spec = manifest.spec.clone();
    spec.output_dir = output_dir.to_path_buf();
    if spec.config_hash() != manifest.config_hash {
        return Err(Error::Config("manifest spec does not match its config hash".into()));
    }
    run_sweep(&spec, jobs)?;
    let mut differing = Vec::new();
    for (rel, digest) in &manifest.outputs {
        if sha256_file(&output_dir.join(rel))? != *digest {
            differing.push(rel.clone());
        }
    }
    Ok(differing)
}

/// One row per defense, in the column order of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub config_hash: String,
    pub variant: String,
    pub clean: f64,
    pub linf_pgd: f64,
    pub linf_cw: f64,
    pub l2_pgd: f64,
    pub l1_pgd: f64,
    pub boundary_l2: Option<f64>,
}

/// Trains each variant and evaluates it under ℓ∞ PGD (cross-entropy and
/// margin loss), ℓ2 and ℓ1 PGD and the boundary attack; writes
/// `compare.csv`.
pub fn compare_defenses(spec: &ExperimentSpec) -> Result<Vec<CompareRow>> {
    spec.validate()?;
    let c = &spec.compare;
    if c.variants.len() < 2 {
        return Err(Error::Config("comparison needs at least two variants".into()));
    }
    let out = spec.output_dir.clone();
    fs::create_dir_all(&out)?;
    let hash = spec.config_hash();
    let (train_set, test) = prepare_data(spec)?;
    let dict = if c.variants.contains(&Variant::Defended) {
        Some(prepare_dictionary(spec, &train_set, &out.join("dictionary.scfd"))?)
    } else {
        None
    };
    let wanted: Vec<_> = c.variants.iter().map(|&v| (v, None)).collect();
    let trained = train_all(
        spec,
        &wanted,
        &train_set,
        dict.as_ref().map(|d| &d.0),
        dict.as_ref().map(|d| d.1.as_path()),
        &out,
    );
    let cases = examples(&test, c.examples);
    let pool: Vec<Vec<f64>> = (0..train_set.len()).map(|i| train_set.image::<f64>(i).to_f64_vec()).collect();
    let mut rows = Vec::new();
    for &variant in &c.variants {
        let p = trained[&(variant, None)].as_ref().map_err(|e| Error::invalid(e.clone()))?;
        let mut cw = c.linf.clone();
        cw.loss = crate::model::LossKind::CwMargin;
        let acc = |cfg: &AttackConfig| -> Result<f64> { Ok(run_attack_warm(p, &cases, cfg, None)?.0.adversarial_accuracy()) };
        let mut norms = Vec::new();
        for (_, x, y) in cases.iter().take(c.boundary_examples) {
            if AttackTarget::predict(p, x)? != *y {
                continue;
            }
            norms.push(boundary_attack(p, x, *y, &pool, train_set.labels(), &c.boundary)?.l2_norm);
        }
        rows.push(CompareRow {
            config_hash: hash.clone(),
            variant: variant.to_string(),
            clean: evaluate(p, &test.take(c.examples))?,
            linf_pgd: acc(&c.linf)?,
            linf_cw: acc(&cw)?,
            l2_pgd: acc(&c.l2)?,
            l1_pgd: acc(&c.l1)?,
            boundary_l2: mean(norms.into_iter()),
        });
    }
    write_rows(&out.join("compare.csv"), &rows)?;
    Ok(rows)
}
