//! Datasets: CIFAR-10 binary batches, the synthetic bars/blobs task, and the
//! `SCDS` container the `synth-data` command writes.
//!
//! ```text
//! magic   b"SCDS"
//! version u32 LE (= 1)
//! N       u32 LE
//! classes u32 LE
//! count   u32 LE
//! records count × (label u32 LE, N·N·3 f32 LE in HWC order)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dictlearn::PatchSet;
use crate::error::{Error, Result};
use crate::nn::init_rng;
use crate::patches::{PatchGrid, CHANNELS};
use crate::tensor::{Float, Tensor};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + CIFAR_SIDE * CIFAR_SIDE * CHANNELS;
pub const DATASET_MAGIC: &[u8; 4] = b"SCDS";
const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    Cifar10 { files: Vec<PathBuf> },
    Synthetic { seed: u64, spec: SynthSpec },
    File { path: PathBuf },
}

/// Images in `[0, 1]`, stored HWC and flattened back to back.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    image_size: usize,
    num_classes: usize,
    pixels: Vec<f32>,
    labels: Vec<usize>,
    pub split: String,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(
        image_size: usize,
        num_classes: usize,
        pixels: Vec<f32>,
        labels: Vec<usize>,
        provenance: Provenance,
    ) -> Result<Self> {
        let per = image_size * image_size * CHANNELS;
        if image_size == 0 || pixels.len() != per * labels.len() {
            return Err(Error::invalid(format!(
                "{} pixels for {} images of side {image_size}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside {num_classes} classes")));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("pixel outside [0, 1]"));
        }
        Ok(Self {
            image_size,
            num_classes,
            pixels,
            labels,
            split: "all".into(),
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_len(&self) -> usize {
        self.image_size * self.image_size * CHANNELS
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn pixels(&self, i: usize) -> &[f32] {
        let per = self.image_len();
        &self.pixels[i * per..(i + 1) * per]
    }

    /// Image `i` as an `[N, N, 3]` tensor.
    pub fn image<F: Float>(&self, i: usize) -> Tensor<F> {
        let n = self.image_size;
        let data = self.pixels(i).iter().map(|&p| F::of(p as f64)).collect();
        Tensor::new(vec![n, n, CHANNELS], data).expect("dataset extents")
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.pixels(i));
            labels.push(self.labels[i]);
        }
        Self {
            pixels,
            labels,
            ..self.clone_meta()
        }
    }

    pub fn take(&self, count: usize) -> Self {
        let idx: Vec<usize> = (0..count.min(self.len())).collect();
        self.subset(&idx)
    }

    /// First `count` images and the rest.
    pub fn split_at(&self, count: usize) -> (Self, Self) {
        let count = count.min(self.len());
        let head: Vec<usize> = (0..count).collect();
        let tail: Vec<usize> = (count..self.len()).collect();
        let (mut a, mut b) = (self.subset(&head), self.subset(&tail));
        a.split = "train".into();
        b.split = "test".into();
        (a, b)
    }

    fn clone_meta(&self) -> Self {
        Self {
            image_size: self.image_size,
            num_classes: self.num_classes,
            pixels: Vec::new(),
            labels: Vec::new(),
            split: self.split.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// `count` patches drawn uniformly over images and grid positions.
    pub fn sample_patches(&self, grid: &PatchGrid, count: usize, seed: u64) -> Result<PatchSet> {
        if grid.image_size != self.image_size {
            return Err(Error::invalid(format!(
                "grid for {0}x{0} images, dataset holds {1}x{1}",
                grid.image_size, self.image_size
            )));
        }
        if self.is_empty() {
            return Err(Error::invalid("no images to sample patches from"));
        }
        let mut rng = init_rng(seed, 7);
        let mut data = vec![0.0; count * grid.patch_dim()];
        for out in data.chunks_mut(grid.patch_dim()) {
            let img = self.image::<f64>(rng.random_range(0..self.len()));
            let (i, j) = (rng.random_range(0..grid.per_side), rng.random_range(0..grid.per_side));
            grid.patch_into(img.data(), i, j, out);
        }
        PatchSet::new(grid.patch_dim(), data)
    }
}

/// Parses one CIFAR-10 binary batch.
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format {
            offset: (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
            msg: format!(
                "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                bytes.len()
            ),
        });
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut pixels = Vec::with_capacity(bytes.len() / CIFAR_RECORD * plane * CHANNELS);
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format {
                offset: (r * CIFAR_RECORD) as u64,
                msg: format!("label {} > 9", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        // planes R, G, B of 1024 row-major bytes → HWC
        for p in 0..plane {
            for c in 0..CHANNELS {
                pixels.push(rec[1 + c * plane + p] as f32 / 255.0);
            }
        }
    }
    Ok((pixels, labels))
}

/// Loads one batch file, or every `*.bin` in a directory (sorted by name).
pub fn load_cifar10(path: &Path) -> Result<Dataset> {
    let files = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "bin"))
            .collect();
        v.sort();
        if v.is_empty() {
            return Err(Error::invalid(format!("no .bin batches in {}", path.display())));
        }
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        let (p, l) = parse_cifar10(&fs::read(f)?)?;
        pixels.extend(p);
        labels.extend(l);
    }
    Dataset::new(CIFAR_SIDE, 10, pixels, labels, Provenance::Cifar10 { files })
}

/// Class-conditional oriented bars (even classes-per-angle slot) and blob
/// pairs, at low contrast over a random grey background plus uniform noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub image_size: usize,
    pub samples: usize,
    /// Peak pattern intensity above the background.
    pub contrast: f64,
    /// Half-width of the uniform pixel noise.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            image_size: 16,
            samples: 1000,
            contrast: 0.10,
            noise: 0.04,
        }
    }
}

pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    if !(2..=8).contains(&spec.classes) {
        return Err(Error::Config(format!("synthetic task supports 2..=8 classes, got {}", spec.classes)));
    }
    if spec.image_size < 4 {
        return Err(Error::Config("synthetic images need side >= 4".into()));
    }
    let n = spec.image_size;
    let mut rng = init_rng(seed, 11);
    let mut labels: Vec<usize> = (0..spec.samples).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);
    let mut pixels = Vec::with_capacity(spec.samples * n * n * CHANNELS);
    for &label in &labels {
        let angle = std::f64::consts::PI * (label % 4) as f64 / 4.0 + rng.random_range(-0.12..0.12);
        let (dx, dy) = (angle.cos(), angle.sin());
        let half = n as f64 / 2.0;
        let cx = half - 0.5 + rng.random_range(-0.15..0.15) * n as f64;
        let cy = half - 0.5 + rng.random_range(-0.15..0.15) * n as f64;
        let background = rng.random_range(0.3..0.7);
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.0));
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let width = 0.09 * n as f64;
        for y in 0..n {
            for x in 0..n {
                let (px, py) = (x as f64 - cx, y as f64 - cy);
                let profile = if label < 4 {
                    // distance across the bar
                    let across = -px * dy + py * dx;
                    (-(across * across) / (2.0 * width * width)).exp()
                } else {
                    let off = 0.25 * n as f64;
                    let blob = |s: f64| {
                        let (bx, by) = (px - s * off * dx, py - s * off * dy);
                        (-(bx * bx + by * by) / (2.0 * (1.5 * width).powi(2))).exp()
                    };
                    blob(1.0) + blob(-1.0)
                };
                for t in tint {
                    let v = background
                        + sign * spec.contrast * t * profile
                        + rng.random_range(-spec.noise..=spec.noise);
                    pixels.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    Dataset::new(
        n,
        spec.classes,
        pixels,
        labels,
        Provenance::Synthetic {
            seed,
            spec: spec.clone(),
        },
    )
}

pub fn write_dataset<W: Write>(data: &Dataset, mut w: W) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_u32::<LittleEndian>(DATASET_VERSION)?;
    w.write_u32::<LittleEndian>(data.image_size as u32)?;
    w.write_u32::<LittleEndian>(data.num_classes as u32)?;
    w.write_u32::<LittleEndian>(data.len() as u32)?;
    for i in 0..data.len() {
        w.write_u32::<LittleEndian>(data.labels[i] as u32)?;
        for &p in data.pixels(i) {
            w.write_f32::<LittleEndian>(p)?;
        }
    }
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R, path: &Path) -> Result<Dataset> {
    let bad = |offset: u64, msg: &str| Error::Format {
        offset,
        msg: msg.into(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad(0, "truncated header"))?;
    if &magic != DATASET_MAGIC {
        return Err(bad(0, "bad magic"));
    }
    let mut head = [0u32; 4];
    for (k, h) in head.iter_mut().enumerate() {
        *h = r
            .read_u32::<LittleEndian>()
            .map_err(|_| bad(4 + 4 * k as u64, "truncated header"))?;
    }
    let [version, side, classes, count] = head.map(|v| v as usize);
    if version != DATASET_VERSION as usize {
        return Err(bad(4, "unsupported version"));
    }
    let per = side * side * CHANNELS;
    let mut offset = 20u64;
    let mut labels = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * per);
    for _ in 0..count {
        labels.push(r.read_u32::<LittleEndian>().map_err(|_| bad(offset, "truncated record"))? as usize);
        offset += 4;
        for _ in 0..per {
            pixels.push(r.read_f32::<LittleEndian>().map_err(|_| bad(offset, "truncated record"))?);
            offset += 4;
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad(offset, "trailing bytes"));
    }
    Dataset::new(side, classes, pixels, labels, Provenance::File { path: path.to_path_buf() })
}

/// `SCDS` file, CIFAR batch file, or directory of CIFAR batches. Relative
/// paths that do not exist are looked up under `SPARSE_FRONTEND_DATA`.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let path = resolve_data_path(path);
    if path.is_file() {
        let bytes = fs::read(&path)?;
        if bytes.starts_with(DATASET_MAGIC) {
            return read_dataset(&bytes[..], &path);
        }
    }
    load_cifar10(&path)
}

pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(dir) = std::env::var_os("SPARSE_FRONTEND_DATA") {
            return Path::new(&dir).join(path);
        }
    }
    path.to_path_buf()
}
