//! Overcomplete patch dictionary learned by alternating sparse coding and
//! block-coordinate dictionary updates.
//!
//! Each outer iteration codes patches with the lasso solver, accumulates the
//! sufficient statistics `A = Σ ααᵀ` and `B = Σ xαᵀ`, then sweeps the atoms
//! once. For atom `j` the update is the exact minimizer of the quadratic
//! surrogate over the unit sphere:
//!
//! ```text
//! d_j ← u / ‖u‖₂,   u = b_j − D·a_j + A_jj·d_j
//! ```
//!
//! When the batch covers the whole patch set, codes are warm-started and the
//! full objective never increases between iterations. Smaller batches run the
//! online variant with statistics accumulated over all batches seen.

mod io;
pub mod lasso;

pub use io::{read_dictionary, write_dictionary, DICT_MAGIC, DICT_VERSION};
pub use lasso::{kkt_residual, sparse_code, LassoOptions, LassoSolver};

use log::{debug, warn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};
use lasso::dot;

const UNIT_NORM_TOL: f64 = 1e-6;

/// `L` unit-ℓ2 atoms over an `n̄`-dimensional patch space.
#[derive(Clone, Debug, PartialEq)]
pub struct Dictionary {
    patch_dim: usize,
    /// Column-major: atom `l` is `atoms[l·n̄..(l+1)·n̄]`.
    atoms: Vec<f64>,
    l1_norms: Vec<f64>,
}

impl Dictionary {
    /// Builds a dictionary from column-major atoms that must already have
    /// unit ℓ2 norm.
    pub fn from_columns(patch_dim: usize, atoms: Vec<f64>) -> Result<Self> {
        if patch_dim == 0 || atoms.is_empty() || atoms.len() % patch_dim != 0 {
            return Err(Error::invalid(format!(
                "{} dictionary entries do not form columns of length {patch_dim}",
                atoms.len()
            )));
        }
        for (l, col) in atoms.chunks(patch_dim).enumerate() {
            let norm = dot(col, col).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::invalid(format!("atom {l} has ℓ2 norm {norm}")));
            }
        }
        let l1_norms = atoms
            .chunks(patch_dim)
            .map(|c| c.iter().map(|v| v.abs()).sum())
            .collect();
        Ok(Self {
            patch_dim,
            atoms,
            l1_norms,
        })
    }

    /// Like [`Dictionary::from_columns`] but rescales every column to unit
    /// norm first. Zero columns are rejected.
    pub fn from_columns_normalized(patch_dim: usize, mut atoms: Vec<f64>) -> Result<Self> {
        if patch_dim == 0 || atoms.len() % patch_dim != 0 {
            return Err(Error::invalid("dictionary entries do not form whole columns"));
        }
        for (l, col) in atoms.chunks_mut(patch_dim).enumerate() {
            let norm = dot(col, col).sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::invalid(format!("atom {l} has zero norm")));
            }
            col.iter_mut().for_each(|v| *v /= norm);
        }
        Self::from_columns(patch_dim, atoms)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_dim
    }

    pub fn num_atoms(&self) -> usize {
        self.l1_norms.len()
    }

    pub fn atom(&self, l: usize) -> &[f64] {
        &self.atoms[l * self.patch_dim..(l + 1) * self.patch_dim]
    }

    pub fn l1_norms(&self) -> &[f64] {
        &self.l1_norms
    }

    /// Column-major atom storage.
    pub fn columns(&self) -> &[f64] {
        &self.atoms
    }

    /// `[n̄, L]` matrix with the atoms as columns.
    pub fn to_tensor<F: Float>(&self) -> Tensor<F> {
        let (n, l) = (self.patch_dim, self.num_atoms());
        let mut data = vec![F::zero(); n * l];
        for a in 0..l {
            for (r, &v) in self.atom(a).iter().enumerate() {
                data[r * l + a] = F::of(v);
            }
        }
        Tensor::new(vec![n, l], data).expect("dictionary extents")
    }

    /// `Dα`.
    pub fn reconstruct(&self, alpha: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.patch_dim];
        for (l, &a) in alpha.iter().enumerate() {
            if a != 0.0 {
                for (o, &d) in out.iter_mut().zip(self.atom(l)) {
                    *o += a * d;
                }
            }
        }
        out
    }

    /// `x − Dα`.
    pub fn residual(&self, patch: &[f64], alpha: &[f64]) -> Vec<f64> {
        let mut r = patch.to_vec();
        for (ri, di) in r.iter_mut().zip(self.reconstruct(alpha)) {
            *ri -= di;
        }
        r
    }
}

/// Flat collection of equal-length patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    dim: usize,
    data: Vec<f64>,
}

impl PatchSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "{} values do not form patches of length {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DictLearnConfig {
    /// Number of atoms `L`.
    pub atoms: usize,
    /// ℓ1 weight λ.
    pub lambda: f64,
    /// Outer iterations.
    pub iterations: usize,
    /// Patches coded per iteration; at least the patch count means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub lasso_tol: f64,
    pub lasso_max_sweeps: usize,
}

impl Default for DictLearnConfig {
    fn default() -> Self {
        Self {
            atoms: 500,
            lambda: 1.0,
            iterations: 1000,
            batch_size: 256,
            seed: 0,
            lasso_tol: 1e-6,
            lasso_max_sweeps: 1000,
        }
    }
}

impl DictLearnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config("dictionary lambda must be > 0".into()));
        }
        if self.iterations == 0 || self.atoms == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "dictionary atoms, iterations and batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn lasso(&self) -> LassoOptions {
        LassoOptions {
            lambda: self.lambda,
            tol: self.lasso_tol,
            max_sweeps: self.lasso_max_sweeps,
        }
    }
}

/// Learned dictionary plus the per-iteration average objective.
#[derive(Clone, Debug)]
pub struct DictionaryFit {
    pub dictionary: Dictionary,
    /// Full-batch mode: lasso objective per patch after each iteration.
    /// Online mode: the running-average surrogate over all patches seen.
    pub objective_trace: Vec<f64>,
    /// Surrogate value before and after each dictionary update.
    pub update_steps: Vec<(f64, f64)>,
}

/// `Σ ½‖x − Dα‖² + λ‖α‖₁` over all patches; `codes` holds one length-`L`
/// code per patch, back to back.
pub fn objective(patches: &PatchSet, dict: &Dictionary, codes: &[f64], lambda: f64) -> Result<f64> {
    let l = dict.num_atoms();
    if patches.dim() != dict.patch_dim() || codes.len() != patches.len() * l {
        return Err(Error::shape(
            "objective",
            &[patches.len(), patches.dim()],
            &[codes.len() / l.max(1), dict.patch_dim()],
        ));
    }
    Ok(patches
        .iter()
        .zip(codes.chunks(l))
        .map(|(x, a)| patch_objective(dict, x, a, lambda))
        .sum())
}

fn patch_objective(dict: &Dictionary, x: &[f64], alpha: &[f64], lambda: f64) -> f64 {
    let r = dict.residual(x, alpha);
    0.5 * dot(&r, &r) + lambda * alpha.iter().map(|a| a.abs()).sum::<f64>()
}

/// Sufficient statistics of the quadratic surrogate.
struct Stats {
    l: usize,
    n: usize,
    /// `L × L`, symmetric.
    a: Vec<f64>,
    /// `n̄ × L` column-major (column `j` = `Σ x α_j`).
    b: Vec<f64>,
    /// `Σ ½‖x‖² + λ‖α‖₁`
    c: f64,
    /// Total weight of the accumulated patches.
    count: f64,
}

impl Stats {
    fn new(n: usize, l: usize) -> Self {
        Self {
            l,
            n,
            a: vec![0.0; l * l],
            b: vec![0.0; n * l],
            c: 0.0,
            count: 0.0,
        }
    }

    fn add(&mut self, x: &[f64], alpha: &[f64], lambda: f64) {
        let nz: Vec<usize> = (0..self.l).filter(|&j| alpha[j] != 0.0).collect();
        for &i in &nz {
            for &j in &nz {
                self.a[i * self.l + j] += alpha[i] * alpha[j];
            }
            let col = &mut self.b[i * self.n..(i + 1) * self.n];
            for (bv, &xv) in col.iter_mut().zip(x) {
                *bv += alpha[i] * xv;
            }
        }
        self.c += 0.5 * dot(x, x) + lambda * alpha.iter().map(|v| v.abs()).sum::<f64>();
        self.count += 1.0;
    }

    /// Down-weights everything accumulated so far by `beta`.
    fn decay(&mut self, beta: f64) {
        self.a.iter_mut().chain(self.b.iter_mut()).for_each(|v| *v *= beta);
        self.c *= beta;
        self.count *= beta;
    }

    /// Average surrogate `(½Tr(DᵀDA) − Tr(DᵀB) + c) / count`.
    fn surrogate(&self, atoms: &[f64]) -> f64 {
        let (n, l) = (self.n, self.l);
        let mut quad = 0.0;
        let mut lin = 0.0;
        for j in 0..l {
            let dj = &atoms[j * n..(j + 1) * n];
            lin += dot(dj, &self.b[j * n..(j + 1) * n]);
            for i in 0..l {
                let aij = self.a[i * l + j];
                if aij != 0.0 {
                    quad += aij * dot(&atoms[i * n..(i + 1) * n], dj);
                }
            }
        }
        (0.5 * quad - lin + self.c) / self.count.max(1.0)
    }

    fn usage(&self, j: usize) -> f64 {
        self.a[j * self.l + j]
    }
}

/// One sweep of exact sphere-constrained block updates. Returns the indices
/// of atoms with no usage (left untouched).
fn update_atoms(atoms: &mut [f64], stats: &Stats) -> Vec<usize> {
    let (n, l) = (stats.n, stats.l);
    let mut dead = Vec::new();
    let mut u = vec![0.0; n];
    for j in 0..l {
        let ajj = stats.usage(j);
        if ajj <= 0.0 {
            dead.push(j);
            continue;
        }
        u.copy_from_slice(&stats.b[j * n..(j + 1) * n]);
        for i in 0..l {
            let aij = stats.a[i * l + j];
            if aij != 0.0 && i != j {
                for (uk, &dk) in u.iter_mut().zip(&atoms[i * n..(i + 1) * n]) {
                    *uk -= aij * dk;
                }
            }
        }
        let norm = dot(&u, &u).sqrt();
        if norm > 0.0 && norm.is_finite() {
            for (dk, &uk) in atoms[j * n..(j + 1) * n].iter_mut().zip(&u) {
                *dk = uk / norm;
            }
        }
    }
    dead
}

fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn initial_atoms(patches: &PatchSet, l: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = patches.dim();
    let mut atoms = Vec::with_capacity(n * l);
    let picks = sample(rng, patches.len(), l.min(patches.len())).into_vec();
    for i in picks {
        let x = patches.get(i);
        let norm = dot(x, x).sqrt();
        if norm > 1e-12 {
            atoms.extend(x.iter().map(|v| v / norm));
        }
    }
    while atoms.len() < n * l {
        atoms.extend(random_unit(rng, n));
    }
    atoms
}

/// Replace unused atoms with the worst-reconstructed patches (normalized).
/// `worst` lists patch indices sorted by decreasing residual.
fn revive(atoms: &mut [f64], dead: &[usize], worst: &[usize], patches: &PatchSet, rng: &mut ChaCha8Rng) {
    let n = patches.dim();
    let mut candidates = worst.iter().copied();
    for &j in dead {
        let fresh = candidates
            .by_ref()
            .map(|i| patches.get(i))
            .find_map(|x| {
                let norm = dot(x, x).sqrt();
                (norm > 1e-12).then(|| x.iter().map(|v| v / norm).collect::<Vec<_>>())
            })
            .unwrap_or_else(|| random_unit(rng, n));
        atoms[j * n..(j + 1) * n].copy_from_slice(&fresh);
    }
}

fn worst_first(residuals: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..residuals.len()).collect();
    idx.sort_by(|&a, &b| residuals[b].total_cmp(&residuals[a]).then(a.cmp(&b)));
    idx
}

pub fn learn_dictionary(patches: &PatchSet, config: &DictLearnConfig) -> Result<Dictionary> {
    learn_dictionary_traced(patches, config).map(|fit| fit.dictionary)
}

pub fn learn_dictionary_traced(patches: &PatchSet, config: &DictLearnConfig) -> Result<DictionaryFit> {
    config.validate()?;
    let (n, l) = (patches.dim(), config.atoms);
    if patches.len() < l {
        return Err(Error::invalid(format!(
            "need at least {l} patches to learn {l} atoms, got {}",
            patches.len()
        )));
    }
    if patches.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
        return Err(Error::DegenerateData("non-finite patch values".into()));
    }
    if patches.iter().all(|x| x.iter().all(|&v| v == 0.0)) {
        return Err(Error::DegenerateData("every patch is zero".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut atoms = initial_atoms(patches, l, &mut rng);
    let opts = config.lasso();
    let full_batch = config.batch_size >= patches.len();
    let mut trace = Vec::with_capacity(config.iterations);
    let mut steps = Vec::with_capacity(config.iterations);
    let mut unconverged = 0usize;

    if full_batch {
        let mut codes = vec![0.0; patches.len() * l];
        for it in 0..config.iterations {
            let dict = Dictionary::from_columns(n, atoms.clone())?;
            let solver = LassoSolver::new(&dict);
            let mut stats = Stats::new(n, l);
            let mut residuals = Vec::with_capacity(patches.len());
            for (x, alpha) in patches.iter().zip(codes.chunks_mut(l)) {
                if !solver.solve_warm(x, alpha, &opts).converged {
                    unconverged += 1;
                }
                stats.add(x, alpha, config.lambda);
                let r = dict.residual(x, alpha);
                residuals.push(dot(&r, &r));
            }
            let before = stats.surrogate(&atoms);
            let dead = update_atoms(&mut atoms, &stats);
            revive(&mut atoms, &dead, &worst_first(&residuals), patches, &mut rng);
            let after = stats.surrogate(&atoms);
            steps.push((before, after));
            trace.push(after);
            debug!("dictlearn iteration {it}: objective {after:.6e}, {} dead atoms", dead.len());
        }
    } else {
        let mut stats = Stats::new(n, l);
        let mut alpha = vec![0.0; l];
        for it in 0..config.iterations {
            let dict = Dictionary::from_columns(n, atoms.clone())?;
            let solver = LassoSolver::new(&dict);
            let batch: Vec<usize> = (0..config.batch_size)
                .map(|_| rng.random_range(0..patches.len()))
                .collect();
            // early codes come from a poor dictionary; fade them out
            let eta = config.batch_size as f64;
            let t = it as f64;
            let theta = if t < eta - 1.0 { (t + 1.0) * eta } else { eta * eta + t + 1.0 - eta };
            stats.decay((theta + 1.0 - eta) / (theta + 1.0));
            let mut residuals = Vec::with_capacity(batch.len());
            for &i in &batch {
                let x = patches.get(i);
                alpha.iter_mut().for_each(|a| *a = 0.0);
                if !solver.solve_warm(x, &mut alpha, &opts).converged {
                    unconverged += 1;
                }
                stats.add(x, &alpha, config.lambda);
                let r = dict.residual(x, &alpha);
                residuals.push(dot(&r, &r));
            }
            let before = stats.surrogate(&atoms);
            let dead = update_atoms(&mut atoms, &stats);
            let worst: Vec<usize> = worst_first(&residuals).into_iter().map(|k| batch[k]).collect();
            revive(&mut atoms, &dead, &worst, patches, &mut rng);
            let after = stats.surrogate(&atoms);
            steps.push((before, after));
            trace.push(after);
            debug!("dictlearn iteration {it}: surrogate {after:.6e}, {} dead atoms", dead.len());
        }
    }
    if unconverged > 0 {
        warn!("{unconverged} lasso solves hit the sweep limit during dictionary learning");
    }
    Ok(DictionaryFit {
        dictionary: Dictionary::from_columns(n, atoms)?,
        objective_trace: trace,
        update_steps: steps,
    })
}
