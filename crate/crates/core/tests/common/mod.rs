//! Independent oracles and fixtures shared by the integration tests and the
//! acceptance suite. Nothing here calls into the code under test except to
//! build inputs.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sparse_frontend::autodiff::{ConvGeometry, Tape, Var};
use sparse_frontend::dictlearn::{Dictionary, PatchSet};
use sparse_frontend::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gaussian elimination with partial pivoting; `None` when (near) singular.
pub fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Lasso `min ½‖x − Dα‖² + λ‖α‖₁` by enumerating every sign pattern
/// `s ∈ {−1, 0, +1}^L`: solve the stationarity system on the support, keep
/// solutions whose signs match and whose off-support correlations satisfy
/// `|d_jᵀr| ≤ λ`, and return the one with the lowest objective.
pub fn lasso_brute_force(cols: &[Vec<f64>], x: &[f64], lambda: f64) -> Vec<f64> {
    let l = cols.len();
    let objective = |a: &[f64]| {
        let r: Vec<f64> = (0..x.len())
            .map(|i| x[i] - (0..l).map(|j| cols[j][i] * a[j]).sum::<f64>())
            .collect();
        0.5 * dot(&r, &r) + lambda * a.iter().map(|v| v.abs()).sum::<f64>()
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for code in 0..3usize.pow(l as u32) {
        let mut c = code;
        let signs: Vec<i32> = (0..l)
            .map(|_| {
                let s = (c % 3) as i32 - 1;
                c /= 3;
                s
            })
            .collect();
        let support: Vec<usize> = (0..l).filter(|&j| signs[j] != 0).collect();
        let mut alpha = vec![0.0; l];
        if !support.is_empty() {
            let gram: Vec<Vec<f64>> = support
                .iter()
                .map(|&i| support.iter().map(|&j| dot(&cols[i], &cols[j])).collect())
                .collect();
            let rhs: Vec<f64> = support
                .iter()
                .map(|&i| dot(&cols[i], x) - lambda * signs[i] as f64)
                .collect();
            let Some(sol) = solve_linear(gram, rhs) else { continue };
            if support.iter().zip(&sol).any(|(&i, &v)| v * signs[i] as f64 <= 0.0) {
                continue;
            }
            for (&i, v) in support.iter().zip(sol) {
                alpha[i] = v;
            }
        }
        let r: Vec<f64> = (0..x.len())
            .map(|i| x[i] - (0..l).map(|j| cols[j][i] * alpha[j]).sum::<f64>())
            .collect();
        if (0..l).any(|j| signs[j] == 0 && dot(&cols[j], &r).abs() > lambda + 1e-9) {
            continue;
        }
        let obj = objective(&alpha);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, alpha));
        }
    }
    best.expect("the lasso always has a KKT point").1
}

/// Euclidean projection onto `{e : ‖e‖₁ ≤ ε}` by enumerating supports: on
/// a support `S` the solution is `v_i − θ·sign(v_i)` with
/// `θ = (Σ_S |v_i| − ε)/|S|`, valid when `|v_i| ≥ θ` on `S` and `|v_j| ≤ θ`
/// off it; the closest valid candidate wins.
pub fn l1_projection_brute_force(v: &[f64], eps: f64) -> Vec<f64> {
    if v.iter().map(|x| x.abs()).sum::<f64>() <= eps {
        return v.to_vec();
    }
    let n = v.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1..(1usize << n) {
        let support: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let theta = (support.iter().map(|&i| v[i].abs()).sum::<f64>() - eps) / support.len() as f64;
        if theta < 0.0 {
            continue;
        }
        let ok_in = support.iter().all(|&i| v[i].abs() >= theta - 1e-15);
        let ok_out = (0..n).filter(|i| mask >> i & 1 == 0).all(|i| v[i].abs() <= theta + 1e-15);
        if !(ok_in && ok_out) {
            continue;
        }
        let mut w = vec![0.0; n];
        for &i in &support {
            w[i] = v[i].signum() * (v[i].abs() - theta).max(0.0);
        }
        let d: f64 = w.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.as_ref().is_none_or(|(b, _)| d < *b) {
            best = Some((d, w));
        }
    }
    best.expect("some support is optimal").1
}

/// Dictionary with unit-norm Gaussian columns.
pub fn random_dictionary(rng: &mut ChaCha8Rng, dim: usize, atoms: usize) -> Dictionary {
    Dictionary::from_columns_normalized(dim, normal_vec(rng, dim * atoms)).unwrap()
}

/// Ground-truth atoms plus patches that are sparse combinations of them.
pub struct Planted {
    pub atoms: Vec<Vec<f64>>,
    pub patches: PatchSet,
}

/// `count` patches, each `k` random atoms with coefficients of magnitude in
/// `[1, 2]` and random sign, plus Gaussian noise of deviation `noise`.
pub fn planted_patches(seed: u64, dim: usize, atoms: usize, count: usize, k: usize, noise: f64) -> Planted {
    let mut r = rng(seed);
    let truth: Vec<Vec<f64>> = (0..atoms)
        .map(|_| {
            let v = normal_vec(&mut r, dim);
            let n = dot(&v, &v).sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(count * dim);
    for _ in 0..count {
        let mut x: Vec<f64> = normal_vec(&mut r, dim).into_iter().map(|v| v * noise).collect();
        let picks = rand::seq::index::sample(&mut r, atoms, k);
        for j in picks {
            let c = r.random_range(1.0..2.0) * if r.random::<bool>() { 1.0 } else { -1.0 };
            for (xi, ai) in x.iter_mut().zip(&truth[j]) {
                *xi += c * ai;
            }
        }
        data.extend(x);
    }
    Planted {
        atoms: truth,
        patches: PatchSet::new(dim, data).unwrap(),
    }
}

/// Fraction of true atoms matched by some learned atom with |cos| > `threshold`.
pub fn recovery_rate(truth: &[Vec<f64>], learned: &Dictionary, threshold: f64) -> f64 {
    let hits = truth
        .iter()
        .filter(|t| (0..learned.num_atoms()).any(|l| dot(t, learned.atom(l)).abs() > threshold))
        .count();
    hits as f64 / truth.len() as f64
}

/// A random differentiable graph: conv → relu → transposed conv → relu →
/// dense → (cross-entropy + weighted softmax). `build` replays it on a tape
/// from the leaf values.
pub struct RandomGraph {
    pub leaves: Vec<Tensor<f64>>,
    conv: ConvGeometry,
    deconv: ConvGeometry,
    label: usize,
    mix: Tensor<f64>,
}

impl RandomGraph {
    pub fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        let c_in = r.random_range(1..=3);
        let c_mid = r.random_range(1..=3);
        let c_out = r.random_range(1..=2);
        let size = r.random_range(4..=6);
        let k = r.random_range(2..=3);
        let conv = ConvGeometry::new(r.random_range(1..=2), r.random_range(0..=1));
        let deconv = ConvGeometry::new(r.random_range(1..=2), 0);
        let h1 = conv.conv_out(size, k).unwrap();
        let h2 = deconv.transposed_out(h1, 2).unwrap();
        let classes = r.random_range(2..=4);
        let features = c_out * h2 * h2;
        let mut t = |shape: Vec<usize>, scale: f64| {
            let n = shape.iter().product();
            let data = normal_vec(&mut r, n).into_iter().map(|v| v * scale).collect();
            Tensor::new(shape, data).unwrap()
        };
        let leaves = vec![
            t(vec![c_in, size, size], 1.0),
            t(vec![c_mid, c_in, k, k], 0.5),
            t(vec![c_mid, c_out, 2, 2], 0.5),
            t(vec![classes, features], 0.3),
        ];
        let mix = t(vec![classes], 1.0);
        let label = (seed as usize) % classes;
        Self {
            leaves,
            conv,
            deconv,
            label,
            mix,
        }
    }

    /// Records the graph on `tape`; returns the leaf vars and the loss.
    pub fn build(&self, tape: &mut Tape<f64>, leaves: &[Tensor<f64>]) -> (Vec<Var>, Var) {
        let vars: Vec<Var> = leaves.iter().map(|v| tape.var(v.clone())).collect();
        let h = tape.conv2d(vars[0], vars[1], self.conv).unwrap();
        let h = tape.relu(h);
        let h = tape.conv_transpose2d(h, vars[2], self.deconv).unwrap();
        let h = tape.relu(h);
        let n = tape.shape(h).iter().product::<usize>();
        let h = tape.reshape(h, vec![n, 1]).unwrap();
        let z = tape.matmul(vars[3], h).unwrap();
        let classes = tape.shape(z)[0];
        let z = tape.reshape(z, vec![classes]).unwrap();
        let ce = tape.cross_entropy(z, self.label).unwrap();
        let sm = tape.softmax(z);
        let mix = tape.constant(self.mix.clone());
        let weighted = tape.mul(sm, mix).unwrap();
        let weighted = tape.sum(weighted);
        let loss = tape.add(ce, weighted).unwrap();
        (vars, loss)
    }

    pub fn loss(&self, leaves: &[Tensor<f64>]) -> f64 {
        let mut tape = Tape::new();
        let (_, loss) = self.build(&mut tape, leaves);
        tape.value(loss).item().unwrap()
    }

    /// Largest relative error between the tape gradient and central
    /// differences over every leaf entry.
    pub fn max_relative_error(&self) -> f64 {
        let mut tape = Tape::new();
        let (vars, loss) = self.build(&mut tape, &self.leaves);
        let grads = tape.backward(loss).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (li, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var).expect("every leaf reaches the loss");
            for k in 0..self.leaves[li].len() {
                let mut plus = self.leaves.clone();
                plus[li].data_mut()[k] += h;
                let mut minus = self.leaves.clone();
                minus[li].data_mut()[k] -= h;
                let fd = (self.loss(&plus) - self.loss(&minus)) / (2.0 * h);
                let a = analytic.data()[k];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
                worst = worst.max(err);
            }
        }
        worst
    }
}
