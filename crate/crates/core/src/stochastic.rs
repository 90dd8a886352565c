//! Discrete filtrations: time grid, path ensembles (exact binary tree or seeded
//! Monte Carlo), conditional expectations, martingale representation and
//! weighted norms.

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Uniform grid `t_i = i h`, `h = T / N`, `i = 0..=N`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return invalid(format!("horizon must be positive and finite, got {horizon}"));
        }
        if steps == 0 {
            return invalid("grid needs at least one step");
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn h(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn t(&self, i: usize) -> f64 {
        i as f64 * self.h()
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }
}

/// How the Brownian increments are produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// All `2^N` paths with increments `±√h`; one noise coordinate.
    Tree,
    MonteCarlo {
        paths: usize,
        seed: u64,
        #[serde(default = "one")]
        dim: usize,
    },
}

fn one() -> usize {
    1
}

pub const MAX_TREE_STEPS: usize = 20;
pub const DEFAULT_MEMORY_BUDGET: u64 = 4 << 30;

/// Regression data for one node of a Monte Carlo ensemble.
#[derive(Clone, Debug)]
struct Projector {
    /// Inverse Gram matrix of the basis (size q × q).
    gram_inv: DMatrix<f64>,
}

/// Immutable carrier of the grid, the increments and the conditional-expectation engine.
#[derive(Clone, Debug)]
pub struct Ensemble {
    grid: TimeGrid,
    model: ModelSpec,
    paths: usize,
    dim: usize,
    /// `ΔW_k(t_j)` at `[(j * paths + p) * dim + k]`, `j < N`.
    dw: Vec<f64>,
    /// `W_k(t_i)` at `[(i * paths + p) * dim + k]`, `i ≤ N`.
    w: Vec<f64>,
    projectors: Vec<Projector>,
    memory_budget: u64,
}

impl Ensemble {
    pub fn build(grid: TimeGrid, model: ModelSpec) -> Result<Self> {
        let n = grid.steps;
        let h = grid.h();
        let (paths, dim, dw) = match model {
            ModelSpec::Tree => {
                if n > MAX_TREE_STEPS {
                    return invalid(format!("tree ensembles allow at most {MAX_TREE_STEPS} steps, got {n}"));
                }
                let paths = 1usize << n;
                let sq = h.sqrt();
                let mut dw = vec![0.0; n * paths];
                for j in 0..n {
                    let shift = n - 1 - j;
                    for p in 0..paths {
                        dw[j * paths + p] = if (p >> shift) & 1 == 0 { sq } else { -sq };
                    }
                }
                (paths, 1, dw)
            }
            ModelSpec::MonteCarlo { paths, seed, dim } => {
                if paths == 0 || dim == 0 {
                    return invalid("Monte Carlo ensembles need positive path count and dimension");
                }
                let sd = h.sqrt();
                let mut dw = vec![0.0; n * paths * dim];
                dw.par_chunks_mut(dim).enumerate().for_each(|(idx, out)| {
                    let (j, p) = (idx / paths, idx % paths);
                    for (k, o) in out.iter_mut().enumerate() {
                        *o = sd * counter_normal(seed, p, j, k, dim);
                    }
                });
                (paths, dim, dw)
            }
        };
        let mut w = vec![0.0; (n + 1) * paths * dim];
        for i in 0..n {
            for q in 0..paths * dim {
                w[(i + 1) * paths * dim + q] = w[i * paths * dim + q] + dw[i * paths * dim + q];
            }
        }
        let mut ens = Ensemble {
            grid,
            model,
            paths,
            dim,
            dw,
            w,
            projectors: Vec::new(),
            memory_budget: DEFAULT_MEMORY_BUDGET,
        };
        if !ens.is_tree() {
            ens.projectors = (0..=n).map(|i| ens.build_projector(i)).collect();
        }
        Ok(ens)
    }

    pub fn tree(horizon: f64, steps: usize) -> Result<Self> {
        Ensemble::build(TimeGrid::new(horizon, steps)?, ModelSpec::Tree)
    }

    pub fn monte_carlo(horizon: f64, steps: usize, paths: usize, dim: usize, seed: u64) -> Result<Self> {
        Ensemble::build(TimeGrid::new(horizon, steps)?, ModelSpec::MonteCarlo { paths, seed, dim })
    }

    pub fn with_memory_budget(mut self, bytes: u64) -> Self {
        self.memory_budget = bytes;
        self
    }

    pub fn memory_budget(&self) -> u64 {
        self.memory_budget
    }

    /// Rejects allocations of `count` reals beyond the budget.
    pub fn check_memory(&self, count: u64) -> Result<()> {
        let need = count.saturating_mul(8);
        if need > self.memory_budget {
            Err(Error::MemoryBudget { need, budget: self.memory_budget })
        } else {
            Ok(())
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn steps(&self) -> usize {
        self.grid.steps
    }

    pub fn h(&self) -> f64 {
        self.grid.h()
    }

    pub fn t(&self, i: usize) -> f64 {
        self.grid.t(i)
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn noise_dim(&self) -> usize {
        self.dim
    }

    pub fn is_tree(&self) -> bool {
        matches!(self.model, ModelSpec::Tree)
    }

    /// Probability weight of one path (all weights are equal in both models).
    pub fn weight(&self) -> f64 {
        1.0 / self.paths as f64
    }

    /// `ΔW(t_j)` on path `p`, length `d`.
    pub fn dw(&self, j: usize, p: usize) -> &[f64] {
        let o = (j * self.paths + p) * self.dim;
        &self.dw[o..o + self.dim]
    }

    /// `W(t_i)` on path `p`, length `d`.
    pub fn w(&self, i: usize, p: usize) -> &[f64] {
        let o = (i * self.paths + p) * self.dim;
        &self.w[o..o + self.dim]
    }

    /// Raw increments, layout `[(j * paths + p) * d + k]`.
    pub fn increments(&self) -> &[f64] {
        &self.dw
    }

    pub fn mean(&self, values: &[f64]) -> f64 {
        values.iter().sum::<f64>() / values.len() as f64
    }

    /// Number of tree paths sharing the first `i` increments.
    fn block(&self, i: usize) -> usize {
        1usize << (self.grid.steps - i)
    }

    // ---- conditional expectation ---------------------------------------------------------

    /// `E[payoff | F_{t_i}]` per path.
    pub fn cond_expect(&self, payoff: &[f64], i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.paths];
        self.cond_expect_into(payoff, i, &mut out);
        out
    }

    pub fn cond_expect_into(&self, payoff: &[f64], i: usize, out: &mut [f64]) {
        assert_eq!(payoff.len(), self.paths, "payoff must have one value per path");
        if self.is_tree() {
            let b = self.block(i);
            for (src, dst) in payoff.chunks(b).zip(out.chunks_mut(b)) {
                let m = src.iter().sum::<f64>() / b as f64;
                dst.iter_mut().for_each(|x| *x = m);
            }
        } else {
            self.regress_into(payoff, i, None, out);
        }
    }

    /// Monte Carlo regression of `payoff` on the degree-2 basis at node `i`, optionally
    /// augmented with caller features (`features[p * f + c]`).
    pub fn cond_expect_with_features(&self, payoff: &[f64], i: usize, features: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.paths];
        if self.is_tree() {
            self.cond_expect_into(payoff, i, &mut out);
        } else {
            self.regress_into(payoff, i, Some(features), &mut out);
        }
        out
    }

    fn feature_count(&self, i: usize, extra: Option<&[f64]>) -> usize {
        let base = if i == 0 { 0 } else { self.dim };
        base + extra.map_or(0, |f| f.len() / self.paths)
    }

    fn basis(&self, i: usize, p: usize, extra: Option<&[f64]>, out: &mut Vec<f64>) {
        out.clear();
        let mut f: Vec<f64> = if i == 0 { Vec::new() } else { self.w(i, p).to_vec() };
        if let Some(x) = extra {
            let nf = x.len() / self.paths;
            f.extend_from_slice(&x[p * nf..(p + 1) * nf]);
        }
        out.push(1.0);
        out.extend_from_slice(&f);
        for a in 0..f.len() {
            for b in a..f.len() {
                out.push(f[a] * f[b]);
            }
        }
    }

    fn gram_inverse(&self, i: usize, extra: Option<&[f64]>) -> DMatrix<f64> {
        let nf = self.feature_count(i, extra);
        let q = 1 + nf + nf * (nf + 1) / 2;
        let mut g = DMatrix::<f64>::zeros(q, q);
        let mut phi = Vec::with_capacity(q);
        for p in 0..self.paths {
            self.basis(i, p, extra, &mut phi);
            for a in 0..q {
                for b in a..q {
                    g[(a, b)] += phi[a] * phi[b];
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                g[(a, b)] = g[(b, a)];
            }
        }
        g /= self.paths as f64;
        match g.clone().cholesky() {
            Some(c) if c.l().diagonal().iter().all(|d| *d > 1e-7) => c.inverse(),
            _ => {
                log::warn!("regression basis at node {i} is singular; using ridge penalty 1e-10");
                let ridge = g + DMatrix::<f64>::identity(q, q) * 1e-10;
                ridge
                    .clone()
                    .cholesky()
                    .map(|c| c.inverse())
                    .or_else(|| ridge.pseudo_inverse(1e-14).ok())
                    .expect("ridge-regularised Gram matrix is invertible")
            }
        }
    }

    fn build_projector(&self, i: usize) -> Projector {
        Projector { gram_inv: self.gram_inverse(i, None) }
    }

    fn regress_into(&self, payoff: &[f64], i: usize, extra: Option<&[f64]>, out: &mut [f64]) {
        let owned;
        let ginv = match extra {
            None => &self.projectors[i].gram_inv,
            Some(_) => {
                owned = self.gram_inverse(i, extra);
                &owned
            }
        };
        let q = ginv.nrows();
        let mut rhs = DVector::<f64>::zeros(q);
        let mut phi = Vec::with_capacity(q);
        for (p, y) in payoff.iter().enumerate() {
            self.basis(i, p, extra, &mut phi);
            for a in 0..q {
                rhs[a] += phi[a] * y;
            }
        }
        rhs /= self.paths as f64;
        let beta = ginv * rhs;
        for (p, o) in out.iter_mut().enumerate() {
            self.basis(i, p, extra, &mut phi);
            *o = phi.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
        }
    }

    // ---- martingale representation --------------------------------------------------------

    /// Writes `Z(s_j) = E[xi ΔW(s_j) | F_{s_j}] / h` for `j < upto` into `z[(j * paths + p) * d + k]`
    /// and returns `E[xi]`.
    pub fn represent_into(&self, xi: &[f64], upto: usize, z: &mut [f64]) -> f64 {
        let n = self.grid.steps;
        assert!(upto <= n);
        assert_eq!(xi.len(), self.paths);
        let mean = self.mean(xi);
        if self.is_tree() {
            let inv = 1.0 / (2.0 * self.h().sqrt());
            // Level averages, finest first: level k has 2^k blocks.
            let mut level = xi.to_vec();
            for k in (0..n).rev() {
                let next: Vec<f64> = level.chunks(2).map(|c| 0.5 * (c[0] + c[1])).collect();
                if k < upto {
                    let shift = n - k;
                    let row = &mut z[k * self.paths..(k + 1) * self.paths];
                    for (p, zp) in row.iter_mut().enumerate() {
                        let parent = p >> shift;
                        *zp = (level[2 * parent] - level[2 * parent + 1]) * inv;
                    }
                }
                level = next;
            }
        } else {
            let d = self.dim;
            let h = self.h();
            let mut prod = vec![0.0; self.paths];
            let mut fit = vec![0.0; self.paths];
            for j in 0..upto {
                for k in 0..d {
                    for p in 0..self.paths {
                        prod[p] = xi[p] * self.dw(j, p)[k] / h;
                    }
                    self.regress_into(&prod, j, None, &mut fit);
                    for p in 0..self.paths {
                        z[(j * self.paths + p) * d + k] = fit[p];
                    }
                }
            }
        }
        mean
    }

    /// Martingale representation of an `F_{t_i}`-measurable variable over `s_j`, `j < i`.
    pub fn martingale_represent(&self, y: &[f64], i: usize) -> MartingaleRep {
        let mut z = vec![0.0; i * self.paths * self.dim];
        let mean = self.represent_into(y, i, &mut z);
        let residual = self.representation_residual(y, mean, &z, i);
        MartingaleRep { mean, z, upto: i, residual }
    }

    /// RMS of `y - mean - Σ_{j<upto} Z(s_j) ΔW(s_j)`.
    pub fn representation_residual(&self, y: &[f64], mean: f64, z: &[f64], upto: usize) -> f64 {
        let d = self.dim;
        let mut acc = 0.0;
        for (p, yp) in y.iter().enumerate() {
            let mut r = yp - mean;
            for j in 0..upto {
                let dw = self.dw(j, p);
                for k in 0..d {
                    r -= z[(j * self.paths + p) * d + k] * dw[k];
                }
            }
            acc += r * r;
        }
        (acc / self.paths as f64).sqrt()
    }

    // ---- adaptedness and norms ------------------------------------------------------------

    /// Exact adaptedness test on the tree; `None` for Monte Carlo ensembles.
    pub fn is_adapted(&self, x: &Process, tol: f64) -> Option<bool> {
        if !self.is_tree() {
            return None;
        }
        for i in 0..x.nodes().min(self.grid.steps + 1) {
            let b = self.block(i) * x.dim();
            for chunk in x.node(i).chunks(b) {
                let first = &chunk[..x.dim()];
                if chunk.chunks(x.dim()).any(|v| v.iter().zip(first).any(|(a, c)| (a - c).abs() > tol)) {
                    return Some(false);
                }
            }
        }
        Some(true)
    }

    /// Left-rectangle estimate of `E ∫ e^{2 beta t} |f(t)|^2 dt` over nodes `0..N`; returns `(sq, sqrt)`.
    pub fn weighted_sq_norm(&self, f: &Process, beta: f64) -> (f64, f64) {
        let h = self.h();
        let mut total = 0.0;
        for i in 0..self.grid.steps {
            let e = (2.0 * beta * self.t(i)).exp();
            let s: f64 = f.node(i).iter().map(|v| v * v).sum::<f64>() / self.paths as f64;
            total += e * s * h;
        }
        (total, total.sqrt())
    }

    /// Two-parameter analogue: `E ∫∫ e^{2 beta t} |z(t,s)|^2 ds dt`.
    pub fn weighted_sq_norm_two(&self, z: &TwoParamProcess, beta: f64) -> (f64, f64) {
        let h = self.h();
        let mut total = 0.0;
        for i in 0..self.grid.steps.min(z.t_nodes()) {
            let e = (2.0 * beta * self.t(i)).exp();
            let mut s = 0.0;
            for j in 0..self.grid.steps.min(z.s_nodes()) {
                s += z.cell(i, j).iter().map(|v| v * v).sum::<f64>();
            }
            total += e * s / self.paths as f64 * h * h;
        }
        (total, total.sqrt())
    }

    /// Path index of `p` in a coarser tree with `steps` leading increments.
    pub fn tree_ancestor(&self, p: usize, steps: usize) -> usize {
        p >> (self.grid.steps - steps)
    }
}

/// Standard normal draw keyed by `(seed, path, step, coordinate)`.
pub fn counter_normal(seed: u64, path: usize, step: usize, coord: usize, dim: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng.set_word_pos(((step * dim + coord) as u128) * 4);
    let a = rng.next_u64();
    let b = rng.next_u64();
    let u1 = 1.0 - (a >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Clone, Debug)]
pub struct MartingaleRep {
    pub mean: f64,
    /// `Z(s_j)` at `[(j * paths + p) * d + k]`, `j < upto`.
    pub z: Vec<f64>,
    pub upto: usize,
    pub residual: f64,
}

/// One-parameter process: a vector of dimension `dim` per node per path.
#[derive(Clone, Debug, PartialEq)]
pub struct Process {
    nodes: usize,
    paths: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Process {
    pub fn zeros(nodes: usize, paths: usize, dim: usize) -> Self {
        Process { nodes, paths, dim, data: vec![0.0; nodes * paths * dim] }
    }

    /// Zero process on all grid nodes of `ens`.
    pub fn zeros_on(ens: &Ensemble, dim: usize) -> Self {
        Process::zeros(ens.steps() + 1, ens.paths(), dim)
    }

    pub fn constant(ens: &Ensemble, value: &[f64]) -> Self {
        let mut x = Process::zeros_on(ens, value.len());
        for v in x.data.chunks_mut(value.len().max(1)) {
            v.copy_from_slice(value);
        }
        x
    }

    /// Fills node `i`, path `p` via `f(i, p, out)`.
    pub fn from_fn(ens: &Ensemble, dim: usize, f: impl Fn(usize, usize, &mut [f64])) -> Self {
        let mut x = Process::zeros_on(ens, dim);
        for i in 0..x.nodes {
            for p in 0..x.paths {
                f(i, p, x.at_mut(i, p));
            }
        }
        x
    }

    pub fn from_vec(nodes: usize, paths: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != nodes * paths * dim {
            return Err(Error::Dimension(format!(
                "expected {} values for {nodes}×{paths}×{dim}, got {}",
                nodes * paths * dim,
                data.len()
            )));
        }
        Ok(Process { nodes, paths, dim, data })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, i: usize, p: usize) -> &[f64] {
        let o = (i * self.paths + p) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn at_mut(&mut self, i: usize, p: usize) -> &mut [f64] {
        let o = (i * self.paths + p) * self.dim;
        &mut self.data[o..o + self.dim]
    }

    /// All paths at node `i`, layout `[p * dim + c]`.
    pub fn node(&self, i: usize) -> &[f64] {
        let s = self.paths * self.dim;
        &self.data[i * s..(i + 1) * s]
    }

    pub fn node_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.paths * self.dim;
        &mut self.data[i * s..(i + 1) * s]
    }

    /// Component `c` at node `i` across paths.
    pub fn component(&self, i: usize, c: usize) -> Vec<f64> {
        self.node(i).chunks(self.dim).map(|v| v[c]).collect()
    }

    pub fn set_component(&mut self, i: usize, c: usize, values: &[f64]) {
        let d = self.dim;
        for (v, x) in self.node_mut(i).chunks_mut(d).zip(values) {
            v[c] = *x;
        }
    }

    pub fn same_shape(&self, other: &Process) -> bool {
        self.nodes == other.nodes && self.paths == other.paths && self.dim == other.dim
    }

    pub fn sub(&self, other: &Process) -> Process {
        assert!(self.same_shape(other));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Process { data, ..*self }
    }

    pub fn add_scaled(&mut self, c: f64, other: &Process) {
        assert!(self.same_shape(other));
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += c * b);
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|a| *a *= c);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Two-parameter process `z(t_i, s_j)`: a `rows × cols` matrix per cell per path.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoParamProcess {
    t_nodes: usize,
    s_nodes: usize,
    paths: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TwoParamProcess {
    pub fn zeros(ens: &Ensemble, t_nodes: usize, s_nodes: usize, rows: usize, cols: usize) -> Result<Self> {
        let count = (t_nodes * s_nodes * ens.paths() * rows * cols) as u64;
        ens.check_memory(count)?;
        Ok(TwoParamProcess {
            t_nodes,
            s_nodes,
            paths: ens.paths(),
            rows,
            cols,
            data: vec![0.0; count as usize],
        })
    }

    pub fn t_nodes(&self) -> usize {
        self.t_nodes
    }

    pub fn s_nodes(&self) -> usize {
        self.s_nodes
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn cell_len(&self) -> usize {
        self.paths * self.rows * self.cols
    }

    /// All paths of cell `(i, j)`, layout `[p * rows * cols + r * cols + c]`.
    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let l = self.cell_len();
        let o = (i * self.s_nodes + j) * l;
        &self.data[o..o + l]
    }

    pub fn cell_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let l = self.cell_len();
        let o = (i * self.s_nodes + j) * l;
        &mut self.data[o..o + l]
    }

    /// Row `i` (all `s_j`), layout `[(j * paths + p) * rows * cols + ...]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let l = self.cell_len() * self.s_nodes;
        &self.data[i * l..(i + 1) * l]
    }

    pub fn rows_mut(&mut self) -> std::slice::ChunksMut<'_, f64> {
        let l = self.cell_len() * self.s_nodes;
        self.data.chunks_mut(l)
    }

    pub fn at(&self, i: usize, j: usize, p: usize) -> &[f64] {
        let m = self.rows * self.cols;
        &self.cell(i, j)[p * m..(p + 1) * m]
    }

    pub fn at_mut(&mut self, i: usize, j: usize, p: usize) -> &mut [f64] {
        let m = self.rows * self.cols;
        &mut self.cell_mut(i, j)[p * m..(p + 1) * m]
    }

    pub fn max_abs_diff(&self, other: &TwoParamProcess) -> f64 {
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}
