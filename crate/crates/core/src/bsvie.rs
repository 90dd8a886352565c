//! Infinite-horizon backward Volterra equations
//! `Y(t) = ψ(t) + ∫_t^∞ e^{-λ(s-t)} g(t,s,Y(s),Z(t,s),Z(s,t)) ds - ∫_t^∞ Z(t,s) dW(s)`
//! solved on a truncated grid for adapted M-solutions.
//!
//! Discretisation: `ξ_i = ψ_i + Σ_{j ≥ i} e^{-λ(s_j - t_i)} w_{j-i} g(t_i, s_j, Y_j, Z(i,j), Z(j,i))`,
//! `Y_i = E_i[ξ_i]`, and `Z(i, ·)` is the martingale representation of `ξ_i` over every `s_j < T`.
//! The part `j < i` of that representation is the M-constraint of `Y_i`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{BsvieMargin, DriverKernels, Kernel};
use crate::stochastic::{Ensemble, Process, TimeGrid, TwoParamProcess};
use crate::svie::{Cell, Weighting};

/// Driver `g(t, s, y, z1, z2)` with `y ∈ R^m`, `z1 = Z(t,s)`, `z2 = Z(s,t)` (both `m × d`, row-major).
pub trait Driver: Send + Sync {
    fn dim(&self) -> usize;
    fn kernels(&self) -> DriverKernels;
    fn eval(&self, c: &Cell, y: &[f64], z1: &[f64], z2: &[f64], out: &mut [f64]);

    /// `Factored(K)` means `g = K(s - t) g̃` and the callback returns `g̃`.
    fn weighting(&self) -> Weighting {
        Weighting::Plain
    }
    /// Whether the cell `s = t` enters the discrete driver sum.
    fn includes_diagonal(&self) -> bool {
        true
    }
    fn uses_z1(&self) -> bool {
        true
    }
    /// Admissibility margin at `(eta, lambda)`; override when the envelope is a sum of kernels.
    fn margin(&self, eta: f64, lambda: f64) -> Result<BsvieMargin> {
        self.kernels().margin(eta, lambda)
    }
}

/// `g ≡ 0`.
#[derive(Clone, Copy, Debug)]
pub struct ZeroDriver(pub usize);

impl Driver for ZeroDriver {
    fn dim(&self) -> usize {
        self.0
    }
    fn kernels(&self) -> DriverKernels {
        DriverKernels::default()
    }
    fn eval(&self, _: &Cell, _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn includes_diagonal(&self) -> bool {
        false
    }
    fn uses_z1(&self) -> bool {
        false
    }
}

/// `g = A y + Σ_k B1_k z1[:,k] + Σ_k B2_k z2[:,k] + c` with constant matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearDriver {
    pub m: usize,
    pub a: Vec<f64>,
    /// One `m × m` block per noise coordinate; empty means zero.
    #[serde(default)]
    pub b1: Vec<Vec<f64>>,
    #[serde(default)]
    pub b2: Vec<Vec<f64>>,
    #[serde(default)]
    pub c: Vec<f64>,
}

impl LinearDriver {
    pub fn scalar(a: f64, b1: f64, b2: f64) -> Self {
        LinearDriver { m: 1, a: vec![a], b1: vec![vec![b1]], b2: vec![vec![b2]], c: vec![0.0] }
    }

    fn opnorm(blocks: &[Vec<f64>], m: usize) -> f64 {
        // Frobenius norm of the stacked blocks bounds |Σ_k B_k z_k| / |z|.
        let _ = m;
        blocks.iter().flat_map(|b| b.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl Driver for LinearDriver {
    fn dim(&self) -> usize {
        self.m
    }
    fn kernels(&self) -> DriverKernels {
        let k = |v: f64| if v == 0.0 { Kernel::Zero } else { Kernel::constant(v) };
        DriverKernels {
            y: k(Self::opnorm(std::slice::from_ref(&self.a), self.m)),
            z1: k(Self::opnorm(&self.b1, self.m)),
            z2: k(Self::opnorm(&self.b2, self.m)),
        }
    }
    fn eval(&self, _: &Cell, y: &[f64], z1: &[f64], z2: &[f64], out: &mut [f64]) {
        let m = self.m;
        let d = if m == 0 { 0 } else { z1.len() / m };
        for r in 0..m {
            let mut v = self.c.get(r).copied().unwrap_or(0.0);
            v += (0..m).map(|q| self.a[r * m + q] * y[q]).sum::<f64>();
            for (blocks, z) in [(&self.b1, z1), (&self.b2, z2)] {
                for (k, b) in blocks.iter().enumerate().take(d) {
                    v += (0..m).map(|q| b[r * m + q] * z[q * d + k]).sum::<f64>();
                }
            }
            out[r] = v;
        }
    }
    fn uses_z1(&self) -> bool {
        self.b1.iter().any(|b| b.iter().any(|v| *v != 0.0))
    }
}

type DriverFn = dyn Fn(&Cell, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync;

/// Closure-backed driver with declared envelopes and structure flags.
#[derive(Clone)]
pub struct FnDriver {
    pub m: usize,
    pub kernels: DriverKernels,
    pub weighting: Weighting,
    pub diagonal: bool,
    pub z1: bool,
    pub f: Arc<DriverFn>,
}

impl FnDriver {
    pub fn new(
        m: usize,
        kernels: DriverKernels,
        f: impl Fn(&Cell, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        FnDriver { m, kernels, weighting: Weighting::Plain, diagonal: true, z1: true, f: Arc::new(f) }
    }
}

impl Driver for FnDriver {
    fn dim(&self) -> usize {
        self.m
    }
    fn kernels(&self) -> DriverKernels {
        self.kernels
    }
    fn eval(&self, c: &Cell, y: &[f64], z1: &[f64], z2: &[f64], out: &mut [f64]) {
        (self.f)(c, y, z1, z2, out)
    }
    fn weighting(&self) -> Weighting {
        self.weighting
    }
    fn includes_diagonal(&self) -> bool {
        self.diagonal
    }
    fn uses_z1(&self) -> bool {
        self.z1
    }
}

#[derive(Clone)]
pub struct BsvieProblem {
    pub driver: Arc<dyn Driver>,
    /// Free term on every node; need not be adapted.
    pub psi: Process,
    pub lambda: f64,
    pub eta: f64,
}

impl BsvieProblem {
    pub fn new(driver: Arc<dyn Driver>, psi: Process, lambda: f64, eta: f64) -> Self {
        BsvieProblem { driver, psi, lambda, eta }
    }

    pub fn margin(&self) -> Result<BsvieMargin> {
        self.driver.margin(self.eta, self.lambda)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    /// Sweep when the driver structure allows it, otherwise Picard with a continuation fallback.
    #[default]
    Auto,
    /// Exact backward recursion; needs a driver without diagonal and `z1` dependence.
    Sweep,
    Picard,
    Continuation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitialGuess {
    /// Start from the solution with zero driver.
    #[default]
    Trivial,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BsvieOptions {
    /// Distance tolerance; defaults to `1e-8` on trees and `1e-4 ‖ψ‖` on Monte Carlo.
    #[serde(with = "crate::ext_real::opt")]
    pub tol: Option<f64>,
    pub max_iter: usize,
    pub mode: SolveMode,
    pub initial: InitialGuess,
}

impl Default for BsvieOptions {
    fn default() -> Self {
        BsvieOptions { tol: None, max_iter: 200, mode: SolveMode::Auto, initial: InitialGuess::Trivial }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct Diagnostics {
    pub mode: SolveMode,
    pub iterations: usize,
    pub levels: usize,
    pub tol: f64,
    /// M-norm distances of successive top-level iterates.
    pub distances: Vec<f64>,
    pub ratios: Vec<f64>,
    /// Distance between the solution and one more application of the discrete map.
    pub equation_residual: f64,
    /// Largest path-RMS of `Y_i - E[Y_i] - Σ_{j<i} Z(i,j) ΔW_j`.
    pub m_residual: f64,
    #[serde(with = "crate::ext_real")]
    pub margin: f64,
    #[serde(with = "crate::ext_real")]
    pub c_eta_lambda: f64,
}

#[derive(Clone, Debug)]
pub struct MSolution {
    pub y: Process,
    /// `Z(t_i, s_j)` for `i ≤ N`, `j < N`, each `m × d`.
    pub z: TwoParamProcess,
    pub diagnostics: Diagnostics,
}

impl MSolution {
    /// `(‖Y‖² + ‖Z‖²)^{1/2}` with weight `e^{2 eta t}`.
    pub fn norm(&self, ens: &Ensemble, eta: f64) -> f64 {
        (ens.weighted_sq_norm(&self.y, eta).0 + ens.weighted_sq_norm_two(&self.z, eta).0).sqrt()
    }

    pub fn distance(&self, other: &MSolution, ens: &Ensemble, eta: f64) -> f64 {
        m_distance(ens, eta, (&self.y, &self.z), (&other.y, &other.z))
    }
}

fn m_distance(ens: &Ensemble, eta: f64, a: (&Process, &TwoParamProcess), b: (&Process, &TwoParamProcess)) -> f64 {
    let dy = ens.weighted_sq_norm(&a.0.sub(b.0), eta).0;
    let mut dz = a.1.clone();
    dz.data_mut().iter_mut().zip(b.1.data()).for_each(|(x, y)| *x -= y);
    (dy + ens.weighted_sq_norm_two(&dz, eta).0).sqrt()
}

/// Cell weights of the driver sum by lag `j - i`.
fn lag_weights(grid: &TimeGrid, w: &Weighting) -> Vec<f64> {
    let h = grid.h();
    (0..grid.steps)
        .map(|lag| match w {
            Weighting::Plain => h,
            Weighting::Factored(k) => k.integral(lag as f64 * h, (lag + 1) as f64 * h),
        })
        .collect()
}

/// Solution with zero driver: `Y_i = E_i[ψ_i]`, `Z(i, ·)` the representation of `ψ_i`.
pub fn solve_trivial(psi: &Process, ens: &Ensemble) -> Result<MSolution> {
    let (y, z) = trivial_parts(psi, ens)?;
    let m_residual = m_constraint_residual(&y, &z, ens);
    Ok(MSolution {
        y,
        z,
        diagnostics: Diagnostics {
            mode: SolveMode::Sweep,
            m_residual,
            margin: 1.0,
            c_eta_lambda: std::f64::consts::SQRT_2,
            ..Default::default()
        },
    })
}

fn trivial_parts(xi: &Process, ens: &Ensemble) -> Result<(Process, TwoParamProcess)> {
    let (n, paths, d, m) = (ens.steps(), ens.paths(), ens.noise_dim(), xi.dim());
    let mut y = Process::zeros_on(ens, m);
    let mut z = TwoParamProcess::zeros(ens, n + 1, n, m, d)?;
    y.data_mut()
        .par_chunks_mut(paths * m)
        .zip(z.rows_mut().collect::<Vec<_>>().into_par_iter())
        .enumerate()
        .for_each(|(i, (yrow, zrow))| {
            let src = xi.node(i);
            let mut col = vec![0.0; paths];
            let mut tmp = vec![0.0; n * paths * d];
            let mut ce = vec![0.0; paths];
            for c in 0..m {
                for p in 0..paths {
                    col[p] = src[p * m + c];
                }
                ens.represent_into(&col, n, &mut tmp);
                for j in 0..n {
                    for p in 0..paths {
                        for k in 0..d {
                            zrow[((j * paths + p) * m + c) * d + k] = tmp[(j * paths + p) * d + k];
                        }
                    }
                }
                ens.cond_expect_into(&col, i, &mut ce);
                for p in 0..paths {
                    yrow[p * m + c] = ce[p];
                }
            }
        });
    Ok((y, z))
}

/// Largest path-RMS residual of the M-constraint over nodes and components.
pub fn m_constraint_residual(y: &Process, z: &TwoParamProcess, ens: &Ensemble) -> f64 {
    let (paths, m, d) = (ens.paths(), y.dim(), ens.noise_dim());
    let mut worst: f64 = 0.0;
    for i in 0..y.nodes() {
        for c in 0..m {
            let col: Vec<f64> = (0..paths).map(|p| y.at(i, p)[c]).collect();
            let mean = ens.mean(&col);
            let mut acc = 0.0;
            for p in 0..paths {
                let mut r = col[p] - mean;
                for j in 0..i.min(z.s_nodes()) {
                    let zz = z.at(i, j, p);
                    let dw = ens.dw(j, p);
                    for k in 0..d {
                        r -= zz[c * d + k] * dw[k];
                    }
                }
                acc += r * r;
            }
            worst = worst.max((acc / paths as f64).sqrt());
        }
    }
    worst
}

struct Solver<'a> {
    p: &'a BsvieProblem,
    ens: &'a Ensemble,
    weights: Vec<f64>,
    first_lag: usize,
    tol: f64,
    max_iter: usize,
}

impl<'a> Solver<'a> {
    /// `G_i = Σ_j e^{-λ(s_j - t_i)} w g(...)` for every row, as a (non-adapted) process.
    fn driver_terms(&self, y: &Process, z: &TwoParamProcess, scale: f64) -> Process {
        let ens = self.ens;
        let (n, paths, d, m) = (ens.steps(), ens.paths(), ens.noise_dim(), self.p.driver.dim());
        let grid = *ens.grid();
        let h = grid.h();
        let mut g = Process::zeros_on(ens, m);
        g.data_mut().par_chunks_mut(paths * m).enumerate().for_each(|(i, row)| {
            let mut out = vec![0.0; m];
            let zero = vec![0.0; m * d];
            for j in (i + self.first_lag)..n {
                let w = scale * (-self.p.lambda * (j - i) as f64 * h).exp() * self.weights[j - i];
                if w == 0.0 {
                    continue;
                }
                for pth in 0..paths {
                    let cell = Cell::new(&grid, i, j, pth);
                    let z1 = if self.p.driver.uses_z1() { z.at(i, j, pth) } else { &zero[..] };
                    self.p.driver.eval(&cell, y.at(j, pth), z1, z.at(j, i, pth), &mut out);
                    for c in 0..m {
                        row[pth * m + c] += w * out[c];
                    }
                }
            }
        });
        g
    }

    fn shifted(&self, base: &Process, y: &Process, z: &TwoParamProcess, scale: f64) -> Process {
        let mut xi = self.driver_terms(y, z, scale);
        xi.add_scaled(1.0, base);
        xi
    }

    /// One application of the full-strength discrete map.
    fn map(&self, y: &Process, z: &TwoParamProcess) -> Result<(Process, TwoParamProcess)> {
        trivial_parts(&self.shifted(&self.p.psi, y, z, 1.0), self.ens)
    }

    fn sweep(&self) -> Result<(Process, TwoParamProcess)> {
        let ens = self.ens;
        let (n, paths, d, m) = (ens.steps(), ens.paths(), ens.noise_dim(), self.p.driver.dim());
        let grid = *ens.grid();
        let h = grid.h();
        let mut y = Process::zeros_on(ens, m);
        let mut z = TwoParamProcess::zeros(ens, n + 1, n, m, d)?;
        let zero = vec![0.0; m * d];
        let mut out = vec![0.0; m];
        let mut col = vec![0.0; paths];
        let mut tmp = vec![0.0; n * paths * d];
        let mut ce = vec![0.0; paths];
        for i in (0..=n).rev() {
            let mut xi = self.p.psi.node(i).to_vec();
            for j in (i + 1)..n {
                let w = (-self.p.lambda * (j - i) as f64 * h).exp() * self.weights[j - i];
                for pth in 0..paths {
                    let cell = Cell::new(&grid, i, j, pth);
                    self.p.driver.eval(&cell, y.at(j, pth), &zero, z.at(j, i, pth), &mut out);
                    for c in 0..m {
                        xi[pth * m + c] += w * out[c];
                    }
                }
            }
            for c in 0..m {
                for pth in 0..paths {
                    col[pth] = xi[pth * m + c];
                }
                ens.represent_into(&col, n, &mut tmp);
                for j in 0..n {
                    for pth in 0..paths {
                        let cell = z.at_mut(i, j, pth);
                        for k in 0..d {
                            cell[c * d + k] = tmp[(j * paths + pth) * d + k];
                        }
                    }
                }
                ens.cond_expect_into(&col, i, &mut ce);
                for pth in 0..paths {
                    y.at_mut(i, pth)[c] = ce[pth];
                }
            }
            if y.node(i).iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite Y at node {i}")));
            }
        }
        Ok((y, z))
    }

    /// Solves `Y = E[base + γ_k G(Y, Z)]` for level `k` of the ladder `gammas`.
    fn solve_level(
        &self,
        gammas: &[f64],
        k: usize,
        base: &Process,
        start: Option<(Process, TwoParamProcess)>,
        trace: &mut Option<&mut Trace>,
    ) -> Result<(Process, TwoParamProcess)> {
        if k == 0 {
            return trivial_parts(base, self.ens);
        }
        let step = gammas[k] - gammas[k - 1];
        let (mut y, mut z) = match start {
            Some(s) => s,
            None => self.solve_level(gammas, k - 1, base, None, &mut None)?,
        };
        let mut prev_d = f64::NAN;
        let mut bad = 0;
        for it in 1..=self.max_iter {
            let shifted = self.shifted(base, &y, &z, step);
            let (y1, z1) = self.solve_level(gammas, k - 1, &shifted, Some((y.clone(), z.clone())), &mut None)?;
            let dist = m_distance(self.ens, self.p.eta, (&y1, &z1), (&y, &z));
            if !dist.is_finite() {
                return Err(Error::Numerical(format!("non-finite iterate at level {k}, iteration {it}")));
            }
            let ratio = dist / prev_d;
            if let Some(t) = trace.as_deref_mut() {
                t.distances.push(dist);
                if prev_d.is_finite() && prev_d > 0.0 {
                    t.ratios.push(ratio);
                }
                t.iterations = it;
            }
            y = y1;
            z = z1;
            if dist <= self.tol {
                return Ok((y, z));
            }
            if prev_d.is_finite() && ratio >= 1.0 {
                bad += 1;
                if bad >= 3 {
                    return Err(Error::NonConvergence(format!(
                        "distance ratio ≥ 1 for 3 consecutive iterations at level {k} (last distance {dist:e}, ratio {ratio:.4})"
                    )));
                }
            } else {
                bad = 0;
            }
            if let Some(t) = trace.as_deref_mut() {
                if t.probe && it == 2 && ratio >= 0.95 {
                    t.switch = true;
                    return Ok((y, z));
                }
            }
            prev_d = dist;
        }
        Err(Error::NonConvergence(format!("no convergence within {} iterations at level {k}", self.max_iter)))
    }
}

#[derive(Default)]
struct Trace {
    distances: Vec<f64>,
    ratios: Vec<f64>,
    iterations: usize,
    probe: bool,
    switch: bool,
}

/// Default stopping tolerance for an ensemble.
pub fn default_tolerance(p: &BsvieProblem, ens: &Ensemble) -> f64 {
    if ens.is_tree() {
        1e-8
    } else {
        1e-4 * ens.weighted_sq_norm(&p.psi, p.eta).1
    }
}

pub fn solve_bsvie(p: &BsvieProblem, ens: &Ensemble, opts: &BsvieOptions) -> Result<MSolution> {
    let n = ens.steps();
    if p.psi.nodes() != n + 1 || p.psi.paths() != ens.paths() || p.psi.dim() != p.driver.dim() {
        return Err(Error::Dimension(format!(
            "free term has shape {}×{}×{}, expected {}×{}×{}",
            p.psi.nodes(),
            p.psi.paths(),
            p.psi.dim(),
            n + 1,
            ens.paths(),
            p.driver.dim()
        )));
    }
    let margin = p.margin()?;
    if !margin.admissible() {
        return Err(Error::Inadmissible(format!(
            "(eta, lambda) = ({}, {}) has driver margin {} ≤ 0",
            p.eta, p.lambda, margin.margin
        )));
    }
    let tol = opts.tol.unwrap_or_else(|| default_tolerance(p, ens));
    let drv = p.driver.as_ref();
    let solver = Solver {
        p,
        ens,
        weights: lag_weights(ens.grid(), &drv.weighting()),
        first_lag: if drv.includes_diagonal() { 0 } else { 1 },
        tol,
        max_iter: opts.max_iter,
    };
    let sweepable = !drv.includes_diagonal() && !drv.uses_z1();
    let mode = match opts.mode {
        SolveMode::Auto if sweepable => SolveMode::Sweep,
        SolveMode::Sweep if !sweepable => {
            return Err(Error::InvalidParameter(
                "sweep mode needs a driver that skips the diagonal and ignores z1".into(),
            ))
        }
        m => m,
    };
    let zero_start = |_: &Solver| -> Result<(Process, TwoParamProcess)> {
        Ok((Process::zeros_on(ens, drv.dim()), TwoParamProcess::zeros(ens, n + 1, n, drv.dim(), ens.noise_dim())?))
    };
    let mut diag = Diagnostics { margin: margin.margin, c_eta_lambda: margin.c_eta_lambda, tol, ..Default::default() };
    let (y, z) = match mode {
        SolveMode::Sweep => {
            diag.mode = SolveMode::Sweep;
            solver.sweep()?
        }
        SolveMode::Picard | SolveMode::Auto => {
            let gammas = [0.0, 1.0];
            let start = match opts.initial {
                InitialGuess::Trivial => None,
                InitialGuess::Zero => Some(zero_start(&solver)?),
            };
            let mut trace = Trace { probe: mode == SolveMode::Auto, ..Default::default() };
            let res = solver.solve_level(&gammas, 1, &p.psi, start, &mut Some(&mut trace))?;
            if trace.switch {
                log::info!("Picard ratio {:.3} ≥ 0.95; switching to continuation", trace.ratios[0]);
                diag.mode = SolveMode::Continuation;
                continuation(&solver, &margin, &mut diag)?
            } else {
                diag.mode = SolveMode::Picard;
                diag.levels = 1;
                diag.iterations = trace.iterations;
                diag.distances = trace.distances;
                diag.ratios = trace.ratios;
                res
            }
        }
        SolveMode::Continuation => {
            diag.mode = SolveMode::Continuation;
            continuation(&solver, &margin, &mut diag)?
        }
    };
    diag.m_residual = m_constraint_residual(&y, &z, ens);
    let (ym, zm) = solver.map(&y, &z)?;
    diag.equation_residual = m_distance(ens, p.eta, (&y, &z), (&ym, &zm));
    Ok(MSolution { y, z, diagnostics: diag })
}

/// Ladder `0, δ, 2δ, …, 1` with `δ = 0.9 / C_{η,λ}`.
pub fn continuation_ladder(c_eta_lambda: f64) -> Vec<f64> {
    let delta = 0.9 / c_eta_lambda;
    let levels = (1.0 / delta).ceil().max(1.0) as usize;
    (0..=levels).map(|k| (k as f64 * delta).min(1.0)).collect()
}

fn continuation(solver: &Solver, margin: &BsvieMargin, diag: &mut Diagnostics) -> Result<(Process, TwoParamProcess)> {
    let gammas = continuation_ladder(margin.c_eta_lambda);
    let levels = gammas.len() - 1;
    if levels > 6 {
        log::warn!("continuation with {levels} nested levels; cost grows geometrically in the level count");
    }
    let mut trace = Trace::default();
    let res = solver.solve_level(&gammas, levels, &solver.p.psi, None, &mut Some(&mut trace))?;
    diag.levels = levels;
    diag.iterations = trace.iterations;
    diag.distances = trace.distances;
    diag.ratios = trace.ratios;
    Ok(res)
}

/// Both sides of the a priori estimate `‖(Y, Z)‖ ≤ C_{η,λ} ‖ψ‖`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AprioriCheck {
    pub lhs: f64,
    #[serde(with = "crate::ext_real")]
    pub rhs: f64,
    pub ok: bool,
}

pub fn apriori_check(sol: &MSolution, p: &BsvieProblem, ens: &Ensemble, tol: f64) -> Result<AprioriCheck> {
    let c = p.margin()?.c_eta_lambda;
    let lhs = sol.norm(ens, p.eta);
    let rhs = c * ens.weighted_sq_norm(&p.psi, p.eta).1;
    Ok(AprioriCheck { lhs, rhs, ok: lhs <= rhs * (1.0 + tol) })
}

/// Declared decay of the free term, used to pick a truncation horizon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TailSpec {
    /// `ψ(t) = 0` for `t > end`.
    Compact { end: f64 },
    /// `E|ψ(t)|² ≤ amplitude² e^{-2 rate t}`.
    Exponential { amplitude: f64, rate: f64 },
}

impl TailSpec {
    /// `∫_T^∞ e^{2 eta t} E|ψ(t)|² dt`, `+∞` when it diverges.
    pub fn tail_sq(&self, t: f64, eta: f64) -> f64 {
        match *self {
            TailSpec::Compact { end } => {
                if t >= end {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            TailSpec::Exponential { amplitude, rate } => {
                let k = rate - eta;
                if k <= 0.0 {
                    f64::INFINITY
                } else {
                    amplitude * amplitude * (-2.0 * k * t).exp() / (2.0 * k)
                }
            }
        }
    }
}

/// Smallest positive grid node `T = k h` with `C_{η,λ} · tail(T) ≤ tol`.
pub fn truncate_horizon(tail: &TailSpec, eta: f64, c_eta_lambda: f64, h: f64, tol: f64) -> Result<f64> {
    truncate_horizon_with(|t| tail.tail_sq(t, eta), c_eta_lambda, h, tol)
}

pub fn truncate_horizon_with(tail_sq: impl Fn(f64) -> f64, c_eta_lambda: f64, h: f64, tol: f64) -> Result<f64> {
    if !(h > 0.0) || tol.is_nan() {
        return Err(Error::InvalidParameter("grid step must be positive and tol a number".into()));
    }
    const MAX_NODES: usize = 1 << 24;
    let bound = |k: usize| c_eta_lambda * tail_sq(k as f64 * h).max(0.0).sqrt();
    if bound(1) <= tol {
        return Ok(h);
    }
    // Exponential search, then bisection on the node index.
    let mut hi = 2;
    while !(bound(hi) <= tol) {
        if hi >= MAX_NODES {
            return Err(Error::InvalidParameter(
                "free-term tail does not decay below the tolerance; supply the horizon T explicitly".into(),
            ));
        }
        hi *= 2;
    }
    let mut lo = hi / 2;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if bound(mid) <= tol {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi as f64 * h)
}

/// `ψ_T(t_i) = E_T[ψ(t_i)]` for `t_i < T` and zero afterwards, on the same ensemble.
pub fn truncate_free_term(psi: &Process, ens: &Ensemble, horizon_node: usize) -> Process {
    let mut out = Process::zeros(psi.nodes(), psi.paths(), psi.dim());
    let (paths, m) = (psi.paths(), psi.dim());
    for i in 0..horizon_node.min(psi.nodes()) {
        for c in 0..m {
            let col = psi.component(i, c);
            let ce = ens.cond_expect(&col, horizon_node);
            for p in 0..paths {
                out.at_mut(i, p)[c] = ce[p];
            }
        }
    }
    out
}

/// Result of sampling the driver envelopes at random `(t, s)` with `s > t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriverEnvelopeCheck {
    pub samples: usize,
    pub violations: usize,
    pub worst_ratio: f64,
}

pub fn spot_check_driver(drv: &dyn Driver, grid: &TimeGrid, d: usize, samples: usize, seed: u64) -> DriverEnvelopeCheck {
    let m = drv.dim();
    let k = drv.kernels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut g1, mut g2) = (vec![0.0; m], vec![0.0; m]);
    let mut worst: f64 = 0.0;
    let mut violations = 0;
    let profile = |tau: f64| match drv.weighting() {
        Weighting::Plain => 1.0,
        Weighting::Factored(k) => k.eval(tau),
    };
    let rand_vec = |len: usize, rng: &mut ChaCha8Rng| -> Vec<f64> { (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect() };
    if grid.steps < 2 {
        return DriverEnvelopeCheck { samples: 0, violations: 0, worst_ratio: 0.0 };
    }
    for _ in 0..samples {
        let i = rng.gen_range(0..grid.steps - 1);
        let j = rng.gen_range(i + 1..grid.steps);
        let cell = Cell::new(grid, i, j, 0);
        let tau = cell.s - cell.t;
        let y = rand_vec(m, &mut rng);
        let z1 = rand_vec(m * d, &mut rng);
        let z2 = rand_vec(m * d, &mut rng);
        drv.eval(&cell, &y, &z1, &z2, &mut g1);
        for (slot, kern) in [(0, &k.y), (1, &k.z1), (2, &k.z2)] {
            let (mut y2, mut a2, mut b2) = (y.clone(), z1.clone(), z2.clone());
            let pert = match slot {
                0 => &mut y2,
                1 => &mut a2,
                _ => &mut b2,
            };
            let delta = rand_vec(pert.len(), &mut rng);
            pert.iter_mut().zip(&delta).for_each(|(a, b)| *a += b);
            let dn = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            drv.eval(&cell, &y2, &a2, &b2, &mut g2);
            let dg = profile(tau) * g1.iter().zip(&g2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let bound = kern.eval(tau) * dn;
            let ratio = if bound > 0.0 { dg / bound } else if dg > 1e-12 { f64::INFINITY } else { 0.0 };
            worst = worst.max(ratio);
            if ratio > 1.0 + 1e-9 {
                violations += 1;
            }
        }
    }
    DriverEnvelopeCheck { samples, violations, worst_ratio: worst }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(t: f64, n: usize) -> Ensemble {
        Ensemble::tree(t, n).unwrap()
    }

    #[test]
    fn trivial_examples() {
        let e = tree(1.0, 6);
        // Adapted free term: Y = ψ and Z vanishes on j ≥ i.
        let psi = Process::from_fn(&e, 1, |i, p, o| o[0] = e.w(i, p)[0].sin());
        let s = solve_trivial(&psi, &e).unwrap();
        assert!(s.y.sub(&psi).max_abs() < 1e-14);
        for i in 0..=6 {
            for j in i..6 {
                assert!(s.z.cell(i, j).iter().all(|v| v.abs() < 1e-13));
            }
        }
        // ψ ≡ W(T): Y = W, Z ≡ 1.
        let psi = Process::from_fn(&e, 1, |_, p, o| o[0] = e.w(6, p)[0]);
        let s = solve_trivial(&psi, &e).unwrap();
        for i in 0..=6 {
            for p in 0..e.paths() {
                assert!((s.y.at(i, p)[0] - e.w(i, p)[0]).abs() < 1e-13);
            }
        }
        assert!(s.z.data().iter().all(|v| (v - 1.0).abs() < 1e-13));
        assert!(s.diagnostics.m_residual < 1e-13);
        // ψ ≡ 0.
        let s = solve_trivial(&Process::zeros_on(&e, 1), &e).unwrap();
        assert_eq!(s.y.max_abs(), 0.0);
        assert!(s.z.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_driver_matches_trivial() {
        let e = tree(1.0, 5);
        let psi = Process::from_fn(&e, 1, |i, p, o| o[0] = e.w(5, p)[0] * (1.0 + i as f64));
        let pr = BsvieProblem::new(Arc::new(ZeroDriver(1)), psi.clone(), 1.0, 0.0);
        let a = solve_bsvie(&pr, &e, &BsvieOptions::default()).unwrap();
        let b = solve_trivial(&psi, &e).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.z, b.z);
    }

    /// `u(τ) = 1 + c ∫_0^τ e^{-λ r} u(τ - r) dr` by trapezoid on a fine grid.
    fn resolvent_oracle(c: f64, lambda: f64, tau: f64, n: usize) -> f64 {
        let dt = tau / n as f64;
        let mut u = vec![1.0; n + 1];
        for k in 1..=n {
            let mut s = 0.5 * (-lambda * k as f64 * dt).exp() * u[0];
            for r in 1..k {
                s += (-lambda * r as f64 * dt).exp() * u[k - r];
            }
            u[k] = (1.0 + c * dt * s) / (1.0 - 0.5 * c * dt);
        }
        u[n]
    }

    #[test]
    fn linear_driver_matches_deterministic_resolvent() {
        let (c, lambda, big_t) = (0.5, 1.0, 2.0);
        let mut errs = Vec::new();
        for n in [8, 16] {
            let e = tree(big_t, n);
            let psi = Process::constant(&e, &[1.0]);
            let pr = BsvieProblem::new(Arc::new(LinearDriver::scalar(c, 0.0, 0.0)), psi, lambda, 0.0);
            let s = solve_bsvie(&pr, &e, &BsvieOptions::default()).unwrap();
            assert_eq!(s.diagnostics.mode, SolveMode::Picard);
            let exact = resolvent_oracle(c, lambda, big_t, 4000);
            errs.push((s.y.at(0, 0)[0] - exact).abs());
        }
        assert!(errs[1] < errs[0] * 0.6, "{errs:?}");
        assert!(errs[1] < 0.1, "{errs:?}");
    }

    #[test]
    fn type_two_expectation_identity() {
        // Taking expectations removes the stochastic integral: E[Y_i] = E[ψ_i] + Σ_j e^{-λ(j-i)h} c E[Z(j,i)] h.
        let (n, c, lambda) = (6, 0.3, 1.0);
        let e = tree(1.0, n);
        let psi = Process::from_fn(&e, 1, |i, p, o| o[0] = e.w(n, p)[0] + 0.1 * i as f64);
        let drv = LinearDriver { m: 1, a: vec![0.0], b1: vec![vec![0.0]], b2: vec![vec![c]], c: vec![0.0] };
        let pr = BsvieProblem::new(Arc::new(drv), psi.clone(), lambda, 0.0);
        let s = solve_bsvie(&pr, &e, &BsvieOptions { tol: Some(1e-13), ..Default::default() }).unwrap();
        let h = e.h();
        for i in 0..=n {
            let ym = e.mean(&s.y.component(i, 0));
            let mut rhs = e.mean(&psi.component(i, 0));
            for j in i..n {
                let zm = e.mean(&(0..e.paths()).map(|p| s.z.at(j, i, p)[0]).collect::<Vec<_>>());
                rhs += (-lambda * (j - i) as f64 * h).exp() * c * zm * h;
            }
            assert!((ym - rhs).abs() < 1e-10, "node {i}: {ym} vs {rhs}");
        }
        assert!(s.diagnostics.m_residual < 1e-12);
        // Deterministic free term: Z vanishes and the mean is unchanged.
        let det = BsvieProblem::new(pr.driver.clone(), Process::constant(&e, &[2.0]), lambda, 0.0);
        let s = solve_bsvie(&det, &e, &BsvieOptions::default()).unwrap();
        assert!(s.y.data().iter().all(|v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn sweep_equals_picard_for_strict_driver() {
        let e = tree(1.0, 6);
        let psi = Process::from_fn(&e, 1, |_, p, o| o[0] = e.w(6, p)[0].powi(2));
        let mut drv = FnDriver::new(
            1,
            DriverKernels { y: Kernel::constant(0.4), z1: Kernel::Zero, z2: Kernel::constant(0.2) },
            |_, y, _, z2, out| out[0] = 0.4 * y[0] + 0.2 * z2[0],
        );
        drv.diagonal = false;
        drv.z1 = false;
        let pr = BsvieProblem::new(Arc::new(drv), psi, 1.0, 0.0);
        let sw = solve_bsvie(&pr, &e, &BsvieOptions::default()).unwrap();
        assert_eq!(sw.diagnostics.mode, SolveMode::Sweep);
        assert!(sw.diagnostics.equation_residual < 1e-14);
        let pc = solve_bsvie(&pr, &e, &BsvieOptions { mode: SolveMode::Picard, tol: Some(1e-12), ..Default::default() })
            .unwrap();
        assert!(sw.distance(&pc, &e, 0.0) < 1e-10);
    }

    #[test]
    fn continuation_agrees_with_picard() {
        let e = tree(1.0, 4);
        let psi = Process::from_fn(&e, 1, |i, p, o| o[0] = e.w(4, p)[0] + i as f64 * 0.1);
        let pr = BsvieProblem::new(Arc::new(LinearDriver::scalar(0.3, 0.1, 0.1)), psi, 2.0, 0.0);
        let opts = BsvieOptions { tol: Some(1e-11), ..Default::default() };
        let a = solve_bsvie(&pr, &e, &opts).unwrap();
        let b = solve_bsvie(&pr, &e, &BsvieOptions { mode: SolveMode::Continuation, ..opts }).unwrap();
        assert!(b.diagnostics.levels >= 2);
        assert!(a.distance(&b, &e, 0.0) < 1e-9);
    }

    #[test]
    fn refuses_inadmissible_and_detects_divergence() {
        let e = tree(1.0, 3);
        let pr = BsvieProblem::new(Arc::new(LinearDriver::scalar(2.0, 0.0, 0.0)), Process::constant(&e, &[1.0]), 1.0, 0.0);
        assert!(matches!(solve_bsvie(&pr, &e, &BsvieOptions::default()), Err(Error::Inadmissible(_))));

        // Envelope claims contraction but the driver blows up.
        let drv = FnDriver::new(
            1,
            DriverKernels { y: Kernel::constant(0.1), ..Default::default() },
            |_, y, _, _, out| out[0] = 50.0 * y[0],
        );
        let pr = BsvieProblem::new(Arc::new(drv), Process::constant(&e, &[1.0]), 1.0, 0.0);
        let r = solve_bsvie(&pr, &e, &BsvieOptions { mode: SolveMode::Picard, ..Default::default() });
        assert!(matches!(r, Err(Error::NonConvergence(_))), "{r:?}");
    }

    #[test]
    fn horizon_truncation_examples() {
        let c = 2.0;
        assert_eq!(truncate_horizon(&TailSpec::Compact { end: 1.0 }, 0.0, c, 0.125, 1e-6).unwrap(), 1.0);
        assert_eq!(truncate_horizon(&TailSpec::Compact { end: 1.0 }, 0.0, c, 0.125, f64::INFINITY).unwrap(), 0.125);
        // E|e^{-t}|² e^{-t} = e^{-3t}: C √(e^{-3T}/3) ≤ tol  ⇔  T ≥ -(2/3) ln(tol √3 / C).
        let tol = 1e-4;
        let h = 1e-3;
        let t = truncate_horizon(&TailSpec::Exponential { amplitude: 1.0, rate: 1.0 }, -0.5, c, h, tol).unwrap();
        let exact = -(2.0 / 3.0) * (tol * 3f64.sqrt() / c).ln();
        assert!(t >= exact - 1e-12 && t - exact < h + 1e-12, "{t} vs {exact}");
        assert!(truncate_horizon(&TailSpec::Exponential { amplitude: 1.0, rate: 0.1 }, 0.5, c, 0.1, 1e-3).is_err());
    }

    #[test]
    fn apriori_trivial_driver() {
        let e = tree(2.0, 6);
        let psi = Process::from_fn(&e, 1, |i, p, o| o[0] = e.w(6, p)[0] * (-(i as f64) * 0.3).exp());
        let pr = BsvieProblem::new(Arc::new(ZeroDriver(1)), psi, 1.0, 0.0);
        let s = solve_bsvie(&pr, &e, &BsvieOptions::default()).unwrap();
        let chk = apriori_check(&s, &pr, &e, 0.0).unwrap();
        assert!(chk.ok);
        assert!((chk.rhs / e.weighted_sq_norm(&pr.psi, 0.0).1 - std::f64::consts::SQRT_2).abs() < 1e-12);
        let zero = BsvieProblem::new(Arc::new(ZeroDriver(1)), Process::zeros_on(&e, 1), 1.0, 0.0);
        let s = solve_bsvie(&zero, &e, &BsvieOptions::default()).unwrap();
        assert_eq!(apriori_check(&s, &zero, &e, 0.0).unwrap().lhs, 0.0);
    }

    #[test]
    fn driver_envelope_spot_check() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let ok = spot_check_driver(&LinearDriver::scalar(0.3, 0.2, 0.1), &grid, 1, 100, 3);
        assert_eq!(ok.violations, 0);
        let lying = FnDriver::new(1, DriverKernels::default(), |_, y, _, _, o| o[0] = y[0]);
        assert!(spot_check_driver(&lying, &grid, 1, 100, 3).violations > 0);
    }
}
