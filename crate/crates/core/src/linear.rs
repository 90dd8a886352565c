//! Linear theory: fundamental solution, resolvent series, variation of constants,
//! forward/backward duality and the reduction of a solved equation to a BSDE.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::bsvie::{solve_bsvie, solve_trivial, BsvieOptions, BsvieProblem, Driver, MSolution};
use crate::error::{Error, Result};
use crate::kernel::{critical_weight, DriverKernels, Kernel};
use crate::stochastic::{Ensemble, Process, TwoParamProcess};
use crate::svie::{integrate, Cell, ConstMatrix, LinearSvie, MatrixField, Weighting};

/// Linear backward equation with driver `A(t,s) y + Σ_k B_k(t,s) z1^k`.
#[derive(Clone)]
pub struct LinearBsvie {
    pub m: usize,
    pub a: Arc<dyn MatrixField>,
    /// One coefficient per noise coordinate.
    pub b: Vec<Arc<dyn MatrixField>>,
    pub ka: Kernel,
    pub kb: Kernel,
    pub lambda: f64,
    pub eta: f64,
}

impl LinearBsvie {
    /// Scalar constant coefficients with their exact constant envelopes.
    pub fn scalar(a: f64, b: f64, lambda: f64, eta: f64) -> Self {
        let env = |v: f64| if v == 0.0 { Kernel::Zero } else { Kernel::constant(v.abs()) };
        LinearBsvie {
            m: 1,
            a: Arc::new(ConstMatrix(vec![a])),
            b: vec![Arc::new(ConstMatrix(vec![b]))],
            ka: env(a),
            kb: env(b),
            lambda,
            eta,
        }
    }

    /// `[K_A]_1(η+λ) / (1 - [K_B]_2(λ))`, the geometric rate of the resolvent series.
    pub fn series_ratio(&self) -> Result<f64> {
        let kb = self.kb.weighted_norm(2, self.lambda)?;
        if kb >= 1.0 {
            return Ok(f64::INFINITY);
        }
        Ok(self.ka.weighted_norm(1, self.eta + self.lambda)? / (1.0 - kb))
    }

    pub fn check(&self, ens: &Ensemble) -> Result<()> {
        self.check_dims(ens)?;
        let r = self.series_ratio()?;
        if !(r < 1.0) {
            return Err(Error::Inadmissible(format!(
                "(eta, lambda) = ({}, {}) is outside the linear domain: series ratio {r}",
                self.eta, self.lambda
            )));
        }
        Ok(())
    }

    fn check_dims(&self, ens: &Ensemble) -> Result<()> {
        if self.b.len() != ens.noise_dim() {
            return Err(Error::Dimension(format!(
                "{} diffusion coefficients for {} noise coordinates",
                self.b.len(),
                ens.noise_dim()
            )));
        }
        Ok(())
    }

    pub fn driver(&self) -> LinearBsvieDriver {
        LinearBsvieDriver(self.clone())
    }
}

/// The linear equation viewed as a generic driver.
#[derive(Clone)]
pub struct LinearBsvieDriver(pub LinearBsvie);

impl Driver for LinearBsvieDriver {
    fn dim(&self) -> usize {
        self.0.m
    }
    fn kernels(&self) -> DriverKernels {
        DriverKernels { y: self.0.ka, z1: self.0.kb, z2: Kernel::Zero }
    }
    fn eval(&self, c: &Cell, y: &[f64], z1: &[f64], _: &[f64], out: &mut [f64]) {
        let m = self.0.m;
        let d = self.0.b.len();
        let mut mat = vec![0.0; m * m];
        self.0.a.eval(c, &mut mat);
        for r in 0..m {
            out[r] = (0..m).map(|q| mat[r * m + q] * y[q]).sum();
        }
        for (k, bk) in self.0.b.iter().enumerate() {
            bk.eval(c, &mut mat);
            for r in 0..m {
                out[r] += (0..m).map(|q| mat[r * m + q] * z1[q * d + k]).sum::<f64>();
            }
        }
    }
    fn uses_z1(&self) -> bool {
        !self.0.b.is_empty()
    }
}

fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize) {
    for r in 0..m {
        for c in 0..m {
            out[r * m + c] = (0..m).map(|q| a[r * m + q] * b[q * m + c]).sum();
        }
    }
}

fn identity(m: usize) -> Vec<f64> {
    let mut v = vec![0.0; m * m];
    for r in 0..m {
        v[r * m + r] = 1.0;
    }
    v
}

/// Writes `Φ(t_i, s_j)`, `j = i..=N`, for one row and one path into `out[(j - i) * m²..]`.
fn phi_row_path(spec: &LinearBsvie, ens: &Ensemble, i: usize, p: usize, out: &mut [f64]) {
    let (m, n, h) = (spec.m, ens.steps(), ens.h());
    let grid = *ens.grid();
    let mm = m * m;
    out[..mm].copy_from_slice(&identity(m));
    let mut bmat = vec![0.0; mm];
    let mut prod = vec![0.0; mm];
    for j in i..n {
        let (done, rest) = out.split_at_mut((j - i + 1) * mm);
        let cur = &done[(j - i) * mm..];
        let next = &mut rest[..mm];
        next.copy_from_slice(cur);
        let disc = (-spec.lambda * (j - i) as f64 * h).exp();
        let dw = ens.dw(j, p);
        let cell = Cell::new(&grid, i, j, p);
        for (k, bk) in spec.b.iter().enumerate() {
            bk.eval(&cell, &mut bmat);
            matmul(cur, &bmat, &mut prod, m);
            for (x, v) in next.iter_mut().zip(&prod) {
                *x += disc * v * dw[k];
            }
        }
    }
}

/// Euler recursion for `Φ(t_i, s_j)` on `j ≥ i`; entries with `j < i` are zero.
pub fn fundamental_phi(spec: &LinearBsvie, ens: &Ensemble) -> Result<TwoParamProcess> {
    spec.check_dims(ens)?;
    let (m, n, paths) = (spec.m, ens.steps(), ens.paths());
    let mm = m * m;
    let mut phi = TwoParamProcess::zeros(ens, n + 1, n + 1, m, m)?;
    phi.rows_mut().collect::<Vec<_>>().into_par_iter().enumerate().for_each(|(i, row)| {
        let mut buf = vec![0.0; (n - i + 1) * mm];
        for p in 0..paths {
            phi_row_path(spec, ens, i, p, &mut buf);
            for j in i..=n {
                let o = (j * paths + p) * mm;
                row[o..o + mm].copy_from_slice(&buf[(j - i) * mm..(j - i + 1) * mm]);
            }
        }
    });
    Ok(phi)
}

/// `Φ(t_i, T)` for every node, as a process with `m²` components.
pub fn phi_terminal(spec: &LinearBsvie, ens: &Ensemble) -> Result<Process> {
    spec.check_dims(ens)?;
    let (m, n, paths) = (spec.m, ens.steps(), ens.paths());
    let mm = m * m;
    let mut out = Process::zeros_on(ens, mm);
    out.data_mut().par_chunks_mut(paths * mm).enumerate().for_each(|(i, node)| {
        let mut buf = vec![0.0; (n - i + 1) * mm];
        for p in 0..paths {
            phi_row_path(spec, ens, i, p, &mut buf);
            node[p * mm..(p + 1) * mm].copy_from_slice(&buf[(n - i) * mm..]);
        }
    });
    Ok(out)
}

fn op_norm(a: &[f64], m: usize) -> f64 {
    if m == 1 {
        return a[0].abs();
    }
    DMatrix::from_row_slice(m, m, a).singular_values().max()
}

/// Largest `E_{t_i}[|Φ(t_i, s_j)|²_op]^{1/2}` over the grid, and the bound `1 / (1 - [K_B]_2(λ))`.
pub fn phi_opnorm_bound(spec: &LinearBsvie, phi: &TwoParamProcess, ens: &Ensemble) -> Result<(f64, f64)> {
    let (m, n, paths) = (spec.m, ens.steps(), ens.paths());
    let bound = 1.0 / (1.0 - spec.kb.weighted_norm(2, spec.lambda)?);
    let mut worst: f64 = 0.0;
    let mut col = vec![0.0; paths];
    for i in 0..=n {
        for j in i..=n {
            for (p, c) in col.iter_mut().enumerate() {
                *c = op_norm(phi.at(i, j, p), m).powi(2);
            }
            let ce = ens.cond_expect(&col, i);
            worst = ce.iter().fold(worst, |w, v| w.max(v.sqrt()));
        }
    }
    Ok((worst, bound))
}

#[derive(Clone, Debug)]
pub struct Resolvent {
    /// `R(t_i, s_j)` for `j ≥ i`, `j < N`.
    pub r: TwoParamProcess,
    /// Weighted norm of each series term `Ξ_k`.
    pub term_norms: Vec<f64>,
    /// Successive norm ratios.
    pub ratios: Vec<f64>,
    /// `[K_A]_1(η+λ) / (1 - [K_B]_2(λ))`.
    pub ratio_bound: f64,
}

impl Resolvent {
    pub fn max_ratio(&self) -> f64 {
        self.ratios.iter().cloned().fold(0.0, f64::max)
    }
}

/// `max_i Σ_{j ≥ i} e^{-(η+λ)(s_j - t_i)} E[|Ξ(i,j)|²]^{1/2} h`.
fn term_norm(xi: &TwoParamProcess, ens: &Ensemble, rate: f64) -> f64 {
    let (n, h) = (ens.steps(), ens.h());
    (0..=n)
        .map(|i| {
            (i..n)
                .map(|j| {
                    let ms = xi.cell(i, j).iter().map(|v| v * v).sum::<f64>() / ens.paths() as f64;
                    (-rate * (j - i) as f64 * h).exp() * ms.sqrt() * h
                })
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

/// Resolvent series `R = Σ_k Ξ_k`, `Ξ_1 = Φ A`, `Ξ_{k+1}(t,s) = Σ_{t ≤ r < s} Ξ_k(t,r) Ξ_1(r,s) h`.
///
/// Stops once the last term norm falls below `series_tol` times the norm of `Ξ_1`.
pub fn resolvent(spec: &LinearBsvie, phi: &TwoParamProcess, ens: &Ensemble, series_tol: f64) -> Result<Resolvent> {
    spec.check(ens)?;
    let ratio_bound = spec.series_ratio()?;
    let (m, n, paths, h) = (spec.m, ens.steps(), ens.paths(), ens.h());
    let mm = m * m;
    let grid = *ens.grid();
    let rate = spec.eta + spec.lambda;

    let mut xi1 = TwoParamProcess::zeros(ens, n + 1, n, m, m)?;
    xi1.rows_mut().collect::<Vec<_>>().into_par_iter().enumerate().for_each(|(i, row)| {
        let mut a = vec![0.0; mm];
        for j in i..n {
            for p in 0..paths {
                spec.a.eval(&Cell::new(&grid, i, j, p), &mut a);
                let o = (j * paths + p) * mm;
                matmul(phi.at(i, j, p), &a, &mut row[o..o + mm], m);
            }
        }
    });

    let first = term_norm(&xi1, ens, rate);
    let mut term_norms = vec![first];
    let mut ratios = Vec::new();
    let mut r = xi1.clone();
    if first == 0.0 {
        return Ok(Resolvent { r, term_norms, ratios, ratio_bound });
    }
    let mut cur = xi1.clone();
    const MAX_TERMS: usize = 500;
    while term_norms.len() < MAX_TERMS {
        let mut next = TwoParamProcess::zeros(ens, n + 1, n, m, m)?;
        next.rows_mut().collect::<Vec<_>>().into_par_iter().enumerate().for_each(|(i, row)| {
            let mut prod = vec![0.0; mm];
            for j in (i + 1)..n {
                for p in 0..paths {
                    let o = (j * paths + p) * mm;
                    for rr in i..j {
                        matmul(cur.at(i, rr, p), xi1.at(rr, j, p), &mut prod, m);
                        for (x, v) in row[o..o + mm].iter_mut().zip(&prod) {
                            *x += v * h;
                        }
                    }
                }
            }
        });
        let nn = term_norm(&next, ens, rate);
        ratios.push(nn / term_norms.last().unwrap());
        term_norms.push(nn);
        r.data_mut().iter_mut().zip(next.data()).for_each(|(a, b)| *a += b);
        cur = next;
        if nn < series_tol * first {
            return Ok(Resolvent { r, term_norms, ratios, ratio_bound });
        }
    }
    Err(Error::NonConvergence(format!("resolvent series did not reach tolerance within {MAX_TERMS} terms")))
}

/// Largest path-RMS of `R - Ξ_1 - R ⋆ Ξ_1` with the same discrete composition.
pub fn resolvent_identity_residual(spec: &LinearBsvie, phi: &TwoParamProcess, res: &Resolvent, ens: &Ensemble) -> f64 {
    let (m, n, paths, h) = (spec.m, ens.steps(), ens.paths(), ens.h());
    let mm = m * m;
    let grid = *ens.grid();
    let mut a = vec![0.0; mm];
    let mut x1 = vec![0.0; mm];
    let mut prod = vec![0.0; mm];
    let mut worst: f64 = 0.0;
    let xi1 = |r: usize, j: usize, p: usize, a: &mut [f64], out: &mut [f64]| {
        spec.a.eval(&Cell::new(&grid, r, j, p), a);
        matmul(phi.at(r, j, p), a, out, m);
    };
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for p in 0..paths {
                let mut resid = res.r.at(i, j, p).to_vec();
                xi1(i, j, p, &mut a, &mut x1);
                resid.iter_mut().zip(&x1).for_each(|(x, v)| *x -= v);
                for r in i..j {
                    xi1(r, j, p, &mut a, &mut x1);
                    matmul(res.r.at(i, r, p), &x1, &mut prod, m);
                    resid.iter_mut().zip(&prod).for_each(|(x, v)| *x -= v * h);
                }
                acc += resid.iter().map(|v| v * v).sum::<f64>();
            }
            worst = worst.max((acc / paths as f64).sqrt());
        }
    }
    worst
}

#[derive(Clone, Debug)]
pub struct VocResult {
    pub y: Process,
    /// Martingale representation of the formula's payoff; not given by the formula itself.
    pub z_derived: TwoParamProcess,
    pub resolvent: Resolvent,
    /// `‖Y_formula - Y_solver‖` with weight `e^{2 eta t}`, when cross-validation was requested.
    pub gap: Option<f64>,
    pub solver: Option<MSolution>,
}

/// `Y(t_i) = E_i[Φ(t_i,T) ψ_i + Σ_{j ≥ i} e^{-λ(s_j - t_i)} R(t_i,s_j) Φ(s_j,T) ψ_j h]`.
pub fn variation_of_constants(
    spec: &LinearBsvie,
    psi: &Process,
    ens: &Ensemble,
    series_tol: f64,
    cross_check: Option<&BsvieOptions>,
) -> Result<VocResult> {
    spec.check(ens)?;
    let (m, n, paths, h) = (spec.m, ens.steps(), ens.paths(), ens.h());
    if psi.dim() != m || psi.nodes() != n + 1 || psi.paths() != paths {
        return Err(Error::Dimension("free term shape does not match the ensemble and dimension".into()));
    }
    let mm = m * m;
    let phi = fundamental_phi(spec, ens)?;
    let res = resolvent(spec, &phi, ens, series_tol)?;

    // ζ_j = Φ(s_j, T) ψ_j.
    let mut zeta = Process::zeros_on(ens, m);
    for j in 0..=n {
        for p in 0..paths {
            let f = phi.at(j, n, p);
            let v = psi.at(j, p);
            let out = zeta.at_mut(j, p);
            for r in 0..m {
                out[r] = (0..m).map(|q| f[r * m + q] * v[q]).sum();
            }
        }
    }
    let mut payoff = zeta.clone();
    payoff.data_mut().par_chunks_mut(paths * m).enumerate().for_each(|(i, node)| {
        for j in i..n {
            let disc = (-spec.lambda * (j - i) as f64 * h).exp() * h;
            for p in 0..paths {
                let rr = res.r.at(i, j, p);
                let z = zeta.at(j, p);
                for r in 0..m {
                    node[p * m + r] += disc * (0..m).map(|q| rr[r * m + q] * z[q]).sum::<f64>();
                }
            }
        }
    });
    let _ = mm;
    let trivial = solve_trivial(&payoff, ens)?;
    let (gap, solver) = match cross_check {
        Some(opts) => {
            let prob = BsvieProblem::new(Arc::new(spec.driver()), psi.clone(), spec.lambda, spec.eta);
            let sol = solve_bsvie(&prob, ens, opts)?;
            let gap = ens.weighted_sq_norm(&trivial.y.sub(&sol.y), spec.eta).1;
            (Some(gap), Some(sol))
        }
        None => (None, None),
    };
    Ok(VocResult { y: trivial.y, z_derived: trivial.z, resolvent: res, gap, solver })
}

/// Forward linear equation with its declared envelopes.
#[derive(Clone)]
pub struct LinearSvieSpec {
    pub eq: LinearSvie,
    pub kc: Kernel,
    pub kd: Kernel,
}

/// Adjoint driver `C(s,t)ᵀ y + Σ_k D_k(s,t)ᵀ z2^k`.
#[derive(Clone)]
pub struct AdjointDriver {
    spec: LinearSvieSpec,
}

impl AdjointDriver {
    pub fn new(spec: LinearSvieSpec) -> Self {
        AdjointDriver { spec }
    }
}

fn swap(c: &Cell) -> Cell {
    Cell { i: c.j, j: c.i, t: c.s, s: c.t, path: c.path }
}

impl Driver for AdjointDriver {
    fn dim(&self) -> usize {
        self.spec.eq.n
    }
    fn kernels(&self) -> DriverKernels {
        DriverKernels { y: self.spec.kc, z1: Kernel::Zero, z2: self.spec.kd }
    }
    fn eval(&self, c: &Cell, y: &[f64], _: &[f64], z2: &[f64], out: &mut [f64]) {
        let n = self.spec.eq.n;
        let d = self.spec.eq.d.len();
        let sc = swap(c);
        let mut mat = vec![0.0; n * n];
        self.spec.eq.c.eval(&sc, &mut mat);
        for r in 0..n {
            out[r] = (0..n).map(|q| mat[q * n + r] * y[q]).sum();
        }
        for (k, dk) in self.spec.eq.d.iter().enumerate() {
            dk.eval(&sc, &mut mat);
            for r in 0..n {
                out[r] += (0..n).map(|q| mat[q * n + r] * z2[q * d + k]).sum::<f64>();
            }
        }
    }
    fn uses_z1(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug)]
pub struct DualityReport {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    pub x: Process,
    pub solution: MSolution,
}

/// `E Σ e^{-λ t_i} ⟨a_i, b_i⟩ h` over nodes `0..N`.
pub fn discounted_pairing(a: &Process, b: &Process, lambda: f64, ens: &Ensemble) -> f64 {
    let h = ens.h();
    (0..ens.steps())
        .map(|i| {
            let dot: f64 = a.node(i).iter().zip(b.node(i)).map(|(x, y)| x * y).sum();
            (-lambda * ens.t(i)).exp() * dot / ens.paths() as f64 * h
        })
        .sum()
}

/// Compares `E ∫ e^{-λt} ⟨ψ, X⟩` with `E ∫ e^{-λt} ⟨Y, φ⟩` for the forward solution `X` and the
/// adjoint solution `Y`.
#[allow(clippy::too_many_arguments)]
pub fn duality_check(
    fwd: &LinearSvieSpec,
    phi: &Process,
    psi: &Process,
    mu: f64,
    eta: f64,
    lambda: f64,
    ens: &Ensemble,
    opts: &BsvieOptions,
) -> Result<DualityReport> {
    if fwd.eq.drift_weighting != Weighting::Plain || fwd.eq.diffusion_weighting != Weighting::Plain {
        return Err(Error::InvalidParameter("duality check needs plain coefficient weights".into()));
    }
    let rho = critical_weight(&fwd.kc, &fwd.kd)?.rho;
    if !(mu > rho) || !(eta + lambda >= mu) {
        return Err(Error::Inadmissible(format!(
            "duality needs eta + lambda ≥ mu > rho_CD; got eta + lambda = {}, mu = {mu}, rho_CD = {rho}",
            eta + lambda
        )));
    }
    let x = integrate(&fwd.eq, phi, ens, None)?;
    let prob = BsvieProblem::new(Arc::new(AdjointDriver::new(fwd.clone())), psi.clone(), lambda, eta);
    let solution = solve_bsvie(&prob, ens, opts)?;
    let lhs = discounted_pairing(psi, &x, lambda, ens);
    let rhs = discounted_pairing(&solution.y, phi, lambda, ens);
    Ok(DualityReport { lhs, rhs, gap: (lhs - rhs).abs(), x, solution })
}

#[derive(Clone, Debug)]
pub struct BsdeReduction {
    /// `E_i[Σ_{j ≥ i} e^{-λ(s_j - t_i)} Y_j h]`.
    pub cy: Process,
    /// `Σ_{j > i} e^{-λ(s_j - t_i)} Z(s_j, t_i) h`, `m·d` components.
    pub cz: Process,
    /// Path-wise `cY_i - cY_{i+1} - (Y_i - λ cY_i) h + cZ_i ΔW_i` for `i < N`.
    pub residual: Process,
    /// Residual norm with weight `e^{-2 mu t}`.
    pub residual_norm: f64,
}

pub fn bsvie_to_bsde(sol: &MSolution, lambda: f64, mu: f64, ens: &Ensemble) -> Result<BsdeReduction> {
    if !(mu > 0.0 && lambda >= 2.0 * mu) {
        return Err(Error::Inadmissible(format!("reduction needs lambda ≥ 2 mu > 0; got lambda = {lambda}, mu = {mu}")));
    }
    let (n, paths, h) = (ens.steps(), ens.paths(), ens.h());
    let m = sol.y.dim();
    let d = ens.noise_dim();
    let mut cy = Process::zeros_on(ens, m);
    let mut cz = Process::zeros_on(ens, m * d);
    for i in 0..=n {
        for c in 0..m {
            let mut acc = vec![0.0; paths];
            for j in i..n {
                let disc = (-lambda * (j - i) as f64 * h).exp() * h;
                for (p, a) in acc.iter_mut().enumerate() {
                    *a += disc * sol.y.at(j, p)[c];
                }
            }
            let ce = ens.cond_expect(&acc, i);
            for p in 0..paths {
                cy.at_mut(i, p)[c] = ce[p];
            }
        }
        if i < n {
            for j in (i + 1)..n {
                let disc = (-lambda * (j - i) as f64 * h).exp() * h;
                for p in 0..paths {
                    let z = sol.z.at(j, i, p);
                    cz.at_mut(i, p).iter_mut().zip(z).for_each(|(a, b)| *a += disc * b);
                }
            }
        }
    }
    let mut residual = Process::zeros_on(ens, m);
    for i in 0..n {
        for p in 0..paths {
            let dw = ens.dw(i, p).to_vec();
            for c in 0..m {
                let mut r = cy.at(i, p)[c] - cy.at(i + 1, p)[c] - (sol.y.at(i, p)[c] - lambda * cy.at(i, p)[c]) * h;
                for k in 0..d {
                    r += cz.at(i, p)[c * d + k] * dw[k];
                }
                residual.at_mut(i, p)[c] = r;
            }
        }
    }
    let residual_norm = ens.weighted_sq_norm(&residual, -mu).1;
    Ok(BsdeReduction { cy, cz, residual, residual_norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsvie::ZeroDriver;

    #[test]
    fn phi_examples() {
        let e = Ensemble::tree(1.0, 6).unwrap();
        let id = LinearBsvie::scalar(0.2, 0.0, 1.0, 0.0);
        let phi = fundamental_phi(&id, &e).unwrap();
        for i in 0..=6 {
            for j in i..=6 {
                assert!(phi.cell(i, j).iter().all(|v| *v == 1.0));
            }
        }
        let spec = LinearBsvie::scalar(0.0, 0.5, 0.0, 0.0);
        let phi = fundamental_phi(&spec, &e).unwrap();
        for i in 0..=6 {
            for j in i..6 {
                // Martingale in s: averaging over the next increment returns the current value.
                let next: Vec<f64> = (0..e.paths()).map(|p| phi.at(i, j + 1, p)[0]).collect();
                let ce = e.cond_expect(&next, j);
                for p in 0..e.paths() {
                    assert!((ce[p] - phi.at(i, j, p)[0]).abs() < 1e-13);
                }
            }
            let term: Vec<f64> = (0..e.paths()).map(|p| phi.at(i, 6, p)[0]).collect();
            assert!((e.mean(&term) - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn scalar_resolvent_closed_form() {
        let a = 0.5;
        let mut errs = Vec::new();
        for n in [4, 8] {
            let e = Ensemble::tree(2.0, n).unwrap();
            let spec = LinearBsvie::scalar(a, 0.0, 1.0, 0.0);
            let phi = fundamental_phi(&spec, &e).unwrap();
            let res = resolvent(&spec, &phi, &e, 1e-12).unwrap();
            let mut err: f64 = 0.0;
            for t in [0.5, 1.0, 1.5] {
                let j = (t / e.h()).round() as usize;
                err = err.max((res.r.at(0, j, 0)[0] - a * (a * t).exp()).abs());
            }
            errs.push(err);
            assert!(res.max_ratio() <= 1.1 * res.ratio_bound);
            assert!(resolvent_identity_residual(&spec, &phi, &res, &e) < 1e-10);
        }
        assert!(errs[1] < 0.6 * errs[0], "{errs:?}");

        let e = Ensemble::tree(1.0, 4).unwrap();
        let zero = LinearBsvie::scalar(0.0, 0.3, 1.0, 0.0);
        let phi = fundamental_phi(&zero, &e).unwrap();
        assert!(resolvent(&zero, &phi, &e, 1e-10).unwrap().r.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn voc_deterministic_closed_form() {
        let (a, lambda, t_end) = (0.5, 1.0, 2.0);
        let e = Ensemble::tree(t_end, 10).unwrap();
        let spec = LinearBsvie::scalar(a, 0.0, lambda, 0.0);
        let psi = Process::constant(&e, &[1.0]);
        let r = variation_of_constants(&spec, &psi, &e, 1e-12, Some(&BsvieOptions::default())).unwrap();
        for i in 0..10 {
            let tau = t_end - e.t(i);
            let exact = 1.0 + a * (((a - lambda) * tau).exp() - 1.0) / (a - lambda);
            assert!((r.y.at(i, 0)[0] - exact).abs() <= 3.0 * e.h(), "node {i}");
        }
        assert!(r.gap.unwrap() < 3.0 * e.h());
    }

    #[test]
    fn voc_without_coefficients_is_conditional_expectation() {
        let e = Ensemble::tree(1.0, 5).unwrap();
        let spec = LinearBsvie::scalar(0.0, 0.0, 1.0, 0.0);
        let psi = Process::from_fn(&e, 1, |i, p, o| o[0] = e.w(5, p)[0] * i as f64);
        let r = variation_of_constants(&spec, &psi, &e, 1e-12, None).unwrap();
        let t = solve_trivial(&psi, &e).unwrap();
        assert!(r.y.sub(&t.y).max_abs() < 1e-14);
    }

    #[test]
    fn duality_trivial_cases() {
        let e = Ensemble::tree(1.0, 5).unwrap();
        let fwd = LinearSvieSpec { eq: LinearSvie::scalar(0.0, 0.0), kc: Kernel::Zero, kd: Kernel::Zero };
        let phi = Process::from_fn(&e, 1, |i, p, o| o[0] = 1.0 + e.w(i, p)[0]);
        let psi = Process::from_fn(&e, 1, |_, p, o| o[0] = e.w(5, p)[0].powi(2));
        let r = duality_check(&fwd, &phi, &psi, 0.5, 0.0, 1.0, &e, &BsvieOptions::default()).unwrap();
        assert!(r.gap < 1e-14, "{}", r.gap);
        let r = duality_check(&fwd, &phi, &Process::zeros_on(&e, 1), 0.5, 0.0, 1.0, &e, &BsvieOptions::default()).unwrap();
        assert_eq!((r.lhs, r.rhs), (0.0, 0.0));
        assert!(duality_check(&fwd, &phi, &psi, 0.5, 0.0, 0.2, &e, &BsvieOptions::default()).is_err());
    }

    #[test]
    fn bsde_reduction_constant_y() {
        let lambda = 1.0;
        let e = Ensemble::tree(2.0, 8).unwrap();
        let y = Process::constant(&e, &[1.0]);
        let sol = MSolution {
            y,
            z: TwoParamProcess::zeros(&e, 9, 8, 1, 1).unwrap(),
            diagnostics: Default::default(),
        };
        let r = bsvie_to_bsde(&sol, lambda, 0.25, &e).unwrap();
        for i in 0..=8 {
            let exact = (1.0 - (-lambda * (2.0 - e.t(i))).exp()) / lambda;
            assert!((r.cy.at(i, 0)[0] - exact).abs() <= 2.0 * e.h());
        }
        assert!(r.cz.max_abs() == 0.0);
        let zero = solve_bsvie(
            &BsvieProblem::new(Arc::new(ZeroDriver(1)), Process::zeros_on(&e, 1), 1.0, 0.0),
            &e,
            &BsvieOptions::default(),
        )
        .unwrap();
        let r = bsvie_to_bsde(&zero, lambda, 0.25, &e).unwrap();
        assert_eq!(r.cy.max_abs() + r.cz.max_abs(), 0.0);
        assert!(bsvie_to_bsde(&zero, 0.4, 0.25, &e).is_err());
    }
}
