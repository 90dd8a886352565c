//! Forward stochastic Volterra equations
//! `X(t) = φ(t) + ∫_0^t b(t,s,X(s),u(s)) ds + ∫_0^t σ(t,s,X(s),u(s)) dW(s)`
//! solved by explicit left-point product integration.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{svie_margin, svie_stability_constant, Kernel};
use crate::stochastic::{Ensemble, Process, TimeGrid};

/// How a coefficient's time profile is integrated over a grid cell.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", content = "kernel", rename_all = "snake_case")]
pub enum Weighting {
    /// `b(t,s,·) = K(t-s) · b̃(t,s,·)`: the cell weight is the exact integral of `K`.
    Factored(Kernel),
    /// Rectangle rule with weight `h`.
    #[default]
    Plain,
}

/// Grid cell `(t_i, s_j)` on one path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub i: usize,
    pub j: usize,
    pub t: f64,
    pub s: f64,
    pub path: usize,
}

impl Cell {
    pub fn new(grid: &TimeGrid, i: usize, j: usize, path: usize) -> Self {
        Cell { i, j, t: grid.t(i), s: grid.t(j), path }
    }
}

/// Drift and diffusion of a (possibly controlled) Volterra equation.
///
/// Vectors are row-major: the diffusion is `n × d` (`[r * d + k]`), drift Jacobians are
/// `n × n` and `n × l`, diffusion Jacobians are `d` stacked blocks (`[(k * n + r) * n + c]`).
/// With [`Weighting::Factored`] the callbacks return the smooth factor only.
pub trait Coefficients: Send + Sync {
    fn state_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn control_dim(&self) -> usize {
        0
    }
    fn drift_weighting(&self) -> Weighting {
        Weighting::Plain
    }
    fn diffusion_weighting(&self) -> Weighting {
        Weighting::Plain
    }
    fn drift(&self, c: &Cell, x: &[f64], u: &[f64], out: &mut [f64]);
    fn diffusion(&self, c: &Cell, x: &[f64], u: &[f64], out: &mut [f64]);

    fn drift_jacobian(&self, c: &Cell, x: &[f64], u: &[f64], dx: &mut [f64], du: &mut [f64]) {
        let n = self.state_dim();
        fd_jacobian(n, x, u, dx, du, |x, u, out| self.drift(c, x, u, out));
    }

    fn diffusion_jacobian(&self, c: &Cell, x: &[f64], u: &[f64], dx: &mut [f64], du: &mut [f64]) {
        let (n, d, l) = (self.state_dim(), self.noise_dim(), self.control_dim());
        let mut jx = vec![0.0; n * d * n];
        let mut ju = vec![0.0; n * d * l];
        fd_jacobian(n * d, x, u, &mut jx, &mut ju, |x, u, out| self.diffusion(c, x, u, out));
        // Reorder from [(r * d + k) * ·] to [(k * n + r) * ·].
        for r in 0..n {
            for k in 0..d {
                let src = r * d + k;
                let dst = k * n + r;
                dx[dst * n..(dst + 1) * n].copy_from_slice(&jx[src * n..(src + 1) * n]);
                du[dst * l..(dst + 1) * l].copy_from_slice(&ju[src * l..(src + 1) * l]);
            }
        }
    }
}

/// Central-difference Jacobian of `f: (x, u) -> R^m`.
pub(crate) fn fd_jacobian(
    m: usize,
    x: &[f64],
    u: &[f64],
    dx: &mut [f64],
    du: &mut [f64],
    f: impl Fn(&[f64], &[f64], &mut [f64]),
) {
    let (n, l) = (x.len(), u.len());
    let (mut fp, mut fm) = (vec![0.0; m], vec![0.0; m]);
    let mut xv = x.to_vec();
    for c in 0..n {
        let e = 1e-6 * (1.0 + x[c].abs());
        xv[c] = x[c] + e;
        f(&xv, u, &mut fp);
        xv[c] = x[c] - e;
        f(&xv, u, &mut fm);
        xv[c] = x[c];
        for r in 0..m {
            dx[r * n + c] = (fp[r] - fm[r]) / (2.0 * e);
        }
    }
    let mut uv = u.to_vec();
    for c in 0..l {
        let e = 1e-6 * (1.0 + u[c].abs());
        uv[c] = u[c] + e;
        f(x, &uv, &mut fp);
        uv[c] = u[c] - e;
        f(x, &uv, &mut fm);
        uv[c] = u[c];
        for r in 0..m {
            du[r * l + c] = (fp[r] - fm[r]) / (2.0 * e);
        }
    }
}

/// Product-integration weights indexed by the lag `i - j ≥ 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellWeights {
    h: f64,
    drift: Vec<f64>,
    diffusion: Vec<f64>,
}

impl CellWeights {
    pub fn new(grid: &TimeGrid, drift: &Weighting, diffusion: &Weighting) -> Self {
        let h = grid.h();
        let lags = grid.steps + 1;
        let integral = |w: &Weighting, lag: usize| match w {
            Weighting::Plain => h,
            Weighting::Factored(k) => k.integral((lag - 1) as f64 * h, lag as f64 * h),
        };
        let mut dr = vec![0.0; lags];
        let mut df = vec![0.0; lags];
        for lag in 1..lags {
            dr[lag] = integral(drift, lag);
            df[lag] = integral(diffusion, lag) / h;
        }
        CellWeights { h, drift: dr, diffusion: df }
    }

    pub fn for_coefficients(grid: &TimeGrid, c: &dyn Coefficients) -> Self {
        CellWeights::new(grid, &c.drift_weighting(), &c.diffusion_weighting())
    }

    /// Weight of the drift cell `[s_j, s_{j+1}]` at node `t_i` (zero unless `j < i`).
    pub fn drift(&self, i: usize, j: usize) -> f64 {
        if j < i {
            self.drift[i - j]
        } else {
            0.0
        }
    }

    /// Multiplier of `σ̃ ΔW(s_j)` at node `t_i` (zero unless `j < i`).
    pub fn diffusion(&self, i: usize, j: usize) -> f64 {
        if j < i {
            self.diffusion[i - j]
        } else {
            0.0
        }
    }

    pub fn h(&self) -> f64 {
        self.h
    }
}

/// A forward problem with its declared envelopes and the weight `mu` at which it is posed.
#[derive(Clone)]
pub struct SvieProblem {
    pub coeffs: Arc<dyn Coefficients>,
    pub phi: Process,
    pub kb: Kernel,
    pub ksigma: Kernel,
    pub mu: f64,
}

impl SvieProblem {
    pub fn new(coeffs: Arc<dyn Coefficients>, phi: Process, kb: Kernel, ksigma: Kernel, mu: f64) -> Self {
        SvieProblem { coeffs, phi, kb, ksigma, mu }
    }

    /// `C_mu` of the stability estimate.
    pub fn stability_constant(&self) -> Result<f64> {
        svie_stability_constant(&self.kb, &self.ksigma, self.mu)
    }

    pub fn check_admissible(&self) -> Result<()> {
        let m = svie_margin(&self.kb, &self.ksigma, self.mu)?;
        if m > 0.0 {
            Ok(())
        } else {
            Err(Error::Inadmissible(format!(
                "weight mu = {} has margin {m} (needs 1 - [K_b]_1(mu) - [K_sigma]_2(mu) > 0)",
                self.mu
            )))
        }
    }
}

fn is_singular(k: &Kernel) -> bool {
    k.singularity_exponent() < 0.0 && !k.is_zero()
}

/// Runs the explicit scheme for one problem; `control` must have `control_dim` components.
pub fn solve_svie(problem: &SvieProblem, ens: &Ensemble, control: Option<&Process>) -> Result<Process> {
    problem.check_admissible()?;
    let c = problem.coeffs.as_ref();
    if matches!(c.drift_weighting(), Weighting::Plain) && is_singular(&problem.kb)
        || matches!(c.diffusion_weighting(), Weighting::Plain) && is_singular(&problem.ksigma)
    {
        log::warn!("singular envelope with plain rectangle weights; declare the kernel factor for exact cell weights");
    }
    integrate(c, &problem.phi, ens, control)
}

/// The scheme itself, without the admissibility gate.
pub fn integrate(c: &dyn Coefficients, phi: &Process, ens: &Ensemble, control: Option<&Process>) -> Result<Process> {
    let (n, d, l) = (c.state_dim(), c.noise_dim(), c.control_dim());
    let steps = ens.steps();
    if phi.dim() != n || phi.nodes() != steps + 1 || phi.paths() != ens.paths() {
        return Err(Error::Dimension(format!(
            "free term has shape {}×{}×{}, expected {}×{}×{n}",
            phi.nodes(),
            phi.paths(),
            phi.dim(),
            steps + 1,
            ens.paths()
        )));
    }
    if d != ens.noise_dim() {
        return Err(Error::Dimension(format!("coefficients use {d} noise coordinates, ensemble has {}", ens.noise_dim())));
    }
    if let Some(u) = control {
        if u.dim() != l || u.paths() != ens.paths() || u.nodes() < steps {
            return Err(Error::Dimension(format!("control must have {l} components on every path and node")));
        }
    } else if l > 0 {
        return Err(Error::Dimension(format!("controlled coefficients need a {l}-dimensional control")));
    }
    let weights = CellWeights::for_coefficients(ens.grid(), c);
    let grid = *ens.grid();
    let zero_u = vec![0.0; l];

    let per_path: Vec<Result<Vec<f64>>> = (0..ens.paths())
        .into_par_iter()
        .map(|p| {
            let mut xs = vec![0.0; (steps + 1) * n];
            let mut b = vec![0.0; n];
            let mut s = vec![0.0; n * d];
            for i in 0..=steps {
                let (done, rest) = xs.split_at_mut(i * n);
                let xi = &mut rest[..n];
                xi.copy_from_slice(phi.at(i, p));
                for j in 0..i {
                    let cell = Cell::new(&grid, i, j, p);
                    let xj = &done[j * n..(j + 1) * n];
                    let uj = control.map_or(&zero_u[..], |u| u.at(j, p));
                    let wb = weights.drift(i, j);
                    if wb != 0.0 {
                        c.drift(&cell, xj, uj, &mut b);
                        for r in 0..n {
                            xi[r] += wb * b[r];
                        }
                    }
                    let ws = weights.diffusion(i, j);
                    if ws != 0.0 {
                        c.diffusion(&cell, xj, uj, &mut s);
                        let dw = ens.dw(j, p);
                        for r in 0..n {
                            for k in 0..d {
                                xi[r] += ws * s[r * d + k] * dw[k];
                            }
                        }
                    }
                }
                if xi.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical(format!("non-finite state at step {i} on path {p}")));
                }
            }
            Ok(xs)
        })
        .collect();

    let mut x = Process::zeros_on(ens, n);
    for (p, res) in per_path.into_iter().enumerate() {
        let xs = res?;
        for i in 0..=steps {
            x.at_mut(i, p).copy_from_slice(&xs[i * n..(i + 1) * n]);
        }
    }
    Ok(x)
}

/// Both sides of the discrete stability estimate `‖X - X'‖ ≤ C_mu ‖φ̄‖`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityGap {
    pub lhs: f64,
    pub rhs: f64,
    pub constant: f64,
    pub holds: bool,
}

/// `φ̄` is the free term that the perturbed solution `X'` would need in the first problem.
pub fn stability_gap(
    p: &SvieProblem,
    q: &SvieProblem,
    ens: &Ensemble,
    control: Option<&Process>,
    tol: f64,
) -> Result<StabilityGap> {
    let x = solve_svie(p, ens, control)?;
    let xq = solve_svie(q, ens, control)?;
    let (cp, cq) = (p.coeffs.as_ref(), q.coeffs.as_ref());
    let (n, d, l) = (cp.state_dim(), cp.noise_dim(), cp.control_dim());
    let wp = CellWeights::for_coefficients(ens.grid(), cp);
    let wq = CellWeights::for_coefficients(ens.grid(), cq);
    let grid = *ens.grid();
    let zero_u = vec![0.0; l];
    let mut bar = p.phi.sub(&q.phi);
    let (mut b1, mut b2) = (vec![0.0; n], vec![0.0; n]);
    let (mut s1, mut s2) = (vec![0.0; n * d], vec![0.0; n * d]);
    for path in 0..ens.paths() {
        for i in 1..=ens.steps() {
            for j in 0..i {
                let cell = Cell::new(&grid, i, j, path);
                let xj = xq.at(j, path).to_vec();
                let uj = control.map_or(&zero_u[..], |u| u.at(j, path));
                cp.drift(&cell, &xj, uj, &mut b1);
                cq.drift(&cell, &xj, uj, &mut b2);
                cp.diffusion(&cell, &xj, uj, &mut s1);
                cq.diffusion(&cell, &xj, uj, &mut s2);
                let dw = ens.dw(j, path);
                let out = bar.at_mut(i, path);
                for r in 0..n {
                    out[r] += wp.drift(i, j) * b1[r] - wq.drift(i, j) * b2[r];
                    for k in 0..d {
                        out[r] += (wp.diffusion(i, j) * s1[r * d + k] - wq.diffusion(i, j) * s2[r * d + k]) * dw[k];
                    }
                }
            }
        }
    }
    let constant = p.stability_constant()?;
    let lhs = ens.weighted_sq_norm(&x.sub(&xq), -p.mu).1;
    let rhs = constant * ens.weighted_sq_norm(&bar, -p.mu).1;
    Ok(StabilityGap { lhs, rhs, constant, holds: lhs <= rhs * (1.0 + tol) })
}

/// Tolerance of the discrete a priori bound, `5 h^{min(α, 1/2)}`.
pub fn apriori_tolerance(h: f64, alpha: f64) -> f64 {
    5.0 * h.powf(alpha.min(0.5))
}

/// Result of sampling `|b(x) - b(x')| ≤ K(t-s)|x - x'|` on random triples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeCheck {
    pub samples: usize,
    pub violations: usize,
    pub worst_ratio: f64,
}

/// Spot-checks the declared Lipschitz envelopes in the state variable.
pub fn spot_check_envelopes(
    c: &dyn Coefficients,
    kb: &Kernel,
    ksigma: &Kernel,
    grid: &TimeGrid,
    samples: usize,
    seed: u64,
) -> EnvelopeCheck {
    let (n, d, l) = (c.state_dim(), c.noise_dim(), c.control_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut violations = 0;
    let (mut b1, mut b2) = (vec![0.0; n], vec![0.0; n]);
    let (mut s1, mut s2) = (vec![0.0; n * d], vec![0.0; n * d]);
    let profile = |w: &Weighting, tau: f64| match w {
        Weighting::Plain => 1.0,
        Weighting::Factored(k) => k.eval(tau),
    };
    for _ in 0..samples {
        let i = rng.gen_range(1..=grid.steps);
        let j = rng.gen_range(0..i);
        let cell = Cell::new(grid, i, j, 0);
        let tau = cell.t - cell.s;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let u: Vec<f64> = (0..l).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let dx = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if dx == 0.0 {
            continue;
        }
        c.drift(&cell, &x, &u, &mut b1);
        c.drift(&cell, &y, &u, &mut b2);
        c.diffusion(&cell, &x, &u, &mut s1);
        c.diffusion(&cell, &y, &u, &mut s2);
        let db = profile(&c.drift_weighting(), tau) * b1.iter().zip(&b2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let ds =
            profile(&c.diffusion_weighting(), tau) * s1.iter().zip(&s2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        for (diff, k) in [(db, kb), (ds, ksigma)] {
            let bound = k.eval(tau) * dx;
            let ratio = if bound > 0.0 { diff / bound } else if diff > 1e-12 { f64::INFINITY } else { 0.0 };
            worst = worst.max(ratio);
            if ratio > 1.0 + 1e-9 {
                violations += 1;
            }
        }
    }
    EnvelopeCheck { samples, violations, worst_ratio: worst }
}

/// Matrix-valued coefficient `(t_i, s_j, path) ↦ M`, row-major.
pub trait MatrixField: Send + Sync {
    fn eval(&self, c: &Cell, out: &mut [f64]);
}

impl<F: Fn(&Cell, &mut [f64]) + Send + Sync> MatrixField for F {
    fn eval(&self, c: &Cell, out: &mut [f64]) {
        self(c, out)
    }
}

/// Constant matrix field.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstMatrix(pub Vec<f64>);

impl MatrixField for ConstMatrix {
    fn eval(&self, _: &Cell, out: &mut [f64]) {
        out.copy_from_slice(&self.0);
    }
}

/// Linear equation `X = φ + ∫ C X ds + Σ_k ∫ D_k X dW_k`.
#[derive(Clone)]
pub struct LinearSvie {
    pub n: usize,
    pub c: Arc<dyn MatrixField>,
    pub d: Vec<Arc<dyn MatrixField>>,
    pub drift_weighting: Weighting,
    pub diffusion_weighting: Weighting,
}

impl LinearSvie {
    /// Scalar constant coefficients with plain weights.
    pub fn scalar(c: f64, d: f64) -> Self {
        LinearSvie {
            n: 1,
            c: Arc::new(ConstMatrix(vec![c])),
            d: vec![Arc::new(ConstMatrix(vec![d]))],
            drift_weighting: Weighting::Plain,
            diffusion_weighting: Weighting::Plain,
        }
    }
}

impl Coefficients for LinearSvie {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn noise_dim(&self) -> usize {
        self.d.len()
    }
    fn drift_weighting(&self) -> Weighting {
        self.drift_weighting
    }
    fn diffusion_weighting(&self) -> Weighting {
        self.diffusion_weighting
    }
    fn drift(&self, c: &Cell, x: &[f64], _: &[f64], out: &mut [f64]) {
        let n = self.n;
        let mut m = vec![0.0; n * n];
        self.c.eval(c, &mut m);
        for r in 0..n {
            out[r] = (0..n).map(|q| m[r * n + q] * x[q]).sum();
        }
    }
    fn diffusion(&self, c: &Cell, x: &[f64], _: &[f64], out: &mut [f64]) {
        let (n, d) = (self.n, self.d.len());
        let mut m = vec![0.0; n * n];
        for (k, dk) in self.d.iter().enumerate() {
            dk.eval(c, &mut m);
            for r in 0..n {
                out[r * d + k] = (0..n).map(|q| m[r * n + q] * x[q]).sum();
            }
        }
    }
    fn drift_jacobian(&self, c: &Cell, _: &[f64], _: &[f64], dx: &mut [f64], _: &mut [f64]) {
        self.c.eval(c, dx);
    }
    fn diffusion_jacobian(&self, c: &Cell, _: &[f64], _: &[f64], dx: &mut [f64], _: &mut [f64]) {
        let n = self.n;
        for (k, dk) in self.d.iter().enumerate() {
            dk.eval(c, &mut dx[k * n * n..(k + 1) * n * n]);
        }
    }
}

/// Scalar affine coefficients `b̃ = a x + a0`, `σ̃ = c x + c0` with one noise coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineScalar {
    pub a: f64,
    pub a0: f64,
    pub c: f64,
    pub c0: f64,
    #[serde(default)]
    pub drift_weighting: Weighting,
    #[serde(default)]
    pub diffusion_weighting: Weighting,
}

impl Coefficients for AffineScalar {
    fn state_dim(&self) -> usize {
        1
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn drift_weighting(&self) -> Weighting {
        self.drift_weighting
    }
    fn diffusion_weighting(&self) -> Weighting {
        self.diffusion_weighting
    }
    fn drift(&self, _: &Cell, x: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = self.a * x[0] + self.a0;
    }
    fn diffusion(&self, _: &Cell, x: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = self.c * x[0] + self.c0;
    }
    fn drift_jacobian(&self, _: &Cell, _: &[f64], _: &[f64], dx: &mut [f64], _: &mut [f64]) {
        dx[0] = self.a;
    }
    fn diffusion_jacobian(&self, _: &Cell, _: &[f64], _: &[f64], dx: &mut [f64], _: &mut [f64]) {
        dx[0] = self.c;
    }
}

impl AffineScalar {
    /// Envelope kernels implied by the declared weighting.
    pub fn envelopes(&self) -> (Kernel, Kernel) {
        let env = |w: &Weighting, lip: f64| match w {
            Weighting::Plain => Kernel::constant(lip.abs()),
            Weighting::Factored(k) => k.scaled(lip.abs()),
        };
        (env(&self.drift_weighting, self.a), env(&self.diffusion_weighting, self.c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::function::gamma::gamma;

    fn affine(a: f64, a0: f64, c: f64, c0: f64, dw: Weighting, sw: Weighting) -> AffineScalar {
        AffineScalar { a, a0, c, c0, drift_weighting: dw, diffusion_weighting: sw }
    }

    fn problem(c: AffineScalar, phi: Process, mu: f64) -> SvieProblem {
        let (kb, ks) = c.envelopes();
        SvieProblem::new(Arc::new(c), phi, kb, ks, mu)
    }

    #[test]
    fn zero_coefficients_reproduce_free_term() {
        let e = Ensemble::tree(1.0, 5).unwrap();
        let phi = Process::from_fn(&e, 1, |i, p, o| o[0] = e.w(i, p)[0] + i as f64);
        let pr = problem(affine(0.0, 0.0, 0.0, 0.0, Weighting::Plain, Weighting::Plain), phi.clone(), 1.0);
        assert_eq!(solve_svie(&pr, &e, None).unwrap(), phi);
    }

    #[test]
    fn fractional_integral_of_one() {
        let alpha = 0.75;
        let e = Ensemble::tree(1.0, 8).unwrap();
        let c = affine(0.0, 1.0, 0.0, 0.0, Weighting::Factored(Kernel::caputo(alpha, 1.0)), Weighting::Plain);
        let pr = SvieProblem::new(Arc::new(c), Process::zeros_on(&e, 1), Kernel::Zero, Kernel::Zero, 1.0);
        let x = solve_svie(&pr, &e, None).unwrap();
        let exact = 1.0 / gamma(1.0 + alpha);
        assert!((exact - 1.088065).abs() < 1e-6);
        assert!((x.at(8, 0)[0] - exact).abs() < 1e-12);
    }

    #[test]
    fn unit_diffusion_gives_brownian_motion() {
        let e = Ensemble::monte_carlo(1.0, 10, 20, 1, 5).unwrap();
        let pr = problem(affine(0.0, 0.0, 0.0, 1.0, Weighting::Plain, Weighting::Plain), Process::zeros_on(&e, 1), 1.0);
        let x = solve_svie(&pr, &e, None).unwrap();
        for i in 0..=10 {
            for p in 0..20 {
                assert!((x.at(i, p)[0] - e.w(i, p)[0]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn refuses_inadmissible_weight() {
        let e = Ensemble::tree(1.0, 3).unwrap();
        let pr = problem(affine(1.0, 0.0, 1.0, 0.0, Weighting::Plain, Weighting::Plain), Process::zeros_on(&e, 1), 1.5);
        assert!(matches!(solve_svie(&pr, &e, None), Err(Error::Inadmissible(_))));
    }

    #[test]
    fn nan_is_detected() {
        let e = Ensemble::tree(1.0, 3).unwrap();
        let c = affine(0.0, f64::NAN, 0.0, 0.0, Weighting::Plain, Weighting::Plain);
        let pr = SvieProblem::new(Arc::new(c), Process::zeros_on(&e, 1), Kernel::Zero, Kernel::Zero, 1.0);
        assert!(matches!(solve_svie(&pr, &e, None), Err(Error::Numerical(_))));
    }

    #[test]
    fn stability_gap_examples() {
        let e = Ensemble::tree(2.0, 6).unwrap();
        let lin = affine(0.3, 0.0, 0.2, 0.0, Weighting::Plain, Weighting::Plain);
        let phi = Process::constant(&e, &[1.0]);
        let p = problem(lin, phi.clone(), 2.0);
        let g = stability_gap(&p, &p, &e, None, 0.0).unwrap();
        assert_eq!(g.lhs, 0.0);

        let mut gaps = Vec::new();
        for delta in [0.1, 0.2] {
            let mut shifted = phi.clone();
            shifted.data_mut().iter_mut().for_each(|v| *v += delta);
            let q = problem(lin, shifted, 2.0);
            let g = stability_gap(&p, &q, &e, None, 0.0).unwrap();
            assert!(g.holds);
            gaps.push(g.lhs);
        }
        assert!((gaps[1] / gaps[0] - 2.0).abs() < 1e-12);

        let zero = affine(0.0, 0.0, 0.0, 0.0, Weighting::Plain, Weighting::Plain);
        let q = problem(zero, Process::constant(&e, &[0.5]), 2.0);
        let p0 = problem(zero, phi, 2.0);
        let g = stability_gap(&p0, &q, &e, None, 0.0).unwrap();
        assert_eq!(g.constant, 1.0);
        assert!((g.lhs - g.rhs).abs() < 1e-15);
    }

    #[test]
    fn envelope_spot_check() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let c = affine(0.5, 1.0, 0.25, 0.0, Weighting::Plain, Weighting::Plain);
        let ok = spot_check_envelopes(&c, &Kernel::constant(0.5), &Kernel::constant(0.25), &grid, 200, 1);
        assert_eq!(ok.violations, 0);
        let bad = spot_check_envelopes(&c, &Kernel::constant(0.1), &Kernel::constant(0.25), &grid, 200, 1);
        assert!(bad.violations > 0);
    }

    #[test]
    fn finite_difference_jacobian_default() {
        struct Sin;
        impl Coefficients for Sin {
            fn state_dim(&self) -> usize {
                1
            }
            fn noise_dim(&self) -> usize {
                1
            }
            fn control_dim(&self) -> usize {
                1
            }
            fn drift(&self, _: &Cell, x: &[f64], u: &[f64], out: &mut [f64]) {
                out[0] = x[0].sin() * u[0];
            }
            fn diffusion(&self, _: &Cell, x: &[f64], u: &[f64], out: &mut [f64]) {
                out[0] = x[0] * x[0] + u[0];
            }
        }
        let cell = Cell { i: 1, j: 0, t: 0.1, s: 0.0, path: 0 };
        let (mut dx, mut du) = ([0.0], [0.0]);
        Sin.drift_jacobian(&cell, &[0.3], &[2.0], &mut dx, &mut du);
        assert!((dx[0] - 2.0 * 0.3f64.cos()).abs() < 1e-8 && (du[0] - 0.3f64.sin()).abs() < 1e-8);
        Sin.diffusion_jacobian(&cell, &[0.3], &[2.0], &mut dx, &mut du);
        assert!((dx[0] - 0.6).abs() < 1e-8 && (du[0] - 1.0).abs() < 1e-8);
    }
}
