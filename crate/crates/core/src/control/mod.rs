//! Discounted optimal control of forward Volterra equations.
//!
//! Everything here is the exact derivative of the discrete cost: the adjoint uses strict
//! sums over later nodes, so the gradient agrees with finite differences of [`cost`] up to
//! rounding on tree ensembles.

use std::sync::Arc;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsvie::{solve_bsvie, BsvieOptions, BsvieProblem, Diagnostics, Driver, MSolution};
use crate::error::{invalid, Error, Result};
use crate::kernel::{control_admissible, BsvieMargin, ControlAdmissibility, ControlKernels, DriverKernels, Kernel};
use crate::linear::discounted_pairing;
use crate::stochastic::{Ensemble, Process, TimeGrid};
use crate::svie::{integrate, Cell, CellWeights, Coefficients, Weighting};

mod forms;
mod integro;

pub use forms::*;
pub use integro::*;

/// Running cost `h(t, x, u)` with its partial gradients.
pub trait RunningCost: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn eval(&self, t: f64, x: &[f64], u: &[f64]) -> f64;
    fn grad_x(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);
    fn grad_u(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);
    /// `c` with `|h| ≤ c (1 + |x|² + |u|²)`.
    fn growth(&self) -> f64;
}

/// Closed convex control set, represented by its Euclidean projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlSet {
    #[default]
    Unconstrained,
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { radius: f64 },
}

impl ControlSet {
    pub fn validate(&self, l: usize) -> Result<()> {
        match self {
            ControlSet::Unconstrained => Ok(()),
            ControlSet::Box { lo, hi } => {
                if lo.len() != l || hi.len() != l {
                    return Err(Error::Dimension(format!("box bounds have length {}/{}, expected {l}", lo.len(), hi.len())));
                }
                if lo.iter().zip(hi).any(|(a, b)| !(a <= b)) {
                    return invalid("box with lo > hi");
                }
                Ok(())
            }
            ControlSet::Ball { radius } if !(*radius >= 0.0) => invalid(format!("ball radius {radius}")),
            ControlSet::Ball { .. } => Ok(()),
        }
    }

    pub fn project(&self, u: &mut [f64]) {
        match self {
            ControlSet::Unconstrained => {}
            ControlSet::Box { lo, hi } => {
                for ((v, a), b) in u.iter_mut().zip(lo).zip(hi) {
                    *v = v.clamp(*a, *b);
                }
            }
            ControlSet::Ball { radius } => {
                let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > *radius {
                    u.iter_mut().for_each(|v| *v *= radius / norm);
                }
            }
        }
    }

    pub fn contains(&self, u: &[f64], tol: f64) -> bool {
        let mut p = u.to_vec();
        self.project(&mut p);
        p.iter().zip(u).all(|(a, b)| (a - b).abs() <= tol)
    }

    pub fn project_process(&self, u: &Process) -> Process {
        let mut out = u.clone();
        let l = u.dim();
        if l > 0 {
            out.data_mut().chunks_mut(l).for_each(|c| self.project(c));
        }
        out
    }
}

/// Initial term `φ` of the controlled equation.
#[derive(Clone, Debug)]
pub enum FreeTerm {
    Constant(Vec<f64>),
    Process(Process),
}

impl FreeTerm {
    pub fn dim(&self) -> usize {
        match self {
            FreeTerm::Constant(v) => v.len(),
            FreeTerm::Process(p) => p.dim(),
        }
    }

    pub fn materialize(&self, ens: &Ensemble) -> Result<Process> {
        match self {
            FreeTerm::Constant(v) => Ok(Process::constant(ens, v)),
            FreeTerm::Process(p) => {
                if p.nodes() != ens.steps() + 1 || p.paths() != ens.paths() {
                    return Err(Error::Dimension("initial term does not live on the ensemble".into()));
                }
                Ok(p.clone())
            }
        }
    }
}

/// Declared Lipschitz information of the controlled coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Envelopes {
    Kernels(ControlKernels),
    Integro(IntegroBounds),
}

impl Envelopes {
    pub fn admissibility(&self, mu: f64, lambda: f64) -> Result<ControlAdmissibility> {
        match self {
            Envelopes::Kernels(k) => control_admissible(k, mu, lambda),
            Envelopes::Integro(b) => b.admissibility(mu, lambda),
        }
    }

    /// Margin of the adjoint equation at weight `-mu`.
    pub fn adjoint_margin(&self, mu: f64, lambda: f64) -> Result<BsvieMargin> {
        match self {
            Envelopes::Kernels(k) => self::adjoint_kernels(k).margin(-mu, lambda),
            Envelopes::Integro(b) => b.adjoint_margin(mu, lambda),
        }
    }

    fn driver_kernels(&self) -> DriverKernels {
        match self {
            Envelopes::Kernels(k) => adjoint_kernels(k),
            Envelopes::Integro(b) => DriverKernels {
                y: Kernel::constant(b.lbx + b.l[0] + b.l[1]),
                z1: Kernel::Zero,
                z2: Kernel::constant(b.lsx + b.l[2] + b.l[3]),
            },
        }
    }
}

fn adjoint_kernels(k: &ControlKernels) -> DriverKernels {
    DriverKernels { y: k.bx, z1: Kernel::Zero, z2: k.sx }
}

#[derive(Clone)]
pub struct ControlProblem {
    pub coeffs: Arc<dyn Coefficients>,
    pub envelopes: Envelopes,
    pub cost: Arc<dyn RunningCost>,
    pub set: ControlSet,
    pub phi: FreeTerm,
    pub mu: f64,
    pub lambda: f64,
    /// Caller-declared: the Hamiltonian is convex in `(x, u)`, so stationarity is sufficient.
    pub convex: bool,
}

impl ControlProblem {
    pub fn new(
        coeffs: Arc<dyn Coefficients>,
        kernels: ControlKernels,
        cost: Arc<dyn RunningCost>,
        x0: Vec<f64>,
        mu: f64,
        lambda: f64,
    ) -> Self {
        ControlProblem {
            coeffs,
            envelopes: Envelopes::Kernels(kernels),
            cost,
            set: ControlSet::Unconstrained,
            phi: FreeTerm::Constant(x0),
            mu,
            lambda,
            convex: false,
        }
    }

    pub fn with_set(mut self, set: ControlSet) -> Self {
        self.set = set;
        self
    }

    pub fn with_convex(mut self, convex: bool) -> Self {
        self.convex = convex;
        self
    }

    pub fn state_dim(&self) -> usize {
        self.coeffs.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.coeffs.control_dim()
    }

    pub fn admissibility(&self) -> Result<ControlAdmissibility> {
        self.envelopes.admissibility(self.mu, self.lambda)
    }

    /// Dimension consistency plus admissibility of `(mu, lambda)`.
    pub fn check(&self) -> Result<()> {
        let (n, l) = (self.state_dim(), self.control_dim());
        if self.cost.state_dim() != n || self.cost.control_dim() != l {
            return Err(Error::Dimension(format!(
                "cost is over R^{} × R^{}, dynamics over R^{n} × R^{l}",
                self.cost.state_dim(),
                self.cost.control_dim()
            )));
        }
        if self.phi.dim() != n {
            return Err(Error::Dimension(format!("initial term has dimension {}, expected {n}", self.phi.dim())));
        }
        self.set.validate(l)?;
        let adm = self.admissibility()?;
        if !adm.ok {
            return Err(Error::Inadmissible(adm.failure.unwrap_or_default()));
        }
        Ok(())
    }

    /// Shape check and projection onto `U`.
    fn prepare(&self, u: &Process, ens: &Ensemble) -> Result<Process> {
        self.check()?;
        if u.nodes() != ens.steps() + 1 || u.paths() != ens.paths() || u.dim() != self.control_dim() {
            return Err(Error::Dimension(format!(
                "control has shape {}×{}×{}, expected {}×{}×{}",
                u.nodes(),
                u.paths(),
                u.dim(),
                ens.steps() + 1,
                ens.paths(),
                self.control_dim()
            )));
        }
        if self.set == ControlSet::Unconstrained {
            return Ok(u.clone());
        }
        let pu = self.set.project_process(u);
        if pu.sub(u).max_abs() > 1e-12 {
            warn!("control leaves the control set; projecting");
        }
        Ok(pu)
    }
}

/// State `X^u`; the control enters at the source node of each cell.
pub fn state(p: &ControlProblem, u: &Process, ens: &Ensemble) -> Result<Process> {
    let u = p.prepare(u, ens)?;
    integrate(p.coeffs.as_ref(), &p.phi.materialize(ens)?, ens, Some(&u))
}

/// `E Σ_{i<N} e^{-λ t_i} h(t_i, X_i, u_i) h`.
pub fn cost(p: &ControlProblem, u: &Process, ens: &Ensemble) -> Result<f64> {
    let u = p.prepare(u, ens)?;
    let x = integrate(p.coeffs.as_ref(), &p.phi.materialize(ens)?, ens, Some(&u))?;
    Ok(cost_of(p, &x, &u, ens))
}

fn cost_of(p: &ControlProblem, x: &Process, u: &Process, ens: &Ensemble) -> f64 {
    let h = ens.h();
    (0..ens.steps())
        .map(|i| {
            let t = ens.t(i);
            let vals: Vec<f64> = (0..ens.paths()).map(|q| p.cost.eval(t, x.at(i, q), u.at(i, q))).collect();
            (-p.lambda * t).exp() * ens.mean(&vals) * h
        })
        .sum()
}

/// Coefficient Jacobians at one cell.
pub(crate) struct Jacobians {
    pub bx: Vec<f64>,
    pub bu: Vec<f64>,
    pub sx: Vec<f64>,
    pub su: Vec<f64>,
}

impl Jacobians {
    pub(crate) fn new(c: &dyn Coefficients) -> Self {
        let (n, l, d) = (c.state_dim(), c.control_dim(), c.noise_dim());
        Jacobians { bx: vec![0.0; n * n], bu: vec![0.0; n * l], sx: vec![0.0; d * n * n], su: vec![0.0; d * n * l] }
    }

    pub(crate) fn eval(&mut self, c: &dyn Coefficients, cell: &Cell, x: &[f64], u: &[f64]) {
        c.drift_jacobian(cell, x, u, &mut self.bx, &mut self.bu);
        c.diffusion_jacobian(cell, x, u, &mut self.sx, &mut self.su);
    }
}

/// Driver `(wb/h) b̃_xᵀ y + Σ_k ws σ̃^kᵀ_x z2^k`, evaluated along a fixed state and control.
struct AdjointDriver {
    coeffs: Arc<dyn Coefficients>,
    envelopes: Envelopes,
    x: Process,
    u: Process,
    grid: TimeGrid,
    weights: CellWeights,
}

impl Driver for AdjointDriver {
    fn dim(&self) -> usize {
        self.coeffs.state_dim()
    }
    fn kernels(&self) -> DriverKernels {
        self.envelopes.driver_kernels()
    }
    fn includes_diagonal(&self) -> bool {
        false
    }
    fn uses_z1(&self) -> bool {
        false
    }
    fn margin(&self, eta: f64, lambda: f64) -> Result<BsvieMargin> {
        self.envelopes.adjoint_margin(-eta, lambda)
    }
    fn eval(&self, c: &Cell, y: &[f64], _: &[f64], z2: &[f64], out: &mut [f64]) {
        // Row `c.i` is the source node of the forward cell `(c.j, c.i)`.
        let (n, d) = (self.coeffs.state_dim(), self.coeffs.noise_dim());
        let fwd = Cell::new(&self.grid, c.j, c.i, c.path);
        let mut jac = Jacobians::new(self.coeffs.as_ref());
        jac.eval(self.coeffs.as_ref(), &fwd, self.x.at(c.i, c.path), self.u.at(c.i, c.path));
        let wb = self.weights.drift(c.j, c.i) / self.weights.h();
        let ws = self.weights.diffusion(c.j, c.i);
        for col in 0..n {
            let mut acc = 0.0;
            for r in 0..n {
                acc += wb * jac.bx[r * n + col] * y[r];
                for k in 0..d {
                    acc += ws * jac.sx[(k * n + r) * n + col] * z2[r * d + k];
                }
            }
            out[col] = acc;
        }
    }
}

/// Adjoint pair `(Ŷ, Ẑ)` for the state `x` driven by `u`, posed at weight `-mu`.
pub fn adjoint_solve(p: &ControlProblem, u: &Process, x: &Process, ens: &Ensemble, opts: &BsvieOptions) -> Result<MSolution> {
    let u = p.prepare(u, ens)?;
    let n = p.state_dim();
    let steps = ens.steps();
    let psi = Process::from_fn(ens, n, |i, q, o| {
        if i < steps {
            p.cost.grad_x(ens.t(i), x.at(i, q), u.at(i, q), o);
        }
    });
    let driver = AdjointDriver {
        coeffs: p.coeffs.clone(),
        envelopes: p.envelopes,
        x: x.clone(),
        u,
        grid: *ens.grid(),
        weights: CellWeights::for_coefficients(ens.grid(), p.coeffs.as_ref()),
    };
    let problem = BsvieProblem::new(Arc::new(driver), psi, p.lambda, -p.mu);
    solve_bsvie(&problem, ens, opts)
}

/// Cost gradient `G` in the pairing `E Σ e^{-λ t} ⟨G, δu⟩ h`; zero at the terminal node.
pub fn gradient(p: &ControlProblem, u: &Process, x: &Process, adj: &MSolution, ens: &Ensemble) -> Process {
    let (n, l, d) = (p.state_dim(), p.control_dim(), p.coeffs.noise_dim());
    let (steps, paths, h) = (ens.steps(), ens.paths(), ens.h());
    let grid = *ens.grid();
    let weights = CellWeights::for_coefficients(&grid, p.coeffs.as_ref());
    let mut g = Process::zeros_on(ens, l);
    let rows: Vec<Vec<f64>> = (0..steps)
        .into_par_iter()
        .map(|j| {
            let mut row = vec![0.0; paths * l];
            let mut jac = Jacobians::new(p.coeffs.as_ref());
            for q in 0..paths {
                p.cost.grad_u(ens.t(j), x.at(j, q), u.at(j, q), &mut row[q * l..(q + 1) * l]);
            }
            for i in (j + 1)..steps {
                let disc = (-p.lambda * (i - j) as f64 * h).exp() * h;
                let wb = weights.drift(i, j) / h;
                let ws = weights.diffusion(i, j);
                let ey: Vec<Vec<f64>> = (0..n).map(|c| ens.cond_expect(&adj.y.component(i, c), j)).collect();
                for q in 0..paths {
                    let cell = Cell::new(&grid, i, j, q);
                    jac.eval(p.coeffs.as_ref(), &cell, x.at(j, q), u.at(j, q));
                    let z = adj.z.at(i, j, q);
                    for c in 0..l {
                        let mut acc = 0.0;
                        for r in 0..n {
                            acc += wb * jac.bu[r * l + c] * ey[r][q];
                            for k in 0..d {
                                acc += ws * jac.su[(k * n + r) * l + c] * z[r * d + k];
                            }
                        }
                        row[q * l + c] += disc * acc;
                    }
                }
            }
            row
        })
        .collect();
    for (j, row) in rows.into_iter().enumerate() {
        g.node_mut(j).copy_from_slice(&row);
    }
    g
}

#[derive(Clone, Debug, Serialize)]
pub struct OptimalityReport {
    pub cost: f64,
    /// Stationarity residual process.
    #[serde(skip)]
    pub g: Process,
    /// `‖u - Π_U(u - G)‖` in the discounted norm.
    pub r: f64,
    /// `‖G‖` in the discounted norm.
    pub g_norm: f64,
    pub adjoint: Diagnostics,
    pub convex: bool,
}

/// Everything computed at one control.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub x: Process,
    pub adjoint: MSolution,
    pub report: OptimalityReport,
}

/// `sqrt(E Σ e^{-λ t_i} |f_i|² h)`.
pub fn discounted_norm(f: &Process, lambda: f64, ens: &Ensemble) -> f64 {
    discounted_pairing(f, f, lambda, ens).max(0.0).sqrt()
}

pub fn evaluate(p: &ControlProblem, u: &Process, ens: &Ensemble, opts: &BsvieOptions) -> Result<Evaluation> {
    let u = p.prepare(u, ens)?;
    let x = integrate(p.coeffs.as_ref(), &p.phi.materialize(ens)?, ens, Some(&u))?;
    let adjoint = adjoint_solve(p, &u, &x, ens, opts)?;
    let g = gradient(p, &u, &x, &adjoint, ens);
    let mut step = u.sub(&g);
    step = p.set.project_process(&step);
    let r = discounted_norm(&u.sub(&step), p.lambda, ens);
    let report = OptimalityReport {
        cost: cost_of(p, &x, &u, ens),
        g_norm: discounted_norm(&g, p.lambda, ens),
        g,
        r,
        adjoint: adjoint.diagnostics.clone(),
        convex: p.convex,
    };
    Ok(Evaluation { x, adjoint, report })
}

pub fn stationarity_residual(p: &ControlProblem, u: &Process, ens: &Ensemble, opts: &BsvieOptions) -> Result<OptimalityReport> {
    Ok(evaluate(p, u, ens, opts)?.report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizeOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub max_backtracks: usize,
    pub bsvie: BsvieOptions,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions { tol: 1e-8, max_iter: 200, armijo: 1e-4, max_backtracks: 30, bsvie: BsvieOptions::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizeStatus {
    Converged,
    MaxIterations,
    Stalled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub cost: f64,
    pub residual: f64,
    /// Accepted step (0 on the final row).
    pub step: f64,
    pub backtracks: usize,
}

#[derive(Clone, Debug)]
pub struct OptimizeResult {
    pub u: Process,
    pub status: OptimizeStatus,
    pub trace: Vec<TraceRow>,
    pub report: OptimalityReport,
}

/// Projected gradient descent with Armijo backtracking on the cost.
///
/// The terminal node carries no cost, so its control value is returned unchanged.
pub fn optimize(p: &ControlProblem, u0: &Process, ens: &Ensemble, opts: &OptimizeOptions) -> Result<OptimizeResult> {
    let mut u = p.prepare(u0, ens)?;
    let mut trace = Vec::new();
    let mut iter = 0;
    loop {
        let ev = evaluate(p, &u, ens, &opts.bsvie)?;
        let rep = ev.report;
        let mut row = TraceRow { iter, cost: rep.cost, residual: rep.r, step: 0.0, backtracks: 0 };
        if rep.r < opts.tol || iter >= opts.max_iter {
            trace.push(row);
            let status = if rep.r < opts.tol { OptimizeStatus::Converged } else { OptimizeStatus::MaxIterations };
            return Ok(OptimizeResult { u, status, trace, report: rep });
        }
        let mut gamma = 1.0;
        let mut accepted = None;
        for bt in 0..=opts.max_backtracks {
            let mut cand = u.clone();
            cand.add_scaled(-gamma, &rep.g);
            let cand = p.set.project_process(&cand);
            let decrease = discounted_pairing(&rep.g, &cand.sub(&u), p.lambda, ens);
            let x = integrate(p.coeffs.as_ref(), &p.phi.materialize(ens)?, ens, Some(&cand))?;
            let j = cost_of(p, &x, &cand, ens);
            // Below this the cost cannot resolve the predicted decrease.
            let noise = 64.0 * f64::EPSILON * rep.cost.abs();
            let armijo = j <= rep.cost + opts.armijo * decrease;
            if decrease < 0.0 && (armijo || (-decrease <= noise && j <= rep.cost + noise)) {
                row.step = gamma;
                row.backtracks = bt;
                accepted = Some(cand);
                break;
            }
            gamma *= 0.5;
        }
        trace.push(row);
        match accepted {
            Some(c) => u = c,
            None => {
                warn!("no descent after {} backtracks", opts.max_backtracks);
                return Ok(OptimizeResult { u, status: OptimizeStatus::Stalled, trace, report: rep });
            }
        }
        iter += 1;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradientCheck {
    pub adjoint: f64,
    pub finite_difference: f64,
    pub rel_err: f64,
}

/// Adjoint pairing `⟨G, δu⟩` against the central difference of the cost along `δu`.
pub fn gradient_check(
    p: &ControlProblem,
    u: &Process,
    du: &Process,
    eps: f64,
    ens: &Ensemble,
    opts: &BsvieOptions,
) -> Result<GradientCheck> {
    let rep = stationarity_residual(p, u, ens, opts)?;
    let adjoint = discounted_pairing(&rep.g, du, p.lambda, ens);
    let mut up = u.clone();
    up.add_scaled(eps, du);
    let mut um = u.clone();
    um.add_scaled(-eps, du);
    let fd = (cost(p, &up, ens)? - cost(p, &um, ens)?) / (2.0 * eps);
    let rel_err = (adjoint - fd).abs() / fd.abs().max(adjoint.abs()).max(1e-300);
    Ok(GradientCheck { adjoint, finite_difference: fd, rel_err })
}

/// First variation of the state along `δu`, linearized at `(x, u)`.
struct Variational {
    coeffs: Arc<dyn Coefficients>,
    x: Process,
    u: Process,
    du: Process,
}

impl Coefficients for Variational {
    fn state_dim(&self) -> usize {
        self.coeffs.state_dim()
    }
    fn noise_dim(&self) -> usize {
        self.coeffs.noise_dim()
    }
    fn drift_weighting(&self) -> Weighting {
        self.coeffs.drift_weighting()
    }
    fn diffusion_weighting(&self) -> Weighting {
        self.coeffs.diffusion_weighting()
    }
    fn drift(&self, c: &Cell, y: &[f64], _: &[f64], out: &mut [f64]) {
        let (n, l) = (self.coeffs.state_dim(), self.coeffs.control_dim());
        let mut jac = Jacobians::new(self.coeffs.as_ref());
        jac.eval(self.coeffs.as_ref(), c, self.x.at(c.j, c.path), self.u.at(c.j, c.path));
        let du = self.du.at(c.j, c.path);
        for r in 0..n {
            out[r] = (0..n).map(|q| jac.bx[r * n + q] * y[q]).sum::<f64>()
                + (0..l).map(|q| jac.bu[r * l + q] * du[q]).sum::<f64>();
        }
    }
    fn diffusion(&self, c: &Cell, y: &[f64], _: &[f64], out: &mut [f64]) {
        let (n, l, d) = (self.coeffs.state_dim(), self.coeffs.control_dim(), self.coeffs.noise_dim());
        let mut jac = Jacobians::new(self.coeffs.as_ref());
        jac.eval(self.coeffs.as_ref(), c, self.x.at(c.j, c.path), self.u.at(c.j, c.path));
        let du = self.du.at(c.j, c.path);
        for k in 0..d {
            for r in 0..n {
                let b = k * n + r;
                out[r * d + k] = (0..n).map(|q| jac.sx[b * n + q] * y[q]).sum::<f64>()
                    + (0..l).map(|q| jac.su[b * l + q] * du[q]).sum::<f64>();
            }
        }
    }
}

/// Directional derivative of the cost computed through the variational state (first entry)
/// and through the adjoint gradient (second entry).
pub fn variational_pairing(
    p: &ControlProblem,
    u: &Process,
    du: &Process,
    ens: &Ensemble,
    opts: &BsvieOptions,
) -> Result<(f64, f64)> {
    let ev = evaluate(p, u, ens, opts)?;
    let u = p.prepare(u, ens)?;
    let n = p.state_dim();
    let var = Variational { coeffs: p.coeffs.clone(), x: ev.x.clone(), u: u.clone(), du: du.clone() };
    let x1 = integrate(&var, &Process::zeros_on(ens, n), ens, None)?;
    let hx = Process::from_fn(ens, n, |i, q, o| p.cost.grad_x(ens.t(i), ev.x.at(i, q), u.at(i, q), o));
    let hu = Process::from_fn(ens, p.control_dim(), |i, q, o| p.cost.grad_u(ens.t(i), ev.x.at(i, q), u.at(i, q), o));
    let via_state = discounted_pairing(&hx, &x1, p.lambda, ens) + discounted_pairing(&hu, du, p.lambda, ens);
    let via_adjoint = discounted_pairing(&ev.report.g, du, p.lambda, ens);
    Ok((via_state, via_adjoint))
}

#[cfg(test)]
mod tests;
