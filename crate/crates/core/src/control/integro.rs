//! Controlled integro-differential equations lifted to a Markovian-kernel Volterra system.
//!
//! State layout of the lift: `[x (n) | x1 (m1) | x2 (m2) | x3 (m3) | x4 (m4)]`, where
//! `x1 = ∫ A1 x`, `x2 = ∫ A2 u`, `x3 = ∫ A3 x`, `x4 = ∫ A4 u`. The drift sees `(x, x1, x2)`,
//! the diffusion sees `(x, x3, x4)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{cost_of, gradient, ControlProblem, Envelopes, FreeTerm, RunningCost};
use crate::bsvie::{BsvieOptions, MSolution};
use crate::error::{invalid, Error, Result};
use crate::kernel::{BsvieMargin, ControlAdmissibility, Kernel};
use crate::stochastic::{Ensemble, Process};
use crate::svie::{fd_jacobian, integrate, Cell, Coefficients, MatrixField};

/// Coefficients `b(s, x, u, x1, x2)` and `σ(s, x, u, x3, x4)` of the integro-differential equation.
pub trait IntegroCoefficients: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    /// `[m1, m2, m3, m4]`.
    fn memory_dims(&self) -> [usize; 4];
    fn drift(&self, s: f64, x: &[f64], u: &[f64], x1: &[f64], x2: &[f64], out: &mut [f64]);
    /// `n × d`, row-major.
    fn diffusion(&self, s: f64, x: &[f64], u: &[f64], x3: &[f64], x4: &[f64], out: &mut [f64]);

    /// `dy` is `n × (n + m1 + m2)` over `(x, x1, x2)`, `du` is `n × l`.
    #[allow(clippy::too_many_arguments)]
    fn drift_jacobian(&self, s: f64, x: &[f64], u: &[f64], x1: &[f64], x2: &[f64], dy: &mut [f64], du: &mut [f64]) {
        let (n, [m1, _, _, _]) = (self.state_dim(), self.memory_dims());
        let y: Vec<f64> = [x, x1, x2].concat();
        fd_jacobian(n, &y, u, dy, du, |y, u, out| self.drift(s, &y[..n], u, &y[n..n + m1], &y[n + m1..], out));
    }

    /// Per noise coordinate `k`: `dy[(k n + r) (n + m3 + m4) + c]` over `(x, x3, x4)`, `du[(k n + r) l + c]`.
    #[allow(clippy::too_many_arguments)]
    fn diffusion_jacobian(&self, s: f64, x: &[f64], u: &[f64], x3: &[f64], x4: &[f64], dy: &mut [f64], du: &mut [f64]) {
        let (n, l, d) = (self.state_dim(), self.control_dim(), self.noise_dim());
        let m3 = self.memory_dims()[2];
        let y: Vec<f64> = [x, x3, x4].concat();
        let w = y.len();
        let mut jy = vec![0.0; n * d * w];
        let mut ju = vec![0.0; n * d * l];
        fd_jacobian(n * d, &y, u, &mut jy, &mut ju, |y, u, out| {
            self.diffusion(s, &y[..n], u, &y[n..n + m3], &y[n + m3..], out)
        });
        for r in 0..n {
            for k in 0..d {
                let (src, dst) = (r * d + k, k * n + r);
                dy[dst * w..(dst + 1) * w].copy_from_slice(&jy[src * w..(src + 1) * w]);
                du[dst * l..(dst + 1) * l].copy_from_slice(&ju[src * l..(src + 1) * l]);
            }
        }
    }
}

/// Scalar affine example: `b = bx x + bu u + b1 x1 + b2 x2 + b0`, `σ = sx x + su u + s3 x3 + s4 x4 + s0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct AffineIntegro {
    pub bx: f64,
    pub bu: f64,
    pub b1: f64,
    pub b2: f64,
    pub b0: f64,
    pub sx: f64,
    pub su: f64,
    pub s3: f64,
    pub s4: f64,
    pub s0: f64,
}

impl IntegroCoefficients for AffineIntegro {
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn memory_dims(&self) -> [usize; 4] {
        [1; 4]
    }
    fn drift(&self, _: f64, x: &[f64], u: &[f64], x1: &[f64], x2: &[f64], out: &mut [f64]) {
        out[0] = self.bx * x[0] + self.bu * u[0] + self.b1 * x1[0] + self.b2 * x2[0] + self.b0;
    }
    fn diffusion(&self, _: f64, x: &[f64], u: &[f64], x3: &[f64], x4: &[f64], out: &mut [f64]) {
        out[0] = self.sx * x[0] + self.su * u[0] + self.s3 * x3[0] + self.s4 * x4[0] + self.s0;
    }
    fn drift_jacobian(&self, _: f64, _: &[f64], _: &[f64], _: &[f64], _: &[f64], dy: &mut [f64], du: &mut [f64]) {
        dy.copy_from_slice(&[self.bx, self.b1, self.b2]);
        du[0] = self.bu;
    }
    fn diffusion_jacobian(&self, _: f64, _: &[f64], _: &[f64], _: &[f64], _: &[f64], dy: &mut [f64], du: &mut [f64]) {
        dy.copy_from_slice(&[self.sx, self.s3, self.s4]);
        du[0] = self.su;
    }
}

impl AffineIntegro {
    /// Lipschitz constants `(L_bx, L_bu, L_σx, L_σu, [L1..L4])`.
    pub fn lipschitz(&self) -> (f64, f64, f64, f64, [f64; 4]) {
        (self.bx.abs(), self.bu.abs(), self.sx.abs(), self.su.abs(), [self.b1.abs(), self.b2.abs(), self.s3.abs(), self.s4.abs()])
    }
}

/// Declared bounds: Lipschitz constants of `b`, `σ` and envelopes `|A_i(t,s)| ≤ K_i(t-s)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegroBounds {
    pub lbx: f64,
    pub lbu: f64,
    pub lsx: f64,
    pub lsu: f64,
    /// Lipschitz constants in `x1, x2, x3, x4`.
    pub l: [f64; 4],
    pub k: [Kernel; 4],
}

impl IntegroBounds {
    fn contraction(&self, mu: f64) -> Result<f64> {
        Ok((self.lbx + self.l[0] + self.l[1]) / mu
            + (self.lsx + self.l[2] + self.l[3]) / (2.0 * mu).sqrt()
            + self.k[0].weighted_norm(1, mu)?
            + self.k[2].weighted_norm(1, mu)?)
    }

    fn floor(&self) -> f64 {
        self.k.iter().map(|k| k.divergence_threshold()).fold(0.0, f64::max)
    }

    /// Smallest weight at which the contraction clause holds.
    pub fn rho_star(&self) -> Result<f64> {
        let floor = self.floor();
        let mut hi = floor + 1.0;
        while self.contraction(hi)? >= 1.0 {
            hi = floor + 2.0 * (hi - floor);
            if hi > 1e12 {
                return Ok(f64::INFINITY);
            }
        }
        let mut lo = floor;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.contraction(mid)? < 1.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(hi)
    }

    pub fn admissibility(&self, mu: f64, lambda: f64) -> Result<ControlAdmissibility> {
        if mu.is_nan() || lambda.is_nan() {
            return invalid("mu/lambda is NaN");
        }
        for k in &self.k {
            k.validate()?;
        }
        let rho_star = self.rho_star()?;
        let failure = if !(mu > 0.0) {
            Some(format!("clause 'mu > 0' fails: mu = {mu}"))
        } else if !(self.k[1].weighted_norm(1, mu)? + self.k[3].weighted_norm(1, mu)?).is_finite() {
            Some(format!("clause '[K2]_1(mu) + [K4]_1(mu) < inf' fails at mu = {mu}"))
        } else if !(self.contraction(mu)? < 1.0) {
            Some(format!(
                "clause '(L_bx+L1+L2)/mu + (L_sx+L3+L4)/sqrt(2 mu) + [K1]_1(mu) + [K3]_1(mu) < 1' fails: value {}",
                self.contraction(mu)?
            ))
        } else if !(lambda >= 2.0 * mu) {
            Some(format!("clause 'lambda >= 2 mu' fails: lambda = {lambda}, mu = {mu}"))
        } else {
            None
        };
        Ok(ControlAdmissibility { ok: failure.is_none(), rho_star, failure })
    }

    /// Margin of the lifted adjoint equation at weight `-mu`.
    pub fn adjoint_margin(&self, mu: f64, lambda: f64) -> Result<BsvieMargin> {
        let rho = lambda - mu;
        let m = if rho > 0.0 { 1.0 - self.contraction(rho)? } else { f64::NEG_INFINITY };
        let c = if m > 0.0 { std::f64::consts::SQRT_2 / m } else { f64::INFINITY };
        Ok(BsvieMargin { margin: m, c_eta_lambda: c })
    }
}

/// Problem data before lifting. `a[0]`, `a[2]` are `m_i × n`; `a[1]`, `a[3]` are `m_i × l`.
#[derive(Clone)]
pub struct IntegroSpec {
    pub coeffs: Arc<dyn IntegroCoefficients>,
    pub a: [Arc<dyn MatrixField>; 4],
    pub bounds: IntegroBounds,
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    n: usize,
    l: usize,
    d: usize,
    m: [usize; 4],
    /// Offsets of `x1..x4`.
    o: [usize; 4],
    total: usize,
}

impl Layout {
    fn of(c: &dyn IntegroCoefficients) -> Self {
        let (n, l, d, m) = (c.state_dim(), c.control_dim(), c.noise_dim(), c.memory_dims());
        let o = [n, n + m[0], n + m[0] + m[1], n + m[0] + m[1] + m[2]];
        Layout { n, l, d, m, o, total: o[3] + m[3] }
    }

    fn block<'a>(&self, v: &'a [f64], b: usize) -> &'a [f64] {
        &v[self.o[b]..self.o[b] + self.m[b]]
    }
}

/// Lifted coefficients on `R^{n + m1 + m2 + m3 + m4}` with plain weights.
pub struct Lifted {
    spec: IntegroSpec,
    lay: Layout,
}

impl Lifted {
    fn apply(&self, which: usize, c: &Cell, v: &[f64], out: &mut [f64]) {
        let m = self.lay.m[which];
        let mut a = vec![0.0; m * v.len()];
        self.spec.a[which].eval(c, &mut a);
        for r in 0..m {
            out[r] = (0..v.len()).map(|q| a[r * v.len() + q] * v[q]).sum();
        }
    }
}

impl Coefficients for Lifted {
    fn state_dim(&self) -> usize {
        self.lay.total
    }
    fn noise_dim(&self) -> usize {
        self.lay.d
    }
    fn control_dim(&self) -> usize {
        self.lay.l
    }
    fn drift(&self, c: &Cell, x: &[f64], u: &[f64], out: &mut [f64]) {
        let lay = &self.lay;
        let xs = &x[..lay.n];
        self.spec.coeffs.drift(c.s, xs, u, lay.block(x, 0), lay.block(x, 1), &mut out[..lay.n]);
        let [o1, o2, o3, o4] = lay.o;
        self.apply(0, c, xs, &mut out[o1..o2]);
        self.apply(1, c, u, &mut out[o2..o3]);
        self.apply(2, c, xs, &mut out[o3..o4]);
        self.apply(3, c, u, &mut out[o4..]);
    }
    fn diffusion(&self, c: &Cell, x: &[f64], u: &[f64], out: &mut [f64]) {
        let lay = &self.lay;
        out.iter_mut().for_each(|v| *v = 0.0);
        let xs = &x[..lay.n];
        self.spec.coeffs.diffusion(c.s, xs, u, lay.block(x, 2), lay.block(x, 3), &mut out[..lay.n * lay.d]);
    }
    fn drift_jacobian(&self, c: &Cell, x: &[f64], u: &[f64], dx: &mut [f64], du: &mut [f64]) {
        let lay = &self.lay;
        let (n, l, nt) = (lay.n, lay.l, lay.total);
        dx.iter_mut().for_each(|v| *v = 0.0);
        du.iter_mut().for_each(|v| *v = 0.0);
        let w = n + lay.m[0] + lay.m[1];
        let mut dy = vec![0.0; n * w];
        let mut dbu = vec![0.0; n * l];
        self.spec.coeffs.drift_jacobian(c.s, &x[..n], u, lay.block(x, 0), lay.block(x, 1), &mut dy, &mut dbu);
        // `(x, x1, x2)` are the leading `w` coordinates of the lift.
        for r in 0..n {
            dx[r * nt..r * nt + w].copy_from_slice(&dy[r * w..(r + 1) * w]);
            du[r * l..(r + 1) * l].copy_from_slice(&dbu[r * l..(r + 1) * l]);
        }
        for (which, cols) in [(0, n), (1, l), (2, n), (3, l)] {
            let m = lay.m[which];
            let mut a = vec![0.0; m * cols];
            self.spec.a[which].eval(c, &mut a);
            for r in 0..m {
                let row = lay.o[which] + r;
                for q in 0..cols {
                    if which % 2 == 0 {
                        dx[row * nt + q] = a[r * cols + q];
                    } else {
                        du[row * l + q] = a[r * cols + q];
                    }
                }
            }
        }
    }
    fn diffusion_jacobian(&self, c: &Cell, x: &[f64], u: &[f64], dx: &mut [f64], du: &mut [f64]) {
        let lay = &self.lay;
        let (n, l, d, nt) = (lay.n, lay.l, lay.d, lay.total);
        dx.iter_mut().for_each(|v| *v = 0.0);
        du.iter_mut().for_each(|v| *v = 0.0);
        let w = n + lay.m[2] + lay.m[3];
        let mut dy = vec![0.0; d * n * w];
        let mut dsu = vec![0.0; d * n * l];
        self.spec.coeffs.diffusion_jacobian(c.s, &x[..n], u, lay.block(x, 2), lay.block(x, 3), &mut dy, &mut dsu);
        for k in 0..d {
            for r in 0..n {
                let (src, dst) = (k * n + r, k * nt + r);
                for q in 0..w {
                    let col = if q < n { q } else { lay.o[2] + (q - n) };
                    dx[dst * nt + col] = dy[src * w + q];
                }
                du[dst * l..(dst + 1) * l].copy_from_slice(&dsu[src * l..(src + 1) * l]);
            }
        }
    }
}

/// `h̃(t, 𝕏, u) = h(t, x, u)` on the lifted state.
struct LiftedCost {
    inner: Arc<dyn RunningCost>,
    n: usize,
    total: usize,
}

impl RunningCost for LiftedCost {
    fn state_dim(&self) -> usize {
        self.total
    }
    fn control_dim(&self) -> usize {
        self.inner.control_dim()
    }
    fn eval(&self, t: f64, x: &[f64], u: &[f64]) -> f64 {
        self.inner.eval(t, &x[..self.n], u)
    }
    fn grad_x(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        self.inner.grad_x(t, &x[..self.n], u, &mut out[..self.n]);
    }
    fn grad_u(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.inner.grad_u(t, &x[..self.n], u, out);
    }
    fn growth(&self) -> f64 {
        self.inner.growth()
    }
}

/// The lifted control problem together with the data needed to expand its conditions.
#[derive(Clone)]
pub struct IntegroLift {
    pub spec: IntegroSpec,
    pub problem: ControlProblem,
    lay: Layout,
}

/// Builds the lift; fails with the violated admissibility clause named.
pub fn integro_lift(
    spec: IntegroSpec,
    cost: Arc<dyn RunningCost>,
    x0: Vec<f64>,
    mu: f64,
    lambda: f64,
) -> Result<IntegroLift> {
    let lay = Layout::of(spec.coeffs.as_ref());
    if x0.len() != lay.n || cost.state_dim() != lay.n || cost.control_dim() != lay.l {
        return Err(Error::Dimension("cost or initial state does not match the integro coefficients".into()));
    }
    let adm = spec.bounds.admissibility(mu, lambda)?;
    if !adm.ok {
        return Err(Error::Inadmissible(adm.failure.unwrap_or_default()));
    }
    let mut phi = vec![0.0; lay.total];
    phi[..lay.n].copy_from_slice(&x0);
    let problem = ControlProblem {
        coeffs: Arc::new(Lifted { spec: spec.clone(), lay }),
        envelopes: Envelopes::Integro(spec.bounds),
        cost: Arc::new(LiftedCost { inner: cost, n: lay.n, total: lay.total }),
        set: Default::default(),
        phi: FreeTerm::Constant(phi),
        mu,
        lambda,
        convex: false,
    };
    Ok(IntegroLift { spec, problem, lay })
}

/// `(𝓨, 𝓩)`: discounted strict forward sums of the first block of the lifted adjoint.
#[derive(Clone, Debug)]
pub struct AnticipatedPair {
    /// `𝓨_j = E_j Σ_{i>j} e^{-λ(t_i-t_j)} J_n Ŷ_i h`.
    pub cy: Process,
    /// `𝓩_j = Σ_{i>j} e^{-λ(t_i-t_j)} J_n Ẑ(t_i, t_j) h`, `n × d`.
    pub cz: Process,
}

#[derive(Clone, Debug)]
pub struct AnticipatedCheck {
    pub pair: AnticipatedPair,
    /// Largest gap between the expanded adjoint equation and `J_n Ŷ`.
    pub y_equation_gap: f64,
    pub residual: Process,
    /// Norm of the one-step residual at weight `-mu`.
    pub residual_norm: f64,
}

/// Partials of the original coefficients at node `j` on one path.
struct NodePartials {
    /// `n × (n + m1 + m2)`.
    by: Vec<f64>,
    bu: Vec<f64>,
    /// `d` blocks of `n × (n + m3 + m4)`.
    sy: Vec<f64>,
    su: Vec<f64>,
}

impl IntegroLift {
    fn partials(&self, t: f64, xl: &[f64], u: &[f64]) -> NodePartials {
        let lay = &self.lay;
        let (n, l, d) = (lay.n, lay.l, lay.d);
        let wb = n + lay.m[0] + lay.m[1];
        let ws = n + lay.m[2] + lay.m[3];
        let mut p = NodePartials { by: vec![0.0; n * wb], bu: vec![0.0; n * l], sy: vec![0.0; d * n * ws], su: vec![0.0; d * n * l] };
        let c = self.spec.coeffs.as_ref();
        c.drift_jacobian(t, &xl[..n], u, lay.block(xl, 0), lay.block(xl, 1), &mut p.by, &mut p.bu);
        c.diffusion_jacobian(t, &xl[..n], u, lay.block(xl, 2), lay.block(xl, 3), &mut p.sy, &mut p.su);
        p
    }

    pub fn anticipated_pair(&self, adj: &MSolution, ens: &Ensemble) -> AnticipatedPair {
        let (n, d) = (self.lay.n, self.lay.d);
        let (steps, paths, h, lambda) = (ens.steps(), ens.paths(), ens.h(), self.problem.lambda);
        let mut cy = Process::zeros_on(ens, n);
        let mut cz = Process::zeros_on(ens, n * d);
        for j in 0..steps {
            for c in 0..n {
                let mut acc = vec![0.0; paths];
                for i in (j + 1)..steps {
                    let disc = (-lambda * (i - j) as f64 * h).exp() * h;
                    for (q, a) in acc.iter_mut().enumerate() {
                        *a += disc * adj.y.at(i, q)[c];
                    }
                }
                let ce = ens.cond_expect(&acc, j);
                for q in 0..paths {
                    cy.at_mut(j, q)[c] = ce[q];
                }
            }
            for i in (j + 1)..steps {
                let disc = (-lambda * (i - j) as f64 * h).exp() * h;
                for q in 0..paths {
                    let z = &adj.z.at(i, j, q)[..n * d];
                    cz.at_mut(j, q).iter_mut().zip(z).for_each(|(a, b)| *a += disc * b);
                }
            }
        }
        AnticipatedPair { cy, cz }
    }

    /// `Σ_k` of `σ^k_{block}ᵀ 𝓩^k` for the diffusion partial columns `[lo, lo + width)`.
    fn sigma_t_z(&self, p: &NodePartials, cz: &[f64], lo: usize, width: usize, out: &mut [f64]) {
        let (n, d) = (self.lay.n, self.lay.d);
        let ws = n + self.lay.m[2] + self.lay.m[3];
        for (c, o) in out.iter_mut().enumerate().take(width) {
            *o = 0.0;
            for k in 0..d {
                for r in 0..n {
                    *o += p.sy[(k * n + r) * ws + lo + c] * cz[r * d + k];
                }
            }
        }
    }

    fn b_t_y(&self, p: &NodePartials, cy: &[f64], lo: usize, width: usize, out: &mut [f64]) {
        let n = self.lay.n;
        let wb = n + self.lay.m[0] + self.lay.m[1];
        for (c, o) in out.iter_mut().enumerate().take(width) {
            *o = (0..n).map(|r| p.by[r * wb + lo + c] * cy[r]).sum();
        }
    }

    /// `Σ_{i>j} e^{-λ(t_i-t_j)} A(t_i,t_j)ᵀ E_j[v_i] h` for a memory block `which`.
    fn memory_sum(&self, which: usize, v: &Process, j: usize, ens: &Ensemble, cols: usize) -> Process {
        let (steps, paths, h) = (ens.steps(), ens.paths(), ens.h());
        let m = self.lay.m[which];
        let grid = *ens.grid();
        let mut out = Process::zeros(1, paths, cols);
        let mut a = vec![0.0; m * cols];
        for i in (j + 1)..steps {
            let disc = (-self.problem.lambda * (i - j) as f64 * h).exp() * h;
            let ev: Vec<Vec<f64>> = (0..m).map(|c| ens.cond_expect(&v.component(i, c), j)).collect();
            for q in 0..paths {
                self.spec.a[which].eval(&Cell::new(&grid, i, j, q), &mut a);
                let o = out.at_mut(0, q);
                for c in 0..cols {
                    o[c] += disc * (0..m).map(|r| a[r * cols + c] * ev[r][q]).sum::<f64>();
                }
            }
        }
        out
    }

    /// Memory-block adjoints rebuilt from `(𝓨, 𝓩)`: `b_{x1}ᵀ𝓨`, `b_{x2}ᵀ𝓨`, `σ_{x3}ᵀ𝓩`, `σ_{x4}ᵀ𝓩`.
    fn memory_adjoints(&self, x: &Process, u: &Process, pair: &AnticipatedPair, ens: &Ensemble) -> [Process; 4] {
        let lay = self.lay;
        let n = lay.n;
        let mut blocks = lay.m.map(|m| Process::zeros_on(ens, m));
        for j in 0..ens.steps() {
            for q in 0..ens.paths() {
                let p = self.partials(ens.t(j), x.at(j, q), u.at(j, q));
                let (cy, cz) = (pair.cy.at(j, q), pair.cz.at(j, q));
                self.b_t_y(&p, cy, n, lay.m[0], blocks[0].at_mut(j, q));
                self.b_t_y(&p, cy, n + lay.m[0], lay.m[1], blocks[1].at_mut(j, q));
                self.sigma_t_z(&p, cz, n, lay.m[2], blocks[2].at_mut(j, q));
                self.sigma_t_z(&p, cz, n + lay.m[2], lay.m[3], blocks[3].at_mut(j, q));
            }
        }
        blocks
    }

    /// Optimality condition written in the original variables.
    pub fn expanded_gradient(&self, u: &Process, x: &Process, adj: &MSolution, ens: &Ensemble) -> Process {
        let lay = self.lay;
        let (n, l) = (lay.n, lay.l);
        let pair = self.anticipated_pair(adj, ens);
        let blocks = self.memory_adjoints(x, u, &pair, ens);
        let mut g = Process::zeros_on(ens, l);
        let mut tmp = vec![0.0; l];
        for j in 0..ens.steps() {
            let s2 = self.memory_sum(1, &blocks[1], j, ens, l);
            let s4 = self.memory_sum(3, &blocks[3], j, ens, l);
            for q in 0..ens.paths() {
                let p = self.partials(ens.t(j), x.at(j, q), u.at(j, q));
                let (cy, cz) = (pair.cy.at(j, q), pair.cz.at(j, q));
                let out = g.at_mut(j, q);
                self.problem.cost.grad_u(ens.t(j), x.at(j, q), u.at(j, q), out);
                for c in 0..l {
                    out[c] += (0..n).map(|r| p.bu[r * l + c] * cy[r]).sum::<f64>();
                    out[c] += s2.at(0, q)[c] + s4.at(0, q)[c];
                }
                for c in 0..l {
                    tmp[c] = 0.0;
                    for k in 0..lay.d {
                        for r in 0..n {
                            tmp[c] += p.su[(k * n + r) * l + c] * cz[r * lay.d + k];
                        }
                    }
                }
                out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += t);
            }
        }
        g
    }

    /// Checks the adjoint equation in `(𝓨, 𝓩)` form and the one-step anticipated-BSDE residual
    /// `𝓨_j - 𝓨_{j+1} - (F_j - λ 𝓨_j) h + 𝓩_j ΔW_j`, where `F_j` is the expanded adjoint.
    pub fn verify_anticipated_bsde(&self, u: &Process, x: &Process, adj: &MSolution, ens: &Ensemble) -> AnticipatedCheck {
        let lay = self.lay;
        let (n, d) = (lay.n, lay.d);
        let (steps, paths, h, lambda) = (ens.steps(), ens.paths(), ens.h(), self.problem.lambda);
        let pair = self.anticipated_pair(adj, ens);
        let blocks = self.memory_adjoints(x, u, &pair, ens);
        let mut f = Process::zeros_on(ens, n);
        let mut tmp = vec![0.0; n];
        let mut gap: f64 = 0.0;
        for j in 0..steps {
            let s1 = self.memory_sum(0, &blocks[0], j, ens, n);
            let s3 = self.memory_sum(2, &blocks[2], j, ens, n);
            for q in 0..paths {
                let p = self.partials(ens.t(j), x.at(j, q), u.at(j, q));
                let (cy, cz) = (pair.cy.at(j, q), pair.cz.at(j, q));
                let out = f.at_mut(j, q);
                let mut hx = vec![0.0; lay.total];
                self.problem.cost.grad_x(ens.t(j), x.at(j, q), u.at(j, q), &mut hx);
                self.b_t_y(&p, cy, 0, n, out);
                self.sigma_t_z(&p, cz, 0, n, &mut tmp);
                for c in 0..n {
                    out[c] += tmp[c] + hx[c] + s1.at(0, q)[c] + s3.at(0, q)[c];
                    gap = gap.max((out[c] - adj.y.at(j, q)[c]).abs());
                }
            }
        }
        let mut residual = Process::zeros_on(ens, n);
        for j in 0..steps {
            for q in 0..paths {
                let dw = ens.dw(j, q);
                for c in 0..n {
                    let (y0, y1) = (pair.cy.at(j, q)[c], pair.cy.at(j + 1, q)[c]);
                    let mut r = y0 - y1 - (f.at(j, q)[c] - lambda * y0) * h;
                    for k in 0..d {
                        r += pair.cz.at(j, q)[c * d + k] * dw[k];
                    }
                    residual.at_mut(j, q)[c] = r;
                }
            }
        }
        let residual_norm = ens.weighted_sq_norm(&residual, -self.problem.mu).1;
        AnticipatedCheck { pair, y_equation_gap: gap, residual, residual_norm }
    }

    /// Lifted state, adjoint and both forms of the gradient at `u`.
    pub fn conditions(&self, u: &Process, ens: &Ensemble, opts: &BsvieOptions) -> Result<IntegroConditions> {
        let p = &self.problem;
        let u = p.prepare(u, ens)?;
        let x = integrate(p.coeffs.as_ref(), &p.phi.materialize(ens)?, ens, Some(&u))?;
        let adj = super::adjoint_solve(p, &u, &x, ens, opts)?;
        let lifted = gradient(p, &u, &x, &adj, ens);
        let expanded = self.expanded_gradient(&u, &x, &adj, ens);
        let cost = cost_of(p, &x, &u, ens);
        Ok(IntegroConditions { x, adjoint: adj, lifted, expanded, cost })
    }
}

#[derive(Clone, Debug)]
pub struct IntegroConditions {
    pub x: Process,
    pub adjoint: MSolution,
    pub lifted: Process,
    pub expanded: Process,
    pub cost: f64,
}
