//! Named problem families: linear-quadratic, Caputo-fractional and Markovian.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ControlProblem, RunningCost};
use crate::error::{invalid, Error, Result};
use crate::kernel::{critical_weight, ControlKernels, Kernel};
use crate::svie::{Cell, Coefficients, Weighting};

fn matvec(m: &[f64], rows: usize, v: &[f64], out: &mut [f64]) {
    let cols = v.len();
    for r in 0..rows {
        out[r] = (0..cols).map(|c| m[r * cols + c] * v[c]).sum();
    }
}

fn frobenius(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `h = ½ (xᵀ M1 x + uᵀ M2 u + 2 uᵀ M3 x) + qxᵀ x + quᵀ u + c0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticCost {
    pub n: usize,
    pub l: usize,
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    /// `l × n`.
    pub m3: Vec<f64>,
    #[serde(default)]
    pub qx: Vec<f64>,
    #[serde(default)]
    pub qu: Vec<f64>,
    #[serde(default)]
    pub c0: f64,
}

impl QuadraticCost {
    pub fn new(n: usize, l: usize, m1: Vec<f64>, m2: Vec<f64>, m3: Vec<f64>) -> Result<Self> {
        let c = QuadraticCost { n, l, m1, m2, m3, qx: vec![0.0; n], qu: vec![0.0; l], c0: 0.0 };
        c.validate()?;
        Ok(c)
    }

    pub fn scalar(m1: f64, m2: f64, m3: f64) -> Self {
        QuadraticCost { n: 1, l: 1, m1: vec![m1], m2: vec![m2], m3: vec![m3], qx: vec![0.0], qu: vec![0.0], c0: 0.0 }
    }

    /// The constant cost `h ≡ c0`.
    pub fn constant(n: usize, l: usize, c0: f64) -> Self {
        QuadraticCost {
            n,
            l,
            m1: vec![0.0; n * n],
            m2: vec![0.0; l * l],
            m3: vec![0.0; l * n],
            qx: vec![0.0; n],
            qu: vec![0.0; l],
            c0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, l) = (self.n, self.l);
        let ok = self.m1.len() == n * n
            && self.m2.len() == l * l
            && self.m3.len() == l * n
            && (self.qx.is_empty() || self.qx.len() == n)
            && (self.qu.is_empty() || self.qu.len() == l);
        if !ok {
            return Err(Error::Dimension(format!("quadratic cost blocks do not match n = {n}, l = {l}")));
        }
        Ok(())
    }
}

impl RunningCost for QuadraticCost {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn control_dim(&self) -> usize {
        self.l
    }
    fn eval(&self, _: f64, x: &[f64], u: &[f64]) -> f64 {
        let (n, l) = (self.n, self.l);
        let mut v = self.c0;
        for r in 0..n {
            for c in 0..n {
                v += 0.5 * x[r] * self.m1[r * n + c] * x[c];
            }
        }
        for r in 0..l {
            for c in 0..l {
                v += 0.5 * u[r] * self.m2[r * l + c] * u[c];
            }
            for c in 0..n {
                v += u[r] * self.m3[r * n + c] * x[c];
            }
        }
        v + self.qx.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.qu.iter().zip(u).map(|(a, b)| a * b).sum::<f64>()
    }
    fn grad_x(&self, _: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        let (n, l) = (self.n, self.l);
        for c in 0..n {
            let mut v = self.qx.get(c).copied().unwrap_or(0.0);
            for r in 0..n {
                v += 0.5 * (self.m1[c * n + r] + self.m1[r * n + c]) * x[r];
            }
            for r in 0..l {
                v += self.m3[r * n + c] * u[r];
            }
            out[c] = v;
        }
    }
    fn grad_u(&self, _: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        let (n, l) = (self.n, self.l);
        for c in 0..l {
            let mut v = self.qu.get(c).copied().unwrap_or(0.0);
            for r in 0..l {
                v += 0.5 * (self.m2[c * l + r] + self.m2[r * l + c]) * u[r];
            }
            for r in 0..n {
                v += self.m3[c * n + r] * x[r];
            }
            out[c] = v;
        }
    }
    fn growth(&self) -> f64 {
        let lin = frobenius(&self.qx) + frobenius(&self.qu);
        frobenius(&self.m1).max(frobenius(&self.m2)) + frobenius(&self.m3) + lin + self.c0.abs()
    }
}

/// Linear dynamics `b̃ = A x + B u`, `σ̃^k = C_k x + D_k u` with constant matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LqCoefficients {
    pub n: usize,
    pub l: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// One `n × n` block per noise coordinate.
    pub c: Vec<Vec<f64>>,
    /// One `n × l` block per noise coordinate.
    pub dmat: Vec<Vec<f64>>,
    #[serde(default)]
    pub drift_weighting: Weighting,
    #[serde(default)]
    pub diffusion_weighting: Weighting,
}

impl LqCoefficients {
    pub fn scalar(a: f64, b: f64, c: f64, d: f64) -> Self {
        LqCoefficients {
            n: 1,
            l: 1,
            a: vec![a],
            b: vec![b],
            c: vec![vec![c]],
            dmat: vec![vec![d]],
            drift_weighting: Weighting::Plain,
            diffusion_weighting: Weighting::Plain,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, l) = (self.n, self.l);
        let ok = self.a.len() == n * n
            && self.b.len() == n * l
            && !self.c.is_empty()
            && self.c.len() == self.dmat.len()
            && self.c.iter().all(|m| m.len() == n * n)
            && self.dmat.iter().all(|m| m.len() == n * l);
        if !ok {
            return Err(Error::Dimension(format!("linear dynamics blocks do not match n = {n}, l = {l}")));
        }
        Ok(())
    }

    /// Frobenius norms as Lipschitz constants of the smooth factors.
    pub fn lipschitz(&self) -> Lipschitz {
        let stack = |ms: &[Vec<f64>]| ms.iter().map(|m| frobenius(m).powi(2)).sum::<f64>().sqrt();
        Lipschitz { bx: frobenius(&self.a), bu: frobenius(&self.b), sx: stack(&self.c), su: stack(&self.dmat) }
    }

    /// Frobenius-norm envelopes under the declared weighting.
    pub fn envelopes(&self) -> ControlKernels {
        let env = |w: &Weighting, lip: f64| match w {
            Weighting::Plain => Kernel::constant(lip),
            Weighting::Factored(k) => k.scaled(lip),
        };
        let l = self.lipschitz();
        ControlKernels {
            bx: env(&self.drift_weighting, l.bx),
            bu: env(&self.drift_weighting, l.bu),
            sx: env(&self.diffusion_weighting, l.sx),
            su: env(&self.diffusion_weighting, l.su),
        }
    }
}

impl Coefficients for LqCoefficients {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn noise_dim(&self) -> usize {
        self.c.len()
    }
    fn control_dim(&self) -> usize {
        self.l
    }
    fn drift_weighting(&self) -> Weighting {
        self.drift_weighting
    }
    fn diffusion_weighting(&self) -> Weighting {
        self.diffusion_weighting
    }
    fn drift(&self, _: &Cell, x: &[f64], u: &[f64], out: &mut [f64]) {
        let n = self.n;
        let mut tmp = vec![0.0; n];
        matvec(&self.a, n, x, out);
        matvec(&self.b, n, u, &mut tmp);
        out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += t);
    }
    fn diffusion(&self, _: &Cell, x: &[f64], u: &[f64], out: &mut [f64]) {
        let (n, d) = (self.n, self.c.len());
        let (mut cx, mut du) = (vec![0.0; n], vec![0.0; n]);
        for k in 0..d {
            matvec(&self.c[k], n, x, &mut cx);
            matvec(&self.dmat[k], n, u, &mut du);
            for r in 0..n {
                out[r * d + k] = cx[r] + du[r];
            }
        }
    }
    fn drift_jacobian(&self, _: &Cell, _: &[f64], _: &[f64], dx: &mut [f64], du: &mut [f64]) {
        dx.copy_from_slice(&self.a);
        du.copy_from_slice(&self.b);
    }
    fn diffusion_jacobian(&self, _: &Cell, _: &[f64], _: &[f64], dx: &mut [f64], du: &mut [f64]) {
        let (n, l) = (self.n, self.l);
        for k in 0..self.c.len() {
            dx[k * n * n..(k + 1) * n * n].copy_from_slice(&self.c[k]);
            du[k * n * l..(k + 1) * n * l].copy_from_slice(&self.dmat[k]);
        }
    }
}

/// Linear-quadratic problem; convex whenever `[[M1, M3ᵀ], [M3, M2]]` is positive semidefinite.
pub fn lq_problem(
    coeffs: LqCoefficients,
    cost: QuadraticCost,
    x0: Vec<f64>,
    mu: f64,
    lambda: f64,
) -> Result<ControlProblem> {
    coeffs.validate()?;
    cost.validate()?;
    let convex = quadratic_block_psd(&cost);
    let kernels = coeffs.envelopes();
    Ok(ControlProblem::new(Arc::new(coeffs), kernels, Arc::new(cost), x0, mu, lambda).with_convex(convex))
}

/// Positive semidefiniteness of the symmetric part of the quadratic block.
pub fn quadratic_block_psd(cost: &QuadraticCost) -> bool {
    let (n, l) = (cost.n, cost.l);
    let dim = n + l;
    let m = nalgebra::DMatrix::from_fn(dim, dim, |r, c| match (r < n, c < n) {
        (true, true) => 0.5 * (cost.m1[r * n + c] + cost.m1[c * n + r]),
        (false, false) => 0.5 * (cost.m2[(r - n) * l + (c - n)] + cost.m2[(c - n) * l + (r - n)]),
        (false, true) => cost.m3[(r - n) * n + c],
        (true, false) => cost.m3[(c - n) * n + r],
    });
    let tol = 1e-12 * (1.0 + m.amax());
    m.symmetric_eigenvalues().iter().all(|e| *e >= -tol)
}

/// Lipschitz constants of Markovian coefficients in state and control.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lipschitz {
    pub bx: f64,
    pub bu: f64,
    pub sx: f64,
    pub su: f64,
}

/// Overrides the weighting of another coefficient set.
pub struct Reweighted {
    pub inner: Arc<dyn Coefficients>,
    pub drift: Weighting,
    pub diffusion: Weighting,
}

impl Coefficients for Reweighted {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn noise_dim(&self) -> usize {
        self.inner.noise_dim()
    }
    fn control_dim(&self) -> usize {
        self.inner.control_dim()
    }
    fn drift_weighting(&self) -> Weighting {
        self.drift
    }
    fn diffusion_weighting(&self) -> Weighting {
        self.diffusion
    }
    fn drift(&self, c: &Cell, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.inner.drift(c, x, u, out)
    }
    fn diffusion(&self, c: &Cell, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.inner.diffusion(c, x, u, out)
    }
    fn drift_jacobian(&self, c: &Cell, x: &[f64], u: &[f64], dx: &mut [f64], du: &mut [f64]) {
        self.inner.drift_jacobian(c, x, u, dx, du)
    }
    fn diffusion_jacobian(&self, c: &Cell, x: &[f64], u: &[f64], dx: &mut [f64], du: &mut [f64]) {
        self.inner.diffusion_jacobian(c, x, u, dx, du)
    }
}

/// Critical weight of the fractional problem: the root of
/// `L_bx ρ^{-α} + L_σx √Γ(2α-1)/Γ(α) (2ρ)^{1/2-α} = 1`.
pub fn caputo_rho_star(alpha: f64, lips: &Lipschitz) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(critical_weight(&Kernel::caputo(alpha, lips.bx), &Kernel::caputo(alpha, lips.sx))?.rho)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.5 && alpha < 1.0) {
        return invalid(format!("fractional order {alpha} outside (1/2, 1)"));
    }
    Ok(())
}

/// Mild form of a Caputo-fractional controlled equation, posed at `mu = lambda / 2`.
///
/// `coeffs` supplies the time-homogeneous coefficients; both are multiplied by
/// `(t - s)^{α-1} / Γ(α)`.
pub fn make_caputo_problem(
    alpha: f64,
    coeffs: Arc<dyn Coefficients>,
    lips: Lipschitz,
    cost: Arc<dyn RunningCost>,
    x0: Vec<f64>,
    lambda: f64,
) -> Result<ControlProblem> {
    check_alpha(alpha)?;
    let w = Weighting::Factored(Kernel::caputo(alpha, 1.0));
    let kernels = ControlKernels {
        bx: Kernel::caputo(alpha, lips.bx),
        bu: Kernel::caputo(alpha, lips.bu),
        sx: Kernel::caputo(alpha, lips.sx),
        su: Kernel::caputo(alpha, lips.su),
    };
    let wrapped = Reweighted { inner: coeffs, drift: w, diffusion: w };
    Ok(ControlProblem::new(Arc::new(wrapped), kernels, cost, x0, 0.5 * lambda, lambda))
}

/// Markovian controlled equation: plain weights and constant envelopes.
pub fn make_sde_problem(
    coeffs: Arc<dyn Coefficients>,
    lips: Lipschitz,
    cost: Arc<dyn RunningCost>,
    x0: Vec<f64>,
    mu: f64,
    lambda: f64,
) -> ControlProblem {
    let kernels = ControlKernels {
        bx: Kernel::constant(lips.bx),
        bu: Kernel::constant(lips.bu),
        sx: Kernel::constant(lips.sx),
        su: Kernel::constant(lips.su),
    };
    let wrapped = Reweighted { inner: coeffs, drift: Weighting::Plain, diffusion: Weighting::Plain };
    ControlProblem::new(Arc::new(wrapped), kernels, cost, x0, mu, lambda)
}
