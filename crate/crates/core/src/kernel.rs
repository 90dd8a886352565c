//! Convolution kernels, their exponentially weighted norms and the admissibility
//! domains built from them.
//!
//! For a kernel `K` the weighted norm is
//! `[K]_p(rho) = ( ∫_0^∞ e^{-p rho τ} K(τ)^p dτ )^{1/p}`, `p ∈ {1, 2}`,
//! which is non-increasing in `rho` and `+∞` where the integral diverges.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{invalid, Result};
use crate::quad::adaptive_simpson;

/// Scalar convolution kernel `τ ↦ K(τ)`, `τ > 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Kernel {
    /// `scale · τ^{alpha-1}` with `alpha ∈ (1/2, 1)`.
    Fractional { alpha: f64, scale: f64 },
    /// `scale · e^{-rate τ}`.
    Exponential { rate: f64, scale: f64 },
    /// `scale`.
    Constant { scale: f64 },
    /// `scale · τ^{alpha-1} e^{-rate τ}`; norms go through quadrature.
    PowerTimesExponential { alpha: f64, rate: f64, scale: f64 },
    Zero,
}

/// Which route [`Kernel::weighted_norm_with`] takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMethod {
    /// Closed form when the kind has one, quadrature otherwise.
    Auto,
    Quadrature,
}

impl Kernel {
    pub fn constant(scale: f64) -> Self {
        Kernel::Constant { scale }
    }

    pub fn exponential(rate: f64, scale: f64) -> Self {
        Kernel::Exponential { rate, scale }
    }

    pub fn fractional(alpha: f64, scale: f64) -> Self {
        Kernel::Fractional { alpha, scale }
    }

    /// Caputo-type kernel `lipschitz · τ^{alpha-1} / Γ(alpha)`.
    pub fn caputo(alpha: f64, lipschitz: f64) -> Self {
        Kernel::Fractional { alpha, scale: lipschitz / gamma(alpha) }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |name: &str, v: f64| -> Result<()> {
            if v.is_nan() || v.is_infinite() {
                invalid(format!("kernel {name} must be finite, got {v}"))
            } else {
                Ok(())
            }
        };
        let nonneg = |v: f64| -> Result<()> {
            finite("scale", v)?;
            if v < 0.0 {
                invalid(format!("kernel scale must be non-negative, got {v}"))
            } else {
                Ok(())
            }
        };
        match *self {
            Kernel::Fractional { alpha, scale } => {
                finite("alpha", alpha)?;
                if !(alpha > 0.5 && alpha < 1.0) {
                    return invalid(format!("fractional exponent must lie in (1/2, 1), got {alpha}"));
                }
                nonneg(scale)
            }
            Kernel::Exponential { rate, scale } => {
                finite("rate", rate)?;
                nonneg(scale)
            }
            Kernel::Constant { scale } => nonneg(scale),
            Kernel::PowerTimesExponential { alpha, rate, scale } => {
                finite("alpha", alpha)?;
                finite("rate", rate)?;
                if !(alpha > 0.5 && alpha <= 1.0) {
                    return invalid(format!("power exponent must lie in (1/2, 1], got {alpha}"));
                }
                nonneg(scale)
            }
            Kernel::Zero => Ok(()),
        }
    }

    pub fn scale(&self) -> f64 {
        match *self {
            Kernel::Fractional { scale, .. }
            | Kernel::Exponential { scale, .. }
            | Kernel::Constant { scale }
            | Kernel::PowerTimesExponential { scale, .. } => scale,
            Kernel::Zero => 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.scale() == 0.0
    }

    /// The same kernel multiplied by `c ≥ 0`.
    pub fn scaled(&self, c: f64) -> Self {
        match *self {
            Kernel::Fractional { alpha, scale } => Kernel::Fractional { alpha, scale: c * scale },
            Kernel::Exponential { rate, scale } => Kernel::Exponential { rate, scale: c * scale },
            Kernel::Constant { scale } => Kernel::Constant { scale: c * scale },
            Kernel::PowerTimesExponential { alpha, rate, scale } => {
                Kernel::PowerTimesExponential { alpha, rate, scale: c * scale }
            }
            Kernel::Zero => Kernel::Zero,
        }
    }

    /// Exponent `beta` of the power singularity `τ^beta` at the origin (0 if bounded).
    pub fn singularity_exponent(&self) -> f64 {
        match *self {
            Kernel::Fractional { alpha, .. } | Kernel::PowerTimesExponential { alpha, .. } => alpha - 1.0,
            _ => 0.0,
        }
    }

    /// Smallest `p ∈ {1, 2}` such that the kernel is locally `L^p` (always 2 here, kept as metadata).
    pub fn local_integrability(&self) -> u8 {
        2
    }

    pub fn eval(&self, tau: f64) -> f64 {
        match *self {
            Kernel::Fractional { alpha, scale } => scale * tau.powf(alpha - 1.0),
            Kernel::Exponential { rate, scale } => scale * (-rate * tau).exp(),
            Kernel::Constant { scale } => scale,
            Kernel::PowerTimesExponential { alpha, rate, scale } => {
                scale * tau.powf(alpha - 1.0) * (-rate * tau).exp()
            }
            Kernel::Zero => 0.0,
        }
    }

    /// `ln K(τ) - rho τ` with the decay rates combined before multiplying by `τ`, so the
    /// integrand stays smooth when `rho` sits just above the divergence threshold.
    fn ln_weighted(&self, tau: f64, rho: f64) -> f64 {
        match *self {
            Kernel::Fractional { alpha, scale } => scale.ln() + (alpha - 1.0) * tau.ln() - rho * tau,
            Kernel::Exponential { rate, scale } => scale.ln() - (rate + rho) * tau,
            Kernel::Constant { scale } => scale.ln() - rho * tau,
            Kernel::PowerTimesExponential { alpha, rate, scale } => {
                scale.ln() + (alpha - 1.0) * tau.ln() - (rate + rho) * tau
            }
            Kernel::Zero => f64::NEG_INFINITY,
        }
    }

    /// The norm is finite exactly for `rho` strictly above this value.
    pub fn divergence_threshold(&self) -> f64 {
        if self.is_zero() {
            return f64::NEG_INFINITY;
        }
        match *self {
            Kernel::Fractional { .. } | Kernel::Constant { .. } => 0.0,
            Kernel::Exponential { rate, .. } | Kernel::PowerTimesExponential { rate, .. } => -rate,
            Kernel::Zero => f64::NEG_INFINITY,
        }
    }

    pub fn weighted_norm(&self, p: u8, rho: f64) -> Result<f64> {
        self.weighted_norm_with(p, rho, NormMethod::Auto)
    }

    pub fn weighted_norm_quadrature(&self, p: u8, rho: f64) -> Result<f64> {
        self.weighted_norm_with(p, rho, NormMethod::Quadrature)
    }

    pub fn weighted_norm_with(&self, p: u8, rho: f64, method: NormMethod) -> Result<f64> {
        if p != 1 && p != 2 {
            return invalid(format!("norm index must be 1 or 2, got {p}"));
        }
        if rho.is_nan() {
            return invalid("weight rho is NaN");
        }
        self.validate()?;
        if self.is_zero() {
            return Ok(0.0);
        }
        if rho <= self.divergence_threshold() {
            return Ok(f64::INFINITY);
        }
        if rho == f64::INFINITY {
            return Ok(0.0);
        }
        let pf = f64::from(p);
        let closed = match (*self, method) {
            (_, NormMethod::Quadrature) | (Kernel::PowerTimesExponential { .. }, _) => None,
            (Kernel::Fractional { alpha, scale }, NormMethod::Auto) => Some(if p == 1 {
                scale * gamma(alpha) * rho.powf(-alpha)
            } else {
                scale * gamma(2.0 * alpha - 1.0).sqrt() * (2.0 * rho).powf(0.5 - alpha)
            }),
            (Kernel::Exponential { rate, scale }, NormMethod::Auto) => {
                Some(scale * (pf * (rho + rate)).powf(-1.0 / pf))
            }
            (Kernel::Constant { scale }, NormMethod::Auto) => Some(scale * (pf * rho).powf(-1.0 / pf)),
            (Kernel::Zero, _) => Some(0.0),
        };
        if let Some(v) = closed {
            return Ok(v);
        }
        let unit = self.scaled(1.0 / self.scale());
        let integral = unit_power_integral(&unit, pf, rho);
        Ok(self.scale() * integral.powf(1.0 / pf))
    }

    /// `∫_{a}^{b} K(τ) dτ` for `0 ≤ a ≤ b`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        if b <= a || self.is_zero() {
            return 0.0;
        }
        match *self {
            Kernel::Fractional { alpha, scale } => scale * (b.powf(alpha) - a.powf(alpha)) / alpha,
            Kernel::Exponential { rate, scale } => scale * exp_segment(rate, a, b),
            Kernel::Constant { scale } => scale * (b - a),
            Kernel::PowerTimesExponential { alpha, rate, scale } => {
                scale * power_exp_segment(alpha - 1.0, rate, a, b)
            }
            Kernel::Zero => 0.0,
        }
    }

    /// `∫_{a}^{b} K(τ)^2 dτ` for `0 ≤ a ≤ b`.
    pub fn square_integral(&self, a: f64, b: f64) -> f64 {
        if b <= a || self.is_zero() {
            return 0.0;
        }
        match *self {
            Kernel::Fractional { alpha, scale } => {
                let e = 2.0 * alpha - 1.0;
                scale * scale * (b.powf(e) - a.powf(e)) / e
            }
            Kernel::Exponential { rate, scale } => scale * scale * exp_segment(2.0 * rate, a, b),
            Kernel::Constant { scale } => scale * scale * (b - a),
            Kernel::PowerTimesExponential { alpha, rate, scale } => {
                scale * scale * power_exp_segment(2.0 * alpha - 2.0, 2.0 * rate, a, b)
            }
            Kernel::Zero => 0.0,
        }
    }
}

/// `∫_a^b e^{-r τ} dτ`.
fn exp_segment(r: f64, a: f64, b: f64) -> f64 {
    if r == 0.0 {
        b - a
    } else {
        -(-r * a).exp() * (-r * (b - a)).exp_m1() / r
    }
}

/// `∫_a^b τ^beta e^{-r τ} dτ` with `beta > -1`, via `u = τ^{beta+1}` which removes the singularity.
fn power_exp_segment(beta: f64, r: f64, a: f64, b: f64) -> f64 {
    let e = beta + 1.0;
    let (ua, ub) = (a.powf(e), b.powf(e));
    let f = |u: f64| (-r * u.powf(1.0 / e)).exp();
    let coarse = (ub - ua) * f(0.5 * (ua + ub));
    adaptive_simpson(&f, ua, ub, 1e-14 * coarse.abs().max(1e-300)) / e
}

const GRADED_CELLS: i32 = 60;
const TAIL_CUTOFF: f64 = 1e-16;

/// `∫_0^∞ e^{-p rho τ} K(τ)^p dτ` for a unit-scale kernel by graded quadrature.
fn unit_power_integral(k: &Kernel, p: f64, rho: f64) -> f64 {
    let beta = p * k.singularity_exponent();
    let f = |tau: f64| (p * k.ln_weighted(tau, rho)).exp();
    // Bounded part g = f / τ^beta, with g(0) = 1 for unit scale.
    let g = |tau: f64| {
        if tau == 0.0 {
            1.0
        } else {
            f(tau) / tau.powf(beta)
        }
    };
    let simpson = |a: f64, b: f64| {
        let coarse = (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b));
        adaptive_simpson(&f, a, b, 1e-14 * coarse.abs().max(1e-300))
    };

    // [0, 2^-60]: the power factor integrated analytically, the smooth factor frozen.
    let eps = 0.5f64.powi(GRADED_CELLS);
    let mut total = g(0.0) * eps.powf(beta + 1.0) / (beta + 1.0);
    for k in (0..GRADED_CELLS).rev() {
        let b = 0.5f64.powi(k);
        total += simpson(0.5 * b, b);
    }

    // [1, ∞): dyadic segments until the integrand drops below the cutoff.
    let mut a = 1.0;
    loop {
        let b = 2.0 * a;
        total += simpson(a, b);
        a = b;
        if (f(a) < TAIL_CUTOFF && f(a) <= f(0.5 * a)) || a > 1e12 {
            break;
        }
    }
    total
}

/// Margin `1 - [K_b]_1(rho) - [K_sigma]_2(rho)` of the forward weight condition.
pub fn svie_margin(kb: &Kernel, ksigma: &Kernel, rho: f64) -> Result<f64> {
    Ok(1.0 - kb.weighted_norm(1, rho)? - ksigma.weighted_norm(2, rho)?)
}

/// `C_mu = 1 / margin(mu)`, `+∞` outside the admissible range.
pub fn svie_stability_constant(kb: &Kernel, ksigma: &Kernel, mu: f64) -> Result<f64> {
    let m = svie_margin(kb, ksigma, mu)?;
    Ok(if m > 0.0 { 1.0 / m } else { f64::INFINITY })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalWeight {
    #[serde(with = "crate::ext_real")]
    pub rho: f64,
    pub iterations: usize,
    pub diagnostic: Option<String>,
}

const BISECT_TOL: f64 = 1e-10;
const BISECT_MAX_ITER: usize = 200;

/// `inf{rho : [K_b]_1(rho) + [K_sigma]_2(rho) ≤ 1}` by bisection on the monotone margin.
pub fn critical_weight(kb: &Kernel, ksigma: &Kernel) -> Result<CriticalWeight> {
    kb.validate()?;
    ksigma.validate()?;
    let margin = |rho: f64| svie_margin(kb, ksigma, rho);
    bisect_margin(kb.divergence_threshold().max(ksigma.divergence_threshold()), margin)
}

/// Shared root search: `margin` is non-decreasing, `-∞` (or negative) just above `floor`.
fn bisect_margin(floor: f64, margin: impl Fn(f64) -> Result<f64>) -> Result<CriticalWeight> {
    if floor == f64::NEG_INFINITY {
        return Ok(CriticalWeight { rho: f64::NEG_INFINITY, iterations: 0, diagnostic: None });
    }
    let at = |x: f64| margin(floor + x);
    let mut hi = 1.0;
    while at(hi)? < 0.0 {
        hi *= 2.0;
        if hi > 1e8 {
            return Ok(CriticalWeight {
                rho: f64::INFINITY,
                iterations: 0,
                diagnostic: Some(format!(
                    "norm sum stays above 1 on ({floor}, {floor} + 1e8]; no admissible weight"
                )),
            });
        }
    }
    let mut lo = 1e-8;
    while at(lo)? >= 0.0 {
        lo *= 0.5;
        if lo < 1e-300 {
            return Ok(CriticalWeight { rho: floor, iterations: 0, diagnostic: None });
        }
    }
    let mut iterations = 0;
    while hi - lo > BISECT_TOL && iterations < BISECT_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if at(mid)? >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        iterations += 1;
    }
    Ok(CriticalWeight { rho: floor + 0.5 * (lo + hi), iterations, diagnostic: None })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BsvieMargin {
    #[serde(with = "crate::ext_real")]
    pub margin: f64,
    /// `√2 / margin`, `+∞` when the margin is not positive.
    #[serde(with = "crate::ext_real")]
    pub c_eta_lambda: f64,
}

impl BsvieMargin {
    pub fn admissible(&self) -> bool {
        self.margin > 0.0
    }
}

/// Driver envelopes: `K_{g,y}` (L¹ role), `K_{g,z1}`, `K_{g,z2}` (L² role).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriverKernels {
    pub y: Kernel,
    pub z1: Kernel,
    pub z2: Kernel,
}

impl Default for DriverKernels {
    fn default() -> Self {
        DriverKernels { y: Kernel::Zero, z1: Kernel::Zero, z2: Kernel::Zero }
    }
}

pub fn bsvie_margin(kgy: &Kernel, kgz1: &Kernel, kgz2: &Kernel, eta: f64, lambda: f64) -> Result<BsvieMargin> {
    if eta.is_nan() || lambda.is_nan() {
        return invalid("eta/lambda is NaN");
    }
    let m = 1.0
        - kgy.weighted_norm(1, eta + lambda)?
        - kgz1.weighted_norm(2, lambda)?
        - kgz2.weighted_norm(2, eta + lambda)?;
    let c = if m > 0.0 { std::f64::consts::SQRT_2 / m } else { f64::INFINITY };
    Ok(BsvieMargin { margin: m, c_eta_lambda: c })
}

impl DriverKernels {
    pub fn margin(&self, eta: f64, lambda: f64) -> Result<BsvieMargin> {
        bsvie_margin(&self.y, &self.z1, &self.z2, eta, lambda)
    }

    /// `[K_{g,y}]_1(eta+lambda) + [K_{g,z1}]_2(lambda) + [K_{g,z2}]_2(eta+lambda)`.
    pub fn norm_sum(&self, eta: f64, lambda: f64) -> Result<f64> {
        Ok(1.0 - self.margin(eta, lambda)?.margin)
    }
}

/// Lipschitz envelopes of a controlled drift/diffusion in state and control.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlKernels {
    pub bx: Kernel,
    pub bu: Kernel,
    pub sx: Kernel,
    pub su: Kernel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlAdmissibility {
    pub ok: bool,
    #[serde(with = "crate::ext_real")]
    pub rho_star: f64,
    /// Which clause fails, when `ok` is false.
    pub failure: Option<String>,
}

pub fn control_admissible(k: &ControlKernels, mu: f64, lambda: f64) -> Result<ControlAdmissibility> {
    if mu.is_nan() || lambda.is_nan() {
        return invalid("mu/lambda is NaN");
    }
    for kern in [&k.bx, &k.bu, &k.sx, &k.su] {
        kern.validate()?;
    }
    let state = critical_weight(&k.bx, &k.sx)?;
    let control_floor = k.bu.divergence_threshold().max(k.su.divergence_threshold());
    let rho_star = state.rho.max(control_floor).max(0.0);
    let failure = if !(mu > rho_star) {
        Some(format!("weight mu = {mu} does not exceed the critical weight {rho_star}"))
    } else if !(lambda >= 2.0 * mu) {
        Some(format!("discount lambda = {lambda} is below 2 mu = {}", 2.0 * mu))
    } else {
        None
    };
    Ok(ControlAdmissibility { ok: failure.is_none(), rho_star, failure })
}

/// Serializable summary of an admissibility query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    #[serde(with = "crate::ext_real")]
    pub rho_star: f64,
    #[serde(with = "crate::ext_real::opt", default)]
    pub margin: Option<f64>,
    #[serde(with = "crate::ext_real::opt", default)]
    pub contraction_constant: Option<f64>,
    pub admissible: bool,
    pub diagnostic: Option<String>,
}
