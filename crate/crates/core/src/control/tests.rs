use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::gamma;

use super::*;
use crate::linear::bsvie_to_bsde;

fn tree(t: f64, n: usize) -> Ensemble {
    Ensemble::tree(t, n).unwrap()
}

fn opts() -> BsvieOptions {
    BsvieOptions::default()
}

fn lq(a: f64, b: f64, c: f64, d: f64, m1: f64, m2: f64, m3: f64, x0: f64, mu: f64, lambda: f64) -> ControlProblem {
    lq_problem(LqCoefficients::scalar(a, b, c, d), QuadraticCost::scalar(m1, m2, m3), vec![x0], mu, lambda).unwrap()
}

/// Nonlinear scalar dynamics with finite-difference Jacobians.
struct Wiggly;

impl Coefficients for Wiggly {
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
        out[0] = -x[0] + 0.3 * x[0].sin() + 0.5 * u[0];
    }
    fn diffusion(&self, _: &Cell, x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = 0.2 * x[0] + 0.1 * u[0].cos();
    }
}

const WIGGLY: Lipschitz = Lipschitz { bx: 1.3, bu: 0.5, sx: 0.2, su: 0.1 };

fn random_direction(e: &Ensemble, l: usize, seed: u64) -> Process {
    // Adapted: depends on the path only through the increments before the node.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coef: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Process::from_fn(e, l, |i, p, o| {
        let w = e.w(i, p)[0];
        for (c, v) in o.iter_mut().enumerate() {
            *v = coef[0] + coef[1] * w + coef[2] * (w * w - e.t(i)) + coef[3] * (c as f64 + 1.0) * (e.t(i) + 0.3).sin();
        }
    })
}

#[test]
fn cost_examples() {
    let e = tree(1.0, 10);
    let zero = Process::zeros_on(&e, 1);
    let p = lq(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 2.0);
    assert_eq!(cost(&p, &zero, &e).unwrap(), 0.0);

    let lambda = 2.0;
    let mut unit = p.clone();
    unit.cost = Arc::new(QuadraticCost::constant(1, 1, 1.0));
    let j = cost(&unit, &zero, &e).unwrap();
    let exact = (1.0 - (-lambda * 1.0f64).exp()) / lambda;
    assert!((j - exact).abs() < e.h(), "{j} vs {exact}");

    let x0 = 1.5;
    let p = lq(0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, x0, 1.0, lambda);
    let j = cost(&p, &zero, &e).unwrap();
    let exact = x0 * x0 * (1.0 - (-lambda * 1.0f64).exp()) / (2.0 * lambda);
    assert!((j - exact).abs() < x0 * x0 * e.h(), "{j} vs {exact}");
}

#[test]
fn inadmissible_pair_is_rejected() {
    let e = tree(1.0, 4);
    let p = lq(1.0, 1.0, 0.5, 0.0, 1.0, 1.0, 0.0, 1.0, 0.5, 2.0);
    assert!(matches!(cost(&p, &Process::zeros_on(&e, 1), &e), Err(Error::Inadmissible(_))));
    let p = lq(1.0, 1.0, 0.5, 0.0, 1.0, 1.0, 0.0, 1.0, 3.0, 4.0);
    let err = cost(&p, &Process::zeros_on(&e, 1), &e).unwrap_err();
    assert!(err.to_string().contains("2 mu"), "{err}");
}

#[test]
fn adjoint_trivial_cases() {
    let e = tree(1.0, 6);
    let u = random_direction(&e, 1, 3);
    // No running cost in x and linear dynamics: the adjoint vanishes.
    let p = lq(-0.5, 1.0, 0.3, 0.1, 0.0, 1.0, 0.0, 1.0, 1.0, 2.0);
    let x = state(&p, &u, &e).unwrap();
    let adj = adjoint_solve(&p, &u, &x, &e, &opts()).unwrap();
    assert_eq!(adj.y.max_abs(), 0.0);
    assert!(adj.z.data().iter().all(|v| *v == 0.0));
    // State-independent dynamics: Ŷ = E_t[h_x] = X.
    let p = lq(0.0, 1.0, 0.0, 0.5, 1.0, 1.0, 0.0, 1.0, 1.0, 2.0);
    let x = state(&p, &u, &e).unwrap();
    let adj = adjoint_solve(&p, &u, &x, &e, &opts()).unwrap();
    for i in 0..6 {
        for q in 0..e.paths() {
            assert!((adj.y.at(i, q)[0] - x.at(i, q)[0]).abs() < 1e-13);
        }
    }
}

#[test]
fn control_free_quadratic_stationarity() {
    let e = tree(1.0, 6);
    let (m2, m3) = (2.0, 0.5);
    let p = lq(-0.5, 0.0, 0.3, 0.0, 1.0, m2, m3, 1.0, 1.0, 2.0);
    let u = random_direction(&e, 1, 5);
    let ev = evaluate(&p, &u, &e, &opts()).unwrap();
    for i in 0..6 {
        for q in 0..e.paths() {
            let expect = m2 * u.at(i, q)[0] + m3 * ev.x.at(i, q)[0];
            assert!((ev.report.g.at(i, q)[0] - expect).abs() < 1e-13);
        }
    }
    assert!(ev.report.r > 0.1);
    let ustar = Process::from_fn(&e, 1, |i, q, o| o[0] = -m3 * ev.x.at(i, q)[0] / m2);
    let rep = stationarity_residual(&p, &ustar, &e, &opts()).unwrap();
    assert!(rep.r < 1e-14, "{}", rep.r);
}

#[test]
fn lq_gradient_matches_condition() {
    let e = tree(1.0, 6);
    let (a, b, c, d, m1, m2, m3) = (-0.4, 0.7, 0.2, 0.3, 1.0, 0.5, 0.2);
    let (lambda, h) = (3.0, e.h());
    let p = lq(a, b, c, d, m1, m2, m3, 1.0, 1.0, lambda);
    let u = random_direction(&e, 1, 9);
    let ev = evaluate(&p, &u, &e, &opts()).unwrap();
    for j in 0..6 {
        for q in 0..e.paths() {
            let mut lhs = m2 * u.at(j, q)[0] + m3 * ev.x.at(j, q)[0];
            for i in (j + 1)..6 {
                let ey = e.cond_expect(&ev.adjoint.y.component(i, 0), j)[q];
                lhs += (-lambda * (i - j) as f64 * h).exp() * (b * ey + d * ev.adjoint.z.at(i, j, q)[0]) * h;
            }
            assert!((ev.report.g.at(j, q)[0] - lhs).abs() < 1e-12);
        }
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let e = tree(1.0, 6);
    let cost = Arc::new(QuadraticCost { qx: vec![0.3], ..QuadraticCost::scalar(1.0, 0.5, 0.2) });
    let p = make_caputo_problem(0.75, Arc::new(Wiggly), WIGGLY, cost, vec![0.8], 10.0).unwrap();
    assert!(p.admissibility().unwrap().ok);
    let u = random_direction(&e, 1, 1);
    for seed in 0..5 {
        let du = random_direction(&e, 1, 100 + seed);
        let chk = gradient_check(&p, &u, &du, 1e-4, &e, &opts()).unwrap();
        assert!(chk.rel_err < 1e-3, "{chk:?}");
    }
}

#[test]
fn variational_and_adjoint_pairings_agree() {
    let e = tree(1.0, 5);
    let cost = Arc::new(QuadraticCost::scalar(1.0, 0.5, 0.2));
    let p = make_sde_problem(Arc::new(Wiggly), WIGGLY, cost, vec![0.8], 3.0, 6.0);
    let u = random_direction(&e, 1, 2);
    let du = random_direction(&e, 1, 7);
    let (a, b) = variational_pairing(&p, &u, &du, &e, &opts()).unwrap();
    assert!((a - b).abs() < 1e-8 * a.abs().max(1.0), "{a} vs {b}");
}

#[test]
fn control_free_cost_optimum_is_zero() {
    let e = tree(1.0, 5);
    let p = lq(-0.5, 0.0, 0.3, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 2.0);
    let u0 = random_direction(&e, 1, 4);
    let res = optimize(&p, &u0, &e, &OptimizeOptions::default()).unwrap();
    assert_eq!(res.status, OptimizeStatus::Converged);
    assert!((0..5).all(|i| res.u.node(i).iter().all(|v| v.abs() < 1e-8)));
}

fn solved_lq(e: &Ensemble) -> (ControlProblem, OptimizeResult) {
    let p = lq(-0.5, 1.0, 0.2, 0.1, 2.0, 0.5, 0.0, 1.0, 1.5, 3.0);
    assert!(p.convex);
    let res = optimize(&p, &Process::zeros_on(e, 1), e, &OptimizeOptions { tol: 1e-9, ..Default::default() }).unwrap();
    (p, res)
}

#[test]
fn lq_descent_is_monotone_and_converges() {
    let e = tree(1.0, 8);
    let (_, res) = solved_lq(&e);
    assert_eq!(res.status, OptimizeStatus::Converged);
    assert!(res.report.r < 1e-6);
    for w in res.trace.windows(2) {
        assert!(w[1].cost <= w[0].cost + 1e-14, "{w:?}");
    }
    // Necessity: the gradient itself is small at an unconstrained optimum.
    assert!(res.report.g_norm < 10.0 * 1e-9);
}

#[test]
fn lq_optimum_is_a_minimum() {
    let e = tree(1.0, 6);
    let (p, res) = solved_lq(&e);
    let j = res.report.cost;
    for seed in 0..10 {
        let mut v = res.u.clone();
        v.add_scaled(1e-2, &random_direction(&e, 1, 40 + seed));
        assert!(cost(&p, &v, &e).unwrap() >= j - 1e-8);
    }
}

#[test]
fn residual_is_linear_near_optimum() {
    let e = tree(1.0, 6);
    let (p, res) = solved_lq(&e);
    let v = random_direction(&e, 1, 77);
    let r = |delta: f64| {
        let mut w = res.u.clone();
        w.add_scaled(delta, &v);
        stationarity_residual(&p, &w, &e, &opts()).unwrap().r
    };
    let slope = (r(1e-2) / r(1e-3)) / 10.0;
    assert!((slope - 1.0).abs() < 0.2, "{slope}");
}

#[test]
fn box_constraints() {
    let set = ControlSet::Box { lo: vec![-0.1], hi: vec![0.2] };
    let mut v = [0.7];
    set.project(&mut v);
    assert_eq!(v, [0.2]);
    let mut w = v;
    set.project(&mut w);
    assert_eq!(v, w);
    let ball = ControlSet::Ball { radius: 1.0 };
    let mut b = [3.0, 4.0];
    ball.project(&mut b);
    assert!((b[0] - 0.6).abs() < 1e-15 && (b[1] - 0.8).abs() < 1e-15);

    let e = tree(1.0, 6);
    let p = lq(-0.5, 1.0, 0.2, 0.1, 2.0, 0.5, 0.0, 1.0, 1.5, 3.0).with_set(set.clone());
    let res = optimize(&p, &Process::zeros_on(&e, 1), &e, &OptimizeOptions::default()).unwrap();
    assert_eq!(res.status, OptimizeStatus::Converged);
    assert!(res.u.data().iter().all(|v| set.contains(&[*v], 1e-15)));
    // The lower bound is active somewhere, so the gradient does not vanish there.
    assert!(res.report.g_norm > 1e-3);
}

fn f_alpha(alpha: f64, lbx: f64, lsx: f64, rho: f64) -> f64 {
    lbx * rho.powf(-alpha) + lsx * gamma(2.0 * alpha - 1.0).sqrt() / gamma(alpha) * (2.0 * rho).powf(0.5 - alpha)
}

#[test]
fn caputo_critical_weight() {
    let lips = Lipschitz { bx: 1.0, bu: 1.0, sx: 1.0, su: 1.0 };
    let rho = caputo_rho_star(0.75, &lips).unwrap();
    let (mut lo, mut hi) = (1e-6f64, 1e6f64);
    for _ in 0..300 {
        let mid = (lo * hi).sqrt();
        if f_alpha(0.75, 1.0, 1.0, mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    assert!((rho - lo).abs() < 1e-8 * lo, "{rho} vs {lo}");
    for bad in [0.5, 1.0, 0.3] {
        assert!(caputo_rho_star(bad, &lips).is_err());
        let c = Arc::new(QuadraticCost::scalar(1.0, 1.0, 0.0));
        assert!(make_caputo_problem(bad, Arc::new(Wiggly), lips, c, vec![0.0], 10.0).is_err());
    }
}

#[test]
fn caputo_examples() {
    let e = tree(1.0, 6);
    let alpha = 0.75;
    // Control-free dynamics: the gradient is the running-cost partial alone.
    let lin = LqCoefficients::scalar(-0.5, 0.0, 0.2, 0.0);
    let lips = Lipschitz { bx: 0.5, bu: 0.0, sx: 0.2, su: 0.0 };
    let c = Arc::new(QuadraticCost::scalar(1.0, 1.0, 0.3));
    let p = make_caputo_problem(alpha, Arc::new(lin), lips, c, vec![1.0], 8.0).unwrap();
    let u = random_direction(&e, 1, 12);
    let ev = evaluate(&p, &u, &e, &opts()).unwrap();
    for i in 0..6 {
        for q in 0..e.paths() {
            let hu = u.at(i, q)[0] + 0.3 * ev.x.at(i, q)[0];
            assert!((ev.report.g.at(i, q)[0] - hu).abs() < 1e-13);
        }
    }
    // Constant unit drift: X(t) = x0 + t^α / Γ(α + 1).
    struct Unit;
    impl Coefficients for Unit {
        fn state_dim(&self) -> usize {
            1
        }
        fn noise_dim(&self) -> usize {
            1
        }
        fn control_dim(&self) -> usize {
            1
        }
        fn drift(&self, _: &Cell, _: &[f64], _: &[f64], out: &mut [f64]) {
            out[0] = 1.0;
        }
        fn diffusion(&self, _: &Cell, _: &[f64], _: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
    }
    let c = Arc::new(QuadraticCost::scalar(1.0, 1.0, 0.0));
    let p = make_caputo_problem(alpha, Arc::new(Unit), lips, c, vec![0.5], 8.0).unwrap();
    let x = state(&p, &Process::zeros_on(&e, 1), &e).unwrap();
    for i in 0..=6 {
        let exact = 0.5 + e.t(i).powf(alpha) / gamma(alpha + 1.0);
        assert!((x.at(i, 0)[0] - exact).abs() < 1e-10);
    }
}

#[test]
fn sde_adjoint_reduces_to_bsde() {
    let c = Arc::new(QuadraticCost::scalar(1.0, 1.0, 0.0));
    let mut norms = Vec::new();
    for n in [4, 8] {
        let e = tree(1.0, n);
        let p = make_sde_problem(Arc::new(Wiggly), WIGGLY, c.clone(), vec![1.0], 3.0, 6.0);
        let u = random_direction(&e, 1, 8);
        let ev = evaluate(&p, &u, &e, &opts()).unwrap();
        let red = bsvie_to_bsde(&ev.adjoint, p.lambda, p.mu, &e).unwrap();
        norms.push(red.residual_norm);
    }
    assert!(norms[1] < 0.75 * norms[0], "{norms:?}");
}

fn affine_spec(a: [Arc<dyn MatrixField>; 4], k: [Kernel; 4], coeffs: AffineIntegro) -> IntegroSpec {
    let (lbx, lbu, lsx, lsu, l) = coeffs.lipschitz();
    IntegroSpec { coeffs: Arc::new(coeffs), a, bounds: IntegroBounds { lbx, lbu, lsx, lsu, l, k } }
}

fn zero_field() -> Arc<dyn MatrixField> {
    Arc::new(crate::svie::ConstMatrix(vec![0.0]))
}

fn decay_field() -> Arc<dyn MatrixField> {
    Arc::new(|c: &Cell, out: &mut [f64]| out[0] = (-(c.t - c.s)).exp())
}

use crate::svie::MatrixField;

#[test]
fn integro_without_memory_is_the_plain_problem() {
    let e = tree(1.0, 5);
    let co = AffineIntegro { bx: -0.5, bu: 1.0, sx: 0.2, su: 0.1, s0: 0.05, ..Default::default() };
    let spec = affine_spec([zero_field(), zero_field(), zero_field(), zero_field()], [Kernel::Zero; 4], co);
    let cost = Arc::new(QuadraticCost::scalar(1.0, 1.0, 0.0));
    let lift = integro_lift(spec, cost.clone(), vec![1.0], 1.5, 3.0).unwrap();
    let u = random_direction(&e, 1, 6);
    let xl = state(&lift.problem, &u, &e).unwrap();
    let plain = lq(-0.5, 1.0, 0.2, 0.1, 1.0, 1.0, 0.0, 1.0, 1.5, 3.0);
    let mut plain = plain;
    plain.coeffs = Arc::new(Shifted(LqCoefficients::scalar(-0.5, 1.0, 0.2, 0.1), 0.05));
    let x = state(&plain, &u, &e).unwrap();
    for i in 0..=5 {
        for q in 0..e.paths() {
            let v = xl.at(i, q);
            assert!((v[0] - x.at(i, q)[0]).abs() < 1e-14);
            assert!(v[1..].iter().all(|z| *z == 0.0));
        }
    }
}

/// Linear dynamics plus a constant diffusion offset.
struct Shifted(LqCoefficients, f64);

impl Coefficients for Shifted {
    fn state_dim(&self) -> usize {
        1
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn drift(&self, c: &Cell, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.0.drift(c, x, u, out)
    }
    fn diffusion(&self, c: &Cell, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.0.diffusion(c, x, u, out);
        out[0] += self.1;
    }
}

fn memory_lift(n: usize) -> (IntegroLift, Ensemble) {
    let e = tree(1.0, n);
    let co = AffineIntegro { bx: -0.3, bu: 0.5, b1: 0.2, b2: 0.4, sx: 0.1, su: 0.1, s3: 0.1, s4: 0.2, s0: 0.05, ..Default::default() };
    let k = Kernel::exponential(1.0, 1.0);
    let spec = affine_spec([decay_field(), decay_field(), decay_field(), decay_field()], [k; 4], co);
    let cost = Arc::new(QuadraticCost { qx: vec![0.2], ..QuadraticCost::scalar(1.0, 1.0, 0.1) });
    (integro_lift(spec, cost, vec![1.0], 4.0, 8.0).unwrap(), e)
}

#[test]
fn integro_delayed_control_quadrature() {
    let e = tree(1.0, 6);
    let co = AffineIntegro { bx: -0.3, bu: 0.5, b2: 0.4, sx: 0.1, ..Default::default() };
    let spec = affine_spec(
        [zero_field(), decay_field(), zero_field(), zero_field()],
        [Kernel::Zero, Kernel::exponential(1.0, 1.0), Kernel::Zero, Kernel::Zero],
        co,
    );
    let lift = integro_lift(spec, Arc::new(QuadraticCost::scalar(1.0, 1.0, 0.0)), vec![1.0], 1.5, 3.0).unwrap();
    let u = random_direction(&e, 1, 21);
    let x = state(&lift.problem, &u, &e).unwrap();
    let h = e.h();
    for i in 0..=6 {
        for q in 0..e.paths() {
            let quad: f64 = (0..i).map(|j| (-(e.t(i) - e.t(j))).exp() * u.at(j, q)[0] * h).sum();
            assert!((x.at(i, q)[2] - quad).abs() < 1e-14);
        }
    }
}

#[test]
fn integro_expanded_condition_matches_lift() {
    let (lift, e) = memory_lift(6);
    let u = random_direction(&e, 1, 31);
    let cond = lift.conditions(&u, &e, &opts()).unwrap();
    let diff = cond.lifted.sub(&cond.expanded).max_abs();
    assert!(diff < 1e-12 * (1.0 + cond.lifted.max_abs()), "{diff}");
    let chk = lift.verify_anticipated_bsde(&u, &cond.x, &cond.adjoint, &e);
    assert!(chk.y_equation_gap < 1e-12, "{}", chk.y_equation_gap);
}

#[test]
fn integro_anticipated_residual_shrinks() {
    let mut norms = Vec::new();
    for n in [4, 8] {
        let (lift, e) = memory_lift(n);
        let u = Process::constant(&e, &[0.3]);
        let cond = lift.conditions(&u, &e, &opts()).unwrap();
        norms.push(lift.verify_anticipated_bsde(&u, &cond.x, &cond.adjoint, &e).residual_norm);
    }
    assert!(norms[1] < 0.75 * norms[0], "{norms:?}");
}

#[test]
fn integro_admissibility_names_clause() {
    let co = AffineIntegro { bx: 2.0, bu: 0.5, sx: 0.1, ..Default::default() };
    let spec = affine_spec([zero_field(), zero_field(), zero_field(), zero_field()], [Kernel::Zero; 4], co);
    let cost: Arc<dyn RunningCost> = Arc::new(QuadraticCost::scalar(1.0, 1.0, 0.0));
    let err = integro_lift(spec.clone(), cost.clone(), vec![1.0], 1.0, 4.0).err().unwrap();
    assert!(err.to_string().contains("sqrt(2 mu)"), "{err}");
    let err = integro_lift(spec.clone(), cost.clone(), vec![1.0], 4.0, 6.0).err().unwrap();
    assert!(err.to_string().contains("lambda >= 2 mu"), "{err}");
    let err = integro_lift(spec.clone(), cost.clone(), vec![1.0], -1.0, 6.0).err().unwrap();
    assert!(err.to_string().contains("mu > 0"), "{err}");
    let mut bad = spec;
    bad.bounds.k[1] = Kernel::exponential(-6.0, 1.0);
    let err = integro_lift(bad, cost, vec![1.0], 4.0, 8.0).err().unwrap();
    assert!(err.to_string().contains("[K2]"), "{err}");
}
