//! End-to-end acceptance checks. Runs without the libtest harness so that every
//! `criterion N: PASS|FAIL` line reaches stdout; exits non-zero if any criterion fails.

use std::collections::HashMap;
use std::panic;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use volterra_core::bsvie::{
    apriori_check, solve_bsvie, truncate_free_term, BsvieOptions, BsvieProblem, LinearDriver, SolveMode, ZeroDriver,
};
use volterra_core::control::{
    cost, evaluate, gradient_check, integro_lift, lq_problem, make_caputo_problem, optimize, AffineIntegro,
    ControlProblem, IntegroBounds, IntegroLift, IntegroSpec, LqCoefficients, OptimizeOptions, OptimizeStatus,
    QuadraticCost,
};
use volterra_core::kernel::critical_weight;
use volterra_core::linear::{bsvie_to_bsde, duality_check, variation_of_constants, LinearBsvie, LinearSvieSpec};
use volterra_core::stochastic::{Ensemble, Process, TwoParamProcess};
use volterra_core::svie::{Cell, LinearSvie, MatrixField};
use volterra_core::Kernel;

static REPORTED: AtomicBool = AtomicBool::new(false);

fn verdict(n: u8, pass: bool, detail: impl std::fmt::Display) -> bool {
    REPORTED.store(true, Ordering::SeqCst);
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

/// Least-squares slope of `ln err` against `ln h`.
fn order(hs: &[f64], errs: &[f64]) -> f64 {
    let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn tree(t: f64, n: usize) -> Ensemble {
    Ensemble::tree(t, n).unwrap()
}

fn opts() -> BsvieOptions {
    BsvieOptions::default()
}

/// Adapted random control direction built from polynomial and trigonometric features.
fn direction(e: &Ensemble, seed: u64) -> Process {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Process::from_fn(e, 1, |i, p, o| {
        let w = e.w(i, p)[0];
        o[0] = c[0] + c[1] * w + c[2] * (w * w - e.t(i)) + c[3] * (e.t(i) + 0.3).sin();
    })
}

fn criterion_01_kernel_norms_and_critical_weight() {
    let mut worst: f64 = 0.0;
    for alpha in [0.6, 0.75, 0.9] {
        let k = Kernel::caputo(alpha, 1.0);
        for rho in [0.5f64, 1.0, 2.0] {
            let exact = rho.powf(-alpha);
            let quad = k.weighted_norm_quadrature(1, rho).unwrap();
            let closed = k.weighted_norm(1, rho).unwrap();
            worst = worst.max(((quad - exact) / exact).abs()).max(((closed - exact) / exact).abs());
        }
    }
    // Independent bisection on 1/rho + (2 rho)^{-1/2} = 1.
    let f = |r: f64| 1.0 / r + (2.0 * r).powf(-0.5) - 1.0;
    let (mut lo, mut hi) = (0.5f64, 100.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let one = Kernel::constant(1.0);
    let rho = critical_weight(&one, &one).unwrap().rho;
    let rho_err = (rho - lo).abs();
    let pass = worst <= 1e-8 && rho_err <= 1e-8;
    assert!(verdict(1, pass, format!("max rel err {worst:.2e} (tol 1e-8); rho_SDE = {rho:.10} vs oracle {lo:.10}")));
}

fn criterion_02_trivial_equation_is_exact() {
    let n = 8;
    let e = tree(1.0, n);
    let paths = e.paths();
    let mut worst: f64 = 0.0;
    let mut worst_m: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table: Vec<f64> = (0..(n + 1) * paths).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let psi = Process::from_vec(n + 1, paths, 1, table).unwrap();
        let p = BsvieProblem::new(Arc::new(ZeroDriver(1)), psi.clone(), 1.0, 0.0);
        let sol = solve_bsvie(&p, &e, &opts()).unwrap();
        worst_m = worst_m.max(sol.diagnostics.m_residual);
        // Brute-force conditional expectation: average over paths sharing the increment signs so far.
        for i in 0..=n {
            let key = |q: usize| -> Vec<bool> { (0..i).map(|j| e.dw(j, q)[0] > 0.0).collect() };
            let mut groups: HashMap<Vec<bool>, (f64, usize)> = HashMap::new();
            for q in 0..paths {
                let g = groups.entry(key(q)).or_default();
                g.0 += psi.at(i, q)[0];
                g.1 += 1;
            }
            for q in 0..paths {
                let (s, c) = groups[&key(q)];
                worst = worst.max((sol.y.at(i, q)[0] - s / c as f64).abs());
            }
        }
    }
    let pass = worst <= 1e-13 && worst_m <= 1e-12;
    assert!(verdict(2, pass, format!("max |Y - E_t psi| = {worst:.2e}, M-constraint residual {worst_m:.2e}")));
}

fn apriori_case(e: &Ensemble, c: f64, label: &str) -> (bool, String) {
    let n = e.steps();
    let psi = Process::from_fn(e, 1, |i, p, o| o[0] = (e.w(n, p)[0]).sin() + e.t(i) * e.w(i, p)[0]);
    let p = BsvieProblem::new(Arc::new(LinearDriver::scalar(c, 0.0, 0.0)), psi, 1.0, 0.0);
    let mode = BsvieOptions { mode: SolveMode::Picard, ..opts() };
    let sol = solve_bsvie(&p, e, &mode).unwrap();
    let chk = apriori_check(&sol, &p, e, 0.05).unwrap();
    let margin = p.margin().unwrap();
    let kappa = 1.0 - margin.margin;
    let bound = 1.2 * margin.c_eta_lambda * kappa;
    let ratio = sol.diagnostics.ratios.iter().cloned().fold(0.0, f64::max);
    let ok = chk.ok && ratio <= bound;
    (
        ok,
        format!(
            "[{label} c={c}: |(Y,Z)| {:.4} <= 1.05*{:.4}; max ratio {ratio:.3} <= {bound:.3} (kernel sum {kappa:.3})]",
            chk.lhs, chk.rhs
        ),
    )
}

fn criterion_03_apriori_bound_and_contraction() {
    let mc = Ensemble::monte_carlo(1.0, 64, 2000, 1, 11).unwrap();
    let tr = tree(1.0, 10);
    let mut pass = true;
    let mut detail = String::new();
    for c in [0.25, 0.5, 0.75] {
        for (e, label) in [(&mc, "mc"), (&tr, "tree")] {
            let (ok, d) = apriori_case(e, c, label);
            pass &= ok;
            detail.push_str(&d);
        }
    }
    assert!(verdict(3, pass, detail));
}

fn criterion_04_finite_horizon_truncation() {
    let (t_max, n) = (16.0, 16);
    let e = tree(t_max, n);
    let h = e.h();
    let psi = Process::from_fn(&e, 1, |i, p, o| {
        let k = (1.0 / h).round() as usize;
        o[0] = (-e.t(i)).exp() * e.w(i.min(k), p)[0];
    });
    let horizons = [2.0, 4.0, 8.0, 16.0];
    let sols: Vec<_> = horizons
        .iter()
        .map(|t| {
            let node = (t / h).round() as usize;
            let p = BsvieProblem::new(Arc::new(LinearDriver::scalar(0.5, 0.0, 0.0)), truncate_free_term(&psi, &e, node), 1.0, 0.0);
            solve_bsvie(&p, &e, &opts()).unwrap()
        })
        .collect();
    let dist: Vec<f64> = sols.windows(2).map(|w| w[1].distance(&w[0], &e, 0.0)).collect();
    // d[k] compares horizons T_k and 2 T_k; decay is required from T = 4 onwards.
    let factor = dist[1] / dist[2];
    let pass = factor >= 2.0;
    assert!(verdict(
        4,
        pass,
        format!("distances T->2T for T=2,4,8: {list}; decay factor from T=4 to T=8 {factor:.2} (>= 2)", list = sci(&dist))
    ));
}

fn criterion_05_variation_of_constants() {
    let (a, lambda, t_end) = (0.5, 1.0, 2.0);
    let e = tree(t_end, 10);
    let spec = LinearBsvie::scalar(a, 0.0, lambda, 0.0);
    let r = variation_of_constants(&spec, &Process::constant(&e, &[1.0]), &e, 1e-12, Some(&opts())).unwrap();
    let mut closed: f64 = 0.0;
    for i in 0..10 {
        let tau = t_end - e.t(i);
        let exact = 1.0 + a * (((a - lambda) * tau).exp() - 1.0) / (a - lambda);
        closed = closed.max((r.y.at(i, 0)[0] - exact).abs());
    }
    let closed_ok = closed <= 3.0 * e.h();

    let t = 0.5;
    let spec = LinearBsvie::scalar(0.5, 0.3, 1.0, 0.0);
    let mut hs = Vec::new();
    let mut gaps = Vec::new();
    for n in [4, 8, 16] {
        let e = tree(t, n);
        let psi = Process::from_fn(&e, 1, |i, p, o| o[0] = e.w(n, p)[0].cos() + e.t(i) * e.w(i, p)[0]);
        let r = variation_of_constants(&spec, &psi, &e, 1e-12, Some(&opts())).unwrap();
        hs.push(e.h());
        gaps.push(r.gap.unwrap());
    }
    let ord = order(&hs, &gaps);
    let pass = closed_ok && ord >= 0.8;
    assert!(verdict(
        5,
        pass,
        format!("closed-form err {closed:.3e} <= 3h = {:.3e}; formula vs solver gaps {list}, order {ord:.2} (>= 0.8)", 3.0 * 0.2, list = sci(&gaps))
    ));
}

fn envelope(v: f64) -> Kernel {
    if v == 0.0 {
        Kernel::Zero
    } else {
        Kernel::constant(v.abs())
    }
}

fn criterion_06_duality() {
    let t = 0.5;
    let mut pass = true;
    let mut detail = String::new();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (c, d) = (rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5));
        let f: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fwd = LinearSvieSpec { eq: LinearSvie::scalar(c, d), kc: envelope(c), kd: envelope(d) };
        let rho = critical_weight(&fwd.kc, &fwd.kd).unwrap().rho.max(0.0);
        let (mu, lambda) = (rho + 0.5, rho + 1.0);
        let mut hs = Vec::new();
        let mut gaps = Vec::new();
        for n in [4, 8, 16] {
            let e = tree(t, n);
            let phi = Process::from_fn(&e, 1, |i, p, o| o[0] = f[0] + f[1] * e.w(i, p)[0] + f[2] * e.t(i).sin());
            let psi = Process::from_fn(&e, 1, |i, p, o| o[0] = g[0] + g[1] * e.w(n, p)[0] + g[2] * e.t(i));
            let r = duality_check(&fwd, &phi, &psi, mu, 0.0, lambda, &e, &opts()).unwrap();
            hs.push(e.h());
            gaps.push(r.gap);
        }
        let ord = order(&hs, &gaps);
        pass &= ord >= 0.8;
        detail.push_str(&format!("[C={c:.2} D={d:.2}: gaps {list} order {ord:.2}]", list = sci(&gaps)));
    }
    let e = tree(t, 8);
    let zero = LinearSvieSpec { eq: LinearSvie::scalar(0.0, 0.0), kc: Kernel::Zero, kd: Kernel::Zero };
    let phi = Process::from_fn(&e, 1, |i, p, o| o[0] = 0.3 + e.w(i, p)[0]);
    let psi = Process::from_fn(&e, 1, |_, p, o| o[0] = e.w(8, p)[0].powi(2));
    let trivial = duality_check(&zero, &phi, &psi, 0.5, 0.0, 1.0, &e, &opts()).unwrap().gap;
    pass &= trivial <= 1e-12;
    detail.push_str(&format!(" C=D=0 gap {trivial:.2e} (<= 1e-12)"));
    assert!(verdict(6, pass, detail));
}

fn criterion_07_bsde_reduction() {
    let (t, lambda, mu) = (1.0, 1.0, 0.5);
    let mut hs = Vec::new();
    let mut res = Vec::new();
    for n in [4, 8, 16] {
        let e = tree(t, n);
        let psi = Process::from_fn(&e, 1, |i, p, o| o[0] = e.w(n, p)[0].cos() + e.t(i) * e.w(i, p)[0]);
        let p = BsvieProblem::new(Arc::new(LinearDriver::scalar(0.4, 0.0, 0.2)), psi, lambda, 0.0);
        let sol = solve_bsvie(&p, &e, &opts()).unwrap();
        res.push(bsvie_to_bsde(&sol, lambda, mu, &e).unwrap().residual_norm);
        hs.push(e.h());
    }
    let ord = order(&hs, &res);

    let t_end = 2.0;
    let e = tree(t_end, 8);
    let sol = volterra_core::bsvie::MSolution {
        y: Process::constant(&e, &[1.0]),
        z: TwoParamProcess::zeros(&e, 9, 8, 1, 1).unwrap(),
        diagnostics: Default::default(),
    };
    let r = bsvie_to_bsde(&sol, lambda, 0.25, &e).unwrap();
    let closed = (0..=8)
        .map(|i| (r.cy.at(i, 0)[0] - (1.0 - (-lambda * (t_end - e.t(i))).exp()) / lambda).abs())
        .fold(0.0, f64::max);
    let pass = ord >= 0.8 && closed <= 2.0 * e.h();
    assert!(verdict(
        7,
        pass,
        format!("residual norms {list} order {ord:.2} (>= 0.8); Y=1 err {closed:.3e} <= 2h = {:.3e}", 2.0 * e.h(), list = sci(&res))
    ));
}

fn lq_example() -> ControlProblem {
    lq_problem(LqCoefficients::scalar(-0.5, 1.0, 0.2, 0.1), QuadraticCost::scalar(2.0, 0.5, 0.0), vec![1.0], 1.5, 3.0).unwrap()
}

fn caputo_example() -> ControlProblem {
    let coeffs = LqCoefficients::scalar(-0.4, 0.6, 0.2, 0.1);
    let lips = coeffs.lipschitz();
    let c = Arc::new(QuadraticCost { qx: vec![0.3], ..QuadraticCost::scalar(1.0, 0.5, 0.2) });
    make_caputo_problem(0.75, Arc::new(coeffs), lips, c, vec![0.8], 10.0).unwrap()
}

fn criterion_08_gradient_matches_finite_differences() {
    let e = tree(1.0, 8);
    let mut worst: f64 = 0.0;
    for p in [lq_example(), caputo_example()] {
        assert!(p.admissibility().unwrap().ok);
        let u = direction(&e, 1);
        for seed in 0..5 {
            let chk = gradient_check(&p, &u, &direction(&e, 100 + seed), 1e-4, &e, &opts()).unwrap();
            worst = worst.max(chk.rel_err);
        }
    }
    assert!(verdict(8, worst <= 1e-3, format!("max relative error {worst:.2e} over 10 directions (<= 1e-3)")));
}

fn criterion_09_lq_optimality() {
    let n = 8;
    let e = tree(1.0, n);
    let p = lq_example();
    let (b, d, m2, m3, lambda, h) = (1.0, 0.1, 0.5, 0.0, p.lambda, e.h());
    let res = optimize(&p, &Process::zeros_on(&e, 1), &e, &OptimizeOptions { tol: 1e-9, ..Default::default() }).unwrap();
    let monotone = res.trace.windows(2).all(|w| w[1].cost <= w[0].cost + 1e-14);
    let ev = evaluate(&p, &res.u, &e, &opts()).unwrap();
    // Node-wise first-order condition rebuilt from the adjoint pair.
    let mut cond: f64 = 0.0;
    for j in 0..n {
        for q in 0..e.paths() {
            let mut v = m2 * res.u.at(j, q)[0] + m3 * ev.x.at(j, q)[0];
            for i in (j + 1)..n {
                let ey = e.cond_expect(&ev.adjoint.y.component(i, 0), j)[q];
                v += (-lambda * (i - j) as f64 * h).exp() * (b * ey + d * ev.adjoint.z.at(i, j, q)[0]) * h;
            }
            cond = cond.max(v.abs());
        }
    }
    let j = res.report.cost;
    let mut drop: f64 = 0.0;
    for seed in 0..10 {
        let mut v = res.u.clone();
        v.add_scaled(1e-2, &direction(&e, 40 + seed));
        drop = drop.max(j - cost(&p, &v, &e).unwrap());
    }
    let pass = res.status == OptimizeStatus::Converged && res.report.r < 1e-6 && monotone && cond <= 1e-6 && drop <= 1e-8;
    assert!(verdict(
        9,
        pass,
        format!(
            "r = {:.2e} (< 1e-6), monotone trace {monotone}, node-wise condition {cond:.2e} (<= 1e-6), largest cost drop {drop:.2e} (<= 1e-8)",
            res.report.r
        )
    ));
}

fn memory_lift(n: usize) -> (IntegroLift, Ensemble) {
    let e = tree(1.0, n);
    let co = AffineIntegro { bx: -0.3, bu: 0.5, b1: 0.2, b2: 0.4, sx: 0.1, su: 0.1, s3: 0.1, s4: 0.2, s0: 0.05, ..Default::default() };
    let (lbx, lbu, lsx, lsu, l) = co.lipschitz();
    let decay: Arc<dyn MatrixField> = Arc::new(|c: &Cell, out: &mut [f64]| out[0] = (-(c.t - c.s)).exp());
    let k = Kernel::exponential(1.0, 1.0);
    let spec = IntegroSpec {
        coeffs: Arc::new(co),
        a: [decay.clone(), decay.clone(), decay.clone(), decay],
        bounds: IntegroBounds { lbx, lbu, lsx, lsu, l, k: [k; 4] },
    };
    let c = Arc::new(QuadraticCost { qx: vec![0.2], ..QuadraticCost::scalar(1.0, 1.0, 0.1) });
    (integro_lift(spec, c, vec![1.0], 4.0, 8.0).unwrap(), e)
}

fn criterion_10_integro_lift() {
    let (lift, e) = memory_lift(6);
    let u = direction(&e, 31);
    let cond = lift.conditions(&u, &e, &opts()).unwrap();
    let diff = cond.lifted.sub(&cond.expanded).max_abs() / (1.0 + cond.lifted.max_abs());
    let mut hs = Vec::new();
    let mut res = Vec::new();
    for n in [4, 8, 16] {
        let (lift, e) = memory_lift(n);
        let u = Process::constant(&e, &[0.3]);
        let cond = lift.conditions(&u, &e, &opts()).unwrap();
        res.push(lift.verify_anticipated_bsde(&u, &cond.x, &cond.adjoint, &e).residual_norm);
        hs.push(e.h());
    }
    let ord = order(&hs, &res);
    let pass = diff <= 1e-12 && ord >= 0.8;
    assert!(verdict(
        10,
        pass,
        format!("lifted vs expanded {diff:.2e} (<= 1e-12); anticipated residuals {list} order {ord:.2} (>= 0.8)", list = sci(&res))
    ));
}

fn main() {
    let checks: [fn(); 10] = [
        criterion_01_kernel_norms_and_critical_weight,
        criterion_02_trivial_equation_is_exact,
        criterion_03_apriori_bound_and_contraction,
        criterion_04_finite_horizon_truncation,
        criterion_05_variation_of_constants,
        criterion_06_duality,
        criterion_07_bsde_reduction,
        criterion_08_gradient_matches_finite_differences,
        criterion_09_lq_optimality,
        criterion_10_integro_lift,
    ];
    let mut failed = 0;
    for (k, check) in checks.into_iter().enumerate() {
        REPORTED.store(false, Ordering::SeqCst);
        if panic::catch_unwind(check).is_err() {
            failed += 1;
            if !REPORTED.load(Ordering::SeqCst) {
                println!("criterion {}: FAIL aborted before reaching a verdict", k + 1);
            }
        }
    }
    println!("acceptance: {} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
