//! Acceptance criteria, one line each. Run with
//! `cargo test -p iioss-core --test acceptance`.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use iioss_core::comparison::OsgoodIntegral;
use iioss_core::detectability::{
    certificate_from_lyapunov, estimate_lyap_candidate, falsify, ioss_residual, lyap_residual, sample_pair_scenarios,
    IossCertificate, LyapCertificate, SamplerConfig, SearchConfig,
};
use iioss_core::io::{write_residual_csv, write_scenario, write_trajectory_csv};
use iioss_core::observer::{derive_ioss_from_observer, luenberger, rgas_residual, sample_observer_scenarios, RgasCertificate};
use iioss_core::signals::{concat, discounted_integral, dist, DiscountedAccumulator, VectorSignal};
use iioss_core::system::{registry_get, simulate, REGISTRY};
use iioss_core::ComparisonFunction;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn no_params() -> BTreeMap<String, f64> {
    BTreeMap::new()
}

fn sq(a: f64) -> ComparisonFunction {
    ComparisonFunction::quadratic(a).unwrap()
}

fn lin(a: f64) -> ComparisonFunction {
    ComparisonFunction::linear(a).unwrap()
}

fn scalar_lyap() -> LyapCertificate {
    LyapCertificate::quadratic(DMatrix::from_element(1, 1, 1.0), sq(1.0), sq(1.0), (-1.0f64).exp()).unwrap()
}

fn scalar_ioss() -> IossCertificate {
    IossCertificate::new(sq(1.0), sq(1.0), sq(2.0), sq(1.0), (-1.0f64).exp()).unwrap()
}

fn scalar_rgas() -> RgasCertificate {
    RgasCertificate::new(lin(1.0), lin(1.0), lin(2.0 * 2f64.sqrt()), lin(1.0), (-2.0f64).exp()).unwrap()
}

fn gronwall() -> Outcome {
    let start = Instant::now();
    let osg = OsgoodIntegral::new(ComparisonFunction::identity()).unwrap();
    let mut worst = 0.0f64;
    let anchor = osg.bihari_bound(0.5, 1.0).unwrap();
    worst = worst.max((anchor / (0.5 * 3f64.exp()) - 1.0).abs());
    for i in 0..20 {
        let c = 0.1 + 0.1 * i as f64;
        let t = 0.1 * i as f64;
        let exact = c * (3.0 * t).exp();
        worst = worst.max((osg.bihari_bound(c, t).unwrap() / exact - 1.0).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-4 && secs < 1.0,
        format!("max rel err {worst:.2e} (tol 1e-4), {secs:.3}s (limit 1s)"),
    )
}

/// Dormand–Prince 5(4) on `z = ln v`, `z' = 3 ln(1 + 3e^z)`, with error
/// control at `tol`.
fn log_ode_oracle(c: f64, t_end: f64, tol: f64) -> f64 {
    let f = |z: f64| 3.0 * (3.0 * z.exp()).ln_1p();
    const A: [[f64; 6]; 6] = [
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const E: [f64; 7] = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];
    let (mut t, mut z, mut h) = (0.0f64, c.ln(), 1e-3f64);
    while t < t_end {
        h = h.min(t_end - t);
        let mut k = [0.0; 7];
        k[0] = f(z);
        for s in 0..6 {
            let zs = z + h * (0..=s).map(|j| A[s][j] * k[j]).sum::<f64>();
            k[s + 1] = f(zs);
        }
        let z5 = z + h * (0..6).map(|j| A[5][j] * k[j]).sum::<f64>();
        let err = (h * (0..7).map(|j| E[j] * k[j]).sum::<f64>()).abs();
        let scale = tol * (1.0 + z.abs());
        if err <= scale {
            t += h;
            z = z5;
        }
        h *= (0.9 * (scale / err.max(1e-300)).powf(0.2)).clamp(0.2, 5.0);
    }
    z
}

fn bihari_ode() -> Outcome {
    let start = Instant::now();
    let osg = OsgoodIntegral::new(ComparisonFunction::log_affine(1.0).unwrap()).unwrap();
    // pairs whose result stays inside f64 range
    let pairs = [
        (0.1, 0.0),
        (0.1, 2.0),
        (0.3, 0.5),
        (0.5, 1.0),
        (0.8, 1.5),
        (1.0, 1.0),
        (1.2, 0.7),
        (1.5, 1.2),
        (2.0, 0.5),
        (2.0, 1.5),
    ];
    let mut worst = 0.0f64;
    for (c, t) in pairs {
        let z_oracle = log_ode_oracle(c, t, 1e-10);
        let z = osg.bihari_bound_ln(c, t).unwrap();
        worst = worst.max((z - z_oracle).exp_m1().abs());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-3 && secs < 10.0,
        format!("max rel err {worst:.2e} over 10 pairs (tol 1e-3), {secs:.2}s (limit 10s)"),
    )
}

fn envelope() -> Outcome {
    let start = Instant::now();
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for (i, name) in REGISTRY.iter().enumerate() {
        let m = registry_get(name, &no_params()).unwrap();
        let cfg = SamplerConfig {
            count: 200,
            seed: 100 + i as u64,
            horizon: 2.0,
            knots: 8,
            dt: Some(0.01),
            ..Default::default()
        };
        for sc in sample_pair_scenarios(&m, &cfg).unwrap() {
            let a = simulate(&m, &sc.chi1, &sc.u1, &sc.d, sc.horizon, sc.dt).unwrap();
            let b = simulate(&m, &sc.chi2, &sc.u2, &sc.d, sc.horizon, sc.dt).unwrap();
            let du = sc.u1.sub(&sc.u2).unwrap().sup_norm(0.0, sc.horizon).unwrap();
            let c = m.osgood().envelope_constant(sc.chi_delta(), du, 0.0, sc.horizon);
            for (k, t) in a.times.iter().enumerate() {
                let bound = m.osgood().bihari_bound(c, *t).unwrap();
                let gap = dist(&a.states[k], &b.states[k]);
                if bound > 0.0 {
                    worst = worst.max(gap / bound);
                } else if gap > 0.0 {
                    worst = f64::INFINITY;
                }
            }
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1.0 + 1e-6 && secs < 60.0,
        format!("{checked} pairs, max gap/bound {worst:.3e} (limit 1+1e-6), {secs:.1}s (limit 60s)"),
    )
}

fn scalar_scenarios() -> Vec<iioss_core::TrajectoryPairScenario> {
    let m = registry_get("linear_scalar", &no_params()).unwrap();
    sample_pair_scenarios(
        &m,
        &SamplerConfig {
            count: 100,
            seed: 4,
            horizon: 2.0,
            knots: 8,
            dt: Some(1e-3),
            ..Default::default()
        },
    )
    .unwrap()
}

fn lyapunov_golden() -> Outcome {
    let m = registry_get("linear_scalar", &no_params()).unwrap();
    let cert = scalar_lyap();
    let (mut worst, mut sandwich) = (f64::NEG_INFINITY, 0usize);
    let mut all = true;
    for sc in scalar_scenarios() {
        let tol = 1e-3 * (1.0 + cert.u.eval(&sc.chi1, &sc.chi2));
        let r = lyap_residual(&m, &cert, &sc, Some(tol)).unwrap();
        worst = worst.max(r.series.max_residual - tol);
        sandwich += r.sandwich_violations.len();
        all &= r.holds();
    }
    outcome(
        all,
        format!("100 scenarios, max (residual - tol) {worst:.3e}, sandwich violations {sandwich}"),
    )
}

fn transform_soundness() -> Outcome {
    let m = registry_get("linear_scalar", &no_params()).unwrap();
    let lyap = scalar_lyap();
    let cert = certificate_from_lyapunov(&lyap);
    let mut exceptions = 0usize;
    let mut worst = f64::NEG_INFINITY;
    for sc in scalar_scenarios() {
        let tol = 1e-3 * (1.0 + lyap.u.eval(&sc.chi1, &sc.chi2));
        let l = lyap_residual(&m, &lyap, &sc, Some(tol)).unwrap();
        let r = ioss_residual(&m, &cert, &sc, Some(tol)).unwrap();
        worst = worst.max(r.max_residual - tol);
        exceptions += usize::from(!r.holds || !l.holds());
    }
    outcome(exceptions == 0, format!("100 scenarios, {exceptions} exceptions, max (residual - tol) {worst:.3e}"))
}

fn falsification() -> Outcome {
    let start = Instant::now();
    let m = registry_get("unstable_unobservable", &no_params()).unwrap();
    let id = ComparisonFunction::identity();
    let cert = IossCertificate::new(id.clone(), id.clone(), id.clone(), id, 0.5).unwrap();
    let search = SearchConfig {
        restarts: 10,
        segments: 4,
        horizon: 2.0,
        seed: 1,
        evals_per_restart: 200,
        wall_clock: Some(60.0),
        ..Default::default()
    };
    let out = falsify(&m, &cert, &search).unwrap();
    let re = out.reverified.as_ref().map_or(f64::NAN, |s| s.max_residual);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        out.violation && out.best_value >= 5.0 && re >= 5.0 && secs < 60.0,
        format!(
            "best {:.4} (need >= 5), at dt/2 {re:.4}, restart {}, {secs:.1}s",
            out.best_value, out.best_restart
        ),
    )
}

fn candidate_bracket() -> Outcome {
    let m = registry_get("linear_scalar", &no_params()).unwrap();
    let cert = scalar_ioss();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut bracket_ok, mut monotone) = (true, true);
    let mut detail = Vec::new();
    for i in 0..10 {
        let delta = 0.1 + 1.9 * i as f64 / 9.0;
        let chi1: f64 = rng.random_range(-1.0..1.0);
        let chi2 = chi1 - delta;
        let mut last = f64::NEG_INFINITY;
        for restarts in [1, 2, 4] {
            let search = SearchConfig {
                restarts,
                segments: 4,
                horizon: 2.0,
                seed: 3,
                evals_per_restart: 100,
                dt: Some(0.01),
                ..Default::default()
            };
            let est = estimate_lyap_candidate(&m, &cert, &[chi1], &[chi2], &search).unwrap();
            let lo = cert.alpha.value(delta) * (1.0 - 1e-6);
            let hi = cert.alpha_x.value(delta) * (1.0 + 1e-3);
            if !(lo <= est.u_hat && est.u_hat <= hi) {
                bracket_ok = false;
                detail.push(format!("|dchi|={delta:.3}: {:.6e} outside [{lo:.6e}, {hi:.6e}]", est.u_hat));
            }
            monotone &= est.u_hat >= last;
            last = est.u_hat;
        }
    }
    outcome(
        bracket_ok && monotone,
        format!("10 pairs x 3 budgets, bracket {bracket_ok}, nested-budget monotone {monotone} {}", detail.join("; ")),
    )
}

fn rgas_golden() -> Outcome {
    let m = registry_get("linear_scalar", &no_params()).unwrap();
    let obs = luenberger(&m, DMatrix::from_element(1, 1, 1.0)).unwrap();
    let cert = scalar_rgas();
    let cfg = SamplerConfig {
        count: 50,
        seed: 8,
        horizon: 2.0,
        knots: 8,
        dt: Some(1e-3),
        ..Default::default()
    };
    let mut fails = 0;
    let mut worst = f64::NEG_INFINITY;
    let scenarios = sample_observer_scenarios(&m, &cfg, 0.1).unwrap();
    let perturbed = scenarios
        .iter()
        .filter(|s| matches!(&s.y_bar, iioss_core::MeasuredOutput::Truth { perturbation: Some(_) }))
        .count();
    for sc in &scenarios {
        let tol = 1e-3 * (1.0 + cert.beta_x.value(dist(&sc.chi, &sc.chi_bar)));
        let (r, _) = rgas_residual(&m, &obs, &cert, sc, Some(tol)).unwrap();
        worst = worst.max(r.max_residual - tol);
        fails += usize::from(!r.holds);
    }
    outcome(
        fails == 0,
        format!("50 scenarios ({perturbed} with y_bar != y), {fails} failures, max (residual - tol) {worst:.3e}"),
    )
}

fn necessity() -> Outcome {
    let start = Instant::now();
    let m = registry_get("linear_scalar", &no_params()).unwrap();
    let obs = luenberger(&m, DMatrix::from_element(1, 1, 1.0)).unwrap();
    let cert = scalar_rgas();
    let cfg = SamplerConfig {
        count: 50,
        seed: 9,
        horizon: 2.0,
        knots: 8,
        dt: Some(1e-3),
        ..Default::default()
    };
    let (mut fails, mut worst_mismatch) = (0usize, 0.0f64);
    for sc in sample_pair_scenarios(&m, &cfg).unwrap() {
        match derive_ioss_from_observer(&m, &obs, &cert, &sc, Some(1e-6), None) {
            Ok(rep) => {
                worst_mismatch = worst_mismatch.max(rep.mismatch);
                fails += usize::from(!rep.ioss.holds);
            }
            Err(_) => fails += 1,
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        fails == 0 && worst_mismatch <= 1e-6 && secs < 60.0,
        format!("50 pairs, {fails} failures, max mismatch {worst_mismatch:.2e} (limit 1e-6), {secs:.1}s (limit 60s)"),
    )
}

fn infrastructure() -> Outcome {
    let mut notes = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);

    // semigroup: [0, a] then [a, a+b] equals one pass over [0, a+b]
    let mut semigroup = 0.0f64;
    for _ in 0..200 {
        let dt = rng.random_range(1e-3..0.2);
        let lambda = rng.random_range(0.01..0.99);
        let k = rng.random_range(2..200usize);
        let split = rng.random_range(0..k);
        let g: Vec<f64> = (0..=k).map(|_| rng.random_range(0.0..5.0)).collect();
        let whole = discounted_integral(&g, dt, lambda, k as f64 * dt).unwrap();
        let mut acc = DiscountedAccumulator::new(lambda).unwrap();
        for (i, v) in g.iter().enumerate() {
            acc.push(if i == 0 { 0.0 } else { dt }, *v);
        }
        let first = discounted_integral(&g[..=split], dt, lambda, split as f64 * dt).unwrap();
        let second = discounted_integral(&g[split..], dt, lambda, (k - split) as f64 * dt).unwrap();
        let composed = (((k - split) as f64) * dt * lambda.ln()).exp() * first + second;
        let scale = whole.max(1e-300);
        semigroup = semigroup.max((whole - composed).abs() / scale).max((acc.value() - whole).abs() / scale);
    }
    let semigroup_ok = semigroup <= 1e-12;
    notes.push(format!("semigroup {semigroup:.1e}"));

    // concatenation and truncation laws
    let mut algebra_ok = true;
    for _ in 0..50 {
        let dt = 0.25;
        let head = VectorSignal::from_flat(2, dt, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let tail = VectorSignal::from_flat(2, dt, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let cut = rng.random_range(0..8usize) as f64 * dt;
        let joined = concat(&tail, &head, cut).unwrap();
        let zero = VectorSignal::zeros(2, dt, 1).unwrap();
        let prefix = concat(&zero, &head, cut).unwrap();
        algebra_ok &= prefix.truncate(cut).unwrap().same_signal(&head.truncate(cut).unwrap());
        for j in 0..40 {
            let tau = j as f64 * 0.1 + 0.05;
            let expect = if tau < cut { head.sample(tau).unwrap() } else { tail.sample(tau - cut).unwrap() };
            algebra_ok &= joined.sample(tau).unwrap() == expect;
        }
        let s = rng.random_range(0..8usize) as f64 * dt;
        let twice = head.truncate(cut).unwrap().truncate(s).unwrap();
        algebra_ok &= twice.same_signal(&head.truncate(cut.min(s)).unwrap());
        algebra_ok &= concat(&tail, &head, 0.0).unwrap().same_signal(&tail);
    }
    notes.push(format!("concat/truncate {algebra_ok}"));

    // RK4 order on linear_scalar
    let m = registry_get("linear_scalar", &no_params()).unwrap();
    let u = VectorSignal::zeros(2, 1.0, 2).unwrap();
    let d = VectorSignal::zeros(1, 1.0, 2).unwrap();
    let err = |dt: f64| (simulate(&m, &[1.0], &u, &d, 2.0, Some(dt)).unwrap().final_state()[0] - (-2.0f64).exp()).abs();
    let order = (err(0.1) / err(0.05)).log2();
    let order_ok = (3.5..=4.5).contains(&order);
    notes.push(format!("RK4 order {order:.3}"));

    // byte-identical reruns
    let run = |dir: &std::path::Path| {
        let bad = registry_get("unstable_unobservable", &no_params()).unwrap();
        let id = ComparisonFunction::identity();
        let cert = IossCertificate::new(id.clone(), id.clone(), id.clone(), id, 0.5).unwrap();
        let search = SearchConfig {
            restarts: 4,
            evals_per_restart: 60,
            seed: 5,
            ..Default::default()
        };
        let out = falsify(&bad, &cert, &search).unwrap();
        write_residual_csv(&dir.join("res.csv"), out.best.as_ref().unwrap()).unwrap();
        write_scenario(dir, "witness", &out.witness).unwrap();
        let lure = registry_get("lure_saturated", &no_params()).unwrap();
        let sig = VectorSignal::new(1, 0.5, vec![vec![0.3], vec![-1.2], vec![2.0]]).unwrap();
        let traj = simulate(&lure, &[0.7], &sig, &VectorSignal::zeros(1, 0.5, 3).unwrap(), 1.5, None).unwrap();
        write_trajectory_csv(&dir.join("traj.csv"), &traj).unwrap();
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(a.path());
    run(b.path());
    let mut identical = true;
    for name in ["res.csv", "traj.csv", "witness.json", "witness_u1.csv", "witness_u2.csv", "witness_d.csv"] {
        identical &= std::fs::read(a.path().join(name)).unwrap() == std::fs::read(b.path().join(name)).unwrap();
    }
    notes.push(format!("byte-identical reruns {identical}"));

    outcome(semigroup_ok && algebra_ok && order_ok && identical, notes.join(", "))
}

fn main() -> ExitCode {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        ("gronwall specialization of the bihari bound", gronwall),
        ("bihari bound matches the comparison ODE", bihari_ode),
        ("trajectory-difference envelope, all registry models", envelope),
        ("lyapunov dissipation golden case", lyapunov_golden),
        ("lyapunov-to-ioss transform soundness", transform_soundness),
        ("falsifier breaks the unstable unobservable model", falsification),
        ("converse candidate bracket and budget monotonicity", candidate_bracket),
        ("rgas golden case, scalar luenberger", rgas_golden),
        ("observer necessity chain", necessity),
        ("infrastructure invariants", infrastructure),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        failed += usize::from(!o.pass);
        println!("{} {:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
