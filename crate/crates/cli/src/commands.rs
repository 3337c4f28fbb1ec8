//! Subcommand bodies. Each returns whether the checked property held and a
//! summary document; artifacts go through [`Run`].

use anyhow::{anyhow, bail, Result};
use iioss_core::comparison::{osgood_check, OsgoodIntegral};
use iioss_core::detectability::{
    certificate_from_lyapunov, continuity_probe, estimate_lyap_candidate, falsify, grid_refinement, ioss_residual,
    lyap_residual, sample_pair_scenarios, IossCertificate, TrajectoryPairScenario,
};
use iioss_core::io::{fmt12, write_estimate_csv, write_residual_csv, write_scenario, write_table_csv, write_trajectory_csv};
use iioss_core::observer::{derive_ioss_from_observer, rgas_residual, sample_observer_scenarios, ObserverScenario};
use iioss_core::signals::dist;
use iioss_core::system::audit_increment_bounds;
use iioss_core::{simulate, ComparisonFunction, Error, SystemModel, VectorSignal};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{parse_function, Loaded};
use crate::output::{num, nums, rounded, Run};

pub struct Outcome {
    pub held: bool,
    pub summary: Value,
    /// One-line result for stdout.
    pub line: String,
}

/// Values given on the command line for `bihari-bound` and `osgood-check`.
#[derive(Debug, Default, Clone)]
pub struct Direct {
    pub kappa1: Option<String>,
    pub c: Option<f64>,
    pub t: Option<f64>,
}

fn kappa1(cfg: &Loaded, direct: &Direct, block: Option<&ComparisonFunction>) -> Result<ComparisonFunction> {
    if let Some(s) = &direct.kappa1 {
        return parse_function(s);
    }
    if let Some(f) = block {
        let mut f = f.clone();
        f.resolve_files(&cfg.base)?;
        f.validate()?;
        return Ok(f);
    }
    if cfg.config.model.is_some() {
        return Ok(cfg.model()?.kappa1().clone());
    }
    bail!("no kappa1: pass --kappa1, set it in the config, or name a model")
}

fn pair_scenarios(cfg: &Loaded, model: &SystemModel) -> Result<Vec<TrajectoryPairScenario>> {
    if let Some(sc) = cfg.pair_scenario(model)? {
        return Ok(vec![sc]);
    }
    let sampler = cfg
        .config
        .sampler
        .as_ref()
        .ok_or_else(|| anyhow!("config needs a [scenario] or a [sampler] block"))?;
    Ok(sample_pair_scenarios(model, sampler)?)
}

fn ioss_tolerance(cfg: &Loaded, cert: &IossCertificate, chi_delta: f64) -> Option<f64> {
    let check = cfg.check();
    check
        .tolerance
        .or(check.tolerance_scale.map(|s| s * (1.0 + cert.alpha_x.value(chi_delta))))
}

/// Index of the scenario with the largest margin `max_residual − tolerance`.
fn worst(margins: &[f64]) -> usize {
    iioss_core::optimize::argmax_lowest(margins.iter().copied()).unwrap_or(0)
}

pub fn simulate_cmd(cfg: &Loaded, run: &mut Run) -> Result<Outcome> {
    let model = cfg.model()?;
    let s = cfg.config.simulate.as_ref().ok_or_else(|| anyhow!("config needs a [simulate] block"))?;
    let load = |p: &Option<std::path::PathBuf>, dim: usize| -> Result<VectorSignal> {
        match p {
            Some(p) => Ok(iioss_core::io::read_signal_csv(&cfg.existing(p)?, None)?),
            None => Ok(VectorSignal::zeros(dim, s.horizon, 1)?),
        }
    };
    let traj = simulate(&model, &s.chi, &load(&s.u, model.m())?, &load(&s.d, model.q())?, s.horizon, s.dt)?;
    write_trajectory_csv(&run.csv(), &traj)?;
    let summary = json!({
        "model": model.name(),
        "dt": num(traj.dt),
        "steps": traj.steps(),
        "final_state": nums(traj.final_state()),
        "left_state_box": traj.left_state_box.map(num),
    });
    Ok(Outcome {
        held: true,
        line: format!("simulated {} steps, final state {:?}", traj.steps(), traj.final_state().iter().map(|v| fmt12(*v)).collect::<Vec<_>>()),
        summary,
    })
}

pub fn osgood_cmd(cfg: &Loaded, direct: &Direct, run: &mut Run) -> Result<Outcome> {
    let f = kappa1(cfg, direct, cfg.config.osgood.as_ref().and_then(|o| o.kappa1.as_ref()))?;
    let report = osgood_check(&f)?;
    let rows: Vec<Vec<f64>> = report.evidence.iter().map(|(a, b)| vec![*a, *b]).collect();
    write_table_csv(&run.csv(), &["bound", "partial_integral"], &rows)?;
    let held = report.certified();
    Ok(Outcome {
        held,
        line: format!(
            "osgood: divergent at zero {}, at infinity {} ({:?})",
            report.divergent_at_zero, report.divergent_at_infinity, report.method
        ),
        summary: json!({"kappa1": rounded(&f), "certified": held, "report": rounded(&report)}),
    })
}

pub fn bihari_cmd(cfg: &Loaded, direct: &Direct, run: &mut Run) -> Result<Outcome> {
    let block = cfg.config.bihari.clone().unwrap_or_default();
    let f = kappa1(cfg, direct, block.kappa1.as_ref())?;
    let c = direct.c.or(block.c).ok_or_else(|| anyhow!("bihari-bound needs c (--c or bihari.c)"))?;
    let t = direct.t.or(block.t).ok_or_else(|| anyhow!("bihari-bound needs t (--t or bihari.t)"))?;
    let osg = OsgoodIntegral::new(f.clone())?;
    let value = osg.bihari_bound(c, t)?;
    let points = block.points.unwrap_or(101).max(2);
    let rows = (0..points)
        .map(|i| {
            let ti = t * i as f64 / (points - 1) as f64;
            Ok(vec![ti, osg.bihari_bound(c, ti)?])
        })
        .collect::<Result<Vec<_>>>()?;
    write_table_csv(&run.csv(), &["t", "bound"], &rows)?;
    Ok(Outcome {
        held: true,
        line: fmt12(value),
        summary: json!({"kappa1": rounded(&f), "c": num(c), "t": num(t), "bound": num(value)}),
    })
}

pub fn audit_cmd(cfg: &Loaded, run: &mut Run) -> Result<Outcome> {
    let model = cfg.model()?;
    let a = cfg.config.audit.as_ref().ok_or_else(|| anyhow!("config needs an [audit] block with a seed"))?;
    let report = audit_increment_bounds(&model, a.samples, a.seed, a.radius)?;
    write_table_csv(
        &run.csv(),
        &["samples", "skipped", "f_at_origin", "kappa1_ratio", "kappa2_ratio", "pass"],
        &[vec![
            report.samples as f64,
            report.skipped as f64,
            report.f_at_origin,
            report.kappa1_ratio,
            report.kappa2_ratio,
            f64::from(u8::from(report.pass)),
        ]],
    )?;
    if !report.pass {
        let p = run.file("_witness.json");
        std::fs::write(&p, serde_json::to_string_pretty(&rounded(&report))? + "\n")?;
    }
    Ok(Outcome {
        held: report.pass,
        line: format!(
            "audit: kappa1 ratio {}, kappa2 ratio {}",
            fmt12(report.kappa1_ratio),
            fmt12(report.kappa2_ratio)
        ),
        summary: json!({"model": model.name(), "report": rounded(&report)}),
    })
}

fn emit_pair_witness(run: &mut Run, sc: &TrajectoryPairScenario) -> Result<()> {
    let stem = format!("{}_{}_witness", run.subcommand, run.tag);
    let files = write_scenario(&run.dir, &stem, sc)?;
    run.record(files);
    Ok(())
}

const FAMILY_COLUMNS: [&str; 6] = ["scenario", "chi_delta", "max_residual", "argmax_time", "tolerance", "holds"];

pub fn ioss_check_cmd(cfg: &Loaded, run: &mut Run) -> Result<Outcome> {
    let model = cfg.model()?;
    let cert = cfg.certificate()?;
    let scenarios = pair_scenarios(cfg, &model)?;
    let results = scenarios
        .par_iter()
        .map(|sc| ioss_residual(&model, &cert, sc, ioss_tolerance(cfg, &cert, sc.chi_delta())))
        .collect::<iioss_core::Result<Vec<_>>>()?;
    let margins: Vec<f64> = results.iter().map(|r| r.max_residual - r.tolerance).collect();
    let w = worst(&margins);
    let failures = results.iter().filter(|r| !r.holds).count();
    if scenarios.len() == 1 {
        write_residual_csv(&run.csv(), &results[0])?;
    } else {
        let rows: Vec<Vec<f64>> = results
            .iter()
            .zip(&scenarios)
            .enumerate()
            .map(|(i, (r, sc))| vec![i as f64, sc.chi_delta(), r.max_residual, r.argmax_time, r.tolerance, f64::from(u8::from(r.holds))])
            .collect();
        write_table_csv(&run.csv(), &FAMILY_COLUMNS, &rows)?;
    }
    let grid = if cfg.check().grid_refinement && scenarios.len() == 1 {
        Some(rounded(&grid_refinement(&model, &cert, &scenarios[0])?))
    } else {
        None
    };
    if failures > 0 {
        emit_pair_witness(run, &scenarios[w])?;
        write_residual_csv(&run.file("_witness_residual.csv"), &results[w])?;
    }
    Ok(Outcome {
        held: failures == 0,
        line: format!(
            "ioss-check: {failures}/{} scenarios violate, max residual {} (tolerance {})",
            scenarios.len(),
            fmt12(results[w].max_residual),
            fmt12(results[w].tolerance)
        ),
        summary: json!({
            "model": model.name(),
            "certificate": rounded(&cert),
            "scenarios": scenarios.len(),
            "failures": failures,
            "worst_scenario": w,
            "max_residual": num(results[w].max_residual),
            "tolerance": num(results[w].tolerance),
            "argmax_time": num(results[w].argmax_time),
            "grid_refinement": grid,
        }),
    })
}

pub fn lyap_check_cmd(cfg: &Loaded, run: &mut Run) -> Result<Outcome> {
    let model = cfg.model()?;
    let cert = cfg.lyapunov()?;
    let transformed = certificate_from_lyapunov(&cert);
    let scenarios = pair_scenarios(cfg, &model)?;
    let check = cfg.check();
    let results = scenarios
        .par_iter()
        .map(|sc| {
            let tol = check
                .tolerance
                .or(check.tolerance_scale.map(|s| s * (1.0 + cert.u.eval(&sc.chi1, &sc.chi2))));
            let l = lyap_residual(&model, &cert, sc, tol)?;
            let i = ioss_residual(&model, &transformed, sc, tol)?;
            Ok((l, i))
        })
        .collect::<iioss_core::Result<Vec<_>>>()?;
    let margins: Vec<f64> = results.iter().map(|(l, _)| l.series.max_residual - l.series.tolerance).collect();
    let w = worst(&margins);
    let failures = results.iter().filter(|(l, _)| !l.holds()).count();
    let sandwich: usize = results.iter().map(|(l, _)| l.sandwich_violations.len()).sum();
    let transform_failures = results.iter().filter(|(_, i)| !i.holds).count();
    if scenarios.len() == 1 {
        write_residual_csv(&run.csv(), &results[0].0.series)?;
    } else {
        let rows: Vec<Vec<f64>> = results
            .iter()
            .zip(&scenarios)
            .enumerate()
            .map(|(i, ((l, _), sc))| {
                let s = &l.series;
                vec![i as f64, sc.chi_delta(), s.max_residual, s.argmax_time, s.tolerance, f64::from(u8::from(l.holds()))]
            })
            .collect();
        write_table_csv(&run.csv(), &FAMILY_COLUMNS, &rows)?;
    }
    if failures > 0 {
        let idx = if margins[w] > 0.0 { w } else { results.iter().position(|(l, _)| !l.holds()).unwrap_or(w) };
        emit_pair_witness(run, &scenarios[idx])?;
        write_residual_csv(&run.file("_witness_residual.csv"), &results[idx].0.series)?;
    }
    let s = &results[w].0.series;
    Ok(Outcome {
        held: failures == 0,
        line: format!(
            "lyap-check: {failures}/{} scenarios violate ({sandwich} sandwich violations), max residual {} (tolerance {})",
            scenarios.len(),
            fmt12(s.max_residual),
            fmt12(s.tolerance)
        ),
        summary: json!({
            "model": model.name(),
            "scenarios": scenarios.len(),
            "failures": failures,
            "sandwich_violations": sandwich,
            "worst_scenario": w,
            "max_residual": num(s.max_residual),
            "tolerance": num(s.tolerance),
            "transformed_certificate": rounded(&transformed),
            "transformed_failures": transform_failures,
        }),
    })
}

pub fn falsify_cmd(cfg: &Loaded, run: &mut Run) -> Result<Outcome> {
    let model = cfg.model()?;
    let cert = cfg.certificate()?;
    let search = cfg.search()?;
    let out = falsify(&model, &cert, &search)?;
    match &out.best {
        Some(series) => write_residual_csv(&run.csv(), series)?,
        None => write_table_csv(&run.csv(), &["t", "lhs", "rhs", "residual"], &[])?,
    }
    let rows: Vec<Vec<f64>> = out.restart_values.iter().enumerate().map(|(i, v)| vec![i as f64, *v]).collect();
    write_table_csv(&run.file("_restarts.csv"), &["restart", "max_residual"], &rows)?;
    if out.violation {
        emit_pair_witness(run, &out.witness)?;
        if let Some(re) = &out.reverified {
            write_residual_csv(&run.file("_reverified.csv"), re)?;
        }
    }
    Ok(Outcome {
        held: !out.violation,
        line: format!(
            "ioss-falsify: {} (best max residual {}, restart {})",
            if out.violation { "violation found" } else { "no violation found" },
            fmt12(out.best_value),
            out.best_restart
        ),
        summary: json!({
            "model": model.name(),
            "certificate": rounded(&cert),
            "search": rounded(&search),
            "violation": out.violation,
            "best_value": num(out.best_value),
            "best_restart": out.best_restart,
            "restart_values": nums(&out.restart_values),
            "blow_up_time": out.blow_up_time.map(num),
            "reverified_max_residual": out.reverified.as_ref().map(|r| num(r.max_residual)),
            "evaluations": out.evaluations,
        }),
    })
}

pub fn lyap_eval_cmd(cfg: &Loaded, run: &mut Run) -> Result<Outcome> {
    let model = cfg.model()?;
    let cert = cfg.certificate()?;
    let search = cfg.search()?;
    let c = cfg.config.candidate.as_ref().ok_or_else(|| anyhow!("config needs a [candidate] block"))?;
    if c.chi1.len() != c.chi2.len() || c.chi1.is_empty() {
        bail!("candidate.chi1 and candidate.chi2 must list the same nonzero number of states");
    }
    let mut rows = Vec::new();
    let mut pairs = Vec::new();
    let mut outside = 0usize;
    for (i, (a, b)) in c.chi1.iter().zip(&c.chi2).enumerate() {
        let est = estimate_lyap_candidate(&model, &cert, a, b, &search)?;
        let delta = dist(a, b);
        let (lo, hi) = (cert.alpha.value(delta), cert.alpha_x.value(delta));
        let inside = lo * (1.0 - 1e-6) <= est.u_hat && est.u_hat <= hi * (1.0 + 1e-3);
        outside += usize::from(!inside);
        rows.push(vec![i as f64, delta, est.u_hat, est.seed_value, lo, hi, est.witness.t]);
        pairs.push(json!({
            "chi_delta": num(delta),
            "u_hat": num(est.u_hat),
            "lower": num(lo),
            "upper": num(hi),
            "inside": inside,
            "lambda_used": num(est.lambda_used),
            "restart_values": nums(&est.restart_values),
        }));
    }
    write_table_csv(&run.csv(), &["pair", "chi_delta", "u_hat", "seed_value", "lower", "upper", "witness_t"], &rows)?;
    Ok(Outcome {
        held: outside == 0,
        line: format!("lyap-eval: {} pairs, {outside} outside the bracket", rows.len()),
        summary: json!({"model": model.name(), "pairs": pairs, "outside_bracket": outside}),
    })
}

pub fn continuity_cmd(cfg: &Loaded, run: &mut Run) -> Result<Outcome> {
    let model = cfg.model()?;
    let cert = cfg.certificate()?;
    let search = cfg.search()?;
    let p = cfg.config.probe.as_ref().ok_or_else(|| anyhow!("config needs a [probe] block"))?;
    let report = continuity_probe(&model, &cert, &p.chi1, &p.chi2, &p.radii, &search)?;
    let rows: Vec<Vec<f64>> = report.rows.iter().map(|r| vec![r.radius, r.deviation]).collect();
    write_table_csv(&run.csv(), &["radius", "deviation"], &rows)?;
    Ok(Outcome {
        held: report.pass,
        line: format!(
            "continuity-probe: base {}, noise {}, {}",
            fmt12(report.base_value),
            fmt12(report.noise),
            if report.pass { "deviations shrink with the radius" } else { "deviations do not shrink" }
        ),
        summary: json!({"model": model.name(), "report": rounded(&report)}),
    })
}

fn observer_scenarios(cfg: &Loaded, model: &SystemModel) -> Result<Vec<ObserverScenario>> {
    if let Some(sc) = cfg.observer_scenario(model)? {
        return Ok(vec![sc]);
    }
    let sampler = cfg
        .config
        .sampler
        .as_ref()
        .ok_or_else(|| anyhow!("config needs an [observer_scenario] or a [sampler] block"))?;
    Ok(sample_observer_scenarios(model, sampler, cfg.check().y_perturbation.unwrap_or(0.0))?)
}

pub fn observer_run_cmd(cfg: &Loaded, run: &mut Run) -> Result<Outcome> {
    let model = cfg.model()?;
    let obs = cfg.observer(&model)?;
    let sc = cfg
        .observer_scenario(&model)?
        .ok_or_else(|| anyhow!("observer-run needs an [observer_scenario] block"))?;
    let est = obs.run(&model, &sc)?;
    write_estimate_csv(&run.csv(), &est)?;
    let errors = est.errors();
    let max = errors.iter().copied().fold(0.0, f64::max);
    let last = errors.last().copied().unwrap_or(0.0);
    Ok(Outcome {
        held: true,
        line: format!("observer-run: final error {}, max error {}", fmt12(last), fmt12(max)),
        summary: json!({
            "model": model.name(),
            "dt": num(est.dt),
            "queries": est.query.len(),
            "final_error": num(last),
            "max_error": num(max),
            "budget_exhausted": est.budget_exhausted,
        }),
    })
}

pub fn observer_check_cmd(cfg: &Loaded, run: &mut Run) -> Result<Outcome> {
    let model = cfg.model()?;
    let obs = cfg.observer(&model)?;
    let cert = cfg.rgas()?;
    let check = cfg.check();
    let scenarios = observer_scenarios(cfg, &model)?;
    let results = scenarios
        .par_iter()
        .map(|sc| {
            let tol = check
                .tolerance
                .or(check.tolerance_scale.map(|s| s * (1.0 + cert.beta_x.value(dist(&sc.chi, &sc.chi_bar)))));
            rgas_residual(&model, &obs, &cert, sc, tol).map(|(r, _)| r)
        })
        .collect::<iioss_core::Result<Vec<_>>>()?;
    let margins: Vec<f64> = results.iter().map(|r| r.max_residual - r.tolerance).collect();
    let w = worst(&margins);
    let failures = results.iter().filter(|r| !r.holds).count();
    if scenarios.len() == 1 {
        write_residual_csv(&run.csv(), &results[0])?;
    } else {
        let rows: Vec<Vec<f64>> = results
            .iter()
            .zip(&scenarios)
            .enumerate()
            .map(|(i, (r, sc))| {
                vec![i as f64, dist(&sc.chi, &sc.chi_bar), r.max_residual, r.argmax_time, r.tolerance, f64::from(u8::from(r.holds))]
            })
            .collect();
        write_table_csv(&run.csv(), &FAMILY_COLUMNS, &rows)?;
    }
    if failures > 0 {
        let p = run.file("_witness.json");
        std::fs::write(&p, serde_json::to_string_pretty(&scenarios[w])? + "\n")?;
        write_residual_csv(&run.file("_witness_residual.csv"), &results[w])?;
    }
    Ok(Outcome {
        held: failures == 0,
        line: format!(
            "observer-check: {failures}/{} scenarios violate, max residual {} (tolerance {})",
            scenarios.len(),
            fmt12(results[w].max_residual),
            fmt12(results[w].tolerance)
        ),
        summary: json!({
            "model": model.name(),
            "certificate": rounded(&cert),
            "scenarios": scenarios.len(),
            "failures": failures,
            "worst_scenario": w,
            "max_residual": num(results[w].max_residual),
            "tolerance": num(results[w].tolerance),
        }),
    })
}

pub fn necessity_cmd(cfg: &Loaded, run: &mut Run) -> Result<Outcome> {
    let model = cfg.model()?;
    let obs = cfg.observer(&model)?;
    let cert = cfg.rgas()?;
    let check = cfg.check();
    let induced = cert.induced_ioss();
    let scenarios = pair_scenarios(cfg, &model)?;
    let reports = scenarios
        .par_iter()
        .map(|sc| {
            derive_ioss_from_observer(&model, &obs, &cert, sc, check.consistency_limit, ioss_tolerance(cfg, &induced, sc.chi_delta()))
        })
        .collect::<iioss_core::Result<Vec<_>>>()
        .map_err(|e| match e {
            Error::Inconsistent { .. } => anyhow!("observer consistency pre-check failed: {e}"),
            other => other.into(),
        })?;
    let rows: Vec<Vec<f64>> = reports
        .iter()
        .enumerate()
        .map(|(i, r)| vec![i as f64, r.mismatch, r.ioss.max_residual, r.ioss.tolerance, r.rgas.max_residual, f64::from(u8::from(r.ioss.holds))])
        .collect();
    write_table_csv(
        &run.csv(),
        &["scenario", "mismatch", "ioss_max_residual", "tolerance", "rgas_max_residual", "holds"],
        &rows,
    )?;
    let margins: Vec<f64> = reports.iter().map(|r| r.ioss.max_residual - r.ioss.tolerance).collect();
    let w = worst(&margins);
    let failures = reports.iter().filter(|r| !r.ioss.holds).count();
    let mismatch = reports.iter().map(|r| r.mismatch).fold(0.0, f64::max);
    if failures > 0 {
        emit_pair_witness(run, &scenarios[w])?;
        write_residual_csv(&run.file("_witness_residual.csv"), &reports[w].ioss)?;
    }
    Ok(Outcome {
        held: failures == 0,
        line: format!(
            "necessity-experiment: {failures}/{} pairs violate the induced certificate, max mismatch {}",
            scenarios.len(),
            fmt12(mismatch)
        ),
        summary: json!({
            "model": model.name(),
            "induced_certificate": rounded(&induced),
            "scenarios": scenarios.len(),
            "failures": failures,
            "max_mismatch": num(mismatch),
            "worst_scenario": w,
            "max_residual": num(reports[w].ioss.max_residual),
            "tolerance": num(reports[w].ioss.tolerance),
        }),
    })
}
