//! Observer mappings `x̂(t) = P(t, χ̄, ū, d, ȳ)`, the discounted RGAS
//! residual, and the necessity chain turning an RGAS observer into a
//! detectability certificate.
//!
//! Estimates are available on the scenario grid only. Both observers are
//! causal by construction: `x̂` at node `k` uses data from steps `< k` only.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comparison::ComparisonFunction;
use crate::detectability::{
    discounted_series, ioss_residual, IossCertificate, ResidualSeries, Sampler, SamplerConfig, TrajectoryPairScenario,
};
use crate::error::{invalid, Error, Result};
use crate::optimize::{argmax_lowest, multistart, nelder_mead, NelderMeadOptions};
use crate::signals::{dist, DiscountedAccumulator, VectorSignal};
use crate::system::{resolve_dt, simulate, step_value, Bounds, Rk4, SystemModel, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RgasCertificate {
    pub beta: ComparisonFunction,
    pub beta_x: ComparisonFunction,
    pub beta_u: ComparisonFunction,
    pub beta_y: ComparisonFunction,
    pub eta: f64,
}

impl RgasCertificate {
    pub fn new(
        beta: ComparisonFunction,
        beta_x: ComparisonFunction,
        beta_u: ComparisonFunction,
        beta_y: ComparisonFunction,
        eta: f64,
    ) -> Result<Self> {
        let cert = Self {
            beta,
            beta_x,
            beta_u,
            beta_y,
            eta,
        };
        cert.validate()?;
        Ok(cert)
    }

    pub fn validate(&self) -> Result<()> {
        self.beta.require_k_infinity("beta")?;
        self.beta_x.require_k_infinity("beta_x")?;
        self.beta_u.require_k_infinity("beta_u")?;
        self.beta_y.require_k_infinity("beta_y")?;
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(invalid(format!("eta must lie in (0, 1), got {}", self.eta)));
        }
        Ok(())
    }

    pub fn default_tolerance(&self, chi_delta: f64) -> f64 {
        1e-6 * (1.0 + self.beta_x.value(chi_delta))
    }

    /// `(α, α_x, α_u, α_y, λ) = (β, β_x, β_u, β_y, η)`.
    pub fn induced_ioss(&self) -> IossCertificate {
        IossCertificate {
            alpha: self.beta.clone(),
            alpha_x: self.beta_x.clone(),
            alpha_u: self.beta_u.clone(),
            alpha_y: self.beta_y.clone(),
            lambda: self.eta,
        }
    }
}

/// Where the measurement `ȳ` fed to the observer comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum MeasuredOutput {
    /// The true output, plus an optional piecewise-constant perturbation.
    Truth {
        #[serde(default)]
        perturbation: Option<VectorSignal>,
    },
    /// The output of the model from `chi` under `u` and the scenario's `d`.
    Generated { chi: Vec<f64>, u: VectorSignal },
    /// A given piecewise-constant signal.
    Recorded { signal: VectorSignal },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverScenario {
    pub chi: Vec<f64>,
    pub u: VectorSignal,
    pub d: VectorSignal,
    pub chi_bar: Vec<f64>,
    pub u_bar: VectorSignal,
    pub y_bar: MeasuredOutput,
    pub horizon: f64,
    #[serde(default)]
    pub dt: Option<f64>,
}

impl ObserverScenario {
    /// `ū ≡ 0` and `ȳ = y`.
    pub fn classical(model: &SystemModel, chi: Vec<f64>, u: VectorSignal, d: VectorSignal, chi_bar: Vec<f64>, horizon: f64) -> Result<Self> {
        let u_bar = VectorSignal::zeros(model.m(), u.dt(), u.knots())?;
        Ok(Self {
            chi,
            u,
            d,
            chi_bar,
            u_bar,
            y_bar: MeasuredOutput::Truth { perturbation: None },
            horizon,
            dt: None,
        })
    }

    fn resolved_dt(&self) -> Result<f64> {
        let mut sigs = vec![&self.u, &self.d, &self.u_bar];
        match &self.y_bar {
            MeasuredOutput::Truth { perturbation: Some(p) } => sigs.push(p),
            MeasuredOutput::Generated { u, .. } => sigs.push(u),
            MeasuredOutput::Recorded { signal } => sigs.push(signal),
            MeasuredOutput::Truth { perturbation: None } => {}
        }
        resolve_dt(&sigs, self.horizon, self.dt)
    }
}

/// Seeded observer scenarios: truth and nominal data drawn independently;
/// every odd-indexed scenario also perturbs `ȳ` by a signal of sup-norm at
/// most `y_perturbation`.
pub fn sample_observer_scenarios(model: &SystemModel, cfg: &SamplerConfig, y_perturbation: f64) -> Result<Vec<ObserverScenario>> {
    if !(y_perturbation >= 0.0) {
        return Err(invalid("y_perturbation must be nonnegative"));
    }
    let s = Sampler::new(model, cfg)?;
    let per_component = y_perturbation / (model.p() as f64).sqrt();
    let pert_box = Bounds::symmetric(model.p(), per_component);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.count)
        .map(|i| {
            let chi = s.state.sample(&mut rng);
            let chi_bar = s.state.sample(&mut rng);
            let u = s.signal(&s.u, &mut rng);
            let u_bar = s.signal(&s.u, &mut rng);
            let d = s.signal(&s.d, &mut rng);
            let perturbation = (i % 2 == 1 && y_perturbation > 0.0).then(|| s.signal(&pert_box, &mut rng));
            ObserverScenario {
                chi,
                u,
                d,
                chi_bar,
                u_bar,
                y_bar: MeasuredOutput::Truth { perturbation },
                horizon: cfg.horizon,
                dt: cfg.dt,
            }
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct LuenbergerObserver {
    pub gain: DMatrix<f64>,
}

/// Settings of the optimization-based estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FullInformationConfig {
    pub w_x: ComparisonFunction,
    pub w_u: ComparisonFunction,
    pub w_y: ComparisonFunction,
    pub eta: f64,
    /// Knots of the process-disturbance correction over `[0, t]`.
    pub segments: usize,
    pub restarts: usize,
    pub evals_per_restart: usize,
    pub seed: u64,
    /// Estimate every `query_stride`-th node (and the last one).
    pub query_stride: usize,
    #[serde(default)]
    pub state_radius: Option<f64>,
    #[serde(default)]
    pub input_radius: Option<f64>,
}

#[derive(Debug, Clone)]
pub enum Observer {
    Luenberger(LuenbergerObserver),
    FullInformation(FullInformationConfig),
}

/// Luenberger observer `x̂̇ = f(x̂, ū, d) + L(ȳ − h(x̂, ū, d))`; for the
/// linear models this is `Ax̂ + Ew̄ + Bd + L(ȳ − Cx̂ − v̄)`. Fails unless the
/// model is linear and `A − LC` is Hurwitz.
pub fn luenberger(model: &SystemModel, gain: DMatrix<f64>) -> Result<Observer> {
    let lin = model
        .linear()
        .ok_or_else(|| Error::Observer(format!("model '{}' has no linear structure", model.name())))?;
    if gain.shape() != (model.n(), model.p()) {
        return Err(Error::Observer(format!(
            "gain must be {}x{}, got {}x{}",
            model.n(),
            model.p(),
            gain.nrows(),
            gain.ncols()
        )));
    }
    let closed = &lin.a - &gain * &lin.c;
    let worst = closed.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    if !(worst < 0.0) {
        return Err(Error::Observer(format!("A - LC is not Hurwitz (largest real part {worst})")));
    }
    Ok(Observer::Luenberger(LuenbergerObserver { gain }))
}

pub fn full_information(model: &SystemModel, config: FullInformationConfig) -> Result<Observer> {
    for (w, what) in [(&config.w_x, "w_x"), (&config.w_u, "w_u"), (&config.w_y, "w_y")] {
        w.validate()?;
        if w.value(1.0) <= 0.0 {
            return Err(invalid(format!("weight {what} must be positive away from zero")));
        }
    }
    if !(config.eta > 0.0 && config.eta < 1.0) {
        return Err(invalid("eta must lie in (0, 1)"));
    }
    if config.segments == 0 || config.query_stride == 0 {
        return Err(invalid("segments and query_stride must be positive"));
    }
    if config.restarts == 0 || config.evals_per_restart == 0 {
        return Err(Error::BudgetExhausted);
    }
    model.state_box.clipped(config.state_radius)?;
    model.u_box.clipped(config.input_radius)?;
    Ok(Observer::FullInformation(config))
}

/// Observer output on a scenario together with the data it saw.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRun {
    pub dt: f64,
    /// Node indices carrying an estimate.
    pub query: Vec<usize>,
    pub times: Vec<f64>,
    pub xhat: Vec<Vec<f64>>,
    pub truth: Trajectory,
    /// `ȳ` at the left and right ends of each step.
    pub y_bar_left: Vec<Vec<f64>>,
    pub y_bar_right: Vec<Vec<f64>>,
    /// Some query stopped on its evaluation budget rather than converging.
    pub budget_exhausted: bool,
}

impl EstimateRun {
    /// `|x(t) − x̂(t)|` at each query node.
    pub fn errors(&self) -> Vec<f64> {
        self.query
            .iter()
            .zip(&self.xhat)
            .map(|(&k, xh)| dist(&self.truth.states[k], xh))
            .collect()
    }
}

struct Measurement {
    left: Vec<Vec<f64>>,
    right: Vec<Vec<f64>>,
}

fn measurement(model: &SystemModel, sc: &ObserverScenario, truth: &Trajectory, dt: f64) -> Result<Measurement> {
    let steps = truth.steps();
    let p = model.p();
    match &sc.y_bar {
        MeasuredOutput::Truth { perturbation } => {
            let mut pk = vec![0.0; p];
            let (mut left, mut right) = (Vec::with_capacity(steps), Vec::with_capacity(steps));
            for k in 0..steps {
                if let Some(pert) = perturbation {
                    step_value(pert, k, dt, &mut pk);
                }
                left.push(truth.outputs[k].iter().zip(&pk).map(|(a, b)| a + b).collect());
                right.push(truth.step_end_outputs[k].iter().zip(&pk).map(|(a, b)| a + b).collect());
            }
            Ok(Measurement { left, right })
        }
        MeasuredOutput::Generated { chi, u } => {
            let src = simulate(model, chi, u, &sc.d, sc.horizon, Some(dt))?;
            Ok(Measurement {
                left: src.outputs[..steps].to_vec(),
                right: src.step_end_outputs,
            })
        }
        MeasuredOutput::Recorded { signal } => {
            let mut v = vec![0.0; p];
            let left: Vec<Vec<f64>> = (0..steps)
                .map(|k| {
                    step_value(signal, k, dt, &mut v);
                    v.clone()
                })
                .collect();
            Ok(Measurement {
                right: left.clone(),
                left,
            })
        }
    }
}

fn check_scenario(model: &SystemModel, sc: &ObserverScenario) -> Result<()> {
    for (sig, dim, what) in [
        (&sc.u_bar, model.m(), "u_bar"),
        (&sc.d, model.q(), "d"),
    ] {
        if sig.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: sig.dim(),
                context: what,
            });
        }
    }
    let p_sig = match &sc.y_bar {
        MeasuredOutput::Truth { perturbation: Some(p) } => Some(p),
        MeasuredOutput::Recorded { signal } => Some(signal),
        _ => None,
    };
    if let Some(s) = p_sig {
        if s.dim() != model.p() {
            return Err(Error::DimensionMismatch {
                expected: model.p(),
                got: s.dim(),
                context: "y_bar",
            });
        }
    }
    if sc.chi_bar.len() != model.n() {
        return Err(Error::DimensionMismatch {
            expected: model.n(),
            got: sc.chi_bar.len(),
            context: "chi_bar",
        });
    }
    Ok(())
}

impl Observer {
    /// Runs the observer over the scenario horizon.
    pub fn run(&self, model: &SystemModel, sc: &ObserverScenario) -> Result<EstimateRun> {
        check_scenario(model, sc)?;
        let dt = sc.resolved_dt()?;
        let truth = simulate(model, &sc.chi, &sc.u, &sc.d, sc.horizon, Some(dt))?;
        let meas = measurement(model, sc, &truth, dt)?;
        let (query, xhat, budget_exhausted) = match self {
            Self::Luenberger(obs) => {
                let xhat = run_luenberger(model, obs, sc, dt, truth.steps())?;
                ((0..=truth.steps()).collect(), xhat, false)
            }
            Self::FullInformation(cfg) => run_full_information(model, cfg, sc, &meas, dt, truth.steps())?,
        };
        Ok(EstimateRun {
            dt,
            times: query.iter().map(|&k| truth.times[k]).collect(),
            query,
            xhat,
            truth,
            y_bar_left: meas.left,
            y_bar_right: meas.right,
            budget_exhausted,
        })
    }
}

/// Integrates the observer jointly with the measurement source (when `ȳ`
/// is produced by the model) so `ȳ` is exact inside each RK4 stage.
fn run_luenberger(model: &SystemModel, obs: &LuenbergerObserver, sc: &ObserverScenario, dt: f64, steps: usize) -> Result<Vec<Vec<f64>>> {
    let (n, m, q, p) = (model.n(), model.m(), model.q(), model.p());
    let source: Option<(&[f64], &VectorSignal, Option<&VectorSignal>)> = match &sc.y_bar {
        MeasuredOutput::Truth { perturbation } => Some((&sc.chi, &sc.u, perturbation.as_ref())),
        MeasuredOutput::Generated { chi, u } => Some((chi, u, None)),
        MeasuredOutput::Recorded { .. } => None,
    };
    let off = if source.is_some() { n } else { 0 };
    let mut z = Vec::with_capacity(off + n);
    if let Some((chi, _, _)) = source {
        z.extend_from_slice(chi);
    }
    z.extend_from_slice(&sc.chi_bar);
    let mut rk = Rk4::new(z.len());
    let (mut us, mut ub, mut dk) = (vec![0.0; m], vec![0.0; m], vec![0.0; q]);
    let mut extra = vec![0.0; p];
    let mut out = Vec::with_capacity(steps + 1);
    out.push(sc.chi_bar.clone());
    for k in 0..steps {
        step_value(&sc.u_bar, k, dt, &mut ub);
        step_value(&sc.d, k, dt, &mut dk);
        extra.iter_mut().for_each(|v| *v = 0.0);
        match (&source, &sc.y_bar) {
            (Some((_, u, pert)), _) => {
                step_value(u, k, dt, &mut us);
                if let Some(pert) = pert {
                    step_value(pert, k, dt, &mut extra);
                }
            }
            (None, MeasuredOutput::Recorded { signal }) => step_value(signal, k, dt, &mut extra),
            (None, _) => unreachable!("only recorded measurements lack a source"),
        }
        let rhs = |s: &[f64], ds: &mut [f64]| {
            let mut ybar = extra.clone();
            if off > 0 {
                model.eval_f(&s[..n], &us, &dk, &mut ds[..n]);
                let mut ys = vec![0.0; p];
                model.eval_h(&s[..n], &us, &dk, &mut ys);
                ybar.iter_mut().zip(&ys).for_each(|(a, b)| *a += b);
            }
            let xh = &s[off..];
            let mut yh = vec![0.0; p];
            model.eval_h(xh, &ub, &dk, &mut yh);
            let dxh = &mut ds[off..];
            model.eval_f(xh, &ub, &dk, dxh);
            for i in 0..n {
                for j in 0..p {
                    dxh[i] += obs.gain[(i, j)] * (ybar[j] - yh[j]);
                }
            }
        };
        rk.step(&rhs, &mut z, dt);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { t: (k + 1) as f64 * dt });
        }
        out.push(z[off..].to_vec());
    }
    Ok(out)
}

fn run_full_information(
    model: &SystemModel,
    cfg: &FullInformationConfig,
    sc: &ObserverScenario,
    meas: &Measurement,
    dt: f64,
    steps: usize,
) -> Result<(Vec<usize>, Vec<Vec<f64>>, bool)> {
    let mut query: Vec<usize> = (0..=steps).step_by(cfg.query_stride).collect();
    if *query.last().expect("node 0 is always queried") != steps {
        query.push(steps);
    }
    let results: Vec<Result<(Vec<f64>, bool)>> = query
        .par_iter()
        .map(|&k| fi_query(model, cfg, sc, meas, dt, k))
        .collect();
    let mut xhat = Vec::with_capacity(query.len());
    let mut exhausted = false;
    for r in results {
        let (x, e) = r?;
        exhausted |= e;
        xhat.push(x);
    }
    Ok((query, xhat, exhausted))
}

/// Full-information estimate at node `kq`: minimizes the discounted fit cost
/// over `(χ̂, ŵ)` and returns the end state of the best fit.
fn fi_query(
    model: &SystemModel,
    cfg: &FullInformationConfig,
    sc: &ObserverScenario,
    meas: &Measurement,
    dt: f64,
    kq: usize,
) -> Result<(Vec<f64>, bool)> {
    if kq == 0 {
        return Ok((sc.chi_bar.clone(), false));
    }
    let (n, m, q, p) = (model.n(), model.m(), model.q(), model.p());
    let w = model.process_inputs();
    let segs = cfg.segments.min(kq);
    let sx = model.state_box.clipped(cfg.state_radius)?;
    let su = model.u_box.clipped(cfg.input_radius)?;
    let mut lo = sx.lo.clone();
    let mut hi = sx.hi.clone();
    for _ in 0..segs {
        lo.extend_from_slice(&su.lo[..w]);
        hi.extend_from_slice(&su.hi[..w]);
    }
    let t = kq as f64 * dt;
    let weight_x = (t * cfg.eta.ln()).exp();

    let fit = |z: &[f64]| -> (f64, Vec<f64>) {
        let mut x = z[..n].to_vec();
        let mut uk = vec![0.0; m];
        let mut dk = vec![0.0; q];
        let mut y = vec![0.0; p];
        let mut rk = Rk4::new(n);
        let Ok(mut acc) = DiscountedAccumulator::new(cfg.eta) else {
            return (f64::INFINITY, x);
        };
        for j in 0..kq {
            let seg = j * segs / kq;
            step_value(&sc.u_bar, j, dt, &mut uk);
            let delta = &z[n + seg * w..n + (seg + 1) * w];
            for (u, dlt) in uk[..w].iter_mut().zip(delta) {
                *u += dlt;
            }
            step_value(&sc.d, j, dt, &mut dk);
            let gu = cfg.w_u.value(crate::signals::norm(delta));
            model.eval_h(&x, &uk, &dk, &mut y);
            let gl = gu + cfg.w_y.value(dist(&y, &meas.left[j]));
            rk.step(&|s: &[f64], out: &mut [f64]| model.eval_f(s, &uk, &dk, out), &mut x, dt);
            if x.iter().any(|v| !v.is_finite()) {
                return (f64::INFINITY, x);
            }
            model.eval_h(&x, &uk, &dk, &mut y);
            let gr = gu + cfg.w_y.value(dist(&y, &meas.right[j]));
            acc.push_step(dt, gl, gr);
        }
        (cfg.w_x.value(dist(&z[..n], &sc.chi_bar)) * weight_x + acc.value(), x)
    };

    let mut start = sc.chi_bar.clone();
    start.resize(lo.len(), 0.0);
    let bounds = Bounds { lo: lo.clone(), hi: hi.clone() };
    bounds.project(&mut start);
    let opts = NelderMeadOptions {
        max_evals: cfg.evals_per_restart,
        ..Default::default()
    };
    let runs = multistart(cfg.restarts, cfg.seed, |i, rng| {
        let z0 = if i == 0 { start.clone() } else { bounds.sample(rng) };
        nelder_mead(|z| Some(fit(z).0), &z0, &lo, &hi, &opts)
    });
    let scores: Vec<f64> = runs.iter().map(|r| r.as_ref().map_or(f64::NAN, |m| -m.value)).collect();
    let best = argmax_lowest(scores).ok_or(Error::BudgetExhausted)?;
    let m = runs[best].as_ref().expect("argmax skips empty restarts");
    Ok((fit(&m.x).1, !m.converged))
}

/// RGAS residual at every node carrying an estimate. Default tolerance
/// `1e−6·(1 + β_x(|χ − χ̄|))`.
pub fn rgas_residual(
    model: &SystemModel,
    obs: &Observer,
    cert: &RgasCertificate,
    sc: &ObserverScenario,
    tol: Option<f64>,
) -> Result<(ResidualSeries, EstimateRun)> {
    cert.validate()?;
    let run = obs.run(model, sc)?;
    let chi_delta = dist(&sc.chi, &sc.chi_bar);
    let tol = tol.unwrap_or_else(|| cert.default_tolerance(chi_delta));
    let m = model.m();
    let (mut a, mut b) = (vec![0.0; m], vec![0.0; m]);
    let mut qi = 0usize;
    let series = discounted_series(
        run.dt,
        run.truth.steps(),
        cert.eta,
        cert.beta_x.value(chi_delta),
        |k| {
            if qi < run.query.len() && run.query[qi] == k {
                let v = cert.beta.value(dist(&run.truth.states[k], &run.xhat[qi]));
                qi += 1;
                Ok(Some(v))
            } else {
                Ok(None)
            }
        },
        |k| {
            step_value(&sc.u, k, run.dt, &mut a);
            step_value(&sc.u_bar, k, run.dt, &mut b);
            let gu = cert.beta_u.value(dist(&a, &b));
            let yl = dist(&run.truth.outputs[k], &run.y_bar_left[k]);
            let yr = dist(&run.truth.step_end_outputs[k], &run.y_bar_right[k]);
            (gu + cert.beta_y.value(yl), gu + cert.beta_y.value(yr))
        },
        tol,
    )?;
    Ok((series, run))
}

/// Consistency limit: 10× the nominal integration tolerance `1e−6`.
pub const CONSISTENCY_LIMIT: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct NecessityReport {
    /// `max |x̂ − x₂|` when the observer is fed trajectory 2's own data.
    pub mismatch: f64,
    pub limit: f64,
    /// Detectability residual of the induced certificate on the pair.
    pub ioss: ResidualSeries,
    /// RGAS residual with truth from trajectory 1 and data from trajectory 2.
    pub rgas: ResidualSeries,
}

/// Checks that `obs` reproduces trajectory 2 from its own data, then
/// evaluates the induced certificate `(β, β_x, β_u, β_y, η)` on the pair.
pub fn derive_ioss_from_observer(
    model: &SystemModel,
    obs: &Observer,
    cert: &RgasCertificate,
    sc: &TrajectoryPairScenario,
    limit: Option<f64>,
    tol: Option<f64>,
) -> Result<NecessityReport> {
    cert.validate()?;
    let limit = limit.unwrap_or(CONSISTENCY_LIMIT);
    let dt = sc.resolved_dt()?;
    let own = ObserverScenario {
        chi: sc.chi2.clone(),
        u: sc.u2.clone(),
        d: sc.d.clone(),
        chi_bar: sc.chi2.clone(),
        u_bar: sc.u2.clone(),
        y_bar: MeasuredOutput::Truth { perturbation: None },
        horizon: sc.horizon,
        dt: Some(dt),
    };
    let run = obs.run(model, &own)?;
    let mismatch = run.errors().into_iter().fold(0.0, f64::max);
    if !(mismatch <= limit) {
        return Err(Error::Inconsistent { mismatch, limit });
    }
    let ioss = ioss_residual(model, &cert.induced_ioss(), &sc.with_dt(dt), tol)?;
    let cross = ObserverScenario {
        chi: sc.chi1.clone(),
        u: sc.u1.clone(),
        y_bar: MeasuredOutput::Generated {
            chi: sc.chi2.clone(),
            u: sc.u2.clone(),
        },
        ..own
    };
    let (rgas, _) = rgas_residual(model, obs, cert, &cross, tol)?;
    Ok(NecessityReport {
        mismatch,
        limit,
        ioss,
        rgas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::registry_get;
    use rand::Rng;
    use std::collections::BTreeMap;

    fn scalar() -> SystemModel {
        registry_get("linear_scalar", &BTreeMap::new()).unwrap()
    }

    fn gain(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn lin(a: f64) -> ComparisonFunction {
        ComparisonFunction::linear(a).unwrap()
    }

    fn derived_cert() -> RgasCertificate {
        RgasCertificate::new(lin(1.0), lin(1.0), lin(2.0 * 2f64.sqrt()), lin(1.0), (-2.0f64).exp()).unwrap()
    }

    fn signal(rng: &mut ChaCha8Rng, dim: usize, knots: usize, amp: f64) -> VectorSignal {
        VectorSignal::from_flat(dim, 0.25, (0..dim * knots).map(|_| rng.random_range(-amp..amp)).collect()).unwrap()
    }

    fn scenario(chi: f64, chi_bar: f64, u: VectorSignal) -> ObserverScenario {
        ObserverScenario {
            chi: vec![chi],
            u: u.clone(),
            d: VectorSignal::zeros(1, 0.25, 8).unwrap(),
            chi_bar: vec![chi_bar],
            u_bar: u,
            y_bar: MeasuredOutput::Truth { perturbation: None },
            horizon: 2.0,
            dt: Some(1e-3),
        }
    }

    #[test]
    fn hurwitz_check() {
        assert!(luenberger(&scalar(), gain(1.0)).is_ok());
        assert!(luenberger(&scalar(), gain(-3.0)).is_err());
        let uu = registry_get("unstable_unobservable", &BTreeMap::new()).unwrap();
        assert!(luenberger(&uu, gain(1.0)).is_err());
        let lure = registry_get("lure_saturated", &BTreeMap::new()).unwrap();
        assert!(matches!(luenberger(&lure, gain(1.0)), Err(Error::Observer(_))));
    }

    #[test]
    fn error_decays_at_the_closed_loop_pole() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = signal(&mut rng, 2, 8, 1.0);
        let obs = luenberger(&scalar(), gain(1.0)).unwrap();
        let run = obs.run(&scalar(), &scenario(0.8, -0.2, u.clone())).unwrap();
        for (t, e) in run.times.iter().zip(run.errors()) {
            assert!((e - (-2.0 * t).exp()).abs() < 1e-9, "t={t}");
        }
        let exact = obs.run(&scalar(), &scenario(0.8, 0.8, u)).unwrap();
        assert!(exact.errors().iter().all(|e| *e == 0.0));
        assert_eq!(run.xhat[0], vec![-0.2]);
    }

    #[test]
    fn derived_certificate_holds() {
        let m = scalar();
        let obs = luenberger(&m, gain(1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..10 {
            let mut sc = scenario(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), signal(&mut rng, 2, 8, 1.0));
            sc.u_bar = signal(&mut rng, 2, 8, 1.0);
            if i % 2 == 1 {
                sc.y_bar = MeasuredOutput::Truth {
                    perturbation: Some(signal(&mut rng, 1, 8, 0.1)),
                };
            }
            let (r, _) = rgas_residual(&m, &obs, &derived_cert(), &sc, None).unwrap();
            assert!(r.holds, "{}", r.max_residual);
        }
    }

    #[test]
    fn classical_case_reduces() {
        let m = scalar();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = signal(&mut rng, 2, 8, 1.0);
        let sc = ObserverScenario::classical(&m, vec![1.0], u.clone(), VectorSignal::zeros(1, 0.25, 8).unwrap(), vec![0.0], 2.0).unwrap();
        let obs = luenberger(&m, gain(1.0)).unwrap();
        let (r, _) = rgas_residual(&m, &obs, &derived_cert(), &sc, None).unwrap();
        // ȳ = y, ū = 0: the integrand is β_u(|u|) alone
        let beta_u = lin(2.0 * 2f64.sqrt());
        let eta = (-2.0f64).exp();
        let knots: Vec<f64> = u.iter_knots().map(|k| beta_u.value(crate::signals::norm(k))).collect();
        let t = 2.0;
        let expected: f64 = (-2.0f64 * t).exp() * 1.0
            + knots
                .iter()
                .enumerate()
                .map(|(k, g)| {
                    let (a, b) = (k as f64 * 0.25, (k + 1) as f64 * 0.25);
                    g * ((eta.ln() * (t - b)).exp() - (eta.ln() * (t - a)).exp()) / -eta.ln()
                })
                .sum::<f64>();
        // trapezoid error on the exponential weight is O(dt²)
        assert!((r.rhs.last().unwrap() - expected).abs() < 1e-6 * (1.0 + expected));
    }

    #[test]
    fn superposition() {
        let m = scalar();
        let obs = luenberger(&m, gain(1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = signal(&mut rng, 2, 8, 1.0);
        let du = signal(&mut rng, 2, 8, 0.5);
        let pert = signal(&mut rng, 1, 8, 0.1);
        let err = |dchi: f64, with_du: bool, with_p: bool| -> Vec<f64> {
            let mut sc = scenario(0.5, 0.5 - dchi, u.clone());
            if with_du {
                sc.u_bar = u.sub(&du).unwrap();
            }
            if with_p {
                sc.y_bar = MeasuredOutput::Truth {
                    perturbation: Some(pert.clone()),
                };
            }
            let run = obs.run(&m, &sc).unwrap();
            run.query.iter().zip(&run.xhat).map(|(&k, x)| run.truth.states[k][0] - x[0]).collect()
        };
        let (a, b, c, all) = (err(0.3, false, false), err(0.0, true, false), err(0.0, false, true), err(0.3, true, true));
        for i in 0..all.len() {
            assert!((all[i] - a[i] - b[i] - c[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn causality_under_mutation() {
        let m = scalar();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u = signal(&mut rng, 2, 8, 1.0);
        let mut sc = scenario(1.0, 0.0, u);
        sc.y_bar = MeasuredOutput::Truth {
            perturbation: Some(signal(&mut rng, 1, 8, 0.1)),
        };
        let fi = full_information(
            &m,
            FullInformationConfig {
                w_x: ComparisonFunction::quadratic(1.0).unwrap(),
                w_u: ComparisonFunction::quadratic(1.0).unwrap(),
                w_y: ComparisonFunction::quadratic(10.0).unwrap(),
                eta: 0.5,
                segments: 2,
                restarts: 1,
                evals_per_restart: 60,
                seed: 1,
                query_stride: 250,
                state_radius: None,
                input_radius: None,
            },
        )
        .unwrap();
        let luen = luenberger(&m, gain(1.0)).unwrap();
        let cut = 4; // knots ≥ 4 start at t = 1
        let mut mutated = sc.clone();
        let mut flat = mutated.u.as_flat().to_vec();
        flat[2 * cut..].iter_mut().for_each(|v| *v = -*v + 0.5);
        mutated.u = VectorSignal::from_flat(2, 0.25, flat.clone()).unwrap();
        mutated.u_bar = VectorSignal::from_flat(2, 0.25, flat).unwrap();
        for obs in [&luen, &fi] {
            let a = obs.run(&m, &sc).unwrap();
            let b = obs.run(&m, &mutated).unwrap();
            for (i, t) in a.times.iter().enumerate() {
                if *t <= 1.0 + 1e-12 {
                    assert_eq!(a.xhat[i], b.xhat[i], "t={t}");
                }
            }
        }
    }

    #[test]
    fn full_information_cases() {
        let m = scalar();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let u = signal(&mut rng, 2, 8, 1.0);
        let mut sc = scenario(1.0, 1.0, u.clone());
        sc.dt = Some(0.01);
        let cfg = FullInformationConfig {
            w_x: ComparisonFunction::quadratic(1.0).unwrap(),
            w_u: ComparisonFunction::quadratic(1.0).unwrap(),
            w_y: ComparisonFunction::quadratic(10.0).unwrap(),
            eta: 0.5,
            segments: 4,
            restarts: 2,
            evals_per_restart: 200,
            seed: 3,
            query_stride: 50,
            state_radius: None,
            input_radius: None,
        };
        let fi = full_information(&m, cfg.clone()).unwrap();
        let run = fi.run(&m, &sc).unwrap();
        assert!(run.errors().iter().all(|e| *e < 1e-9), "{:?}", run.errors());
        assert_eq!(run.xhat[0], vec![1.0]);

        // noisy data: compare against the Luenberger error on the same data
        sc.chi_bar = vec![0.0];
        sc.u_bar = VectorSignal::zeros(2, 0.25, 8).unwrap();
        sc.y_bar = MeasuredOutput::Truth {
            perturbation: Some(signal(&mut rng, 1, 8, 0.05)),
        };
        let fi_err = fi.run(&m, &sc).unwrap().errors();
        let lu = luenberger(&m, gain(1.0)).unwrap().run(&m, &sc).unwrap();
        let lu_err: Vec<f64> = lu.query.iter().step_by(50).map(|&k| dist(&lu.truth.states[k], &lu.xhat[k])).collect();
        let worst_lu = lu_err.iter().copied().fold(0.0, f64::max);
        for e in &fi_err {
            assert!(*e <= 10.0 * worst_lu, "{fi_err:?} vs {lu_err:?}");
        }
    }

    #[test]
    fn necessity_chain() {
        let m = scalar();
        let obs = luenberger(&m, gain(1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let sc = TrajectoryPairScenario {
                chi1: vec![rng.random_range(-2.0..2.0)],
                chi2: vec![rng.random_range(-2.0..2.0)],
                u1: signal(&mut rng, 2, 8, 1.0),
                u2: signal(&mut rng, 2, 8, 1.0),
                d: VectorSignal::zeros(1, 0.25, 8).unwrap(),
                horizon: 2.0,
                dt: Some(1e-3),
            };
            let rep = derive_ioss_from_observer(&m, &obs, &derived_cert(), &sc, None, None).unwrap();
            assert!(rep.mismatch <= 1e-6);
            assert!(rep.ioss.holds && rep.rgas.holds);
            for (a, b) in rep.ioss.residual.iter().zip(&rep.rgas.residual) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        let same = TrajectoryPairScenario {
            chi1: vec![0.4],
            chi2: vec![0.4],
            u1: VectorSignal::zeros(2, 0.25, 8).unwrap(),
            u2: VectorSignal::zeros(2, 0.25, 8).unwrap(),
            d: VectorSignal::zeros(1, 0.25, 8).unwrap(),
            horizon: 2.0,
            dt: Some(1e-2),
        };
        let rep = derive_ioss_from_observer(&m, &obs, &derived_cert(), &same, None, None).unwrap();
        assert!(rep.ioss.residual.iter().all(|r| *r == 0.0));
    }
}
