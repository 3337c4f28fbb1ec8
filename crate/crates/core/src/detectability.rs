//! Residuals of the discounted integral detectability and Lyapunov
//! dissipation inequalities along trajectory pairs, the Lyapunov-to-IOSS
//! certificate map, and adversarial search (falsification and the converse
//! Lyapunov candidate).
//!
//! Integral terms use a step-sided trapezoid: inputs are constant on each
//! simulation step, so the output difference is taken at the left and right
//! ends of each step with that step's input.

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::comparison::ComparisonFunction;
use crate::error::{invalid, Error, Result};
use crate::optimize::{argmax_lowest, multistart, nelder_mead, Deadline, NelderMeadOptions};
use crate::signals::{dist, DiscountedAccumulator, VectorSignal};
use crate::system::{resolve_dt, simulate, step_value, Bounds, SystemModel, Trajectory};

fn check_lambda(lambda: f64, what: &str) -> Result<()> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(invalid(format!("{what} must lie in (0, 1), got {lambda}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IossCertificate {
    pub alpha: ComparisonFunction,
    pub alpha_x: ComparisonFunction,
    pub alpha_u: ComparisonFunction,
    pub alpha_y: ComparisonFunction,
    pub lambda: f64,
}

impl IossCertificate {
    pub fn new(
        alpha: ComparisonFunction,
        alpha_x: ComparisonFunction,
        alpha_u: ComparisonFunction,
        alpha_y: ComparisonFunction,
        lambda: f64,
    ) -> Result<Self> {
        let cert = Self {
            alpha,
            alpha_x,
            alpha_u,
            alpha_y,
            lambda,
        };
        cert.validate()?;
        Ok(cert)
    }

    pub fn validate(&self) -> Result<()> {
        self.alpha.require_k_infinity("alpha")?;
        self.alpha_x.require_k_infinity("alpha_x")?;
        self.alpha_u.require_k_infinity("alpha_u")?;
        self.alpha_y.require_k_infinity("alpha_y")?;
        check_lambda(self.lambda, "lambda")
    }

    /// Default residual tolerance for an initial-state gap `chi_delta`.
    pub fn default_tolerance(&self, chi_delta: f64) -> f64 {
        1e-6 * (1.0 + self.alpha_x.value(chi_delta))
    }
}

/// `(χ₁, χ₂) ↦ U`, required to be continuous and nonnegative.
pub type LyapunovFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum LyapunovFunction {
    /// `U = (χ₁−χ₂)ᵀ P (χ₁−χ₂)`.
    Quadratic(DMatrix<f64>),
    Custom(LyapunovFn),
}

impl fmt::Debug for LyapunovFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Quadratic(p) => f.debug_tuple("Quadratic").field(p).finish(),
            Self::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl LyapunovFunction {
    pub fn eval(&self, x1: &[f64], x2: &[f64]) -> f64 {
        match self {
            Self::Quadratic(p) => {
                let n = x1.len();
                let mut acc = 0.0;
                for i in 0..n {
                    let ei = x1[i] - x2[i];
                    for j in 0..n {
                        acc += ei * p[(i, j)] * (x1[j] - x2[j]);
                    }
                }
                acc
            }
            Self::Custom(u) => u(x1, x2),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LyapCertificate {
    pub alpha1: ComparisonFunction,
    pub alpha2: ComparisonFunction,
    pub sigma_u: ComparisonFunction,
    pub sigma_y: ComparisonFunction,
    pub lambda: f64,
    pub u: LyapunovFunction,
}

impl LyapCertificate {
    /// Quadratic form with `α₁ = λ_min(P)s²`, `α₂ = λ_max(P)s²`.
    pub fn quadratic(p: DMatrix<f64>, sigma_u: ComparisonFunction, sigma_y: ComparisonFunction, lambda: f64) -> Result<Self> {
        if !p.is_square() || p.nrows() == 0 {
            return Err(invalid("P must be a nonempty square matrix"));
        }
        let asym = (&p - p.transpose()).abs().max();
        if asym > 1e-12 * (1.0 + p.abs().max()) {
            return Err(invalid("P must be symmetric"));
        }
        let eig = SymmetricEigen::new(p.clone()).eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        if !(lo > 0.0) {
            return Err(invalid(format!("P must be positive definite (smallest eigenvalue {lo})")));
        }
        let cert = Self {
            alpha1: ComparisonFunction::quadratic(lo)?,
            alpha2: ComparisonFunction::quadratic(hi)?,
            sigma_u,
            sigma_y,
            lambda,
            u: LyapunovFunction::Quadratic(p),
        };
        cert.validate()?;
        Ok(cert)
    }

    pub fn custom(
        u: LyapunovFn,
        alpha1: ComparisonFunction,
        alpha2: ComparisonFunction,
        sigma_u: ComparisonFunction,
        sigma_y: ComparisonFunction,
        lambda: f64,
    ) -> Result<Self> {
        let cert = Self {
            alpha1,
            alpha2,
            sigma_u,
            sigma_y,
            lambda,
            u: LyapunovFunction::Custom(u),
        };
        cert.validate()?;
        Ok(cert)
    }

    pub fn validate(&self) -> Result<()> {
        self.alpha1.require_k_infinity("alpha1")?;
        self.alpha2.require_k_infinity("alpha2")?;
        self.sigma_u.require_k_infinity("sigma_u")?;
        self.sigma_y.require_k_infinity("sigma_y")?;
        check_lambda(self.lambda, "lambda")
    }

    fn eval_u(&self, x1: &[f64], x2: &[f64], t: f64) -> Result<f64> {
        let v = self.u.eval(x1, x2);
        if !(v >= 0.0) || !v.is_finite() {
            return Err(invalid(format!("Lyapunov function returned {v} at t = {t}")));
        }
        Ok(v)
    }
}

/// Maps a Lyapunov certificate to the detectability certificate it implies.
pub fn certificate_from_lyapunov(cert: &LyapCertificate) -> IossCertificate {
    IossCertificate {
        alpha: cert.alpha1.clone(),
        alpha_x: cert.alpha2.clone(),
        alpha_u: cert.sigma_u.clone(),
        alpha_y: cert.sigma_y.clone(),
        lambda: cert.lambda,
    }
}

/// Two trajectories sharing the known input `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryPairScenario {
    pub chi1: Vec<f64>,
    pub chi2: Vec<f64>,
    pub u1: VectorSignal,
    pub u2: VectorSignal,
    pub d: VectorSignal,
    pub horizon: f64,
    #[serde(default)]
    pub dt: Option<f64>,
}

impl TrajectoryPairScenario {
    pub fn chi_delta(&self) -> f64 {
        dist(&self.chi1, &self.chi2)
    }

    pub fn with_dt(&self, dt: f64) -> Self {
        Self {
            dt: Some(dt),
            ..self.clone()
        }
    }

    pub fn resolved_dt(&self) -> Result<f64> {
        resolve_dt(&[&self.u1, &self.u2, &self.d], self.horizon, self.dt)
    }
}

/// Seeded random scenario family: states and signal knots uniform in the
/// model boxes, each clipped to the optional radii.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub count: usize,
    pub seed: u64,
    pub horizon: f64,
    /// Knots per signal over the horizon.
    pub knots: usize,
    pub dt: Option<f64>,
    pub state_radius: Option<f64>,
    pub input_radius: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            count: 100,
            seed: 0,
            horizon: 2.0,
            knots: 8,
            dt: None,
            state_radius: None,
            input_radius: None,
        }
    }
}

pub(crate) struct Sampler {
    pub(crate) state: Bounds,
    pub(crate) u: Bounds,
    pub(crate) d: Bounds,
    pub(crate) knot_dt: f64,
    pub(crate) knots: usize,
}

impl Sampler {
    pub(crate) fn new(model: &SystemModel, cfg: &SamplerConfig) -> Result<Self> {
        if cfg.knots == 0 || !(cfg.horizon > 0.0 && cfg.horizon.is_finite()) {
            return Err(invalid("sampler needs a positive horizon and knot count"));
        }
        Ok(Self {
            state: model.state_box.clipped(cfg.state_radius)?,
            u: model.u_box.clipped(cfg.input_radius)?,
            d: model.d_box.clipped(cfg.input_radius)?,
            knot_dt: cfg.horizon / cfg.knots as f64,
            knots: cfg.knots,
        })
    }

    pub(crate) fn signal(&self, b: &Bounds, rng: &mut impl Rng) -> VectorSignal {
        let data = (0..self.knots).flat_map(|_| b.sample(rng)).collect();
        VectorSignal::from_flat(b.dim(), self.knot_dt, data).expect("sampled knots are finite")
    }
}

pub fn sample_pair_scenarios(model: &SystemModel, cfg: &SamplerConfig) -> Result<Vec<TrajectoryPairScenario>> {
    let s = Sampler::new(model, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.count)
        .map(|_| TrajectoryPairScenario {
            chi1: s.state.sample(&mut rng),
            chi2: s.state.sample(&mut rng),
            u1: s.signal(&s.u, &mut rng),
            u2: s.signal(&s.u, &mut rng),
            d: s.signal(&s.d, &mut rng),
            horizon: cfg.horizon,
            dt: cfg.dt,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSeries {
    pub times: Vec<f64>,
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub residual: Vec<f64>,
    pub max_residual: f64,
    pub argmax_time: f64,
    pub tolerance: f64,
    pub holds: bool,
}

/// Builds `r = lhs − anchor·λᵗ − ∫₀ᵗ λ^{t−τ} g` on the nodes where `lhs_at`
/// returns a value. `step_g(k)` gives `g` at the left and right ends of step k.
pub(crate) fn discounted_series(
    dt: f64,
    steps: usize,
    lambda: f64,
    anchor: f64,
    mut lhs_at: impl FnMut(usize) -> Result<Option<f64>>,
    mut step_g: impl FnMut(usize) -> (f64, f64),
    tolerance: f64,
) -> Result<ResidualSeries> {
    let mut acc = DiscountedAccumulator::new(lambda)?;
    let ln = lambda.ln();
    let mut series = ResidualSeries {
        times: Vec::new(),
        lhs: Vec::new(),
        rhs: Vec::new(),
        residual: Vec::new(),
        max_residual: f64::NEG_INFINITY,
        argmax_time: 0.0,
        tolerance,
        holds: false,
    };
    for k in 0..=steps {
        if k > 0 {
            let (gl, gr) = step_g(k - 1);
            acc.push_step(dt, gl, gr);
        }
        if let Some(lhs) = lhs_at(k)? {
            let t = k as f64 * dt;
            let rhs = anchor * (t * ln).exp() + acc.value();
            let r = lhs - rhs;
            if r > series.max_residual {
                series.max_residual = r;
                series.argmax_time = t;
            }
            series.times.push(t);
            series.lhs.push(lhs);
            series.rhs.push(rhs);
            series.residual.push(r);
        }
    }
    series.holds = series.max_residual <= tolerance;
    Ok(series)
}

struct PairRun {
    dt: f64,
    x1: Trajectory,
    x2: Trajectory,
    /// `|u₁ − u₂|` held on each step.
    du: Vec<f64>,
}

fn simulate_pair(model: &SystemModel, sc: &TrajectoryPairScenario) -> Result<PairRun> {
    let dt = sc.resolved_dt()?;
    let x1 = simulate(model, &sc.chi1, &sc.u1, &sc.d, sc.horizon, Some(dt))?;
    let x2 = simulate(model, &sc.chi2, &sc.u2, &sc.d, sc.horizon, Some(dt))?;
    let m = model.m();
    let (mut a, mut b) = (vec![0.0; m], vec![0.0; m]);
    let du = (0..x1.steps())
        .map(|k| {
            step_value(&sc.u1, k, dt, &mut a);
            step_value(&sc.u2, k, dt, &mut b);
            dist(&a, &b)
        })
        .collect();
    Ok(PairRun { dt, x1, x2, du })
}

impl PairRun {
    fn step_g(&self, k: usize, g_u: &ComparisonFunction, g_y: &ComparisonFunction) -> (f64, f64) {
        let gu = g_u.value(self.du[k]);
        let yl = dist(&self.x1.outputs[k], &self.x2.outputs[k]);
        let yr = dist(&self.x1.step_end_outputs[k], &self.x2.step_end_outputs[k]);
        (gu + g_y.value(yl), gu + g_y.value(yr))
    }
}

/// Detectability residual on every grid node of `sc`. The certificate holds
/// on `sc` iff `max_residual ≤ tol` (default `1e−6·(1 + α_x(|χ_Δ|))`).
pub fn ioss_residual(
    model: &SystemModel,
    cert: &IossCertificate,
    sc: &TrajectoryPairScenario,
    tol: Option<f64>,
) -> Result<ResidualSeries> {
    cert.validate()?;
    let run = simulate_pair(model, sc)?;
    let anchor = cert.alpha_x.value(sc.chi_delta());
    let tol = tol.unwrap_or_else(|| cert.default_tolerance(sc.chi_delta()));
    discounted_series(
        run.dt,
        run.x1.steps(),
        cert.lambda,
        anchor,
        |k| Ok(Some(cert.alpha.value(dist(&run.x1.states[k], &run.x2.states[k])))),
        |k| run.step_g(k, &cert.alpha_u, &cert.alpha_y),
        tol,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichViolation {
    pub t: f64,
    pub lower: f64,
    pub value: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapResidual {
    pub series: ResidualSeries,
    pub sandwich_violations: Vec<SandwichViolation>,
}

impl LyapResidual {
    pub fn holds(&self) -> bool {
        self.series.holds && self.sandwich_violations.is_empty()
    }
}

/// Relative slack for the sandwich bounds (rounding in `|x_Δ|` and `s²`).
const SANDWICH_RTOL: f64 = 4.0 * f64::EPSILON;

/// Dissipation residual on every node, plus node-wise checks of
/// `α₁(|x_Δ|) ≤ U ≤ α₂(|x_Δ|)`. Default tolerance `1e−6·(1 + U(χ₁, χ₂))`.
pub fn lyap_residual(
    model: &SystemModel,
    cert: &LyapCertificate,
    sc: &TrajectoryPairScenario,
    tol: Option<f64>,
) -> Result<LyapResidual> {
    cert.validate()?;
    let run = simulate_pair(model, sc)?;
    let anchor = cert.eval_u(&sc.chi1, &sc.chi2, 0.0)?;
    let tol = tol.unwrap_or(1e-6 * (1.0 + anchor));
    let mut violations = Vec::new();
    let series = discounted_series(
        run.dt,
        run.x1.steps(),
        cert.lambda,
        anchor,
        |k| {
            let t = run.x1.times[k];
            let (a, b) = (&run.x1.states[k], &run.x2.states[k]);
            let v = cert.eval_u(a, b, t)?;
            let s = dist(a, b);
            let (lower, upper) = (cert.alpha1.value(s), cert.alpha2.value(s));
            let slack = SANDWICH_RTOL * v.max(upper) + f64::MIN_POSITIVE;
            if lower > v + slack || v > upper + slack {
                violations.push(SandwichViolation { t, lower, value: v, upper });
            }
            Ok(Some(v))
        },
        |k| run.step_g(k, &cert.sigma_u, &cert.sigma_y),
        tol,
    )?;
    Ok(LyapResidual {
        series,
        sandwich_violations: violations,
    })
}

/// Sensitivity of the maximum residual to the simulation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub dt: f64,
    /// Max residuals at `dt`, `dt/2`, `dt/4`.
    pub max_residuals: [f64; 3],
    /// Second-order error model estimate for the `dt/2` result.
    pub error_estimate: f64,
    /// `|r(dt/4) − r(dt/2)|`.
    pub change: f64,
    pub pass: bool,
}

/// Compares max residuals on three nested grids. Passes iff the last halving
/// moves the result by at most 4× the error estimate (plus a rounding floor).
pub fn grid_refinement(model: &SystemModel, cert: &IossCertificate, sc: &TrajectoryPairScenario) -> Result<GridReport> {
    let dt = sc.resolved_dt()?;
    let r = |h: f64| ioss_residual(model, cert, &sc.with_dt(h), None).map(|s| s.max_residual);
    let max_residuals = [r(dt)?, r(dt / 2.0)?, r(dt / 4.0)?];
    let error_estimate = (max_residuals[0] - max_residuals[1]).abs() / 3.0;
    let change = (max_residuals[2] - max_residuals[1]).abs();
    let floor = 1e-10 * (1.0 + max_residuals[1].abs());
    Ok(GridReport {
        dt,
        max_residuals,
        error_estimate,
        change,
        pass: change <= 4.0 * error_estimate + floor,
    })
}

/// Settings shared by the falsifier and the candidate estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub restarts: usize,
    /// Knots per signal over the horizon.
    pub segments: usize,
    pub horizon: f64,
    pub seed: u64,
    /// Nelder–Mead evaluations per restart.
    pub evals_per_restart: usize,
    /// Optional wall-clock cap in seconds; runs cut short by it are not
    /// reproducible.
    pub wall_clock: Option<f64>,
    pub dt: Option<f64>,
    /// Sampling radius applied to unbounded (or oversized) state boxes.
    pub state_radius: Option<f64>,
    /// Sampling radius for the `u` and `d` boxes.
    pub input_radius: Option<f64>,
    pub simplex_scale: f64,
    /// Residual tolerance; `None` uses the certificate default.
    pub tolerance: Option<f64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            segments: 4,
            horizon: 2.0,
            seed: 0,
            evals_per_restart: 300,
            wall_clock: None,
            dt: None,
            state_radius: None,
            input_radius: None,
            simplex_scale: 0.25,
            tolerance: None,
        }
    }
}

impl SearchConfig {
    fn validate(&self) -> Result<()> {
        if self.segments == 0 {
            return Err(invalid("segments must be positive"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(invalid("search horizon must be positive"));
        }
        if self.restarts == 0 || self.evals_per_restart == 0 {
            return Err(Error::BudgetExhausted);
        }
        if let Some(w) = self.wall_clock {
            if !(w >= 0.0) {
                return Err(invalid("wall_clock must be nonnegative"));
            }
        }
        Ok(())
    }

    fn nm(&self) -> NelderMeadOptions {
        NelderMeadOptions {
            max_evals: self.evals_per_restart,
            simplex_scale: self.simplex_scale,
            ..Default::default()
        }
    }

    fn deadline(&self) -> Deadline {
        Deadline::after(self.wall_clock.map(Duration::from_secs_f64))
    }
}

/// Flat decision vector `(χ₁, χ₂, u₁ knots, u₂ knots, d knots)`; the state
/// part is omitted when `with_states` is false.
struct Layout {
    n: usize,
    m: usize,
    q: usize,
    segments: usize,
    knot_dt: f64,
    with_states: bool,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Layout {
    fn new(model: &SystemModel, search: &SearchConfig, with_states: bool) -> Result<Self> {
        let (n, m, q, s) = (model.n(), model.m(), model.q(), search.segments);
        let sx = model.state_box.clipped(search.state_radius)?;
        let su = model.u_box.clipped(search.input_radius)?;
        let sd = model.d_box.clipped(search.input_radius)?;
        let (mut lo, mut hi) = (Vec::new(), Vec::new());
        let mut push = |b: &Bounds, times: usize| {
            for _ in 0..times {
                lo.extend_from_slice(&b.lo);
                hi.extend_from_slice(&b.hi);
            }
        };
        if with_states {
            push(&sx, 2);
        }
        push(&su, 2 * s);
        push(&sd, s);
        Ok(Self {
            n,
            m,
            q,
            segments: s,
            knot_dt: search.horizon / s as f64,
            with_states,
            lo,
            hi,
        })
    }

    fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        Bounds {
            lo: self.lo.clone(),
            hi: self.hi.clone(),
        }
        .sample(rng)
    }

    fn signals(&self, z: &[f64]) -> (VectorSignal, VectorSignal, VectorSignal) {
        let off = if self.with_states { 2 * self.n } else { 0 };
        let (mu, s) = (self.m * self.segments, self.segments);
        let sig = |dim: usize, a: usize, len: usize| {
            VectorSignal::from_flat(dim, self.knot_dt, z[a..a + len].to_vec()).expect("layout sizes are consistent")
        };
        (
            sig(self.m, off, mu),
            sig(self.m, off + mu, mu),
            sig(self.q, off + 2 * mu, self.q * s),
        )
    }

    fn scenario(&self, z: &[f64], horizon: f64, dt: Option<f64>) -> TrajectoryPairScenario {
        let (u1, u2, d) = self.signals(z);
        TrajectoryPairScenario {
            chi1: z[..self.n].to_vec(),
            chi2: z[self.n..2 * self.n].to_vec(),
            u1,
            u2,
            d,
            horizon,
            dt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalsifyOutcome {
    /// Residual series of the witness; `None` when the witness blows up.
    pub best: Option<ResidualSeries>,
    /// Largest max-residual found (`+∞` for a blow-up).
    pub best_value: f64,
    pub witness: TrajectoryPairScenario,
    pub blow_up_time: Option<f64>,
    /// The witness re-evaluated at half the step, when a violation was found.
    pub reverified: Option<ResidualSeries>,
    /// A violation that survived re-verification (or a blow-up).
    pub violation: bool,
    pub best_restart: usize,
    pub restart_values: Vec<f64>,
    pub evaluations: usize,
}

fn residual_value(res: &Result<ResidualSeries>) -> f64 {
    match res {
        Ok(s) => s.max_residual,
        Err(Error::BlowUp { .. }) => f64::INFINITY,
        Err(_) => f64::NEG_INFINITY,
    }
}

/// Searches for a scenario violating `cert` by maximizing the max residual
/// over `(χ₁, χ₂, u₁, u₂, d)` with seeded multistart Nelder–Mead.
/// Deterministic given the seed unless the wall-clock cap intervenes.
pub fn falsify(model: &SystemModel, cert: &IossCertificate, search: &SearchConfig) -> Result<FalsifyOutcome> {
    cert.validate()?;
    search.validate()?;
    let layout = Layout::new(model, search, true)?;
    let probe = layout.scenario(&layout.lo, search.horizon, search.dt);
    let dt = probe.resolved_dt()?;
    let deadline = search.deadline();
    let opts = search.nm();
    let eval = |z: &[f64]| ioss_residual(model, cert, &layout.scenario(z, search.horizon, Some(dt)), search.tolerance);

    let runs = multistart(search.restarts, search.seed, |_, rng| {
        let z0 = layout.sample(rng);
        nelder_mead(
            |z| {
                if deadline.expired() {
                    return None;
                }
                Some(-residual_value(&eval(z)))
            },
            &z0,
            &layout.lo,
            &layout.hi,
            &opts,
        )
    });
    let evaluations = runs.iter().flatten().map(|r| r.evals).sum();
    let restart_values: Vec<f64> = runs
        .iter()
        .map(|r| r.as_ref().map_or(f64::NAN, |m| -m.value))
        .collect();
    let best_restart = argmax_lowest(restart_values.iter().copied()).ok_or(Error::BudgetExhausted)?;
    let z = &runs[best_restart].as_ref().expect("argmax skips empty restarts").x;
    let witness = layout.scenario(z, search.horizon, Some(dt));
    let res = eval(z);
    let best_value = residual_value(&res);
    let (best, blow_up_time) = match res {
        Ok(s) => (Some(s), None),
        Err(Error::BlowUp { t }) => (None, Some(t)),
        Err(e) => return Err(e),
    };
    let found = blow_up_time.is_some() || best.as_ref().is_some_and(|s| !s.holds);
    let (reverified, violation) = if found {
        match ioss_residual(model, cert, &witness.with_dt(dt / 2.0), search.tolerance) {
            Ok(s) => {
                let v = !s.holds;
                (Some(s), v)
            }
            Err(Error::BlowUp { .. }) => (None, true),
            Err(e) => return Err(e),
        }
    } else {
        (None, false)
    };
    Ok(FalsifyOutcome {
        best,
        best_value,
        witness,
        blow_up_time,
        reverified,
        violation,
        best_restart,
        restart_values,
        evaluations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateWitness {
    pub t: f64,
    pub u1: VectorSignal,
    pub u2: VectorSignal,
    pub d: VectorSignal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEstimate {
    /// Lower estimate of the supremum defining the candidate.
    pub u_hat: f64,
    /// Value of the seed candidate `u₁ = u₂ = 0`, `d = 0`.
    pub seed_value: f64,
    /// Dissipation rate a Lyapunov certificate built from this candidate
    /// carries: `√λ`.
    pub lambda_used: f64,
    pub witness: CandidateWitness,
    pub restart_values: Vec<f64>,
}

/// Value of the candidate expression for fixed signals, maximized over the
/// grid nodes in `[0, t_max]`: `(max, argmax t)`.
fn candidate_value(
    model: &SystemModel,
    cert: &IossCertificate,
    chi1: &[f64],
    chi2: &[f64],
    sig: &(VectorSignal, VectorSignal, VectorSignal),
    t_max: f64,
    dt: f64,
) -> Result<(f64, f64)> {
    let (u1, u2, d) = sig;
    let x1 = simulate(model, chi1, u1, d, t_max, Some(dt))?;
    let x2 = simulate(model, chi2, u2, d, t_max, Some(dt))?;
    let ln = cert.lambda.ln();
    // ∫₀^∞ λ^{−τ}·2α_u(|u_Δ|) over the finite knot support
    let width = u1.dt();
    let per_knot = (-width * ln).exp_m1() / -ln;
    let knot_weights: Vec<(f64, f64)> = u1
        .iter_knots()
        .zip(u2.iter_knots())
        .enumerate()
        .map(|(k, (a, b))| (k as f64 * width, 2.0 * cert.alpha_u.value(dist(a, b)) * per_knot))
        .collect();
    let mut acc = DiscountedAccumulator::new(cert.lambda)?;
    let (mut best, mut best_t) = (f64::NEG_INFINITY, 0.0);
    for k in 0..=x1.steps() {
        if k > 0 {
            let j = k - 1;
            let yl = dist(&x1.outputs[j], &x2.outputs[j]);
            let yr = dist(&x1.step_end_outputs[j], &x2.step_end_outputs[j]);
            acc.push_step(dt, cert.alpha_y.value(yl), cert.alpha_y.value(yr));
        }
        let t = k as f64 * dt;
        let future: f64 = knot_weights.iter().map(|(a, w)| w * ((t - a) * ln).exp()).sum();
        let inner = cert.alpha.value(dist(&x1.states[k], &x2.states[k])) - future - acc.value();
        let v = (-0.5 * t * ln).exp() * inner;
        if v > best {
            best = v;
            best_t = t;
        }
    }
    Ok((best, best_t))
}

/// Lower estimate of the converse Lyapunov candidate at `(chi1, chi2)`:
/// the supremum over `t ∈ [0, t_max]` and `N`-knot signals on `[0, t_max]`
/// (`search.horizon`) of `λ^{−t/2}(α(|x_Δ(t)|) − ∫₀^∞ λ^{t−τ} 2α_u dτ −
/// ∫₀ᵗ λ^{t−τ} α_y dτ)`. The seed candidate is always included, and with
/// the same seed a larger restart count only adds candidates.
pub fn estimate_lyap_candidate(
    model: &SystemModel,
    cert: &IossCertificate,
    chi1: &[f64],
    chi2: &[f64],
    search: &SearchConfig,
) -> Result<CandidateEstimate> {
    cert.validate()?;
    search.validate()?;
    let layout = Layout::new(model, search, false)?;
    let t_max = search.horizon;
    let zero = vec![0.0; layout.lo.len()];
    let seed_sig = layout.signals(&zero);
    let dt = resolve_dt(&[&seed_sig.0, &seed_sig.2], t_max, search.dt)?;
    let (seed_value, seed_t) = candidate_value(model, cert, chi1, chi2, &seed_sig, t_max, dt)?;
    let deadline = search.deadline();
    let opts = search.nm();
    let value = |z: &[f64]| match candidate_value(model, cert, chi1, chi2, &layout.signals(z), t_max, dt) {
        Ok((v, _)) => v,
        Err(Error::BlowUp { .. }) => f64::INFINITY,
        Err(_) => f64::NEG_INFINITY,
    };
    let runs = multistart(search.restarts, search.seed, |_, rng| {
        let z0 = layout.sample(rng);
        nelder_mead(
            |z| (!deadline.expired()).then(|| -value(z)),
            &z0,
            &layout.lo,
            &layout.hi,
            &opts,
        )
    });
    let restart_values: Vec<f64> = runs.iter().map(|r| r.as_ref().map_or(f64::NAN, |m| -m.value)).collect();
    let best = argmax_lowest(restart_values.iter().copied());
    let (u_hat, witness) = match best {
        Some(i) if restart_values[i] > seed_value => {
            let z = &runs[i].as_ref().expect("argmax skips empty restarts").x;
            let sig = layout.signals(z);
            let (v, t) = candidate_value(model, cert, chi1, chi2, &sig, t_max, dt)?;
            (v, CandidateWitness { t, u1: sig.0, u2: sig.1, d: sig.2 })
        }
        _ => (
            seed_value,
            CandidateWitness {
                t: seed_t,
                u1: seed_sig.0,
                u2: seed_sig.1,
                d: seed_sig.2,
            },
        ),
    };
    Ok(CandidateEstimate {
        u_hat,
        seed_value,
        lambda_used: cert.lambda.sqrt(),
        witness,
        restart_values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuityRow {
    pub radius: f64,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuityReport {
    pub base_value: f64,
    /// `|Û(all restarts) − Û(half the restarts)|` at the base point.
    pub noise: f64,
    pub rows: Vec<ContinuityRow>,
    pub pass: bool,
}

/// Empirical modulus of continuity of the candidate around `(chi1, chi2)`.
/// Each radius perturbs every coordinate of `χ₁` and `χ₂` by `±radius`.
/// Refuses certificates the falsifier breaks, or whose candidate exceeds
/// its analytic upper bound. Passes iff deviations do not grow as the
/// radius shrinks, up to 10× the estimator noise.
pub fn continuity_probe(
    model: &SystemModel,
    cert: &IossCertificate,
    chi1: &[f64],
    chi2: &[f64],
    radii: &[f64],
    search: &SearchConfig,
) -> Result<ContinuityReport> {
    if radii.iter().any(|r| !(*r >= 0.0)) || radii.windows(2).any(|w| w[1] > w[0]) {
        return Err(invalid("radii must be nonnegative and nonincreasing"));
    }
    let pre = falsify(
        model,
        cert,
        &SearchConfig {
            restarts: search.restarts.max(4),
            ..search.clone()
        },
    )?;
    if pre.violation {
        return Err(Error::CertificateRejected(format!(
            "falsifier found a violation of {:.6e}; the candidate supremum may be unbounded",
            pre.best_value
        )));
    }
    let estimate = |a: &[f64], b: &[f64], restarts: usize| {
        estimate_lyap_candidate(model, cert, a, b, &SearchConfig { restarts, ..search.clone() }).map(|e| e.u_hat)
    };
    let base_value = estimate(chi1, chi2, search.restarts)?;
    let bound = cert.alpha_x.value(dist(chi1, chi2));
    if base_value > bound * (1.0 + 1e-3) + cert.default_tolerance(dist(chi1, chi2)) {
        return Err(Error::CertificateRejected(format!(
            "candidate {base_value:.6e} exceeds its upper bound {bound:.6e}"
        )));
    }
    let noise = (base_value - estimate(chi1, chi2, (search.restarts / 2).max(1))?).abs();
    let n = chi1.len();
    let mut rows = Vec::with_capacity(radii.len());
    for &radius in radii {
        let mut deviation = 0.0f64;
        if radius > 0.0 {
            for which in 0..2 {
                for i in 0..n {
                    for sign in [1.0, -1.0] {
                        let (mut a, mut b) = (chi1.to_vec(), chi2.to_vec());
                        let target = if which == 0 { &mut a } else { &mut b };
                        target[i] += sign * radius;
                        model.state_box.project(target);
                        deviation = deviation.max((estimate(&a, &b, search.restarts)? - base_value).abs());
                    }
                }
            }
        }
        rows.push(ContinuityRow { radius, deviation });
    }
    let slack = 10.0 * noise + 1e-12;
    let pass = rows.windows(2).all(|w| w[1].deviation <= w[0].deviation + slack);
    Ok(ContinuityReport {
        base_value,
        noise,
        rows,
        pass,
    })
}
