//! System models `ẋ = f(x, u, d)`, `y = h(x, u, d)` with declared increment
//! moduli, fixed-step RK4 simulation, and sampling audits of the moduli.
//!
//! `f` and `h` must be pure: the falsifier and the estimators call them
//! from several threads at once.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::comparison::{ComparisonFunction, OsgoodIntegral};
use crate::error::{invalid, Error, Result};
use crate::signals::{divides, grid_index, norm, VectorSignal};

/// `(x, u, d, out)`: writes the derivative or output into `out`.
pub type VectorField = Arc<dyn Fn(&[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Axis-aligned box; infinite bounds are allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(invalid("box bounds have different lengths"));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(*l <= 0.0 && 0.0 <= *h)) {
            return Err(invalid("every box must contain the origin"));
        }
        Ok(Self { lo, hi })
    }

    pub fn symmetric(dim: usize, radius: f64) -> Self {
        Self {
            lo: vec![-radius; dim],
            hi: vec![radius; dim],
        }
    }

    pub fn unbounded(dim: usize) -> Self {
        Self::symmetric(dim, f64::INFINITY)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.iter().chain(&self.hi).all(|v| v.is_finite())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| *l - 1e-12 <= *v && *v <= *h + 1e-12)
    }

    /// Intersection with `[-radius, radius]` per coordinate.
    pub fn clipped(&self, radius: Option<f64>) -> Result<Self> {
        let r = radius.unwrap_or(f64::INFINITY);
        let b = Self {
            lo: self.lo.iter().map(|l| l.max(-r)).collect(),
            hi: self.hi.iter().map(|h| h.min(r)).collect(),
        };
        if !b.is_bounded() {
            return Err(invalid("an unbounded box needs a sampling radius"));
        }
        Ok(b)
    }

    pub fn project(&self, x: &mut [f64]) {
        for (v, (l, h)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(*l, *h);
        }
    }

    /// Uniform sample; the box must be bounded.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| if l == h { *l } else { rng.random_range(*l..=*h) })
            .collect()
    }
}

/// Matrices of a linear model `ẋ = Ax + Ew + Bd`, `y = Cx (+ v)` with
/// unknown input `u = (w, v)`.
#[derive(Debug, Clone)]
pub struct LinearStructure {
    pub a: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// Whether `u` carries an additive output-noise channel `v` (of dim `p`).
    pub output_noise: bool,
}

#[derive(Clone)]
pub struct SystemModel {
    name: String,
    n: usize,
    m: usize,
    q: usize,
    p: usize,
    f: VectorField,
    h: VectorField,
    kappa1: Arc<OsgoodIntegral>,
    kappa2: ComparisonFunction,
    pub state_box: Bounds,
    pub u_box: Bounds,
    pub d_box: Bounds,
    process_inputs: usize,
    linear: Option<LinearStructure>,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("dims", &(self.n, self.m, self.q, self.p))
            .field("kappa1", self.kappa1.kappa1())
            .field("kappa2", &self.kappa2)
            .finish_non_exhaustive()
    }
}

/// Dimensions `(n, m, q, p)`: state, unknown input, known input, output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub q: usize,
    pub p: usize,
}

impl SystemModel {
    pub fn new(
        name: impl Into<String>,
        dims: Dims,
        f: VectorField,
        h: VectorField,
        kappa1: ComparisonFunction,
        kappa2: ComparisonFunction,
    ) -> Result<Self> {
        let Dims { n, m, q, p } = dims;
        if n == 0 || m == 0 || q == 0 || p == 0 {
            return Err(invalid("all model dimensions must be positive"));
        }
        kappa2.require_k_infinity("output modulus kappa2")?;
        let model = Self {
            name: name.into(),
            n,
            m,
            q,
            p,
            f,
            h,
            kappa1: Arc::new(OsgoodIntegral::new(kappa1)?),
            kappa2,
            state_box: Bounds::unbounded(n),
            u_box: Bounds::unbounded(m),
            d_box: Bounds::unbounded(q),
            process_inputs: m,
            linear: None,
        };
        let mut out = vec![0.0; n];
        model.eval_f(&vec![0.0; n], &vec![0.0; m], &vec![0.0; q], &mut out);
        if norm(&out) > 1e-12 {
            return Err(invalid(format!("f(0,0,0) = {out:?} is not zero")));
        }
        Ok(model)
    }

    pub fn with_boxes(mut self, state: Bounds, u: Bounds, d: Bounds) -> Result<Self> {
        for (b, dim, what) in [(&state, self.n, "state"), (&u, self.m, "u"), (&d, self.q, "d")] {
            if b.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: b.dim(),
                    context: what_box(what),
                });
            }
        }
        self.state_box = state;
        self.u_box = u;
        self.d_box = d;
        Ok(self)
    }

    /// Declares the first `k` components of `u` as process disturbances; the
    /// rest are measurement-noise channels.
    pub fn with_process_inputs(mut self, k: usize) -> Result<Self> {
        if k == 0 || k > self.m {
            return Err(invalid("process input count must lie in 1..=m"));
        }
        self.process_inputs = k;
        Ok(self)
    }

    pub fn with_linear(mut self, lin: LinearStructure) -> Result<Self> {
        let noise = if lin.output_noise { self.p } else { 0 };
        if lin.a.shape() != (self.n, self.n)
            || lin.e.shape() != (self.n, self.m - noise)
            || lin.b.shape() != (self.n, self.q)
            || lin.c.shape() != (self.p, self.n)
        {
            return Err(invalid("linear structure shapes do not match the model"));
        }
        self.process_inputs = self.m - noise;
        self.linear = Some(lin);
        Ok(self)
    }

    /// Replaces the declared moduli (e.g. to audit a different claim).
    pub fn with_moduli(mut self, kappa1: ComparisonFunction, kappa2: ComparisonFunction) -> Result<Self> {
        kappa2.require_k_infinity("output modulus kappa2")?;
        self.kappa1 = Arc::new(OsgoodIntegral::new(kappa1)?);
        self.kappa2 = kappa2;
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> Dims {
        Dims {
            n: self.n,
            m: self.m,
            q: self.q,
            p: self.p,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn process_inputs(&self) -> usize {
        self.process_inputs
    }

    pub fn linear(&self) -> Option<&LinearStructure> {
        self.linear.as_ref()
    }

    pub fn kappa1(&self) -> &ComparisonFunction {
        self.kappa1.kappa1()
    }

    pub fn osgood(&self) -> &OsgoodIntegral {
        &self.kappa1
    }

    pub fn kappa2(&self) -> &ComparisonFunction {
        &self.kappa2
    }

    pub fn eval_f(&self, x: &[f64], u: &[f64], d: &[f64], out: &mut [f64]) {
        (self.f)(x, u, d, out)
    }

    pub fn eval_h(&self, x: &[f64], u: &[f64], d: &[f64], out: &mut [f64]) {
        (self.h)(x, u, d, out)
    }

    fn check_signal(&self, sig: &VectorSignal, dim: usize, bounds: &Bounds, what: &'static str) -> Result<()> {
        if sig.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: sig.dim(),
                context: what,
            });
        }
        if let Some((k, v)) = sig.iter_knots().enumerate().find(|(_, v)| !bounds.contains(v)) {
            return Err(Error::BoxViolation {
                what,
                detail: format!("knot {k} = {v:?}"),
            });
        }
        Ok(())
    }

    pub(crate) fn check_initial(&self, chi: &[f64]) -> Result<()> {
        if chi.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: chi.len(),
                context: "initial state",
            });
        }
        if !self.state_box.contains(chi) {
            return Err(Error::BoxViolation {
                what: "initial state",
                detail: format!("{chi:?}"),
            });
        }
        Ok(())
    }
}

fn what_box(what: &str) -> &'static str {
    match what {
        "state" => "state box",
        "u" => "u box",
        _ => "d box",
    }
}

/// Simulated solution on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// `y` at each node, using the input held on the step that starts there
    /// (the last node reuses the last step's input).
    pub outputs: Vec<Vec<f64>>,
    /// `h(x_{k+1}, u_k, d_k)`: the output at the right end of step `k`.
    pub step_end_outputs: Vec<Vec<f64>>,
    /// First node time at which the state left the declared state box.
    pub left_state_box: Option<f64>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn final_state(&self) -> &[f64] {
        &self.states[self.states.len() - 1]
    }
}

/// Scratch buffers for one RK4 step.
pub(crate) struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub(crate) fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }

    /// Classical RK4 step for an autonomous right-hand side.
    pub(crate) fn step(&mut self, rhs: &impl Fn(&[f64], &mut [f64]), x: &mut [f64], h: f64) {
        rhs(x, &mut self.k1);
        for i in 0..x.len() {
            self.tmp[i] = x[i] + 0.5 * h * self.k1[i];
        }
        rhs(&self.tmp, &mut self.k2);
        for i in 0..x.len() {
            self.tmp[i] = x[i] + 0.5 * h * self.k2[i];
        }
        rhs(&self.tmp, &mut self.k3);
        for i in 0..x.len() {
            self.tmp[i] = x[i] + h * self.k3[i];
        }
        rhs(&self.tmp, &mut self.k4);
        for i in 0..x.len() {
            x[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// Input value held on step `k` of a grid with step `dt`.
pub(crate) fn step_value(sig: &VectorSignal, k: usize, dt: f64, out: &mut [f64]) {
    sig.sample_into((k as f64 + 0.5) * dt, out);
}

/// Picks the simulation step: `dt` if given (validated), otherwise the
/// largest divisor of the input steps not exceeding `min(input dt, T/1000)`.
pub fn resolve_dt(inputs: &[&VectorSignal], horizon: f64, dt: Option<f64>) -> Result<f64> {
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(invalid(format!("horizon must be finite and nonnegative, got {horizon}")));
    }
    let dt = match dt {
        Some(dt) => {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(invalid(format!("dt must be positive, got {dt}")));
            }
            dt
        }
        None => {
            let base = inputs.iter().map(|s| s.dt()).fold(f64::INFINITY, f64::min);
            let cap = if horizon > 0.0 { base.min(horizon / 1000.0) } else { base };
            let k = (base / cap - 1e-9).ceil().max(1.0);
            base / k
        }
    };
    for s in inputs {
        if !divides(dt, s.dt()) {
            return Err(invalid(format!("dt {dt} does not divide the input step {}", s.dt())));
        }
    }
    if horizon > 0.0 {
        grid_index(horizon, dt)?;
    }
    Ok(dt)
}

/// Integrates the model from `chi` under `u`, `d` over `[0, T]`.
pub fn simulate(
    model: &SystemModel,
    chi: &[f64],
    u: &VectorSignal,
    d: &VectorSignal,
    horizon: f64,
    dt: Option<f64>,
) -> Result<Trajectory> {
    model.check_initial(chi)?;
    model.check_signal(u, model.m, &model.u_box, "u")?;
    model.check_signal(d, model.q, &model.d_box, "d")?;
    let dt = resolve_dt(&[u, d], horizon, dt)?;
    simulate_unchecked(model, chi, u, d, horizon, dt)
}

pub(crate) fn simulate_unchecked(
    model: &SystemModel,
    chi: &[f64],
    u: &VectorSignal,
    d: &VectorSignal,
    horizon: f64,
    dt: f64,
) -> Result<Trajectory> {
    let steps = if horizon > 0.0 { grid_index(horizon, dt)? } else { 0 };
    let (n, p) = (model.n, model.p);
    let mut x = chi.to_vec();
    let mut uk = vec![0.0; model.m];
    let mut dk = vec![0.0; model.q];
    let mut y = vec![0.0; p];
    let mut rk = Rk4::new(n);
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut outputs = Vec::with_capacity(steps + 1);
    let mut step_end_outputs = Vec::with_capacity(steps);
    let mut left_state_box = None;
    times.push(0.0);
    states.push(x.clone());
    for k in 0..steps {
        step_value(u, k, dt, &mut uk);
        step_value(d, k, dt, &mut dk);
        model.eval_h(&x, &uk, &dk, &mut y);
        outputs.push(y.clone());
        let rhs = |s: &[f64], out: &mut [f64]| model.eval_f(s, &uk, &dk, out);
        rk.step(&rhs, &mut x, dt);
        let t = (k + 1) as f64 * dt;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { t });
        }
        if left_state_box.is_none() && !model.state_box.contains(&x) {
            left_state_box = Some(t);
        }
        model.eval_h(&x, &uk, &dk, &mut y);
        step_end_outputs.push(y.clone());
        times.push(t);
        states.push(x.clone());
    }
    if steps == 0 {
        step_value(u, 0, dt, &mut uk);
        step_value(d, 0, dt, &mut dk);
        model.eval_h(&x, &uk, &dk, &mut y);
        outputs.push(y.clone());
    } else {
        outputs.push(step_end_outputs[steps - 1].clone());
    }
    Ok(Trajectory {
        dt,
        times,
        states,
        outputs,
        step_end_outputs,
        left_state_box,
    })
}

/// Worst observed ratios of actual increments to the declared moduli.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub samples: usize,
    pub skipped: usize,
    pub f_at_origin: f64,
    pub kappa1_ratio: f64,
    pub kappa2_ratio: f64,
    /// `(z, z')` attaining the worst `f` ratio, with `z = (x, u, d)`.
    pub kappa1_witness: Option<(Vec<f64>, Vec<f64>)>,
    /// `((x, u), (x', u'))` attaining the worst `h` ratio at shared `d`.
    pub kappa2_witness: Option<(Vec<f64>, Vec<f64>)>,
    pub pass: bool,
}

/// Ratios above this count as modulus violations.
pub const AUDIT_SLACK: f64 = 1.0 + 1e-9;

/// Samples point pairs in the boxes and compares increments of `f` and `h`
/// against `κ₁` and `κ₂`. Half of the second points differ from the first
/// along a single coordinate. Passing is evidence, not proof.
pub fn audit_increment_bounds(
    model: &SystemModel,
    sample_count: usize,
    seed: u64,
    radius: Option<f64>,
) -> Result<AuditReport> {
    let sx = model.state_box.clipped(radius)?;
    let su = model.u_box.clipped(radius)?;
    let sd = model.d_box.clipped(radius)?;
    let (n, m, q, p) = (model.n, model.m, model.q, model.p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f0 = vec![0.0; n];
    model.eval_f(&vec![0.0; n], &vec![0.0; m], &vec![0.0; q], &mut f0);
    let f_at_origin = norm(&f0);

    let mut report = AuditReport {
        samples: sample_count,
        skipped: 0,
        f_at_origin,
        kappa1_ratio: 0.0,
        kappa2_ratio: 0.0,
        kappa1_witness: None,
        kappa2_witness: None,
        pass: false,
    };
    let (mut fa, mut fb) = (vec![0.0; n], vec![0.0; n]);
    let (mut ha, mut hb) = (vec![0.0; p], vec![0.0; p]);
    let bounds_of = |i: usize| -> (f64, f64) {
        if i < n {
            (sx.lo[i], sx.hi[i])
        } else if i < n + m {
            (su.lo[i - n], su.hi[i - n])
        } else {
            (sd.lo[i - n - m], sd.hi[i - n - m])
        }
    };
    for s in 0..sample_count {
        let mut z1 = sx.sample(&mut rng);
        z1.extend(su.sample(&mut rng));
        z1.extend(sd.sample(&mut rng));
        let z2 = if s % 2 == 0 {
            let mut z = sx.sample(&mut rng);
            z.extend(su.sample(&mut rng));
            z.extend(sd.sample(&mut rng));
            z
        } else {
            let mut z = z1.clone();
            let i = rng.random_range(0..n + m + q);
            let (lo, hi) = bounds_of(i);
            z[i] = if lo == hi { lo } else { rng.random_range(lo..=hi) };
            z
        };
        let gap = crate::signals::dist(&z1, &z2);
        if gap == 0.0 {
            report.skipped += 1;
            continue;
        }
        let k1 = model.kappa1().value(gap);
        if !(k1 > 0.0) {
            return Err(invalid(format!("kappa1 vanishes on the nonzero difference {gap:e}")));
        }
        let (x1, rest1) = z1.split_at(n);
        let (u1, d1) = rest1.split_at(m);
        let (x2, rest2) = z2.split_at(n);
        let (u2, d2) = rest2.split_at(m);
        model.eval_f(x1, u1, d1, &mut fa);
        model.eval_f(x2, u2, d2, &mut fb);
        let ratio = crate::signals::dist(&fa, &fb) / k1;
        if ratio > report.kappa1_ratio {
            report.kappa1_ratio = ratio;
            report.kappa1_witness = Some((z1.clone(), z2.clone()));
        }
        // output modulus: shared d
        let gap_xu = crate::signals::dist(&z1[..n + m], &z2[..n + m]);
        if gap_xu > 0.0 {
            let k2 = model.kappa2.value(gap_xu);
            model.eval_h(x1, u1, d1, &mut ha);
            model.eval_h(x2, u2, d1, &mut hb);
            let ratio = crate::signals::dist(&ha, &hb) / k2;
            if ratio > report.kappa2_ratio {
                report.kappa2_ratio = ratio;
                report.kappa2_witness = Some((z1[..n + m].to_vec(), z2[..n + m].to_vec()));
            }
        }
    }
    report.pass = f_at_origin <= 1e-12 && report.kappa1_ratio <= AUDIT_SLACK && report.kappa2_ratio <= AUDIT_SLACK;
    Ok(report)
}

/// Names accepted by [`registry_get`].
pub const REGISTRY: [&str; 4] = [
    "linear_scalar",
    "linear_2d_detectable",
    "unstable_unobservable",
    "lure_saturated",
];

fn param(params: &BTreeMap<String, f64>, key: &str, default: f64) -> Result<f64> {
    let v = params.get(key).copied().unwrap_or(default);
    if !v.is_finite() {
        return Err(invalid(format!("parameter {key} must be finite")));
    }
    Ok(v)
}

fn default_boxes(model: SystemModel) -> Result<SystemModel> {
    let Dims { n, m, q, .. } = model.dims();
    model.with_boxes(Bounds::symmetric(n, 5.0), Bounds::symmetric(m, 2.0), Bounds::symmetric(q, 1.0))
}

fn linear_model(name: &str, lin: LinearStructure, kappa1: ComparisonFunction, kappa2: ComparisonFunction) -> Result<SystemModel> {
    let n = lin.a.nrows();
    let p = lin.c.nrows();
    let w = lin.e.ncols();
    let q = lin.b.ncols();
    let noise = lin.output_noise;
    let m = w + if noise { p } else { 0 };
    let (a, e, b, c) = (lin.a.clone(), lin.e.clone(), lin.b.clone(), lin.c.clone());
    let f: VectorField = Arc::new(move |x, u, d, out| {
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += a[(i, j)] * x[j];
            }
            for j in 0..w {
                acc += e[(i, j)] * u[j];
            }
            for j in 0..q {
                acc += b[(i, j)] * d[j];
            }
            out[i] = acc;
        }
    });
    let h: VectorField = Arc::new(move |x, u, _d, out| {
        for i in 0..p {
            let mut acc = 0.0;
            for j in 0..n {
                acc += c[(i, j)] * x[j];
            }
            if noise {
                acc += u[w + i];
            }
            out[i] = acc;
        }
    });
    let model = SystemModel::new(name, Dims { n, m, q, p }, f, h, kappa1, kappa2)?.with_linear(lin)?;
    default_boxes(model)
}

fn matrix(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(invalid(format!("matrix {what} must be {nrows}x{ncols}")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid(format!("matrix {what} has non-finite entries")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Linear model read from a model file; matrices are lists of rows.
///
/// Omitted moduli default to Frobenius-norm Lipschitz bounds,
/// `κ₁ = ‖[A E B]‖·s` and `κ₂ = ‖[C I]‖·s` (`‖C‖·s` without output noise,
/// or `s` when that norm is zero). Omitted box radii default to the registry
/// boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearModel {
    #[serde(default = "LinearModel::default_name")]
    pub name: String,
    pub a: Vec<Vec<f64>>,
    pub e: Vec<Vec<f64>>,
    #[serde(default)]
    pub b: Option<Vec<Vec<f64>>>,
    pub c: Vec<Vec<f64>>,
    #[serde(default = "LinearModel::default_noise")]
    pub output_noise: bool,
    #[serde(default)]
    pub kappa1: Option<ComparisonFunction>,
    #[serde(default)]
    pub kappa2: Option<ComparisonFunction>,
    #[serde(default)]
    pub state_radius: Option<f64>,
    #[serde(default)]
    pub u_radius: Option<f64>,
    #[serde(default)]
    pub d_radius: Option<f64>,
}

impl LinearModel {
    fn default_name() -> String {
        "linear".into()
    }

    fn default_noise() -> bool {
        true
    }

    pub fn build(&self) -> Result<SystemModel> {
        let n = self.a.len();
        let w = self.e.first().map_or(0, Vec::len);
        let p = self.c.len();
        let a = matrix(&self.a, n, n, "a")?;
        let e = matrix(&self.e, n, w, "e")?;
        let b = match &self.b {
            Some(rows) => matrix(rows, n, rows.first().map_or(0, Vec::len), "b")?,
            None => DMatrix::zeros(n, 1),
        };
        let c = matrix(&self.c, p, n, "c")?;
        let fro = |m: &DMatrix<f64>| m.iter().map(|v| v * v).sum::<f64>();
        let lip = |v: f64| {
            if v > 0.0 {
                ComparisonFunction::linear(v.sqrt())
            } else {
                Ok(ComparisonFunction::identity())
            }
        };
        let kappa1 = match &self.kappa1 {
            Some(k) => k.clone(),
            None => lip(fro(&a) + fro(&e) + fro(&b))?,
        };
        let kappa2 = match &self.kappa2 {
            Some(k) => k.clone(),
            None => lip(fro(&c) + if self.output_noise { p as f64 } else { 0.0 })?,
        };
        let lin = LinearStructure {
            a,
            e,
            b,
            c,
            output_noise: self.output_noise,
        };
        let model = linear_model(&self.name, lin, kappa1, kappa2)?;
        let Dims { n, m, q, .. } = model.dims();
        let (sx, su, sd) = (self.state_radius.unwrap_or(5.0), self.u_radius.unwrap_or(2.0), self.d_radius.unwrap_or(1.0));
        if [sx, su, sd].iter().any(|r| !(*r > 0.0)) {
            return Err(invalid("box radii must be positive"));
        }
        model.with_boxes(Bounds::symmetric(n, sx), Bounds::symmetric(m, su), Bounds::symmetric(q, sd))
    }
}

/// Builds one of the example systems in [`REGISTRY`].
///
/// * `linear_scalar(a, c)`: `ẋ = a·x + w`, `y = c·x + v`, `u = (w, v)`
/// * `linear_2d_detectable`: `ẋ₁ = −x₁ + x₂`, `ẋ₂ = −x₂ + w`, `y = x₁ + v`
/// * `unstable_unobservable`: `ẋ = x + u`, `y ≡ 0`
/// * `lure_saturated`: `ẋ = −x + tanh(x) + u`, `y = x`
///
/// The known input `d` is scalar and does not enter these models.
pub fn registry_get(name: &str, params: &BTreeMap<String, f64>) -> Result<SystemModel> {
    let name = match name {
        "lur'e_saturated" | "lur\u{2019}e_saturated" => "lure_saturated",
        other => other,
    };
    match name {
        "linear_scalar" => {
            let a = param(params, "a", -1.0)?;
            let c = param(params, "c", 1.0)?;
            let lin = LinearStructure {
                a: DMatrix::from_element(1, 1, a),
                e: DMatrix::from_element(1, 1, 1.0),
                b: DMatrix::zeros(1, 1),
                c: DMatrix::from_element(1, 1, c),
                output_noise: true,
            };
            linear_model(
                name,
                lin,
                ComparisonFunction::linear(a.abs() + 1.0)?,
                ComparisonFunction::linear(c.abs() + 1.0)?,
            )
        }
        "linear_2d_detectable" => {
            let lin = LinearStructure {
                a: DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -1.0]),
                e: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
                b: DMatrix::zeros(2, 1),
                c: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
                output_noise: true,
            };
            linear_model(name, lin, ComparisonFunction::linear(2.0)?, ComparisonFunction::linear(2.0)?)
        }
        "unstable_unobservable" => {
            let lin = LinearStructure {
                a: DMatrix::from_element(1, 1, 1.0),
                e: DMatrix::from_element(1, 1, 1.0),
                b: DMatrix::zeros(1, 1),
                c: DMatrix::zeros(1, 1),
                output_noise: false,
            };
            linear_model(name, lin, ComparisonFunction::linear(2.0)?, ComparisonFunction::identity())
        }
        "lure_saturated" => {
            let f: VectorField = Arc::new(|x, u, _d, out| out[0] = -x[0] + x[0].tanh() + u[0]);
            let h: VectorField = Arc::new(|x, _u, _d, out| out[0] = x[0]);
            let model = SystemModel::new(
                name,
                Dims { n: 1, m: 1, q: 1, p: 1 },
                f,
                h,
                ComparisonFunction::linear(2.0)?,
                ComparisonFunction::identity(),
            )?;
            default_boxes(model)
        }
        other => Err(Error::UnknownModel(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn no_params() -> BTreeMap<String, f64> {
        BTreeMap::new()
    }

    #[test]
    fn linear_model_file_matches_registry() {
        let def: LinearModel = serde_json::from_str(r#"{"name":"s","a":[[-1]],"e":[[1]],"c":[[1]],"kappa1":{"variant":"power","a":2,"b":1},"kappa2":{"variant":"power","a":2,"b":1}}"#).unwrap();
        let built = def.build().unwrap();
        let reg = scalar();
        assert_eq!(built.dims(), reg.dims());
        let u = VectorSignal::new(2, 0.25, vec![vec![0.5, 0.1], vec![-1.0, 0.0]]).unwrap();
        let d = VectorSignal::zeros(1, 0.25, 2).unwrap();
        let a = simulate(&built, &[1.0], &u, &d, 1.0, Some(0.01)).unwrap();
        let b = simulate(&reg, &[1.0], &u, &d, 1.0, Some(0.01)).unwrap();
        assert_eq!(a, b);
        let defaulted: LinearModel = serde_json::from_str(r#"{"a":[[0,1],[-2,-3]],"e":[[0],[1]],"c":[[1,0]],"output_noise":false}"#).unwrap();
        let m = defaulted.build().unwrap();
        assert_eq!((m.n(), m.m(), m.p()), (2, 1, 1));
        assert!(audit_increment_bounds(&m, 200, 1, None).unwrap().pass);
        let bad: LinearModel = serde_json::from_str(r#"{"a":[[0,1]],"e":[[1]],"c":[[1]]}"#).unwrap();
        assert!(bad.build().is_err());
    }

    fn scalar() -> SystemModel {
        registry_get("linear_scalar", &no_params()).unwrap()
    }

    fn zero_u(model: &SystemModel, dt: f64, knots: usize) -> VectorSignal {
        VectorSignal::zeros(model.m(), dt, knots).unwrap()
    }

    #[test]
    fn linear_scalar_closed_form() {
        let m = scalar();
        let d = VectorSignal::zeros(1, 1.0, 1).unwrap();
        let traj = simulate(&m, &[1.0], &zero_u(&m, 1.0, 1), &d, 1.0, Some(1e-3)).unwrap();
        assert!((traj.final_state()[0] - (-1.0f64).exp()).abs() < 1e-8);
        assert_eq!(traj.times.len(), 1001);
        assert_eq!(traj.outputs.len(), 1001);
        let u = VectorSignal::constant(1.0, 1, &[1.0, 0.0]).unwrap();
        let traj = simulate(&m, &[0.0], &u, &d, 1.0, Some(1e-3)).unwrap();
        assert!((traj.final_state()[0] - (1.0 - (-1.0f64).exp())).abs() < 1e-8);
        // y = x + v at the nodes
        assert_eq!(traj.outputs[10][0], traj.states[10][0]);
    }

    #[test]
    fn equilibrium_stays_at_origin() {
        for name in REGISTRY {
            let m = registry_get(name, &no_params()).unwrap();
            let u = zero_u(&m, 0.5, 4);
            let d = VectorSignal::zeros(m.q(), 0.5, 4).unwrap();
            let traj = simulate(&m, &vec![0.0; m.n()], &u, &d, 2.0, None).unwrap();
            assert!(traj.states.iter().flatten().all(|v| *v == 0.0), "{name}");
        }
    }

    #[test]
    fn rk4_order() {
        let m = scalar();
        let d = VectorSignal::zeros(1, 1.0, 2).unwrap();
        let u = zero_u(&m, 1.0, 2);
        let exact = (-2.0f64).exp();
        let err = |dt: f64| (simulate(&m, &[1.0], &u, &d, 2.0, Some(dt)).unwrap().final_state()[0] - exact).abs();
        let (e1, e2) = (err(0.1), err(0.05));
        let order = (e1 / e2).log2();
        assert!((3.5..=4.5).contains(&order), "order {order}");
    }

    #[test]
    fn default_dt_and_errors() {
        let m = scalar();
        let u = zero_u(&m, 0.5, 4);
        let d = VectorSignal::zeros(1, 0.5, 4).unwrap();
        let traj = simulate(&m, &[1.0], &u, &d, 2.0, None).unwrap();
        assert!((traj.dt - 2e-3).abs() < 1e-15);
        assert!(simulate(&m, &[1.0], &u, &d, 2.0, Some(0.3)).is_err());
        assert!(matches!(
            simulate(&m, &[9.0], &u, &d, 2.0, None),
            Err(Error::BoxViolation { .. })
        ));
        let big = VectorSignal::constant(0.5, 4, &[5.0, 0.0]).unwrap();
        assert!(simulate(&m, &[1.0], &big, &d, 2.0, None).is_err());
        let wrong = VectorSignal::zeros(3, 0.5, 4).unwrap();
        assert!(simulate(&m, &[1.0], &wrong, &d, 2.0, None).is_err());
    }

    #[test]
    fn blow_up_is_reported() {
        let f: VectorField = Arc::new(|x, _u, _d, out| out[0] = x[0] * x[0] * x[0]);
        let h: VectorField = Arc::new(|x, _u, _d, out| out[0] = x[0]);
        // declared moduli are wrong on purpose; the simulation must still fail cleanly
        let m = SystemModel::new(
            "cubic",
            Dims { n: 1, m: 1, q: 1, p: 1 },
            f,
            h,
            ComparisonFunction::identity(),
            ComparisonFunction::identity(),
        )
        .unwrap();
        let u = VectorSignal::zeros(1, 1.0, 1).unwrap();
        let res = simulate(&m, &[10.0], &u, &u, 1.0, Some(1e-2));
        assert!(matches!(res, Err(Error::BlowUp { t }) if t > 0.0 && t <= 1.0));
    }

    #[test]
    fn audit_examples() {
        let m = scalar();
        let rep = audit_increment_bounds(&m, 100_000, 1, None).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.kappa1_ratio <= 1.0);
        let uu = registry_get("unstable_unobservable", &no_params()).unwrap();
        let rep = audit_increment_bounds(&uu, 10_000, 2, None).unwrap();
        assert!(rep.pass);
        assert_eq!(rep.kappa2_ratio, 0.0);
        let wrong = scalar()
            .with_moduli(ComparisonFunction::linear(0.5).unwrap(), ComparisonFunction::linear(2.0).unwrap())
            .unwrap();
        let rep = audit_increment_bounds(&wrong, 1000, 3, None).unwrap();
        assert!(!rep.pass);
        assert!(rep.kappa1_ratio > 1.0);
        assert!(rep.kappa1_witness.is_some());
        for name in REGISTRY {
            let m = registry_get(name, &no_params()).unwrap();
            assert!(audit_increment_bounds(&m, 20_000, 4, None).unwrap().pass, "{name}");
        }
    }

    #[test]
    fn audit_needs_bounded_boxes() {
        let m = scalar()
            .with_boxes(Bounds::unbounded(1), Bounds::unbounded(2), Bounds::unbounded(1))
            .unwrap();
        assert!(audit_increment_bounds(&m, 10, 0, None).is_err());
        assert!(audit_increment_bounds(&m, 10, 0, Some(3.0)).unwrap().pass);
    }

    #[test]
    fn registry_lookup() {
        let m = registry_get("linear_scalar", &BTreeMap::from([("a".to_string(), -1.0), ("c".to_string(), 1.0)])).unwrap();
        let mut out = [1.0];
        m.eval_f(&[0.0], &[0.0, 0.0], &[0.0], &mut out);
        assert_eq!(out[0], 0.0);
        assert!(matches!(registry_get("nope", &no_params()), Err(Error::UnknownModel(_))));
        assert!(registry_get("lur'e_saturated", &no_params()).is_ok());
        assert_eq!(m.process_inputs(), 1);
        assert!(registry_get("unstable_unobservable", &no_params()).unwrap().linear().is_some());
    }

    #[test]
    fn non_equilibrium_model_rejected() {
        let f: VectorField = Arc::new(|_x, _u, _d, out| out[0] = 1.0);
        let h: VectorField = Arc::new(|x, _u, _d, out| out[0] = x[0]);
        let res = SystemModel::new(
            "drift",
            Dims { n: 1, m: 1, q: 1, p: 1 },
            f,
            h,
            ComparisonFunction::identity(),
            ComparisonFunction::identity(),
        );
        assert!(res.is_err());
    }

    #[test]
    fn deterministic_reruns() {
        let m = registry_get("lure_saturated", &no_params()).unwrap();
        let u = VectorSignal::new(1, 0.25, vec![vec![0.3], vec![-1.0], vec![0.7], vec![2.0]]).unwrap();
        let d = VectorSignal::zeros(1, 0.25, 4).unwrap();
        let a = simulate(&m, &[0.4], &u, &d, 1.0, None).unwrap();
        let b = simulate(&m, &[0.4], &u, &d, 1.0, None).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn envelope_bounds_trajectory_differences(
            which in 0usize..4,
            chi1 in proptest::collection::vec(-3.0f64..3.0, 2),
            chi2 in proptest::collection::vec(-3.0f64..3.0, 2),
            u1 in proptest::collection::vec(-2.0f64..2.0, 8),
            u2 in proptest::collection::vec(-2.0f64..2.0, 8),
        ) {
            let m = registry_get(REGISTRY[which], &no_params()).unwrap();
            let (n, mm) = (m.n(), m.m());
            let horizon = 1.0;
            let sig = |v: &[f64]| VectorSignal::from_flat(mm, 0.25, v[..4 * mm].to_vec()).unwrap();
            let (s1, s2) = (sig(&u1), sig(&u2));
            let d = VectorSignal::zeros(1, 0.25, 4).unwrap();
            let a = simulate(&m, &chi1[..n], &s1, &d, horizon, Some(1e-2)).unwrap();
            let b = simulate(&m, &chi2[..n], &s2, &d, horizon, Some(1e-2)).unwrap();
            let du = s1.sub(&s2).unwrap().sup_norm(0.0, horizon).unwrap();
            let c = m.osgood().envelope_constant(crate::signals::dist(&chi1[..n], &chi2[..n]), du, 0.0, horizon);
            for (k, t) in a.times.iter().enumerate() {
                let gap = crate::signals::dist(&a.states[k], &b.states[k]);
                let bound = m.osgood().bihari_bound(c, *t).unwrap();
                prop_assert!(gap <= bound * (1.0 + 1e-6), "t={t} gap={gap} bound={bound}");
            }
        }
    }
}
