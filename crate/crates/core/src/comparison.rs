//! Comparison functions (class K / K∞ and non-decreasing moduli), the
//! Osgood divergence check, and the Bihari envelope built from
//! `G(s) = ∫₁ˢ dr / κ₁(3r)`.
//!
//! [`OsgoodIntegral`] pre-warms `G` on a geometric grid over `[1e-9, 1e9]`
//! at construction and is immutable afterwards, so it may be shared freely
//! between threads. Queries outside the grid are integrated on demand and
//! never cached.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::quadrature;

/// Scaling inside the modulus, `κ̄₁(s) = κ₁(3s)`.
pub const OSGOOD_SCALE: f64 = 3.0;

/// A scalar comparison function `[0, ∞) → [0, ∞)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ComparisonFunction {
    /// `s ↦ a·s^b`
    Power { a: f64, b: f64 },
    /// `s ↦ a·s·ln(1+s)`
    LogAffine { a: f64 },
    /// `s ↦ Σ scale_i·f_i(s)`
    Sum { terms: Vec<ScaledTerm> },
    Tabulated(Tabulated),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledTerm {
    pub scale: f64,
    pub f: ComparisonFunction,
}

/// Piecewise-linear table through `(0, 0)` with a power-law tail
/// `y_n·(s/s_n)^tail_exponent` past the last knot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tabulated {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub knots: Vec<[f64; 2]>,
    /// Two-column CSV (`s,value`) holding the knots; loaded by
    /// [`ComparisonFunction::resolve_files`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
    pub tail_exponent: f64,
}

/// Monotonicity class of a comparison function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionClass {
    KInfinity,
    /// Strictly increasing but bounded.
    K,
    /// Only non-decreasing; admissible as an increment modulus.
    NonDecreasing,
}

impl ComparisonFunction {
    pub fn identity() -> Self {
        Self::Power { a: 1.0, b: 1.0 }
    }

    pub fn power(a: f64, b: f64) -> Result<Self> {
        let f = Self::Power { a, b };
        f.validate()?;
        Ok(f)
    }

    pub fn linear(a: f64) -> Result<Self> {
        Self::power(a, 1.0)
    }

    pub fn quadratic(a: f64) -> Result<Self> {
        Self::power(a, 2.0)
    }

    pub fn log_affine(a: f64) -> Result<Self> {
        let f = Self::LogAffine { a };
        f.validate()?;
        Ok(f)
    }

    pub fn sum(terms: Vec<(f64, ComparisonFunction)>) -> Result<Self> {
        let f = Self::Sum {
            terms: terms
                .into_iter()
                .map(|(scale, f)| ScaledTerm { scale, f })
                .collect(),
        };
        f.validate()?;
        Ok(f)
    }

    pub fn tabulated(knots: Vec<[f64; 2]>, tail_exponent: f64) -> Result<Self> {
        let f = Self::Tabulated(Tabulated {
            knots,
            csv: None,
            tail_exponent,
        });
        f.validate()?;
        Ok(f)
    }

    /// Loads CSV-backed tables, resolving relative paths against `base`.
    pub fn resolve_files(&mut self, base: &Path) -> Result<()> {
        match self {
            Self::Sum { terms } => terms.iter_mut().try_for_each(|t| t.f.resolve_files(base)),
            Self::Tabulated(tab) => {
                if let Some(file) = tab.csv.take() {
                    let path = base.join(&file);
                    let mut rdr = csv::ReaderBuilder::new()
                        .has_headers(true)
                        .trim(csv::Trim::All)
                        .from_path(&path)?;
                    let mut knots = Vec::new();
                    for rec in rdr.records() {
                        let rec = rec?;
                        let parse = |i: usize| -> Result<f64> {
                            rec.get(i)
                                .ok_or_else(|| Error::Parse(format!("{}: missing column {i}", path.display())))?
                                .parse()
                                .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
                        };
                        knots.push([parse(0)?, parse(1)?]);
                    }
                    tab.knots = knots;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64, what: &str| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(invalid(format!("{what} must be positive and finite, got {x}")))
            }
        };
        match self {
            Self::Power { a, b } => {
                pos(*a, "power coefficient")?;
                pos(*b, "power exponent")
            }
            Self::LogAffine { a } => pos(*a, "log-affine coefficient"),
            Self::Sum { terms } => {
                if terms.is_empty() {
                    return Err(invalid("sum needs at least one term"));
                }
                terms.iter().try_for_each(|t| {
                    pos(t.scale, "sum scale")?;
                    t.f.validate()
                })
            }
            Self::Tabulated(tab) => {
                if tab.csv.is_some() {
                    return Err(invalid("tabulated function references an unloaded CSV"));
                }
                let k = &tab.knots;
                if k.len() < 2 {
                    return Err(invalid("table needs at least two knots"));
                }
                if k[0] != [0.0, 0.0] {
                    return Err(invalid("table must start at (0, 0)"));
                }
                if k.iter().flatten().any(|x| !x.is_finite()) {
                    return Err(invalid("table entries must be finite"));
                }
                for w in k.windows(2) {
                    if w[1][0] <= w[0][0] {
                        return Err(invalid("table abscissae must be strictly increasing"));
                    }
                    if w[1][1] < w[0][1] {
                        return Err(invalid("table values must be non-decreasing"));
                    }
                }
                if !(tab.tail_exponent >= 0.0 && tab.tail_exponent.is_finite()) {
                    return Err(invalid("tail exponent must be finite and nonnegative"));
                }
                if k[k.len() - 1][1] <= 0.0 {
                    return Err(invalid("table is identically zero"));
                }
                Ok(())
            }
        }
    }

    pub fn class(&self) -> FunctionClass {
        match self {
            Self::Power { .. } | Self::LogAffine { .. } => FunctionClass::KInfinity,
            Self::Sum { terms } => {
                let classes: Vec<_> = terms.iter().map(|t| t.f.class()).collect();
                let strict = classes.iter().any(|c| *c != FunctionClass::NonDecreasing);
                let unbounded = terms.iter().any(|t| t.f.unbounded());
                match (strict, unbounded) {
                    (true, true) => FunctionClass::KInfinity,
                    (true, false) => FunctionClass::K,
                    (false, _) => FunctionClass::NonDecreasing,
                }
            }
            Self::Tabulated(tab) => {
                let strict = tab.knots.windows(2).all(|w| w[1][1] > w[0][1]);
                match (strict, tab.tail_exponent > 0.0) {
                    (true, true) => FunctionClass::KInfinity,
                    (true, false) => FunctionClass::K,
                    (false, _) => FunctionClass::NonDecreasing,
                }
            }
        }
    }

    fn unbounded(&self) -> bool {
        match self {
            Self::Power { .. } | Self::LogAffine { .. } => true,
            Self::Sum { terms } => terms.iter().any(|t| t.f.unbounded()),
            Self::Tabulated(tab) => tab.tail_exponent > 0.0,
        }
    }

    pub fn is_k_infinity(&self) -> bool {
        self.class() == FunctionClass::KInfinity
    }

    /// Errors unless the function is of class K∞.
    pub fn require_k_infinity(&self, what: &str) -> Result<()> {
        self.validate()?;
        if self.is_k_infinity() {
            Ok(())
        } else {
            Err(Error::NotClass(format!("{what} must be of class K-infinity")))
        }
    }

    /// Evaluation without argument checks; `s` must be finite and `>= 0`.
    pub fn value(&self, s: f64) -> f64 {
        match self {
            Self::Power { a, b } => {
                if *b == 1.0 {
                    a * s
                } else if *b == 2.0 {
                    a * s * s
                } else {
                    a * s.powf(*b)
                }
            }
            Self::LogAffine { a } => a * s * s.ln_1p(),
            Self::Sum { terms } => terms.iter().map(|t| t.scale * t.f.value(s)).sum(),
            Self::Tabulated(tab) => tab.value(s),
        }
    }

    pub fn eval(&self, s: f64) -> Result<f64> {
        if !(s >= 0.0) || !s.is_finite() {
            return Err(invalid(format!("comparison functions take finite s >= 0, got {s}")));
        }
        Ok(self.value(s))
    }

    /// Solves `f(s) = v` for K∞ functions.
    pub fn eval_inverse(&self, v: f64) -> Result<f64> {
        self.require_k_infinity("inverted function")?;
        if !(v >= 0.0) || !v.is_finite() {
            return Err(invalid(format!("inverse needs finite v >= 0, got {v}")));
        }
        if v == 0.0 {
            return Ok(0.0);
        }
        if let Self::Power { a, b } = self {
            return Ok((v / a).powf(1.0 / b));
        }
        let mut lo = 0.0;
        let mut hi = 1.0;
        while self.value(hi) < v {
            lo = hi;
            hi *= 2.0;
            if !hi.is_finite() {
                return Err(invalid("inverse bracket overflowed"));
            }
        }
        for _ in 0..2000 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.value(mid) < v {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(if (self.value(lo) - v).abs() <= (self.value(hi) - v).abs() {
            lo
        } else {
            hi
        })
    }

    /// Growth exponents used by the analytic Osgood rules: the power
    /// governing `s → 0`, and `(power, log power)` governing `s → ∞`.
    fn asymptotics(&self) -> Option<(f64, (f64, f64))> {
        match self {
            Self::Power { b, .. } => Some((*b, (*b, 0.0))),
            // s·ln(1+s) ~ s² near zero and ~ s·ln s at infinity
            Self::LogAffine { .. } => Some((2.0, (1.0, 1.0))),
            Self::Sum { terms } => {
                let mut zero = f64::INFINITY;
                let mut inf = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                for t in terms {
                    let (z, i) = t.f.asymptotics()?;
                    zero = zero.min(z);
                    if i.0 > inf.0 || (i.0 == inf.0 && i.1 > inf.1) {
                        inf = i;
                    }
                }
                Some((zero, inf))
            }
            Self::Tabulated(_) => None,
        }
    }
}

impl Tabulated {
    fn value(&self, s: f64) -> f64 {
        let k = &self.knots;
        let last = k[k.len() - 1];
        if s >= last[0] {
            return if self.tail_exponent == 0.0 {
                last[1]
            } else {
                last[1] * (s / last[0]).powf(self.tail_exponent)
            };
        }
        let i = k.partition_point(|p| p[0] <= s);
        let (p0, p1) = (k[i - 1], k[i]);
        p0[1] + (p1[1] - p0[1]) * (s - p0[0]) / (p1[0] - p0[0])
    }
}

/// How an [`OsgoodReport`] was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OsgoodMethod {
    Analytic,
    NumericHeuristic,
}

/// Outcome of checking `∫₀¹ ds/κ₁(3s) = ∞` and `∫₁^∞ ds/κ₁(3s) = ∞`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OsgoodReport {
    pub divergent_at_zero: bool,
    pub divergent_at_infinity: bool,
    pub method: OsgoodMethod,
    /// `(ε or M, partial integral)` pairs; empty for analytic results.
    pub evidence: Vec<(f64, f64)>,
}

impl OsgoodReport {
    pub fn certified(&self) -> bool {
        self.divergent_at_zero && self.divergent_at_infinity
    }
}

/// `e^r / κ₁(3e^r)`: the integrand of `G` after substituting `s = e^r`.
fn log_integrand(kappa1: &ComparisonFunction, r: f64) -> f64 {
    let s = r.exp();
    let k = kappa1.value(OSGOOD_SCALE * s);
    if k.is_infinite() {
        0.0
    } else {
        s / k
    }
}

fn integral_log(kappa1: &ComparisonFunction, r0: f64, r1: f64) -> f64 {
    quadrature::integrate(|r| log_integrand(kappa1, r), r0, r1, 1e-15, 1e-12)
}

fn positivity_grid() -> impl Iterator<Item = f64> {
    (-36..=36).map(|i| 10f64.powf(i as f64 / 4.0))
}

/// Classifies divergence from decade increments: divergent when the last
/// increment is still at least half the first one.
fn classify(partials: &[(f64, f64)]) -> bool {
    let inc: Vec<f64> = partials.windows(2).map(|w| w[1].1 - w[0].1).collect();
    match (inc.first(), inc.last()) {
        (Some(first), Some(last)) => *last > 0.0 && *last >= 0.5 * first,
        _ => false,
    }
}

/// Checks both divergence conditions on `κ₁(3s)`.
pub fn osgood_check(kappa1: &ComparisonFunction) -> Result<OsgoodReport> {
    kappa1.validate()?;
    if let Some(s) = positivity_grid().find(|s| kappa1.value(*s) <= 0.0) {
        return Err(invalid(format!("increment modulus vanishes at s = {s:e} > 0")));
    }
    if let Some((zero, (inf_pow, inf_log))) = kappa1.asymptotics() {
        return Ok(OsgoodReport {
            divergent_at_zero: zero >= 1.0,
            divergent_at_infinity: inf_pow < 1.0 || (inf_pow == 1.0 && inf_log <= 1.0),
            method: OsgoodMethod::Analytic,
            evidence: Vec::new(),
        });
    }
    let mut evidence = Vec::new();
    let mut near_zero = vec![(1.0, 0.0)];
    for j in 2..=8 {
        let eps = 10f64.powi(-j);
        let v = integral_log(kappa1, eps.ln(), 0.0);
        near_zero.push((eps, v));
    }
    let mut near_inf = vec![(1.0, 0.0)];
    for j in 2..=8 {
        let m = 10f64.powi(j);
        let v = integral_log(kappa1, 0.0, m.ln());
        near_inf.push((m, v));
    }
    let divergent_at_zero = classify(&near_zero[1..]);
    let divergent_at_infinity = classify(&near_inf[1..]);
    evidence.extend_from_slice(&near_zero[1..]);
    evidence.extend_from_slice(&near_inf[1..]);
    Ok(OsgoodReport {
        divergent_at_zero,
        divergent_at_infinity,
        method: OsgoodMethod::NumericHeuristic,
        evidence,
    })
}

const NODES_PER_DECADE: i32 = 8;
const GRID_DECADES: i32 = 9;
/// Beyond `e^R_MAX` the envelope is reported as `+∞`.
const R_MAX: f64 = 700.0;
const R_MIN: f64 = -700.0;

/// `G(s) = ∫₁ˢ dr/κ₁(3r)` for a certified increment modulus, with the
/// Bihari envelope `ρ⁻¹(ρ(c)eᵗ)`, `ρ = e^G`, evaluated in log space.
#[derive(Debug, Clone)]
pub struct OsgoodIntegral {
    kappa1: ComparisonFunction,
    report: OsgoodReport,
    step: f64,
    nodes_r: Vec<f64>,
    nodes_g: Vec<f64>,
}

impl OsgoodIntegral {
    pub fn new(kappa1: ComparisonFunction) -> Result<Self> {
        let report = osgood_check(&kappa1)?;
        if !report.certified() {
            return Err(Error::OsgoodNotCertified(format!(
                "divergent at zero: {}, divergent at infinity: {}",
                report.divergent_at_zero, report.divergent_at_infinity
            )));
        }
        let step = std::f64::consts::LN_10 / NODES_PER_DECADE as f64;
        let half = NODES_PER_DECADE * GRID_DECADES;
        let nodes_r: Vec<f64> = (-half..=half).map(|i| i as f64 * step).collect();
        let mid = half as usize;
        let mut nodes_g = vec![0.0; nodes_r.len()];
        for i in mid + 1..nodes_r.len() {
            nodes_g[i] = nodes_g[i - 1] + integral_log(&kappa1, nodes_r[i - 1], nodes_r[i]);
        }
        for i in (0..mid).rev() {
            nodes_g[i] = nodes_g[i + 1] - integral_log(&kappa1, nodes_r[i], nodes_r[i + 1]);
        }
        Ok(Self {
            kappa1,
            report,
            step,
            nodes_r,
            nodes_g,
        })
    }

    pub fn kappa1(&self) -> &ComparisonFunction {
        &self.kappa1
    }

    pub fn report(&self) -> &OsgoodReport {
        &self.report
    }

    /// `G` as a function of `r = ln s`.
    pub fn g_log(&self, r: f64) -> f64 {
        let (r_base, g_base) = self.anchor(r);
        g_base + integral_log(&self.kappa1, r_base, r)
    }

    /// Nearest cached node at or below `r` (or the grid end).
    fn anchor(&self, r: f64) -> (f64, f64) {
        let n = self.nodes_r.len();
        let pos = ((r - self.nodes_r[0]) / self.step).floor();
        let j = if pos < 0.0 {
            0
        } else {
            (pos as usize).min(n - 1)
        };
        (self.nodes_r[j], self.nodes_g[j])
    }

    /// `G(s)` for `s > 0`.
    pub fn g(&self, s: f64) -> Result<f64> {
        if !(s > 0.0) || !s.is_finite() {
            return Err(invalid(format!("G is defined for finite s > 0, got {s}")));
        }
        Ok(self.g_log(s.ln()))
    }

    /// Solves `G(e^r) = target` for `r`; `±∞` past the representable range.
    fn solve_log(&self, target: f64) -> f64 {
        let n = self.nodes_r.len();
        let (mut lo, mut g_lo, mut hi, mut g_hi);
        if target >= self.nodes_g[0] && target <= self.nodes_g[n - 1] {
            let j = self.nodes_g.partition_point(|g| *g <= target).clamp(1, n - 1);
            lo = self.nodes_r[j - 1];
            g_lo = self.nodes_g[j - 1];
            hi = self.nodes_r[j];
            g_hi = self.nodes_g[j];
        } else if target > self.nodes_g[n - 1] {
            lo = self.nodes_r[n - 1];
            g_lo = self.nodes_g[n - 1];
            let mut width = std::f64::consts::LN_10;
            loop {
                hi = (lo + width).min(R_MAX);
                g_hi = g_lo + integral_log(&self.kappa1, lo, hi);
                if g_hi >= target {
                    break;
                }
                if hi >= R_MAX {
                    return f64::INFINITY;
                }
                lo = hi;
                g_lo = g_hi;
                width *= 2.0;
            }
        } else {
            hi = self.nodes_r[0];
            g_hi = self.nodes_g[0];
            let mut width = std::f64::consts::LN_10;
            loop {
                lo = (hi - width).max(R_MIN);
                g_lo = g_hi - integral_log(&self.kappa1, lo, hi);
                if g_lo <= target {
                    break;
                }
                if lo <= R_MIN {
                    return f64::NEG_INFINITY;
                }
                hi = lo;
                g_hi = g_lo;
                width *= 2.0;
            }
        }
        // safeguarded Newton on F(r) = G(r) - target, anchored at the lower end
        let (r0, g0) = (lo, g_lo);
        let mut r = if g_hi > g_lo {
            lo + (hi - lo) * (target - g_lo) / (g_hi - g_lo)
        } else {
            0.5 * (lo + hi)
        };
        for _ in 0..100 {
            let f = g0 + integral_log(&self.kappa1, r0, r) - target;
            if f == 0.0 {
                return r;
            }
            if f < 0.0 {
                lo = r;
            } else {
                hi = r;
            }
            let d = log_integrand(&self.kappa1, r);
            let mut next = r - f / d;
            if !(next > lo && next < hi) || !next.is_finite() {
                next = 0.5 * (lo + hi);
            }
            if (next - r).abs() <= 2.0 * f64::EPSILON * r.abs().max(1.0) {
                return next;
            }
            r = next;
        }
        r
    }

    /// Natural log of the envelope `ρ⁻¹(ρ(c)eᵗ)`; `-∞` for `c = 0`.
    pub fn bihari_bound_ln(&self, c: f64, t: f64) -> Result<f64> {
        check_envelope_args(c, t)?;
        if c == 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        if t == 0.0 {
            return Ok(c.ln());
        }
        Ok(self.solve_log(self.g_log(c.ln()) + t))
    }

    /// `ρ⁻¹(ρ(c)eᵗ)`, the solution `v` of `G(v) = G(c) + t`; `+∞` when it
    /// exceeds the floating-point range.
    pub fn bihari_bound(&self, c: f64, t: f64) -> Result<f64> {
        check_envelope_args(c, t)?;
        if t == 0.0 || c == 0.0 {
            return Ok(c);
        }
        Ok(self.bihari_bound_ln(c, t)?.exp())
    }

    /// Uniform bounds `(R_x, R_y)` on state and output differences over
    /// `[0, T]` for initial differences up to `r_chi` and input budget `r_u`.
    pub fn reachable_diff_bounds(
        &self,
        kappa2: &ComparisonFunction,
        horizon: f64,
        r_chi: f64,
        r_u: f64,
    ) -> Result<ReachableBounds> {
        kappa2.require_k_infinity("output modulus")?;
        for (name, v) in [("T", horizon), ("r_chi", r_chi), ("r_u", r_u)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        let r_x = self.bihari_bound(r_chi + r_u, horizon)?;
        let r_y = kappa2.value(2.0 * r_x) + kappa2.value(2.0 * r_u);
        Ok(ReachableBounds { r_x, r_y })
    }

    /// `|χ_Δ| + T·κ₁(3‖u_Δ‖_{0:T}) + T·κ₁(3‖d_Δ‖_{0:T})`, the envelope's
    /// starting value for a pair of trajectories.
    pub fn envelope_constant(&self, chi_delta: f64, u_delta_sup: f64, d_delta_sup: f64, horizon: f64) -> f64 {
        chi_delta
            + horizon * self.kappa1.value(OSGOOD_SCALE * u_delta_sup)
            + horizon * self.kappa1.value(OSGOOD_SCALE * d_delta_sup)
    }
}

fn check_envelope_args(c: f64, t: f64) -> Result<()> {
    if !(c >= 0.0) || !c.is_finite() {
        return Err(invalid(format!("envelope start c must be finite and >= 0, got {c}")));
    }
    if !(t >= 0.0) || !t.is_finite() {
        return Err(invalid(format!("envelope time must be finite and >= 0, got {t}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReachableBounds {
    pub r_x: f64,
    pub r_y: f64,
}

/// `G(s)` for a one-off query.
pub fn osgood_g(kappa1: &ComparisonFunction, s: f64) -> Result<f64> {
    OsgoodIntegral::new(kappa1.clone())?.g(s)
}

/// Bihari envelope for a one-off query.
pub fn bihari_bound(kappa1: &ComparisonFunction, c: f64, t: f64) -> Result<f64> {
    OsgoodIntegral::new(kappa1.clone())?.bihari_bound(c, t)
}
