//! Piecewise-constant vector signals and the discounted-integral functional.
//!
//! A [`VectorSignal`] holds one value per knot; knot `k` is active on
//! `[k·dt, (k+1)·dt)`. Past its support the signal is zero, which is the
//! truncation convention used by observer mappings.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Relative tolerance used to decide whether a time lies on a grid.
pub const GRID_TOL: f64 = 1e-9;

/// Returns `k` with `k·dt == t` (to [`GRID_TOL`] relative), or an error.
pub fn grid_index(t: f64, dt: f64) -> Result<usize> {
    if !t.is_finite() || t < 0.0 {
        return Err(invalid(format!("time must be finite and nonnegative, got {t}")));
    }
    let k = (t / dt).round();
    if (k * dt - t).abs() > GRID_TOL * dt.max(t) {
        return Err(Error::GridMisaligned { t, dt });
    }
    Ok(k as usize)
}

/// Whether `coarse` is an integer multiple of `fine`.
pub fn divides(fine: f64, coarse: f64) -> bool {
    let r = (coarse / fine).round();
    r >= 1.0 && (r * fine - coarse).abs() <= GRID_TOL * coarse
}

/// Euclidean norm.
pub fn norm(v: &[f64]) -> f64 {
    match v {
        [] => 0.0,
        [x] => x.abs(),
        _ => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
    }
}

/// Euclidean norm of `a - b`.
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    match (a, b) {
        ([x], [y]) => (x - y).abs(),
        _ => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
    }
}

/// Piecewise-constant, finitely supported vector signal on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorSignal {
    dim: usize,
    dt: f64,
    data: Vec<f64>,
}

impl VectorSignal {
    pub fn new(dim: usize, dt: f64, values: Vec<Vec<f64>>) -> Result<Self> {
        let mut data = Vec::with_capacity(values.len() * dim);
        for v in &values {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                    context: "signal knot",
                });
            }
            data.extend_from_slice(v);
        }
        Self::from_flat(dim, dt, data)
    }

    /// Builds a signal from row-major knot data (`knots × dim`).
    pub fn from_flat(dim: usize, dt: f64, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("signal dimension must be positive"));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid(format!("signal dt must be positive and finite, got {dt}")));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(invalid("signal data length is not a multiple of dim"));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(invalid("signal values must be finite"));
        }
        Ok(Self { dim, dt, data })
    }

    pub fn zeros(dim: usize, dt: f64, knots: usize) -> Result<Self> {
        Self::from_flat(dim, dt, vec![0.0; dim * knots])
    }

    pub fn constant(dt: f64, knots: usize, value: &[f64]) -> Result<Self> {
        let data = value
            .iter()
            .copied()
            .cycle()
            .take(value.len() * knots)
            .collect();
        Self::from_flat(value.len(), dt, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn knots(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn support_end(&self) -> f64 {
        self.knots() as f64 * self.dt
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Value of knot `k`, or `None` past the support.
    pub fn knot(&self, k: usize) -> Option<&[f64]> {
        let start = k.checked_mul(self.dim)?;
        self.data.get(start..start + self.dim)
    }

    pub fn iter_knots(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Knot active at time `t` (no validation). `None` means zero.
    pub(crate) fn at(&self, t: f64) -> Option<&[f64]> {
        let k = (t / self.dt).floor();
        if k < 0.0 {
            return None;
        }
        self.knot(k as usize)
    }

    /// Writes the value held at `t` into `out` (zeros past the support).
    pub(crate) fn sample_into(&self, t: f64, out: &mut [f64]) {
        match self.at(t) {
            Some(v) => out.copy_from_slice(v),
            None => out.iter_mut().for_each(|x| *x = 0.0),
        }
    }

    pub fn sample(&self, t: f64) -> Result<Vec<f64>> {
        if !t.is_finite() || t < 0.0 {
            return Err(invalid(format!("sample time must be finite and nonnegative, got {t}")));
        }
        let mut out = vec![0.0; self.dim];
        self.sample_into(t, &mut out);
        Ok(out)
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
                context: "signal dim",
            });
        }
        if (self.dt - other.dt).abs() > GRID_TOL * self.dt {
            return Err(invalid(format!(
                "signal grids differ: dt {} vs {}",
                self.dt, other.dt
            )));
        }
        Ok(())
    }

    /// The signal equal to `self` on `[0, t)` and zero afterwards.
    pub fn truncate(&self, t: f64) -> Result<Self> {
        let k = grid_index(t, self.dt)?.min(self.knots());
        Ok(Self {
            dim: self.dim,
            dt: self.dt,
            data: self.data[..k * self.dim].to_vec(),
        })
    }

    /// Equality under zero extension: trailing zero knots are ignored.
    pub fn same_signal(&self, other: &Self) -> bool {
        if self.check_compatible(other).is_err() {
            return false;
        }
        let n = self.knots().max(other.knots());
        (0..n).all(|k| match (self.knot(k), other.knot(k)) {
            (Some(a), Some(b)) => a == b,
            (Some(a), None) | (None, Some(a)) => a.iter().all(|x| *x == 0.0),
            (None, None) => true,
        })
    }

    /// Essential sup of `|z(τ)|` over `[a, b]`.
    ///
    /// A knot contributes when its interval meets `[a, b]` in a set of
    /// positive measure; for `a == b` the knot holding `a` is used.
    pub fn sup_norm(&self, a: f64, b: f64) -> Result<f64> {
        if !a.is_finite() || !b.is_finite() || a < 0.0 {
            return Err(invalid("sup_norm endpoints must be finite and nonnegative"));
        }
        if a > b {
            return Err(invalid(format!("sup_norm requires a <= b, got [{a}, {b}]")));
        }
        let (first, last) = if a == b {
            let k = (a / self.dt).floor() as usize;
            (k, k)
        } else {
            let first = (a / self.dt).floor() as usize;
            // knots starting at or after b only touch [a, b] in a point
            let last = ((b / self.dt).ceil() as usize).saturating_sub(1).max(first);
            (first, last)
        };
        let last = last.min(self.knots().saturating_sub(1));
        if first >= self.knots() {
            return Ok(0.0);
        }
        Ok((first..=last)
            .filter_map(|k| self.knot(k))
            .map(norm)
            .fold(0.0, f64::max))
    }

    fn zip_with(&self, other: &Self, op: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_compatible(other)?;
        let n = self.knots().max(other.knots()) * self.dim;
        let get = |s: &Self, i: usize| s.data.get(i).copied().unwrap_or(0.0);
        let data = (0..n).map(|i| op(get(self, i), get(other, i))).collect();
        Ok(Self {
            dim: self.dim,
            dt: self.dt,
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            dim: self.dim,
            dt: self.dt,
            data: self.data.iter().map(|x| c * x).collect(),
        }
    }

    /// Resamples onto a finer grid whose step divides `self.dt`.
    pub fn refine(&self, dt: f64) -> Result<Self> {
        if !divides(dt, self.dt) {
            return Err(invalid(format!("{dt} does not divide signal step {}", self.dt)));
        }
        let r = (self.dt / dt).round() as usize;
        let mut data = Vec::with_capacity(self.data.len() * r);
        for v in self.iter_knots() {
            for _ in 0..r {
                data.extend_from_slice(v);
            }
        }
        Self::from_flat(self.dim, dt, data)
    }
}

/// Splice `head` on `[0, t]` with `tail` shifted to start at `t`.
///
/// At `t = 0` the result is `tail` itself. `head` is zero-extended when its
/// support ends before `t`.
pub fn concat(tail: &VectorSignal, head: &VectorSignal, t: f64) -> Result<VectorSignal> {
    tail.check_compatible(head)?;
    let k = grid_index(t, head.dt)?;
    let dim = head.dim;
    let mut data = Vec::with_capacity((k + tail.knots()) * dim);
    for i in 0..k {
        match head.knot(i) {
            Some(v) => data.extend_from_slice(v),
            None => data.extend(std::iter::repeat_n(0.0, dim)),
        }
    }
    data.extend_from_slice(&tail.data);
    VectorSignal::from_flat(dim, head.dt, data)
}

fn check_lambda(lambda: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(invalid(format!("discount factor must lie in (0, 1), got {lambda}")));
    }
    Ok(lambda.ln())
}

/// `λ^t`, computed as `exp(t·ln λ)`.
pub fn discount(lambda: f64, t: f64) -> f64 {
    (t * lambda.ln()).exp()
}

/// Composite-trapezoid approximation of `∫₀ᵗ λ^{t−τ} g(τ) dτ` from node
/// samples `g(k·dt)`, `k = 0..=t/dt`.
pub fn discounted_integral(samples: &[f64], dt: f64, lambda: f64, t: f64) -> Result<f64> {
    let ln_lambda = check_lambda(lambda)?;
    let k = grid_index(t, dt)?;
    if samples.len() < k + 1 {
        return Err(invalid(format!(
            "{} samples do not cover [0, {t}] at step {dt}",
            samples.len()
        )));
    }
    if samples.iter().any(|g| !(*g >= 0.0)) {
        return Err(invalid("integrand samples must be nonnegative"));
    }
    let weight = |i: usize| (((k - i) as f64) * dt * ln_lambda).exp();
    Ok((0..k)
        .map(|i| 0.5 * dt * (weight(i) * samples[i] + weight(i + 1) * samples[i + 1]))
        .sum())
}

/// Running value of `∫₀ᵗ λ^{t−τ} g(τ) dτ`, advanced step by step.
#[derive(Debug, Clone)]
pub struct DiscountedAccumulator {
    lambda: f64,
    ln_lambda: f64,
    value: f64,
    time: f64,
    last: Option<f64>,
}

impl DiscountedAccumulator {
    pub fn new(lambda: f64) -> Result<Self> {
        Ok(Self {
            lambda,
            ln_lambda: check_lambda(lambda)?,
            value: 0.0,
            time: 0.0,
            last: None,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    /// Advances by `h` using one-sided integrand limits at the step ends;
    /// exact handling of jumps located on step boundaries.
    pub fn push_step(&mut self, h: f64, g_left: f64, g_right: f64) {
        let decay = (h * self.ln_lambda).exp();
        self.value = decay * self.value + 0.5 * h * (decay * g_left + g_right);
        self.time += h;
        self.last = Some(g_right);
    }

    /// Appends a node sample. The first call sets `g(0)`; later calls
    /// advance by `h` with the trapezoid rule.
    pub fn push(&mut self, h: f64, g: f64) {
        match self.last {
            None => self.last = Some(g),
            Some(prev) => self.push_step(h, prev, g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sig(values: &[f64]) -> VectorSignal {
        VectorSignal::new(1, 1.0, values.iter().map(|v| vec![*v]).collect()).unwrap()
    }

    #[test]
    fn sample_knot_lookup() {
        let s = sig(&[2.0, 5.0]);
        assert_eq!(s.sample(1.5).unwrap(), vec![5.0]);
        assert_eq!(s.sample(7.0).unwrap(), vec![0.0]);
        let s2 = VectorSignal::new(2, 1.0, vec![vec![1.0, -1.0]]).unwrap();
        assert_eq!(s2.sample(0.0).unwrap(), vec![1.0, -1.0]);
        assert!(s.sample(-1.0).is_err());
        assert!(s.sample(f64::NAN).is_err());
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(VectorSignal::from_flat(1, 0.0, vec![1.0]).is_err());
        assert!(VectorSignal::from_flat(1, 1.0, vec![f64::INFINITY]).is_err());
        assert!(VectorSignal::new(2, 1.0, vec![vec![1.0]]).is_err());
    }

    #[test]
    fn concat_definition() {
        let tail = sig(&[9.0]);
        let head = sig(&[1.0, 2.0]);
        let c = concat(&tail, &head, 2.0).unwrap();
        assert_eq!(c.as_flat(), &[1.0, 2.0, 9.0]);
        assert_eq!(concat(&tail, &head, 0.0).unwrap(), tail);
        let zero = sig(&[0.0, 0.0, 0.0]);
        let c = concat(&zero, &head, 1.0).unwrap();
        assert!(c.truncate(1.0).unwrap().same_signal(&head.truncate(1.0).unwrap()));
    }

    #[test]
    fn concat_errors() {
        let a = sig(&[1.0]);
        let b = VectorSignal::new(1, 0.5, vec![vec![1.0]]).unwrap();
        assert!(concat(&a, &b, 1.0).is_err());
        let c = VectorSignal::new(2, 1.0, vec![vec![1.0, 2.0]]).unwrap();
        assert!(concat(&a, &c, 1.0).is_err());
        assert!(matches!(
            concat(&a, &a, 0.5),
            Err(Error::GridMisaligned { .. })
        ));
    }

    #[test]
    fn truncate_definition() {
        let s = sig(&[3.0, 4.0]);
        assert_eq!(s.truncate(1.0).unwrap().as_flat(), &[3.0]);
        assert_eq!(s.truncate(0.0).unwrap().knots(), 0);
        assert_eq!(s.truncate(0.0).unwrap().sample(0.5).unwrap(), vec![0.0]);
        assert!(s.truncate(0.3).is_err());
    }

    #[test]
    fn sup_norm_examples() {
        let s = sig(&[1.0, -3.0]);
        assert_eq!(s.sup_norm(0.0, 2.0).unwrap(), 3.0);
        assert_eq!(s.sup_norm(0.0, 0.5).unwrap(), 1.0);
        assert_eq!(s.sup_norm(5.0, 6.0).unwrap(), 0.0);
        // the knot starting at b = 1 meets [0, 1] in a single point
        assert_eq!(s.sup_norm(0.0, 1.0).unwrap(), 1.0);
        assert_eq!(s.sup_norm(1.0, 1.0).unwrap(), 3.0);
        assert!(s.sup_norm(2.0, 1.0).is_err());
        assert!(s.sup_norm(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn discounted_integral_constant_one() {
        let lambda = (-1.0f64).exp();
        let exact = 1.0 - lambda;
        let mut prev_err = f64::INFINITY;
        for &n in &[10usize, 100, 1000] {
            let dt = 1.0 / n as f64;
            let g = vec![1.0; n + 1];
            let v = discounted_integral(&g, dt, lambda, 1.0).unwrap();
            let err = (v - exact).abs();
            assert!(err < prev_err / 50.0 || err < 1e-12, "n={n} err={err}");
            prev_err = err;
        }
        assert!(prev_err < 1e-7);
        assert_eq!(discounted_integral(&[0.0; 11], 0.1, 0.5, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn discounted_integral_errors() {
        let g = vec![1.0; 11];
        assert!(discounted_integral(&g, 0.1, 0.0, 1.0).is_err());
        assert!(discounted_integral(&g, 0.1, 1.0, 1.0).is_err());
        assert!(discounted_integral(&g, 0.1, 0.5, 2.0).is_err());
        assert!(discounted_integral(&[1.0, -1.0], 0.1, 0.5, 0.1).is_err());
        assert!(DiscountedAccumulator::new(0.0).is_err());
    }

    #[test]
    fn incremental_matches_one_shot() {
        let lambda = 0.3;
        let dt = 0.01;
        let g: Vec<f64> = (0..=200).map(|k| 1.0 + (k as f64 * 0.07).sin().powi(2)).collect();
        let mut acc = DiscountedAccumulator::new(lambda).unwrap();
        for &gk in &g[..=100] {
            acc.push(dt, gk);
        }
        let first = acc.value();
        let direct1 = discounted_integral(&g, dt, lambda, 1.0).unwrap();
        assert!((first - direct1).abs() <= 1e-12 * direct1);
        for &gk in &g[101..] {
            acc.push(dt, gk);
        }
        let direct2 = discounted_integral(&g, dt, lambda, 2.0).unwrap();
        assert!((acc.value() - direct2).abs() <= 1e-12 * direct2);
        assert!((acc.time() - 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn semigroup_identity(
            g in proptest::collection::vec(0.0f64..10.0, 3..120),
            split_frac in 0.0f64..1.0,
            lambda in 0.01f64..0.99,
            dt in 0.001f64..0.5,
        ) {
            let k = g.len() - 1;
            let k1 = ((k as f64) * split_frac).floor() as usize;
            let t1 = k1 as f64 * dt;
            let t2 = k as f64 * dt;
            let whole = discounted_integral(&g, dt, lambda, t2).unwrap();
            let first = discounted_integral(&g[..=k1], dt, lambda, t1).unwrap();
            let second = discounted_integral(&g[k1..], dt, lambda, t2 - t1).unwrap();
            let recomposed = (((k - k1) as f64) * dt * lambda.ln()).exp() * first + second;
            prop_assert!((whole - recomposed).abs() <= 1e-12 * whole.max(1e-300));
        }

        #[test]
        fn monotone_in_integrand(
            g in proptest::collection::vec(0.0f64..10.0, 2..60),
            bumps in proptest::collection::vec(0.0f64..3.0, 60),
            lambda in 0.01f64..0.99,
        ) {
            let dt = 0.05;
            let t = (g.len() - 1) as f64 * dt;
            let g2: Vec<f64> = g.iter().zip(&bumps).map(|(a, b)| a + b).collect();
            let lo = discounted_integral(&g, dt, lambda, t).unwrap();
            let hi = discounted_integral(&g2, dt, lambda, t).unwrap();
            prop_assert!(lo <= hi);
            prop_assert!(lo >= 0.0);
        }

        #[test]
        fn concat_truncate_prefix_law(
            tail in proptest::collection::vec(-5.0f64..5.0, 0..10),
            head in proptest::collection::vec(-5.0f64..5.0, 0..10),
            k in 0usize..12,
            j in 0usize..12,
        ) {
            let dt = 0.25;
            let tail = VectorSignal::from_flat(1, dt, tail).unwrap();
            let head = VectorSignal::from_flat(1, dt, head).unwrap();
            let t = k as f64 * dt;
            let c = concat(&tail, &head, t).unwrap();
            prop_assert!(c.truncate(t).unwrap().same_signal(&head.truncate(t).unwrap()));
            // beyond t the concatenation is the shifted tail
            for i in 0..tail.knots() {
                prop_assert_eq!(c.knot(k + i).unwrap(), tail.knot(i).unwrap());
            }
            let s = j as f64 * dt;
            let tt = head.truncate(t).unwrap().truncate(s).unwrap();
            prop_assert!(tt.same_signal(&head.truncate(t.min(s)).unwrap()));
        }

        #[test]
        fn sup_norm_subadditive_and_homogeneous(
            a in proptest::collection::vec(-5.0f64..5.0, 2..20),
            b in proptest::collection::vec(-5.0f64..5.0, 2..20),
            c in -4.0f64..4.0,
            lo in 0.0f64..3.0,
            len in 0.0f64..3.0,
        ) {
            let a = VectorSignal::from_flat(2, 0.2, a[..a.len() / 2 * 2].to_vec()).unwrap();
            let b = VectorSignal::from_flat(2, 0.2, b[..b.len() / 2 * 2].to_vec()).unwrap();
            let hi = lo + len;
            let na = a.sup_norm(lo, hi).unwrap();
            let nb = b.sup_norm(lo, hi).unwrap();
            let nsum = a.add(&b).unwrap().sup_norm(lo, hi).unwrap();
            prop_assert!(nsum <= na + nb + 1e-12);
            let nscaled = a.scale(c).sup_norm(lo, hi).unwrap();
            prop_assert!((nscaled - c.abs() * na).abs() <= 1e-12 * (1.0 + na));
        }
    }
}
