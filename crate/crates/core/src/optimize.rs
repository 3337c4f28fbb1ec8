//! Derivative-free minimization: Nelder–Mead with box projection, and a
//! seeded multistart driver whose result does not depend on scheduling.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    /// Objective evaluations allowed, including the initial simplex.
    pub max_evals: usize,
    /// Initial edge length as a fraction of each coordinate's box width.
    pub simplex_scale: f64,
    /// Stop once the spread of simplex values falls below this.
    pub f_tol: f64,
    /// Stop once the simplex diameter falls below this.
    pub x_tol: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_evals: 400,
            simplex_scale: 0.25,
            f_tol: 1e-12,
            x_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    /// Stopped by tolerance rather than by the evaluation budget or deadline.
    pub converged: bool,
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

/// Minimizes `f` over the box `[lo, hi]` starting from `x0`.
///
/// NaN values rank as `+∞`; a value of `−∞` ends the search. Returns
/// `None` only when `f` refuses the very first evaluation (deadline).
pub fn nelder_mead(
    mut f: impl FnMut(&[f64]) -> Option<f64>,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    opts: &NelderMeadOptions,
) -> Option<Minimum> {
    let dim = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| -> Option<f64> {
        if *evals >= opts.max_evals.max(1) {
            return None;
        }
        *evals += 1;
        f(x).map(|v| if v.is_nan() { f64::INFINITY } else { v })
    };
    let mut start = x0.to_vec();
    project(&mut start, lo, hi);
    let v0 = eval(&start, &mut evals)?;
    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(start.clone(), v0)];
    let finish = |simplex: &mut Vec<(Vec<f64>, f64)>, evals: usize, converged: bool| {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (x, value) = simplex[0].clone();
        Some(Minimum { x, value, evals, converged })
    };
    if v0 == f64::NEG_INFINITY || dim == 0 {
        return finish(&mut simplex, evals, true);
    }
    for i in 0..dim {
        let width = hi[i] - lo[i];
        let step = if width.is_finite() {
            opts.simplex_scale * width
        } else {
            opts.simplex_scale * start[i].abs().max(1.0)
        };
        let mut x = start.clone();
        x[i] = if x[i] + step <= hi[i] { x[i] + step } else { x[i] - step };
        project(&mut x, lo, hi);
        match eval(&x, &mut evals) {
            Some(v) => simplex.push((x, v)),
            None => return finish(&mut simplex, evals, false),
        }
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[dim].1;
        if best == f64::NEG_INFINITY {
            return finish(&mut simplex, evals, true);
        }
        let spread = (worst - best).abs();
        let diameter = simplex[1..]
            .iter()
            .map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if (spread.is_finite() && spread <= opts.f_tol) || diameter <= opts.x_tol {
            return finish(&mut simplex, evals, true);
        }

        let mut centroid = vec![0.0; dim];
        for (x, _) in &simplex[..dim] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / dim as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            let mut x: Vec<f64> = centroid
                .iter()
                .zip(&simplex[dim].0)
                .map(|(c, w)| c + t * (c - w))
                .collect();
            project(&mut x, lo, hi);
            x
        };

        let xr = along(alpha);
        let Some(fr) = eval(&xr, &mut evals) else {
            return finish(&mut simplex, evals, false);
        };
        if fr < best {
            let xe = along(gamma);
            let Some(fe) = eval(&xe, &mut evals) else {
                simplex[dim] = (xr, fr);
                return finish(&mut simplex, evals, false);
            };
            simplex[dim] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[dim - 1].1 {
            simplex[dim] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < worst {
            let xc = along(rho);
            let Some(fc) = eval(&xc, &mut evals) else {
                return finish(&mut simplex, evals, false);
            };
            (xc, fc)
        } else {
            let xc = along(-rho);
            let Some(fc) = eval(&xc, &mut evals) else {
                return finish(&mut simplex, evals, false);
            };
            (xc, fc)
        };
        if fc < fr.min(worst) {
            simplex[dim] = (xc, fc);
            continue;
        }
        let anchor = simplex[0].0.clone();
        for j in 1..=dim {
            let mut x: Vec<f64> = anchor
                .iter()
                .zip(&simplex[j].0)
                .map(|(a, v)| a + sigma * (v - a))
                .collect();
            project(&mut x, lo, hi);
            let Some(v) = eval(&x, &mut evals) else {
                return finish(&mut simplex, evals, false);
            };
            simplex[j] = (x, v);
        }
    }
}

/// RNG for restart `index`: seeded with `seed ^ index`.
pub fn restart_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ index as u64)
}

/// Runs `restarts` independent jobs in parallel, each with its own RNG
/// stream, and returns their results in restart order.
pub fn multistart<T: Send>(restarts: usize, seed: u64, job: impl Fn(usize, &mut ChaCha8Rng) -> T + Sync) -> Vec<T> {
    (0..restarts)
        .into_par_iter()
        .map(|i| job(i, &mut restart_rng(seed, i)))
        .collect()
}

/// Index of the largest score; ties go to the lowest index. NaN never wins.
pub fn argmax_lowest(scores: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.into_iter().enumerate() {
        if s.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Optional wall-clock cap shared by all restarts.
#[derive(Debug, Clone, Copy)]
pub struct Deadline(Option<Instant>);

impl Deadline {
    pub fn after(limit: Option<std::time::Duration>) -> Self {
        Self(limit.map(|d| Instant::now() + d))
    }

    pub fn expired(&self) -> bool {
        self.0.is_some_and(|t| Instant::now() >= t)
    }
}
