//! CSV and JSON exchange formats. Numbers are written with 12 significant
//! digits.
//!
//! | file        | columns                 |
//! |-------------|-------------------------|
//! | signal      | `t,v0,v1,..`            |
//! | trajectory  | `t,x0,..,y0,..`         |
//! | residual    | `t,lhs,rhs,residual`    |
//! | estimate    | `t,xhat0,..,err_norm`   |

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detectability::{ResidualSeries, TrajectoryPairScenario};
use crate::error::{Error, Result};
use crate::observer::EstimateRun;
use crate::signals::VectorSignal;
use crate::system::Trajectory;

/// `v` with 12 significant digits, `%g` style: fixed notation for decimal
/// exponents in `[-5, 12)`, scientific otherwise, trailing zeros trimmed.
pub fn fmt12(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return if v.is_nan() {
            "nan".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{v:.11e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa.to_string()), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// `v` rounded to 12 significant digits (non-finite values pass through).
pub fn round12(v: f64) -> f64 {
    if v.is_finite() {
        fmt12(v).parse().unwrap_or(v)
    } else {
        v
    }
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(csv::Writer::from_path(path)?)
}

fn header(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}{i}"))
}

fn row(values: impl IntoIterator<Item = f64>) -> Vec<String> {
    values.into_iter().map(fmt12).collect()
}

pub fn write_signal_csv(path: &Path, sig: &VectorSignal) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(std::iter::once("t".to_string()).chain(header("v", sig.dim())))?;
    for (k, v) in sig.iter_knots().enumerate() {
        w.write_record(row(std::iter::once(k as f64 * sig.dt()).chain(v.iter().copied())))?;
    }
    w.flush()?;
    Ok(())
}

fn parse_field(s: &str, line: usize) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: '{s}' is not a number")))
}

/// Reads a `t,v0,..` signal. The step is inferred from the time column
/// (uniform to 1e-9 relative, starting at 0); single-row files need `dt`.
pub fn read_signal_csv(path: &Path, dt: Option<f64>) -> Result<VectorSignal> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let cols = r.headers()?.len();
    if cols < 2 {
        return Err(Error::Parse(format!("{}: expected columns t,v0,..", path.display())));
    }
    let mut times = Vec::new();
    let mut data = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != cols {
            return Err(Error::Parse(format!("{}: line {line} has {} fields, expected {cols}", path.display(), rec.len())));
        }
        times.push(parse_field(&rec[0], line)?);
        for f in rec.iter().skip(1) {
            data.push(parse_field(f, line)?);
        }
    }
    if times.is_empty() {
        return Err(Error::Parse(format!("{}: no rows", path.display())));
    }
    let step = match (times.len(), dt) {
        (1, Some(dt)) => dt,
        (1, None) => return Err(Error::Parse(format!("{}: a single row needs an explicit dt", path.display()))),
        _ => times[1] - times[0],
    };
    for (k, t) in times.iter().enumerate() {
        if (t - k as f64 * step).abs() > 1e-9 * step.max(1.0) * (k as f64 + 1.0) {
            return Err(Error::Parse(format!(
                "{}: line {} time {t} breaks the uniform grid of step {step}",
                path.display(),
                k + 2
            )));
        }
    }
    if let Some(dt) = dt {
        if (dt - step).abs() > 1e-9 * dt {
            return Err(Error::Parse(format!("{}: file step {step} differs from dt {dt}", path.display())));
        }
    }
    VectorSignal::from_flat(cols - 1, step, data)
}

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut w = writer(path)?;
    let n = traj.states[0].len();
    let p = traj.outputs[0].len();
    w.write_record(std::iter::once("t".to_string()).chain(header("x", n)).chain(header("y", p)))?;
    for k in 0..traj.times.len() {
        w.write_record(row(std::iter::once(traj.times[k])
            .chain(traj.states[k].iter().copied())
            .chain(traj.outputs[k].iter().copied())))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_residual_csv(path: &Path, series: &ResidualSeries) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["t", "lhs", "rhs", "residual"])?;
    for k in 0..series.times.len() {
        w.write_record(row([series.times[k], series.lhs[k], series.rhs[k], series.residual[k]]))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_estimate_csv(path: &Path, run: &EstimateRun) -> Result<()> {
    let mut w = writer(path)?;
    let n = run.truth.states[0].len();
    w.write_record(std::iter::once("t".to_string()).chain(header("xhat", n)).chain(["err_norm".to_string()]))?;
    for ((t, x), e) in run.times.iter().zip(&run.xhat).zip(run.errors()) {
        w.write_record(row(std::iter::once(*t).chain(x.iter().copied()).chain([e])))?;
    }
    w.flush()?;
    Ok(())
}

/// Generic table with a header row.
pub fn write_table_csv(path: &Path, columns: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(columns)?;
    for r in rows {
        w.write_record(row(r.iter().copied()))?;
    }
    w.flush()?;
    Ok(())
}

/// Scenario file: states inline, signals as CSV paths relative to the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub chi1: Vec<f64>,
    pub chi2: Vec<f64>,
    pub u1: String,
    pub u2: String,
    pub d: String,
    pub horizon: f64,
    pub dt: Option<f64>,
}

/// Writes `<stem>.json` plus `<stem>_u1.csv`, `<stem>_u2.csv`, `<stem>_d.csv`
/// into `dir`; returns every path written.
pub fn write_scenario(dir: &Path, stem: &str, sc: &TrajectoryPairScenario) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut name = |suffix: &str, sig: &VectorSignal| -> Result<String> {
        let file = format!("{stem}_{suffix}.csv");
        let path = dir.join(&file);
        write_signal_csv(&path, sig)?;
        written.push(path);
        Ok(file)
    };
    let file = ScenarioFile {
        chi1: sc.chi1.iter().copied().map(round12).collect(),
        chi2: sc.chi2.iter().copied().map(round12).collect(),
        u1: name("u1", &sc.u1)?,
        u2: name("u2", &sc.u2)?,
        d: name("d", &sc.d)?,
        horizon: sc.horizon,
        dt: sc.dt,
    };
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, serde_json::to_string_pretty(&file)? + "\n")?;
    written.push(path);
    Ok(written)
}

pub fn read_scenario(path: &Path) -> Result<TrajectoryPairScenario> {
    let file: ScenarioFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let load = |sig: &str| -> Result<VectorSignal> { read_signal_csv(&base.join(sig), None) };
    Ok(TrajectoryPairScenario {
        chi1: file.chi1,
        chi2: file.chi2,
        u1: load(&file.u1)?,
        u2: load(&file.u2)?,
        d: load(&file.d)?,
        horizon: file.horizon,
        dt: file.dt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_digit_format() {
        assert_eq!(fmt12(0.5 * 3f64.exp()), "10.0427684616");
        assert_eq!(fmt12(1.0), "1");
        assert_eq!(fmt12(-0.25), "-0.25");
        assert_eq!(fmt12(1e-7), "1e-07");
        assert_eq!(fmt12(123456789012345.0), "1.23456789012e+14");
        assert_eq!(fmt12(f64::INFINITY), "inf");
        assert_eq!(fmt12(2.0f64.sqrt()), "1.41421356237");
        assert_eq!(round12(1.0 / 3.0), 0.333333333333);
    }

    #[test]
    fn signal_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let sig = VectorSignal::new(2, 0.1, vec![vec![1.0, -2.0], vec![0.5, 3.25], vec![0.0, 1e-3]]).unwrap();
        write_signal_csv(&p, &sig).unwrap();
        let back = read_signal_csv(&p, None).unwrap();
        assert_eq!(back.as_flat(), sig.as_flat());
        assert!((back.dt() - 0.1).abs() < 1e-15);
        let one = VectorSignal::new(1, 0.5, vec![vec![2.0]]).unwrap();
        write_signal_csv(&p, &one).unwrap();
        assert!(read_signal_csv(&p, None).is_err());
        assert_eq!(read_signal_csv(&p, Some(0.5)).unwrap().knots(), 1);
        fs::write(&p, "t,v0\n0,1\n0.5,2\n1.2,3\n").unwrap();
        assert!(matches!(read_signal_csv(&p, None), Err(Error::Parse(_))));
    }

    #[test]
    fn scenario_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sig = |v: f64| VectorSignal::new(1, 0.5, vec![vec![v], vec![-v]]).unwrap();
        let sc = TrajectoryPairScenario {
            chi1: vec![1.0],
            chi2: vec![-0.5],
            u1: sig(0.25),
            u2: sig(0.75),
            d: sig(0.0),
            horizon: 1.0,
            dt: Some(0.01),
        };
        let files = write_scenario(dir.path(), "w", &sc).unwrap();
        assert_eq!(files.len(), 4);
        assert_eq!(read_scenario(&dir.path().join("w.json")).unwrap(), sc);
    }
}
