//! Experiment configuration: one TOML document per run, with `--set`
//! overrides applied to leaf fields before validation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use iioss_core::detectability::{IossCertificate, LyapCertificate, SamplerConfig, SearchConfig, TrajectoryPairScenario};
use iioss_core::io::{read_scenario, read_signal_csv};
use iioss_core::observer::{full_information, luenberger, FullInformationConfig, MeasuredOutput, Observer, ObserverScenario};
use iioss_core::{registry_get, ComparisonFunction, LinearModel, RgasCertificate, SystemModel, VectorSignal};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub tag: Option<String>,
    pub out_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub model: Option<ModelConfig>,
    pub certificate: Option<IossCertificate>,
    pub lyapunov: Option<LyapunovConfig>,
    pub rgas: Option<RgasCertificate>,
    pub observer: Option<ObserverConfig>,
    pub scenario: Option<ScenarioConfig>,
    pub observer_scenario: Option<ObserverScenarioConfig>,
    pub sampler: Option<SamplerConfig>,
    pub search: Option<SearchConfig>,
    pub check: Option<CheckConfig>,
    pub simulate: Option<SimulateConfig>,
    pub bihari: Option<BihariConfig>,
    pub osgood: Option<OsgoodConfig>,
    pub audit: Option<AuditConfig>,
    pub candidate: Option<CandidateConfig>,
    pub probe: Option<ProbeConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: Option<String>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// Linear model file (TOML or JSON), relative to the config file.
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovConfig {
    /// Quadratic form `U = (x₁−x₂)ᵀP(x₁−x₂)`, rows of `P`.
    #[serde(alias = "P")]
    pub p: Vec<Vec<f64>>,
    pub sigma_u: ComparisonFunction,
    pub sigma_y: ComparisonFunction,
    pub lambda: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObserverConfig {
    Luenberger { gain: Vec<Vec<f64>> },
    FullInformation(FullInformationConfig),
}

/// A pair scenario: either a scenario file or inline states with optional
/// signal CSVs (missing signals are zero).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub file: Option<PathBuf>,
    pub chi1: Option<Vec<f64>>,
    pub chi2: Option<Vec<f64>>,
    pub u1: Option<PathBuf>,
    pub u2: Option<PathBuf>,
    pub d: Option<PathBuf>,
    pub horizon: Option<f64>,
    pub dt: Option<f64>,
}

/// An observer scenario: a JSON file or inline data. `y_bar` names a
/// recorded measurement CSV; otherwise the true output is used, plus the
/// optional `y_perturbation` CSV.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverScenarioConfig {
    pub file: Option<PathBuf>,
    pub chi: Option<Vec<f64>>,
    pub chi_bar: Option<Vec<f64>>,
    pub u: Option<PathBuf>,
    pub u_bar: Option<PathBuf>,
    pub d: Option<PathBuf>,
    pub y_bar: Option<PathBuf>,
    pub y_perturbation: Option<PathBuf>,
    pub horizon: Option<f64>,
    pub dt: Option<f64>,
}

/// Residual checks over a scenario family.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckConfig {
    /// Absolute residual tolerance.
    pub tolerance: Option<f64>,
    /// Replaces the `1e−6` factor of the default relative tolerance.
    pub tolerance_scale: Option<f64>,
    /// Sup-norm of sampled `ȳ` perturbations (observer-check).
    pub y_perturbation: Option<f64>,
    /// Observer consistency limit (necessity-experiment).
    pub consistency_limit: Option<f64>,
    /// Also report the grid-refinement study (single scenario only).
    #[serde(default)]
    pub grid_refinement: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub chi: Vec<f64>,
    pub u: Option<PathBuf>,
    pub d: Option<PathBuf>,
    pub horizon: f64,
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BihariConfig {
    pub kappa1: Option<ComparisonFunction>,
    pub c: Option<f64>,
    pub t: Option<f64>,
    /// Grid points of the exported bound curve on `[0, t]`.
    pub points: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OsgoodConfig {
    pub kappa1: Option<ComparisonFunction>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    #[serde(default = "AuditConfig::default_samples")]
    pub samples: usize,
    pub seed: u64,
    pub radius: Option<f64>,
}

impl AuditConfig {
    fn default_samples() -> usize {
        1000
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateConfig {
    pub chi1: Vec<Vec<f64>>,
    pub chi2: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub chi1: Vec<f64>,
    pub chi2: Vec<f64>,
    pub radii: Vec<f64>,
}

/// Parses `--set key=value`; the value is read as TOML and falls back to a
/// bare string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = s.split_once('=').ok_or_else(|| anyhow!("override '{s}' is not key=value"))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        bail!("override '{s}' has an empty key segment");
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key v present"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    Ok((path, value))
}

fn apply_override(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut cur = table;
    for seg in parents {
        let entry = cur
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override path '{}' passes through a non-table field '{seg}'", path.join(".")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Loaded configuration plus what is needed to reproduce it.
pub struct Loaded {
    pub config: ExperimentConfig,
    /// Effective document after overrides.
    pub effective: toml::Table,
    /// Directory relative paths resolve against.
    pub base: PathBuf,
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Loaded> {
    let (text, base) = match path {
        Some(p) => (
            fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
            p.parent().map(Path::to_path_buf).unwrap_or_default(),
        ),
        None => (String::new(), PathBuf::new()),
    };
    let name = path.map_or("<none>".to_string(), |p| p.display().to_string());
    // parse once unmodified so that errors carry line and column
    toml::from_str::<ExperimentConfig>(&text).map_err(|e| anyhow!("config {name}: {e}"))?;
    let mut effective: toml::Table = toml::from_str(&text).map_err(|e| anyhow!("config {name}: {e}"))?;
    for o in overrides {
        let (p, v) = parse_override(o)?;
        apply_override(&mut effective, &p, v)?;
    }
    let config = ExperimentConfig::deserialize(toml::Value::Table(effective.clone()))
        .map_err(|e| anyhow!("config {name} after --set overrides: {e}"))?;
    for block in ["sampler", "search", "audit"] {
        if let Some(t) = effective.get(block).and_then(toml::Value::as_table) {
            if !t.contains_key("seed") {
                bail!("config {name}: [{block}] needs an explicit seed");
            }
        }
    }
    Ok(Loaded { config, effective, base })
}

impl Loaded {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn existing(&self, p: &Path) -> Result<PathBuf> {
        let full = self.resolve(p);
        if !full.exists() {
            bail!("referenced file {} does not exist", full.display());
        }
        Ok(full)
    }

    pub fn model(&self) -> Result<SystemModel> {
        let m = self.config.model.as_ref().ok_or_else(|| anyhow!("config needs a [model] block"))?;
        match (&m.name, &m.file) {
            (_, Some(file)) => {
                let path = self.existing(file)?;
                let text = fs::read_to_string(&path)?;
                let mut def: LinearModel = if path.extension().is_some_and(|e| e == "json") {
                    serde_json::from_str(&text).map_err(|e| anyhow!("model file {}: {e}", path.display()))?
                } else {
                    toml::from_str(&text).map_err(|e| anyhow!("model file {}: {e}", path.display()))?
                };
                let dir = path.parent().unwrap_or(Path::new("."));
                for k in [&mut def.kappa1, &mut def.kappa2].into_iter().flatten() {
                    k.resolve_files(dir)?;
                }
                if let Some(name) = &m.name {
                    def.name = name.clone();
                }
                Ok(def.build()?)
            }
            (Some(name), None) => Ok(registry_get(name, &m.params)?),
            (None, None) => bail!("[model] needs a name or a file"),
        }
    }

    fn resolve_fn(&self, f: &ComparisonFunction) -> Result<ComparisonFunction> {
        let mut f = f.clone();
        f.resolve_files(&self.base)?;
        f.validate()?;
        Ok(f)
    }

    pub fn certificate(&self) -> Result<IossCertificate> {
        let c = self.config.certificate.as_ref().ok_or_else(|| anyhow!("config needs a [certificate] block"))?;
        let cert = IossCertificate {
            alpha: self.resolve_fn(&c.alpha)?,
            alpha_x: self.resolve_fn(&c.alpha_x)?,
            alpha_u: self.resolve_fn(&c.alpha_u)?,
            alpha_y: self.resolve_fn(&c.alpha_y)?,
            lambda: c.lambda,
        };
        cert.validate()?;
        Ok(cert)
    }

    pub fn lyapunov(&self) -> Result<LyapCertificate> {
        let l = self.config.lyapunov.as_ref().ok_or_else(|| anyhow!("config needs a [lyapunov] block"))?;
        Ok(LyapCertificate::quadratic(
            rows_to_matrix(&l.p, "lyapunov.p")?,
            self.resolve_fn(&l.sigma_u)?,
            self.resolve_fn(&l.sigma_y)?,
            l.lambda,
        )?)
    }

    pub fn rgas(&self) -> Result<RgasCertificate> {
        let c = self.config.rgas.as_ref().ok_or_else(|| anyhow!("config needs an [rgas] block"))?;
        Ok(RgasCertificate::new(
            self.resolve_fn(&c.beta)?,
            self.resolve_fn(&c.beta_x)?,
            self.resolve_fn(&c.beta_u)?,
            self.resolve_fn(&c.beta_y)?,
            c.eta,
        )?)
    }

    pub fn observer(&self, model: &SystemModel) -> Result<Observer> {
        match self.config.observer.as_ref().ok_or_else(|| anyhow!("config needs an [observer] block"))? {
            ObserverConfig::Luenberger { gain } => Ok(luenberger(model, rows_to_matrix(gain, "observer.gain")?)?),
            ObserverConfig::FullInformation(cfg) => {
                let mut cfg = cfg.clone();
                for w in [&mut cfg.w_x, &mut cfg.w_u, &mut cfg.w_y] {
                    *w = self.resolve_fn(w)?;
                }
                Ok(full_information(model, cfg)?)
            }
        }
    }

    pub fn search(&self) -> Result<SearchConfig> {
        self.config.search.clone().ok_or_else(|| anyhow!("config needs a [search] block"))
    }

    pub fn check(&self) -> CheckConfig {
        self.config.check.clone().unwrap_or_default()
    }

    fn signal(&self, p: &Option<PathBuf>, dim: usize, horizon: f64) -> Result<VectorSignal> {
        match p {
            Some(p) => {
                let sig = read_signal_csv(&self.existing(p)?, None)?;
                if sig.dim() != dim {
                    bail!("signal {} has {} channels, expected {dim}", p.display(), sig.dim());
                }
                Ok(sig)
            }
            None => Ok(VectorSignal::zeros(dim, horizon, 1)?),
        }
    }

    /// Single pair scenario from `[scenario]`, if configured.
    pub fn pair_scenario(&self, model: &SystemModel) -> Result<Option<TrajectoryPairScenario>> {
        let Some(s) = &self.config.scenario else {
            return Ok(None);
        };
        if let Some(file) = &s.file {
            let mut sc = read_scenario(&self.existing(file)?)?;
            if s.dt.is_some() {
                sc.dt = s.dt;
            }
            return Ok(Some(sc));
        }
        let need = |v: &Option<Vec<f64>>, what: &str| v.clone().ok_or_else(|| anyhow!("[scenario] needs {what} or a file"));
        let horizon = s.horizon.ok_or_else(|| anyhow!("[scenario] needs a horizon"))?;
        Ok(Some(TrajectoryPairScenario {
            chi1: need(&s.chi1, "chi1")?,
            chi2: need(&s.chi2, "chi2")?,
            u1: self.signal(&s.u1, model.m(), horizon)?,
            u2: self.signal(&s.u2, model.m(), horizon)?,
            d: self.signal(&s.d, model.q(), horizon)?,
            horizon,
            dt: s.dt,
        }))
    }

    pub fn observer_scenario(&self, model: &SystemModel) -> Result<Option<ObserverScenario>> {
        let Some(s) = &self.config.observer_scenario else {
            return Ok(None);
        };
        if let Some(file) = &s.file {
            let path = self.existing(file)?;
            let mut sc: ObserverScenario = serde_json::from_str(&fs::read_to_string(&path)?)
                .map_err(|e| anyhow!("observer scenario {}: {e}", path.display()))?;
            if s.dt.is_some() {
                sc.dt = s.dt;
            }
            return Ok(Some(sc));
        }
        let horizon = s.horizon.ok_or_else(|| anyhow!("[observer_scenario] needs a horizon"))?;
        let chi = s.chi.clone().ok_or_else(|| anyhow!("[observer_scenario] needs chi or a file"))?;
        let chi_bar = s.chi_bar.clone().unwrap_or_else(|| vec![0.0; model.n()]);
        let y_bar = match (&s.y_bar, &s.y_perturbation) {
            (Some(_), Some(_)) => bail!("[observer_scenario] takes y_bar or y_perturbation, not both"),
            (Some(_), None) => MeasuredOutput::Recorded {
                signal: self.signal(&s.y_bar, model.p(), horizon)?,
            },
            (None, Some(_)) => MeasuredOutput::Truth {
                perturbation: Some(self.signal(&s.y_perturbation, model.p(), horizon)?),
            },
            (None, None) => MeasuredOutput::Truth { perturbation: None },
        };
        Ok(Some(ObserverScenario {
            chi,
            u: self.signal(&s.u, model.m(), horizon)?,
            d: self.signal(&s.d, model.q(), horizon)?,
            chi_bar,
            u_bar: self.signal(&s.u_bar, model.m(), horizon)?,
            y_bar,
            horizon,
            dt: s.dt,
        }))
    }

    /// First seed found among the sampling blocks, for the manifest.
    pub fn seed(&self) -> Option<u64> {
        let c = &self.config;
        c.search
            .as_ref()
            .map(|s| s.seed)
            .or(c.sampler.as_ref().map(|s| s.seed))
            .or(c.audit.as_ref().map(|a| a.seed))
            .or(match &c.observer {
                Some(ObserverConfig::FullInformation(f)) => Some(f.seed),
                _ => None,
            })
    }
}

pub fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        bail!("{what} must be a nonempty list of equal-length rows");
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Comparison function from a shorthand (`identity`, `linear:a`,
/// `quadratic:a`, `power:a,b`, `log_affine:a`) or inline JSON.
pub fn parse_function(s: &str) -> Result<ComparisonFunction> {
    let s = s.trim();
    if s.starts_with('{') {
        let f: ComparisonFunction = serde_json::from_str(s).map_err(|e| anyhow!("function '{s}': {e}"))?;
        f.validate()?;
        return Ok(f);
    }
    let (kind, args) = s.split_once(':').unwrap_or((s, ""));
    let nums = args
        .split(',')
        .filter(|a| !a.trim().is_empty())
        .map(|a| a.trim().parse::<f64>().map_err(|_| anyhow!("function '{s}': '{a}' is not a number")))
        .collect::<Result<Vec<_>>>()?;
    let f = match (kind, nums.as_slice()) {
        ("identity", []) => ComparisonFunction::identity(),
        ("linear", [a]) => ComparisonFunction::linear(*a)?,
        ("quadratic", [a]) => ComparisonFunction::quadratic(*a)?,
        ("power", [a, b]) => ComparisonFunction::power(*a, *b)?,
        ("log_affine", [a]) => ComparisonFunction::log_affine(*a)?,
        _ => bail!("unknown function shorthand '{s}' (identity, linear:a, quadratic:a, power:a,b, log_affine:a or JSON)"),
    };
    Ok(f)
}
