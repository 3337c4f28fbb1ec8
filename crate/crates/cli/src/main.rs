//! `iioss`: experiment runner for i-iIOSS certificates, falsification and
//! observers.
//!
//! Exit codes: 0 when the property held (or the computation succeeded),
//! 2 when a violation was found and its witness written, 1 on error.

mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use commands::{Direct, Outcome};
use output::{config_hash, Manifest, Run};

#[derive(Parser, Debug)]
#[command(name = "iioss", version, about = "Discounted incremental IOSS toolbox")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config leaf, e.g. `--set search.restarts=20`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (default: config `out_dir`, then `IIOSS_OUT_DIR`, then `./out`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for the parallel searches.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Name fragment of every artifact.
    #[arg(long, global = true)]
    tag: Option<String>,
}

#[derive(Args, Debug, Clone, Default)]
struct KappaArgs {
    /// `identity`, `linear:a`, `quadratic:a`, `power:a,b`, `log_affine:a` or JSON.
    #[arg(long)]
    kappa1: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a model and export its trajectory.
    Simulate,
    /// Check the Osgood divergence conditions for κ₁.
    OsgoodCheck(KappaArgs),
    /// Evaluate the Bihari envelope ρ⁻¹(ρ(c)eᵗ).
    BihariBound {
        #[command(flatten)]
        kappa: KappaArgs,
        #[arg(long)]
        c: Option<f64>,
        #[arg(long)]
        t: Option<f64>,
    },
    /// Sample the increment bounds of f and h against κ₁ and κ₂.
    AuditModel,
    /// Evaluate a detectability certificate on given or sampled scenarios.
    IossCheck,
    /// Search for a scenario violating a detectability certificate.
    IossFalsify,
    /// Check a quadratic Lyapunov certificate and its transformed bound.
    LyapCheck,
    /// Estimate the converse Lyapunov candidate for state pairs.
    LyapEval,
    /// Empirical continuity of the converse candidate.
    ContinuityProbe,
    /// Run an observer and export its estimate.
    ObserverRun,
    /// Evaluate an RGAS certificate for an observer.
    ObserverCheck,
    /// Derive a detectability certificate from an observer and test it.
    NecessityExperiment,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::OsgoodCheck(_) => "osgood-check",
            Command::BihariBound { .. } => "bihari-bound",
            Command::AuditModel => "audit-model",
            Command::IossCheck => "ioss-check",
            Command::IossFalsify => "ioss-falsify",
            Command::LyapCheck => "lyap-check",
            Command::LyapEval => "lyap-eval",
            Command::ContinuityProbe => "continuity-probe",
            Command::ObserverRun => "observer-run",
            Command::ObserverCheck => "observer-check",
            Command::NecessityExperiment => "necessity-experiment",
        }
    }
}

fn out_dir(flag: Option<&Path>, config: Option<&Path>, base: &Path) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = config {
        return if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    }
    std::env::var_os("IIOSS_OUT_DIR").map_or_else(|| PathBuf::from("out"), PathBuf::from)
}

fn execute(cli: &Cli) -> Result<u8> {
    let start = Instant::now();
    let loaded = config::load(cli.common.config.as_deref(), &cli.common.overrides)?;
    let threads = cli.common.threads.or(loaded.config.threads);
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let tag = cli.common.tag.clone().or(loaded.config.tag.clone()).unwrap_or_else(|| "run".into());
    if tag.is_empty() || tag.contains(['/', '\\']) {
        anyhow::bail!("tag '{tag}' must be a nonempty file-name fragment");
    }
    let dir = out_dir(cli.common.out_dir.as_deref(), loaded.config.out_dir.as_deref(), &loaded.base);
    let name = cli.command.name();
    let mut run = Run::new(name, &tag, &dir)?;
    let outcome: Outcome = match &cli.command {
        Command::Simulate => commands::simulate_cmd(&loaded, &mut run),
        Command::OsgoodCheck(k) => commands::osgood_cmd(
            &loaded,
            &Direct {
                kappa1: k.kappa1.clone(),
                ..Default::default()
            },
            &mut run,
        ),
        Command::BihariBound { kappa, c, t } => commands::bihari_cmd(
            &loaded,
            &Direct {
                kappa1: kappa.kappa1.clone(),
                c: *c,
                t: *t,
            },
            &mut run,
        ),
        Command::AuditModel => commands::audit_cmd(&loaded, &mut run),
        Command::IossCheck => commands::ioss_check_cmd(&loaded, &mut run),
        Command::IossFalsify => commands::falsify_cmd(&loaded, &mut run),
        Command::LyapCheck => commands::lyap_check_cmd(&loaded, &mut run),
        Command::LyapEval => commands::lyap_eval_cmd(&loaded, &mut run),
        Command::ContinuityProbe => commands::continuity_cmd(&loaded, &mut run),
        Command::ObserverRun => commands::observer_run_cmd(&loaded, &mut run),
        Command::ObserverCheck => commands::observer_check_cmd(&loaded, &mut run),
        Command::NecessityExperiment => commands::necessity_cmd(&loaded, &mut run),
    }?;
    let code = if outcome.held { 0 } else { 2 };
    let mut summary = outcome.summary;
    if let Some(obj) = summary.as_object_mut() {
        obj.insert("held".into(), outcome.held.into());
    }
    run.write_summary(&summary)?;
    run.write_manifest(&Manifest {
        config_sha256: config_hash(&loaded.effective),
        seed: loaded.seed(),
        threads: threads.unwrap_or_else(rayon::current_num_threads),
        wall_time_s: start.elapsed().as_secs_f64(),
        exit_code: code,
    })?;
    println!("{}", outcome.line);
    Ok(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let informational = !e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if informational { 0 } else { 1 });
        }
    };
    match execute(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
