// Copyright 2026 The elasmem Authors
// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use elasmem::config::SimConfig;
use elasmem::sim::{run, RunOptions};
use elasmem::trace::Trace;
use elasmem_core::hot_upgrade::{layouts_v1, layouts_v2, verify_all, LayoutDescriptor};

#[derive(Parser)]
#[command(
    name = "elasmem",
    version,
    about = "Memory elasticity engine simulator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Replay a trace and export metrics as CSV.
    Run(RunArgs),
    /// Generate a synthetic trace file.
    GenTrace(GenArgs),
    /// Stage, commit or inspect a dispatch-table upgrade.
    #[command(subcommand)]
    Upgrade(UpgradeCmd),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key = value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set trace.hot_fraction=0.5.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Trace CSV file, or `gen:` with optional trace overrides such as
    /// `gen:hot_fraction=0.3,duration_ms=200`.
    #[arg(long, default_value = "gen:")]
    trace: String,
    /// Output directory for the CSV files.
    #[arg(long)]
    out: PathBuf,
    /// Measure latencies with the host clock instead of the cost model.
    #[arg(long)]
    wall_clock: bool,
    /// Exit with status 3 when any allocation ran out of memory.
    #[arg(long)]
    fail_on_oom: bool,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum UpgradeCmd {
    /// Check layout compatibility and record the target version.
    Stage {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        to: u32,
    },
    /// Run a trace and switch to the staged version during the run.
    Commit {
        #[arg(long)]
        state: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "gen:")]
        trace: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the current and staged versions.
    Status {
        #[arg(long)]
        state: PathBuf,
    },
}

fn load_config(a: &ConfigArgs) -> Result<SimConfig> {
    let mut cfg = match &a.config {
        Some(p) => SimConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => SimConfig::default(),
    };
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set {kv}: expected KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_trace(spec: &str, cfg: &mut SimConfig) -> Result<Trace> {
    let Some(overrides) = spec.strip_prefix("gen:") else {
        return Trace::load(Path::new(spec)).with_context(|| format!("reading trace {spec}"));
    };
    for kv in overrides
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
    {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("trace override {kv}: expected key=value"))?;
        let k = k.trim();
        let key = if k.contains('.') {
            k.to_string()
        } else {
            format!("trace.{k}")
        };
        cfg.set(&key, v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg.generate_trace()?)
}

#[derive(Debug, Default)]
struct UpgradeState {
    version: u32,
    staged: Option<u32>,
}

impl UpgradeState {
    fn load(path: &Path) -> Result<Self> {
        let mut s = Self {
            version: 1,
            staged: None,
        };
        if !path.exists() {
            return Ok(s);
        }
        for line in std::fs::read_to_string(path)?.lines() {
            let Some((k, v)) = line.split_once('=') else {
                continue;
            };
            match k.trim() {
                "version" => s.version = v.trim().parse()?,
                "staged" => s.staged = Some(v.trim().parse()?),
                other => bail!("{}: unknown key {other}", path.display()),
            }
        }
        Ok(s)
    }

    fn save(&self, path: &Path) -> Result<()> {
        let mut text = format!("version = {}\n", self.version);
        if let Some(v) = self.staged {
            text.push_str(&format!("staged = {v}\n"));
        }
        std::fs::write(path, text)?;
        Ok(())
    }
}

fn layouts(version: u32) -> Result<Vec<LayoutDescriptor>> {
    match version {
        1 => Ok(layouts_v1()),
        2 => Ok(layouts_v2()),
        v => bail!("no dispatch table for version {v}"),
    }
}

fn upgrade(cmd: UpgradeCmd) -> Result<u8> {
    match cmd {
        UpgradeCmd::Stage { state, to } => {
            let mut s = UpgradeState::load(&state)?;
            if to <= s.version {
                bail!("version {to} is not newer than {}", s.version);
            }
            let report = verify_all(&layouts(s.version)?, &layouts(to)?);
            println!("from,to,compatible");
            println!("{},{to},{}", s.version, report.compatible);
            for d in &report.diffs {
                println!("# {d}");
            }
            if !report.compatible {
                return Ok(1);
            }
            s.staged = Some(to);
            s.save(&state)?;
            Ok(0)
        }
        UpgradeCmd::Status { state } => {
            let s = UpgradeState::load(&state)?;
            println!("version,staged");
            println!(
                "{},{}",
                s.version,
                s.staged.map_or(String::new(), |v| v.to_string())
            );
            Ok(0)
        }
        UpgradeCmd::Commit {
            state,
            cfg,
            trace,
            out,
        } => {
            let mut s = UpgradeState::load(&state)?;
            let Some(target) = s.staged else {
                bail!("nothing staged in {}", state.display())
            };
            if s.version != 1 {
                bail!("the simulator boots at version 1; state says {}", s.version);
            }
            let mut cfg = load_config(&cfg)?;
            cfg.upgrade_target = target;
            let trace = resolve_trace(&trace, &mut cfg)?;
            let outcome = run(&cfg, &trace, RunOptions::default())?;
            let sum = &outcome.report.summary;
            println!("old,new,dispatch_version,cut_ok,violations");
            println!(
                "{},{target},{},{},{}",
                s.version,
                sum.dispatch_version,
                sum.upgrade_cut_ok,
                outcome.violations.len()
            );
            for v in &outcome.violations {
                eprintln!("violation: {v}");
            }
            if let Some(dir) = out {
                outcome.report.export(&dir)?;
            }
            let code = outcome.exit_code(cfg.fail_on_oom);
            if code == 0 && sum.upgrade_cut_ok {
                s.version = target;
                s.staged = None;
                s.save(&state)?;
            }
            Ok(code as u8)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run(a) => (|| -> Result<u8> {
            let mut cfg = load_config(&a.cfg)?;
            let trace = resolve_trace(&a.trace, &mut cfg)?;
            let outcome = run(
                &cfg,
                &trace,
                RunOptions {
                    wall_clock: a.wall_clock,
                },
            )?;
            outcome
                .report
                .export(&a.out)
                .with_context(|| format!("writing {}", a.out.display()))?;
            println!("{}", outcome.report.describe());
            for v in &outcome.violations {
                eprintln!("violation: {v}");
            }
            Ok(outcome.exit_code(a.fail_on_oom || cfg.fail_on_oom) as u8)
        })(),
        Cmd::GenTrace(a) => (|| -> Result<u8> {
            let cfg = load_config(&a.cfg)?;
            let t = cfg.generate_trace()?;
            t.save(&a.out)
                .with_context(|| format!("writing {}", a.out.display()))?;
            println!(
                "{} events, {} workers, last at {} ns",
                t.len(),
                t.workers(),
                t.end_ns()
            );
            Ok(0)
        })(),
        Cmd::Upgrade(c) => upgrade(c),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
