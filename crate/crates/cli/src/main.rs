//! `taocache` command line: calibrate, select-window, sample, evaluate, stats.

mod commands;
mod config;
mod exit;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use taocache::{Stream, WindowParams};

use config::{output_dir, PolicyName, RunConfig};
use exit::ConfigError;
use output::OutputDir;

#[derive(Parser)]
#[command(
    name = "taocache",
    version,
    about = "Late-stage noise-delta caching for diffusion samplers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record prompt trajectories and write the delta statistics table.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        run: RunOverrides,
    },
    /// Choose the skip window from a calibration table.
    SelectWindow {
        #[arg(long)]
        table: Option<PathBuf>,
        /// Supplies `policy.window` and the output directory.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[command(flatten)]
        window: WindowOverrides,
    },
    /// Sample every prompt under a caching policy.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        run: RunOverrides,
        #[arg(long, value_enum)]
        policy: Option<PolicyName>,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        table: Option<PathBuf>,
        /// Tune the baseline threshold per prompt to skip exactly this many steps.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Compare candidate samples against reference samples.
    Evaluate {
        reference: PathBuf,
        candidate: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Per-step delta and residual curves of recorded traces.
    Stats {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunOverrides {
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    record_traces: bool,
}

impl RunOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.threads {
            cfg.threads = n;
        }
        cfg.record_traces |= self.record_traces;
    }
}

#[derive(Args)]
struct WindowOverrides {
    #[arg(long)]
    n_skip: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    tau_cos: Option<f64>,
    #[arg(long)]
    t_upper: Option<usize>,
    #[arg(long)]
    k_refresh: Option<usize>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long, value_parser = parse_stream)]
    stream: Option<Stream>,
}

impl WindowOverrides {
    fn apply(&self, p: &mut WindowParams) {
        p.n_skip = self.n_skip.unwrap_or(p.n_skip);
        p.lambda = self.lambda.unwrap_or(p.lambda);
        p.gamma = self.gamma.unwrap_or(p.gamma);
        p.tau_cos = self.tau_cos.or(p.tau_cos);
        p.t_upper = self.t_upper.or(p.t_upper);
        p.k_refresh = self.k_refresh.or(p.k_refresh);
        p.warmup_steps = self.warmup_steps.unwrap_or(p.warmup_steps);
        p.stream = self.stream.unwrap_or(p.stream);
    }
}

fn parse_stream(s: &str) -> Result<Stream, String> {
    Stream::ALL
        .into_iter()
        .find(|st| st.as_str() == s)
        .ok_or_else(|| format!("unknown stream {s:?} (cond, uncond, guided)"))
}

fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    RunConfig::load(path)
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Calibrate { config, run } => {
            let mut cfg = load_config(&config)?;
            run.apply(&mut cfg);
            commands::calibrate::run(&cfg, run.output_dir.as_deref())
        }
        Command::SelectWindow {
            table,
            config,
            output_dir: out_flag,
            window,
        } => {
            let cfg = config.as_deref().map(load_config).transpose()?;
            let mut params = cfg.as_ref().map(|c| c.policy.window.clone()).unwrap_or_default();
            window.apply(&mut params);
            let table = table
                .or_else(|| cfg.as_ref().and_then(|c| c.policy.table.clone()))
                .ok_or_else(|| ConfigError("select-window needs --table or policy.table".into()))?;
            let out = OutputDir::create(output_dir(
                out_flag.as_deref(),
                cfg.as_ref().map(|c| c.output_dir.as_path()),
            ))?;
            commands::select_window::run(&table, &params, &out)
        }
        Command::Sample {
            config,
            run,
            policy,
            plan,
            table,
            budget,
        } => {
            let mut cfg = load_config(&config)?;
            run.apply(&mut cfg);
            let p = &mut cfg.policy;
            p.name = policy.unwrap_or(p.name);
            p.plan = plan.or(p.plan.take());
            p.table = table.or(p.table.take());
            p.budget = budget.or(p.budget);
            commands::sample::run(&cfg, run.output_dir.as_deref())
        }
        Command::Evaluate {
            reference,
            candidate,
            output_dir: out_flag,
        } => {
            let out = OutputDir::create(output_dir(out_flag.as_deref(), None))?;
            commands::evaluate::run(&reference, &candidate, &out)
        }
        Command::Stats {
            traces,
            output_dir: out_flag,
        } => {
            let out = OutputDir::create(output_dir(out_flag.as_deref(), None))?;
            commands::stats::run(&traces, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::from(exit::SUCCESS),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit::code_for(&err))
        }
    }
}
