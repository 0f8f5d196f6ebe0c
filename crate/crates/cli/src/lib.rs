//! `lanepath` command-line front end.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::CliError;
use config::{parse_config, ConfigError};

#[derive(Debug, Parser)]
#[command(
    name = "lanepath",
    version,
    about = "Lane post-processing, path prediction and closed-loop evaluation",
    after_help = "Any config key can be overridden as `--section.key value` or `--section.key=value`."
)]
pub struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a track and run the pipeline in the loop (or statically).
    Simulate {
        /// Run once per value: `section.key=v1,v2,...`.
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Run the pipeline over a mask sequence.
    Replay {
        /// Directory of `.pgm` masks (optional `truth.csv`); rendered from
        /// the configured track when omitted.
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Fit one mask and draw the lane lines and path.
    Fit {
        #[arg(long)]
        mask: PathBuf,
    },
    /// Count parameters and MACs of both segmentation networks.
    AnalyzeArch {
        /// Input resolution as WxH.
        #[arg(long, value_parser = parse_hw)]
        input_hw: Option<(usize, usize)>,
    },
    /// Block-averaged series from a `frames.csv`.
    ExportPlots {
        #[arg(long)]
        frames: PathBuf,
    },
    /// Print the effective configuration.
    ShowConfig,
}

fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(w)?, p(h)?))
}

/// `(dotted key, raw value)` pairs from the command line.
pub type Overrides = Vec<(String, String)>;

/// Splits `--section.key value` / `--section.key=value` overrides out of
/// `args`, returning the rest for clap.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides), ConfigError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let key_part = a
            .strip_prefix("--")
            .map(|k| k.split('=').next().unwrap_or(k));
        match key_part {
            Some(k) if k.contains('.') => {
                let body = &a[2..];
                let (key, value) = match body.split_once('=') {
                    Some((k, v)) => (k.to_string(), v.to_string()),
                    None => {
                        let v = it.next().ok_or_else(|| ConfigError::Override(a.clone()))?;
                        (body.to_string(), v)
                    }
                };
                overrides.push((key, value));
            }
            _ => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

fn execute(cli: Cli, overrides: Overrides) -> Result<(), CliError> {
    let mut overrides = overrides;
    if let Command::AnalyzeArch {
        input_hw: Some((w, h)),
    } = cli.command
    {
        overrides.push(("arch.input_hw".into(), format!("[{w}, {h}]")));
    }
    let (src, cfg) = parse_config(cli.config.as_deref(), &overrides)?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Simulate { sweep: Some(spec) } => commands::simulate_sweep(&src, &spec, out),
        Command::Simulate { sweep: None } => commands::simulate(&cfg, out),
        Command::Replay { masks } => commands::replay(&cfg, masks.as_deref(), out),
        Command::Fit { mask } => commands::fit(&cfg, &mask, out),
        Command::AnalyzeArch { .. } => commands::analyze_arch(&cfg, out),
        Command::ExportPlots { frames } => commands::export_plots(&cfg, &frames, out),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

/// Parses `args` (including the program name) and runs the command;
/// returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("LANEPATH_LOG", "warn"))
        .try_init();
    let args: Vec<String> = args.into_iter().map(Into::into).collect();
    let (rest, overrides) = match split_overrides(args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli, overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
