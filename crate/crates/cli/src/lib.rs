//! `lobrl` command-line driver: staged pipeline commands over a run directory.

pub mod compare;
pub mod config;
pub mod error;
pub mod pipeline;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use lobrl::agents::AgentKind;
use lobrl::market_data::{generate_synthetic_stream, write_orderbook, EventStream, Regime};

use crate::compare::{compare_runs, CompareOptions};
use crate::config::{Overrides, Profile, RunConfig};
use crate::error::{CliError, Result};
use crate::pipeline::RunDir;

#[derive(Debug, Parser)]
#[command(name = "lobrl", version, about = "Order-book forecasting and RL trading pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML configuration overlaid on the profile.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Profile::Default)]
    pub profile: Profile,
    /// Agent kind (qtable, ppo, grpo, gspo), a comma-separated list, or `all`.
    #[arg(long, global = true)]
    pub agent: Option<String>,
    /// Suppress the summary printed on stdout.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load or generate the event stream and write features, targets and splits.
    Prepare,
    /// Train and freeze the multi-horizon forecaster.
    TrainForecaster,
    /// Train the selected agents on the train split.
    TrainAgent,
    /// Evaluate trained agents greedily on the held-out split.
    Backtest,
    /// Tabulate backtest reports across agents and run directories.
    Compare {
        /// Extra run directories to include besides `--out`.
        runs: Vec<PathBuf>,
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        allow_mixed_instruments: bool,
    },
    /// Every stage in order, then compare.
    Run,
    /// Write a synthetic LOBSTER-format orderbook file.
    Synth {
        /// Orderbook CSV to write.
        #[arg(long)]
        output: PathBuf,
        /// Matching message file to write.
        #[arg(long)]
        messages: Option<PathBuf>,
        #[arg(long)]
        n_events: Option<usize>,
        /// trend, mean-revert or random-walk.
        #[arg(long)]
        regime: Option<String>,
    },
}

pub fn parse_agents(s: &str) -> Result<Vec<AgentKind>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(AgentKind::ALL.to_vec());
    }
    let mut kinds = Vec::new();
    for part in s.split(',') {
        let kind: AgentKind = part
            .trim()
            .parse()
            .map_err(|e: lobrl::Error| CliError::Usage(e.to_string()))?;
        if !kinds.contains(&kind) {
            kinds.push(kind);
        }
    }
    Ok(kinds)
}

impl Cli {
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let overrides = Overrides {
            seed: self.seed,
            out: self.out.clone(),
            agents: self.agent.as_deref().map(parse_agents).transpose()?,
        };
        RunConfig::resolve(self.profile, self.config.as_deref(), &overrides)
    }
}

fn write_messages(stream: &EventStream, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        for (i, s) in stream.snapshots.iter().enumerate() {
            let best = s.best();
            // A limit-order submission at the best ask; only the time column is consumed.
            writeln!(w, "{},1,{},{},{},-1", s.timestamp, i + 1, best.ask_volume, best.ask_price)?;
        }
        w.flush()
    })();
    res.map_err(|e| CliError::io(path, e))
}

fn synth(
    cfg: &RunConfig,
    output: &Path,
    messages: Option<&Path>,
    n_events: Option<usize>,
    regime: Option<&str>,
) -> Result<String> {
    let mut params = cfg.data.synthetic.clone();
    if let Some(n) = n_events {
        params.n_events = n;
    }
    if let Some(r) = regime {
        params.regime = r
            .parse::<Regime>()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let stream = generate_synthetic_stream(&params)?;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let file = std::fs::File::create(output).map_err(|e| CliError::io(output, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_orderbook(&stream, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(output, e))?;
    if let Some(m) = messages {
        write_messages(&stream, m)?;
    }
    Ok(format!("wrote {} events to {}\n", stream.len(), output.display()))
}

fn compare_stage(cfg: &RunConfig, extra: &[PathBuf], opts: &CompareOptions) -> Result<String> {
    let mut runs = vec![cfg.out.clone()];
    runs.extend(extra.iter().cloned());
    let cmp = compare_runs(&runs, &cfg.agents, opts)?;
    let run = RunDir::new(&cfg.out);
    let write = |name: &str, text: String| {
        let p = run.root.join(name);
        std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    };
    std::fs::create_dir_all(&run.root).map_err(|e| CliError::io(&run.root, e))?;
    let md = cmp.to_markdown();
    write("compare.md", md.clone())?;
    write("compare.csv", cmp.to_csv())?;
    write("compare.json", serde_json::to_string_pretty(&cmp)? + "\n")?;
    Ok(md)
}

/// Runs one command and returns the summary meant for stdout.
pub fn execute(cli: &Cli) -> Result<String> {
    let cfg = cli.resolve_config()?;
    let mut out = String::new();
    match &cli.command {
        Command::Prepare => {
            let meta = pipeline::prepare(&cfg)?;
            out += &format!("prepared {} events, {} rows\n", meta.events, meta.rows);
        }
        Command::TrainForecaster => {
            let r = pipeline::train_forecaster_stage(&cfg)?;
            out += &format!("forecaster best epoch {} val mse {:.6e}\n", r.best_epoch, r.best_val_mse);
        }
        Command::TrainAgent => {
            for (kind, log) in cfg.agents.iter().zip(pipeline::train_agents_stage(&cfg)?) {
                let last = log.rows.last().map_or(0.0, |r| r.mean_return);
                out += &format!("{kind}: {} updates, final mean return {last:.6}\n", log.rows.len());
            }
        }
        Command::Backtest => {
            for r in pipeline::backtest_stage(&cfg)? {
                out += &format!("{}: avg return {:.6} over {} episodes\n", r.method, r.avg_return, r.episodes);
            }
        }
        Command::Compare {
            runs,
            strict,
            allow_mixed_instruments,
        } => {
            let opts = CompareOptions {
                strict: *strict,
                allow_mixed_instruments: *allow_mixed_instruments,
            };
            out = compare_stage(&cfg, runs, &opts)?;
        }
        Command::Run => {
            pipeline::prepare(&cfg)?;
            pipeline::train_forecaster_stage(&cfg)?;
            pipeline::train_agents_stage(&cfg)?;
            for r in pipeline::backtest_stage(&cfg)? {
                out += &format!("{}: avg return {:.6} over {} episodes\n", r.method, r.avg_return, r.episodes);
            }
            if cfg.agents.len() >= 2 {
                out = compare_stage(&cfg, &[], &CompareOptions::default())?;
            }
        }
        Command::Synth {
            output,
            messages,
            n_events,
            regime,
        } => out = synth(&cfg, output, messages.as_deref(), *n_events, regime.as_deref())?,
    }
    Ok(out)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            if !cli.quiet {
                print!("{summary}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agent_flag_parsing() {
        assert_eq!(parse_agents("all").unwrap(), AgentKind::ALL.to_vec());
        assert_eq!(
            parse_agents("ppo, gspo,ppo").unwrap(),
            vec![AgentKind::Ppo, AgentKind::Gspo]
        );
        assert!(matches!(parse_agents("dqn"), Err(CliError::Usage(_))));
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
