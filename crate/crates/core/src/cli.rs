//! Command-line entry point.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fakeindex::{build_index, load_index, save_index, BuildConfig};
use crate::harness::{compute_metrics, simulate_ab, ABReport, Artifacts};
use crate::logstore::{
    ingest_logs, load_docs, read_jsonl, synthesize_logs_with_stats, write_corpus, write_jsonl, SimConfig,
    UserContext,
};
use crate::mining::{build_dataset, MiningThresholds, ReferenceVerifier, TrainingSample};
use crate::policy::{distribution, PolicyParams};
use crate::reward::{build_oracle, RewardOracle};
use crate::serving::{DocStore, LatencyModel, SearchRequest, ServeConfig, Server};
use crate::trainer::{train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "qrewrite", version, about = "Context-aware query rewriting toolkit")]
struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic search log corpus.
    Synth {
        /// Simulation config (JSON). Defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mine rewrite and reject samples from session logs.
    Mine {
        #[arg(long)]
        logs: PathBuf,
        #[arg(long, default_value_t = 2.4)]
        tau_short: f64,
        #[arg(long, default_value_t = 10.0)]
        tau_valid: f64,
        #[arg(long, default_value_t = 30.0)]
        tau_long: f64,
        #[arg(long, default_value = "reference", value_parser = ["reference"])]
        verifier: String,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the stage-wise mining counts (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compute per-query frequency and CTR over a trailing window.
    BuildOracle {
        #[arg(long)]
        logs: PathBuf,
        #[arg(long, default_value_t = 180)]
        window_days: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the rewrite policy.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        oracle: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Build the query to documents cache.
    BuildIndex {
        #[arg(long)]
        logs: PathBuf,
        #[arg(long, default_value_t = 50)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        head_min_clicks: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a file of requests through the fused flow.
    ServeSim {
        #[command(flatten)]
        artifacts: ArtifactArgs,
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        requests: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulated paired A/B test on fresh users.
    Ab {
        #[command(flatten)]
        artifacts: ArtifactArgs,
        /// Training log directory; supplies the catalog and the training user ids.
        #[arg(long)]
        logs: PathBuf,
        /// Simulation config (JSON), normally the one used for `synth`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Session metrics of a log directory.
    Metrics {
        #[arg(long)]
        logs: PathBuf,
    },
    /// Inspect a trained policy.
    Policy {
        #[command(subcommand)]
        command: PolicyCommand,
    },
}

#[derive(Debug, Args)]
struct ArtifactArgs {
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    oracle: PathBuf,
    /// Per-stage latency model (JSON).
    #[arg(long)]
    latency: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum PolicyCommand {
    /// Print the candidate distribution for one query.
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        query: String,
        /// User context (JSON with h_query, h_video, geo).
        #[arg(long)]
        context: Option<PathBuf>,
        #[arg(long)]
        oracle: Option<PathBuf>,
    },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| Error::Format(format!("cannot serialize {}: {e}", path.display())))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn json_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

fn sim_config(path: Option<&Path>) -> Result<SimConfig> {
    let cfg: SimConfig = json_or_default(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn stdout_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Synth { config, out } => {
            let cfg = sim_config(config.as_deref())?;
            let (corpus, stats) = synthesize_logs_with_stats(&cfg, seed)?;
            write_corpus(&corpus, &out)?;
            stdout_json(&stats)
        }
        Command::Mine {
            logs,
            tau_short,
            tau_valid,
            tau_long,
            verifier: _,
            out,
            report,
        } => {
            let corpus = ingest_logs(&logs)?;
            let t = MiningThresholds {
                tau_short,
                tau_valid,
                tau_long,
            };
            let mined = build_dataset(&corpus, &t, &ReferenceVerifier)?;
            write_jsonl(&out, mined.samples.iter())?;
            if let Some(path) = report {
                write_json(&path, &mined.report)?;
            }
            stdout_json(&mined.report)
        }
        Command::BuildOracle { logs, window_days, out } => {
            let oracle = build_oracle(&ingest_logs(&logs)?, window_days)?;
            oracle.save(&out)?;
            eprintln!("{} queries in vocabulary", oracle.len());
            Ok(())
        }
        Command::Train {
            dataset,
            oracle,
            config,
            out,
            report,
        } => {
            let mut cfg: TrainConfig = json_or_default(config.as_deref())?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let samples: Vec<TrainingSample> = read_jsonl(&dataset)?;
            let oracle = RewardOracle::load(&oracle)?;
            let (params, rep) = match train(&samples, &oracle, &cfg) {
                Ok(r) => r,
                Err(Error::Diverged { message, report: partial }) => {
                    if let Some(path) = &report {
                        write_json(path, &partial)?;
                    }
                    return Err(Error::Diverged { message, report: partial });
                }
                Err(e) => return Err(e),
            };
            params.save(&out)?;
            if let Some(path) = report {
                write_json(&path, &rep)?;
            }
            eprintln!(
                "post-SFT reward {:.4}, final reward {:.4}, target prob {:.4} (uniform {:.4})",
                rep.post_sft_mean_reward, rep.final_mean_reward, rep.post_sft_target_prob, rep.uniform_target_prob
            );
            Ok(())
        }
        Command::BuildIndex {
            logs,
            k,
            head_min_clicks,
            out,
        } => {
            let index = build_index(&ingest_logs(&logs)?, &BuildConfig { k, head_min_clicks })?;
            save_index(&index, &out)?;
            eprintln!("{} entries", index.len());
            Ok(())
        }
        Command::ServeSim {
            artifacts,
            docs,
            requests,
            out,
        } => {
            let params = PolicyParams::load(&artifacts.params)?;
            let index = load_index(&artifacts.index)?;
            let oracle = RewardOracle::load(&artifacts.oracle)?;
            let latency: LatencyModel = json_or_default(artifacts.latency.as_deref())?;
            latency.validate()?;
            let store = DocStore::new(&load_docs(&docs)?);
            let reqs: Vec<SearchRequest> = read_jsonl(&requests)?;
            for r in &reqs {
                r.validate()?;
            }
            let server = Server {
                params: &params,
                index: &index,
                oracle: &oracle,
                store: &store,
                latency: &latency,
                config: &ServeConfig::default(),
            };
            let results: Vec<_> = reqs.iter().map(|r| server.serve(r)).collect();
            write_jsonl(&out, results.iter())
        }
        Command::Ab {
            artifacts,
            logs,
            config,
            out,
        } => {
            let sim = sim_config(config.as_deref())?;
            let params = PolicyParams::load(&artifacts.params)?;
            let index = load_index(&artifacts.index)?;
            let oracle = RewardOracle::load(&artifacts.oracle)?;
            let latency: LatencyModel = json_or_default(artifacts.latency.as_deref())?;
            let corpus = ingest_logs(&logs)?;
            let train_users: BTreeSet<String> = corpus.user_ids();
            let report: ABReport = simulate_ab(
                &sim,
                &Artifacts {
                    params: &params,
                    index: &index,
                    oracle: &oracle,
                    docs: &corpus.docs,
                    train_users: &train_users,
                    latency,
                    serve: ServeConfig::default(),
                },
                seed,
            )?;
            match out {
                Some(path) => write_json(&path, &report)?,
                None => stdout_json(&report)?,
            }
            println!("{}", ABReport::tsv_header());
            println!("{}", report.tsv_line());
            Ok(())
        }
        Command::Metrics { logs } => {
            let corpus = ingest_logs(&logs)?;
            stdout_json(&compute_metrics(&corpus.sessions, &MiningThresholds::default()))
        }
        Command::Policy {
            command:
                PolicyCommand::Eval {
                    params,
                    query,
                    context,
                    oracle,
                },
        } => {
            let params = PolicyParams::load(&params)?;
            let ctx: UserContext = json_or_default(context.as_deref())?;
            let oracle = oracle.map_or_else(|| Ok(RewardOracle::default()), |p| RewardOracle::load(&p))?;
            stdout_json(&distribution(&params, &query, &ctx, &oracle))
        }
    }
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns 0 on success, 2 on usage errors and 1 on runtime failures.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(cli_main(["qrewrite", "frobnicate"]), 2);
        assert_eq!(cli_main(["qrewrite", "build-oracle", "--logs", "x"]), 2);
        assert_eq!(cli_main(["qrewrite", "ab", "--help"]), 0);
    }
}
