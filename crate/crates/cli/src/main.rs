use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dynmech::audit::{self, AuditConfig, TypeGrid};
use dynmech::config::ExperimentConfig;
use dynmech::ddpg::{train_ddpg, DdpgConfig};
use dynmech::harness::{
    self, cumulative_allocation_csv, cumulative_allocation_series, load_policy, reproduce_table2, sample_horizon,
    table2_csv, LoadedPolicy, Table2Config,
};
use dynmech::market::{MarketConfig, MarketSpec};
use dynmech::mechanism::Mechanism;
use dynmech::sell_policy::{SellPolicy, ThresholdPolicy};
use dynmech::value_approx::fit_mc;

/// Dynamic mechanism simulator: value-function regression, actor-critic training,
/// evaluation, incentive audits and experiment tables.
#[derive(Parser)]
#[command(name = "dynmech", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML). Defaults describe the (10, 10) environment.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; standard output when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the value-function approximation by Monte Carlo regression.
    TrainMc {
        /// Number of regression nodes.
        #[arg(long)]
        m: Option<usize>,
        /// Polynomial degree (basis size minus one).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train the actor-critic sell policy.
    TrainDdpg {
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run the mechanism with a saved policy and print per-buyer rows as CSV.
    Evaluate {
        #[arg(long)]
        policy_file: PathBuf,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
    },
    /// Audit incentive compatibility, rationality and allocation monotonicity.
    VerifyIc {
        /// Value-approximation file; the myopic policy is audited when omitted.
        #[arg(long)]
        policy_file: Option<PathBuf>,
        /// Grid size as `NVxNQ` on `[0, 4] x (0, 2]`; `5x5` is the default grid.
        #[arg(long, default_value = "5x5")]
        grid: String,
        /// Rival draws per report.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train and evaluate every method on the given scenarios.
    Reproduce {
        /// Scenario `TxQ`, repeatable; all three standard scenarios when omitted.
        #[arg(long)]
        scenario: Vec<String>,
        #[arg(long)]
        train_episodes: Option<usize>,
        #[arg(long)]
        test_episodes: Option<usize>,
        /// Comma-separated node counts for the regression method.
        #[arg(long, default_value = "5,10,20,50")]
        nodes: String,
        #[arg(long)]
        no_ddpg: bool,
        /// Leave the training-time column empty so output is reproducible byte for byte.
        #[arg(long)]
        no_timings: bool,
    },
    /// Mean cumulative units sold per period under a saved policy.
    Cumalloc {
        #[arg(long)]
        policy_file: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.common.config {
        Some(p) => ExperimentConfig::from_path(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    let output = run(&cli.command, &cfg)?;
    match &cli.common.out {
        Some(path) => fs::write(path, output).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{output}"),
    }
    Ok(())
}

fn run(command: &Command, cfg: &ExperimentConfig) -> Result<String> {
    match command {
        Command::TrainMc { m, n, episodes } => {
            let spec = cfg.market_spec()?;
            let mut mc = cfg.mc;
            mc.nodes = m.unwrap_or(mc.nodes);
            mc.degree = n.unwrap_or(mc.degree);
            mc.episodes = episodes.unwrap_or(mc.episodes);
            let fit = fit_mc(&spec, &mc.fit_config(cfg.seed))?;
            eprintln!(
                "fitted T={} with m={} n={} over {} episodes; max node residual {:.3e}",
                spec.horizon(),
                mc.nodes,
                mc.degree,
                mc.episodes,
                fit.max_residual()
            );
            Ok(fit.approx.to_json(Some(spec.config()))?)
        }
        Command::TrainDdpg { episodes } => {
            let spec = cfg.market_spec()?;
            let dcfg = DdpgConfig {
                episodes: episodes.unwrap_or(cfg.ddpg.episodes),
                seed: cfg.seed,
                ..cfg.ddpg.clone()
            };
            let trained = train_ddpg(&spec, &dcfg)?;
            if let Some(loss) = trained.history.critic_losses.last() {
                eprintln!("trained {} episodes; final critic loss {loss:.4e}", dcfg.episodes);
            }
            Ok(trained.actor.to_json(Some(spec.config()), dcfg.seed, dcfg.episodes)?)
        }
        Command::Evaluate { policy_file, episodes } => {
            let (policy, spec) = read_policy(policy_file, &cfg.market)?;
            let mech = Mechanism::new(&spec, policy.as_policy(), cfg.mechanism);
            let mut out = String::new();
            let mut totals = Vec::with_capacity(*episodes);
            for e in 0..*episodes {
                let horizon = sample_horizon(&spec, cfg.seed, e);
                let ep = harness::run_mechanism_episode(&mech, &horizon, cfg.seed ^ e as u64)?;
                let csv = harness::mechanism_csv(&horizon, &ep, spec.stock());
                if e == 0 {
                    out.push_str(&csv);
                } else {
                    out.extend(csv.lines().skip(1).map(|l| format!("{l}\n")));
                }
                totals.push(harness::run_episode(&spec, policy.as_policy(), &horizon)?.total);
            }
            let s = harness::EvalSummary::from_rewards(totals);
            eprintln!(
                "mean discounted virtual surplus {:.4} (stderr {:.4}) over {} episodes",
                s.mean, s.stderr, episodes
            );
            Ok(out)
        }
        Command::VerifyIc {
            policy_file,
            grid,
            samples,
        } => {
            let (spec, threshold) = match policy_file {
                Some(p) => {
                    let (policy, spec) = read_policy(p, &cfg.market)?;
                    match policy {
                        LoadedPolicy::Mc { policy, .. } => (spec, policy),
                        LoadedPolicy::Ddpg(_) => bail!("the audit needs a value-approximation policy"),
                    }
                }
                None => (cfg.market_spec()?, ThresholdPolicy::myopic()),
            };
            let (nv, nq) = parse_pair(grid)?;
            let type_grid = if (nv, nq) == (5, 5) {
                TypeGrid::five_by_five()
            } else {
                TypeGrid::uniform(nv, 4.0, nq, spec.quantity_cap())
            };
            let acfg = AuditConfig {
                samples: samples.unwrap_or(cfg.audit.samples),
                seed: cfg.seed,
                ..cfg.audit.clone()
            };
            let policy: &dyn SellPolicy = &threshold;
            let mech = Mechanism::new(&spec, policy, cfg.mechanism);
            let points = type_grid.points();
            let ic = audit::audit_ic(&mech, &points, &points, &acfg)?;
            let overbid = audit::overbid_report(&ic);
            let ir = audit::audit_ir(&mech, &points, &acfg)?;
            let mono = audit::audit_monotonicity(&mech, &type_grid, &acfg)?;
            let mut out = ic.to_csv();
            for r in [&overbid, &ir, &mono] {
                out.extend(r.to_csv().lines().skip(1).map(|l| format!("{l}\n")));
            }
            for r in [&ic, &overbid, &ir, &mono] {
                eprintln!("{}", r.summary());
            }
            Ok(out)
        }
        Command::Reproduce {
            scenario,
            train_episodes,
            test_episodes,
            nodes,
            no_ddpg,
            no_timings,
        } => {
            let defaults = Table2Config::default();
            let scenarios = if scenario.is_empty() {
                defaults.scenarios.clone()
            } else {
                scenario
                    .iter()
                    .map(|s| parse_pair(s).map(|(t, q)| (t, q as f64)))
                    .collect::<Result<_>>()?
            };
            let mc_nodes = nodes
                .split(',')
                .map(|s| s.trim().parse::<usize>().context("node counts must be integers"))
                .collect::<Result<_>>()?;
            let table = Table2Config {
                scenarios,
                mc_nodes,
                degree: cfg.mc.degree,
                train_episodes: train_episodes.unwrap_or(cfg.mc.episodes),
                test_episodes: test_episodes.unwrap_or(cfg.evaluation.test_episodes),
                ddpg: (!no_ddpg).then(|| cfg.ddpg.clone()),
                full_info: cfg.evaluation.full_info,
                timings: !no_timings,
                seed: cfg.seed,
            };
            let rows = reproduce_table2(&cfg.market, &table)?;
            Ok(table2_csv(&rows))
        }
        Command::Cumalloc { policy_file, episodes } => {
            let (policy, spec) = read_policy(policy_file, &cfg.market)?;
            let series = cumulative_allocation_series(&spec, policy.as_policy(), *episodes, cfg.seed)?;
            Ok(cumulative_allocation_csv(&series))
        }
    }
}

/// Loads a policy and the market it was trained on (falling back to the configured one).
fn read_policy(path: &Path, fallback: &MarketConfig) -> Result<(LoadedPolicy, MarketSpec)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (policy, market) = load_policy(&text, Some(fallback))?;
    let mut market = market.unwrap_or_else(|| fallback.clone());
    if policy.horizon() != market.horizon {
        market.horizon = policy.horizon();
    }
    Ok((policy, MarketSpec::new(market)?))
}

/// `"AxB"` into its two integers.
fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once(['x', 'X', ','])
        .with_context(|| format!("expected AxB, got {s}"))?;
    Ok((a.trim().parse()?, b.trim().parse()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_parse() {
        assert_eq!(parse_pair("10x10").unwrap(), (10, 10));
        assert_eq!(parse_pair("30X 30").unwrap(), (30, 30));
        assert!(parse_pair("10").is_err());
        assert!(parse_pair("ax2").is_err());
    }
}
