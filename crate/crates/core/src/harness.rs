//! Episode simulation, the full-information benchmark and experiment tables.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::allocation::{periodic_revenue, rank};
use crate::ddpg::{train_ddpg, ActorPolicy, DdpgConfig};
use crate::exec::{self, mean_stderr};
use crate::market::{MarketConfig, MarketSpec, TypeProfile};
use crate::mechanism::{Mechanism, MechanismOutcome};
use crate::sell_policy::{allocate_with, SellPolicy, ThresholdPolicy};
use crate::value_approx::{fit_mc, FitConfig, ValueApprox};
use crate::{rng, Error, Result};

/// Salt for the test-episode seed, shared by every method of a scenario.
const TEST_SALT: u64 = 0x7e57;

/// Type profiles of periods `1..=T` for one episode.
pub fn sample_horizon(spec: &MarketSpec, seed: u64, episode: usize) -> Vec<TypeProfile> {
    let horizon = spec.horizon();
    (1..=horizon)
        .map(|t| {
            let mut g = rng::stream(seed, (episode * horizon + t - 1) as u64);
            spec.sample_profile(&mut g)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: usize,
    /// Stock at the start of the period.
    pub stock: f64,
    pub arrivals: usize,
    pub demand: f64,
    pub sold: f64,
    /// `R^t` (undiscounted).
    pub revenue: f64,
    /// `δ^{t−1} R^t`.
    pub discounted: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub rows: Vec<TraceRow>,
    pub total: f64,
}

impl EpisodeTrace {
    /// Largest violation of `stock_{t+1} = stock_t − sold_t`, nonnegativity and `total = Σ rows`.
    pub fn conservation_error(&self, initial: f64) -> f64 {
        let mut err: f64 = 0.0;
        let mut stock = initial;
        for r in &self.rows {
            err = err.max((r.stock - stock).abs());
            err = err.max((-r.sold).max(0.0)).max((r.sold - r.stock).max(0.0));
            stock = r.stock - r.sold;
        }
        let sum: f64 = self.rows.iter().map(|r| r.discounted).sum();
        err.max((sum - self.total).abs())
    }

    /// Cumulative units sold after each period.
    pub fn cumulative_sold(&self) -> Vec<f64> {
        self.rows
            .iter()
            .scan(0.0, |acc, r| {
                *acc += r.sold;
                Some(*acc)
            })
            .collect()
    }
}

/// Plays `policy` on a sampled horizon: rank, choose `x`, allocate, discount, deplete.
pub fn run_episode(spec: &MarketSpec, policy: &dyn SellPolicy, horizon: &[TypeProfile]) -> Result<EpisodeTrace> {
    let delta = spec.discount();
    let mut stock = spec.stock();
    let mut rows = Vec::with_capacity(horizon.len());
    let mut total = 0.0;
    for (k, profile) in horizon.iter().enumerate() {
        let t = k + 1;
        let ranked = rank(profile, spec)?;
        let (x, alloc) = allocate_with(policy, &ranked, t, stock);
        let revenue = periodic_revenue(&ranked, x);
        let discounted = delta.powi(k as i32) * revenue;
        total += discounted;
        rows.push(TraceRow {
            t,
            stock,
            arrivals: profile.arrivals(),
            demand: profile.total_demand(),
            sold: alloc.sold,
            revenue,
            discounted,
        });
        stock = (stock - alloc.sold).max(0.0);
    }
    Ok(EpisodeTrace { rows, total })
}

/// Discounted payments and discounted `Σ φ a` of one episode run through the mechanism.
#[derive(Clone, Debug, PartialEq)]
pub struct MechanismEpisode {
    pub outcomes: Vec<MechanismOutcome>,
    pub payments: f64,
    pub virtual_surplus: f64,
}

/// Runs the full mechanism (truthful reports) on a sampled horizon.
pub fn run_mechanism_episode(mech: &Mechanism<'_>, horizon: &[TypeProfile], seed: u64) -> Result<MechanismEpisode> {
    let delta = mech.spec.discount();
    let mut stock = mech.spec.stock();
    let mut outcomes = Vec::with_capacity(horizon.len());
    let (mut payments, mut surplus) = (0.0, 0.0);
    for (k, profile) in horizon.iter().enumerate() {
        let out = mech.run_period(profile, k + 1, stock, Some(profile), rng::derive_seed(seed, k as u64))?;
        let d = delta.powi(k as i32);
        payments += d * out.payments.iter().sum::<f64>();
        for (i, b) in profile.arrived().iter().enumerate() {
            if out.allocations[i] > 0.0 {
                surplus += d * mech.spec.virtual_value(b.value, b.quantity)? * out.allocations[i];
            }
        }
        stock = out.next_stock;
        outcomes.push(out);
    }
    Ok(MechanismEpisode {
        outcomes,
        payments,
        virtual_surplus: surplus,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FullInfoMode {
    /// Whole horizon revealed: one knapsack over every (buyer, period) pair.
    #[default]
    Offline,
    /// Each period's bids revealed only in that period; sells all positive demand.
    Myopic,
}

/// Upper benchmark with the horizon's profiles known in advance.
pub fn full_info_oracle(spec: &MarketSpec, horizon: &[TypeProfile], mode: FullInfoMode) -> Result<EpisodeTrace> {
    if mode == FullInfoMode::Myopic {
        return run_episode(spec, &ThresholdPolicy::myopic(), horizon);
    }
    let delta = spec.discount();
    // (discounted φ, period index, φ, q)
    let mut items = Vec::new();
    for (k, profile) in horizon.iter().enumerate() {
        let d = delta.powi(k as i32);
        for b in profile.arrived() {
            if b.quantity > 0.0 {
                let phi = spec.virtual_value(b.value, b.quantity)?;
                if phi > 0.0 {
                    items.push((d * phi, k, phi, b.quantity));
                }
            }
        }
    }
    items.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let n = horizon.len();
    let mut sold = vec![0.0; n];
    let mut revenue = vec![0.0; n];
    let mut left = spec.stock();
    for (_, k, phi, q) in items {
        if left <= 0.0 {
            break;
        }
        let a = q.min(left);
        sold[k] += a;
        revenue[k] += phi * a;
        left -= a;
    }
    let mut stock = spec.stock();
    let mut rows = Vec::with_capacity(n);
    let mut total = 0.0;
    for (k, profile) in horizon.iter().enumerate() {
        let discounted = delta.powi(k as i32) * revenue[k];
        total += discounted;
        rows.push(TraceRow {
            t: k + 1,
            stock,
            arrivals: profile.arrivals(),
            demand: profile.total_demand(),
            sold: sold[k],
            revenue: revenue[k],
            discounted,
        });
        stock = (stock - sold[k]).max(0.0);
    }
    Ok(EpisodeTrace { rows, total })
}

/// Per-episode rewards with their mean and standard error.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub rewards: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
}

impl EvalSummary {
    pub fn from_rewards(rewards: Vec<f64>) -> Self {
        let (mean, stderr) = mean_stderr(&rewards);
        Self { rewards, mean, stderr }
    }
}

/// Mean discounted reward over `episodes` horizons drawn from `seed`.
pub fn evaluate(spec: &MarketSpec, policy: &dyn SellPolicy, episodes: usize, seed: u64) -> Result<EvalSummary> {
    let rewards = exec::try_map_range(episodes, |e| {
        Ok(run_episode(spec, policy, &sample_horizon(spec, seed, e))?.total)
    })?;
    Ok(EvalSummary::from_rewards(rewards))
}

pub fn evaluate_full_info(spec: &MarketSpec, episodes: usize, seed: u64, mode: FullInfoMode) -> Result<EvalSummary> {
    let rewards = exec::try_map_range(episodes, |e| {
        Ok(full_info_oracle(spec, &sample_horizon(spec, seed, e), mode)?.total)
    })?;
    Ok(EvalSummary::from_rewards(rewards))
}

/// Mean cumulative units sold after each period.
pub fn cumulative_allocation_series(
    spec: &MarketSpec,
    policy: &dyn SellPolicy,
    episodes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if episodes == 0 {
        return Err(Error::InvalidInput("need at least one episode".into()));
    }
    let series = exec::try_map_range(episodes, |e| {
        Ok(run_episode(spec, policy, &sample_horizon(spec, seed, e))?.cumulative_sold())
    })?;
    let mut mean = vec![0.0; spec.horizon()];
    for s in &series {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / episodes as f64;
        }
    }
    Ok(mean)
}

pub fn cumulative_allocation_csv(series: &[f64]) -> String {
    let mut out = String::from("t,cumulative_sold\n");
    for (k, v) in series.iter().enumerate() {
        let _ = writeln!(out, "{},{}", k + 1, v);
    }
    out
}

/// A policy read from disk.
#[derive(Clone, Debug)]
pub enum LoadedPolicy {
    Mc { approx: ValueApprox, policy: ThresholdPolicy },
    Ddpg(ActorPolicy),
}

impl LoadedPolicy {
    pub fn as_policy(&self) -> &dyn SellPolicy {
        match self {
            LoadedPolicy::Mc { policy, .. } => policy,
            LoadedPolicy::Ddpg(a) => a,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            LoadedPolicy::Mc { approx, .. } => approx.horizon(),
            LoadedPolicy::Ddpg(a) => a.horizon,
        }
    }
}

/// Parses a value-approximation or actor file; the discount for the threshold policy comes
/// from the embedded market, else from `fallback`.
pub fn load_policy(text: &str, fallback: Option<&MarketConfig>) -> Result<(LoadedPolicy, Option<MarketConfig>)> {
    #[derive(Deserialize)]
    struct Kind {
        kind: String,
    }
    let kind: Kind = serde_json::from_str(text)?;
    match kind.kind.as_str() {
        crate::value_approx::FILE_KIND => {
            let (approx, market) = ValueApprox::from_json(text)?;
            let discount = market
                .as_ref()
                .or(fallback)
                .map(|m| m.discount)
                .ok_or_else(|| Error::InvalidInput("value file has no market and none was given".into()))?;
            let policy = ThresholdPolicy::new(&approx, discount);
            Ok((LoadedPolicy::Mc { approx, policy }, market))
        }
        crate::ddpg::agent::FILE_KIND => {
            let (actor, market) = ActorPolicy::from_json(text)?;
            Ok((LoadedPolicy::Ddpg(actor), market))
        }
        other => Err(Error::InvalidInput(format!("unknown policy file kind {other}"))),
    }
}

/// Settings for reproducing the method comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Table2Config {
    /// `(T, Q̄)` pairs.
    pub scenarios: Vec<(usize, f64)>,
    pub mc_nodes: Vec<usize>,
    pub degree: usize,
    pub train_episodes: usize,
    pub test_episodes: usize,
    pub ddpg: Option<DdpgConfig>,
    pub full_info: FullInfoMode,
    /// Record wall-clock training time (makes the CSV nondeterministic).
    pub timings: bool,
    pub seed: u64,
}

impl Default for Table2Config {
    fn default() -> Self {
        Self {
            scenarios: vec![(10, 10.0), (30, 30.0), (100, 100.0)],
            mc_nodes: vec![5, 10, 20, 50],
            degree: 4,
            train_episodes: 10_000,
            test_episodes: 20,
            ddpg: Some(DdpgConfig::default()),
            full_info: FullInfoMode::Offline,
            timings: true,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Table2Row {
    pub method: String,
    pub horizon: usize,
    pub stock: f64,
    pub mean: f64,
    pub stderr: f64,
    pub train_seconds: Option<f64>,
    /// Per-episode test rewards, aligned across methods of a scenario.
    #[serde(skip)]
    pub rewards: Vec<f64>,
}

/// Trains and evaluates every method on every scenario; all methods of a scenario are tested
/// on the same horizons.
pub fn reproduce_table2(base: &MarketConfig, cfg: &Table2Config) -> Result<Vec<Table2Row>> {
    let mut rows = Vec::new();
    for (si, &(horizon, stock)) in cfg.scenarios.iter().enumerate() {
        let mut market = base.clone();
        market.horizon = horizon;
        market.stock = stock;
        let spec = MarketSpec::new(market)?;
        let scenario_seed = rng::derive_seed(cfg.seed, si as u64);
        let test_seed = rng::derive_seed(scenario_seed, TEST_SALT);
        let mut push = |method: String, summary: EvalSummary, secs: Option<f64>| {
            rows.push(Table2Row {
                method,
                horizon,
                stock,
                mean: summary.mean,
                stderr: summary.stderr,
                train_seconds: if cfg.timings { secs } else { None },
                rewards: summary.rewards,
            })
        };
        for &m in &cfg.mc_nodes {
            let start = Instant::now();
            let fit = fit_mc(
                &spec,
                &FitConfig {
                    nodes: m,
                    degree: cfg.degree,
                    episodes: cfg.train_episodes,
                    seed: rng::derive_seed(scenario_seed, m as u64),
                },
            )?;
            let secs = start.elapsed().as_secs_f64();
            let policy = ThresholdPolicy::new(&fit.approx, spec.discount());
            push(format!("mc-m{m}"), evaluate(&spec, &policy, cfg.test_episodes, test_seed)?, Some(secs));
        }
        if let Some(d) = &cfg.ddpg {
            let start = Instant::now();
            let dcfg = DdpgConfig {
                episodes: cfg.train_episodes,
                seed: rng::derive_seed(scenario_seed, 0xdd9),
                ..d.clone()
            };
            let trained = train_ddpg(&spec, &dcfg)?;
            let secs = start.elapsed().as_secs_f64();
            push("ddpg".into(), evaluate(&spec, &trained.actor, cfg.test_episodes, test_seed)?, Some(secs));
        }
        push(
            "full-info".into(),
            evaluate_full_info(&spec, cfg.test_episodes, test_seed, cfg.full_info)?,
            None,
        );
    }
    Ok(rows)
}

pub fn table2_csv(rows: &[Table2Row]) -> String {
    let mut out = String::from("method,T,Q_bar,mean_reward,std_err,train_seconds\n");
    for r in rows {
        let secs = r.train_seconds.map(|s| format!("{s:.3}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{}",
            r.method, r.horizon, r.stock, r.mean, r.stderr, secs
        );
    }
    out
}

/// Per-buyer mechanism rows: `t,stock,sold,buyer_id,v,q,alloc,payment,penalty`.
pub fn mechanism_csv(horizon: &[TypeProfile], episode: &MechanismEpisode, initial_stock: f64) -> String {
    let mut out = String::from("t,stock,sold,buyer_id,v,q,alloc,payment,penalty\n");
    let mut stock = initial_stock;
    for (k, (profile, o)) in horizon.iter().zip(&episode.outcomes).enumerate() {
        for (i, b) in profile.arrived().iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                k + 1,
                stock,
                o.sold,
                i,
                b.value,
                b.quantity,
                o.allocations[i],
                o.payments[i],
                o.penalties[i]
            );
        }
        stock = o.next_stock;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sell_policy::FractionPolicy;

    #[test]
    fn single_undiscounted_period() {
        let mut cfg = MarketConfig::table1(1, 10.0);
        cfg.discount = 1.0;
        let spec = MarketSpec::new(cfg).unwrap();
        let h = sample_horizon(&spec, 3, 0);
        let trace = run_episode(&spec, &ThresholdPolicy::myopic(), &h).unwrap();
        let r = rank(&h[0], &spec).unwrap();
        assert_eq!(trace.total, periodic_revenue(&r, 10.0f64.min(r.positive_demand())));
        let oracle = full_info_oracle(&spec, &h, FullInfoMode::Offline).unwrap();
        assert!((oracle.total - trace.total).abs() < 1e-9);
    }

    #[test]
    fn stock_exhausted_early_contributes_nothing() {
        let spec = MarketSpec::table1(5, 1.0);
        let sell_all = FractionPolicy {
            fraction: 1.0,
            last_period: 5,
        };
        for e in 0..20 {
            let h = sample_horizon(&spec, 4, e);
            let trace = run_episode(&spec, &sell_all, &h).unwrap();
            assert!(trace.conservation_error(1.0) < 1e-12);
            let mut empty = false;
            for r in &trace.rows {
                if empty {
                    assert_eq!(r.revenue, 0.0);
                }
                empty |= r.stock - r.sold <= 0.0;
            }
        }
    }

    #[test]
    fn cumulative_series_of_fixed_policies() {
        let spec = MarketSpec::table1(6, 2.0);
        let never = FractionPolicy {
            fraction: 0.0,
            last_period: 0,
        };
        let s = cumulative_allocation_series(&spec, &never, 10, 1).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
        // first-period demand always exceeds a tiny stock in practice, so sell-all at t=1
        // is a step
        let tiny = MarketSpec::table1(6, 0.01);
        let once = FractionPolicy {
            fraction: 1.0,
            last_period: 1,
        };
        let s = cumulative_allocation_series(&tiny, &once, 10, 1).unwrap();
        assert!(s.windows(2).all(|w| w[0] == w[1]));
        assert!(s[0] > 0.0);
    }

    #[test]
    fn table_csv_is_deterministic_without_timings() {
        let base = MarketConfig::table1(3, 3.0);
        let cfg = Table2Config {
            scenarios: vec![(3, 3.0)],
            mc_nodes: vec![5],
            train_episodes: 20,
            test_episodes: 5,
            ddpg: None,
            timings: false,
            ..Default::default()
        };
        let a = table2_csv(&reproduce_table2(&base, &cfg).unwrap());
        let b = table2_csv(&reproduce_table2(&base, &cfg).unwrap());
        assert_eq!(a, b);
        assert!(a.starts_with("method,T,Q_bar"));
        assert_eq!(a.lines().count(), 3);
    }
}
