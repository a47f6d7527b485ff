//! Value-to-go approximation `Ṽ^t(s) = Σ_j c_j^t f_j(s)` fitted by Monte Carlo regression,
//! and a discretized exact dynamic program used as a reference on small instances.

use serde::{Deserialize, Serialize};

use crate::allocation::{periodic_revenue, rank, RankedProfile};
use crate::chebyshev::{chebyshev_nodes, ChebyshevBasis, NodeSet, Projector};
use crate::market::{MarketConfig, MarketSpec, TypeProfile};
use crate::sell_policy::{Continuation, MarginalProfile};
use crate::{exec, rng, Error, Result};

pub const FILE_VERSION: u32 = 1;
pub const FILE_KIND: &str = "value-approx";

/// Upper bound on stock and action grid sizes accepted by [`exact_dp_oracle`].
pub const DP_MAX_GRID: usize = 200;
/// Upper bound on the horizon accepted by [`exact_dp_oracle`].
pub const DP_MAX_HORIZON: usize = 5;

/// Fitted coefficients, one row per period `1..=T`; period `T + 1` is identically zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueApprox {
    basis: ChebyshevBasis,
    coeffs: Vec<Vec<f64>>,
    pub nodes: usize,
    pub seed: u64,
    pub episodes: usize,
}

impl ValueApprox {
    pub fn zeros(horizon: usize, basis: ChebyshevBasis) -> Self {
        Self {
            basis,
            coeffs: vec![vec![0.0; basis.len()]; horizon],
            nodes: 0,
            seed: 0,
            episodes: 0,
        }
    }

    pub fn from_coeffs(basis: ChebyshevBasis, coeffs: Vec<Vec<f64>>) -> Result<Self> {
        if coeffs.iter().any(|r| r.len() != basis.len()) {
            return Err(Error::InvalidInput(format!(
                "every coefficient row needs {} entries",
                basis.len()
            )));
        }
        if coeffs.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("non-finite coefficient".into()));
        }
        Ok(Self {
            basis,
            coeffs,
            nodes: 0,
            seed: 0,
            episodes: 0,
        })
    }

    pub fn basis(&self) -> &ChebyshevBasis {
        &self.basis
    }

    pub fn horizon(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &[Vec<f64>] {
        &self.coeffs
    }

    /// Coefficients of period `t`; `None` past the horizon.
    pub fn row(&self, t: usize) -> Option<&[f64]> {
        t.checked_sub(1)
            .and_then(|i| self.coeffs.get(i))
            .map(Vec::as_slice)
    }

    /// `Ṽ^t(s)`.
    pub fn value(&self, t: usize, s: f64) -> Result<f64> {
        match self.row(t) {
            Some(r) => self.basis.eval(r, s),
            None => Ok(0.0),
        }
    }

    /// `dṼ^t/ds`.
    pub fn derivative(&self, t: usize, s: f64) -> Result<f64> {
        match self.row(t) {
            Some(r) => self.basis.derivative(r, s),
            None => Ok(0.0),
        }
    }

    /// `δ Ṽ^{t+1}`, the continuation faced when deciding in period `t`.
    pub fn continuation(&self, t: usize, discount: f64) -> Continuation {
        match self.row(t + 1) {
            Some(r) => Continuation::new(self.basis, r, discount),
            None => Continuation::zero(),
        }
    }

    pub fn to_file(&self, market: Option<&MarketConfig>) -> ValueApproxFile {
        ValueApproxFile {
            version: FILE_VERSION,
            kind: FILE_KIND.into(),
            horizon: self.horizon(),
            degree: self.basis.degree(),
            stock_cap: self.basis.stock_cap(),
            coeffs: self.coeffs.clone(),
            nodes: self.nodes,
            seed: self.seed,
            episodes: self.episodes,
            market: market.cloned(),
        }
    }

    pub fn to_json(&self, market: Option<&MarketConfig>) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file(market))?)
    }

    /// Parses a file written by [`ValueApprox::to_json`], returning the embedded market too.
    pub fn from_json(text: &str) -> Result<(Self, Option<MarketConfig>)> {
        let file: ValueApproxFile = serde_json::from_str(text)?;
        file.into_approx()
    }
}

/// On-disk form of a [`ValueApprox`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueApproxFile {
    pub version: u32,
    pub kind: String,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub degree: usize,
    #[serde(rename = "Q_bar")]
    pub stock_cap: f64,
    pub coeffs: Vec<Vec<f64>>,
    #[serde(default)]
    pub nodes: usize,
    pub seed: u64,
    pub episodes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub market: Option<MarketConfig>,
}

impl ValueApproxFile {
    pub fn into_approx(self) -> Result<(ValueApprox, Option<MarketConfig>)> {
        if self.version != FILE_VERSION {
            return Err(Error::Version {
                found: self.version,
                expected: FILE_VERSION,
            });
        }
        if self.kind != FILE_KIND {
            return Err(Error::InvalidInput(format!(
                "expected a {FILE_KIND} file, found {}",
                self.kind
            )));
        }
        if self.coeffs.len() != self.horizon {
            return Err(Error::InvalidInput(format!(
                "T = {} but {} coefficient rows",
                self.horizon,
                self.coeffs.len()
            )));
        }
        let basis = ChebyshevBasis::new(self.degree, self.stock_cap)?;
        let mut approx = ValueApprox::from_coeffs(basis, self.coeffs)?;
        approx.nodes = self.nodes;
        approx.seed = self.seed;
        approx.episodes = self.episodes;
        Ok((approx, self.market))
    }
}

/// Regression settings: `m` nodes, degree `n` (so `n + 1` basis functions).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub nodes: usize,
    pub degree: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            nodes: 10,
            degree: 4,
            episodes: 10_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub approx: ValueApprox,
    pub node_set: NodeSet,
    /// Running-mean targets `V^t(s_k)`, indexed `[t - 1][k]`.
    pub node_values: Vec<Vec<f64>>,
    /// Max absolute regression residual per period.
    pub residuals: Vec<f64>,
}

impl FitOutcome {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }
}

/// Monte Carlo regression with freshly sampled profiles (one stream per episode and period).
pub fn fit_mc(spec: &MarketSpec, cfg: &FitConfig) -> Result<FitOutcome> {
    let horizon = spec.horizon() as u64;
    fit_with_source(spec, cfg, |e, t| {
        let mut g = rng::stream(cfg.seed, e as u64 * horizon + (t as u64 - 1));
        rank(&spec.sample_profile(&mut g), spec)
    })
}

/// Monte Carlo regression where episode `e` in period `t` sees `profiles[t - 1][e]`.
/// `cfg.episodes` is ignored in favour of the shortest per-period list.
pub fn fit_mc_with_profiles(
    spec: &MarketSpec,
    cfg: &FitConfig,
    profiles: &[Vec<TypeProfile>],
) -> Result<FitOutcome> {
    if profiles.len() != spec.horizon() {
        return Err(Error::InvalidInput(format!(
            "need one profile list per period ({} given for T = {})",
            profiles.len(),
            spec.horizon()
        )));
    }
    let ranked: Vec<Vec<RankedProfile>> = profiles
        .iter()
        .map(|ps| ps.iter().map(|p| rank(p, spec)).collect())
        .collect::<Result<_>>()?;
    let episodes = ranked.iter().map(Vec::len).min().unwrap_or(0);
    let cfg = FitConfig { episodes, ..*cfg };
    fit_with_source(spec, &cfg, |e, t| Ok(ranked[t - 1][e].clone()))
}

fn fit_with_source<F>(spec: &MarketSpec, cfg: &FitConfig, mut source: F) -> Result<FitOutcome>
where
    F: FnMut(usize, usize) -> Result<RankedProfile>,
{
    if cfg.episodes == 0 {
        return Err(Error::InvalidInput("need at least one episode".into()));
    }
    if cfg.degree + 1 > cfg.nodes {
        return Err(Error::InvalidInput(format!(
            "{} basis functions need at least as many nodes (got {})",
            cfg.degree + 1,
            cfg.nodes
        )));
    }
    let horizon = spec.horizon();
    let delta = spec.discount();
    let basis = ChebyshevBasis::new(cfg.degree, spec.stock())?;
    let node_set = chebyshev_nodes(cfg.nodes, spec.stock())?;
    let projector = Projector::new(basis, &node_set)?;

    let mut approx = ValueApprox::zeros(horizon, basis);
    let mut node_values = vec![vec![0.0; cfg.nodes]; horizon];

    for e in 0..cfg.episodes {
        let weight = 1.0 / (e + 1) as f64;
        for t in (1..=horizon).rev() {
            let ranked = source(e, t)?;
            let cont = approx.continuation(t, delta);
            let fresh = exec::map_range(cfg.nodes, |k| {
                let s = node_set.nodes[k];
                let mp = MarginalProfile::new(&ranked, &cont, s);
                mp.objective(mp.optimal_x())
            });
            let row = &mut node_values[t - 1];
            for (v, new) in row.iter_mut().zip(fresh) {
                *v = (1.0 - weight) * *v + weight * new;
            }
            approx.coeffs[t - 1] = projector.fit(row);
        }
    }

    let residuals = approx
        .coeffs
        .iter()
        .zip(&node_values)
        .map(|(c, v)| projector.residual(c, v))
        .collect();
    approx.nodes = cfg.nodes;
    approx.seed = cfg.seed;
    approx.episodes = cfg.episodes;
    Ok(FitOutcome {
        approx,
        node_set,
        node_values,
        residuals,
    })
}

/// Value function on a uniform stock grid, `values[t - 1][k]` at `grid[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DpTable {
    pub grid: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl DpTable {
    pub fn horizon(&self) -> usize {
        self.values.len()
    }

    /// Linear interpolation of period `t` at stock `s`; zero past the horizon.
    pub fn value(&self, t: usize, s: f64) -> f64 {
        match t.checked_sub(1).and_then(|i| self.values.get(i)) {
            Some(row) => interp_uniform(&self.grid, row, s),
            None => 0.0,
        }
    }
}

fn interp_uniform(grid: &[f64], row: &[f64], s: f64) -> f64 {
    let n = grid.len();
    if n == 1 {
        return row[0];
    }
    let h = grid[n - 1] / (n - 1) as f64;
    let pos = (s / h).clamp(0.0, (n - 1) as f64);
    let i = (pos.floor() as usize).min(n - 2);
    let w = pos - i as f64;
    (1.0 - w) * row[i] + w * row[i + 1]
}

/// Backward induction with the expectation replaced by the mean over `samples[t - 1]`.
///
/// The next-period value is linear between stock grid points and the revenue is linear
/// between cumulative-demand breakpoints, so the objective is piecewise linear in `x` and
/// the maximum is taken exactly over those kinks plus `action_grid` evenly spaced actions.
pub fn exact_dp_oracle(
    spec: &MarketSpec,
    stock_grid: usize,
    action_grid: usize,
    samples: &[Vec<TypeProfile>],
) -> Result<DpTable> {
    let horizon = spec.horizon();
    for (what, got, limit) in [
        ("stock grid", stock_grid, DP_MAX_GRID),
        ("action grid", action_grid, DP_MAX_GRID),
        ("horizon", horizon, DP_MAX_HORIZON),
    ] {
        if got > limit {
            return Err(Error::SizeCap { what, limit, got });
        }
    }
    if stock_grid < 2 {
        return Err(Error::InvalidInput("stock grid needs at least two points".into()));
    }
    if samples.len() != horizon || samples.iter().any(Vec::is_empty) {
        return Err(Error::InvalidInput(
            "need a non-empty profile sample for every period".into(),
        ));
    }
    let cap = spec.stock();
    let delta = spec.discount();
    let grid: Vec<f64> = (0..stock_grid)
        .map(|k| cap * k as f64 / (stock_grid - 1) as f64)
        .collect();
    let actions: Vec<f64> = match action_grid {
        0 => Vec::new(),
        1 => vec![0.0],
        a => (0..a).map(|j| cap * j as f64 / (a - 1) as f64).collect(),
    };

    let mut values = vec![vec![0.0; stock_grid]; horizon];
    let mut next = vec![0.0; stock_grid];
    for t in (1..=horizon).rev() {
        let ranked: Vec<RankedProfile> = samples[t - 1]
            .iter()
            .map(|p| rank(p, spec))
            .collect::<Result<_>>()?;
        let row = exec::map_range(stock_grid, |k| {
            let s = grid[k];
            let total: f64 = ranked
                .iter()
                .map(|r| {
                    let objective =
                        |x: f64| periodic_revenue(r, x) + delta * interp_uniform(&grid, &next, s - x);
                    let kinks = grid[..=k].iter().map(|g| s - g);
                    let breaks = r.cum_demand().iter().copied().filter(|&c| c <= s);
                    let extra = actions.iter().copied().filter(|&x| x <= s);
                    kinks
                        .chain(breaks)
                        .chain(extra)
                        .map(|x| objective(x.clamp(0.0, s)))
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .sum();
            total / ranked.len() as f64
        });
        values[t - 1] = row.clone();
        next = row;
    }
    Ok(DpTable { grid, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{ArrivalDist, BuyerType, QuantityDist, ValueDist};

    fn single_buyer_spec(horizon: usize, stock: f64, discount: f64) -> MarketSpec {
        let mut cfg = MarketConfig::table1(horizon, stock);
        cfg.discount = discount;
        cfg.arrivals = ArrivalDist::Tabulated { pmf: vec![1.0] };
        cfg.quantity = QuantityDist::Fixed { quantity: 1.0 };
        cfg.value = ValueDist::Fixed { value: 2.0 };
        MarketSpec::new(cfg).unwrap()
    }

    #[test]
    fn boundary_row_is_zero() {
        let b = ChebyshevBasis::new(4, 10.0).unwrap();
        let v = ValueApprox::zeros(3, b);
        assert_eq!(v.value(4, 5.0).unwrap(), 0.0);
        assert_eq!(v.value(1, 5.0).unwrap(), 0.0);
        assert!(v.continuation(3, 0.99).is_zero());
    }

    #[test]
    fn single_deterministic_buyer_fits_exactly() {
        // one buyer (v, q) = (2, 1) with φ = 2 every period: V^1(s) = 2 min(s, 1)
        let spec = single_buyer_spec(1, 2.0, 0.99);
        let cfg = FitConfig {
            nodes: 3,
            degree: 2,
            episodes: 1,
            seed: 7,
        };
        let out = fit_mc(&spec, &cfg).unwrap();
        for (s, v) in out.node_set.nodes.iter().zip(&out.node_values[0]) {
            assert!((v - 2.0 * s.min(1.0)).abs() < 1e-12);
        }
        assert!(out.max_residual() < 1e-8);
    }

    #[test]
    fn fit_is_reproducible() {
        let spec = MarketSpec::table1(3, 3.0);
        let cfg = FitConfig {
            nodes: 5,
            degree: 4,
            episodes: 30,
            seed: 11,
        };
        let a = fit_mc(&spec, &cfg).unwrap();
        let b = fit_mc(&spec, &cfg).unwrap();
        assert_eq!(a.approx, b.approx);
        assert!(fit_mc(&spec, &FitConfig { nodes: 4, ..cfg }).is_err());
    }

    #[test]
    fn json_round_trip() {
        let spec = MarketSpec::table1(2, 2.0);
        let cfg = FitConfig {
            nodes: 5,
            degree: 4,
            episodes: 5,
            seed: 3,
        };
        let approx = fit_mc(&spec, &cfg).unwrap().approx;
        let text = approx.to_json(Some(spec.config())).unwrap();
        let (back, market) = ValueApprox::from_json(&text).unwrap();
        assert_eq!(back, approx);
        assert_eq!(market.as_ref(), Some(spec.config()));
        let bumped = text.replace("\"version\": 1", "\"version\": 9");
        assert!(matches!(
            ValueApprox::from_json(&bumped),
            Err(Error::Version { found: 9, .. })
        ));
    }

    #[test]
    fn dp_single_period_matches_closed_form() {
        let spec = MarketSpec::table1(1, 4.0);
        let mut g = rng::stream(5, 0);
        let samples = vec![(0..50).map(|_| spec.sample_profile(&mut g)).collect::<Vec<_>>()];
        let table = exact_dp_oracle(&spec, 21, 0, &samples).unwrap();
        for (k, &s) in table.grid.iter().enumerate() {
            let closed: f64 = samples[0]
                .iter()
                .map(|p| {
                    let r = rank(p, &spec).unwrap();
                    periodic_revenue(&r, s.min(r.positive_demand()))
                })
                .sum::<f64>()
                / 50.0;
            assert!((table.values[0][k] - closed).abs() < 1e-9);
        }
    }

    #[test]
    fn dp_without_discount_is_myopic_sum() {
        let spec = single_buyer_spec(3, 5.0, 0.0);
        let samples = vec![vec![TypeProfile::new(&[BuyerType::new(2.0, 1.0)], 1).unwrap()]; 3];
        let table = exact_dp_oracle(&spec, 11, 0, &samples).unwrap();
        assert!((table.value(1, 5.0) - 2.0).abs() < 1e-12);
        let undiscounted = exact_dp_oracle(&single_buyer_spec(3, 5.0, 1.0), 11, 0, &samples).unwrap();
        assert!((undiscounted.value(1, 5.0) - 6.0).abs() < 1e-12);
        assert!((undiscounted.value(1, 2.0) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn dp_size_caps() {
        let spec = MarketSpec::table1(6, 4.0);
        let samples = vec![Vec::new(); 6];
        assert!(matches!(
            exact_dp_oracle(&spec, 10, 10, &samples),
            Err(Error::SizeCap { what: "horizon", .. })
        ));
        let spec = MarketSpec::table1(2, 4.0);
        assert!(matches!(
            exact_dp_oracle(&spec, 201, 10, &samples),
            Err(Error::SizeCap { what: "stock grid", .. })
        ));
    }
}
