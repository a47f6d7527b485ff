//! Market model: buyer types, the environment and virtual valuations.

mod dist;

use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use dist::{ArrivalDist, QuantityDist, ValueDist, DENSITY_FLOOR};

use crate::{Error, Result};

/// Slack allowed on forward differences of the virtual valuation.
pub const REGULARITY_TOLERANCE: f64 = 1e-9;

/// Grid resolution used for the cached regularity check.
const REGULARITY_GRID: usize = 64;

/// One buyer's private type: marginal value per unit and demanded quantity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuyerType {
    pub value: f64,
    pub quantity: f64,
}

impl BuyerType {
    /// Placeholder for a buyer slot with no arrival.
    pub const DUMMY: BuyerType = BuyerType {
        value: 0.0,
        quantity: 0.0,
    };

    pub const fn new(value: f64, quantity: f64) -> Self {
        Self { value, quantity }
    }

    pub fn is_dummy(&self) -> bool {
        self.value == 0.0 && self.quantity == 0.0
    }
}

/// Length-`N` vector of buyer types for one period. Slots at or beyond `arrivals`
/// hold the dummy type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeProfile {
    entries: Vec<BuyerType>,
    arrivals: usize,
}

impl TypeProfile {
    /// Pads `buyers` with dummies up to `slots`.
    pub fn new(buyers: &[BuyerType], slots: usize) -> Result<Self> {
        if buyers.len() > slots {
            return Err(Error::InvalidInput(format!(
                "{} arrivals do not fit in {slots} slots",
                buyers.len()
            )));
        }
        if buyers
            .iter()
            .any(|b| !(b.value >= 0.0) || !(b.quantity >= 0.0))
        {
            return Err(Error::InvalidInput(
                "buyer types must be nonnegative".into(),
            ));
        }
        let mut entries = buyers.to_vec();
        entries.resize(slots, BuyerType::DUMMY);
        Ok(Self {
            entries,
            arrivals: buyers.len(),
        })
    }

    pub fn entries(&self) -> &[BuyerType] {
        &self.entries
    }

    pub fn arrived(&self) -> &[BuyerType] {
        &self.entries[..self.arrivals]
    }

    pub fn arrivals(&self) -> usize {
        self.arrivals
    }

    pub fn slots(&self) -> usize {
        self.entries.len()
    }

    /// Copy with slot `index` replaced. Replacing a dummy slot leaves `arrivals` unchanged,
    /// so a non-arrived slot never takes part in the allocation.
    pub fn with_type(&self, index: usize, buyer: BuyerType) -> Self {
        let mut out = self.clone();
        out.entries[index] = buyer;
        out
    }

    /// Total demanded quantity of arrived buyers.
    pub fn total_demand(&self) -> f64 {
        self.arrived().iter().map(|b| b.quantity).sum()
    }
}

/// Declarative description of the environment; turned into a validated [`MarketSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketConfig {
    pub horizon: usize,
    pub stock: f64,
    pub discount: f64,
    pub arrivals: ArrivalDist,
    pub quantity: QuantityDist,
    pub value: ValueDist,
    /// Upper value bound used by the penalty. Defaults to the `cap_quantile` conditional
    /// quantile at the lowest quantity plus `cap_epsilon`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_cap: Option<f64>,
    #[serde(default = "default_cap_quantile")]
    pub cap_quantile: f64,
    #[serde(default = "default_cap_epsilon")]
    pub cap_epsilon: f64,
}

fn default_cap_quantile() -> f64 {
    0.9999
}

fn default_cap_epsilon() -> f64 {
    0.1
}

impl MarketConfig {
    /// The experimental environment: truncated Poisson(10) arrivals on `{1..30}`,
    /// Uniform(0, 2) quantities, Exponential(rate = q) values, discount 0.99.
    pub fn table1(horizon: usize, stock: f64) -> Self {
        Self {
            horizon,
            stock,
            discount: 0.99,
            arrivals: ArrivalDist::TruncatedPoisson {
                lambda: 10.0,
                max_arrivals: 30,
            },
            quantity: QuantityDist::Uniform { upper: 2.0 },
            value: ValueDist::Exponential,
            value_cap: None,
            cap_quantile: default_cap_quantile(),
            cap_epsilon: default_cap_epsilon(),
        }
    }
}

/// Immutable, validated market environment.
#[derive(Debug)]
pub struct MarketSpec {
    config: MarketConfig,
    arrival_cdf: Vec<f64>,
    value_cap: f64,
    regularity: OnceLock<RegularityReport>,
}

impl Clone for MarketSpec {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            arrival_cdf: self.arrival_cdf.clone(),
            value_cap: self.value_cap,
            regularity: OnceLock::new(),
        }
    }
}

impl MarketSpec {
    pub fn new(config: MarketConfig) -> Result<Self> {
        if config.horizon == 0 {
            return Err(Error::InvalidSpec("horizon must be at least 1".into()));
        }
        if !(config.stock > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "stock must be positive (got {})",
                config.stock
            )));
        }
        if !(config.discount > 0.0 && config.discount <= 1.0) && config.discount != 0.0 {
            return Err(Error::InvalidSpec(format!(
                "discount must lie in [0, 1] (got {})",
                config.discount
            )));
        }
        let pmf = config.arrivals.pmf()?;
        config.quantity.validate()?;
        config.value.validate()?;
        if !(config.cap_quantile > 0.0 && config.cap_quantile < 1.0) {
            return Err(Error::InvalidSpec("cap_quantile must lie in (0, 1)".into()));
        }
        let mut arrival_cdf = Vec::with_capacity(pmf.len());
        let mut acc = 0.0;
        for p in pmf {
            acc += p;
            arrival_cdf.push(acc);
        }
        *arrival_cdf.last_mut().unwrap() = 1.0;

        let value_cap = match config.value_cap {
            Some(cap) if cap > 0.0 => cap,
            Some(cap) => {
                return Err(Error::InvalidSpec(format!(
                    "value_cap must be positive (got {cap})"
                )))
            }
            None => {
                let q = config.quantity.lower() + config.cap_epsilon;
                let cap = config.value.quantile(config.cap_quantile, q);
                match config.value.support_upper() {
                    Some(hi) => cap.min(hi).max(f64::MIN_POSITIVE),
                    None => cap,
                }
            }
        };

        Ok(Self {
            config,
            arrival_cdf,
            value_cap,
            regularity: OnceLock::new(),
        })
    }

    pub fn table1(horizon: usize, stock: f64) -> Self {
        Self::new(MarketConfig::table1(horizon, stock)).expect("built-in environment is valid")
    }

    pub fn config(&self) -> &MarketConfig {
        &self.config
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn stock(&self) -> f64 {
        self.config.stock
    }

    pub fn discount(&self) -> f64 {
        self.config.discount
    }

    /// `N`, the number of buyer slots per period.
    pub fn max_arrivals(&self) -> usize {
        self.arrival_cdf.len()
    }

    /// `v̄`, the value bound used by the penalty.
    pub fn value_cap(&self) -> f64 {
        self.value_cap
    }

    pub fn quantity_cap(&self) -> f64 {
        self.config.quantity.upper()
    }

    pub fn arrival_pmf(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.arrival_cdf
            .iter()
            .map(|&c| {
                let p = c - prev;
                prev = c;
                p
            })
            .collect()
    }

    pub fn quantity_dist(&self) -> &QuantityDist {
        &self.config.quantity
    }

    pub fn value_dist(&self) -> &ValueDist {
        &self.config.value
    }

    /// Same environment with a different horizon and stock.
    pub fn rescaled(&self, horizon: usize, stock: f64) -> Result<Self> {
        let mut config = self.config.clone();
        config.horizon = horizon;
        config.stock = stock;
        Self::new(config)
    }

    pub fn sample_arrivals<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.arrival_cdf.partition_point(|&c| c < u).min(self.arrival_cdf.len() - 1) + 1
    }

    pub fn sample_buyer<R: Rng + ?Sized>(&self, rng: &mut R) -> BuyerType {
        let quantity = self.config.quantity.sample(rng);
        let value = self.config.value.sample(quantity, rng);
        BuyerType { value, quantity }
    }

    /// Draws the arrival count, then each arriving type independently; other slots are dummies.
    pub fn sample_profile<R: Rng + ?Sized>(&self, rng: &mut R) -> TypeProfile {
        let n = self.sample_arrivals(rng);
        let mut entries = Vec::with_capacity(self.max_arrivals());
        for _ in 0..n {
            entries.push(self.sample_buyer(rng));
        }
        entries.resize(self.max_arrivals(), BuyerType::DUMMY);
        TypeProfile {
            entries,
            arrivals: n,
        }
    }

    /// Profile with `buyer` in slot 0 and freshly drawn rivals; the arrival count is drawn
    /// from the arrival law and the buyer always counts as one of the arrivals.
    pub fn sample_rivals_with<R: Rng + ?Sized>(&self, buyer: BuyerType, rng: &mut R) -> TypeProfile {
        let n = self.sample_arrivals(rng);
        let mut entries = Vec::with_capacity(self.max_arrivals());
        entries.push(buyer);
        for _ in 1..n {
            entries.push(self.sample_buyer(rng));
        }
        entries.resize(self.max_arrivals(), BuyerType::DUMMY);
        TypeProfile {
            entries,
            arrivals: n,
        }
    }

    /// `φ(v, q) = v − (1 − F(v|q)) / f(v|q)`.
    pub fn virtual_value(&self, value: f64, quantity: f64) -> Result<f64> {
        Ok(value - self.config.value.inverse_hazard(value, quantity)?)
    }

    /// Scans `φ` on a `grid_v × grid_q` grid and reports the most negative forward difference.
    pub fn check_regularity(&self, grid_v: usize, grid_q: usize) -> RegularityReport {
        let vs = linspace(0.0, self.value_cap, grid_v);
        let q_lo = self.config.quantity.lower();
        let q_hi = self.config.quantity.upper();
        let qs: Vec<f64> = if grid_q == 0 {
            Vec::new()
        } else if q_hi <= q_lo {
            vec![q_hi]
        } else if q_lo == 0.0 {
            // φ is undefined at q = 0 for families whose hazard scales with q
            (1..=grid_q).map(|j| q_hi * j as f64 / grid_q as f64).collect()
        } else {
            linspace(q_lo, q_hi, grid_q)
        };
        let phi: Vec<Vec<Option<f64>>> = qs
            .iter()
            .map(|&q| vs.iter().map(|&v| self.virtual_value(v, q).ok()).collect())
            .collect();

        let mut report = RegularityReport {
            holds: true,
            worst_violation: 0.0,
            location: None,
            evaluated: phi.iter().flatten().filter(|p| p.is_some()).count(),
        };
        let mut consider = |diff: f64, v: f64, q: f64, axis: Axis| {
            if diff < report.worst_violation {
                report.worst_violation = diff;
                report.location = Some(Violation { value: v, quantity: q, axis });
            }
        };
        for (j, row) in phi.iter().enumerate() {
            for k in 0..row.len() {
                if let Some(here) = row[k] {
                    if let Some(Some(next)) = row.get(k + 1) {
                        consider(next - here, vs[k], qs[j], Axis::Value);
                    }
                    if let Some(Some(next)) = phi.get(j + 1).map(|r| r[k]) {
                        consider(next - here, vs[k], qs[j], Axis::Quantity);
                    }
                }
            }
        }
        report.holds = report.worst_violation >= -REGULARITY_TOLERANCE;
        report
    }

    /// Regularity on the default grid, computed once.
    pub fn regularity(&self) -> &RegularityReport {
        self.regularity
            .get_or_init(|| self.check_regularity(REGULARITY_GRID, REGULARITY_GRID))
    }

    /// Smallest `v >= 0` with `φ(v, q) >= target`, by bisection on the monotone `φ(·, q)`.
    /// Returns 0 when the target is at or below `φ(0, q)`.
    pub fn invert_virtual_value(&self, target: f64, quantity: f64) -> Result<f64> {
        let reg = self.regularity();
        if !reg.holds {
            return Err(Error::NonMonotone {
                worst: reg.worst_violation,
            });
        }
        let phi = |v: f64| self.virtual_value(v, quantity);
        if target <= phi(0.0)? {
            return Ok(0.0);
        }
        let support = self.config.value.support_upper();
        let mut hi = support.unwrap_or(self.value_cap).max(1.0);
        while phi(hi)? < target {
            if support.is_some() {
                return Err(Error::Domain {
                    value: target,
                    lo: phi(0.0)?,
                    hi: phi(hi)?,
                });
            }
            hi *= 2.0;
            if !hi.is_finite() {
                return Err(Error::Domain {
                    value: target,
                    lo: phi(0.0)?,
                    hi: f64::INFINITY,
                });
            }
        }
        let mut lo = 0.0;
        while hi - lo > 1e-14 * hi.max(1.0) {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if phi(mid)? < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Value,
    Quantity,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Violation {
    pub value: f64,
    pub quantity: f64,
    pub axis: Axis,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegularityReport {
    pub holds: bool,
    /// Most negative forward difference found (0 if none).
    pub worst_violation: f64,
    pub location: Option<Violation>,
    /// Grid points where `φ` was defined.
    pub evaluated: usize,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn degenerate() -> MarketSpec {
        MarketSpec::new(MarketConfig {
            horizon: 1,
            stock: 5.0,
            discount: 1.0,
            arrivals: ArrivalDist::Tabulated { pmf: vec![1.0] },
            quantity: QuantityDist::Fixed { quantity: 1.0 },
            value: ValueDist::Fixed { value: 2.0 },
            value_cap: None,
            cap_quantile: 0.9999,
            cap_epsilon: 0.1,
        })
        .unwrap()
    }

    #[test]
    fn degenerate_profile() {
        let spec = degenerate();
        let p = spec.sample_profile(&mut rng::stream(1, 0));
        assert_eq!(p.arrivals(), 1);
        assert_eq!(p.entries(), &[BuyerType::new(2.0, 1.0)]);
    }

    #[test]
    fn dummies_fill_unarrived_slots() {
        let spec = MarketSpec::table1(10, 10.0);
        let mut r = rng::stream(3, 0);
        for _ in 0..200 {
            let p = spec.sample_profile(&mut r);
            assert_eq!(p.slots(), 30);
            assert!(p.arrivals() >= 1);
            assert!(p.entries()[p.arrivals()..].iter().all(BuyerType::is_dummy));
        }
    }

    #[test]
    fn exponential_virtual_values() {
        let spec = MarketSpec::table1(10, 10.0);
        assert!((spec.virtual_value(2.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(spec.virtual_value(0.5, 2.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn fully_massed_value_has_no_hazard_term() {
        let spec = degenerate();
        assert_eq!(spec.virtual_value(2.0, 1.0).unwrap(), 2.0);
        assert_eq!(spec.virtual_value(3.5, 1.0).unwrap(), 3.5);
        assert!(matches!(
            spec.virtual_value(1.0, 1.0),
            Err(Error::DensityZero { .. })
        ));
    }

    #[test]
    fn exponential_family_is_regular() {
        let spec = MarketSpec::table1(10, 10.0);
        let r = spec.check_regularity(50, 50);
        assert!(r.holds);
        assert_eq!(r.worst_violation, 0.0);
        let single = spec.check_regularity(1, 1);
        assert!(single.holds);
        assert!(single.location.is_none());
    }

    #[test]
    fn bimodal_tabulated_family_violates_regularity() {
        // density mass near 1 and near 4 with a near-empty gap between: hazard jumps
        let values = vec![0.0, 0.5, 1.5, 3.5, 4.5, 5.0];
        let cdf = vec![0.0, 0.02, 0.49, 0.51, 0.98, 1.0];
        let mut config = MarketConfig::table1(1, 1.0);
        config.value = ValueDist::Tabulated {
            quantities: vec![0.0, 2.0],
            values: values.clone(),
            cdf: vec![cdf.clone(), cdf],
        };
        let spec = MarketSpec::new(config).unwrap();
        let r = spec.check_regularity(200, 5);
        assert!(!r.holds);
        let loc = r.location.unwrap();
        assert_eq!(loc.axis, Axis::Value);
        assert!(loc.value > 1.0 && loc.value < 4.0, "violation at {loc:?}");
        assert!(matches!(
            spec.invert_virtual_value(1.0, 1.0),
            Err(Error::NonMonotone { .. })
        ));
    }

    #[test]
    fn inversion_of_exponential_virtual_value() {
        let spec = MarketSpec::table1(10, 10.0);
        assert!((spec.invert_virtual_value(1.0, 1.0).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(spec.invert_virtual_value(-5.0, 1.0).unwrap(), 0.0);
        // far above the cap: the bracket grows for the unbounded family
        let v = spec.invert_virtual_value(500.0, 0.5).unwrap();
        assert!((v - 502.0).abs() < 1e-9);
    }

    #[test]
    fn default_value_cap_is_conditional_quantile() {
        let spec = MarketSpec::table1(10, 10.0);
        let expected = -(1.0f64 - 0.9999).ln() / 0.1;
        assert!((spec.value_cap() - expected).abs() < 1e-9);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = MarketConfig::table1(0, 10.0);
        assert!(MarketSpec::new(c.clone()).is_err());
        c.horizon = 3;
        c.stock = 0.0;
        assert!(MarketSpec::new(c.clone()).is_err());
        c.stock = 1.0;
        c.discount = 1.5;
        assert!(MarketSpec::new(c).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = MarketConfig::table1(30, 30.0);
        let text = toml::to_string(&c).unwrap();
        assert!(text.contains("truncated-poisson"));
        let back: MarketConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }
}
