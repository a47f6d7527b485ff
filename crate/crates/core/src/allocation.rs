//! Within-period allocation: buyers ranked by virtual value, filled greedily.
//!
//! For a chosen sell quantity `x`, the revenue-maximizing split of `x` among the period's
//! buyers fills demand in descending order of virtual value. The maximized virtual surplus
//! `R(θ, x)` is piecewise linear, nondecreasing while virtual values are positive, and concave.

use itertools::Itertools;

use crate::market::{MarketSpec, TypeProfile};
use crate::{Error, Result};

/// Arrival count above which [`lp_oracle`] refuses to enumerate.
pub const LP_ORACLE_MAX_BUYERS: usize = 8;

/// Arrived buyers with positive demand, sorted by virtual value descending
/// (ties keep the original slot order). Zero-quantity buyers and dummies never receive
/// units and are left out.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedProfile {
    order: Vec<usize>,
    phis: Vec<f64>,
    quantities: Vec<f64>,
    /// `cum_demand[k]` = demand of the first `k` ranked buyers; length `len() + 1`.
    cum_demand: Vec<f64>,
    /// `cum_value[k]` = Σ φ·q over the first `k` ranked buyers.
    cum_value: Vec<f64>,
    slots: usize,
}

impl RankedProfile {
    /// Builds the ranking from `(slot, φ, q)` triples.
    pub fn from_entries(mut entries: Vec<(usize, f64, f64)>, slots: usize) -> Result<Self> {
        entries.retain(|e| e.2 > 0.0);
        if entries.iter().any(|e| e.1.is_nan()) {
            return Err(Error::InvalidInput("virtual value is NaN".into()));
        }
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(Self::from_sorted(entries, slots))
    }

    /// `entries` must already be ordered by (φ desc, slot asc) with positive quantities.
    pub(crate) fn from_sorted(entries: Vec<(usize, f64, f64)>, slots: usize) -> Self {
        let n = entries.len();
        let mut order = Vec::with_capacity(n);
        let mut phis = Vec::with_capacity(n);
        let mut quantities = Vec::with_capacity(n);
        let mut cum_demand = Vec::with_capacity(n + 1);
        let mut cum_value = Vec::with_capacity(n + 1);
        cum_demand.push(0.0);
        cum_value.push(0.0);
        for (slot, phi, q) in entries {
            order.push(slot);
            phis.push(phi);
            quantities.push(q);
            cum_demand.push(cum_demand.last().unwrap() + q);
            cum_value.push(cum_value.last().unwrap() + phi * q);
        }
        Self {
            order,
            phis,
            quantities,
            cum_demand,
            cum_value,
            slots,
        }
    }

    /// Ranking with explicit virtual values; slot `k` holds `(phis[k], quantities[k])`.
    pub fn from_phis(phis: &[f64], quantities: &[f64]) -> Result<Self> {
        if phis.len() != quantities.len() {
            return Err(Error::InvalidInput(
                "phis and quantities differ in length".into(),
            ));
        }
        let entries = phis
            .iter()
            .zip(quantities)
            .enumerate()
            .map(|(i, (&p, &q))| (i, p, q))
            .collect();
        Self::from_entries(entries, phis.len())
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Original slot of each ranked buyer.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn phis(&self) -> &[f64] {
        &self.phis
    }

    pub fn quantities(&self) -> &[f64] {
        &self.quantities
    }

    pub fn cum_demand(&self) -> &[f64] {
        &self.cum_demand
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn total_demand(&self) -> f64 {
        *self.cum_demand.last().unwrap()
    }

    /// Demand of buyers with strictly positive virtual value.
    pub fn positive_demand(&self) -> f64 {
        let k = self.phis.partition_point(|&p| p > 0.0);
        self.cum_demand[k]
    }
}

/// Virtual values of the arrived buyers, ranked.
pub fn rank(profile: &TypeProfile, spec: &MarketSpec) -> Result<RankedProfile> {
    let entries = profile
        .arrived()
        .iter()
        .enumerate()
        .filter(|(_, b)| b.quantity > 0.0)
        .map(|(i, b)| Ok((i, spec.virtual_value(b.value, b.quantity)?, b.quantity)))
        .collect::<Result<Vec<_>>>()?;
    RankedProfile::from_entries(entries, profile.slots())
}

/// `i*`: number of leading ranked buyers whose cumulative demand fits within `x`.
pub fn boundary_index(ranked: &RankedProfile, x: f64) -> usize {
    // cum_demand[0] = 0 <= x always for x >= 0
    ranked.cum_demand.partition_point(|&c| c <= x).saturating_sub(1)
}

/// Units per slot and total units sold.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodAllocation {
    pub per_buyer: Vec<f64>,
    pub sold: f64,
}

/// Full demand for the first `i*` ranked buyers, the residual to the next one, zero beyond.
/// Selling more than total demand serves everyone in full.
pub fn allocate_x(ranked: &RankedProfile, x: f64) -> PeriodAllocation {
    let mut per_buyer = vec![0.0; ranked.slots];
    let x = x.max(0.0);
    let istar = boundary_index(ranked, x);
    for k in 0..istar {
        per_buyer[ranked.order[k]] = ranked.quantities[k];
    }
    if istar < ranked.len() {
        per_buyer[ranked.order[istar]] = x - ranked.cum_demand[istar];
    }
    let sold = x.min(ranked.total_demand());
    debug_assert!(per_buyer.iter().all(|&a| a >= 0.0));
    PeriodAllocation { per_buyer, sold }
}

/// Allocation of the ranked buyer at position `rank`.
pub(crate) fn allocation_at_rank(ranked: &RankedProfile, x: f64, rank: usize) -> f64 {
    let start = ranked.cum_demand[rank];
    (x - start).clamp(0.0, ranked.quantities[rank])
}

/// `R(θ, x) = Σ_{j ≤ i*} φ_[j] q_[j] + φ_[i*+1] (x − Σ_{j ≤ i*} q_[j])`.
pub fn periodic_revenue(ranked: &RankedProfile, x: f64) -> f64 {
    let x = x.max(0.0);
    let istar = boundary_index(ranked, x);
    let mut r = ranked.cum_value[istar];
    if istar < ranked.len() {
        r += ranked.phis[istar] * (x - ranked.cum_demand[istar]);
    }
    r
}

/// `max Σ φ_i a_i  s.t.  0 ≤ a_i ≤ q_i, Σ a_i = min(x, Σ q_i)` by enumerating every fill
/// order of the arrived buyers; the optimum of the box-constrained LP is a greedy fill
/// under some order.
pub fn lp_oracle(profile: &TypeProfile, spec: &MarketSpec, x: f64) -> Result<f64> {
    let n = profile.arrivals();
    if n > LP_ORACLE_MAX_BUYERS {
        return Err(Error::SizeCap {
            what: "arrivals",
            limit: LP_ORACLE_MAX_BUYERS,
            got: n,
        });
    }
    let buyers = profile
        .arrived()
        .iter()
        .filter(|b| b.quantity > 0.0)
        .map(|b| Ok((spec.virtual_value(b.value, b.quantity)?, b.quantity)))
        .collect::<Result<Vec<_>>>()?;
    Ok(lp_oracle_phis(&buyers, x))
}

/// [`lp_oracle`] on explicit `(φ, q)` pairs.
pub fn lp_oracle_phis(buyers: &[(f64, f64)], x: f64) -> f64 {
    let x = x.max(0.0);
    if buyers.is_empty() || x == 0.0 {
        return 0.0;
    }
    buyers
        .iter()
        .permutations(buyers.len())
        .map(|perm| {
            let mut left = x;
            let mut value = 0.0;
            for &&(phi, q) in &perm {
                let a = left.min(q);
                value += phi * a;
                left -= a;
                if left <= 0.0 {
                    break;
                }
            }
            value
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Dual objective `Σ q_i max(0, φ_i − μ) + x μ`.
pub fn dual_objective(buyers: &[(f64, f64)], x: f64, mu: f64) -> f64 {
    buyers
        .iter()
        .map(|&(phi, q)| q * (phi - mu).max(0.0))
        .sum::<f64>()
        + x * mu
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::BuyerType;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn empty_profile_ranks_empty() {
        let spec = MarketSpec::table1(1, 1.0);
        let p = TypeProfile::new(&[], 5).unwrap();
        let r = rank(&p, &spec).unwrap();
        assert!(r.is_empty());
        assert_eq!(periodic_revenue(&r, 3.0), 0.0);
        assert_eq!(allocate_x(&r, 3.0).sold, 0.0);
    }

    #[test]
    fn ranks_by_virtual_value() {
        let r = RankedProfile::from_phis(&[0.2, 0.9, 0.5], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(r.order(), &[1, 2, 0]);
    }

    #[test]
    fn ties_keep_slot_order() {
        let r = RankedProfile::from_phis(&[0.5, 0.7, 0.5, 0.5], &[1.0; 4]).unwrap();
        assert_eq!(r.order(), &[1, 0, 2, 3]);
        // same through the market path with duplicated types
        let spec = MarketSpec::table1(1, 1.0);
        let b = BuyerType::new(1.5, 0.8);
        let p = TypeProfile::new(&[b, BuyerType::new(3.0, 1.0), b, b], 6).unwrap();
        assert_eq!(rank(&p, &spec).unwrap().order(), &[1, 0, 2, 3]);
    }

    #[test]
    fn boundary_index_cases() {
        let r = RankedProfile::from_phis(&[3.0, 2.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(boundary_index(&r, 0.0), 0);
        assert_eq!(boundary_index(&r, 2.5), 1);
        assert_eq!(boundary_index(&r, 6.0), 3);
        assert_eq!(boundary_index(&r, 60.0), 3);
    }

    #[test]
    fn allocate_fills_greedily() {
        let r = RankedProfile::from_phis(&[3.0, 2.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        let a = allocate_x(&r, 2.5);
        assert_eq!(a.per_buyer, vec![1.0, 1.5, 0.0]);
        assert_eq!(a.sold, 2.5);
        assert_eq!(allocate_x(&r, 0.0).per_buyer, vec![0.0; 3]);
        let all = allocate_x(&r, 10.0);
        assert_eq!(all.per_buyer, vec![1.0, 2.0, 3.0]);
        assert_eq!(all.sold, 6.0);
    }

    #[test]
    fn revenue_closed_form() {
        let r = RankedProfile::from_phis(&[2.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(periodic_revenue(&r, 0.0), 0.0);
        assert_eq!(periodic_revenue(&r, 1.5), 2.5);
        assert_eq!(lp_oracle_phis(&[(2.0, 1.0), (1.0, 1.0)], 1.5), 2.5);
    }

    #[test]
    fn strong_duality_at_boundary_multiplier() {
        let buyers = [(3.0, 1.0), (2.0, 2.0), (0.5, 3.0)];
        let phis: Vec<f64> = buyers.iter().map(|b| b.0).collect();
        let qs: Vec<f64> = buyers.iter().map(|b| b.1).collect();
        let r = RankedProfile::from_phis(&phis, &qs).unwrap();
        for &x in &[0.5, 1.0, 2.5, 4.0] {
            let istar = boundary_index(&r, x);
            // multiplier = virtual value of the marginal (partially served) buyer
            let mu = r.phis()[istar.min(r.len() - 1)];
            let primal = periodic_revenue(&r, x);
            assert!((primal - dual_objective(&buyers, x, mu)).abs() < 1e-12, "x={x}");
            assert!((primal - lp_oracle_phis(&buyers, x)).abs() < 1e-12);
        }
    }

    #[test]
    fn lp_oracle_size_cap() {
        let spec = MarketSpec::table1(1, 1.0);
        let p = TypeProfile::new(&[BuyerType::new(1.0, 1.0); 9], 30).unwrap();
        assert!(matches!(lp_oracle(&p, &spec, 1.0), Err(Error::SizeCap { .. })));
        let small = TypeProfile::new(&[BuyerType::new(1.0, 1.0); 2], 30).unwrap();
        assert_eq!(lp_oracle(&small, &spec, 0.0).unwrap(), 0.0);
    }

    fn small_instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..7).prop_flat_map(|n| {
            (
                prop::collection::vec(-3.0f64..5.0, n),
                prop::collection::vec(0.01f64..2.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn feasibility_and_monotone_allocation((phis, qs) in small_instance(), x in 0.0f64..8.0, dx in 0.0f64..2.0) {
            let r = RankedProfile::from_phis(&phis, &qs).unwrap();
            let a = allocate_x(&r, x);
            let b = allocate_x(&r, x + dx);
            let total: f64 = a.per_buyer.iter().sum();
            prop_assert!((total - a.sold).abs() < 1e-9);
            prop_assert!(a.sold <= x + 1e-12);
            for (i, &q) in qs.iter().enumerate() {
                prop_assert!(a.per_buyer[i] >= 0.0 && a.per_buyer[i] <= q + 1e-12);
                prop_assert!(b.per_buyer[i] >= a.per_buyer[i] - 1e-12);
            }
        }

        #[test]
        fn revenue_matches_lp((phis, qs) in small_instance(), x in 0.0f64..8.0) {
            let r = RankedProfile::from_phis(&phis, &qs).unwrap();
            let buyers: Vec<_> = phis.iter().cloned().zip(qs.iter().cloned()).collect();
            let weighted: f64 = allocate_x(&r, x).per_buyer.iter().zip(&phis).map(|(a, p)| a * p).sum();
            prop_assert!((periodic_revenue(&r, x) - lp_oracle_phis(&buyers, x)).abs() < 1e-9);
            prop_assert!((periodic_revenue(&r, x) - weighted).abs() < 1e-9);
        }
    }

    #[test]
    fn sampled_profiles_respect_caps() {
        let spec = MarketSpec::table1(1, 1.0);
        let mut g = rng::stream(11, 0);
        for _ in 0..100 {
            let p = spec.sample_profile(&mut g);
            let r = rank(&p, &spec).unwrap();
            let a = allocate_x(&r, 1.7);
            for (i, b) in p.entries().iter().enumerate() {
                assert!(a.per_buyer[i] <= b.quantity + 1e-12);
            }
        }
    }
}
