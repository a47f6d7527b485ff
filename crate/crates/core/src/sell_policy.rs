//! Marginal value of selling and the threshold sell quantity.
//!
//! For a ranked profile and remaining stock `s`, selling `x` units earns
//! `R(θ, x) + δ Ṽ(s − x)`. Its derivative, the marginal value
//! `MV(x) = φ_[segment(x)] − δ Ṽ′(s − x)`, is nonincreasing when `Ṽ` is concave, and the
//! optimal quantity is the first point where it turns negative (or all of `s`).

use crate::allocation::{allocate_x, periodic_revenue, rank, PeriodAllocation, RankedProfile};
use crate::chebyshev::{derivative_coeffs, series, ChebyshevBasis};
use crate::market::{BuyerType, MarketSpec};
use crate::rng;
use crate::value_approx::ValueApprox;
use crate::Result;

/// Points per segment probed for a sign change when the continuation is not concave.
const SCAN_POINTS: usize = 16;
/// Grid used to classify a continuation as concave.
const CONCAVITY_GRID: usize = 257;

/// Discounted continuation `δ Ṽ^{t+1}` seen from period `t`.
#[derive(Clone, Debug)]
pub struct Continuation {
    basis: Option<ChebyshevBasis>,
    row: Vec<f64>,
    deriv: Vec<f64>,
    discount: f64,
    concave: bool,
}

impl Continuation {
    /// Terminal boundary: no value after the horizon.
    pub fn zero() -> Self {
        Self {
            basis: None,
            row: Vec::new(),
            deriv: Vec::new(),
            discount: 0.0,
            concave: true,
        }
    }

    pub fn new(basis: ChebyshevBasis, row: &[f64], discount: f64) -> Self {
        let deriv = derivative_coeffs(row);
        let second = derivative_coeffs(&deriv);
        let scale = row.iter().map(|c| c.abs()).sum::<f64>().max(1.0);
        let concave = (0..CONCAVITY_GRID).all(|k| {
            let x = -1.0 + 2.0 * k as f64 / (CONCAVITY_GRID - 1) as f64;
            series(&second, x) <= 1e-12 * scale
        });
        Self {
            basis: Some(basis),
            row: row.to_vec(),
            deriv,
            discount,
            concave,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.basis.is_none() || self.discount == 0.0
    }

    /// Whether `Ṽ` is concave on the whole stock range, making `MV` monotone.
    pub fn is_concave(&self) -> bool {
        self.concave
    }

    fn normalized(&self, basis: &ChebyshevBasis, s: f64) -> f64 {
        (2.0 * s / basis.stock_cap() - 1.0).clamp(-1.0, 1.0)
    }

    /// `δ Ṽ(s)`.
    pub fn value(&self, s: f64) -> f64 {
        match &self.basis {
            None => 0.0,
            Some(b) => self.discount * series(&self.row, self.normalized(b, s)),
        }
    }

    /// `δ Ṽ′(s)`.
    pub fn marginal(&self, s: f64) -> f64 {
        match &self.basis {
            None => 0.0,
            Some(b) => {
                self.discount * series(&self.deriv, self.normalized(b, s)) * 2.0 / b.stock_cap()
            }
        }
    }
}

/// Inputs to the marginal value at one state.
#[derive(Clone, Copy, Debug)]
pub struct MarginalProfile<'a> {
    pub ranked: &'a RankedProfile,
    pub continuation: &'a Continuation,
    pub stock: f64,
}

impl<'a> MarginalProfile<'a> {
    pub fn new(ranked: &'a RankedProfile, continuation: &'a Continuation, stock: f64) -> Self {
        Self {
            ranked,
            continuation,
            stock,
        }
    }

    /// Virtual value of the segment containing `x` (right limit at breakpoints);
    /// zero past total demand.
    pub fn segment_phi(&self, x: f64) -> f64 {
        let cum = self.ranked.cum_demand();
        let k = cum.partition_point(|&c| c <= x);
        if k == 0 || k > self.ranked.len() {
            return 0.0;
        }
        self.ranked.phis()[k - 1]
    }

    pub fn marginal_value(&self, x: f64) -> f64 {
        self.segment_phi(x) - self.continuation.marginal(self.stock - x)
    }

    /// `R(θ, x) + δ Ṽ(s − x)`.
    pub fn objective(&self, x: f64) -> f64 {
        periodic_revenue(self.ranked, x) + self.continuation.value(self.stock - x)
    }

    /// `x* = inf {x ∈ [0, s] : MV(x) < 0}`, or `s` if the set is empty; never above total demand.
    pub fn optimal_x(&self) -> f64 {
        let limit = self.stock.min(self.ranked.total_demand());
        if !(limit > 0.0) {
            return 0.0;
        }
        let cum = self.ranked.cum_demand();
        let cont = self.continuation;
        for (j, &phi) in self.ranked.phis().iter().enumerate() {
            let start = cum[j];
            if start >= limit {
                break;
            }
            let end = cum[j + 1].min(limit);
            let mv = |x: f64| phi - cont.marginal(self.stock - x);
            if mv(start) < 0.0 {
                return start;
            }
            if cont.is_zero() {
                continue;
            }
            if cont.is_concave() {
                if mv(end) < 0.0 {
                    return bisect(&mv, start, end);
                }
            } else {
                // first sign change only; no unimodality assumed past it
                let mut prev = start;
                for k in 1..=SCAN_POINTS {
                    let x = start + (end - start) * k as f64 / SCAN_POINTS as f64;
                    if mv(x) < 0.0 {
                        return bisect(&mv, prev, x);
                    }
                    prev = x;
                }
            }
        }
        limit
    }
}

/// Boundary between `mv >= 0` at `lo` and `mv < 0` at `hi`.
fn bisect(mv: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let tol = 1e-13 * hi.abs().max(1.0);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mv(mid) < 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn marginal_value(mp: &MarginalProfile<'_>, x: f64) -> f64 {
    mp.marginal_value(x)
}

pub fn optimal_x(mp: &MarginalProfile<'_>) -> f64 {
    mp.optimal_x()
}

/// Chooses how much to sell in a period. Implementations are pure in their inputs.
pub trait SellPolicy: Sync + Send {
    /// Units to offer at `period` (1-based) with `stock` remaining.
    fn sell_quantity(&self, ranked: &RankedProfile, period: usize, stock: f64) -> f64;

    /// Virtual values at which a buyer occupying demand `[offset, offset + quantity]`
    /// may start or stop receiving units. Used only to place quadrature breakpoints.
    fn critical_phis(&self, _period: usize, _stock: f64, _offset: f64, _quantity: f64) -> Vec<f64> {
        Vec::new()
    }
}

/// Sell quantity and resulting allocation under `policy`.
pub fn allocate_with(
    policy: &dyn SellPolicy,
    ranked: &RankedProfile,
    period: usize,
    stock: f64,
) -> (f64, PeriodAllocation) {
    let x = clamped_sell_quantity(policy, ranked, period, stock);
    (x, allocate_x(ranked, x))
}

/// `policy`'s sell quantity restricted to `[0, min(stock, total demand)]`.
pub fn clamped_sell_quantity(
    policy: &dyn SellPolicy,
    ranked: &RankedProfile,
    period: usize,
    stock: f64,
) -> f64 {
    let hi = stock.min(ranked.total_demand()).max(0.0);
    let x = policy.sell_quantity(ranked, period, stock);
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, hi)
    }
}

/// Threshold policy driven by a fitted value function (or none: the myopic `t = T` rule).
#[derive(Clone, Debug)]
pub struct ThresholdPolicy {
    continuations: Vec<Continuation>,
}

impl ThresholdPolicy {
    pub fn new(approx: &ValueApprox, discount: f64) -> Self {
        Self {
            continuations: (1..=approx.horizon())
                .map(|t| approx.continuation(t, discount))
                .collect(),
        }
    }

    /// Zero continuation in every period.
    pub fn myopic() -> Self {
        Self {
            continuations: Vec::new(),
        }
    }

    pub fn continuation(&self, period: usize) -> &Continuation {
        static ZERO: std::sync::OnceLock<Continuation> = std::sync::OnceLock::new();
        period
            .checked_sub(1)
            .and_then(|i| self.continuations.get(i))
            .unwrap_or_else(|| ZERO.get_or_init(Continuation::zero))
    }
}

impl SellPolicy for ThresholdPolicy {
    fn sell_quantity(&self, ranked: &RankedProfile, period: usize, stock: f64) -> f64 {
        MarginalProfile::new(ranked, self.continuation(period), stock).optimal_x()
    }

    fn critical_phis(&self, period: usize, stock: f64, offset: f64, quantity: f64) -> Vec<f64> {
        let cont = self.continuation(period);
        let end = (offset + quantity).min(stock);
        vec![cont.marginal(stock - offset), cont.marginal(stock - end)]
    }
}

/// Sells a fixed fraction of the remaining stock each period, regardless of bids.
#[derive(Clone, Copy, Debug)]
pub struct FractionPolicy {
    pub fraction: f64,
    /// Only periods up to this one sell.
    pub last_period: usize,
}

impl SellPolicy for FractionPolicy {
    fn sell_quantity(&self, _ranked: &RankedProfile, period: usize, stock: f64) -> f64 {
        if period <= self.last_period {
            self.fraction * stock
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MonotonicityReport {
    pub trials: usize,
    /// Raising a buyer's value lowered `x*`.
    pub value_violations: usize,
    /// Raising a buyer's quantity lowered `x*`.
    pub quantity_violations: usize,
    /// Raising value or quantity lowered the buyer's own allocation.
    pub allocation_violations: usize,
    /// Changing a non-arrived slot changed `x*`.
    pub dummy_changes: usize,
}

impl MonotonicityReport {
    pub fn total_violations(&self) -> usize {
        self.value_violations + self.quantity_violations + self.allocation_violations + self.dummy_changes
    }
}

/// Samples profiles, raises one arrived buyer's value by `0.5` and separately its quantity,
/// and counts decreases of the sell quantity or of that buyer's allocation.
pub fn monotone_in_type_check(
    spec: &MarketSpec,
    policy: &dyn SellPolicy,
    period: usize,
    stock: f64,
    trials: usize,
    seed: u64,
) -> Result<MonotonicityReport> {
    use rand::Rng;
    const TOL: f64 = 1e-9;
    let outcomes = crate::exec::try_map_range(trials, |k| {
        let mut g = rng::stream(seed, k as u64);
        let profile = spec.sample_profile(&mut g);
        let i = g.random_range(0..profile.arrivals());
        let base = profile.arrived()[i];
        let raised_v = BuyerType::new(base.value + 0.5, base.quantity);
        let q_hi = spec.quantity_cap();
        let raised_q = BuyerType::new(base.value, base.quantity + g.random::<f64>() * (q_hi - base.quantity).max(0.0));

        let run = |p: &crate::market::TypeProfile| -> Result<(f64, f64)> {
            let ranked = rank(p, spec)?;
            let (x, alloc) = allocate_with(policy, &ranked, period, stock);
            Ok((x, alloc.per_buyer[i]))
        };
        let (x0, a0) = run(&profile)?;
        let (xv, av) = run(&profile.with_type(i, raised_v))?;
        let (xq, aq) = run(&profile.with_type(i, raised_q))?;
        let mut r = MonotonicityReport {
            trials: 1,
            ..Default::default()
        };
        r.value_violations += (xv < x0 - TOL) as usize;
        r.quantity_violations += (xq < x0 - TOL) as usize;
        r.allocation_violations += (av < a0 - TOL) as usize + (aq < a0 - TOL) as usize;
        if profile.arrivals() < profile.slots() {
            let slot = g.random_range(profile.arrivals()..profile.slots());
            let ghost = profile.with_type(slot, BuyerType::new(base.value + 3.0, 1.0));
            let (xd, _) = run(&ghost)?;
            r.dummy_changes += (xd != x0) as usize;
        }
        Ok(r)
    })?;
    Ok(outcomes.into_iter().fold(MonotonicityReport::default(), |mut acc, r| {
        acc.trials += r.trials;
        acc.value_violations += r.value_violations;
        acc.quantity_violations += r.quantity_violations;
        acc.allocation_violations += r.allocation_violations;
        acc.dummy_changes += r.dummy_changes;
        acc
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_continuation(slope: f64, cap: f64, discount: f64) -> Continuation {
        // Ṽ(s) = slope·s = slope·(Q̄/2)(1 + s̃)
        let b = ChebyshevBasis::new(1, cap).unwrap();
        Continuation::new(b, &[slope * cap / 2.0, slope * cap / 2.0], discount)
    }

    #[test]
    fn terminal_marginal_value_is_segment_phi() {
        let r = RankedProfile::from_phis(&[3.0, 1.0], &[1.0, 2.0]).unwrap();
        let z = Continuation::zero();
        let mp = MarginalProfile::new(&r, &z, 5.0);
        assert_eq!(mp.marginal_value(0.5), 3.0);
        assert_eq!(mp.marginal_value(1.0), 1.0);
        assert_eq!(mp.marginal_value(2.5), 1.0);
        assert_eq!(mp.marginal_value(3.5), 0.0);
    }

    #[test]
    fn linear_continuation_shifts_marginal_value() {
        let r = RankedProfile::from_phis(&[1.0], &[2.0]).unwrap();
        let c = linear_continuation(0.5, 10.0, 1.0);
        let mp = MarginalProfile::new(&r, &c, 10.0);
        assert!((mp.marginal_value(1.0) - 0.5).abs() < 1e-12);
        // past demand: dummy segment
        assert!((mp.marginal_value(3.0) + 0.5).abs() < 1e-12);
        assert!(c.is_concave());
    }

    #[test]
    fn terminal_threshold_cases() {
        let z = Continuation::zero();
        let pos = RankedProfile::from_phis(&[2.0, 1.0], &[1.0, 1.5]).unwrap();
        assert_eq!(MarginalProfile::new(&pos, &z, 10.0).optimal_x(), 2.5);
        assert_eq!(MarginalProfile::new(&pos, &z, 2.0).optimal_x(), 2.0);
        assert_eq!(MarginalProfile::new(&pos, &z, 0.0).optimal_x(), 0.0);
        let neg = RankedProfile::from_phis(&[-0.5, -1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(MarginalProfile::new(&neg, &z, 10.0).optimal_x(), 0.0);
        let mixed = RankedProfile::from_phis(&[2.0, -1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(MarginalProfile::new(&mixed, &z, 10.0).optimal_x(), 1.0);
    }

    #[test]
    fn interior_crossing_found_by_bisection() {
        // Ṽ(s) = 4s − s²/2 on [0, 4]: Ṽ′(s) = 4 − s; with δ=1, φ=2 crosses at s − x = 2
        let b = ChebyshevBasis::new(2, 4.0).unwrap();
        // s = 2(1+u): 4s − s²/2 = 8(1+u) − 2(1+u)² = 6 + 4u − 2u² = 6 + 4T1 − (T2 + 1)
        let c = Continuation::new(b, &[5.0, 4.0, -1.0], 1.0);
        assert!((c.marginal(1.0) - 3.0).abs() < 1e-12);
        let r = RankedProfile::from_phis(&[2.0], &[10.0]).unwrap();
        let x = MarginalProfile::new(&r, &c, 4.0).optimal_x();
        assert!((x - 2.0).abs() < 1e-9, "{x}");
    }

    #[test]
    fn threshold_beats_grid_search() {
        let b = ChebyshevBasis::new(2, 4.0).unwrap();
        let c = Continuation::new(b, &[5.0, 4.0, -1.0], 0.9);
        let r = RankedProfile::from_phis(&[3.0, 2.2, 1.0, 0.3], &[0.7, 0.6, 1.1, 0.9]).unwrap();
        let mp = MarginalProfile::new(&r, &c, 4.0);
        let xs = mp.optimal_x();
        let best = (0..=4000)
            .map(|k| mp.objective(4.0 * k as f64 / 4000.0))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(mp.objective(xs) >= best - 1e-9);
    }
}
