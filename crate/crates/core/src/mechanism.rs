//! Per-period mechanism: allocation by the sell policy, payments and the quantity-overbid
//! penalty, plus Monte Carlo estimators of a single buyer's interim allocation and utility.

use serde::{Deserialize, Serialize};

use crate::allocation::{allocate_x, allocation_at_rank, rank, PeriodAllocation, RankedProfile};
use crate::exec::{self, mean_stderr};
use crate::market::{BuyerType, MarketSpec, TypeProfile};
use crate::rng;
use crate::sell_policy::{allocate_with, clamped_sell_quantity, SellPolicy};
use crate::{Error, Result};

/// Allocation counted as "exactly the report" when within this of it.
pub const HIT_TOLERANCE: f64 = 1e-9;
/// Penalty multiplier of `v̄ q̄` used when no resample hits the report.
pub const PENALTY_CAP_FACTOR: f64 = 1e6;
/// Minimum number of rival resamples accepted by the interim estimators.
pub const MIN_INTERIM_SAMPLES: usize = 100;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PaymentRule {
    /// `v a(v) − ∫₀^v a(τ) dτ`.
    #[default]
    Integral,
    /// Externality charge on displaced rivals; experimental.
    Counterfactual,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MechanismConfig {
    /// Simpson subintervals across `[0, v]`, spread over the pieces between breakpoints.
    pub quad_points: usize,
    /// Rival resamples used to estimate the hit probability in the penalty.
    pub penalty_samples: usize,
    pub payment: PaymentRule,
}

impl Default for MechanismConfig {
    fn default() -> Self {
        Self {
            quad_points: 64,
            penalty_samples: 10_000,
            payment: PaymentRule::Integral,
        }
    }
}

/// One period of the mechanism, indexed by slot.
#[derive(Clone, Debug, PartialEq)]
pub struct MechanismOutcome {
    pub allocations: Vec<f64>,
    pub payments: Vec<f64>,
    pub penalties: Vec<f64>,
    pub sold: f64,
    pub next_stock: f64,
}

/// Monte Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterimEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl InterimEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let (mean, stderr) = mean_stderr(xs);
        Self {
            mean,
            stderr,
            samples: xs.len(),
        }
    }
}

/// A buyer's allocation and payment against one rival draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterimSample {
    pub allocation: f64,
    pub payment: f64,
}

/// Ex-post utility `v min(q, a) − p − penalty` of a buyer whose true type is `truth`.
pub fn ex_post_utility(truth: BuyerType, allocation: f64, payment: f64, penalty: f64) -> f64 {
    truth.value * truth.quantity.min(allocation) - payment - penalty
}

/// `v̄ q̂ / p̂`, or `10⁶ v̄ q̄` when `p̂ = 0`.
pub fn penalty_from_probability(p_hat: f64, value_cap: f64, reported_q: f64, quantity_cap: f64) -> f64 {
    if p_hat > 0.0 {
        value_cap * reported_q / p_hat
    } else {
        PENALTY_CAP_FACTOR * value_cap * quantity_cap
    }
}

/// The mechanism for one market under a given sell policy.
#[derive(Clone, Copy)]
pub struct Mechanism<'a> {
    pub spec: &'a MarketSpec,
    pub policy: &'a dyn SellPolicy,
    pub config: MechanismConfig,
}

impl<'a> Mechanism<'a> {
    pub fn new(spec: &'a MarketSpec, policy: &'a dyn SellPolicy, config: MechanismConfig) -> Self {
        Self {
            spec,
            policy,
            config,
        }
    }

    /// Runs one period on the reports. With `truth` (true types per slot) buyers served
    /// beyond their true demand are charged the penalty, estimated from stream `seed`.
    pub fn run_period(
        &self,
        reported: &TypeProfile,
        period: usize,
        stock: f64,
        truth: Option<&TypeProfile>,
        seed: u64,
    ) -> Result<MechanismOutcome> {
        if !(stock >= 0.0) {
            return Err(Error::InvalidInput(format!("stock must be nonnegative (got {stock})")));
        }
        let ranked = rank(reported, self.spec)?;
        let (x, alloc) = allocate_with(self.policy, &ranked, period, stock);
        let slots = reported.slots();
        let mut payments = vec![0.0; slots];
        let mut penalties = vec![0.0; slots];
        for i in 0..reported.arrivals() {
            if alloc.per_buyer[i] <= 0.0 {
                continue;
            }
            payments[i] = self.payment(&ranked, reported, i, period, stock, x, &alloc)?;
            if let Some(truth) = truth {
                let true_q = truth.entries()[i].quantity;
                penalties[i] = self.penalty(
                    reported.entries()[i],
                    alloc.per_buyer[i],
                    true_q,
                    period,
                    stock,
                    rng::derive_seed(seed, i as u64),
                )?;
            }
        }
        Ok(MechanismOutcome {
            allocations: alloc.per_buyer,
            payments,
            penalties,
            sold: alloc.sold,
            next_stock: (stock - alloc.sold).max(0.0),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn payment(
        &self,
        ranked: &RankedProfile,
        reported: &TypeProfile,
        buyer: usize,
        period: usize,
        stock: f64,
        x: f64,
        alloc: &PeriodAllocation,
    ) -> Result<f64> {
        match self.config.payment {
            PaymentRule::Integral => self.payment_integral(ranked, reported, buyer, period, stock),
            PaymentRule::Counterfactual => {
                self.payment_counterfactual(ranked, reported, buyer, x, alloc)
            }
        }
    }

    /// `v_i a_i − ∫₀^{v_i} a_i((τ, q_i), θ_{−i}) dτ`, the allocation re-solved at each node.
    pub fn payment_integral(
        &self,
        ranked: &RankedProfile,
        reported: &TypeProfile,
        buyer: usize,
        period: usize,
        stock: f64,
    ) -> Result<f64> {
        let me = reported.entries()[buyer];
        let cf = Counterfactual::new(self, ranked, buyer, me.quantity, period, stock);
        let a = cf.allocation(me.value)?;
        if a <= 0.0 {
            return Ok(0.0);
        }
        let area = cf.integral(me.value, self.config.quad_points)?;
        Ok(me.value * a - area)
    }

    /// Prices the units rivals would have received without buyer `i` at the value that
    /// would have matched their virtual values, with the same sell quantity `x`.
    pub fn payment_counterfactual(
        &self,
        ranked: &RankedProfile,
        reported: &TypeProfile,
        buyer: usize,
        x: f64,
        alloc: &PeriodAllocation,
    ) -> Result<f64> {
        let a_i = alloc.per_buyer[buyer];
        if a_i <= 0.0 {
            return Ok(0.0);
        }
        let q_i = reported.entries()[buyer].quantity;
        let others = without(ranked, buyer);
        let displaced = allocate_x(&RankedProfile::from_sorted(others.clone(), ranked.slots()), x);
        let mut pay = 0.0;
        for &(slot, phi, _) in &others {
            let d = displaced.per_buyer[slot] - alloc.per_buyer[slot];
            if d > 0.0 {
                pay += self.spec.invert_virtual_value(phi, q_i)?.max(0.0) * d;
            }
        }
        Ok(pay.clamp(0.0, self.spec.value_cap() * a_i))
    }

    /// Probability that a buyer reporting `reported` is allocated its full reported quantity.
    pub fn hit_probability(
        &self,
        reported: BuyerType,
        period: usize,
        stock: f64,
        samples: usize,
        seed: u64,
    ) -> Result<f64> {
        if samples == 0 {
            return Err(Error::InvalidInput("need at least one resample".into()));
        }
        let hits = exec::try_map_range(samples, |k| {
            let mut g = rng::stream(seed, k as u64);
            let profile = self.spec.sample_rivals_with(reported, &mut g);
            let ranked = rank(&profile, self.spec)?;
            let (_, alloc) = allocate_with(self.policy, &ranked, period, stock);
            Ok((alloc.per_buyer[0] >= reported.quantity - HIT_TOLERANCE) as u32 as f64)
        })?;
        Ok(hits.iter().sum::<f64>() / samples as f64)
    }

    /// Zero unless `allocated > true_q`; otherwise `v̄ q̂ / p̂`.
    pub fn penalty(
        &self,
        reported: BuyerType,
        allocated: f64,
        true_q: f64,
        period: usize,
        stock: f64,
        seed: u64,
    ) -> Result<f64> {
        if allocated <= true_q {
            return Ok(0.0);
        }
        let p_hat = self.hit_probability(reported, period, stock, self.config.penalty_samples, seed)?;
        Ok(self.penalty_value(reported, p_hat))
    }

    pub fn penalty_value(&self, reported: BuyerType, p_hat: f64) -> f64 {
        penalty_from_probability(
            p_hat,
            self.spec.value_cap(),
            reported.quantity,
            self.spec.quantity_cap(),
        )
    }

    /// Allocation and payment of a buyer reporting `reported` against `samples` rival draws;
    /// draw `k` uses stream `k` of `seed` whatever the report, so reports are compared on
    /// common rivals.
    pub fn interim_samples(
        &self,
        reported: BuyerType,
        period: usize,
        stock: f64,
        samples: usize,
        seed: u64,
    ) -> Result<Vec<InterimSample>> {
        if samples < MIN_INTERIM_SAMPLES {
            return Err(Error::InvalidInput(format!(
                "interim estimates need at least {MIN_INTERIM_SAMPLES} samples (got {samples})"
            )));
        }
        exec::try_map_range(samples, |k| {
            let mut g = rng::stream(seed, k as u64);
            let profile = self.spec.sample_rivals_with(reported, &mut g);
            let ranked = rank(&profile, self.spec)?;
            let (x, alloc) = allocate_with(self.policy, &ranked, period, stock);
            let allocation = alloc.per_buyer[0];
            let payment = if allocation > 0.0 {
                self.payment(&ranked, &profile, 0, period, stock, x, &alloc)?
            } else {
                0.0
            };
            Ok(InterimSample {
                allocation,
                payment,
            })
        })
    }

    /// Allocations only, on the same rival draws as [`Mechanism::interim_samples`].
    pub fn allocation_samples(
        &self,
        reported: BuyerType,
        period: usize,
        stock: f64,
        samples: usize,
        seed: u64,
    ) -> Result<Vec<f64>> {
        exec::try_map_range(samples, |k| {
            let mut g = rng::stream(seed, k as u64);
            let profile = self.spec.sample_rivals_with(reported, &mut g);
            let ranked = rank(&profile, self.spec)?;
            Ok(allocate_with(self.policy, &ranked, period, stock).1.per_buyer[0])
        })
    }

    /// `A_i(θ̂_i)`: expected allocation over rival profiles.
    pub fn interim_allocation(
        &self,
        reported: BuyerType,
        period: usize,
        stock: f64,
        samples: usize,
        seed: u64,
    ) -> Result<InterimEstimate> {
        let s = self.interim_samples(reported, period, stock, samples, seed)?;
        let a: Vec<f64> = s.iter().map(|x| x.allocation).collect();
        Ok(InterimEstimate::from_samples(&a))
    }

    /// Expected ex-post utility of a `truth` buyer reporting `reported`, penalty included.
    pub fn interim_utility(
        &self,
        truth: BuyerType,
        reported: BuyerType,
        period: usize,
        stock: f64,
        samples: usize,
        seed: u64,
    ) -> Result<InterimEstimate> {
        let s = self.interim_samples(reported, period, stock, samples, seed)?;
        let penalty = if s.iter().any(|x| x.allocation > truth.quantity) {
            let p_hat = self.hit_probability(
                reported,
                period,
                stock,
                self.config.penalty_samples,
                rng::derive_seed(seed, PENALTY_SALT),
            )?;
            self.penalty_value(reported, p_hat)
        } else {
            0.0
        };
        let u = utility_samples(truth, &s, penalty);
        Ok(InterimEstimate::from_samples(&u))
    }
}

/// Seed salt separating the penalty's resamples from the interim draws.
pub const PENALTY_SALT: u64 = 0x7e4a_17c3;

/// Per-draw utilities of `truth` given draws for some report and that report's penalty.
pub fn utility_samples(truth: BuyerType, draws: &[InterimSample], penalty: f64) -> Vec<f64> {
    draws
        .iter()
        .map(|d| {
            let pen = if d.allocation > truth.quantity { penalty } else { 0.0 };
            ex_post_utility(truth, d.allocation, d.payment, pen)
        })
        .collect()
}

fn without(ranked: &RankedProfile, slot: usize) -> Vec<(usize, f64, f64)> {
    ranked
        .order()
        .iter()
        .zip(ranked.phis())
        .zip(ranked.quantities())
        .filter(|((&s, _), _)| s != slot)
        .map(|((&s, &p), &q)| (s, p, q))
        .collect()
}

/// Buyer `slot`'s allocation as a function of its value, rivals held fixed.
struct Counterfactual<'m, 'a> {
    mech: &'m Mechanism<'a>,
    rivals: Vec<(usize, f64, f64)>,
    slot: usize,
    quantity: f64,
    slots: usize,
    period: usize,
    stock: f64,
}

impl<'m, 'a> Counterfactual<'m, 'a> {
    fn new(
        mech: &'m Mechanism<'a>,
        ranked: &RankedProfile,
        slot: usize,
        quantity: f64,
        period: usize,
        stock: f64,
    ) -> Self {
        Self {
            mech,
            rivals: without(ranked, slot),
            slot,
            quantity,
            slots: ranked.slots(),
            period,
            stock,
        }
    }

    fn allocation(&self, value: f64) -> Result<f64> {
        if !(self.quantity > 0.0) {
            return Ok(0.0);
        }
        let phi = self.mech.spec.virtual_value(value, self.quantity)?;
        let pos = self
            .rivals
            .partition_point(|&(s, p, _)| p > phi || (p == phi && s < self.slot));
        let mut entries = Vec::with_capacity(self.rivals.len() + 1);
        entries.extend_from_slice(&self.rivals[..pos]);
        entries.push((self.slot, phi, self.quantity));
        entries.extend_from_slice(&self.rivals[pos..]);
        let ranked = RankedProfile::from_sorted(entries, self.slots);
        let x = clamped_sell_quantity(self.mech.policy, &ranked, self.period, self.stock);
        Ok(allocation_at_rank(&ranked, x, pos))
    }

    /// Values in `(0, upper)` where the allocation may jump or change slope.
    fn breakpoints(&self, upper: f64) -> Result<Vec<f64>> {
        let mut phis: Vec<f64> = self.rivals.iter().map(|r| r.1).collect();
        phis.push(0.0);
        let mut offset = 0.0;
        for r in 0..=self.rivals.len() {
            phis.extend(
                self.mech
                    .policy
                    .critical_phis(self.period, self.stock, offset, self.quantity),
            );
            if r < self.rivals.len() {
                offset += self.rivals[r].2;
            }
        }
        phis.retain(|p| p.is_finite());
        phis.sort_by(f64::total_cmp);
        phis.dedup();
        let phi_top = self.mech.spec.virtual_value(upper, self.quantity)?;
        let phi_bottom = self.mech.spec.virtual_value(0.0, self.quantity)?;
        let mut cuts = Vec::new();
        for p in phis {
            if p <= phi_bottom || p >= phi_top {
                continue;
            }
            let tau = self.mech.spec.invert_virtual_value(p, self.quantity)?;
            if tau > 0.0 && tau < upper {
                cuts.push(tau);
            }
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * upper.max(1.0));
        Ok(cuts)
    }

    /// `∫₀^upper a(τ) dτ`, piecewise between breakpoints.
    fn integral(&self, upper: f64, quad_points: usize) -> Result<f64> {
        let mut knots = vec![0.0];
        knots.extend(self.breakpoints(upper)?);
        knots.push(upper);
        let eta = 1e-12 * upper.max(1.0);
        let flat_tol = 1e-12 * self.quantity.max(1.0);
        let mut total = 0.0;
        for w in knots.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b - a <= 2.0 * eta {
                continue;
            }
            let fa = self.allocation(a + eta)?;
            let fb = self.allocation(b - eta)?;
            let fm = self.allocation(0.5 * (a + b))?;
            if (fa - fm).abs() <= flat_tol && (fb - fm).abs() <= flat_tol {
                total += fm * (b - a);
                continue;
            }
            let share = (quad_points as f64 * (b - a) / upper).ceil() as usize;
            let k = share.max(8).next_multiple_of(2);
            let h = (b - a) / k as f64;
            let mut sum = fa + fb;
            for j in 1..k {
                let f = self.allocation(a + j as f64 * h)?;
                sum += if j % 2 == 1 { 4.0 * f } else { 2.0 * f };
            }
            total += sum * h / 3.0;
        }
        Ok(total)
    }
}
