//! Statistical audits of incentive compatibility, individual rationality, allocation
//! monotonicity and the envelope identity, all on common random numbers.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::exec::{self, mean_stderr};
use crate::harness::{run_mechanism_episode, sample_horizon};
use crate::market::{BuyerType, MarketSpec};
use crate::mechanism::{utility_samples, InterimSample, Mechanism, PENALTY_SALT};
use crate::{rng, Error, Result};

/// Absolute slack added to every statistical bound, for estimates with zero variance.
pub const NUMERIC_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    /// Rival draws per report.
    pub samples: usize,
    /// PASS threshold in standard errors.
    pub z: f64,
    /// Gaps above this many standard errors are hard violations.
    pub hard_z: f64,
    pub period: usize,
    /// Stock at the audited period; `None` means the full stock.
    pub stock: Option<f64>,
    /// Reports this close to the truth (but not equal) are skipped.
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            samples: 20_000,
            z: 3.0,
            hard_z: 5.0,
            period: 1,
            stock: None,
            epsilon: 1e-6,
            seed: 1,
        }
    }
}

/// Cartesian grid of buyer types.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeGrid {
    pub values: Vec<f64>,
    pub quantities: Vec<f64>,
}

impl TypeGrid {
    /// `v ∈ {0, 1, 2, 3, 4}`, `q ∈ {0.4, 0.8, 1.2, 1.6, 2.0}`.
    pub fn five_by_five() -> Self {
        Self {
            values: vec![0.0, 1.0, 2.0, 3.0, 4.0],
            quantities: vec![0.4, 0.8, 1.2, 1.6, 2.0],
        }
    }

    /// `values.len()` evenly spaced values on `[0, v_max]` times evenly spaced quantities on
    /// `(0, q_max]`.
    pub fn uniform(nv: usize, v_max: f64, nq: usize, q_max: f64) -> Self {
        let values = (0..nv)
            .map(|k| if nv == 1 { v_max } else { v_max * k as f64 / (nv - 1) as f64 })
            .collect();
        let quantities = (1..=nq).map(|k| q_max * k as f64 / nq as f64).collect();
        Self { values, quantities }
    }

    pub fn points(&self) -> Vec<BuyerType> {
        self.quantities
            .iter()
            .flat_map(|&q| self.values.iter().map(move |&v| BuyerType::new(v, q)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    /// Between the PASS and hard thresholds.
    Noise,
    Hard,
}

impl Verdict {
    fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "PASS",
            Verdict::Noise => "NOISE",
            Verdict::Hard => "HARD",
        }
    }
}

/// One audited comparison; `gap` is the quantity that must not be positive.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditCell {
    pub truth: (f64, f64),
    pub report: (f64, f64),
    /// Reference estimate (truthful utility, lower allocation, ...).
    pub baseline: f64,
    /// Compared estimate (misreport utility, higher allocation, ...).
    pub candidate: f64,
    pub candidate_stderr: f64,
    pub gap: f64,
    pub stderr: f64,
    /// Extra deterministic tolerance (quadrature) on top of `z · stderr`.
    pub bound: f64,
    pub verdict: Verdict,
    /// A draw served the report beyond the true quantity, so the penalty applied.
    pub penalized: bool,
    /// Deterministic per-draw violations, where applicable.
    pub exact_violations: usize,
}

impl AuditCell {
    pub fn z_score(&self) -> f64 {
        if self.gap.abs() <= NUMERIC_FLOOR {
            0.0
        } else if self.stderr > 0.0 {
            self.gap / self.stderr
        } else if self.gap > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub name: String,
    pub z: f64,
    pub hard_z: f64,
    pub cells: Vec<AuditCell>,
}

impl AuditReport {
    fn verdict(gap: f64, stderr: f64, bound: f64, z: f64, hard_z: f64) -> Verdict {
        if gap <= z * stderr + bound + NUMERIC_FLOOR {
            Verdict::Pass
        } else if gap <= hard_z * stderr + bound + NUMERIC_FLOOR {
            Verdict::Noise
        } else {
            Verdict::Hard
        }
    }

    pub fn count(&self, v: Verdict) -> usize {
        self.cells.iter().filter(|c| c.verdict == v).count()
    }

    pub fn hard_violations(&self) -> usize {
        self.count(Verdict::Hard)
    }

    pub fn all_pass(&self) -> bool {
        self.count(Verdict::Pass) == self.cells.len()
    }

    pub fn exact_violations(&self) -> usize {
        self.cells.iter().map(|c| c.exact_violations).sum()
    }

    /// Cell with the largest gap in standard errors.
    pub fn worst(&self) -> Option<&AuditCell> {
        self.cells
            .iter()
            .max_by(|a, b| a.z_score().total_cmp(&b.z_score()).then(a.gap.total_cmp(&b.gap)))
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "{}: {} cells, {} pass, {} noise, {} hard",
            self.name,
            self.cells.len(),
            self.count(Verdict::Pass),
            self.count(Verdict::Noise),
            self.hard_violations()
        );
        if let Some(w) = self.worst() {
            let _ = write!(
                s,
                ", worst gap {:.6} ({:.2} se) at truth ({}, {}) report ({}, {})",
                w.gap,
                w.z_score(),
                w.truth.0,
                w.truth.1,
                w.report.0,
                w.report.1
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "audit,true_v,true_q,report_v,report_q,baseline,candidate,candidate_stderr,gap,stderr,bound,z_score,verdict,penalized,exact_violations\n",
        );
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.4},{},{},{}",
                self.name,
                c.truth.0,
                c.truth.1,
                c.report.0,
                c.report.1,
                c.baseline,
                c.candidate,
                c.candidate_stderr,
                c.gap,
                c.stderr,
                c.bound,
                c.z_score(),
                c.verdict.as_str(),
                c.penalized,
                c.exact_violations
            );
        }
        out
    }
}

fn stock_of(mech: &Mechanism<'_>, cfg: &AuditConfig) -> f64 {
    cfg.stock.unwrap_or(mech.spec.stock())
}

fn check_grid(points: &[BuyerType]) -> Result<()> {
    if points.is_empty() {
        return Err(Error::InvalidInput("audit grid is empty".into()));
    }
    Ok(())
}

/// Draws and penalty for one report, shared by every true type.
struct ReportDraws {
    report: BuyerType,
    draws: Vec<InterimSample>,
    penalty: f64,
}

fn report_draws(mech: &Mechanism<'_>, report: BuyerType, cfg: &AuditConfig) -> Result<ReportDraws> {
    let stock = stock_of(mech, cfg);
    let draws = mech.interim_samples(report, cfg.period, stock, cfg.samples, cfg.seed)?;
    let p_hat = mech.hit_probability(
        report,
        cfg.period,
        stock,
        mech.config.penalty_samples,
        rng::derive_seed(cfg.seed, PENALTY_SALT),
    )?;
    Ok(ReportDraws {
        report,
        draws,
        penalty: mech.penalty_value(report, p_hat),
    })
}

fn same(a: BuyerType, b: BuyerType) -> bool {
    a.value == b.value && a.quantity == b.quantity
}

fn near(a: BuyerType, b: BuyerType, eps: f64) -> bool {
    (a.value - b.value).abs() <= eps && (a.quantity - b.quantity).abs() <= eps
}

/// For every true type and report, the paired utility gain from misreporting. Reports equal
/// to the truth give a zero gap; reports within `epsilon` of it are skipped.
pub fn audit_ic(
    mech: &Mechanism<'_>,
    truths: &[BuyerType],
    reports: &[BuyerType],
    cfg: &AuditConfig,
) -> Result<AuditReport> {
    check_grid(truths)?;
    check_grid(reports)?;
    let mut distinct: Vec<BuyerType> = Vec::new();
    for &b in truths.iter().chain(reports) {
        if !distinct.iter().any(|&d| same(d, b)) {
            distinct.push(b);
        }
    }
    let table: Vec<ReportDraws> = distinct
        .iter()
        .map(|&r| report_draws(mech, r, cfg))
        .collect::<Result<_>>()?;
    let lookup = |b: BuyerType| table.iter().find(|d| same(d.report, b)).unwrap();

    let mut cells = Vec::new();
    for &truth in truths {
        let honest = lookup(truth);
        let u_true = utility_samples(truth, &honest.draws, honest.penalty);
        let (base_mean, _) = mean_stderr(&u_true);
        for &report in reports {
            if !same(report, truth) && near(report, truth, cfg.epsilon) {
                continue;
            }
            let dev = lookup(report);
            let u_dev = utility_samples(truth, &dev.draws, dev.penalty);
            let diff: Vec<f64> = u_dev.iter().zip(&u_true).map(|(a, b)| a - b).collect();
            let (gap, stderr) = mean_stderr(&diff);
            let (cand, cand_se) = mean_stderr(&u_dev);
            cells.push(AuditCell {
                truth: (truth.value, truth.quantity),
                report: (report.value, report.quantity),
                baseline: base_mean,
                candidate: cand,
                candidate_stderr: cand_se,
                gap,
                stderr,
                bound: 0.0,
                verdict: AuditReport::verdict(gap, stderr, 0.0, cfg.z, cfg.hard_z),
                penalized: dev.draws.iter().any(|d| d.allocation > truth.quantity),
                exact_violations: 0,
            });
        }
    }
    Ok(AuditReport {
        name: "ic".into(),
        z: cfg.z,
        hard_z: cfg.hard_z,
        cells,
    })
}

/// Cells of an IC report where the penalty was triggered, with the misreport's utility
/// itself as the gap (it must not be positive).
pub fn overbid_report(ic: &AuditReport) -> AuditReport {
    let cells = ic
        .cells
        .iter()
        .filter(|c| c.penalized)
        .map(|c| {
            let mut cell = c.clone();
            cell.gap = c.candidate;
            cell.stderr = c.candidate_stderr;
            cell.verdict = AuditReport::verdict(cell.gap, cell.stderr, 0.0, ic.z, ic.hard_z);
            cell
        })
        .collect();
    AuditReport {
        name: "overbid".into(),
        z: ic.z,
        hard_z: ic.hard_z,
        cells,
    }
}

/// Truthful interim utility must be nonnegative; also counts negative per-draw utilities.
pub fn audit_ir(mech: &Mechanism<'_>, grid: &[BuyerType], cfg: &AuditConfig) -> Result<AuditReport> {
    check_grid(grid)?;
    let stock = stock_of(mech, cfg);
    let mut cells = Vec::with_capacity(grid.len());
    for &truth in grid {
        let draws = mech.interim_samples(truth, cfg.period, stock, cfg.samples, cfg.seed)?;
        let u = utility_samples(truth, &draws, 0.0);
        let (mean, stderr) = mean_stderr(&u);
        let gap = -mean;
        let scale = truth.value.max(1.0) * truth.quantity.max(1.0);
        cells.push(AuditCell {
            truth: (truth.value, truth.quantity),
            report: (truth.value, truth.quantity),
            baseline: 0.0,
            candidate: mean,
            candidate_stderr: stderr,
            gap,
            stderr,
            bound: 0.0,
            verdict: AuditReport::verdict(gap, stderr, 0.0, cfg.z, cfg.hard_z),
            penalized: false,
            exact_violations: u.iter().filter(|&&x| x < -1e-9 * scale).count(),
        });
    }
    Ok(AuditReport {
        name: "ir".into(),
        z: cfg.z,
        hard_z: cfg.hard_z,
        cells,
    })
}

/// Interim allocation along grid lines in `v` and in `q` (paired), plus exact per-draw checks.
pub fn audit_monotonicity(mech: &Mechanism<'_>, grid: &TypeGrid, cfg: &AuditConfig) -> Result<AuditReport> {
    let stock = stock_of(mech, cfg);
    let points = grid.points();
    check_grid(&points)?;
    let allocs: Vec<Vec<f64>> = points
        .iter()
        .map(|&b| mech.allocation_samples(b, cfg.period, stock, cfg.samples, cfg.seed))
        .collect::<Result<_>>()?;
    let nv = grid.values.len();
    let index = |iq: usize, iv: usize| iq * nv + iv;
    let mut pairs = Vec::new();
    for iq in 0..grid.quantities.len() {
        for iv in 1..nv {
            pairs.push((index(iq, iv - 1), index(iq, iv)));
        }
    }
    for iq in 1..grid.quantities.len() {
        for iv in 0..nv {
            pairs.push((index(iq - 1, iv), index(iq, iv)));
        }
    }
    let cells = pairs
        .into_iter()
        .map(|(lo, hi)| {
            let diff: Vec<f64> = allocs[lo].iter().zip(&allocs[hi]).map(|(a, b)| a - b).collect();
            let (gap, stderr) = mean_stderr(&diff);
            let (cand, cand_se) = mean_stderr(&allocs[hi]);
            let (base, _) = mean_stderr(&allocs[lo]);
            AuditCell {
                truth: (points[lo].value, points[lo].quantity),
                report: (points[hi].value, points[hi].quantity),
                baseline: base,
                candidate: cand,
                candidate_stderr: cand_se,
                gap,
                stderr,
                bound: 0.0,
                verdict: AuditReport::verdict(gap, stderr, 0.0, cfg.z, cfg.hard_z),
                penalized: false,
                exact_violations: diff.iter().filter(|&&d| d > 1e-12).count(),
            }
        })
        .collect();
    Ok(AuditReport {
        name: "monotonicity".into(),
        z: cfg.z,
        hard_z: cfg.hard_z,
        cells,
    })
}

/// `U(v, q) − U(0, q)` against the trapezoid integral of the allocation over a `τ` grid of
/// `quad_points` intervals on `[0, v_max]`, at `nodes` evenly spaced values. Per draw the
/// two sides differ only by quadrature error, bounded by `h (A(v) − A(0)) / 2` for a
/// monotone allocation.
pub fn audit_envelope(
    mech: &Mechanism<'_>,
    quantity: f64,
    v_max: f64,
    nodes: usize,
    quad_points: usize,
    cfg: &AuditConfig,
) -> Result<AuditReport> {
    if nodes == 0 || quad_points == 0 || !quad_points.is_multiple_of(nodes) {
        return Err(Error::InvalidInput(
            "quadrature intervals must be a positive multiple of the node count".into(),
        ));
    }
    let stock = stock_of(mech, cfg);
    let h = v_max / quad_points as f64;
    let taus: Vec<f64> = (0..=quad_points).map(|j| h * j as f64).collect();
    let alloc: Vec<Vec<f64>> = taus
        .iter()
        .map(|&tau| mech.allocation_samples(BuyerType::new(tau, quantity), cfg.period, stock, cfg.samples, cfg.seed))
        .collect::<Result<_>>()?;
    let zero = BuyerType::new(0.0, quantity);
    let u0 = utility_samples(zero, &mech.interim_samples(zero, cfg.period, stock, cfg.samples, cfg.seed)?, 0.0);
    let step = quad_points / nodes;
    let mut cells = Vec::with_capacity(nodes);
    for j in 1..=nodes {
        let end = j * step;
        let v = taus[end];
        let b = BuyerType::new(v, quantity);
        let u = utility_samples(b, &mech.interim_samples(b, cfg.period, stock, cfg.samples, cfg.seed)?, 0.0);
        let trap: Vec<f64> = (0..cfg.samples)
            .map(|k| {
                let inner: f64 = (1..end).map(|i| alloc[i][k]).sum();
                h * (0.5 * alloc[0][k] + inner + 0.5 * alloc[end][k])
            })
            .collect();
        let diff: Vec<f64> = (0..cfg.samples).map(|k| (u[k] - u0[k]) - trap[k]).collect();
        let (mean, stderr) = mean_stderr(&diff);
        let (a_hi, _) = mean_stderr(&alloc[end]);
        let (a_lo, _) = mean_stderr(&alloc[0]);
        let bound = h * (a_hi - a_lo).abs() / 2.0;
        let (lhs, lhs_se) = mean_stderr(&u.iter().zip(&u0).map(|(a, b)| a - b).collect::<Vec<_>>());
        let (rhs, _) = mean_stderr(&trap);
        cells.push(AuditCell {
            truth: (v, quantity),
            report: (v, quantity),
            baseline: rhs,
            candidate: lhs,
            candidate_stderr: lhs_se,
            gap: mean.abs(),
            stderr,
            bound,
            verdict: AuditReport::verdict(mean.abs(), stderr, bound, cfg.z, cfg.hard_z),
            penalized: false,
            exact_violations: 0,
        });
    }
    Ok(AuditReport {
        name: "envelope".into(),
        z: cfg.z,
        hard_z: cfg.hard_z,
        cells,
    })
}

/// Discounted payments against discounted `Σ φ a` over whole episodes, paired per episode.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RevenueIdentity {
    pub episodes: usize,
    pub payments: f64,
    pub virtual_surplus: f64,
    pub gap: f64,
    pub stderr: f64,
}

impl RevenueIdentity {
    pub fn within(&self, z: f64) -> bool {
        self.gap.abs() <= z * self.stderr + NUMERIC_FLOOR
    }
}

pub fn audit_revenue_identity(mech: &Mechanism<'_>, spec: &MarketSpec, episodes: usize, seed: u64) -> Result<RevenueIdentity> {
    let pairs = exec::try_map_range(episodes, |e| {
        let horizon = sample_horizon(spec, seed, e);
        let ep = run_mechanism_episode(mech, &horizon, rng::derive_seed(seed, e as u64))?;
        Ok((ep.payments, ep.virtual_surplus))
    })?;
    let p: Vec<f64> = pairs.iter().map(|x| x.0).collect();
    let s: Vec<f64> = pairs.iter().map(|x| x.1).collect();
    let d: Vec<f64> = pairs.iter().map(|x| x.0 - x.1).collect();
    let (gap, stderr) = mean_stderr(&d);
    Ok(RevenueIdentity {
        episodes,
        payments: mean_stderr(&p).0,
        virtual_surplus: mean_stderr(&s).0,
        gap,
        stderr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanism::MechanismConfig;
    use crate::sell_policy::ThresholdPolicy;

    fn small_cfg() -> AuditConfig {
        AuditConfig {
            samples: 300,
            ..Default::default()
        }
    }

    #[test]
    fn truthful_report_has_zero_gap() {
        let spec = MarketSpec::table1(1, 10.0);
        let policy = ThresholdPolicy::myopic();
        let mech = Mechanism::new(&spec, &policy, MechanismConfig { penalty_samples: 200, ..Default::default() });
        let b = BuyerType::new(2.0, 1.0);
        let r = audit_ic(&mech, &[b], &[b], &small_cfg()).unwrap();
        assert_eq!(r.cells.len(), 1);
        assert_eq!(r.cells[0].gap, 0.0);
        assert_eq!(r.cells[0].verdict, Verdict::Pass);
        let nudged = BuyerType::new(2.0 + 1e-8, 1.0);
        assert!(audit_ic(&mech, &[b], &[nudged], &small_cfg()).unwrap().cells.is_empty());
    }

    #[test]
    fn zero_stock_means_zero_utility() {
        let spec = MarketSpec::table1(1, 10.0);
        let policy = ThresholdPolicy::myopic();
        let mech = Mechanism::new(&spec, &policy, MechanismConfig::default());
        let cfg = AuditConfig {
            stock: Some(0.0),
            ..small_cfg()
        };
        let r = audit_ir(&mech, &TypeGrid::five_by_five().points(), &cfg).unwrap();
        assert!(r.cells.iter().all(|c| c.candidate == 0.0 && c.verdict == Verdict::Pass));
    }

    #[test]
    fn envelope_for_a_lone_buyer_is_a_step() {
        // no rivals ever arrive: A(τ, 1) = 1{τ > 1}, U(v) = (v − 1)⁺
        use crate::market::{ArrivalDist, MarketConfig};
        let mut cfg = MarketConfig::table1(1, 10.0);
        cfg.arrivals = ArrivalDist::Tabulated { pmf: vec![1.0] };
        let spec = MarketSpec::new(cfg).unwrap();
        let policy = ThresholdPolicy::myopic();
        let mech = Mechanism::new(&spec, &policy, MechanismConfig::default());
        let r = audit_envelope(&mech, 1.0, 4.0, 4, 64, &small_cfg()).unwrap();
        for c in &r.cells {
            assert!((c.candidate - (c.truth.0 - 1.0).max(0.0)).abs() < 1e-9);
            assert_eq!(c.verdict, Verdict::Pass);
        }
    }

    #[test]
    fn csv_and_summary() {
        let spec = MarketSpec::table1(1, 10.0);
        let policy = ThresholdPolicy::myopic();
        let mech = Mechanism::new(&spec, &policy, MechanismConfig::default());
        let grid = TypeGrid::uniform(2, 2.0, 2, 2.0);
        let r = audit_monotonicity(&mech, &grid, &small_cfg()).unwrap();
        assert_eq!(r.cells.len(), 4);
        assert_eq!(r.exact_violations(), 0);
        assert_eq!(r.to_csv().lines().count(), 5);
        assert!(r.summary().starts_with("monotonicity: 4 cells"));
    }
}
