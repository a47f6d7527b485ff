//! Built-in and tabulated distribution families.
//!
//! Families are selected by a string tag when loaded from a config file
//! (`family = "truncated-poisson"` and so on).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Densities below this are treated as zero when forming the inverse hazard rate.
pub const DENSITY_FLOOR: f64 = 1e-300;

/// Central-difference step for tabulated densities, as a fraction of the support width.
const TABULATED_STEP: f64 = 1e-4;

/// Number of buyers arriving in a period, supported on `{1, ..., N}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ArrivalDist {
    /// Poisson(lambda) conditioned on `1 <= n <= max_arrivals`.
    TruncatedPoisson { lambda: f64, max_arrivals: usize },
    /// `pmf[k]` is the probability of `k + 1` arrivals.
    Tabulated { pmf: Vec<f64> },
}

/// Demanded quantity `q` on `[0, q_max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum QuantityDist {
    /// Uniform(0, upper).
    Uniform { upper: f64 },
    /// Point mass.
    Fixed { quantity: f64 },
    /// Piecewise-linear CDF through `(grid[k], cdf[k])`.
    Tabulated { grid: Vec<f64>, cdf: Vec<f64> },
}

/// Marginal value `v` conditional on the demanded quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ValueDist {
    /// Exponential with rate equal to the demanded quantity: `f(v|q) = q exp(-q v)`.
    Exponential,
    /// Point mass, independent of `q`.
    Fixed { value: f64 },
    /// Piecewise-linear CDFs on a shared value grid, one row per quantity knot;
    /// rows are blended linearly between knots.
    Tabulated {
        quantities: Vec<f64>,
        values: Vec<f64>,
        cdf: Vec<Vec<f64>>,
    },
}

impl ArrivalDist {
    pub(crate) fn pmf(&self) -> Result<Vec<f64>> {
        match self {
            ArrivalDist::TruncatedPoisson {
                lambda,
                max_arrivals,
            } => {
                if !(*lambda > 0.0) || *max_arrivals == 0 {
                    return Err(Error::InvalidSpec(format!(
                        "truncated Poisson needs lambda > 0 and max_arrivals >= 1 (got {lambda}, {max_arrivals})"
                    )));
                }
                // log-space to stay finite for large n
                let logs: Vec<f64> = (1..=*max_arrivals)
                    .map(|n| {
                        let n = n as f64;
                        n * lambda.ln() - lambda - ln_factorial(n)
                    })
                    .collect();
                let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
                let total: f64 = w.iter().sum();
                Ok(w.into_iter().map(|x| x / total).collect())
            }
            ArrivalDist::Tabulated { pmf } => {
                if pmf.is_empty() || pmf.iter().any(|p| !(*p >= 0.0)) {
                    return Err(Error::InvalidSpec(
                        "tabulated arrival pmf must be nonempty and nonnegative".into(),
                    ));
                }
                let total: f64 = pmf.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidSpec(format!(
                        "tabulated arrival pmf sums to {total}, not 1"
                    )));
                }
                Ok(pmf.clone())
            }
        }
    }
}

fn ln_factorial(n: f64) -> f64 {
    (1..=n as u64).map(|k| (k as f64).ln()).sum()
}

impl QuantityDist {
    pub(crate) fn validate(&self) -> Result<()> {
        match self {
            QuantityDist::Uniform { upper } if !(*upper > 0.0) => Err(Error::InvalidSpec(
                format!("uniform quantity upper bound must be positive (got {upper})"),
            )),
            QuantityDist::Fixed { quantity } if !(*quantity >= 0.0) => Err(Error::InvalidSpec(
                format!("fixed quantity must be nonnegative (got {quantity})"),
            )),
            QuantityDist::Tabulated { grid, cdf } => validate_cdf(grid, cdf, "quantity"),
            _ => Ok(()),
        }
    }

    pub fn upper(&self) -> f64 {
        match self {
            QuantityDist::Uniform { upper } => *upper,
            QuantityDist::Fixed { quantity } => *quantity,
            QuantityDist::Tabulated { grid, .. } => *grid.last().unwrap(),
        }
    }

    pub fn lower(&self) -> f64 {
        match self {
            QuantityDist::Uniform { .. } => 0.0,
            QuantityDist::Fixed { quantity } => *quantity,
            QuantityDist::Tabulated { grid, .. } => grid[0],
        }
    }

    pub fn cdf(&self, q: f64) -> f64 {
        match self {
            QuantityDist::Uniform { upper } => (q / upper).clamp(0.0, 1.0),
            QuantityDist::Fixed { quantity } => {
                if q >= *quantity {
                    1.0
                } else {
                    0.0
                }
            }
            QuantityDist::Tabulated { grid, cdf } => interp(grid, cdf, q),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            QuantityDist::Uniform { upper } => rng.random::<f64>() * upper,
            QuantityDist::Fixed { quantity } => *quantity,
            QuantityDist::Tabulated { grid, cdf } => inverse_interp(grid, cdf, rng.random()),
        }
    }
}

impl ValueDist {
    pub(crate) fn validate(&self) -> Result<()> {
        match self {
            ValueDist::Exponential => Ok(()),
            ValueDist::Fixed { value } if !(*value >= 0.0) => Err(Error::InvalidSpec(format!(
                "fixed value must be nonnegative (got {value})"
            ))),
            ValueDist::Fixed { .. } => Ok(()),
            ValueDist::Tabulated {
                quantities,
                values,
                cdf,
            } => {
                if quantities.is_empty() || quantities.len() != cdf.len() {
                    return Err(Error::InvalidSpec(
                        "tabulated value family needs one CDF row per quantity knot".into(),
                    ));
                }
                if quantities.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::InvalidSpec(
                        "tabulated quantity knots must be strictly increasing".into(),
                    ));
                }
                cdf.iter()
                    .try_for_each(|row| validate_cdf(values, row, "conditional value"))
            }
        }
    }

    /// `F(v | q)`.
    pub fn cdf(&self, v: f64, q: f64) -> f64 {
        match self {
            ValueDist::Exponential => {
                if v <= 0.0 {
                    0.0
                } else {
                    -(-q * v).exp_m1()
                }
            }
            ValueDist::Fixed { value } => {
                if v >= *value {
                    1.0
                } else {
                    0.0
                }
            }
            ValueDist::Tabulated {
                quantities,
                values,
                cdf,
            } => {
                let (lo, hi, w) = bracket(quantities, q);
                (1.0 - w) * interp(values, &cdf[lo], v) + w * interp(values, &cdf[hi], v)
            }
        }
    }

    /// `f(v | q)`; analytic for the exponential family, central differences for tabulated CDFs.
    pub fn pdf(&self, v: f64, q: f64) -> f64 {
        match self {
            ValueDist::Exponential => {
                if v < 0.0 {
                    0.0
                } else {
                    q * (-q * v).exp()
                }
            }
            ValueDist::Fixed { .. } => 0.0,
            ValueDist::Tabulated { values, .. } => {
                let lo = values[0];
                let hi = *values.last().unwrap();
                let h = TABULATED_STEP * (hi - lo);
                let a = (v - h).max(lo);
                let b = (v + h).min(hi);
                if b <= a {
                    return 0.0;
                }
                (self.cdf(b, q) - self.cdf(a, q)) / (b - a)
            }
        }
    }

    /// Inverse hazard rate `(1 - F(v|q)) / f(v|q)`.
    pub fn inverse_hazard(&self, v: f64, q: f64) -> Result<f64> {
        if let ValueDist::Exponential = self {
            if q > 0.0 {
                return Ok(1.0 / q);
            }
            return Err(Error::DensityZero {
                value: v,
                quantity: q,
            });
        }
        let survival = 1.0 - self.cdf(v, q);
        if survival <= 0.0 {
            return Ok(0.0);
        }
        let f = self.pdf(v, q);
        if !(f > DENSITY_FLOOR) {
            return Err(Error::DensityZero {
                value: v,
                quantity: q,
            });
        }
        Ok(survival / f)
    }

    /// Quantile `F^{-1}(p | q)`.
    pub fn quantile(&self, p: f64, q: f64) -> f64 {
        match self {
            ValueDist::Exponential => -(-p).ln_1p() / q,
            ValueDist::Fixed { value } => *value,
            ValueDist::Tabulated { values, .. } => {
                let (mut lo, mut hi) = (values[0], *values.last().unwrap());
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.cdf(mid, q) < p {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                hi
            }
        }
    }

    /// Finite upper end of the support, if any.
    pub fn support_upper(&self) -> Option<f64> {
        match self {
            ValueDist::Exponential => None,
            ValueDist::Fixed { value } => Some(*value),
            ValueDist::Tabulated { values, .. } => values.last().copied(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, q: f64, rng: &mut R) -> f64 {
        match self {
            ValueDist::Exponential => {
                // Exp(rate = q) by inversion; q = 0 never reaches here for arriving buyers
                // drawn from a continuous quantity law, but guard anyway.
                let u: f64 = rng.random();
                if q > 0.0 {
                    -(-u).ln_1p() / q
                } else {
                    f64::INFINITY
                }
            }
            ValueDist::Fixed { value } => *value,
            ValueDist::Tabulated { .. } => {
                let u: f64 = rng.random();
                self.quantile(u, q)
            }
        }
    }
}

fn validate_cdf(grid: &[f64], cdf: &[f64], what: &str) -> Result<()> {
    if grid.len() < 2 || grid.len() != cdf.len() {
        return Err(Error::InvalidSpec(format!(
            "tabulated {what} CDF needs >= 2 matching grid/cdf points"
        )));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidSpec(format!(
            "tabulated {what} grid must be strictly increasing"
        )));
    }
    if cdf.windows(2).any(|w| w[1] < w[0]) || cdf[0] < 0.0 {
        return Err(Error::InvalidSpec(format!(
            "tabulated {what} CDF must be monotone nondecreasing"
        )));
    }
    if (cdf.last().unwrap() - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidSpec(format!(
            "tabulated {what} CDF must end at 1"
        )));
    }
    Ok(())
}

/// Linear interpolation, flat outside the grid.
fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[xs.len() - 1] {
        return ys[ys.len() - 1];
    }
    let k = xs.partition_point(|&g| g <= x) - 1;
    let w = (x - xs[k]) / (xs[k + 1] - xs[k]);
    ys[k] + w * (ys[k + 1] - ys[k])
}

/// Inverse of a piecewise-linear CDF.
fn inverse_interp(xs: &[f64], cdf: &[f64], u: f64) -> f64 {
    let k = cdf.partition_point(|&c| c < u);
    if k == 0 {
        return xs[0];
    }
    if k >= cdf.len() {
        return xs[xs.len() - 1];
    }
    let span = cdf[k] - cdf[k - 1];
    if span <= 0.0 {
        return xs[k];
    }
    xs[k - 1] + (u - cdf[k - 1]) / span * (xs[k] - xs[k - 1])
}

fn bracket(knots: &[f64], q: f64) -> (usize, usize, f64) {
    if knots.len() == 1 || q <= knots[0] {
        return (0, 0, 0.0);
    }
    let last = knots.len() - 1;
    if q >= knots[last] {
        return (last, last, 0.0);
    }
    let k = knots.partition_point(|&g| g <= q) - 1;
    (k, k + 1, (q - knots[k]) / (knots[k + 1] - knots[k]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_poisson_pmf_sums_to_one() {
        let pmf = ArrivalDist::TruncatedPoisson {
            lambda: 10.0,
            max_arrivals: 30,
        }
        .pmf()
        .unwrap();
        assert_eq!(pmf.len(), 30);
        assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // mode of Poisson(10) is at 9 and 10
        assert!((pmf[8] - pmf[9]).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(ArrivalDist::TruncatedPoisson {
            lambda: 0.0,
            max_arrivals: 3
        }
        .pmf()
        .is_err());
        assert!(ArrivalDist::Tabulated { pmf: vec![0.5, 0.4] }.pmf().is_err());
        assert!(QuantityDist::Uniform { upper: -1.0 }.validate().is_err());
        assert!(QuantityDist::Tabulated {
            grid: vec![0.0, 1.0],
            cdf: vec![0.5, 0.4]
        }
        .validate()
        .is_err());
    }

    #[test]
    fn exponential_inverse_hazard_is_reciprocal_rate() {
        let d = ValueDist::Exponential;
        for &(v, q) in &[(0.0, 1.0), (2.0, 0.5), (7.0, 1.9)] {
            assert!((d.inverse_hazard(v, q).unwrap() - 1.0 / q).abs() < 1e-15);
            let numeric = (1.0 - d.cdf(v, q)) / d.pdf(v, q);
            assert!((numeric - 1.0 / q).abs() < 1e-9 * (1.0 / q));
        }
    }

    #[test]
    fn tabulated_cdf_interpolates_and_inverts() {
        let grid = vec![0.0, 1.0, 3.0];
        let cdf = vec![0.0, 0.5, 1.0];
        assert_eq!(interp(&grid, &cdf, 2.0), 0.75);
        assert!((inverse_interp(&grid, &cdf, 0.75) - 2.0).abs() < 1e-15);
        assert_eq!(inverse_interp(&grid, &cdf, 0.0), 0.0);
    }

    #[test]
    fn tabulated_density_matches_slope() {
        let d = ValueDist::Tabulated {
            quantities: vec![1.0],
            values: vec![0.0, 1.0, 3.0],
            cdf: vec![vec![0.0, 0.5, 1.0]],
        };
        assert!((d.pdf(0.5, 1.0) - 0.5).abs() < 1e-9);
        assert!((d.pdf(2.0, 1.0) - 0.25).abs() < 1e-9);
        assert!((d.quantile(0.75, 1.0) - 2.0).abs() < 1e-9);
    }
}
