//! Chebyshev basis on `[0, Q̄]`, nodes and least-squares fitting.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Ridge added to the normal equations.
pub const RIDGE: f64 = 1e-12;

/// Chebyshev polynomials of the first kind up to `degree`, on `[0, stock_cap]` through the
/// affine map `s ↦ 2s/Q̄ − 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChebyshevBasis {
    degree: usize,
    stock_cap: f64,
}

impl ChebyshevBasis {
    pub fn new(degree: usize, stock_cap: f64) -> Result<Self> {
        if !(stock_cap > 0.0) {
            return Err(Error::InvalidInput(format!(
                "stock cap must be positive (got {stock_cap})"
            )));
        }
        Ok(Self { degree, stock_cap })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.degree + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn stock_cap(&self) -> f64 {
        self.stock_cap
    }

    fn normalize(&self, s: f64) -> Result<f64> {
        let slack = 1e-9 * self.stock_cap;
        if !(s >= -slack && s <= self.stock_cap + slack) {
            return Err(Error::Domain {
                value: s,
                lo: 0.0,
                hi: self.stock_cap,
            });
        }
        Ok((2.0 * s / self.stock_cap - 1.0).clamp(-1.0, 1.0))
    }

    /// `f_0(s̃), ..., f_n(s̃)`.
    pub fn values(&self, s: f64) -> Result<Vec<f64>> {
        let x = self.normalize(s)?;
        let mut out = Vec::with_capacity(self.len());
        out.push(1.0);
        if self.degree >= 1 {
            out.push(x);
        }
        for k in 2..=self.degree {
            out.push(2.0 * x * out[k - 1] - out[k - 2]);
        }
        Ok(out)
    }

    /// `Σ_j row[j] f_j(s̃)` by the three-term recurrence.
    pub fn eval(&self, row: &[f64], s: f64) -> Result<f64> {
        Ok(series(row, self.normalize(s)?))
    }

    /// Derivative in `s` of the series in `row`.
    pub fn derivative(&self, row: &[f64], s: f64) -> Result<f64> {
        let d = derivative_coeffs(row);
        Ok(series(&d, self.normalize(s)?) * 2.0 / self.stock_cap)
    }
}

/// Series evaluation at a normalized point.
pub(crate) fn series(row: &[f64], x: f64) -> f64 {
    match row.len() {
        0 => 0.0,
        1 => row[0],
        _ => {
            let (mut prev, mut cur) = (1.0, x);
            let mut acc = row[0] + row[1] * x;
            for &c in &row[2..] {
                let next = 2.0 * x * cur - prev;
                acc += c * next;
                prev = cur;
                cur = next;
            }
            acc
        }
    }
}

/// Chebyshev coefficients of the derivative (in the normalized variable) of `row`.
pub(crate) fn derivative_coeffs(row: &[f64]) -> Vec<f64> {
    let n = row.len();
    if n <= 1 {
        return vec![0.0];
    }
    // c'_{k-1} = c'_{k+1} + 2k c_k, with c'_0 halved at the end
    let mut d = vec![0.0; n + 1];
    for k in (1..n).rev() {
        d[k - 1] = d[k + 1] + 2.0 * k as f64 * row[k];
    }
    d[0] *= 0.5;
    d.truncate(n - 1);
    d
}

/// Distinct fixed states for the regression.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeSet {
    pub nodes: Vec<f64>,
}

/// `s_k = (Q̄/2)(1 + cos((2k − 1)π / (2m)))`, `k = 1..m`.
pub fn chebyshev_nodes(m: usize, stock_cap: f64) -> Result<NodeSet> {
    if m == 0 {
        return Err(Error::InvalidInput("need at least one node".into()));
    }
    let nodes = (1..=m)
        .map(|k| {
            let angle = (2 * k - 1) as f64 * PI / (2 * m) as f64;
            0.5 * stock_cap * (1.0 + angle.cos())
        })
        .collect();
    Ok(NodeSet { nodes })
}

/// Least-squares projector for a fixed design: coefficients = `P · values`.
#[derive(Clone, Debug)]
pub struct Projector {
    basis: ChebyshevBasis,
    design: DMatrix<f64>,
    pinv: DMatrix<f64>,
}

impl Projector {
    pub fn new(basis: ChebyshevBasis, nodes: &NodeSet) -> Result<Self> {
        let m = nodes.nodes.len();
        let p = basis.len();
        if p > m {
            return Err(Error::Singular);
        }
        let mut design = DMatrix::zeros(m, p);
        for (i, &s) in nodes.nodes.iter().enumerate() {
            for (j, f) in basis.values(s)?.into_iter().enumerate() {
                design[(i, j)] = f;
            }
        }
        let mut normal = design.transpose() * &design;
        for j in 0..p {
            normal[(j, j)] += RIDGE;
        }
        let chol = normal.cholesky().ok_or(Error::Singular)?;
        let pinv = chol.solve(&design.transpose());
        Ok(Self {
            basis,
            design,
            pinv,
        })
    }

    pub fn basis(&self) -> &ChebyshevBasis {
        &self.basis
    }

    pub fn fit(&self, values: &[f64]) -> Vec<f64> {
        let y = DVector::from_column_slice(values);
        (&self.pinv * y).iter().copied().collect()
    }

    /// Max absolute residual of `coeffs` at the nodes.
    pub fn residual(&self, coeffs: &[f64], values: &[f64]) -> f64 {
        let c = DVector::from_column_slice(coeffs);
        let fitted = &self.design * c;
        fitted
            .iter()
            .zip(values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_and_linear_terms() {
        let b = ChebyshevBasis::new(4, 10.0).unwrap();
        for s in [0.0, 3.3, 10.0] {
            assert_eq!(b.eval(&[1.0, 0.0, 0.0, 0.0, 0.0], s).unwrap(), 1.0);
        }
        assert_eq!(b.eval(&[0.0, 1.0, 0.0], 10.0).unwrap(), 1.0);
        assert_eq!(b.eval(&[0.0, 0.0, 1.0], 5.0).unwrap(), -1.0);
        assert!(b.eval(&[1.0], 10.5).is_err());
        assert!(b.eval(&[1.0], -0.1).is_err());
    }

    #[test]
    fn matches_trigonometric_definition() {
        let b = ChebyshevBasis::new(7, 2.0).unwrap();
        for &s in &[0.1, 0.7, 1.3, 1.95] {
            let x: f64 = s - 1.0;
            let vals = b.values(s).unwrap();
            for (k, v) in vals.iter().enumerate() {
                assert!((v - (k as f64 * x.acos()).cos()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let b = ChebyshevBasis::new(4, 10.0).unwrap();
        let row = [1.2, -0.7, 0.3, 0.25, -0.1];
        for &s in &[0.5, 2.0, 5.0, 9.5] {
            let h = 1e-6;
            let fd = (b.eval(&row, s + h).unwrap() - b.eval(&row, s - h).unwrap()) / (2.0 * h);
            assert!((b.derivative(&row, s).unwrap() - fd).abs() < 1e-7);
        }
        assert_eq!(derivative_coeffs(&[3.0]), vec![0.0]);
    }

    #[test]
    fn node_formula() {
        assert_eq!(chebyshev_nodes(1, 10.0).unwrap().nodes.len(), 1);
        assert!((chebyshev_nodes(1, 10.0).unwrap().nodes[0] - 5.0).abs() < 1e-12);
        let two = chebyshev_nodes(2, 2.0).unwrap().nodes;
        assert!((two[0] - (1.0 + (PI / 4.0).cos())).abs() < 1e-12);
        assert!((two[1] - (1.0 + (3.0 * PI / 4.0).cos())).abs() < 1e-12);
        for m in 1..=200 {
            let n = chebyshev_nodes(m, 7.0).unwrap().nodes;
            assert!(n.iter().all(|&s| s > 0.0 && s < 7.0));
            assert!(n.windows(2).all(|w| w[0] > w[1]));
        }
        assert!(chebyshev_nodes(0, 1.0).is_err());
    }

    #[test]
    fn interpolation_reproduces_node_values() {
        let b = ChebyshevBasis::new(4, 10.0).unwrap();
        let nodes = chebyshev_nodes(5, 10.0).unwrap();
        let p = Projector::new(b, &nodes).unwrap();
        let values: Vec<f64> = nodes.nodes.iter().map(|s| (1.0 + s).ln() * 3.0).collect();
        let c = p.fit(&values);
        assert!(p.residual(&c, &values) < 1e-8);
        assert!(Projector::new(ChebyshevBasis::new(5, 10.0).unwrap(), &nodes).is_err());
    }
}
