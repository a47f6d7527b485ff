//! Dense feed-forward network with hand-written reverse mode, batched column-wise.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    fn slope(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

/// Parameter-shaped container, used for gradients and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.weights.nrows(), l.weights.ncols()))
                .collect(),
            biases: net.layers.iter().map(|l| DVector::zeros(l.bias.len())).collect(),
        }
    }

    /// Weights then bias of each layer, weights column-major.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        out
    }
}

/// Activations recorded by a forward pass, for the backward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    /// `outputs[0]` is the input batch; `outputs[k]` the output of layer `k - 1`.
    pub outputs: Vec<DMatrix<f64>>,
}

impl Tape {
    pub fn output(&self) -> &DMatrix<f64> {
        self.outputs.last().expect("tape holds the input at least")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// `widths = [input, hidden..., output]`. Hidden weights are uniform on `±1/√fan_in`,
    /// the last layer on `±final_scale`.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        final_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidInput(format!("bad layer widths {widths:?}")));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let (fan_in, fan_out) = (widths[k], widths[k + 1]);
                let last = k + 1 == n;
                let scale = if last { final_scale } else { 1.0 / (fan_in as f64).sqrt() };
                let mut draw = || rng.random_range(-scale..=scale);
                let weights = DMatrix::from_fn(fan_out, fan_in, |_, _| draw());
                let bias = DVector::from_fn(fan_out, |_, _| draw());
                Layer {
                    weights,
                    bias,
                    activation: if last { output } else { hidden },
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Forward pass over a batch stored one example per column.
    pub fn forward(&self, input: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = affine(layer, &x);
        }
        x
    }

    /// Single example.
    pub fn forward_one(&self, input: &[f64]) -> Vec<f64> {
        self.forward(&DMatrix::from_column_slice(input.len(), 1, input))
            .as_slice()
            .to_vec()
    }

    pub fn forward_tape(&self, input: &DMatrix<f64>) -> Tape {
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(input.clone());
        for layer in &self.layers {
            let next = affine(layer, outputs.last().unwrap());
            outputs.push(next);
        }
        Tape { outputs }
    }

    /// Gradients of `Σ upstream ⊙ output` with respect to the parameters and to the input.
    pub fn backward(&self, tape: &Tape, upstream: &DMatrix<f64>) -> (Gradients, DMatrix<f64>) {
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut delta = upstream.clone();
        for k in (0..n).rev() {
            let layer = &self.layers[k];
            let y = &tape.outputs[k + 1];
            delta.zip_apply(y, |d, y| *d *= layer.activation.slope(y));
            weights.push(&delta * tape.outputs[k].transpose());
            biases.push(delta.column_sum());
            delta = layer.weights.transpose() * &delta;
        }
        weights.reverse();
        biases.reverse();
        (Gradients { weights, biases }, delta)
    }

    /// `θ ← τ θ_src + (1 − τ) θ`.
    pub fn soft_update(&mut self, src: &Mlp, tau: f64) {
        for (dst, s) in self.layers.iter_mut().zip(&src.layers) {
            dst.weights.zip_apply(&s.weights, |d, s| *d = tau * s + (1.0 - tau) * *d);
            dst.bias.zip_apply(&s.bias, |d, s| *d = tau * s + (1.0 - tau) * *d);
        }
    }

    /// Parameters in the order of [`Gradients::flat`].
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.as_mut_slice().copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
        Ok(())
    }
}

fn affine(layer: &Layer, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = &layer.weights * x;
    for mut col in z.column_iter_mut() {
        col += &layer.bias;
    }
    z.apply(|v| *v = layer.activation.apply(*v));
    z
}

/// Adam with the usual bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    /// Descent step along `grad`.
    pub fn step(&mut self, net: &mut Mlp, grad: &Gradients) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let lr = self.lr;
        let eps = self.eps;
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        };
        for (k, layer) in net.layers.iter_mut().enumerate() {
            update(
                layer.weights.as_mut_slice(),
                grad.weights[k].as_slice(),
                self.m.weights[k].as_mut_slice(),
                self.v.weights[k].as_mut_slice(),
            );
            update(
                layer.bias.as_mut_slice(),
                grad.biases[k].as_slice(),
                self.m.biases[k].as_mut_slice(),
                self.v.biases[k].as_mut_slice(),
            );
        }
    }
}

/// Largest relative error between `backward` and central differences of
/// `Σ upstream ⊙ forward(input)`, over every parameter.
pub fn gradient_check(net: &Mlp, input: &DMatrix<f64>, upstream: &DMatrix<f64>, h: f64) -> f64 {
    let tape = net.forward_tape(input);
    let (grad, _) = net.backward(&tape, upstream);
    let analytic = grad.flat();
    let objective = |n: &Mlp| n.forward(input).dot(upstream);
    let base = net.params();
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (i, &g) in analytic.iter().enumerate() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        probe.set_params(&p).unwrap();
        let up = objective(&probe);
        p[i] = base[i] - h;
        probe.set_params(&p).unwrap();
        let down = objective(&probe);
        let fd = (up - down) / (2.0 * h);
        let err = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn net(widths: &[usize], seed: u64) -> Mlp {
        let mut g = rng::stream(seed, 0);
        Mlp::new(widths, Activation::Tanh, Activation::Identity, 0.5, &mut g).unwrap()
    }

    #[test]
    fn zero_weights_pass_biases_through() {
        let mut m = net(&[2, 3, 1], 1);
        for l in &mut m.layers {
            l.weights.fill(0.0);
        }
        m.layers[0].bias = DVector::from_vec(vec![0.5, -0.5, 1.0]);
        m.layers[1].bias = DVector::from_vec(vec![0.25]);
        assert_eq!(m.forward_one(&[3.0, -7.0]), vec![0.25]);
    }

    #[test]
    fn hand_computed_two_by_two() {
        let m = Mlp {
            layers: vec![Layer {
                weights: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 0.5]),
                bias: DVector::from_vec(vec![0.1, -0.2]),
                activation: Activation::Identity,
            }],
        };
        let y = m.forward_one(&[1.0, 2.0]);
        assert!((y[0] - 5.1).abs() < 1e-12);
        assert!((y[1] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut g = rng::stream(5, 1);
        for (widths, out) in [
            (vec![2, 5, 4, 1], Activation::Sigmoid),
            (vec![3, 6, 6, 6, 1], Activation::Identity),
            (vec![2, 3, 2], Activation::Tanh),
        ] {
            let m = Mlp::new(&widths, Activation::Tanh, out, 0.7, &mut g).unwrap();
            let input = DMatrix::from_fn(widths[0], 4, |_, _| g.random_range(-1.0..1.0));
            let upstream = DMatrix::from_fn(*widths.last().unwrap(), 4, |_, _| g.random_range(-1.0..1.0));
            assert!(gradient_check(&m, &input, &upstream, 1e-5) < 1e-4);
        }
    }

    #[test]
    fn zero_and_scaled_upstream() {
        let m = net(&[2, 4, 1], 3);
        let input = DMatrix::from_row_slice(2, 2, &[0.1, 0.4, -0.3, 0.9]);
        let tape = m.forward_tape(&input);
        let (g0, _) = m.backward(&tape, &DMatrix::zeros(1, 2));
        assert!(g0.flat().iter().all(|&x| x == 0.0));
        let up = DMatrix::from_row_slice(1, 2, &[0.3, -1.1]);
        let (g1, _) = m.backward(&tape, &up);
        let (g3, _) = m.backward(&tape, &(&up * 3.0));
        for (a, b) in g1.flat().iter().zip(g3.flat()) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let m = net(&[3, 5, 1], 8);
        let x = [0.2, -0.4, 0.7];
        let tape = m.forward_tape(&DMatrix::from_column_slice(3, 1, &x));
        let (_, dx) = m.backward(&tape, &DMatrix::from_element(1, 1, 1.0));
        for i in 0..3 {
            let mut up = x;
            let mut dn = x;
            up[i] += 1e-6;
            dn[i] -= 1e-6;
            let fd = (m.forward_one(&up)[0] - m.forward_one(&dn)[0]) / 2e-6;
            assert!((dx[(i, 0)] - fd).abs() < 1e-7);
        }
    }

    #[test]
    fn soft_update_extremes() {
        let a = net(&[2, 4, 1], 1);
        let mut b = net(&[2, 4, 1], 2);
        let orig = b.clone();
        b.soft_update(&a, 0.0);
        assert_eq!(b, orig);
        b.soft_update(&a, 1.0);
        assert_eq!(b, a);
    }

    #[test]
    fn targets_converge_geometrically() {
        let a = net(&[2, 4, 1], 1);
        let mut b = net(&[2, 4, 1], 2);
        let gap0 = dist(&a, &b);
        let tau = 0.1;
        for _ in 0..50 {
            b.soft_update(&a, tau);
        }
        let expected = gap0 * (1.0 - tau).powi(50);
        assert!((dist(&a, &b) - expected).abs() < 1e-9 * gap0.max(1.0));
    }

    fn dist(a: &Mlp, b: &Mlp) -> f64 {
        a.params()
            .iter()
            .zip(b.params())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn adam_reduces_a_quadratic_loss() {
        let mut m = net(&[1, 8, 1], 4);
        let mut opt = Adam::new(&m, 1e-2);
        let x = DMatrix::from_row_slice(1, 5, &[-1.0, -0.5, 0.0, 0.5, 1.0]);
        let target = x.map(|v| 0.5 * v);
        let loss = |m: &Mlp| (m.forward(&x) - &target).norm_squared();
        let before = loss(&m);
        for _ in 0..300 {
            let tape = m.forward_tape(&x);
            let up = (tape.output() - &target) * 2.0;
            let (g, _) = m.backward(&tape, &up);
            opt.step(&mut m, &g);
        }
        assert!(loss(&m) < 0.05 * before);
    }
}
