//! Activations that are learnable mixtures of a fixed basis.
//!
//! At a site of width `D` the output is
//! `out_d = sum_j lambda[j, d] * phi_j(pre_d)` with the basis
//! (sigmoid, tanh, relu, gelu). Both `lambda` and the site's weight matrix
//! carry Gaussian posteriors and are sampled independently.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bayes::{self, GaussianVariational};
use crate::graph::{self, Graph, NodeId};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    Gelu,
}

/// Basis order. Row `j` of every `lambda` matrix belongs to `BASIS[j]`.
pub const BASIS: [Activation; 4] = [
    Activation::Sigmoid,
    Activation::Tanh,
    Activation::Relu,
    Activation::Gelu,
];

/// Prior standard deviation of the basis coefficients.
pub const LAMBDA_PRIOR_SIGMA: f64 = 1.0;

impl Activation {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => graph::sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Gelu => graph::gelu(x),
        }
    }

    pub fn node(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
        }
    }

    pub fn basis_index(self) -> usize {
        BASIS.iter().position(|&a| a == self).expect("every activation is in the basis")
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpActivation {
    /// `[K x D]` coefficients.
    pub lambda: GaussianVariational,
    /// Posterior over the site's weight matrix; `None` for sites that mix
    /// an existing pre-activation (the h-gate).
    pub theta: Option<GaussianVariational>,
}

impl GpActivation {
    /// Coefficient prior one-hot on `original`, so the initial mixture
    /// reproduces the site's usual activation.
    pub fn new(original: Activation, width: usize, theta: Option<GaussianVariational>) -> Self {
        let mut prior = Tensor::zeros(BASIS.len(), width);
        prior.row_slice_mut(original.basis_index()).fill(1.0);
        Self {
            lambda: GaussianVariational::from_prior(prior, LAMBDA_PRIOR_SIGMA),
            theta,
        }
    }

    pub fn width(&self) -> usize {
        self.lambda.shape()[1]
    }

    pub fn kl(&self) -> f64 {
        self.lambda.kl() + self.theta.as_ref().map_or(0.0, GaussianVariational::kl)
    }
}

/// `sum_j mul_row(phi_j(pre), lambda[j])` for a `[K x D]` lambda node.
pub fn mix_node(g: &mut Graph, pre: NodeId, lambda: NodeId) -> NodeId {
    let mut acc: Option<NodeId> = None;
    for (j, act) in BASIS.iter().enumerate() {
        let phi = act.node(g, pre);
        let coef = g.slice_rows(lambda, j, j + 1).expect("lambda has one row per basis function");
        let term = g.mul_row(phi, coef).expect("lambda width matches the site width");
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term).expect("terms share a shape"),
        });
    }
    acc.expect("basis is not empty")
}

/// Plain-tensor forward of one GP site. `rng = None` uses posterior means;
/// otherwise `lambda` and `theta` are each sampled from their own
/// sub-stream. `input` is the site input without the bias column, or the
/// pre-activation itself when the site has no weight matrix.
pub fn gp_activation_forward(input: &Tensor, gp: &GpActivation, rng: Option<&RngStream>) -> Tensor {
    let draw = |gv: &GaussianVariational, label: &str| match rng {
        Some(r) => bayes::sample_params(gv, &mut r.derive(label)),
        None => gv.mu.clone(),
    };
    let lambda = draw(&gp.lambda, "lambda");
    let pre = match &gp.theta {
        Some(theta) => {
            let w = draw(theta, "theta");
            let mut g = Graph::new();
            let x = g.leaf(input.clone());
            let wn = g.leaf(w);
            let p = g.affine(x, wn).expect("input width matches theta");
            g.value(p).clone()
        }
        None => input.clone(),
    };
    let mut out = Tensor::zeros(pre.rows(), pre.cols());
    for r in 0..pre.rows() {
        for d in 0..pre.cols() {
            let x = pre.get(r, d);
            let v: f64 = BASIS
                .iter()
                .enumerate()
                .map(|(j, a)| lambda.get(j, d) * a.eval(x))
                .sum();
            out.set(r, d, v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_mixture_at_zero() {
        let mut gp = GpActivation::new(Activation::Tanh, 3, None);
        gp.lambda.mu.fill(0.25);
        let out = gp_activation_forward(&Tensor::zeros(2, 3), &gp, None);
        assert!(out.data().iter().all(|&v| (v - 0.125).abs() < 1e-15));
    }

    #[test]
    fn one_hot_mixture_is_the_original_activation() {
        let gp = GpActivation::new(Activation::Sigmoid, 2, None);
        let x = Tensor::row(&[0.7, -1.3]);
        let out = gp_activation_forward(&x, &gp, None);
        assert_eq!(out.data(), &[graph::sigmoid(0.7), graph::sigmoid(-1.3)]);
    }

    #[test]
    fn mix_node_matches_tensor_forward() {
        let mut gp = GpActivation::new(Activation::Tanh, 2, None);
        gp.lambda.mu = Tensor::from_vec(4, 2, vec![0.3, -0.2, 0.9, 0.1, -0.5, 0.4, 0.2, 0.8]);
        let x = Tensor::from_vec(2, 2, vec![0.4, -0.9, 1.5, 0.05]);
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let ln = g.leaf(gp.lambda.mu.clone());
        let out = mix_node(&mut g, xn, ln);
        let want = gp_activation_forward(&x, &gp, None);
        for (a, b) in g.value(out).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn lambda_parameter_count() {
        let gp = GpActivation::new(Activation::Tanh, 7, None);
        // mean and spread per basis function per node
        assert_eq!(2 * gp.lambda.mu.len(), 2 * BASIS.len() * 7);
    }
}
