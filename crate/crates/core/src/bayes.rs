//! Diagonal Gaussian posteriors over weight matrices.
//!
//! Each wrapped weight carries a posterior `N(mu, sigma^2)` with
//! `sigma = softplus(rho)` and a fixed Gaussian prior `N(prior_mu,
//! prior_sigma^2)`. Training samples `mu + sigma * eps`; evaluation uses
//! `mu` alone.

use serde::{Deserialize, Serialize};

use crate::graph::{self, Graph, NodeId};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Initial posterior spread relative to the prior spread.
pub const INIT_SIGMA_RATIO: f64 = 0.05;

/// Default prior standard deviation for LSTM models.
pub const LSTM_PRIOR_SIGMA: f64 = 1.0;

/// Prior variance used for Transformer models. The prior standard
/// deviation is its square root.
pub const TRANSFORMER_PRIOR_VARIANCE: f64 = 1.0e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianVariational {
    pub mu: Tensor,
    pub rho: Tensor,
    pub prior_mu: Tensor,
    pub prior_sigma: Tensor,
}

/// Samples per Monte-Carlo estimate and the per-batch KL weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BayesTrainConfig {
    pub num_samples: usize,
    pub kl_scale: f64,
}

impl Default for BayesTrainConfig {
    fn default() -> Self {
        Self {
            num_samples: 1,
            kl_scale: 1.0,
        }
    }
}

impl GaussianVariational {
    /// Posterior mean at the prior mean, posterior spread at
    /// `INIT_SIGMA_RATIO * prior_sigma`.
    pub fn from_prior(prior_mu: Tensor, prior_sigma: f64) -> Self {
        assert!(prior_sigma > 0.0, "prior sigma must be positive");
        let (r, c) = (prior_mu.rows(), prior_mu.cols());
        Self {
            mu: prior_mu.clone(),
            rho: Tensor::filled(r, c, graph::softplus_inv(INIT_SIGMA_RATIO * prior_sigma)),
            prior_mu,
            prior_sigma: Tensor::filled(r, c, prior_sigma),
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        self.mu.shape()
    }

    pub fn sigma(&self) -> Tensor {
        self.rho.map(graph::softplus)
    }

    pub fn set_sigma(&mut self, sigma: f64) {
        self.rho.fill(graph::softplus_inv(sigma));
    }

    /// Closed-form `KL(q || prior)` summed over elements.
    pub fn kl(&self) -> f64 {
        kl_gaussian(
            self.mu.data(),
            self.sigma().data(),
            self.prior_mu.data(),
            self.prior_sigma.data(),
        )
    }

    /// `|mu| / sigma` per element.
    pub fn snr(&self) -> Vec<f64> {
        self.mu
            .data()
            .iter()
            .zip(self.sigma().data())
            .map(|(m, s)| m.abs() / s)
            .collect()
    }
}

/// One reparameterised draw `mu + sigma * eps`, `eps ~ N(0, I)`.
pub fn sample_params(gv: &GaussianVariational, rng: &mut RngStream) -> Tensor {
    let sigma = gv.sigma();
    let mut out = gv.mu.clone();
    for (o, s) in out.data_mut().iter_mut().zip(sigma.data()) {
        *o += s * rng.normal();
    }
    out
}

/// `sum_i log(sr_i / s_i) + (s_i^2 + (m_i - mr_i)^2) / (2 sr_i^2) - 1/2`.
pub fn kl_gaussian(mu: &[f64], sigma: &[f64], prior_mu: &[f64], prior_sigma: &[f64]) -> f64 {
    mu.iter()
        .zip(sigma)
        .zip(prior_mu.iter().zip(prior_sigma))
        .map(|((&m, &s), (&mr, &sr))| {
            let d = m - mr;
            (sr / s).ln() + (s * s + d * d) / (2.0 * sr * sr) - 0.5
        })
        .sum()
}

/// Differentiable sample: `mu + softplus(rho) * eps` with `eps` drawn from
/// `rng`. Returns the sample node.
pub fn sample_node(g: &mut Graph, mu: NodeId, rho: NodeId, rng: &mut RngStream) -> NodeId {
    let [r, c] = g.shape(mu);
    let eps = g.leaf(Tensor::from_vec(r, c, rng.normals(r * c)));
    let sigma = g.softplus(rho);
    let noise = g.mul(sigma, eps).expect("sigma and eps share a shape");
    g.add(mu, noise).expect("mu and noise share a shape")
}

/// Graph form of [`kl_gaussian`]; every argument is a node of equal shape.
pub fn kl_node(g: &mut Graph, mu: NodeId, sigma: NodeId, prior_mu: NodeId, prior_sigma: NodeId) -> NodeId {
    let ratio = g.div(prior_sigma, sigma).expect("kl operands share a shape");
    let log_ratio = g.ln(ratio);
    let s2 = g.square(sigma);
    let d = g.sub(mu, prior_mu).expect("kl operands share a shape");
    let d2 = g.square(d);
    let num = g.add(s2, d2).expect("kl operands share a shape");
    let sr2 = g.square(prior_sigma);
    let den = g.scale(sr2, 2.0);
    let quad = g.div(num, den).expect("kl operands share a shape");
    let terms = g.add(log_ratio, quad).expect("kl operands share a shape");
    let terms = g.add_const(terms, -0.5);
    g.sum(terms)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_of_prior_is_zero_and_unit_shift_is_half() {
        assert_eq!(kl_gaussian(&[0.3], &[0.7], &[0.3], &[0.7]), 0.0);
        assert!((kl_gaussian(&[1.0], &[1.0], &[0.0], &[1.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn init_only_has_spread_gap() {
        let gv = GaussianVariational::from_prior(Tensor::row(&[0.5, -0.2]), 1.0);
        assert!(gv.prior_sigma.data().iter().all(|&s| s == 1.0));
        let per = (1.0f64 / 0.05).ln() + 0.05 * 0.05 / 2.0 - 0.5;
        assert!((gv.kl() - 2.0 * per).abs() < 1e-12);
    }

    #[test]
    fn vanishing_sigma_sample_is_mean() {
        let mut gv = GaussianVariational::from_prior(Tensor::row(&[0.25, -3.0]), 1.0);
        gv.rho.fill(-1000.0);
        let s = sample_params(&gv, &mut RngStream::new(4));
        assert_eq!(s, gv.mu);
    }

    #[test]
    fn kl_node_matches_closed_form() {
        let mut g = Graph::new();
        let mu = g.leaf(Tensor::row(&[0.1, -0.4]));
        let s = g.leaf(Tensor::row(&[0.3, 1.2]));
        let mr = g.leaf(Tensor::row(&[0.0, 0.2]));
        let sr = g.leaf(Tensor::row(&[1.0, 0.5]));
        let k = kl_node(&mut g, mu, s, mr, sr);
        let want = kl_gaussian(&[0.1, -0.4], &[0.3, 1.2], &[0.0, 0.2], &[1.0, 0.5]);
        assert!((g.value(k).item() - want).abs() < 1e-14);
    }
}
