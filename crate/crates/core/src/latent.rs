//! Latent hidden outputs with inference and prior networks.
//!
//! Both networks are single affine maps from the site output `a` to
//! `[mu, pre_sigma]` of width `2c`, with `sigma = softplus(pre_sigma)`.
//! The latent `z_t` replaces the site output downstream; evaluation uses
//! the inference-network mean.

use crate::bayes;
use crate::graph::{self, Graph, NodeId};
use crate::tensor::Tensor;

/// Default initial latent spread.
pub const INIT_LATENT_SIGMA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentOutputLayer {
    /// `[2c x (a + 1)]`
    pub infer: Tensor,
    /// `[2c x (a + 1)]`
    pub prior: Tensor,
}

impl LatentOutputLayer {
    /// Identity mean map with a constant spread of `sigma`; the prior
    /// network starts as a copy, so the initial KL is zero.
    pub fn identity(width: usize, sigma: f64) -> Self {
        let mut w = Tensor::zeros(2 * width, width + 1);
        for i in 0..width {
            w.set(i, i, 1.0);
            w.set(width + i, width, graph::softplus_inv(sigma));
        }
        Self {
            infer: w.clone(),
            prior: w,
        }
    }

    /// All-zero networks (`mu = 0`, `sigma = ln 2`).
    pub fn zeros(input_dim: usize, latent_dim: usize) -> Self {
        let w = Tensor::zeros(2 * latent_dim, input_dim + 1);
        Self {
            infer: w.clone(),
            prior: w,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.infer.cols() - 1
    }

    pub fn latent_dim(&self) -> usize {
        self.infer.rows() / 2
    }

    /// Weight entries (bias column excluded) of both networks.
    pub fn num_weights(&self) -> usize {
        2 * self.infer.rows() * self.input_dim()
    }
}

fn heads(w: &Tensor, h: &Tensor) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let x = g.leaf(h.clone());
    let wn = g.leaf(w.clone());
    let (mu, sigma) = heads_node(&mut g, x, wn);
    (g.value(mu).clone(), g.value(sigma).clone())
}

/// `(mu_t, sigma_t)` per row of `h` from the inference network.
pub fn latent_posterior(layer: &LatentOutputLayer, h: &Tensor) -> (Tensor, Tensor) {
    heads(&layer.infer, h)
}

/// `(mu_t, sigma_t)` per row of `h` from the prior network.
pub fn latent_prior(layer: &LatentOutputLayer, h: &Tensor) -> (Tensor, Tensor) {
    heads(&layer.prior, h)
}

/// Per-row `KL(q(z_t) || p(z_t))`.
pub fn latent_kl_rows(layer: &LatentOutputLayer, h: &Tensor) -> Vec<f64> {
    let (mu, s) = latent_posterior(layer, h);
    let (mr, sr) = latent_prior(layer, h);
    (0..h.rows())
        .map(|r| bayes::kl_gaussian(mu.row_slice(r), s.row_slice(r), mr.row_slice(r), sr.row_slice(r)))
        .collect()
}

/// Graph form: splits `affine(x, w)` into the mean and softplus-spread
/// halves.
pub fn heads_node(g: &mut Graph, x: NodeId, w: NodeId) -> (NodeId, NodeId) {
    let c = g.shape(w)[0] / 2;
    let out = g.affine(x, w).expect("latent network width matches the site");
    let mu = g.slice_cols(out, 0, c).expect("latent head split");
    let pre = g.slice_cols(out, c, 2 * c).expect("latent head split");
    (mu, g.softplus(pre))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_net_gives_ln2_spread() {
        let l = LatentOutputLayer::zeros(3, 2);
        let (mu, s) = latent_posterior(&l, &Tensor::zeros(1, 3));
        assert_eq!(mu.data(), &[0.0, 0.0]);
        for &v in s.data() {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_init_has_zero_kl() {
        let l = LatentOutputLayer::identity(3, 0.05);
        let h = Tensor::from_vec(2, 3, vec![0.1, -0.2, 0.3, 0.9, 0.0, -1.0]);
        let (mu, s) = latent_posterior(&l, &h);
        assert_eq!(mu, h);
        assert!(s.data().iter().all(|&v| (v - 0.05).abs() < 1e-14));
        assert!(latent_kl_rows(&l, &h).iter().all(|&k| k == 0.0));
        assert_eq!(l.num_weights(), 4 * 3 * 3);
    }
}
