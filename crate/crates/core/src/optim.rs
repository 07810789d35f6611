//! Plain SGD with optional global-norm clipping and a learning rate that
//! is halved whenever the validation perplexity stops improving.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SgdState {
    lr: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Epochs without dev improvement tolerated before each halving.
    pub halving_patience: usize,
    best_dev_ppl: Option<f64>,
    stalled_epochs: usize,
    halvings: usize,
}

/// One trainable tensor together with its accumulated gradient.
pub struct ParamGrad<'a> {
    pub value: &'a mut Tensor,
    pub grad: &'a mut Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Applied { grad_norm: f64, clipped: bool },
    SkippedNonFinite,
}

impl SgdState {
    pub fn new(lr: f64) -> Self {
        assert!(lr > 0.0 && lr.is_finite(), "learning rate must be positive, got {lr}");
        Self {
            lr,
            clip_norm: None,
            halving_patience: 1,
            best_dev_ppl: None,
            stalled_epochs: 0,
            halvings: 0,
        }
    }

    pub fn with_clip_norm(mut self, clip: Option<f64>) -> Self {
        self.clip_norm = clip;
        self
    }

    pub fn with_patience(mut self, epochs: usize) -> Self {
        self.halving_patience = epochs.max(1);
        self
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn halvings(&self) -> usize {
        self.halvings
    }

    pub fn best_dev_ppl(&self) -> Option<f64> {
        self.best_dev_ppl
    }

    /// Feeds one epoch's dev perplexity; returns true if the rate was halved.
    pub fn observe_dev_ppl(&mut self, ppl: f64) -> bool {
        match self.best_dev_ppl {
            Some(best) if ppl >= best => {
                self.stalled_epochs += 1;
                if self.stalled_epochs >= self.halving_patience {
                    self.stalled_epochs = 0;
                    self.lr *= 0.5;
                    self.halvings += 1;
                    return true;
                }
                false
            }
            _ => {
                self.best_dev_ppl = Some(ppl);
                self.stalled_epochs = 0;
                false
            }
        }
    }
}

/// `p <- p - lr * grad` for every parameter, then zeroes the gradients.
///
/// A non-finite gradient anywhere skips the whole update (gradients are
/// still zeroed).
pub fn sgd_step(params: &mut [ParamGrad<'_>], state: &SgdState) -> StepOutcome {
    let norm_sq: f64 = params.iter().map(|p| p.grad.sum_squares()).sum();
    let outcome = if !norm_sq.is_finite() {
        warn!("non-finite gradient norm; skipping SGD step");
        StepOutcome::SkippedNonFinite
    } else {
        let grad_norm = norm_sq.sqrt();
        let (factor, clipped) = match state.clip_norm {
            Some(c) if grad_norm > c => (c / grad_norm, true),
            _ => (1.0, false),
        };
        let step = state.lr * factor;
        for p in params.iter_mut() {
            for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v -= step * g;
            }
        }
        StepOutcome::Applied { grad_norm, clipped }
    };
    for p in params.iter_mut() {
        p.grad.fill(0.0);
    }
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(p: f64, g: f64, state: &SgdState) -> (f64, f64, StepOutcome) {
        let mut value = Tensor::scalar(p);
        let mut grad = Tensor::scalar(g);
        let out = sgd_step(
            &mut [ParamGrad {
                value: &mut value,
                grad: &mut grad,
            }],
            state,
        );
        (value.item(), grad.item(), out)
    }

    #[test]
    fn plain_update() {
        let (p, g, _) = step(1.0, 0.5, &SgdState::new(0.1));
        assert!((p - 0.95).abs() < 1e-15);
        assert_eq!(g, 0.0);
        let (p, _, _) = step(1.0, 0.0, &SgdState::new(0.1));
        assert_eq!(p, 1.0);
    }

    #[test]
    fn global_norm_clipping_scales_gradient() {
        let state = SgdState::new(1.0).with_clip_norm(Some(1.0));
        let mut a = Tensor::row(&[0.0, 0.0]);
        let mut ga = Tensor::row(&[6.0, 8.0]); // norm 10
        let out = sgd_step(&mut [ParamGrad { value: &mut a, grad: &mut ga }], &state);
        assert_eq!(out, StepOutcome::Applied { grad_norm: 10.0, clipped: true });
        assert!((a.data()[0] + 0.6).abs() < 1e-15);
        assert!((a.data()[1] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_skips() {
        let (p, g, out) = step(1.0, f64::NAN, &SgdState::new(0.1));
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(p, 1.0);
        assert_eq!(g, 0.0);
    }

    #[test]
    fn halving_only_on_stall() {
        let mut s = SgdState::new(1.0);
        assert!(!s.observe_dev_ppl(100.0));
        assert!(!s.observe_dev_ppl(90.0));
        assert!(s.observe_dev_ppl(95.0));
        assert_eq!(s.lr(), 0.5);
        assert!(!s.observe_dev_ppl(80.0));
        assert_eq!(s.lr(), 0.5);
        let mut patient = SgdState::new(1.0).with_patience(2);
        patient.observe_dev_ppl(10.0);
        assert!(!patient.observe_dev_ppl(11.0));
        assert!(patient.observe_dev_ppl(12.0));
    }
}
