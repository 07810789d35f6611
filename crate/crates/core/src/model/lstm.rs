//! LSTM language model.
//!
//! At step `t` every layer reads `[x_{t-1}, h_{t-1}, 1]`:
//!
//! ```text
//! f = sigmoid(Wf [x, h, 1])    i = sigmoid(Wi [x, h, 1])
//! c~ = tanh(Wc [x, h, 1])      o = sigmoid(Wo [x, h, 1])
//! c_t = f * c_{t-1} + i * c~   h_t = o * tanh(c_t)
//! ```
//!
//! and the top layer's `h_t` feeds `log_softmax(Wv h_t)`. Rows are batch
//! entries; the recurrence runs over time steps.

use super::{ForwardPass, Fwd, LstmConfig, ModelError, Site, SiteKind};
use crate::corpus::Batch;
use crate::graph::{Graph, ShapeError};
use crate::tensor::Tensor;

/// Gate matrices of one layer, each `[D x (in + D + 1)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerParams {
    pub wi: Tensor,
    pub wf: Tensor,
    pub wc: Tensor,
    pub wo: Tensor,
}

/// One cell update on plain tensors (rows are independent sequences).
/// Returns `(h_t, c_t)`.
pub fn lstm_cell_step(
    x: &Tensor,
    h: &Tensor,
    c: &Tensor,
    p: &LstmLayerParams,
) -> Result<(Tensor, Tensor), ShapeError> {
    let mut g = Graph::new();
    let xn = g.leaf(x.clone());
    let hn = g.leaf(h.clone());
    let cn = g.leaf(c.clone());
    let xh = g.concat_cols(&[xn, hn])?;
    let gate = |w: &Tensor, g: &mut Graph| {
        let wn = g.leaf(w.clone());
        g.affine(xh, wn)
    };
    let pi = gate(&p.wi, &mut g)?;
    let pf = gate(&p.wf, &mut g)?;
    let pc = gate(&p.wc, &mut g)?;
    let po = gate(&p.wo, &mut g)?;
    let i = g.sigmoid(pi);
    let f = g.sigmoid(pf);
    let ct = g.tanh(pc);
    let o = g.sigmoid(po);
    let keep = g.mul(f, cn)?;
    let write = g.mul(i, ct)?;
    let c_new = g.add(keep, write)?;
    let tc = g.tanh(c_new);
    let h_new = g.mul(o, tc)?;
    Ok((g.value(h_new).clone(), g.value(c_new).clone()))
}

pub(crate) fn forward(f: &mut Fwd<'_>, cfg: &LstmConfig, batch: &Batch) -> Result<ForwardPass, ModelError> {
    let b = batch.batch_size();
    let d = cfg.hidden_dim;
    let emb = f.weight("emb");
    let out_w = f.weight("out");
    let mut h: Vec<_> = (0..cfg.num_layers).map(|_| f.g.leaf(Tensor::zeros(b, d))).collect();
    let mut c = h.clone();

    let mut step_logp = Vec::with_capacity(batch.num_steps());
    let mut targets = Vec::with_capacity(b * batch.num_steps());
    let mut positions = Vec::with_capacity(b * batch.num_steps());
    for t in 0..batch.num_steps() {
        let step_targets = batch.targets_at(t);
        let valid: Vec<f64> = step_targets.iter().map(|x| if x.is_some() { 1.0 } else { 0.0 }).collect();
        let mut x = f.g.embedding(emb, &batch.inputs_at(t))?;
        x = f.dropout(x, &format!("emb/t{t}"));
        for l in 1..=cfg.num_layers {
            let xh = f.g.concat_cols(&[x, h[l - 1]])?;
            let i = f.site(Site::new(l, SiteKind::InputGate), xh)?;
            let fg = f.site(Site::new(l, SiteKind::ForgetGate), xh)?;
            let ct = f.site(Site::new(l, SiteKind::CellInput), xh)?;
            let o = f.site(Site::new(l, SiteKind::OutputGate), xh)?;
            let keep = f.g.mul(fg, c[l - 1])?;
            let write = f.g.mul(i, ct)?;
            let c_new = f.g.add(keep, write)?;
            let tc = f.site(Site::new(l, SiteKind::HGate), c_new)?;
            let h_new = f.g.mul(o, tc)?;
            h[l - 1] = h_new;
            c[l - 1] = c_new;
            // the recurrence keeps the deterministic state; z only flows upward
            let z = f.latent(Site::new(l, SiteKind::Hidden), h_new, &valid)?;
            x = f.dropout(z, &format!("l{l}/t{t}"));
        }
        let logits = f.g.matmul_bt(x, out_w)?;
        step_logp.push(f.g.log_softmax(logits));
        positions.extend((0..b).map(|s| (s, t)));
        targets.extend(step_targets);
    }
    let logp = f.g.concat_rows(&step_logp)?;
    Ok(ForwardPass {
        logp,
        targets,
        positions,
        latent_kl: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::sigmoid;

    fn zero_params(input: usize, d: usize) -> LstmLayerParams {
        let z = Tensor::zeros(d, input + d + 1);
        LstmLayerParams {
            wi: z.clone(),
            wf: z.clone(),
            wc: z.clone(),
            wo: z,
        }
    }

    #[test]
    fn zero_weights_zero_cell() {
        let p = zero_params(2, 3);
        let (h, c) = lstm_cell_step(&Tensor::zeros(1, 2), &Tensor::zeros(1, 3), &Tensor::zeros(1, 3), &p).unwrap();
        assert!(h.data().iter().chain(c.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_unit_cell() {
        let p = zero_params(2, 3);
        let (h, c) =
            lstm_cell_step(&Tensor::zeros(1, 2), &Tensor::zeros(1, 3), &Tensor::filled(1, 3, 1.0), &p).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.5));
        let want = 0.5 * 0.5f64.tanh();
        assert!(h.data().iter().all(|&v| (v - want).abs() < 1e-15));
        assert!((want - 0.23105).abs() < 1e-5);
    }

    #[test]
    fn scalar_oracle() {
        // D = 1, one input: hand-written scalar LSTM
        let w = |a: f64, b: f64, c: f64| Tensor::row(&[a, b, c]);
        let p = LstmLayerParams {
            wi: w(0.3, -0.2, 0.1),
            wf: w(-0.5, 0.4, 0.2),
            wc: w(0.9, 0.1, -0.3),
            wo: w(0.2, 0.7, 0.05),
        };
        let (x, h0, c0) = (0.8, -0.4, 0.6);
        let lin = |t: &Tensor| t.data()[0] * x + t.data()[1] * h0 + t.data()[2];
        let i = sigmoid(lin(&p.wi));
        let f = sigmoid(lin(&p.wf));
        let ct = lin(&p.wc).tanh();
        let o = sigmoid(lin(&p.wo));
        let c1 = f * c0 + i * ct;
        let h1 = o * c1.tanh();
        let (h, c) = lstm_cell_step(&Tensor::scalar(x), &Tensor::scalar(h0), &Tensor::scalar(c0), &p).unwrap();
        assert!((h.item() - h1).abs() < 1e-12);
        assert!((c.item() - c1).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = zero_params(2, 3);
        assert!(lstm_cell_step(&Tensor::zeros(1, 4), &Tensor::zeros(1, 3), &Tensor::zeros(1, 3), &p).is_err());
    }
}
