//! Single-head causal Transformer language model.
//!
//! Per layer, for the sequence `x` of one sentence:
//!
//! ```text
//! q, k, v = Wq [x, 1], Wk [x, 1], Wv [x, 1]
//! y = causal_softmax(q k^T / sqrt(M)) v
//! z = LayerNorm(Wh [y, 1] + x)
//! s = W2 [GELU(W1 [z, 1]), 1] + z
//! x' = LayerNorm(s)
//! ```
//!
//! Layer norms are post-residual with learned gain and bias. Inputs get
//! fixed sinusoidal position encodings. Rows are sentence-major: row
//! `b * T + t` is position `t` of sentence `b`.

use super::{ForwardPass, Fwd, LanguageModel, ModelError, Site, SiteKind, TransformerConfig};
use crate::corpus::Batch;
use crate::graph::{Graph, NodeId, ShapeError};
use crate::tensor::Tensor;

/// `PE[t, 2i] = sin(t / 10000^(2i/M))`, `PE[t, 2i+1] = cos(...)`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut pe = Tensor::zeros(len, dim);
    for t in 0..len {
        for j in 0..dim {
            let i2 = (j - j % 2) as f64;
            let angle = t as f64 / 10000f64.powf(i2 / dim as f64);
            pe.set(t, j, if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

fn attention_node(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId, dim: usize) -> Result<NodeId, ShapeError> {
    let scores = g.matmul_bt(q, k)?;
    let scores = g.scale(scores, 1.0 / (dim as f64).sqrt());
    let a = g.causal_softmax(scores)?;
    g.matmul(a, v)
}

/// Causal scaled dot-product attention of one sequence; `q`, `k`, `v` are
/// `[T x M]` and the scale is `1 / sqrt(M)`.
pub fn causal_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor, ShapeError> {
    let mut g = Graph::new();
    let (qn, kn, vn) = (g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()));
    let y = attention_node(&mut g, qn, kn, vn, q.cols())?;
    Ok(g.value(y).clone())
}

fn layer_norm_affine(f: &mut Fwd<'_>, x: NodeId, l: usize, which: u8) -> Result<NodeId, ShapeError> {
    let gain = f.weight(&format!("l{l}.ln{which}_g"));
    let bias = f.weight(&format!("l{l}.ln{which}_b"));
    let n = f.g.layer_norm(x);
    let n = f.g.mul_row(n, gain)?;
    f.g.add_row(n, bias)
}

/// One decoder block over `rows` stacked sentences of length `len`.
fn block(f: &mut Fwd<'_>, x: NodeId, l: usize, sents: usize, len: usize, valid: &[f64]) -> Result<NodeId, ModelError> {
    let m = f.g.shape(x)[1];
    let wq = f.weight(&format!("l{l}.wq"));
    let wk = f.weight(&format!("l{l}.wk"));
    let wv = f.weight(&format!("l{l}.wv"));
    let wh = f.weight(&format!("l{l}.wh"));
    let q = f.g.affine(x, wq)?;
    let k = f.g.affine(x, wk)?;
    let v = f.g.affine(x, wv)?;
    let mut ys = Vec::with_capacity(sents);
    for s in 0..sents {
        let (a, b) = (s * len, (s + 1) * len);
        let qs = f.g.slice_rows(q, a, b)?;
        let ks = f.g.slice_rows(k, a, b)?;
        let vs = f.g.slice_rows(v, a, b)?;
        ys.push(attention_node(&mut f.g, qs, ks, vs, m)?);
    }
    let y = if ys.len() == 1 { ys[0] } else { f.g.concat_rows(&ys)? };
    let proj = f.g.affine(y, wh)?;
    let proj = f.dropout(proj, &format!("l{l}/attn"));
    let o = f.g.add(proj, x)?;
    let z = layer_norm_affine(f, o, l, 1)?;

    let hidden = f.site(Site::new(l, SiteKind::Ffn), z)?;
    let w2 = f.weight(&format!("l{l}.w2"));
    let ff = f.g.affine(hidden, w2)?;
    let ff = f.dropout(ff, &format!("l{l}/ffn"));
    let s = f.g.add(ff, z)?;
    let s = f.latent(Site::new(l, SiteKind::FfnOutput), s, valid)?;
    Ok(layer_norm_affine(f, s, l, 2)?)
}

/// Applies decoder block `layer` of `model` to one sequence `x` (`[T x M]`)
/// with posterior means and no dropout.
pub fn transformer_block(model: &LanguageModel, x: &Tensor, layer: usize) -> Result<Tensor, ModelError> {
    let mut f = Fwd::new(model);
    let xn = f.g.leaf(x.clone());
    let valid = vec![1.0; x.rows()];
    let out = block(&mut f, xn, layer, 1, x.rows(), &valid)?;
    Ok(f.g.value(out).clone())
}

pub(crate) fn forward(f: &mut Fwd<'_>, cfg: &TransformerConfig, batch: &Batch) -> Result<ForwardPass, ModelError> {
    let sents = batch.batch_size();
    let len = batch.num_steps();
    let mut ids = Vec::with_capacity(sents * len);
    let mut targets = Vec::with_capacity(sents * len);
    let mut positions = Vec::with_capacity(sents * len);
    for s in 0..sents {
        for t in 0..len {
            ids.push(batch.token(s, t));
            targets.push((t + 1 < batch.lengths()[s]).then(|| batch.token(s, t + 1)));
            positions.push((s, t));
        }
    }
    let valid: Vec<f64> = targets.iter().map(|t| if t.is_some() { 1.0 } else { 0.0 }).collect();

    let emb = f.weight("emb");
    let out_w = f.weight("out");
    let pe_one = positional_encoding(len, cfg.model_dim);
    let mut pe = Tensor::zeros(sents * len, cfg.model_dim);
    for s in 0..sents {
        for t in 0..len {
            pe.row_slice_mut(s * len + t).copy_from_slice(pe_one.row_slice(t));
        }
    }
    let pe = f.g.leaf(pe);
    let x = f.g.embedding(emb, &ids)?;
    let x = f.g.add(x, pe)?;
    let mut x = f.dropout(x, "emb");
    for l in 1..=cfg.num_layers {
        x = block(f, x, l, sents, len, &valid)?;
    }
    let logits = f.g.matmul_bt(x, out_w)?;
    let logp = f.g.log_softmax(logits);
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

    #[test]
    fn single_position_attends_to_itself() {
        let q = Tensor::row(&[0.3, -1.0]);
        let k = Tensor::row(&[2.0, 0.5]);
        let v = Tensor::row(&[0.7, -0.2]);
        assert_eq!(causal_attention(&q, &k, &v).unwrap(), v);
    }

    #[test]
    fn two_position_hand_trace() {
        let q = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let k = Tensor::from_rows(&[vec![1.0, 1.0], vec![2.0, -1.0]]);
        let v = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let y = causal_attention(&q, &k, &v).unwrap();
        assert_eq!(y.row_slice(0), &[1.0, 2.0]);
        // second query sees scores (1, -1) / sqrt(2)
        let s = 2f64.sqrt();
        let (e0, e1) = ((1.0 / s).exp(), (-1.0 / s).exp());
        let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        assert!((y.get(1, 0) - (a0 * 1.0 + a1 * 3.0)).abs() < 1e-14);
        assert!((y.get(1, 1) - (a0 * 2.0 + a1 * 4.0)).abs() < 1e-14);
    }

    #[test]
    fn encoding_first_row() {
        let pe = positional_encoding(3, 4);
        assert_eq!(pe.row_slice(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.get(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.get(1, 3) - (1.0 / 100.0f64).cos()).abs() < 1e-15);
    }
}
