//! Central finite-difference checks of every primitive and every model
//! loss against the reverse-mode gradients.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::corpus::Batch;
use crate::graph::{Graph, NodeId, OpKind, ShapeError};
use crate::model::{Arch, Fwd, LanguageModel, LstmConfig, ModelError, Site, SiteKind, TransformerConfig};
use crate::nas::{SuperNet, Variant};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::train::{collect_grads, objective, Frozen, ObjectiveConfig, TrainError};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Input (or array name) and flat index of the worst element.
    pub worst: String,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// `|a - n| / max(|a|, |n|, floor)`. The floor, `1e-6 * max(1, |loss|)`,
/// keeps round-off in the differenced loss from dominating gradients
/// that are essentially zero.
pub fn rel_err(analytic: f64, numeric: f64, loss: f64) -> f64 {
    let floor = 1e-6 * loss.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

struct Tracker {
    checked: usize,
    max: f64,
    worst: String,
}

impl Tracker {
    fn new() -> Self {
        Self {
            checked: 0,
            max: 0.0,
            worst: String::new(),
        }
    }

    fn add(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64, loss: f64) {
        let e = rel_err(analytic, numeric, loss);
        self.checked += 1;
        if e > self.max || !e.is_finite() {
            self.max = if e.is_finite() { e } else { f64::INFINITY };
            self.worst = label();
        }
    }

    fn finish(self, name: &str) -> GradCheck {
        GradCheck {
            name: name.to_owned(),
            checked: self.checked,
            max_rel_err: self.max,
            worst: self.worst,
        }
    }
}

type Builder<'a> = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId, ShapeError> + 'a;

/// Checks `d loss / d inputs` for a scalar function built on a fresh graph.
pub fn check_fn(name: &str, inputs: &[Tensor], build: &Builder<'_>) -> Result<GradCheck, TrainError> {
    let eval = |xs: &[Tensor]| -> Result<(Graph, Vec<NodeId>, NodeId), ShapeError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        Ok((g, ids, out))
    };
    let (mut g, ids, out) = eval(inputs)?;
    let loss = g.value(out).item();
    g.backward(out).map_err(|e| TrainError::Config(e.to_string()))?;
    let mut t = Tracker::new();
    let mut xs = inputs.to_vec();
    for (i, id) in ids.iter().enumerate() {
        let grad = g.grad(*id);
        for j in 0..xs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + EPS;
            let (g1, _, o1) = eval(&xs)?;
            xs[i].data_mut()[j] = orig - EPS;
            let (g2, _, o2) = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            let numeric = (g1.value(o1).item() - g2.value(o2).item()) / (2.0 * EPS);
            t.add(|| format!("input {i}[{j}]"), grad.data()[j], numeric, loss);
        }
    }
    Ok(t.finish(name))
}

fn rand_tensor(rng: &mut RngStream, r: usize, c: usize, f: impl Fn(&mut RngStream) -> f64) -> Tensor {
    Tensor::from_vec(r, c, (0..r * c).map(|_| f(rng)).collect())
}

/// Values kept at least 0.1 away from 0 (for kinks and poles).
fn away_from_zero(rng: &mut RngStream) -> f64 {
    let m = rng.uniform_range(0.1, 1.5);
    if rng.uniform() < 0.5 {
        -m
    } else {
        m
    }
}

/// Reduces any node to a scalar through fixed random weights, so that
/// outputs with constant sums (softmax rows) still give informative
/// gradients.
fn weighted_sum(g: &mut Graph, x: NodeId, rng: &RngStream) -> Result<NodeId, ShapeError> {
    let [r, c] = g.shape(x);
    let mut s = rng.derive("readout");
    let w = g.leaf(rand_tensor(&mut s, r, c, |s| s.uniform_range(-1.0, 1.0)));
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn primitive_inputs(kind: OpKind, rng: &mut RngStream) -> Vec<Tensor> {
    let normal = |s: &mut RngStream| s.uniform_range(-1.5, 1.5);
    let positive = |s: &mut RngStream| s.uniform_range(0.2, 2.0);
    match kind {
        OpKind::MatMul => vec![rand_tensor(rng, 3, 4, normal), rand_tensor(rng, 4, 2, normal)],
        OpKind::MatMulBT => vec![rand_tensor(rng, 3, 4, normal), rand_tensor(rng, 2, 4, normal)],
        OpKind::Add | OpKind::Sub | OpKind::Mul => vec![rand_tensor(rng, 3, 4, normal), rand_tensor(rng, 3, 4, normal)],
        OpKind::Div => vec![rand_tensor(rng, 3, 4, normal), rand_tensor(rng, 3, 4, away_from_zero)],
        OpKind::AddRow | OpKind::MulRow => vec![rand_tensor(rng, 3, 4, normal), rand_tensor(rng, 1, 4, normal)],
        OpKind::ConcatCols => vec![rand_tensor(rng, 3, 2, normal), rand_tensor(rng, 3, 3, normal)],
        OpKind::ConcatRows => vec![rand_tensor(rng, 2, 4, normal), rand_tensor(rng, 3, 4, normal)],
        OpKind::CausalSoftmax => vec![rand_tensor(rng, 4, 4, normal)],
        OpKind::Ln => vec![rand_tensor(rng, 3, 4, positive)],
        OpKind::Relu | OpKind::Abs => vec![rand_tensor(rng, 3, 4, away_from_zero)],
        _ => vec![rand_tensor(rng, 3, 4, normal)],
    }
}

/// One check per primitive plus the non-generic graph operations.
pub fn primitive_suite(rng: &RngStream) -> Result<Vec<GradCheck>, TrainError> {
    let mut out = Vec::new();
    for kind in OpKind::ALL {
        let name = format!("{kind:?}");
        let mut s = rng.derive(&format!("prim/{name}"));
        let inputs = primitive_inputs(kind, &mut s);
        let ro = rng.derive(&name);
        out.push(check_fn(&format!("op {name}"), &inputs, &|g, ids| {
            let y = g.apply(kind, ids)?;
            weighted_sum(g, y, &ro)
        })?);
    }
    let mut s = rng.derive("prim/extra");
    let x34 = rand_tensor(&mut s, 3, 4, |s| s.uniform_range(-1.5, 1.5));
    let ro = rng.derive("extra");

    out.push(check_fn("op Scale+AddConst", std::slice::from_ref(&x34), &|g, ids| {
        let y = g.scale(ids[0], -1.7);
        let y = g.add_const(y, 0.3);
        let y = g.square(y);
        weighted_sum(g, y, &ro)
    })?);
    let s2 = rand_tensor(&mut s, 1, 2, |s| s.uniform_range(-1.0, 1.0));
    out.push(check_fn("op MulScalarAt", &[x34.clone(), s2], &|g, ids| {
        let y = g.mul_scalar_at(ids[0], ids[1], 1)?;
        weighted_sum(g, y, &ro)
    })?);
    out.push(check_fn("op Slice", std::slice::from_ref(&x34), &|g, ids| {
        let a = g.slice_cols(ids[0], 1, 3)?;
        let b = g.slice_rows(a, 0, 2)?;
        let b = g.tanh(b);
        weighted_sum(g, b, &ro)
    })?);
    let mask_rng = rng.derive("prim/dropout");
    out.push(check_fn("op Dropout", std::slice::from_ref(&x34), &|g, ids| {
        let mut m = mask_rng.clone();
        let y = g.dropout(ids[0], 0.3, &mut m);
        weighted_sum(g, y, &ro)
    })?);
    out.push(check_fn("op MaskRows", std::slice::from_ref(&x34), &|g, ids| {
        let y = g.mask_rows(ids[0], vec![1.0, 0.0, 1.0])?;
        weighted_sum(g, y, &ro)
    })?);
    let table = rand_tensor(&mut s, 5, 3, |s| s.uniform_range(-1.0, 1.0));
    out.push(check_fn("op Embedding", &[table], &|g, ids| {
        let y = g.embedding(ids[0], &[4, 0, 4, 2])?;
        weighted_sum(g, y, &ro)
    })?);
    out.push(check_fn("op Nll", std::slice::from_ref(&x34), &|g, ids| {
        let lp = g.log_softmax(ids[0]);
        g.nll(lp, &[Some(1), None, Some(3)])
    })?);
    out.push(check_fn("op Affine", &[x34.clone(), rand_tensor(&mut s, 2, 5, |s| s.uniform_range(-1.0, 1.0))], &|g, ids| {
        let y = g.affine(ids[0], ids[1])?;
        weighted_sum(g, y, &ro)
    })?);
    out.push(check_fn("composite 3-layer", std::slice::from_ref(&x34), &|g, ids| {
        let a = g.tanh(ids[0]);
        let b = g.layer_norm(a);
        let c = g.gelu(b);
        let d = g.softmax(c);
        weighted_sum(g, d, &ro)
    })?);
    Ok(out)
}

/// Value of the objective with every posterior and latent draw taken
/// from `rng` (frozen noise), or the mean forward when `rng` is `None`.
pub fn model_loss(model: &LanguageModel, batch: &Batch, cfg: &ObjectiveConfig, rng: Option<&RngStream>) -> Result<f64, ModelError> {
    let mut f = Fwd::new(model);
    let o = objective(&mut f, batch, cfg, rng)?;
    Ok(f.g.value(o.loss).item())
}

/// Checks the gradient of the objective with respect to every trainable
/// array of `model`.
pub fn check_model(
    name: &str,
    model: &LanguageModel,
    batch: &Batch,
    cfg: &ObjectiveConfig,
    rng: Option<&RngStream>,
) -> Result<GradCheck, TrainError> {
    let (grads, loss) = {
        let mut f = Fwd::new(model);
        let o = objective(&mut f, batch, cfg, rng)?;
        let loss = f.g.value(o.loss).item();
        (collect_grads(&mut f, o.loss, &Frozen::default())?, loss)
    };
    let mut t = Tracker::new();
    let mut m = model.clone();
    for (arr, grad) in &grads {
        for j in 0..grad.len() {
            let orig = m.array(arr).expect("array").data()[j];
            m.array_mut(arr).expect("array").data_mut()[j] = orig + EPS;
            let up = model_loss(&m, batch, cfg, rng)?;
            m.array_mut(arr).expect("array").data_mut()[j] = orig - EPS;
            let down = model_loss(&m, batch, cfg, rng)?;
            m.array_mut(arr).expect("array").data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            t.add(|| format!("{arr}[{j}]"), grad.data()[j], numeric, loss);
        }
    }
    Ok(t.finish(name))
}

pub const TINY_VOCAB: usize = 7;

pub fn tiny_lstm() -> Arch {
    Arch::Lstm(LstmConfig {
        num_layers: 2,
        embed_dim: 3,
        hidden_dim: 4,
        dropout: 0.0,
    })
}

pub fn tiny_transformer() -> Arch {
    Arch::Transformer(TransformerConfig {
        num_layers: 2,
        model_dim: 4,
        ffn_dim: 6,
        heads: 1,
        dropout: 0.0,
    })
}

/// Two sentences of lengths 6 and 4 over ids `3..7`.
pub fn tiny_batch(rng: &RngStream) -> Batch {
    let mut s = rng.derive("batch");
    let mut sent = |n: usize| {
        let mut v = vec![0];
        v.extend((0..n).map(|_| 3 + s.below(TINY_VOCAB - 3)));
        v.push(1);
        v
    };
    Batch::from_sequences(&[sent(4), sent(2)])
}

/// Plain model with weights spread to `(-0.5, 0.5)` so gradients are not
/// vanishingly small.
pub fn tiny_model(arch: Arch, rng: &RngStream) -> LanguageModel {
    let mut m = LanguageModel::new(arch, TINY_VOCAB, rng).expect("valid tiny config");
    for (n, t) in m.weights.iter_mut() {
        if !(n.ends_with("_g") || n.ends_with("_b")) {
            t.scale_in_place(5.0);
        }
    }
    m
}

/// Moves every posterior away from its prior so both KL terms and the
/// sampling path have non-trivial gradients.
fn perturb(m: &mut LanguageModel, rng: &RngStream) {
    let mut s = rng.derive("perturb");
    let names: Vec<String> = m
        .arrays()
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| n.contains('/') && !n.ends_with("prior_mu") && !n.ends_with("prior_sigma"))
        .collect();
    for n in names {
        let t = m.array_mut(&n).expect("array");
        for v in t.data_mut() {
            *v += s.uniform_range(-0.3, 0.3);
        }
    }
}

fn sampled_cfg() -> ObjectiveConfig {
    ObjectiveConfig {
        num_samples: 2,
        kl_scale: 0.5,
        dropout: false,
        regularizer: Default::default(),
    }
}

/// Every model loss: both baselines, Bayesian, GP and latent objectives
/// with frozen noise, and the super-network objective.
pub fn model_suite(rng: &RngStream) -> Result<Vec<GradCheck>, TrainError> {
    let batch = tiny_batch(rng);
    let noise = rng.derive("noise");
    let plain = ObjectiveConfig {
        dropout: false,
        ..Default::default()
    };
    let sampled = sampled_cfg();
    let mut out = Vec::new();

    let lstm = tiny_model(tiny_lstm(), rng);
    let tr = tiny_model(tiny_transformer(), rng);
    out.push(check_model("lstm baseline", &lstm, &batch, &plain, None)?);
    out.push(check_model("transformer baseline", &tr, &batch, &plain, None)?);

    let mut b = lstm.clone();
    b.add_bayes(Site::new(1, SiteKind::CellInput), 1.0, false)?;
    b.add_bayes(Site::new(2, SiteKind::ForgetGate), 1.0, false)?;
    perturb(&mut b, rng);
    out.push(check_model("lstm bayes elbo", &b, &batch, &sampled, Some(&noise))?);

    let mut b = tr.clone();
    b.add_bayes(Site::new(1, SiteKind::Ffn), 0.1, false)?;
    b.add_bayes(Site::new(2, SiteKind::Attention), 0.1, false)?;
    perturb(&mut b, rng);
    out.push(check_model("transformer bayes elbo", &b, &batch, &sampled, Some(&noise))?);

    let mut gp = lstm.clone();
    gp.add_gp(Site::new(1, SiteKind::CellInput), 1.0, false)?;
    gp.add_gp(Site::new(2, SiteKind::HGate), 1.0, false)?;
    perturb(&mut gp, rng);
    out.push(check_model("lstm gp elbo", &gp, &batch, &sampled, Some(&noise))?);

    let mut gp = tr.clone();
    gp.add_gp(Site::new(2, SiteKind::Ffn), 0.1, false)?;
    perturb(&mut gp, rng);
    out.push(check_model("transformer gp elbo", &gp, &batch, &sampled, Some(&noise))?);

    let mut lat = lstm.clone();
    lat.add_latent(Site::new(1, SiteKind::Hidden), 0.3)?;
    perturb(&mut lat, rng);
    out.push(check_model("lstm latent loss", &lat, &batch, &sampled, Some(&noise))?);

    let mut lat = tr.clone();
    lat.add_latent(Site::new(1, SiteKind::FfnOutput), 0.3)?;
    perturb(&mut lat, rng);
    out.push(check_model("transformer latent loss", &lat, &batch, &sampled, Some(&noise))?);

    let mut sn = SuperNet::new(
        &lstm,
        &[Site::new(1, SiteKind::CellInput), Site::new(2, SiteKind::OutputGate)],
        Variant::Bayes,
        Some(1.0),
    )?;
    perturb(&mut sn.model, rng);
    out.push(check_model("supernet loss", &sn.model, &batch, &sampled, Some(&noise))?);

    let mut sn = SuperNet::new(&lstm, &[Site::new(1, SiteKind::HGate)], Variant::Gp, Some(1.0))?;
    perturb(&mut sn.model, rng);
    out.push(check_model("gp supernet loss", &sn.model, &batch, &sampled, Some(&noise))?);

    let reg = ObjectiveConfig {
        regularizer: crate::train::RegularizerSpec::map(0.3, &tiny_model(tiny_lstm(), &rng.derive("ref"))),
        ..plain
    };
    out.push(check_model("lstm map-regularised", &lstm, &batch, &reg, None)?);
    Ok(out)
}

pub fn full_suite(rng: &RngStream) -> Result<Vec<GradCheck>, TrainError> {
    let mut v = primitive_suite(rng)?;
    v.extend(model_suite(rng)?);
    Ok(v)
}

/// `name  checked  max_rel_err  PASS|FAIL  worst` per check.
pub fn report(checks: &[GradCheck]) -> String {
    let mut by_name: BTreeMap<usize, String> = BTreeMap::new();
    for (i, c) in checks.iter().enumerate() {
        by_name.insert(
            i,
            format!(
                "{}\t{}\t{:.3e}\t{}\t{}",
                c.name,
                c.checked,
                c.max_rel_err,
                if c.passed() { "PASS" } else { "FAIL" },
                c.worst
            ),
        );
    }
    let mut out = String::from("check\telements\tmax_rel_err\tstatus\tworst\n");
    for line in by_name.values() {
        out.push_str(line);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_gradients() {
        let c = check_fn("sumsq", &[Tensor::row(&[1.0, 2.0])], &|g, ids| {
            let s = g.square(ids[0]);
            Ok(g.sum(s))
        })
        .unwrap();
        assert!(c.passed());
        assert_eq!(c.checked, 2);
    }

    #[test]
    fn detects_wrong_gradient() {
        assert!(rel_err(1.0, 1.1, 1.0) > TOLERANCE);
        assert!(rel_err(1e-12, 0.0, 1.0) < TOLERANCE);
    }
}
