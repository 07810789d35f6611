//! LSTM and Transformer language models with optional Bayesian, GP,
//! latent-output and architecture-gated sites.
//!
//! All tensors live in one model value and are addressed by name:
//!
//! | name | tensor |
//! |------|--------|
//! | `emb`, `out`, `l{l}.w*`, `l{l}.ln*` | point weights |
//! | `bayes/{w}/{mu,rho,prior_mu,prior_sigma}` | posterior over weight `w` |
//! | `gp/{site}/{lambda,theta}/{mu,rho,prior_mu,prior_sigma}` | GP site |
//! | `latent/{site}/{infer,prior}` | latent networks |
//! | `arch/{site}` | architecture logits `[a_point, a_bayes]` |
//!
//! Everything except `prior_*` arrays is trainable. Layers are numbered
//! from 1.

pub mod lstm;
pub mod transformer;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bayes::{self, GaussianVariational};
use crate::corpus::Batch;
use crate::gp::{self, Activation, GpActivation};
use crate::graph::{Graph, NodeId, ShapeError};
use crate::latent::{self, LatentOutputLayer};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Half-width of the uniform weight initialisation.
pub const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("site {site}: {reason}")]
    Site { site: String, reason: String },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

fn site_err(site: Site, reason: impl Into<String>) -> ModelError {
    ModelError::Site {
        site: site.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LstmConfig {
    pub num_layers: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            embed_dim: 64,
            hidden_dim: 128,
            dropout: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            model_dim: 64,
            ffn_dim: 256,
            heads: 1,
            dropout: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lstm,
    Transformer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Arch {
    Lstm(LstmConfig),
    Transformer(TransformerConfig),
}

impl Arch {
    pub fn kind(&self) -> ModelKind {
        match self {
            Arch::Lstm(_) => ModelKind::Lstm,
            Arch::Transformer(_) => ModelKind::Transformer,
        }
    }

    pub fn num_layers(&self) -> usize {
        match self {
            Arch::Lstm(c) => c.num_layers,
            Arch::Transformer(c) => c.num_layers,
        }
    }

    pub fn dropout(&self) -> f64 {
        match self {
            Arch::Lstm(c) => c.dropout,
            Arch::Transformer(c) => c.dropout,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_owned()));
        let dims_ok = match self {
            Arch::Lstm(c) => c.num_layers >= 1 && c.embed_dim >= 1 && c.hidden_dim >= 1,
            Arch::Transformer(c) => c.num_layers >= 1 && c.model_dim >= 1 && c.ffn_dim >= 1,
        };
        if !dims_ok {
            return bad("all layer counts and dimensions must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout()) {
            return bad("dropout must lie in [0, 1)");
        }
        if let Arch::Transformer(c) = self {
            if c.heads != 1 {
                return bad("only single-head attention is supported");
            }
        }
        Ok(())
    }

    /// Name and shape of every point weight of a plain model over a
    /// vocabulary of `n` words.
    pub fn weight_shapes(&self, n: usize) -> Vec<(String, [usize; 2])> {
        let mut out = Vec::new();
        match self {
            Arch::Lstm(c) => {
                out.push(("emb".to_owned(), [n, c.embed_dim]));
                for l in 1..=c.num_layers {
                    let input = if l == 1 { c.embed_dim } else { c.hidden_dim };
                    for gate in ["wi", "wf", "wc", "wo"] {
                        out.push((format!("l{l}.{gate}"), [c.hidden_dim, input + c.hidden_dim + 1]));
                    }
                }
                out.push(("out".to_owned(), [n, c.hidden_dim]));
            }
            Arch::Transformer(c) => {
                let m = c.model_dim;
                out.push(("emb".to_owned(), [n, m]));
                for l in 1..=c.num_layers {
                    for w in ["wq", "wk", "wv", "wh"] {
                        out.push((format!("l{l}.{w}"), [m, m + 1]));
                    }
                    out.push((format!("l{l}.w1"), [c.ffn_dim, m + 1]));
                    out.push((format!("l{l}.w2"), [m, c.ffn_dim + 1]));
                    for ln in ["ln1_g", "ln1_b", "ln2_g", "ln2_b"] {
                        out.push((format!("l{l}.{ln}"), [1, m]));
                    }
                }
                out.push(("out".to_owned(), [n, m]));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SiteKind {
    InputGate,
    ForgetGate,
    CellInput,
    OutputGate,
    /// The `tanh(c_t)` inside `h_t = o_t * tanh(c_t)`.
    HGate,
    /// First feed-forward matrix and its GELU.
    Ffn,
    /// The four attention projections together.
    Attention,
    Embedding,
    /// LSTM hidden output `h_t` (latent sites only).
    Hidden,
    /// Transformer feed-forward output before the second layer norm
    /// (latent sites only).
    FfnOutput,
}

impl SiteKind {
    const CODES: [(SiteKind, &'static str); 10] = [
        (SiteKind::InputGate, "ig"),
        (SiteKind::ForgetGate, "fg"),
        (SiteKind::CellInput, "ci"),
        (SiteKind::OutputGate, "og"),
        (SiteKind::HGate, "hg"),
        (SiteKind::Ffn, "ffn"),
        (SiteKind::Attention, "attn"),
        (SiteKind::Embedding, "emb"),
        (SiteKind::Hidden, "hid"),
        (SiteKind::FfnOutput, "ffo"),
    ];

    pub fn code(self) -> &'static str {
        Self::CODES.iter().find(|(k, _)| *k == self).map(|(_, c)| *c).unwrap_or("?")
    }
}

/// A location inside a model. Ordered by layer, then kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    pub layer: usize,
    pub kind: SiteKind,
}

impl Site {
    pub fn new(layer: usize, kind: SiteKind) -> Self {
        Self { layer, kind }
    }

    pub fn embedding() -> Self {
        Self::new(0, SiteKind::Embedding)
    }

    pub fn is_valid(&self, arch: &Arch) -> bool {
        use SiteKind::*;
        if self.kind == Embedding {
            return self.layer == 0;
        }
        if self.layer == 0 || self.layer > arch.num_layers() {
            return false;
        }
        match arch.kind() {
            ModelKind::Lstm => matches!(self.kind, InputGate | ForgetGate | CellInput | OutputGate | HGate | Hidden),
            ModelKind::Transformer => matches!(self.kind, Ffn | Attention | FfnOutput),
        }
    }

    /// Point weights owned by the site.
    pub fn weights(&self) -> Vec<String> {
        let l = self.layer;
        let names: &[&str] = match self.kind {
            SiteKind::InputGate => &["wi"],
            SiteKind::ForgetGate => &["wf"],
            SiteKind::CellInput => &["wc"],
            SiteKind::OutputGate => &["wo"],
            SiteKind::Ffn => &["w1"],
            SiteKind::Attention => &["wq", "wk", "wv", "wh"],
            SiteKind::Embedding => return vec!["emb".to_owned()],
            SiteKind::HGate | SiteKind::Hidden | SiteKind::FfnOutput => &[],
        };
        names.iter().map(|w| format!("l{l}.{w}")).collect()
    }

    /// Activation of an affine-plus-nonlinearity site.
    pub fn activation(&self) -> Option<Activation> {
        match self.kind {
            SiteKind::InputGate | SiteKind::ForgetGate | SiteKind::OutputGate => Some(Activation::Sigmoid),
            SiteKind::CellInput | SiteKind::HGate => Some(Activation::Tanh),
            SiteKind::Ffn => Some(Activation::Gelu),
            _ => None,
        }
    }

    /// Output width of the site.
    pub fn width(&self, arch: &Arch) -> usize {
        match (arch, self.kind) {
            (Arch::Lstm(c), SiteKind::Embedding) => c.embed_dim,
            (Arch::Lstm(c), _) => c.hidden_dim,
            (Arch::Transformer(c), SiteKind::Ffn) => c.ffn_dim,
            (Arch::Transformer(c), _) => c.model_dim,
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.kind == SiteKind::Embedding {
            f.write_str("emb")
        } else {
            write!(f, "l{}.{}", self.layer, self.kind.code())
        }
    }
}

impl FromStr for Site {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "emb" {
            return Ok(Site::embedding());
        }
        let bad = || format!("`{s}` is not a site (expected e.g. `l1.ci` or `emb`)");
        let rest = s.strip_prefix('l').ok_or_else(bad)?;
        let (layer, code) = rest.split_once('.').ok_or_else(bad)?;
        let layer: usize = layer.parse().map_err(|_| bad())?;
        let kind = SiteKind::CODES
            .iter()
            .find(|(_, c)| *c == code)
            .map(|(k, _)| *k)
            .ok_or_else(bad)?;
        Ok(Site::new(layer, kind))
    }
}

impl Serialize for Site {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Site {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Point,
    Bayes,
}

/// Softmax-gated choice between the point and Bayesian branch of a site.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchGate {
    /// `[1 x 2]`: `a_point`, `a_bayes`.
    pub logits: Tensor,
    /// Replaces the soft gate by an exact one-branch selection.
    pub hard: Option<Branch>,
}

impl ArchGate {
    pub fn new() -> Self {
        Self {
            logits: Tensor::row(&[0.0, 0.0]),
            hard: None,
        }
    }

    /// `(g_point, g_bayes)`.
    pub fn gates(&self) -> (f64, f64) {
        match self.hard {
            Some(Branch::Point) => (1.0, 0.0),
            Some(Branch::Bayes) => (0.0, 1.0),
            None => {
                let (a, b) = (self.logits.data()[0], self.logits.data()[1]);
                let m = a.max(b);
                let (ea, eb) = ((a - m).exp(), (b - m).exp());
                (ea / (ea + eb), eb / (ea + eb))
            }
        }
    }
}

impl Default for ArchGate {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    pub arch: Arch,
    pub vocab_size: usize,
    pub weights: BTreeMap<String, Tensor>,
    pub bayes: BTreeMap<String, GaussianVariational>,
    pub gp: BTreeMap<Site, GpActivation>,
    pub latent: BTreeMap<Site, LatentOutputLayer>,
    pub gates: BTreeMap<Site, ArchGate>,
}

/// Names of the four arrays of a variational posterior.
const GV_PARTS: [&str; 4] = ["mu", "rho", "prior_mu", "prior_sigma"];

fn gv_arrays<'a>(prefix: &str, gv: &'a GaussianVariational, out: &mut Vec<(String, &'a Tensor)>) {
    for (part, t) in GV_PARTS.iter().zip([&gv.mu, &gv.rho, &gv.prior_mu, &gv.prior_sigma]) {
        out.push((format!("{prefix}/{part}"), t));
    }
}

fn gv_arrays_mut<'a>(prefix: &str, gv: &'a mut GaussianVariational, out: &mut Vec<(String, &'a mut Tensor)>) {
    let GaussianVariational {
        mu,
        rho,
        prior_mu,
        prior_sigma,
    } = gv;
    for (part, t) in GV_PARTS.iter().zip([mu, rho, prior_mu, prior_sigma]) {
        out.push((format!("{prefix}/{part}"), t));
    }
}

pub fn is_trainable(name: &str) -> bool {
    !(name.ends_with("/prior_mu") || name.ends_with("/prior_sigma"))
}

impl LanguageModel {
    /// Plain point-estimate model with uniform(-0.1, 0.1) matrices, unit
    /// layer-norm gains and zero layer-norm biases. Every weight draws from
    /// its own named sub-stream of `rng`.
    pub fn new(arch: Arch, vocab_size: usize, rng: &RngStream) -> Result<Self, ModelError> {
        arch.validate()?;
        if vocab_size < 3 {
            return Err(ModelError::Config("vocabulary needs at least the 3 reserved symbols".into()));
        }
        let mut weights = BTreeMap::new();
        for (name, [r, c]) in arch.weight_shapes(vocab_size) {
            let t = if name.ends_with("_g") {
                Tensor::filled(r, c, 1.0)
            } else if name.ends_with("_b") {
                Tensor::zeros(r, c)
            } else {
                let mut s = rng.derive(&format!("init/{name}"));
                Tensor::from_vec(r, c, (0..r * c).map(|_| s.uniform_range(-INIT_RANGE, INIT_RANGE)).collect())
            };
            weights.insert(name, t);
        }
        Ok(Self {
            arch,
            vocab_size,
            weights,
            bayes: BTreeMap::new(),
            gp: BTreeMap::new(),
            latent: BTreeMap::new(),
            gates: BTreeMap::new(),
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.arch.kind()
    }

    /// Prior standard deviation used when a site of this model is made
    /// Bayesian without an explicit value.
    pub fn default_prior_sigma(&self) -> f64 {
        match self.kind() {
            ModelKind::Lstm => bayes::LSTM_PRIOR_SIGMA,
            ModelKind::Transformer => bayes::TRANSFORMER_PRIOR_VARIANCE.sqrt(),
        }
    }

    fn check_site(&self, site: Site) -> Result<(), ModelError> {
        if !site.is_valid(&self.arch) {
            return Err(site_err(site, format!("not a site of this {:?} model", self.kind())));
        }
        Ok(())
    }

    /// Whether any weight of `site` has a posterior, or the site is GP.
    pub fn is_bayesian_site(&self, site: Site) -> bool {
        self.gp.contains_key(&site) || site.weights().iter().any(|w| self.bayes.contains_key(w))
    }

    /// Wraps every weight of `site` in a posterior centred on its current
    /// value. With `keep_point` the point weight stays (super-network
    /// branches); otherwise it is removed.
    pub fn add_bayes(&mut self, site: Site, prior_sigma: f64, keep_point: bool) -> Result<(), ModelError> {
        self.check_site(site)?;
        let names = site.weights();
        if names.is_empty() {
            return Err(site_err(site, "has no weight matrix to make Bayesian"));
        }
        if self.is_bayesian_site(site) {
            return Err(site_err(site, "is already Bayesian or GP"));
        }
        if !(prior_sigma > 0.0) {
            return Err(site_err(site, "prior sigma must be positive"));
        }
        for w in names {
            let t = if keep_point {
                self.weights.get(&w).cloned()
            } else {
                self.weights.remove(&w)
            }
            .ok_or_else(|| site_err(site, format!("weight {w} missing")))?;
            self.bayes.insert(w, GaussianVariational::from_prior(t, prior_sigma));
        }
        Ok(())
    }

    /// Replaces the activation of `site` by a GP mixture. The weight
    /// matrix (if the site has one) gets a posterior with `prior_sigma`.
    pub fn add_gp(&mut self, site: Site, prior_sigma: f64, keep_point: bool) -> Result<(), ModelError> {
        self.check_site(site)?;
        let act = site
            .activation()
            .ok_or_else(|| site_err(site, "has no activation to replace"))?;
        if self.is_bayesian_site(site) {
            return Err(site_err(site, "is already Bayesian or GP"));
        }
        let theta = match site.weights().as_slice() {
            [] => None,
            [w] => {
                let t = if keep_point {
                    self.weights.get(w).cloned()
                } else {
                    self.weights.remove(w)
                }
                .ok_or_else(|| site_err(site, format!("weight {w} missing")))?;
                Some(GaussianVariational::from_prior(t, prior_sigma))
            }
            _ => return Err(site_err(site, "GP sites need a single weight matrix")),
        };
        self.gp.insert(site, GpActivation::new(act, site.width(&self.arch), theta));
        Ok(())
    }

    /// Adds a latent layer on an LSTM hidden output or a Transformer
    /// feed-forward output, initialised to pass the site output through
    /// with spread `sigma`.
    pub fn add_latent(&mut self, site: Site, sigma: f64) -> Result<(), ModelError> {
        self.check_site(site)?;
        if !matches!(site.kind, SiteKind::Hidden | SiteKind::FfnOutput) {
            return Err(site_err(site, "latent layers sit on hidden or feed-forward outputs"));
        }
        if self.latent.contains_key(&site) {
            return Err(site_err(site, "already has a latent layer"));
        }
        self.latent
            .insert(site, LatentOutputLayer::identity(site.width(&self.arch), sigma));
        Ok(())
    }

    /// Every stored array with its name, in a fixed order.
    pub fn arrays(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self.weights.iter().map(|(k, v)| (k.clone(), v)).collect();
        for (w, gv) in &self.bayes {
            gv_arrays(&format!("bayes/{w}"), gv, &mut out);
        }
        for (s, g) in &self.gp {
            gv_arrays(&format!("gp/{s}/lambda"), &g.lambda, &mut out);
            if let Some(t) = &g.theta {
                gv_arrays(&format!("gp/{s}/theta"), t, &mut out);
            }
        }
        for (s, l) in &self.latent {
            out.push((format!("latent/{s}/infer"), &l.infer));
            out.push((format!("latent/{s}/prior"), &l.prior));
        }
        for (s, g) in &self.gates {
            out.push((format!("arch/{s}"), &g.logits));
        }
        out
    }

    /// Mutable view in the same order as [`LanguageModel::arrays`].
    pub fn arrays_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self.weights.iter_mut().map(|(k, v)| (k.clone(), v)).collect();
        for (w, gv) in self.bayes.iter_mut() {
            gv_arrays_mut(&format!("bayes/{w}"), gv, &mut out);
        }
        for (s, g) in self.gp.iter_mut() {
            gv_arrays_mut(&format!("gp/{s}/lambda"), &mut g.lambda, &mut out);
            if let Some(t) = g.theta.as_mut() {
                gv_arrays_mut(&format!("gp/{s}/theta"), t, &mut out);
            }
        }
        for (s, l) in self.latent.iter_mut() {
            out.push((format!("latent/{s}/infer"), &mut l.infer));
            out.push((format!("latent/{s}/prior"), &mut l.prior));
        }
        for (s, g) in self.gates.iter_mut() {
            out.push((format!("arch/{s}"), &mut g.logits));
        }
        out
    }

    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn array_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.arrays_mut().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.arrays()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| is_trainable(n))
            .collect()
    }

    /// Number of free (trainable) scalars.
    pub fn num_free_params(&self) -> usize {
        self.arrays()
            .into_iter()
            .filter(|(n, _)| is_trainable(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Deterministic forward (posterior means, no dropout). Returns the
    /// natural-log probability of every target, per sentence.
    pub fn token_logprobs(&self, batch: &Batch) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut f = Fwd::new(self);
        let pass = f.run(batch, Mode::Eval)?;
        Ok(pass.token_logprobs(&f.g, batch))
    }

    /// As [`LanguageModel::token_logprobs`] but with every posterior
    /// sampled once from `rng` (dropout stays off).
    pub fn sampled_token_logprobs(&self, batch: &Batch, rng: &RngStream) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut f = Fwd::new(self);
        let pass = f.run(
            batch,
            Mode::Train {
                rng: rng.clone(),
                dropout: false,
            },
        )?;
        Ok(pass.token_logprobs(&f.g, batch))
    }

    /// Full output distributions (natural log) of the deterministic
    /// forward: one `[len - 1 x N]` matrix per sentence.
    pub fn logprob_rows(&self, batch: &Batch) -> Result<Vec<Tensor>, ModelError> {
        let mut f = Fwd::new(self);
        let pass = f.run(batch, Mode::Eval)?;
        let all = f.g.value(pass.logp);
        let n = all.cols();
        let mut out: Vec<Tensor> = batch
            .lengths()
            .iter()
            .map(|&l| Tensor::zeros(l - 1, n))
            .collect();
        for (row, &(b, t)) in pass.positions.iter().enumerate() {
            if pass.targets[row].is_some() {
                out[b].row_slice_mut(t).copy_from_slice(all.row_slice(row));
            }
        }
        Ok(out)
    }
}

/// How posteriors and dropout behave in a forward pass.
#[derive(Debug, Clone)]
pub enum Mode {
    /// Posterior means, latent means, no dropout.
    Eval,
    /// One sample of every posterior from named sub-streams of `rng`;
    /// dropout masks too when `dropout` is set.
    Train { rng: RngStream, dropout: bool },
}

/// Result of one pass over a batch.
pub struct ForwardPass {
    /// `[rows x N]` natural-log output distributions.
    pub logp: NodeId,
    /// Target per row; `None` on padding.
    pub targets: Vec<Option<usize>>,
    /// `(sentence, position)` per row.
    pub positions: Vec<(usize, usize)>,
    /// Summed per-step latent KL, if the model has latent sites.
    pub latent_kl: Option<NodeId>,
}

impl ForwardPass {
    pub fn token_logprobs(&self, g: &Graph, batch: &Batch) -> Vec<Vec<f64>> {
        let all = g.value(self.logp);
        let mut out: Vec<Vec<f64>> = batch.lengths().iter().map(|&l| vec![0.0; l - 1]).collect();
        for (row, &(b, t)) in self.positions.iter().enumerate() {
            if let Some(w) = self.targets[row] {
                out[b][t] = all.get(row, w);
            }
        }
        out
    }
}

/// Graph-building context for one model. Leaves are created once per
/// array name and shared by every pass run through the same context.
pub struct Fwd<'m> {
    pub model: &'m LanguageModel,
    pub g: Graph,
    arrays: BTreeMap<String, &'m Tensor>,
    leaves: BTreeMap<String, NodeId>,
    samples: BTreeMap<String, NodeId>,
    latent_streams: BTreeMap<Site, RngStream>,
    latent_kl: Vec<NodeId>,
    rng: Option<RngStream>,
    dropout: bool,
}

impl<'m> Fwd<'m> {
    pub fn new(model: &'m LanguageModel) -> Self {
        Self {
            model,
            g: Graph::new(),
            arrays: model.arrays().into_iter().collect(),
            leaves: BTreeMap::new(),
            samples: BTreeMap::new(),
            latent_streams: BTreeMap::new(),
            latent_kl: Vec::new(),
            rng: None,
            dropout: false,
        }
    }

    /// Leaf node of every array touched so far.
    pub fn leaves(&self) -> &BTreeMap<String, NodeId> {
        &self.leaves
    }

    /// Runs the model over `batch`. Posterior samples are redrawn per call.
    pub fn run(&mut self, batch: &Batch, mode: Mode) -> Result<ForwardPass, ModelError> {
        self.samples.clear();
        self.latent_streams.clear();
        self.latent_kl.clear();
        match mode {
            Mode::Eval => {
                self.rng = None;
                self.dropout = false;
            }
            Mode::Train { rng, dropout } => {
                self.rng = Some(rng);
                self.dropout = dropout;
            }
        }
        let arch = self.model.arch.clone();
        let mut pass = match &arch {
            Arch::Lstm(c) => lstm::forward(self, c, batch)?,
            Arch::Transformer(c) => transformer::forward(self, c, batch)?,
        };
        if !self.latent_kl.is_empty() {
            let parts = std::mem::take(&mut self.latent_kl);
            let mut acc = parts[0];
            for &p in &parts[1..] {
                acc = self.g.add(acc, p)?;
            }
            pass.latent_kl = Some(acc);
        }
        Ok(pass)
    }

    /// Leaf for a stored array.
    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let t = self.arrays.get(name).unwrap_or_else(|| panic!("model has no array `{name}`"));
        let id = self.g.leaf((*t).clone());
        self.leaves.insert(name.to_owned(), id);
        id
    }

    fn stream(&self, label: &str) -> Option<RngStream> {
        self.rng.as_ref().map(|r| r.derive(label))
    }

    /// Mean in eval mode, one cached reparameterised sample otherwise.
    fn variational(&mut self, prefix: &str) -> NodeId {
        if let Some(&id) = self.samples.get(prefix) {
            return id;
        }
        let mu = self.param(&format!("{prefix}/mu"));
        let id = match self.stream(prefix) {
            None => mu,
            Some(mut s) => {
                let rho = self.param(&format!("{prefix}/rho"));
                bayes::sample_node(&mut self.g, mu, rho, &mut s)
            }
        };
        self.samples.insert(prefix.to_owned(), id);
        id
    }

    /// The weight called `name`: its posterior when it has one, the point
    /// value otherwise.
    pub fn weight(&mut self, name: &str) -> NodeId {
        if self.model.bayes.contains_key(name) {
            self.variational(&format!("bayes/{name}"))
        } else {
            self.param(name)
        }
    }

    /// Bayesian or GP branch of a gate-style site.
    fn uncertain_branch(&mut self, site: Site, x: NodeId) -> Result<NodeId, ModelError> {
        let act = site.activation().expect("gate-style site");
        if let Some(gp) = self.model.gp.get(&site) {
            let has_theta = gp.theta.is_some();
            let lambda = self.variational(&format!("gp/{site}/lambda"));
            let pre = if has_theta {
                let w = self.variational(&format!("gp/{site}/theta"));
                self.g.affine(x, w)?
            } else {
                x
            };
            return Ok(gp::mix_node(&mut self.g, pre, lambda));
        }
        let pre = match site.weights().as_slice() {
            [] => x,
            [w] => {
                let wn = self.variational(&format!("bayes/{w}"));
                self.g.affine(x, wn)?
            }
            _ => unreachable!("gate-style sites own at most one matrix"),
        };
        Ok(act.node(&mut self.g, pre))
    }

    fn point_branch(&mut self, site: Site, x: NodeId) -> Result<NodeId, ModelError> {
        let act = site.activation().expect("gate-style site");
        let pre = match site.weights().as_slice() {
            [] => x,
            [w] => {
                let wn = self.param(w);
                self.g.affine(x, wn)?
            }
            _ => unreachable!("gate-style sites own at most one matrix"),
        };
        Ok(act.node(&mut self.g, pre))
    }

    /// Output of an affine-plus-activation site (gates, h-gate, FFN
    /// hidden layer), honouring GP and architecture gating.
    pub fn site(&mut self, site: Site, x: NodeId) -> Result<NodeId, ModelError> {
        if let Some(gate) = self.model.gates.get(&site) {
            return match gate.hard {
                Some(Branch::Point) => self.point_branch(site, x),
                Some(Branch::Bayes) => self.uncertain_branch(site, x),
                None => {
                    let logits = self.param(&format!("arch/{site}"));
                    let gsm = self.g.softmax(logits);
                    let p = self.point_branch(site, x)?;
                    let b = self.uncertain_branch(site, x)?;
                    let p = self.g.mul_scalar_at(p, gsm, 0)?;
                    let b = self.g.mul_scalar_at(b, gsm, 1)?;
                    Ok(self.g.add(p, b)?)
                }
            };
        }
        if self.model.gp.contains_key(&site) {
            return self.uncertain_branch(site, x);
        }
        let act = site.activation().expect("gate-style site");
        let pre = match site.weights().as_slice() {
            [] => x,
            [w] => {
                let wn = self.weight(w);
                self.g.affine(x, wn)?
            }
            _ => unreachable!("gate-style sites own at most one matrix"),
        };
        Ok(act.node(&mut self.g, pre))
    }

    /// Inverted dropout with a mask from the sub-stream `label`; identity
    /// in eval mode or when disabled.
    pub fn dropout(&mut self, x: NodeId, label: &str) -> NodeId {
        let rate = self.model.arch.dropout();
        if !self.dropout || rate == 0.0 {
            return x;
        }
        let mut s = self.stream(&format!("dropout/{label}")).expect("dropout only in train mode");
        self.g.dropout(x, rate, &mut s)
    }

    /// Applies the latent layer at `site` (if any) to `h`. `valid[r]` is 1
    /// for rows that carry a prediction and 0 for padding; only valid rows
    /// contribute KL.
    pub fn latent(&mut self, site: Site, h: NodeId, valid: &[f64]) -> Result<NodeId, ModelError> {
        if !self.model.latent.contains_key(&site) {
            return Ok(h);
        }
        let wi = self.param(&format!("latent/{site}/infer"));
        let (mu, sigma) = latent::heads_node(&mut self.g, h, wi);
        let Some(rng) = self.rng.as_ref() else {
            return Ok(mu);
        };
        let stream = self
            .latent_streams
            .entry(site)
            .or_insert_with(|| rng.derive(&format!("latent/{site}")));
        let [r, c] = self.g.shape(mu);
        let eps = self.g.leaf(Tensor::from_vec(r, c, stream.normals(r * c)));
        let noise = self.g.mul(sigma, eps)?;
        let z = self.g.add(mu, noise)?;

        let wp = self.param(&format!("latent/{site}/prior"));
        let (mr, sr) = latent::heads_node(&mut self.g, h, wp);
        let ratio = self.g.div(sr, sigma)?;
        let log_ratio = self.g.ln(ratio);
        let s2 = self.g.square(sigma);
        let d = self.g.sub(mu, mr)?;
        let d2 = self.g.square(d);
        let num = self.g.add(s2, d2)?;
        let sr2 = self.g.square(sr);
        let den = self.g.scale(sr2, 2.0);
        let quad = self.g.div(num, den)?;
        let terms = self.g.add(log_ratio, quad)?;
        let terms = self.g.add_const(terms, -0.5);
        let terms = self.g.mask_rows(terms, valid.to_vec())?;
        let kl = self.g.sum(terms);
        self.latent_kl.push(kl);
        Ok(z)
    }

    /// KL of every weight and coefficient posterior against its prior, or
    /// `None` when the model has none.
    pub fn param_kl(&mut self) -> Option<NodeId> {
        let mut prefixes: Vec<String> = self.model.bayes.keys().map(|w| format!("bayes/{w}")).collect();
        for (s, gp) in &self.model.gp {
            prefixes.push(format!("gp/{s}/lambda"));
            if gp.theta.is_some() {
                prefixes.push(format!("gp/{s}/theta"));
            }
        }
        let mut acc: Option<NodeId> = None;
        for p in prefixes {
            let mu = self.param(&format!("{p}/mu"));
            let rho = self.param(&format!("{p}/rho"));
            let mr = self.param(&format!("{p}/prior_mu"));
            let sr = self.param(&format!("{p}/prior_sigma"));
            let sigma = self.g.softplus(rho);
            let k = bayes::kl_node(&mut self.g, mu, sigma, mr, sr);
            acc = Some(match acc {
                None => k,
                Some(a) => self.g.add(a, k).expect("scalars"),
            });
        }
        acc
    }
}
