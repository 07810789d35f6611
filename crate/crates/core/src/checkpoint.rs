//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `BAYLMCK\0` |
//! | 4     | format version (u32) |
//! | 8     | header length `h` (u64) |
//! | h     | UTF-8 JSON header |
//! | ...   | every array of `header.arrays`, in order, as row-major f64 |
//!
//! The header records the architecture, the vocabulary, the
//! Bayesian/GP/latent/gated sites and the name and shape of each array.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bayes::GaussianVariational;
use crate::corpus::Vocabulary;
use crate::gp::{Activation, GpActivation, BASIS};
use crate::latent::LatentOutputLayer;
use crate::model::{Arch, ArchGate, Branch, LanguageModel, ModelError, Site};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BAYLMCK\0";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("{0} trailing bytes after the last array")]
    Trailing(usize),
    #[error("array `{0}` is missing")]
    Missing(String),
    #[error("array `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        found: [usize; 2],
        expected: [usize; 2],
    },
    #[error("checkpoint does not match the requested model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GpEntry {
    site: Site,
    has_theta: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GateEntry {
    site: Site,
    hard: Option<Branch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: Arch,
    vocab_size: usize,
    vocab: Option<Vec<String>>,
    bayes: Vec<String>,
    gp: Vec<GpEntry>,
    basis: Vec<Activation>,
    latent: Vec<Site>,
    gates: Vec<GateEntry>,
    arrays: Vec<ArrayEntry>,
}

/// A model together with the vocabulary it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: LanguageModel,
    pub vocab: Option<Vocabulary>,
}

pub fn to_bytes(model: &LanguageModel, vocab: Option<&Vocabulary>) -> Vec<u8> {
    let arrays = model.arrays();
    let header = Header {
        arch: model.arch.clone(),
        vocab_size: model.vocab_size,
        vocab: vocab.map(|v| v.tokens().to_vec()),
        bayes: model.bayes.keys().cloned().collect(),
        gp: model
            .gp
            .iter()
            .map(|(s, g)| GpEntry {
                site: *s,
                has_theta: g.theta.is_some(),
            })
            .collect(),
        basis: BASIS.to_vec(),
        latent: model.latent.keys().copied().collect(),
        gates: model
            .gates
            .iter()
            .map(|(s, g)| GateEntry { site: *s, hard: g.hard })
            .collect(),
        arrays: arrays
            .iter()
            .map(|(n, t)| ArrayEntry {
                name: n.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let body: usize = arrays.iter().map(|(_, t)| t.len() * 8).sum();
    let mut out = Vec::with_capacity(20 + json.len() + body);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &arrays {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| CheckpointError::Truncated)?;
    let header: Header =
        serde_json::from_slice(r.take(len)?).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.basis != BASIS {
        return Err(CheckpointError::Header(format!("unsupported basis order {:?}", header.basis)));
    }
    let mut arrays: BTreeMap<String, Tensor> = BTreeMap::new();
    for a in &header.arrays {
        let n = a.rows.checked_mul(a.cols).ok_or(CheckpointError::Truncated)?;
        let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if arrays.insert(a.name.clone(), Tensor::from_vec(a.rows, a.cols, data)).is_some() {
            return Err(CheckpointError::Header(format!("array `{}` listed twice", a.name)));
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Trailing(bytes.len() - r.pos));
    }
    let model = assemble(&header, arrays)?;
    Ok(Checkpoint {
        model,
        vocab: header.vocab.map(Vocabulary::from_tokens),
    })
}

fn assemble(h: &Header, mut arrays: BTreeMap<String, Tensor>) -> Result<LanguageModel, CheckpointError> {
    h.arch.validate()?;
    let mut take = |name: String| arrays.remove(&name).ok_or(CheckpointError::Missing(name));
    let mut gv = |prefix: &str| -> Result<GaussianVariational, CheckpointError> {
        let v = GaussianVariational {
            mu: take(format!("{prefix}/mu"))?,
            rho: take(format!("{prefix}/rho"))?,
            prior_mu: take(format!("{prefix}/prior_mu"))?,
            prior_sigma: take(format!("{prefix}/prior_sigma"))?,
        };
        for (part, t) in [("rho", &v.rho), ("prior_mu", &v.prior_mu), ("prior_sigma", &v.prior_sigma)] {
            if t.shape() != v.mu.shape() {
                return Err(CheckpointError::Shape {
                    name: format!("{prefix}/{part}"),
                    found: t.shape(),
                    expected: v.mu.shape(),
                });
            }
        }
        Ok(v)
    };
    let mut bayes = BTreeMap::new();
    for w in &h.bayes {
        bayes.insert(w.clone(), gv(&format!("bayes/{w}"))?);
    }
    let mut gp = BTreeMap::new();
    for e in &h.gp {
        let lambda = gv(&format!("gp/{}/lambda", e.site))?;
        let theta = if e.has_theta {
            Some(gv(&format!("gp/{}/theta", e.site))?)
        } else {
            None
        };
        gp.insert(e.site, GpActivation { lambda, theta });
    }
    let mut take = |name: String| arrays.remove(&name).ok_or(CheckpointError::Missing(name));
    let mut latent = BTreeMap::new();
    for s in &h.latent {
        latent.insert(
            *s,
            LatentOutputLayer {
                infer: take(format!("latent/{s}/infer"))?,
                prior: take(format!("latent/{s}/prior"))?,
            },
        );
    }
    let mut gates = BTreeMap::new();
    for e in &h.gates {
        gates.insert(
            e.site,
            ArchGate {
                logits: take(format!("arch/{}", e.site))?,
                hard: e.hard,
            },
        );
    }
    if let Some(n) = arrays.keys().find(|n| n.contains('/')) {
        return Err(CheckpointError::Header(format!("array `{n}` belongs to no declared site")));
    }
    let weights = arrays;
    let covered = |w: &str| {
        bayes.contains_key(w)
            || gp
                .keys()
                .any(|s: &Site| s.weights().iter().any(|x| x == w) && gp[s].theta.is_some())
    };
    for (name, shape) in h.arch.weight_shapes(h.vocab_size) {
        let found = match weights.get(&name) {
            Some(t) => t.shape(),
            None if covered(&name) => continue,
            None => return Err(CheckpointError::Missing(name)),
        };
        if found != shape {
            return Err(CheckpointError::Shape {
                name,
                found,
                expected: shape,
            });
        }
    }
    let expected: Vec<String> = h.arch.weight_shapes(h.vocab_size).into_iter().map(|(n, _)| n).collect();
    if let Some(extra) = weights.keys().find(|n| !expected.contains(n)) {
        return Err(CheckpointError::Header(format!("unexpected array `{extra}`")));
    }
    Ok(LanguageModel {
        arch: h.arch.clone(),
        vocab_size: h.vocab_size,
        weights,
        bayes,
        gp,
        latent,
        gates,
    })
}

pub fn save(path: impl AsRef<Path>, model: &LanguageModel, vocab: Option<&Vocabulary>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model, vocab)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes)
}

/// Bayesian model whose posteriors (and priors) are centred on the
/// weights of a converged point-estimate `baseline`. Every non-Bayesian
/// weight is copied. `prior_sigma` defaults to the architecture's value.
pub fn init_prior_from_checkpoint(
    baseline: &LanguageModel,
    arch: &Arch,
    positions: &[Site],
    prior_sigma: Option<f64>,
) -> Result<LanguageModel, CheckpointError> {
    if &baseline.arch != arch {
        return Err(CheckpointError::Mismatch(format!(
            "checkpoint architecture {:?} differs from the configured {:?}",
            baseline.arch, arch
        )));
    }
    if !(baseline.bayes.is_empty() && baseline.gp.is_empty() && baseline.gates.is_empty()) {
        return Err(CheckpointError::Mismatch("prior source must be a point-estimate model".into()));
    }
    let sigma = prior_sigma.unwrap_or_else(|| baseline.default_prior_sigma());
    let mut m = baseline.clone();
    for &s in positions {
        m.add_bayes(s, sigma, false)?;
    }
    Ok(m)
}
