//! Language models with Bayesian, Gaussian-process and latent-variable
//! layers, a small reverse-mode autodiff engine to train them, n-gram
//! baselines, and the evaluation tools used to compare them.

pub mod bayes;
pub mod checkpoint;
pub mod corpus;
pub mod eval;
pub mod gp;
pub mod gradcheck;
pub mod graph;
pub mod latent;
pub mod model;
pub mod nas;
pub mod ngram;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use bayes::GaussianVariational;
pub use corpus::{Batch, Corpus, Vocabulary};
pub use gp::{Activation, GpActivation};
pub use graph::{Graph, NodeId};
pub use latent::LatentOutputLayer;
pub use model::{Arch, LanguageModel, LstmConfig, ModelKind, Site, SiteKind, TransformerConfig};
pub use ngram::ArpaModel;
pub use optim::SgdState;
pub use rng::RngStream;
pub use tensor::Tensor;
