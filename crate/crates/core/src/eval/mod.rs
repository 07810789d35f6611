//! Perplexity, interpolation, n-best rescoring, WER and SNR.

pub mod interp;
pub mod nbest;
pub mod ppl;
pub mod scorer;
pub mod snr;
pub mod wer;

pub use interp::{em_fit_from_logprobs, em_fit_weights, EmFit, InterpolationMixture};
pub use nbest::{rescore_nbest, NBestList, RescoreConfig};
pub use ppl::{perplexity, perplexity_from_logprobs};
pub use scorer::{ArpaScorer, LmScorer, NnScorer, UniformScorer};
pub use snr::{snr_report, SnrReport};
pub use wer::{wer, WerResult};
