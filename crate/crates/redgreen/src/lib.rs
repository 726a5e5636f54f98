//! Red-green n-gram watermarking for token streams, and the full attack
//! stack against it.
//!
//! The watermark side splits the vocabulary into keyed red and green lists
//! per prefix n-gram, boosts green tokens during sampling, and detects the
//! bias with a z-test. The attack side recovers the rule from "pick one of
//! these two tokens" probe queries alone (prefix length, strength, and
//! per-context green lists), then either inverts the boost during decoding
//! (removal, with a closed-form bound on the distribution drift) or grafts
//! the recovered rule onto a second model (exploitation).
//!
//! A deterministic synthetic language model stands in for the victim in all
//! tests and benchmarks; a remote client drives the same probes against any
//! endpoint exposing top-k token log-probabilities.

pub mod bench;
pub mod dist;
pub mod error;
pub mod exploit;
pub mod hashing;
pub mod oracle;
pub mod removal;
pub mod stats;
pub mod steal;
pub mod types;
pub mod watermark;

pub use dist::TokenDistribution;
pub use error::{Error, Result};
pub use types::{Color, DetectionKey, NGramContext, TokenId, Vocabulary, WatermarkSpec, PAD_TOKEN};
