//! Uniform access to "probability of a candidate token continuing a probe
//! context", in three flavors: exact pair probabilities (gray box), sampled
//! occurrence counts (black box), and top-k next-token distributions.

mod remote;
mod synthetic;

pub use remote::{EndpointConfig, RemoteOracle};
pub use synthetic::{SyntheticLm, SyntheticLmConfig};

use serde::{Deserialize, Serialize};

use crate::dist::TokenDistribution;
use crate::error::{Error, Result};
use crate::types::{TokenId, Vocabulary};

/// Presentation order of the two candidates in a probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeOrder {
    /// `first` shown before `second`.
    Ij,
    /// `second` shown before `first`.
    Ji,
}

/// One "pick one of these two tokens at random" probe.
#[derive(Debug, Clone)]
pub struct ProbeQuery {
    pub context: Vec<TokenId>,
    pub first: TokenId,
    pub second: TokenId,
    pub order: ProbeOrder,
}

impl ProbeQuery {
    pub fn new(
        context: Vec<TokenId>,
        first: TokenId,
        second: TokenId,
        order: ProbeOrder,
    ) -> Result<Self> {
        if first == second {
            return Err(Error::invalid("second", "candidates must differ"));
        }
        Ok(ProbeQuery {
            context,
            first,
            second,
            order,
        })
    }
}

/// Raw per-order probe result, aligned to the query's `(first, second)`
/// candidates regardless of presentation order.
#[derive(Debug, Clone, Copy)]
pub struct RawPair {
    pub p_first: f64,
    pub p_second: f64,
    /// Set when a candidate was absent from a remote top-k response and its
    /// probability was floored.
    pub low_confidence: bool,
}

/// Order-averaged pair estimate, renormalized over the two candidates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbePair {
    pub p_first: f64,
    pub p_second: f64,
}

impl ProbePair {
    pub fn new(weight_first: f64, weight_second: f64) -> Result<Self> {
        let bad = |w: f64| w <= 0.0 || w.is_nan();
        if bad(weight_first) || bad(weight_second) {
            return Err(Error::invalid(
                "probe weights",
                format!("({weight_first}, {weight_second}) must both be positive"),
            ));
        }
        let total = weight_first + weight_second;
        Ok(ProbePair {
            p_first: weight_first / total,
            p_second: weight_second / total,
        })
    }

    /// Log of the pair ratio, the attack's basic observable.
    pub fn log_ratio(&self) -> f64 {
        (self.p_first / self.p_second).ln()
    }
}

/// How pair probabilities are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum OracleMode {
    /// Gray box: the endpoint exposes exact (top-k) token probabilities.
    Exact,
    /// Black box: probabilities are estimated from `n_samples` completions
    /// per presentation order.
    Sampled { n_samples: usize },
}

/// A queryable (possibly watermarked) model.
///
/// Implementations must be safe to call from many threads at once, and
/// results must not depend on in-flight ordering. `query_count` counts every
/// model invocation: one per exact probe, one per top-k request, and one per
/// sampled completion.
pub trait ProbeOracle: Sync {
    fn vocab(&self) -> &Vocabulary;

    fn mode(&self) -> OracleMode;

    /// Exact pair probabilities for one presentation order.
    fn probe_exact(&self, query: &ProbeQuery) -> Result<RawPair>;

    /// Sampled occurrence counts `(first, second)` over `n_samples`
    /// completions of one presentation order. Completions starting with
    /// neither candidate are discarded, so counts may sum below `n_samples`.
    fn probe_sample(&self, query: &ProbeQuery, n_samples: usize) -> Result<(u64, u64)>;

    /// The `k` most probable next tokens (unrenormalized, flagged truncated
    /// unless the full support is returned).
    fn top_k(&self, context: &[TokenId], k: usize) -> Result<TokenDistribution>;

    /// Total model invocations so far.
    fn query_count(&self) -> u64;
}

/// Pair probability estimate for `(t_i, t_j)` after `context`, averaging
/// both presentation orders to cancel positional bias.
///
/// In exact mode the two orders' raw probabilities are summed per candidate
/// and renormalized over the pair. In sampled mode the per-order occurrence
/// counts are clamped into `[1, n_samples - 1]` before the same combination,
/// which keeps the estimate finite when one candidate is never sampled.
pub fn estimate_f(
    oracle: &dyn ProbeOracle,
    context: &[TokenId],
    t_i: TokenId,
    t_j: TokenId,
) -> Result<ProbePair> {
    let fwd = ProbeQuery::new(context.to_vec(), t_i, t_j, ProbeOrder::Ij)?;
    let rev = ProbeQuery::new(context.to_vec(), t_i, t_j, ProbeOrder::Ji)?;
    match oracle.mode() {
        OracleMode::Exact => {
            let a = oracle.probe_exact(&fwd)?;
            let b = oracle.probe_exact(&rev)?;
            ProbePair::new(a.p_first + b.p_first, a.p_second + b.p_second)
        }
        OracleMode::Sampled { n_samples } => {
            if n_samples < 2 {
                return Err(Error::invalid(
                    "n_samples",
                    format!("{n_samples} < 2; count clamping needs at least 2"),
                ));
            }
            let clamp = |c: u64| c.clamp(1, n_samples as u64 - 1) as f64;
            let (a_i, a_j) = oracle.probe_sample(&fwd, n_samples)?;
            let (b_i, b_j) = oracle.probe_sample(&rev, n_samples)?;
            ProbePair::new(clamp(a_i) + clamp(b_i), clamp(a_j) + clamp(b_j))
        }
    }
}
