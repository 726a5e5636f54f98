//! Probability vectors over token ids.

use rand::Rng;

use crate::error::{Error, Result};
use crate::types::TokenId;

/// Tolerance on normalization checks; renormalization chains accumulate
/// rounding at well below this level.
pub const NORM_TOL: f64 = 1e-9;

/// A probability vector over token ids, either the full next-token
/// distribution or a top-k slice of one (`truncated`).
///
/// Entries are kept sorted by token id so iteration and sampling are
/// deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    entries: Vec<(TokenId, f64)>,
    truncated: bool,
}

impl TokenDistribution {
    /// A full distribution; probabilities must be positive and sum to 1
    /// within [`NORM_TOL`].
    pub fn normalized(entries: Vec<(TokenId, f64)>) -> Result<Self> {
        let d = Self::build(entries, false)?;
        let mass = d.mass();
        if (mass - 1.0).abs() > NORM_TOL {
            return Err(Error::invalid(
                "entries",
                format!("probabilities sum to {mass}, expected 1"),
            ));
        }
        Ok(d)
    }

    /// A top-k slice: positive probabilities with total mass at most 1.
    pub fn truncated(entries: Vec<(TokenId, f64)>) -> Result<Self> {
        let d = Self::build(entries, true)?;
        if d.mass() > 1.0 + NORM_TOL {
            return Err(Error::invalid(
                "entries",
                format!("truncated mass {} exceeds 1", d.mass()),
            ));
        }
        Ok(d)
    }

    /// Normalize arbitrary positive weights into a full distribution.
    pub fn from_weights(entries: Vec<(TokenId, f64)>) -> Result<Self> {
        let total: f64 = entries.iter().map(|(_, w)| w).sum();
        if total <= 0.0 || total.is_nan() {
            return Err(Error::invalid("entries", "total weight must be positive"));
        }
        Self::normalized(entries.into_iter().map(|(t, w)| (t, w / total)).collect())
    }

    fn build(mut entries: Vec<(TokenId, f64)>, truncated: bool) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyInput {
                what: "distribution entries",
            });
        }
        entries.sort_unstable_by_key(|&(t, _)| t);
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::invalid(
                    "entries",
                    format!("duplicate token {}", w[0].0),
                ));
            }
        }
        if let Some(&(t, p)) = entries.iter().find(|&&(_, p)| p <= 0.0 || !p.is_finite()) {
            return Err(Error::invalid(
                "entries",
                format!("probability {p} for token {t} is not positive and finite"),
            ));
        }
        Ok(TokenDistribution { entries, truncated })
    }

    pub fn is_truncated(&self) -> bool {
        self.truncated
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mass(&self) -> f64 {
        self.entries.iter().map(|(_, p)| p).sum()
    }

    pub fn prob(&self, token: TokenId) -> Option<f64> {
        self.entries
            .binary_search_by_key(&token, |&(t, _)| t)
            .ok()
            .map(|i| self.entries[i].1)
    }

    /// Entries in ascending token-id order.
    pub fn iter(&self) -> impl Iterator<Item = (TokenId, f64)> + '_ {
        self.entries.iter().copied()
    }

    pub fn tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.entries.iter().map(|&(t, _)| t)
    }

    /// Drop entries matching `pred` and renormalize over the remainder.
    pub fn without(&self, pred: impl Fn(TokenId) -> bool) -> Result<Self> {
        let kept: Vec<(TokenId, f64)> = self
            .entries
            .iter()
            .copied()
            .filter(|&(t, _)| !pred(t))
            .collect();
        Self::from_weights(kept)
    }

    /// One draw by inverse CDF over the id-sorted entries. Truncated
    /// slices sample proportionally to their retained mass.
    pub fn sample(&self, rng: &mut impl Rng) -> TokenId {
        let target = rng.gen::<f64>() * self.mass();
        let mut acc = 0.0;
        for &(t, p) in &self.entries {
            acc += p;
            if target < acc {
                return t;
            }
        }
        self.entries[self.entries.len() - 1].0
    }

    /// Keep the `k` most probable entries (ties toward lower id). The result
    /// is flagged truncated unless it retains the full support.
    pub fn top_k(&self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("k", "must be >= 1"));
        }
        if k >= self.entries.len() {
            return Ok(self.clone());
        }
        let mut by_prob: Vec<(TokenId, f64)> = self.entries.clone();
        by_prob.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        by_prob.truncate(k);
        Self::truncated(by_prob)
    }
}
