//! A deterministic synthetic language model with a hidden watermark rule.
//!
//! The base next-token distribution for a context is a Dirichlet(1) draw
//! from a seeded stream, so it is nondegenerate, context-dependent, and
//! reproducible. Probe queries answer from the idealized pair distribution
//! `(0.5 + eps, 0.5 - eps)` with a hash-derived symmetric perturbation, then
//! watermark it with the hidden rule, which makes every estimator property
//! checkable against known ground truth.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::dist::TokenDistribution;
use crate::error::{Error, Result};
use crate::hashing::{unit_f64, KeyedHash};
use crate::oracle::{OracleMode, ProbeOracle, ProbeOrder, ProbeQuery, RawPair};
use crate::types::{Color, NGramContext, TokenId, Vocabulary, WatermarkSpec};
use crate::watermark::{boost_green, NextTokenSource};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Configuration of the synthetic model.
#[derive(Debug, Clone)]
pub struct SyntheticLmConfig {
    pub vocab: Vocabulary,
    /// The hidden truth every estimator is measured against.
    pub spec: WatermarkSpec,
    /// Bound on the symmetric probe perturbation; must stay below 0.5 so
    /// pair probabilities remain in (0, 1).
    pub noise_max: f64,
    /// Seed of the base next-token distribution stream.
    pub base_seed: u64,
    pub mode: OracleMode,
    /// Remove special tokens from generation-facing distributions.
    pub suppress_special: bool,
}

/// Deterministic watermarked model. Pure and lock-free; every public query
/// bumps an atomic invocation counter.
pub struct SyntheticLm {
    cfg: SyntheticLmConfig,
    queries: AtomicU64,
}

impl SyntheticLm {
    pub fn new(cfg: SyntheticLmConfig) -> Result<Self> {
        if !(cfg.noise_max >= 0.0 && cfg.noise_max < 0.5) {
            return Err(Error::invalid(
                "noise_max",
                format!("{} outside [0, 0.5)", cfg.noise_max),
            ));
        }
        cfg.spec.validate()?;
        Ok(SyntheticLm {
            cfg,
            queries: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &SyntheticLmConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &WatermarkSpec {
        &self.cfg.spec
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.cfg.vocab
    }

    fn count(&self, n: u64) {
        self.queries.fetch_add(n, Ordering::Relaxed);
    }

    /// Base (unwatermarked) distribution: one Dirichlet(1) draw keyed by the
    /// full context.
    fn base_uncounted(&self, context: &[TokenId]) -> TokenDistribution {
        let seed = KeyedHash::new("base-dist")
            .u64(self.cfg.base_seed)
            .tokens(context)
            .finish();
        let mut key = [0u8; 32];
        for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
            let h = KeyedHash::new("base-dist-key")
                .u64(seed)
                .u64(i as u64)
                .finish();
            chunk.copy_from_slice(&h.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        let mut entries = Vec::with_capacity(self.cfg.vocab.size() as usize);
        for t in 0..self.cfg.vocab.size() {
            if self.cfg.suppress_special && self.cfg.vocab.is_special(t) {
                continue;
            }
            // Exp(1) weights normalize to a flat Dirichlet draw.
            let w = -(1.0 - rng.gen::<f64>()).ln();
            entries.push((t, w.max(1e-300)));
        }
        TokenDistribution::from_weights(entries).expect("positive weights")
    }

    fn watermarked_uncounted(&self, context: &[TokenId]) -> Result<TokenDistribution> {
        let base = self.base_uncounted(context);
        let ctx = NGramContext::from_tail(context, self.cfg.spec.prefix_len);
        boost_green(&base, self.cfg.spec.delta, |t| {
            self.cfg.spec.partition(&ctx, t) == Color::Green
        })
    }

    /// Watermarked next-token distribution (counted as one query).
    pub fn watermarked_distribution(&self, context: &[TokenId]) -> Result<TokenDistribution> {
        self.count(1);
        self.watermarked_uncounted(context)
    }

    /// Signed first-slot perturbation for presenting `(a, b)` after
    /// `context`. Its magnitude depends only on the unordered pair, and the
    /// sign flips under a swap, so order-averaging cancels it exactly.
    fn probe_noise(&self, context: &[TokenId], a: TokenId, b: TokenId) -> f64 {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let h = KeyedHash::new("probe-noise")
            .u64(self.cfg.base_seed)
            .tokens(context)
            .u32(lo)
            .u32(hi)
            .finish();
        let u = 2.0 * unit_f64(h) - 1.0;
        let sign = if a == lo { 1.0 } else { -1.0 };
        self.cfg.noise_max * u * sign
    }

    /// Watermarked pair probabilities for one presented order, uncounted.
    /// Returns `(p(shown_first), p(shown_second))`.
    fn pair_uncounted(&self, query: &ProbeQuery) -> Result<(f64, f64)> {
        let (shown_first, shown_second) = match query.order {
            ProbeOrder::Ij => (query.first, query.second),
            ProbeOrder::Ji => (query.second, query.first),
        };
        let eps = self.probe_noise(&query.context, shown_first, shown_second);
        let pair = TokenDistribution::normalized(vec![
            (shown_first, 0.5 + eps),
            (shown_second, 0.5 - eps),
        ])?;
        let ctx = NGramContext::from_tail(&query.context, self.cfg.spec.prefix_len);
        let pw = boost_green(&pair, self.cfg.spec.delta, |t| {
            self.cfg.spec.partition(&ctx, t) == Color::Green
        })?;
        Ok((
            pw.prob(shown_first).expect("candidate present"),
            pw.prob(shown_second).expect("candidate present"),
        ))
    }
}

impl NextTokenSource for SyntheticLm {
    fn vocab(&self) -> &Vocabulary {
        &self.cfg.vocab
    }

    fn next_distribution(&self, context: &[TokenId]) -> Result<TokenDistribution> {
        self.count(1);
        Ok(self.base_uncounted(context))
    }
}

impl ProbeOracle for SyntheticLm {
    fn vocab(&self) -> &Vocabulary {
        &self.cfg.vocab
    }

    fn mode(&self) -> OracleMode {
        self.cfg.mode
    }

    fn probe_exact(&self, query: &ProbeQuery) -> Result<RawPair> {
        self.count(1);
        let (shown_first, shown_second) = self.pair_uncounted(query)?;
        let (p_first, p_second) = match query.order {
            ProbeOrder::Ij => (shown_first, shown_second),
            ProbeOrder::Ji => (shown_second, shown_first),
        };
        Ok(RawPair {
            p_first,
            p_second,
            low_confidence: false,
        })
    }

    fn probe_sample(&self, query: &ProbeQuery, n_samples: usize) -> Result<(u64, u64)> {
        self.count(n_samples as u64);
        let (p_shown_first, _) = self.pair_uncounted(query)?;
        let (shown_first, shown_second) = match query.order {
            ProbeOrder::Ij => (query.first, query.second),
            ProbeOrder::Ji => (query.second, query.first),
        };
        let seed = KeyedHash::new("probe-sample")
            .u64(self.cfg.base_seed)
            .tokens(&query.context)
            .u32(shown_first)
            .u32(shown_second)
            .finish();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_shown_first = 0u64;
        for _ in 0..n_samples {
            if rng.gen::<f64>() < p_shown_first {
                c_shown_first += 1;
            }
        }
        let c_shown_second = n_samples as u64 - c_shown_first;
        Ok(match query.order {
            ProbeOrder::Ij => (c_shown_first, c_shown_second),
            ProbeOrder::Ji => (c_shown_second, c_shown_first),
        })
    }

    fn top_k(&self, context: &[TokenId], k: usize) -> Result<TokenDistribution> {
        if k < 1 {
            return Err(Error::invalid("k", "must be >= 1"));
        }
        self.count(1);
        self.watermarked_uncounted(context)?.top_k(k)
    }

    fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }
}
