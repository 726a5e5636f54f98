//! The watermark engine: bias a next-token distribution toward the keyed
//! green list, run the sampling loop, and detect the bias with a z-test.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::TokenDistribution;
use crate::error::{Error, Result};
use crate::stats::{normal_quantile, normal_sf};
use crate::types::{Color, DetectionKey, NGramContext, TokenId, Vocabulary, WatermarkSpec};

/// Anything that can produce a full next-token distribution for a context.
pub trait NextTokenSource: Sync {
    fn vocab(&self) -> &Vocabulary;
    fn next_distribution(&self, context: &[TokenId]) -> Result<TokenDistribution>;
}

/// Multiply green-token probabilities by `e^delta` and renormalize, in log
/// space. The membership closure decides which tokens are green.
///
/// Within-color probability ratios are preserved, and cross-color ratios
/// pick up exactly the `e^delta` factor. Requires the full support: with a
/// truncated slice the normalizer is wrong.
pub fn boost_green(
    p: &TokenDistribution,
    delta: f64,
    is_green: impl Fn(TokenId) -> bool,
) -> Result<TokenDistribution> {
    if p.is_truncated() {
        return Err(Error::TruncatedDistribution);
    }
    if delta == 0.0 {
        return Ok(p.clone());
    }
    let logits: Vec<(TokenId, f64)> = p
        .iter()
        .map(|(t, prob)| {
            let mut w = prob.ln();
            if is_green(t) {
                w += delta;
            }
            (t, w)
        })
        .collect();
    let max = logits
        .iter()
        .map(|&(_, w)| w)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .map(|&(_, w)| (w - max).exp())
            .sum::<f64>()
            .ln();
    TokenDistribution::normalized(
        logits
            .into_iter()
            .map(|(t, w)| (t, (w - lse).exp()))
            .collect(),
    )
}

/// Watermarked next-token distribution for `ctx` under `spec`.
pub fn apply_watermark(
    p: &TokenDistribution,
    spec: &WatermarkSpec,
    ctx: &NGramContext,
) -> Result<TokenDistribution> {
    boost_green(p, spec.delta, |t| spec.partition(ctx, t) == Color::Green)
}

/// Options for the sampling loop.
#[derive(Debug, Clone, Copy)]
pub struct GenerateOptions {
    /// Drop special tokens from the base distribution before watermarking,
    /// so every run emits the full requested length.
    pub suppress_special: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            suppress_special: true,
        }
    }
}

/// Sample `n_tokens` continuations of `prompt`, watermarking each step's
/// base distribution. Returns only the generated tokens.
///
/// Deterministic given the rng state; a `delta = 0` spec reproduces the
/// unwatermarked stream exactly.
pub fn generate(
    base: &dyn NextTokenSource,
    spec: &WatermarkSpec,
    prompt: &[TokenId],
    n_tokens: usize,
    opts: GenerateOptions,
    rng: &mut impl Rng,
) -> Result<Vec<TokenId>> {
    if n_tokens < 1 {
        return Err(Error::invalid("n_tokens", "must be >= 1"));
    }
    let vocab = base.vocab();
    let mut sequence = prompt.to_vec();
    let mut out = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let mut p = base.next_distribution(&sequence)?;
        if opts.suppress_special {
            p = p.without(|t| vocab.is_special(t))?;
        }
        let ctx = NGramContext::from_tail(&sequence, spec.prefix_len);
        let pw = apply_watermark(&p, spec, &ctx)?;
        let token = pw.sample(rng);
        sequence.push(token);
        out.push(token);
    }
    Ok(out)
}

/// Outcome of the green-count hypothesis test over one token sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionReport {
    pub n_scored: usize,
    pub n_green: usize,
    #[serde(rename = "z")]
    pub z_score: f64,
    #[serde(rename = "p")]
    pub p_value: f64,
}

/// Score every position with a full preceding n-gram and test the green
/// count against the `green_fraction` null. Repeated n-grams are scored
/// every time they occur.
pub fn detect(tokens: &[TokenId], key: &DetectionKey) -> Result<DetectionReport> {
    if tokens.len() <= key.prefix_len {
        return Err(Error::SequenceTooShort {
            len: tokens.len(),
            min: key.prefix_len,
        });
    }
    let n_scored = tokens.len() - key.prefix_len;
    let mut n_green = 0usize;
    for pos in key.prefix_len..tokens.len() {
        let ctx = &tokens[pos - key.prefix_len..pos];
        if key.color(ctx, tokens[pos]) == Color::Green {
            n_green += 1;
        }
    }
    let gf = key.green_fraction;
    let n = n_scored as f64;
    let z = (n_green as f64 - gf * n) / (n * gf * (1.0 - gf)).sqrt();
    Ok(DetectionReport {
        n_scored,
        n_green,
        z_score: z,
        p_value: normal_sf(z),
    })
}

/// Fraction of z-scores strictly above the theoretical threshold
/// `Phi^{-1}(1 - fpr)`.
pub fn tpr_at_fpr(z_scores: &[f64], fpr: f64) -> Result<f64> {
    if z_scores.is_empty() {
        return Err(Error::EmptyInput { what: "z_scores" });
    }
    if !(fpr > 0.0 && fpr < 1.0) {
        return Err(Error::invalid("fpr", format!("{fpr} outside (0, 1)")));
    }
    let threshold = normal_quantile(1.0 - fpr);
    let hits = z_scores.iter().filter(|&&z| z > threshold).count();
    Ok(hits as f64 / z_scores.len() as f64)
}
