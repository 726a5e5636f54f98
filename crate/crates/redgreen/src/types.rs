//! Domain types shared by every module: vocabulary, the secret watermark
//! rule, prefix n-gram contexts, and the red/green partition.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::KeyedHash;

/// Token identifier. Real deployments map text to ids in a thin adapter;
/// everything in this crate is ids end-to-end.
pub type TokenId = u32;

/// Reserved id used to left-pad contexts shorter than the prefix length.
/// Never a member of any vocabulary.
pub const PAD_TOKEN: TokenId = TokenId::MAX;

/// Red/green membership of a token under a keyed context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
}

/// A token id universe `[0, size)` with a set of special ids (padding, EOS
/// and the like) that are excluded from probing targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    size: u32,
    special_tokens: BTreeSet<TokenId>,
    pool: Vec<TokenId>,
}

impl Vocabulary {
    pub fn new(size: u32, special_tokens: impl IntoIterator<Item = TokenId>) -> Result<Self> {
        if size < 2 {
            return Err(Error::invalid("size", format!("{size} < 2")));
        }
        let special_tokens: BTreeSet<TokenId> = special_tokens.into_iter().collect();
        if let Some(&t) = special_tokens.iter().find(|&&t| t >= size) {
            return Err(Error::invalid(
                "special_tokens",
                format!("token {t} outside [0, {size})"),
            ));
        }
        let pool: Vec<TokenId> = (0..size).filter(|t| !special_tokens.contains(t)).collect();
        if pool.len() < 2 {
            return Err(Error::invalid(
                "special_tokens",
                "fewer than 2 probing targets remain",
            ));
        }
        Ok(Vocabulary {
            size,
            special_tokens,
            pool,
        })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn is_special(&self, token: TokenId) -> bool {
        self.special_tokens.contains(&token)
    }

    /// Tokens eligible as probing targets: the vocabulary minus specials.
    pub fn pool(&self) -> &[TokenId] {
        &self.pool
    }

    /// One uniform draw from the probing pool.
    pub fn sample_pool(&self, rng: &mut impl Rng) -> TokenId {
        self.pool[rng.gen_range(0..self.pool.len())]
    }

    /// A uniform context of `len` pool tokens (repeats allowed).
    pub fn sample_context(&self, len: usize, rng: &mut impl Rng) -> Vec<TokenId> {
        (0..len).map(|_| self.sample_pool(rng)).collect()
    }

    /// `m` distinct pool tokens.
    pub fn sample_targets(&self, m: usize, rng: &mut impl Rng) -> Result<Vec<TokenId>> {
        if m > self.pool.len() {
            return Err(Error::invalid(
                "m",
                format!("{m} targets requested, pool has {}", self.pool.len()),
            ));
        }
        Ok(self.pool.choose_multiple(rng, m).copied().collect())
    }
}

/// The secret watermarking rule: key material, prefix n-gram length `h`,
/// strength `delta` (nats) and the green fraction of the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkSpec {
    pub secret_key: Vec<u8>,
    pub prefix_len: usize,
    pub delta: f64,
    pub green_fraction: f64,
}

impl WatermarkSpec {
    pub fn new(
        secret_key: impl Into<Vec<u8>>,
        prefix_len: usize,
        delta: f64,
        green_fraction: f64,
    ) -> Result<Self> {
        let spec = WatermarkSpec {
            secret_key: secret_key.into(),
            prefix_len,
            delta,
            green_fraction,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prefix_len < 1 {
            return Err(Error::invalid("prefix_len", "must be >= 1"));
        }
        if self.delta < 0.0 || self.delta.is_nan() {
            return Err(Error::invalid("delta", format!("{} < 0", self.delta)));
        }
        if !(self.green_fraction > 0.0 && self.green_fraction < 1.0) {
            return Err(Error::invalid(
                "green_fraction",
                format!("{} outside (0, 1)", self.green_fraction),
            ));
        }
        Ok(())
    }

    /// Color of `token` after `ctx`. Pure and deterministic in
    /// `(secret_key, ctx, token)`.
    pub fn partition(&self, ctx: &NGramContext, token: TokenId) -> Color {
        debug_assert_eq!(ctx.tokens().len(), self.prefix_len);
        partition(&self.secret_key, self.green_fraction, ctx.tokens(), token)
    }

    /// The detector's view of the rule: everything except `delta`.
    pub fn detection_key(&self) -> DetectionKey {
        DetectionKey {
            secret_key: self.secret_key.clone(),
            prefix_len: self.prefix_len,
            green_fraction: self.green_fraction,
        }
    }
}

/// Keyed red/green split. A token is green iff the keyed hash of
/// `(secret_key, ctx, token)` lands below `green_fraction` of the 64-bit
/// range, so each context fixes a reproducible green set with the requested
/// marginal density.
pub fn partition(secret_key: &[u8], green_fraction: f64, ctx: &[TokenId], token: TokenId) -> Color {
    let h = KeyedHash::new("partition")
        .bytes(secret_key)
        .tokens(ctx)
        .u32(token)
        .finish();
    let threshold = (green_fraction * 18_446_744_073_709_551_616.0) as u128;
    if (h as u128) < threshold {
        Color::Green
    } else {
        Color::Red
    }
}

/// Serialized form of [`WatermarkSpec`]. Field names are a contract.
#[derive(Serialize, Deserialize)]
struct WatermarkSpecWire {
    secret_key_hex: String,
    prefix_len: usize,
    delta: f64,
    green_fraction: f64,
}

impl Serialize for WatermarkSpec {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        WatermarkSpecWire {
            secret_key_hex: hex::encode(&self.secret_key),
            prefix_len: self.prefix_len,
            delta: self.delta,
            green_fraction: self.green_fraction,
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for WatermarkSpec {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let wire = WatermarkSpecWire::deserialize(de)?;
        let secret_key = hex::decode(&wire.secret_key_hex)
            .map_err(|e| serde::de::Error::custom(format!("secret_key_hex: {e}")))?;
        WatermarkSpec::new(secret_key, wire.prefix_len, wire.delta, wire.green_fraction)
            .map_err(serde::de::Error::custom)
    }
}

/// The public half of the rule, sufficient for detection.
#[derive(Debug, Clone)]
pub struct DetectionKey {
    pub secret_key: Vec<u8>,
    pub prefix_len: usize,
    pub green_fraction: f64,
}

impl DetectionKey {
    pub fn color(&self, ctx: &[TokenId], token: TokenId) -> Color {
        partition(&self.secret_key, self.green_fraction, ctx, token)
    }
}

impl From<&WatermarkSpec> for DetectionKey {
    fn from(spec: &WatermarkSpec) -> Self {
        spec.detection_key()
    }
}

/// The last `prefix_len` tokens of a sequence, left-padded with
/// [`PAD_TOKEN`] when the sequence is shorter, so the first generated token
/// already has a defined context.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NGramContext {
    tokens: Vec<TokenId>,
}

impl NGramContext {
    pub fn new(tokens: Vec<TokenId>, prefix_len: usize) -> Result<Self> {
        if tokens.len() != prefix_len {
            return Err(Error::invalid(
                "tokens",
                format!("length {} != prefix_len {prefix_len}", tokens.len()),
            ));
        }
        Ok(NGramContext { tokens })
    }

    /// Context for the next token after `sequence`.
    pub fn from_tail(sequence: &[TokenId], prefix_len: usize) -> Self {
        let mut tokens = Vec::with_capacity(prefix_len);
        if sequence.len() >= prefix_len {
            tokens.extend_from_slice(&sequence[sequence.len() - prefix_len..]);
        } else {
            tokens.resize(prefix_len - sequence.len(), PAD_TOKEN);
            tokens.extend_from_slice(sequence);
        }
        NGramContext { tokens }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }
}
