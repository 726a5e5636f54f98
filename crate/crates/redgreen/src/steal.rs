//! Recovering the watermark rule from probe queries alone: pairwise log
//! probability ratios, per-token scores, prefix length and strength
//! estimation, green-list recovery, and a memoizing per-token classifier.

use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::sync::RwLock;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::KeyedHash;
use crate::oracle::{estimate_f, ProbeOracle};
use crate::types::{Color, NGramContext, TokenId, WatermarkSpec};

/// Estimation hyperparameters. `alpha1`/`alpha2` bracket the log-ratio
/// magnitudes treated as significant, `beta` is the consistency threshold
/// for the prefix-length scan, `gamma` scales the score cutoff for strength
/// estimation, `m` is the target-set size and `c` the strength repeat count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StealHyper {
    #[serde(default = "defaults::alpha1")]
    pub alpha1: f64,
    #[serde(default = "defaults::alpha2")]
    pub alpha2: f64,
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default = "defaults::m")]
    pub m: usize,
    #[serde(default = "defaults::c")]
    pub c: usize,
}

mod defaults {
    pub fn alpha1() -> f64 {
        0.2
    }
    pub fn alpha2() -> f64 {
        10.0
    }
    pub fn beta() -> f64 {
        0.8
    }
    pub fn gamma() -> f64 {
        0.1
    }
    pub fn m() -> usize {
        50
    }
    pub fn c() -> usize {
        5
    }
}

impl Default for StealHyper {
    fn default() -> Self {
        StealHyper {
            alpha1: defaults::alpha1(),
            alpha2: defaults::alpha2(),
            beta: defaults::beta(),
            gamma: defaults::gamma(),
            m: defaults::m(),
            c: defaults::c(),
        }
    }
}

impl StealHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 > 0.0 && self.alpha1 < self.alpha2) {
            return Err(Error::invalid(
                "alpha1",
                format!(
                    "need 0 < alpha1 ({}) < alpha2 ({})",
                    self.alpha1, self.alpha2
                ),
            ));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::invalid(
                "beta",
                format!("{} outside (0, 1]", self.beta),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid(
                "gamma",
                format!("{} outside (0, 1)", self.gamma),
            ));
        }
        if self.m < 2 {
            return Err(Error::invalid("m", "need at least 2 targets"));
        }
        if self.c < 1 {
            return Err(Error::invalid("c", "need at least 1 round"));
        }
        Ok(())
    }
}

/// Pairwise log probability ratios over an ordered target set: entry
/// `(i, j)` is `log(p_i / p_j)` from the order-averaged pair estimate.
/// Antisymmetric with a zero diagonal by construction.
#[derive(Debug, Clone)]
pub struct RatioMatrix {
    targets: Vec<TokenId>,
    values: Vec<f64>,
}

impl RatioMatrix {
    /// Build from explicit values (row-major `m x m`); checks shape and
    /// antisymmetry.
    pub fn from_values(targets: Vec<TokenId>, values: Vec<f64>) -> Result<Self> {
        let m = targets.len();
        if values.len() != m * m {
            return Err(Error::invalid(
                "values",
                format!("{} entries for a {m}x{m} matrix", values.len()),
            ));
        }
        for i in 0..m {
            for j in 0..m {
                let a = values[i * m + j];
                let b = values[j * m + i];
                if (a + b).abs() > 1e-9 {
                    return Err(Error::invalid(
                        "values",
                        format!("entry ({i},{j}) breaks antisymmetry: {a} vs {b}"),
                    ));
                }
            }
        }
        Ok(RatioMatrix { targets, values })
    }

    pub fn dim(&self) -> usize {
        self.targets.len()
    }

    pub fn targets(&self) -> &[TokenId] {
        &self.targets
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim() + j]
    }

    /// Matrix with every entry negated (used by consistency checks).
    pub fn negated(&self) -> Self {
        RatioMatrix {
            targets: self.targets.clone(),
            values: self.values.iter().map(|v| -v).collect(),
        }
    }
}

/// Pairwise ratio matrix for `targets` after `context`: one pair estimate
/// per unordered pair (`m(m-1)/2` estimator calls), mirrored antisymmetrically.
/// Any failed pair aborts the whole matrix.
pub fn relative_ratios(
    oracle: &dyn ProbeOracle,
    context: &[TokenId],
    targets: &[TokenId],
) -> Result<RatioMatrix> {
    let m = targets.len();
    {
        let mut seen = std::collections::HashSet::new();
        for &t in targets {
            if !seen.insert(t) {
                return Err(Error::invalid("targets", format!("duplicate token {t}")));
            }
        }
    }
    let mut values = vec![0.0; m * m];
    for i in 0..m {
        for j in (i + 1)..m {
            let pair = estimate_f(oracle, context, targets[i], targets[j])?;
            let r = pair.log_ratio();
            values[i * m + j] = r;
            values[j * m + i] = -r;
        }
    }
    Ok(RatioMatrix {
        targets: targets.to_vec(),
        values,
    })
}

/// Integer scores over a target set: positive for tokens that beat their
/// peers by a significant ratio, negative for tokens that lose.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenScores {
    pub targets: Vec<TokenId>,
    pub scores: Vec<i64>,
}

/// Count, for each row token, how many peers it beats (`alpha1 < r < alpha2`)
/// minus how many beat it (`-alpha2 < r < -alpha1`).
pub fn scores_from_ratios(ratios: &RatioMatrix, alpha1: f64, alpha2: f64) -> TokenScores {
    let m = ratios.dim();
    let mut scores = vec![0i64; m];
    for (i, score) in scores.iter_mut().enumerate() {
        for j in 0..m {
            let r = ratios.get(i, j);
            if r > alpha1 && r < alpha2 {
                *score += 1;
            } else if r < -alpha1 && r > -alpha2 {
                *score -= 1;
            }
        }
    }
    TokenScores {
        targets: ratios.targets().to_vec(),
        scores,
    }
}

/// Probe-backed token scores for `targets` after `context`.
pub fn token_scores(
    oracle: &dyn ProbeOracle,
    context: &[TokenId],
    targets: &[TokenId],
    alpha1: f64,
    alpha2: f64,
) -> Result<TokenScores> {
    Ok(scores_from_ratios(
        &relative_ratios(oracle, context, targets)?,
        alpha1,
        alpha2,
    ))
}

/// Fraction of targets whose score keeps a strict sign agreement between two
/// score vectors. A zero in either vector counts as disagreement.
pub fn consistency_rate(a: &TokenScores, b: &TokenScores) -> f64 {
    debug_assert_eq!(a.scores.len(), b.scores.len());
    let m = a.scores.len();
    let agree = a
        .scores
        .iter()
        .zip(&b.scores)
        .filter(|(&x, &y)| x * y > 0)
        .count();
    agree as f64 / m as f64
}

/// Estimate the prefix n-gram length by scanning context suffixes from
/// `h_max` down and returning the largest length at which the token scores
/// stop agreeing with the next-shorter context.
///
/// A true length above `h_max` is undetectable: every suffix then hashes to
/// an unrelated partition and the scan reports `h_max`. `repeats > 1` reruns
/// the scan on fresh contexts and majority-votes (ties toward the smaller
/// estimate) for noisy regimes.
pub fn identify_prefix_len(
    oracle: &dyn ProbeOracle,
    h_max: usize,
    hyper: &StealHyper,
    repeats: usize,
    rng: &mut impl Rng,
) -> Result<usize> {
    if h_max < 1 {
        return Err(Error::invalid("h_max", "must be >= 1"));
    }
    hyper.validate()?;
    let repeats = repeats.max(1);
    let mut votes: HashMap<usize, usize> = HashMap::new();
    for _ in 0..repeats {
        let estimate = scan_prefix_len(oracle, h_max, hyper, rng)?;
        *votes.entry(estimate).or_insert(0) += 1;
    }
    Ok(votes
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(h, _)| h)
        .expect("at least one repeat"))
}

fn scan_prefix_len(
    oracle: &dyn ProbeOracle,
    h_max: usize,
    hyper: &StealHyper,
    rng: &mut impl Rng,
) -> Result<usize> {
    let vocab = oracle.vocab();
    let context = vocab.sample_context(h_max, rng);
    let targets = vocab.sample_targets(hyper.m, rng)?;
    // scores_by_len[h - 1] holds the scores for the length-h suffix.
    let mut scores_by_len: Vec<Option<TokenScores>> = vec![None; h_max];
    for h in (1..=h_max).rev() {
        let suffix = &context[context.len() - h..];
        scores_by_len[h - 1] = Some(token_scores(
            oracle,
            suffix,
            &targets,
            hyper.alpha1,
            hyper.alpha2,
        )?);
    }
    for h in (2..=h_max).rev() {
        let cr = consistency_rate(
            scores_by_len[h - 1].as_ref().unwrap(),
            scores_by_len[h - 2].as_ref().unwrap(),
        );
        if cr < hyper.beta {
            return Ok(h);
        }
    }
    Ok(1)
}

/// Ratios whose endpoints sit on opposite extremes of the score range:
/// `r(i, j)` for every `(i, j)` with `s_i > gamma * m` and `s_j < -gamma * m`.
pub fn collect_strength_samples(
    ratios: &RatioMatrix,
    scores: &TokenScores,
    gamma: f64,
) -> Vec<f64> {
    let m = ratios.dim();
    let cutoff = gamma * m as f64;
    let mut out = Vec::new();
    for i in 0..m {
        if scores.scores[i] as f64 > cutoff {
            for j in 0..m {
                if (scores.scores[j] as f64) < -cutoff {
                    out.push(ratios.get(i, j));
                }
            }
        }
    }
    out
}

/// Estimate the strength as the mean cross-extreme log ratio over `c`
/// rounds of fresh contexts and targets. Scores and ratios in each round
/// reuse one probe batch.
pub fn identify_strength(
    oracle: &dyn ProbeOracle,
    prefix_len: usize,
    hyper: &StealHyper,
    rng: &mut impl Rng,
) -> Result<f64> {
    hyper.validate()?;
    let vocab = oracle.vocab();
    let mut collected = Vec::new();
    for _ in 0..hyper.c {
        let context = vocab.sample_context(prefix_len, rng);
        let targets = vocab.sample_targets(hyper.m, rng)?;
        let ratios = relative_ratios(oracle, &context, &targets)?;
        let scores = scores_from_ratios(&ratios, hyper.alpha1, hyper.alpha2);
        collected.extend(collect_strength_samples(&ratios, &scores, hyper.gamma));
    }
    if collected.is_empty() {
        return Err(Error::InsufficientSignal { rounds: hyper.c });
    }
    Ok(collected.iter().sum::<f64>() / collected.len() as f64)
}

/// Green membership from a ratio matrix and a strength estimate.
///
/// Each ratio is first squashed to `sgn(r) * min(|r|/d, d/|r|)`, which peaks
/// at |r| = d and damps both noise and outliers; zero ratios stay zero. Raw
/// row sums then weight a second pass so that rows with a clear verdict
/// dominate the final scores; strictly positive final scores are green.
pub fn green_set_from_ratios(ratios: &RatioMatrix, delta_hat: f64) -> Vec<bool> {
    let m = ratios.dim();
    let mut adjusted = vec![0.0f64; m * m];
    for i in 0..m {
        for j in 0..m {
            let r = ratios.get(i, j);
            if r != 0.0 {
                adjusted[i * m + j] = r.signum() * (r.abs() / delta_hat).min(delta_hat / r.abs());
            }
        }
    }
    let raw: Vec<f64> = (0..m)
        .map(|j| (0..m).map(|k| adjusted[j * m + k]).sum())
        .collect();
    (0..m)
        .map(|i| {
            let final_score: f64 = (0..m).map(|j| raw[j].abs() * adjusted[i * m + j]).sum();
            final_score > 0.0
        })
        .collect()
}

/// Probe-backed green-list recovery for `targets` after `context`.
pub fn identify_green_list(
    oracle: &dyn ProbeOracle,
    context: &[TokenId],
    targets: &[TokenId],
    delta_hat: f64,
) -> Result<Vec<TokenId>> {
    if delta_hat <= 0.0 || delta_hat.is_nan() {
        return Err(Error::invalid(
            "delta_hat",
            format!("{delta_hat} must be positive"),
        ));
    }
    let ratios = relative_ratios(oracle, context, targets)?;
    let greens = green_set_from_ratios(&ratios, delta_hat);
    Ok(targets
        .iter()
        .zip(greens)
        .filter(|(_, g)| *g)
        .map(|(&t, _)| t)
        .collect())
}

/// Provides red/green colors for `(n-gram, token)` pairs. `None` means the
/// source cannot classify the token (callers decide the fallback).
pub trait ColorSource: Sync {
    fn color_of(&self, ngram: &[TokenId], token: TokenId) -> Result<Option<Color>>;

    fn classify_many(&self, ngram: &[TokenId], tokens: &[TokenId]) -> Result<Vec<Option<Color>>> {
        tokens.iter().map(|&t| self.color_of(ngram, t)).collect()
    }
}

/// Ground-truth colors straight from a watermark rule. Used wherever a
/// "perfectly stolen" rule is needed.
pub struct PartitionColors<'a>(pub &'a WatermarkSpec);

impl ColorSource for PartitionColors<'_> {
    fn color_of(&self, ngram: &[TokenId], token: TokenId) -> Result<Option<Color>> {
        let ctx = NGramContext::from_tail(ngram, self.0.prefix_len);
        Ok(Some(self.0.partition(&ctx, token)))
    }
}

/// Concurrent color memo keyed by `(n-gram, token)`, grouped by n-gram so
/// a decoding run over millions of positions stays compact.
#[derive(Debug, Default)]
pub struct ColorCache {
    map: RwLock<HashMap<Vec<TokenId>, HashMap<TokenId, Color>>>,
}

impl ColorCache {
    pub fn get(&self, ngram: &[TokenId], token: TokenId) -> Option<Color> {
        self.map
            .read()
            .expect("cache lock")
            .get(ngram)
            .and_then(|by_token| by_token.get(&token).copied())
    }

    /// Batched lookup under one lock acquisition.
    pub fn get_many(&self, ngram: &[TokenId], tokens: &[TokenId]) -> Vec<Option<Color>> {
        let guard = self.map.read().expect("cache lock");
        let by_token = guard.get(ngram);
        tokens
            .iter()
            .map(|t| by_token.and_then(|m| m.get(t).copied()))
            .collect()
    }

    pub fn insert(&self, ngram: &[TokenId], token: TokenId, color: Color) {
        self.map
            .write()
            .expect("cache lock")
            .entry(ngram.to_vec())
            .or_default()
            .insert(token, color);
    }

    pub fn insert_many(&self, ngram: &[TokenId], entries: &[(TokenId, Color)]) {
        let mut guard = self.map.write().expect("cache lock");
        let by_token = guard.entry(ngram.to_vec()).or_default();
        for &(t, c) in entries {
            by_token.insert(t, c);
        }
    }

    pub fn len(&self) -> usize {
        self.map
            .read()
            .expect("cache lock")
            .values()
            .map(HashMap::len)
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entries in canonical `(ngram, token)` order.
    pub fn sorted_entries(&self) -> Vec<(Vec<TokenId>, TokenId, Color)> {
        let mut out: Vec<_> = self
            .map
            .read()
            .expect("cache lock")
            .iter()
            .flat_map(|(n, by_token)| by_token.iter().map(|(t, &c)| (n.clone(), *t, c)))
            .collect();
        out.sort();
        out
    }
}

/// Everything the attacker has recovered: the prefix length, the strength,
/// hyperparameters, and the accumulated color memo.
#[derive(Debug)]
pub struct StolenParams {
    pub h_hat: usize,
    pub delta_hat: f64,
    pub hyper: StealHyper,
    pub cache: ColorCache,
}

#[derive(Serialize, Deserialize)]
struct ParamsWire {
    h_hat: usize,
    delta_hat: f64,
    hyper: StealHyper,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    ngram: Vec<TokenId>,
    token: TokenId,
    color: Color,
}

impl StolenParams {
    pub fn new(h_hat: usize, delta_hat: f64, hyper: StealHyper) -> Self {
        StolenParams {
            h_hat,
            delta_hat,
            hyper,
            cache: ColorCache::default(),
        }
    }

    /// Persist as a directory: `params.json` plus `cache.jsonl` with one
    /// line per classified `(n-gram, token)`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let params = ParamsWire {
            h_hat: self.h_hat,
            delta_hat: self.delta_hat,
            hyper: self.hyper,
        };
        std::fs::write(
            dir.join("params.json"),
            serde_json::to_string_pretty(&params)?,
        )?;
        let mut w = BufWriter::new(std::fs::File::create(dir.join("cache.jsonl"))?);
        for (ngram, token, color) in self.cache.sorted_entries() {
            serde_json::to_writer(
                &mut w,
                &CacheLine {
                    ngram,
                    token,
                    color,
                },
            )?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let params: ParamsWire =
            serde_json::from_str(&std::fs::read_to_string(dir.join("params.json"))?)?;
        params.hyper.validate()?;
        if params.h_hat < 1 {
            return Err(Error::invalid("h_hat", "must be >= 1"));
        }
        if params.delta_hat < 0.0 || params.delta_hat.is_nan() {
            return Err(Error::invalid(
                "delta_hat",
                format!("{} < 0", params.delta_hat),
            ));
        }
        let out = StolenParams::new(params.h_hat, params.delta_hat, params.hyper);
        let cache_path = dir.join("cache.jsonl");
        if cache_path.exists() {
            let file = std::fs::File::open(cache_path)?;
            for line in std::io::BufReader::new(file).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheLine = serde_json::from_str(&line)?;
                out.cache.insert(&entry.ngram, entry.token, entry.color);
            }
        }
        Ok(out)
    }
}

/// Memoizing per-token classifier backed by probe queries.
///
/// The probing pool is split, per n-gram, into pseudo-random blocks of
/// roughly `m` tokens (a seeded shuffle of the pool, chunked). A cache miss
/// classifies the whole block containing the token and stores every member,
/// so the result for any `(n-gram, token)` pair is a pure function of the
/// session seed, independent of call order, which keeps parallel runs
/// reproducible. Concurrent misses on one n-gram serialize through a
/// per-n-gram lock, so each block is probed exactly once and the query
/// counter stays deterministic too. Special tokens sit outside the pool
/// and are unclassifiable.
pub struct StolenClassifier<'a> {
    params: &'a StolenParams,
    oracle: &'a dyn ProbeOracle,
    session_seed: u64,
    inflight: std::sync::Mutex<HashMap<Vec<TokenId>, std::sync::Arc<std::sync::Mutex<()>>>>,
}

impl<'a> StolenClassifier<'a> {
    pub fn new(params: &'a StolenParams, oracle: &'a dyn ProbeOracle, session_seed: u64) -> Self {
        StolenClassifier {
            params,
            oracle,
            session_seed,
            inflight: std::sync::Mutex::new(HashMap::new()),
        }
    }

    /// The serialization point for classification work on one n-gram. The
    /// entry persists for the classifier's lifetime so every thread always
    /// contends on the same lock.
    fn ngram_lock(&self, ngram: &[TokenId]) -> std::sync::Arc<std::sync::Mutex<()>> {
        self.inflight
            .lock()
            .expect("inflight lock")
            .entry(ngram.to_vec())
            .or_default()
            .clone()
    }

    pub fn params(&self) -> &StolenParams {
        self.params
    }

    fn ngram_of(&self, ctx: &[TokenId]) -> Vec<TokenId> {
        NGramContext::from_tail(ctx, self.params.h_hat)
            .tokens()
            .to_vec()
    }

    /// The pool chunked into balanced pseudo-random blocks for `ngram`.
    fn blocks_for(&self, ngram: &[TokenId]) -> Vec<Vec<TokenId>> {
        let mut shuffled: Vec<TokenId> = self.oracle.vocab().pool().to_vec();
        let seed = KeyedHash::new("classify-blocks")
            .u64(self.session_seed)
            .tokens(ngram)
            .finish();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        shuffled.shuffle(&mut rng);
        let m = self.params.hyper.m.max(2);
        let n_blocks = shuffled.len().div_ceil(m);
        let base = shuffled.len() / n_blocks;
        let extra = shuffled.len() % n_blocks;
        let mut blocks = Vec::with_capacity(n_blocks);
        let mut start = 0;
        for b in 0..n_blocks {
            let len = base + usize::from(b < extra);
            blocks.push(shuffled[start..start + len].to_vec());
            start += len;
        }
        blocks
    }

    fn classify_block(&self, ngram: &[TokenId], block: &[TokenId]) -> Result<()> {
        let greens = identify_green_list(self.oracle, ngram, block, self.params.delta_hat)?;
        let green_set: std::collections::HashSet<TokenId> = greens.into_iter().collect();
        let entries: Vec<(TokenId, Color)> = block
            .iter()
            .map(|&t| {
                let color = if green_set.contains(&t) {
                    Color::Green
                } else {
                    Color::Red
                };
                (t, color)
            })
            .collect();
        self.params.cache.insert_many(ngram, &entries);
        Ok(())
    }

    /// Color of `token` after `ctx`. A cache hit answers with zero queries;
    /// a miss probes the token's block and memoizes everything it classified.
    pub fn classify_token(&self, ctx: &[TokenId], token: TokenId) -> Result<Color> {
        let ngram = self.ngram_of(ctx);
        if let Some(c) = self.params.cache.get(&ngram, token) {
            return Ok(c);
        }
        let block = self
            .blocks_for(&ngram)
            .into_iter()
            .find(|b| b.contains(&token))
            .ok_or(Error::Unclassified { token })?;
        let gate = self.ngram_lock(&ngram);
        let _held = gate.lock().expect("ngram lock");
        // A racing thread may have filled the block while we waited.
        if let Some(c) = self.params.cache.get(&ngram, token) {
            return Ok(c);
        }
        self.classify_block(&ngram, &block)?;
        self.params
            .cache
            .get(&ngram, token)
            .ok_or(Error::Unclassified { token })
    }
}

impl ColorSource for StolenClassifier<'_> {
    fn color_of(&self, ngram: &[TokenId], token: TokenId) -> Result<Option<Color>> {
        match self.classify_token(ngram, token) {
            Ok(c) => Ok(Some(c)),
            Err(Error::Unclassified { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn classify_many(&self, ngram: &[TokenId], tokens: &[TokenId]) -> Result<Vec<Option<Color>>> {
        let key = self.ngram_of(ngram);
        let cached = self.params.cache.get_many(&key, tokens);
        if !cached.iter().any(Option::is_none) {
            return Ok(cached);
        }
        let gate = self.ngram_lock(&key);
        let _held = gate.lock().expect("ngram lock");
        let cached = self.params.cache.get_many(&key, tokens);
        let unknown: Vec<TokenId> = tokens
            .iter()
            .zip(&cached)
            .filter(|(_, c)| c.is_none())
            .map(|(&t, _)| t)
            .collect();
        if unknown.is_empty() {
            return Ok(cached);
        }
        let blocks = self.blocks_for(&key);
        let mut needed: Vec<usize> = unknown
            .iter()
            .filter_map(|t| blocks.iter().position(|b| b.contains(t)))
            .collect();
        needed.sort_unstable();
        needed.dedup();
        for b in needed {
            self.classify_block(&key, &blocks[b])?;
        }
        Ok(self.params.cache.get_many(&key, tokens))
    }
}
