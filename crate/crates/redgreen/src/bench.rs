//! Reproducible experiment driver: steal, then remove or exploit, then
//! detect, with TPR@FPR and median p-value reporting.
//!
//! Every report is a pure function of `(config, seed)`: prompts, generation
//! streams and probe randomness are all derived from the seed, per-prompt
//! work runs on independent derived streams, and classification answers are
//! canonical per n-gram, so parallel execution order cannot leak into the
//! output.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exploit::exploit_generate;
use crate::hashing::seeded_rng;
use crate::oracle::{OracleMode, ProbeOracle, SyntheticLm, SyntheticLmConfig};
use crate::removal::{remove_generate, RemovalConfig};
use crate::stats::lower_median;
use crate::steal::{
    identify_green_list, identify_prefix_len, identify_strength, PartitionColors, StealHyper,
    StolenClassifier, StolenParams,
};
use crate::types::{Color, NGramContext, TokenId, Vocabulary, WatermarkSpec};
use crate::watermark::{detect, generate, tpr_at_fpr, DetectionReport, GenerateOptions};

fn default_vocab_size() -> u32 {
    64
}
fn default_special() -> Vec<TokenId> {
    vec![0]
}
fn default_noise() -> f64 {
    0.0
}
fn default_mode() -> OracleMode {
    OracleMode::Exact
}
fn default_h_max() -> usize {
    8
}
fn default_n_prompts() -> usize {
    100
}
fn default_prompt_len() -> usize {
    10
}
fn default_tokens() -> usize {
    300
}
fn default_fpr_grid() -> Vec<f64> {
    vec![1e-3, 1e-4, 1e-5]
}

/// Steal-stage settings: the scan bound plus estimator hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StealConfig {
    #[serde(default = "default_h_max")]
    pub h_max: usize,
    #[serde(flatten)]
    pub hyper: StealHyper,
}

impl Default for StealConfig {
    fn default() -> Self {
        StealConfig {
            h_max: default_h_max(),
            hyper: StealHyper::default(),
        }
    }
}

/// Full experiment description. Serializable so a run is reproducible from
/// a config file plus a seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_vocab_size")]
    pub vocab_size: u32,
    #[serde(default = "default_special")]
    pub special_tokens: Vec<TokenId>,
    /// Hidden truth driving the synthetic oracle.
    pub spec: WatermarkSpec,
    #[serde(default = "default_noise")]
    pub noise_max: f64,
    #[serde(default = "default_mode")]
    pub oracle_mode: OracleMode,
    #[serde(default)]
    pub steal: StealConfig,
    /// Removal settings; `top_k` defaults to the full vocabulary so the
    /// window bias is opt-in and measurable.
    pub removal: Option<RemovalConfig>,
    #[serde(default = "default_n_prompts")]
    pub n_prompts: usize,
    #[serde(default = "default_prompt_len")]
    pub prompt_len: usize,
    #[serde(default = "default_tokens")]
    pub tokens_per_generation: usize,
    #[serde(default = "default_fpr_grid")]
    pub fpr_grid: Vec<f64>,
    /// Worker cap for per-prompt parallelism; `None` uses the default pool.
    #[serde(default)]
    pub workers: Option<usize>,
}

impl ExperimentConfig {
    /// A small default experiment around `spec`.
    pub fn new(spec: WatermarkSpec) -> Self {
        ExperimentConfig {
            seed: 0,
            vocab_size: default_vocab_size(),
            special_tokens: default_special(),
            spec,
            noise_max: default_noise(),
            oracle_mode: default_mode(),
            steal: StealConfig::default(),
            removal: None,
            n_prompts: default_n_prompts(),
            prompt_len: default_prompt_len(),
            tokens_per_generation: default_tokens(),
            fpr_grid: default_fpr_grid(),
            workers: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.steal.hyper.validate()?;
        if self.steal.h_max < 1 {
            return Err(Error::invalid("h_max", "must be >= 1"));
        }
        if let Some(r) = &self.removal {
            r.validate()?;
        }
        if self.n_prompts < 1 {
            return Err(Error::invalid("n_prompts", "must be >= 1"));
        }
        if self.tokens_per_generation <= self.spec.prefix_len {
            return Err(Error::invalid(
                "tokens_per_generation",
                format!(
                    "{} tokens cannot be scored with prefix_len {}",
                    self.tokens_per_generation, self.spec.prefix_len
                ),
            ));
        }
        for &f in &self.fpr_grid {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::invalid("fpr_grid", format!("{f} outside (0, 1)")));
            }
        }
        // Vocabulary construction enforces its own invariants.
        self.vocab()?;
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.vocab_size, self.special_tokens.iter().copied())
    }

    /// The synthetic oracle this experiment probes.
    pub fn build_oracle(&self) -> Result<SyntheticLm> {
        SyntheticLm::new(SyntheticLmConfig {
            vocab: self.vocab()?,
            spec: self.spec.clone(),
            noise_max: self.noise_max,
            base_seed: crate::hashing::KeyedHash::new("oracle-base")
                .u64(self.seed)
                .finish(),
            mode: self.oracle_mode,
            suppress_special: true,
        })
    }

    pub fn removal(&self) -> RemovalConfig {
        self.removal.unwrap_or(RemovalConfig {
            eta: 1.0,
            top_k: self.vocab_size as usize,
        })
    }

    fn prompt(&self, index: usize, vocab: &Vocabulary) -> Vec<TokenId> {
        let mut rng = seeded_rng(self.seed, &format!("prompt-{index}"));
        vocab.sample_context(self.prompt_len, &mut rng)
    }

    fn run_pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        match self.workers {
            Some(w) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(w.max(1))
                    .build()
                    .map_err(|e| Error::invalid("workers", e.to_string()))?;
                Ok(pool.install(f))
            }
            None => Ok(f()),
        }
    }
}

/// One benchmark condition: detection rates at each grid FPR, the median
/// p-value, and the oracle query budget the condition consumed. A stage
/// that could not run as configured annotates its row instead of sinking
/// the whole report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BenchRow {
    pub condition: String,
    pub tpr_at_fpr: BTreeMap<String, f64>,
    pub median_p: f64,
    pub n_runs: usize,
    pub query_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    /// Rows as a fixed-width table.
    pub fn render_table(&self, fpr_grid: &[f64]) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<14}", "condition"));
        for f in fpr_grid {
            out.push_str(&format!("{:>12}", format!("tpr@{}", format_fpr(*f))));
        }
        out.push_str(&format!(
            "{:>12}{:>8}{:>14}\n",
            "median_p", "runs", "queries"
        ));
        for row in &self.rows {
            out.push_str(&format!("{:<14}", row.condition));
            for f in fpr_grid {
                let v = row
                    .tpr_at_fpr
                    .get(&format_fpr(*f))
                    .copied()
                    .unwrap_or(f64::NAN);
                out.push_str(&format!("{:>12.3}", v));
            }
            out.push_str(&format!(
                "{:>12.3e}{:>8}{:>14}",
                row.median_p, row.n_runs, row.query_count
            ));
            if let Some(err) = &row.error {
                out.push_str(&format!("  [{err}]"));
            }
            out.push('\n');
        }
        out
    }

    /// One JSON object per row, in canonical row order.
    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("row serializes"))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }
}

fn format_fpr(f: f64) -> String {
    format!("{f:e}")
}

fn tpr_map(z_scores: &[f64], grid: &[f64]) -> Result<BTreeMap<String, f64>> {
    let mut map = BTreeMap::new();
    for &f in grid {
        map.insert(format_fpr(f), tpr_at_fpr(z_scores, f)?);
    }
    Ok(map)
}

/// Steal the rule, then benchmark detection before and after removal.
///
/// Rows come back in canonical (alphabetical) condition order:
/// `removed` carries the whole attack budget (steal stage plus per-step
/// probing), `watermarked` the victim's own generation cost.
pub fn run_removal_bench(cfg: &ExperimentConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let oracle = cfg.build_oracle()?;
    let removal = cfg.removal();
    let q_start = oracle.query_count();

    // Attack stage. A victim with no measurable boost leaves strength
    // estimation without signal; the removal row then runs as a plain
    // renormalized pass (delta_hat = 0) and says so in its annotation.
    let mut steal_rng = seeded_rng(cfg.seed, "steal");
    let h_hat = identify_prefix_len(
        &oracle,
        cfg.steal.h_max,
        &cfg.steal.hyper,
        1,
        &mut steal_rng,
    )?;
    let (delta_hat, steal_note) =
        match identify_strength(&oracle, h_hat, &cfg.steal.hyper, &mut steal_rng) {
            Ok(d) => (d, None),
            Err(e @ Error::InsufficientSignal { .. }) => {
                (0.0, Some(format!("{e}; removal ran with delta_hat = 0")))
            }
            Err(e) => return Err(e),
        };
    let params = StolenParams::new(h_hat, delta_hat, cfg.steal.hyper);
    let classifier = StolenClassifier::new(&params, &oracle, cfg.seed);
    let q_stolen = oracle.query_count();

    let vocab = cfg.vocab()?;
    let detection_key = cfg.spec.detection_key();

    // Victim generations.
    let watermarked: Result<Vec<DetectionReport>> = cfg.run_pool(|| {
        (0..cfg.n_prompts)
            .into_par_iter()
            .map(|i| {
                let prompt = cfg.prompt(i, &vocab);
                let mut rng = seeded_rng(cfg.seed, &format!("wm-gen-{i}"));
                let tokens = generate(
                    &oracle,
                    &cfg.spec,
                    &prompt,
                    cfg.tokens_per_generation,
                    GenerateOptions::default(),
                    &mut rng,
                )?;
                detect(&tokens, &detection_key)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let q_watermarked = oracle.query_count();

    // Removal runs against the same prompts on fresh streams.
    let removed: Result<Vec<DetectionReport>> = cfg.run_pool(|| {
        (0..cfg.n_prompts)
            .into_par_iter()
            .map(|i| {
                let prompt = cfg.prompt(i, &vocab);
                let mut rng = seeded_rng(cfg.seed, &format!("rm-gen-{i}"));
                let tokens = remove_generate(
                    &oracle,
                    &removal,
                    h_hat,
                    delta_hat,
                    &classifier,
                    &prompt,
                    cfg.tokens_per_generation,
                    &mut rng,
                )?;
                detect(&tokens, &detection_key)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let q_removed = oracle.query_count();

    let row = |condition: &str,
               outcome: &Result<Vec<DetectionReport>>,
               queries: u64,
               note: Option<String>|
     -> Result<BenchRow> {
        match outcome {
            Ok(reports) => {
                let zs: Vec<f64> = reports.iter().map(|r| r.z_score).collect();
                let ps: Vec<f64> = reports.iter().map(|r| r.p_value).collect();
                Ok(BenchRow {
                    condition: condition.to_string(),
                    tpr_at_fpr: tpr_map(&zs, &cfg.fpr_grid)?,
                    median_p: lower_median(&ps).expect("nonempty runs"),
                    n_runs: reports.len(),
                    query_count: queries,
                    error: note,
                })
            }
            Err(e) => Ok(BenchRow {
                condition: condition.to_string(),
                tpr_at_fpr: BTreeMap::new(),
                median_p: 0.0,
                n_runs: 0,
                query_count: queries,
                error: Some(e.to_string()),
            }),
        }
    };

    let mut rows = vec![
        row(
            "removed",
            &removed,
            (q_stolen - q_start) + (q_removed - q_watermarked),
            steal_note,
        )?,
        row("watermarked", &watermarked, q_watermarked - q_stolen, None)?,
    ];
    rows.sort_by(|a, b| a.condition.cmp(&b.condition));
    Ok(BenchReport { rows })
}

/// Forge watermarked text through a second model wearing a stolen rule
/// (prefix length `h_hat`, classification probed from the victim), and
/// benchmark it under the true detector. One row per strength estimate.
pub fn run_exploit_bench(
    cfg: &ExperimentConfig,
    h_hat: usize,
    delta_hats: &[f64],
) -> Result<BenchReport> {
    cfg.validate()?;
    let victim = cfg.build_oracle()?;
    let vocab = cfg.vocab()?;
    // The attacker model: same family, unrelated seed, no watermark.
    let attacker = SyntheticLm::new(SyntheticLmConfig {
        vocab: vocab.clone(),
        spec: WatermarkSpec::new(b"attacker-model".to_vec(), 1, 0.0, 0.5).unwrap(),
        noise_max: 0.0,
        base_seed: crate::hashing::KeyedHash::new("attacker-base")
            .u64(cfg.seed)
            .finish(),
        mode: OracleMode::Exact,
        suppress_special: true,
    })?;
    let detection_key = cfg.spec.detection_key();

    let mut rows = Vec::new();
    for (di, &delta_hat) in delta_hats.iter().enumerate() {
        let params = StolenParams::new(h_hat, delta_hat, cfg.steal.hyper);
        let classifier = StolenClassifier::new(&params, &victim, cfg.seed);
        let q_before = victim.query_count() + attacker.query_count();
        let reports: Vec<DetectionReport> = cfg.run_pool(|| {
            (0..cfg.n_prompts)
                .into_par_iter()
                .map(|i| {
                    let prompt = cfg.prompt(i, &vocab);
                    let mut rng = seeded_rng(cfg.seed, &format!("forge-{di}-{i}"));
                    let tokens = exploit_generate(
                        &attacker,
                        h_hat,
                        delta_hat,
                        &classifier,
                        &prompt,
                        cfg.tokens_per_generation,
                        &mut rng,
                    )?;
                    detect(&tokens, &detection_key)
                })
                .collect::<Result<Vec<_>>>()
        })??;
        let zs: Vec<f64> = reports.iter().map(|r| r.z_score).collect();
        let ps: Vec<f64> = reports.iter().map(|r| r.p_value).collect();
        rows.push(BenchRow {
            condition: format!("forged-delta-{delta_hat}"),
            tpr_at_fpr: tpr_map(&zs, &cfg.fpr_grid)?,
            median_p: lower_median(&ps).expect("nonempty runs"),
            n_runs: reports.len(),
            query_count: victim.query_count() + attacker.query_count() - q_before,
            error: None,
        });
    }
    rows.sort_by(|a, b| a.condition.cmp(&b.condition));
    Ok(BenchReport { rows })
}

/// Confusion counts and summary rates for green-list recovery.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GreenEval {
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub n_classified: usize,
}

/// Ground-truth comparison of the whole estimation stack on one config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StealEvalReport {
    pub h_true: usize,
    pub h_hat: usize,
    pub h_correct: bool,
    pub delta_true: f64,
    pub delta_hat: f64,
    pub delta_abs_err: f64,
    pub green: GreenEval,
    pub query_count: u64,
}

/// Run the full stack against the synthetic oracle and score it against the
/// hidden rule: prefix length, strength error, and green-list recovery over
/// `rounds` fresh target batches.
pub fn run_steal_eval(cfg: &ExperimentConfig, rounds: usize) -> Result<StealEvalReport> {
    cfg.validate()?;
    let oracle = cfg.build_oracle()?;
    let vocab = cfg.vocab()?;
    let mut rng = seeded_rng(cfg.seed, "steal-eval");

    let h_hat = identify_prefix_len(&oracle, cfg.steal.h_max, &cfg.steal.hyper, 1, &mut rng)?;
    let delta_hat = identify_strength(&oracle, h_hat, &cfg.steal.hyper, &mut rng)?;

    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..rounds {
        let context = vocab.sample_context(h_hat, &mut rng);
        let targets = vocab.sample_targets(cfg.steal.hyper.m, &mut rng)?;
        let greens = identify_green_list(&oracle, &context, &targets, delta_hat)?;
        let got: std::collections::HashSet<TokenId> = greens.into_iter().collect();
        let ngram = NGramContext::from_tail(&context, cfg.spec.prefix_len);
        for &t in &targets {
            let truth = cfg.spec.partition(&ngram, t) == Color::Green;
            match (got.contains(&t), truth) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
    }
    let n_classified = tp + fp + tn + fn_;
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(StealEvalReport {
        h_true: cfg.spec.prefix_len,
        h_hat,
        h_correct: h_hat == cfg.spec.prefix_len,
        delta_true: cfg.spec.delta,
        delta_hat,
        delta_abs_err: (delta_hat - cfg.spec.delta).abs(),
        green: GreenEval {
            true_positive: tp,
            false_positive: fp,
            true_negative: tn,
            false_negative: fn_,
            precision,
            recall,
            f1,
            accuracy: ratio(tp + tn, n_classified),
            n_classified,
        },
        query_count: oracle.query_count(),
    })
}

/// Helper shared by tests and the null-calibration criterion: detection
/// reports for `n_texts` unwatermarked generations.
pub fn null_detection_reports(
    cfg: &ExperimentConfig,
    n_texts: usize,
) -> Result<Vec<DetectionReport>> {
    cfg.validate()?;
    let oracle = cfg.build_oracle()?;
    let vocab = cfg.vocab()?;
    let null_spec = WatermarkSpec::new(
        cfg.spec.secret_key.clone(),
        cfg.spec.prefix_len,
        0.0,
        cfg.spec.green_fraction,
    )?;
    let detection_key = cfg.spec.detection_key();
    cfg.run_pool(|| {
        (0..n_texts)
            .into_par_iter()
            .map(|i| {
                let prompt = cfg.prompt(i, &vocab);
                let mut rng = seeded_rng(cfg.seed, &format!("null-gen-{i}"));
                let tokens = generate(
                    &oracle,
                    &null_spec,
                    &prompt,
                    cfg.tokens_per_generation,
                    GenerateOptions::default(),
                    &mut rng,
                )?;
                detect(&tokens, &detection_key)
            })
            .collect::<Result<Vec<_>>>()
    })?
}

/// Convenience used by removal tests: steal once, then report the median
/// post-removal p-value for each `eta`.
pub fn eta_sweep(cfg: &ExperimentConfig, etas: &[f64]) -> Result<Vec<(f64, f64)>> {
    cfg.validate()?;
    let oracle = cfg.build_oracle()?;
    let mut steal_rng = seeded_rng(cfg.seed, "steal");
    let h_hat = identify_prefix_len(
        &oracle,
        cfg.steal.h_max,
        &cfg.steal.hyper,
        1,
        &mut steal_rng,
    )?;
    let delta_hat = identify_strength(&oracle, h_hat, &cfg.steal.hyper, &mut steal_rng)?;
    let params = StolenParams::new(h_hat, delta_hat, cfg.steal.hyper);
    let classifier = StolenClassifier::new(&params, &oracle, cfg.seed);
    let vocab = cfg.vocab()?;
    let detection_key = cfg.spec.detection_key();
    let base = cfg.removal();

    let mut out = Vec::new();
    for &eta in etas {
        let removal = RemovalConfig { eta, ..base };
        let ps: Vec<f64> = cfg.run_pool(|| {
            (0..cfg.n_prompts)
                .into_par_iter()
                .map(|i| {
                    let prompt = cfg.prompt(i, &vocab);
                    let mut rng = seeded_rng(cfg.seed, &format!("rm-gen-{i}"));
                    let tokens = remove_generate(
                        &oracle,
                        &removal,
                        h_hat,
                        delta_hat,
                        &classifier,
                        &prompt,
                        cfg.tokens_per_generation,
                        &mut rng,
                    )?;
                    Ok(detect(&tokens, &detection_key)?.p_value)
                })
                .collect::<Result<Vec<_>>>()
        })??;
        out.push((eta, lower_median(&ps).expect("nonempty runs")));
    }
    Ok(out)
}

/// True-rule exploitation with explicit colors, used where "perfect stolen
/// parameters" are called for.
pub fn forge_with_true_rule(
    cfg: &ExperimentConfig,
    delta_hat: f64,
) -> Result<Vec<DetectionReport>> {
    cfg.validate()?;
    let vocab = cfg.vocab()?;
    let attacker = SyntheticLm::new(SyntheticLmConfig {
        vocab: vocab.clone(),
        spec: WatermarkSpec::new(b"attacker-model".to_vec(), 1, 0.0, 0.5).unwrap(),
        noise_max: 0.0,
        base_seed: crate::hashing::KeyedHash::new("attacker-base")
            .u64(cfg.seed)
            .finish(),
        mode: OracleMode::Exact,
        suppress_special: true,
    })?;
    let truth = PartitionColors(&cfg.spec);
    let detection_key = cfg.spec.detection_key();
    cfg.run_pool(|| {
        (0..cfg.n_prompts)
            .into_par_iter()
            .map(|i| {
                let prompt = cfg.prompt(i, &vocab);
                let mut rng = seeded_rng(cfg.seed, &format!("forge-true-{i}"));
                let tokens = exploit_generate(
                    &attacker,
                    cfg.spec.prefix_len,
                    delta_hat,
                    &truth,
                    &prompt,
                    cfg.tokens_per_generation,
                    &mut rng,
                )?;
                detect(&tokens, &detection_key)
            })
            .collect::<Result<Vec<_>>>()
    })?
}
