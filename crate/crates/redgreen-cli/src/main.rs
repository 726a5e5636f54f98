//! Command-line driver: steal a watermark rule, remove or exploit it,
//! detect watermarks in token streams, and run the benchmark pipelines.

use std::io::{BufRead, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use redgreen::bench::{run_removal_bench, run_steal_eval, ExperimentConfig};
use redgreen::hashing::seeded_rng;
use redgreen::oracle::{
    EndpointConfig, OracleMode, ProbeOracle, RemoteOracle, SyntheticLm, SyntheticLmConfig,
};
use redgreen::removal::{remove_generate, RemovalConfig};
use redgreen::steal::{identify_prefix_len, identify_strength, StolenClassifier, StolenParams};
use redgreen::types::{TokenId, WatermarkSpec};
use redgreen::watermark::detect;

#[derive(Parser)]
#[command(
    name = "redgreen",
    about = "n-gram red-green watermarking and the query-based attack stack against it",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OracleKind {
    Synthetic,
    Remote,
}

#[derive(Args)]
struct OracleArgs {
    /// Experiment config JSON (vocabulary, hidden rule, estimation settings).
    #[arg(long)]
    config: PathBuf,
    /// Which model to probe.
    #[arg(long, value_enum, default_value = "synthetic")]
    oracle: OracleKind,
    /// Remote endpoint config JSON; required with --oracle remote.
    #[arg(long)]
    endpoint: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Recover the prefix length and strength from probe queries.
    Steal {
        #[command(flatten)]
        oracle: OracleArgs,
        /// Scan bound for the prefix length.
        #[arg(long)]
        h_max: Option<usize>,
        /// Repeat the prefix scan and majority-vote (for noisy oracles).
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long)]
        alpha1: Option<f64>,
        #[arg(long)]
        alpha2: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        /// Target-set size per probe batch.
        #[arg(long)]
        m: Option<usize>,
        /// Strength-estimation repeat count.
        #[arg(long)]
        c: Option<usize>,
        /// Output directory for params.json + cache.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score token sequences against a watermark rule.
    Detect {
        /// Watermark spec JSON (only the public fields are used).
        #[arg(long)]
        spec: PathBuf,
        /// JSONL input of {"tokens":[...]} lines; "-" reads stdin.
        #[arg(long)]
        input: String,
        /// Output path; defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate from the watermarked oracle with the boost inverted.
    Remove {
        #[command(flatten)]
        oracle: OracleArgs,
        /// Directory produced by `steal`.
        #[arg(long)]
        stolen_dir: PathBuf,
        /// Removal strength multiplier.
        #[arg(long, default_value_t = 1.0)]
        eta: f64,
        /// Candidate window width; defaults to the full vocabulary.
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long, default_value_t = 300)]
        n_tokens: usize,
        #[arg(long, default_value_t = 10)]
        n_prompts: usize,
        /// Output JSONL of {prompt_id, tokens, z, p}.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate watermarked text from a second model wearing the stolen rule.
    Exploit {
        #[command(flatten)]
        oracle: OracleArgs,
        #[arg(long)]
        stolen_dir: PathBuf,
        #[arg(long, default_value_t = 300)]
        n_tokens: usize,
        #[arg(long, default_value_t = 10)]
        n_prompts: usize,
        /// Output JSONL of {prompt_id, tokens, z, p}.
        #[arg(long)]
        out: PathBuf,
    },
    /// Steal, then benchmark detection before and after removal.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Master seed; the report is a pure function of (config, seed).
        #[arg(long)]
        seed: u64,
        /// Optional JSONL report destination (table always goes to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score the estimation stack against the hidden synthetic rule.
    StealEval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Green-recovery batches (m tokens each).
        #[arg(long, default_value_t = 10)]
        rounds: usize,
    },
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg: ExperimentConfig =
        serde_json::from_str(&text).context("parsing experiment config")?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().context("validating experiment config")?;
    Ok(cfg)
}

fn build_oracle(args: &OracleArgs, cfg: &ExperimentConfig) -> Result<Box<dyn ProbeOracle>> {
    match args.oracle {
        OracleKind::Synthetic => Ok(Box::new(cfg.build_oracle()?)),
        OracleKind::Remote => {
            let path = args
                .endpoint
                .as_ref()
                .context("--oracle remote requires --endpoint")?;
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading endpoint config {}", path.display()))?;
            let endpoint: EndpointConfig =
                serde_json::from_str(&text).context("parsing endpoint config")?;
            Ok(Box::new(RemoteOracle::new(endpoint, cfg.vocab()?)?))
        }
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Steal {
            oracle: oracle_args,
            h_max,
            repeats,
            alpha1,
            alpha2,
            beta,
            gamma,
            m,
            c,
            out,
        } => {
            let mut cfg = load_config(&oracle_args.config, oracle_args.seed)?;
            if let Some(v) = h_max {
                cfg.steal.h_max = v;
            }
            let h = &mut cfg.steal.hyper;
            if let Some(v) = alpha1 {
                h.alpha1 = v;
            }
            if let Some(v) = alpha2 {
                h.alpha2 = v;
            }
            if let Some(v) = beta {
                h.beta = v;
            }
            if let Some(v) = gamma {
                h.gamma = v;
            }
            if let Some(v) = m {
                h.m = v;
            }
            if let Some(v) = c {
                h.c = v;
            }
            cfg.validate().context("validating experiment config")?;
            let oracle = build_oracle(&oracle_args, &cfg)?;
            let mut rng = seeded_rng(cfg.seed, "steal");
            let h_hat = identify_prefix_len(
                oracle.as_ref(),
                cfg.steal.h_max,
                &cfg.steal.hyper,
                repeats,
                &mut rng,
            )?;
            let delta_hat = identify_strength(oracle.as_ref(), h_hat, &cfg.steal.hyper, &mut rng)?;
            let params = StolenParams::new(h_hat, delta_hat, cfg.steal.hyper);
            params.save_dir(&out)?;
            println!(
                "h_hat = {h_hat}, delta_hat = {delta_hat:.6}, written to {}",
                out.display()
            );
            eprintln!("oracle queries: {}", oracle.query_count());
            Ok(())
        }

        Command::Detect { spec, input, out } => {
            let spec: WatermarkSpec = serde_json::from_str(
                &std::fs::read_to_string(&spec)
                    .with_context(|| format!("reading spec {}", spec.display()))?,
            )
            .context("parsing watermark spec")?;
            let key = spec.detection_key();

            #[derive(Deserialize)]
            struct TokensLine {
                tokens: Vec<TokenId>,
            }

            let reader: Box<dyn BufRead> = if input == "-" {
                Box::new(std::io::stdin().lock())
            } else {
                Box::new(std::io::BufReader::new(
                    std::fs::File::open(&input)
                        .with_context(|| format!("reading input {input}"))?,
                ))
            };
            let mut writer: Box<dyn Write> = match &out {
                Some(path) => Box::new(std::io::BufWriter::new(std::fs::File::create(path)?)),
                None => Box::new(std::io::stdout().lock()),
            };
            for (lineno, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let parsed: TokensLine = serde_json::from_str(&line)
                    .with_context(|| format!("parsing input line {}", lineno + 1))?;
                let report = detect(&parsed.tokens, &key)
                    .with_context(|| format!("scoring input line {}", lineno + 1))?;
                serde_json::to_writer(&mut writer, &report)?;
                writeln!(writer)?;
            }
            writer.flush()?;
            Ok(())
        }

        Command::Remove {
            oracle: oracle_args,
            stolen_dir,
            eta,
            top_k,
            n_tokens,
            n_prompts,
            out,
        } => {
            let cfg = load_config(&oracle_args.config, oracle_args.seed)?;
            let oracle = build_oracle(&oracle_args, &cfg)?;
            let params = StolenParams::load_dir(&stolen_dir)
                .with_context(|| format!("loading stolen params from {}", stolen_dir.display()))?;
            let removal = RemovalConfig {
                eta,
                top_k: top_k.unwrap_or(cfg.vocab_size as usize),
            };
            removal.validate()?;
            let classifier = StolenClassifier::new(&params, oracle.as_ref(), cfg.seed);
            let key = cfg.spec.detection_key();
            let vocab = cfg.vocab()?;
            let mut writer = std::io::BufWriter::new(std::fs::File::create(&out)?);
            for i in 0..n_prompts {
                let mut prompt_rng = seeded_rng(cfg.seed, &format!("prompt-{i}"));
                let prompt = vocab.sample_context(cfg.prompt_len, &mut prompt_rng);
                let mut rng = seeded_rng(cfg.seed, &format!("rm-gen-{i}"));
                let tokens = remove_generate(
                    oracle.as_ref(),
                    &removal,
                    params.h_hat,
                    params.delta_hat,
                    &classifier,
                    &prompt,
                    n_tokens,
                    &mut rng,
                )?;
                let report = detect(&tokens, &key)?;
                writeln!(
                    writer,
                    "{}",
                    serde_json::json!({
                        "prompt_id": i,
                        "tokens": tokens,
                        "z": report.z_score,
                        "p": report.p_value,
                    })
                )?;
            }
            writer.flush()?;
            eprintln!("oracle queries: {}", oracle.query_count());
            Ok(())
        }

        Command::Exploit {
            oracle: oracle_args,
            stolen_dir,
            n_tokens,
            n_prompts,
            out,
        } => {
            let cfg = load_config(&oracle_args.config, oracle_args.seed)?;
            let victim = build_oracle(&oracle_args, &cfg)?;
            let params = StolenParams::load_dir(&stolen_dir)
                .with_context(|| format!("loading stolen params from {}", stolen_dir.display()))?;
            let classifier = StolenClassifier::new(&params, victim.as_ref(), cfg.seed);
            // The attacker model: unrelated stream, no watermark of its own.
            let attacker = SyntheticLm::new(SyntheticLmConfig {
                vocab: cfg.vocab()?,
                spec: WatermarkSpec::new(b"attacker-model".to_vec(), 1, 0.0, 0.5)?,
                noise_max: 0.0,
                base_seed: redgreen::hashing::KeyedHash::new("attacker-base")
                    .u64(cfg.seed)
                    .finish(),
                mode: OracleMode::Exact,
                suppress_special: true,
            })?;
            let key = cfg.spec.detection_key();
            let vocab = cfg.vocab()?;
            let mut writer = std::io::BufWriter::new(std::fs::File::create(&out)?);
            for i in 0..n_prompts {
                let mut prompt_rng = seeded_rng(cfg.seed, &format!("prompt-{i}"));
                let prompt = vocab.sample_context(cfg.prompt_len, &mut prompt_rng);
                let mut rng = seeded_rng(cfg.seed, &format!("forge-{i}"));
                let tokens = redgreen::exploit::exploit_generate(
                    &attacker,
                    params.h_hat,
                    params.delta_hat,
                    &classifier,
                    &prompt,
                    n_tokens,
                    &mut rng,
                )?;
                let report = detect(&tokens, &key)?;
                writeln!(
                    writer,
                    "{}",
                    serde_json::json!({
                        "prompt_id": i,
                        "tokens": tokens,
                        "z": report.z_score,
                        "p": report.p_value,
                    })
                )?;
            }
            writer.flush()?;
            eprintln!("oracle queries: {}", victim.query_count());
            Ok(())
        }

        Command::Bench { config, seed, out } => {
            let cfg = load_config(&config, Some(seed))?;
            let report = run_removal_bench(&cfg)?;
            print!("{}", report.render_table(&cfg.fpr_grid));
            let total: u64 = report.rows.iter().map(|r| r.query_count).sum();
            eprintln!("oracle queries: {total}");
            if let Some(path) = out {
                std::fs::write(&path, report.to_jsonl())?;
            }
            Ok(())
        }

        Command::StealEval {
            config,
            seed,
            rounds,
        } => {
            if rounds < 1 {
                bail!("--rounds must be >= 1");
            }
            let cfg = load_config(&config, seed)?;
            let report = run_steal_eval(&cfg, rounds)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}
