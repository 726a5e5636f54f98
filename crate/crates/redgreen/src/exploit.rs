//! Grafting a recovered watermark rule onto a different model, so its
//! output passes the original detector.

use rand::Rng;

use crate::error::{Error, Result};
use crate::steal::ColorSource;
use crate::types::{Color, NGramContext, TokenId};
use crate::watermark::NextTokenSource;

/// Sample `n_tokens` from `attacker`, boosting the tokens the color source
/// marks green by `e^{delta_hat}` at every step, keyed on the trailing
/// `prefix_len`-gram.
///
/// Tokens the source cannot classify are treated as red: they are never
/// boosted, which can only dilute the forged signal, never misfire it.
/// With `delta_hat = 0` the attacker's stream is reproduced untouched.
pub fn exploit_generate(
    attacker: &dyn NextTokenSource,
    prefix_len: usize,
    delta_hat: f64,
    colors: &dyn ColorSource,
    prompt: &[TokenId],
    n_tokens: usize,
    rng: &mut impl Rng,
) -> Result<Vec<TokenId>> {
    if n_tokens < 1 {
        return Err(Error::invalid("n_tokens", "must be >= 1"));
    }
    if delta_hat < 0.0 || delta_hat.is_nan() {
        return Err(Error::invalid("delta_hat", format!("{delta_hat} < 0")));
    }
    let vocab = attacker.vocab();
    let mut sequence = prompt.to_vec();
    let mut out = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let base = attacker
            .next_distribution(&sequence)?
            .without(|t| vocab.is_special(t))?;
        let next = if delta_hat == 0.0 {
            base
        } else {
            let ngram = NGramContext::from_tail(&sequence, prefix_len);
            let support: Vec<TokenId> = base.tokens().collect();
            let assigned = colors.classify_many(ngram.tokens(), &support)?;
            let green: std::collections::HashSet<TokenId> = support
                .iter()
                .zip(&assigned)
                .filter(|(_, c)| **c == Some(Color::Green))
                .map(|(&t, _)| t)
                .collect();
            crate::watermark::boost_green(&base, delta_hat, |t| green.contains(&t))?
        };
        let token = next.sample(rng);
        sequence.push(token);
        out.push(token);
    }
    Ok(out)
}
