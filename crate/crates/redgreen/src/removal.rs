//! Inverting the watermark during decoding, and the closed-form bound on
//! how far the inverted distribution can drift from the original.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::TokenDistribution;
use crate::error::{Error, Result};
use crate::steal::ColorSource;
use crate::types::{Color, NGramContext, TokenId};

use crate::oracle::ProbeOracle;

fn default_eta() -> f64 {
    1.0
}

/// Removal settings: the down-weighting exponent multiplier `eta` and the
/// candidate window width requested from the oracle.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RemovalConfig {
    #[serde(default = "default_eta")]
    pub eta: f64,
    pub top_k: usize,
}

impl RemovalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta < 0.0 || self.eta.is_nan() {
            return Err(Error::invalid("eta", format!("{} < 0", self.eta)));
        }
        if self.top_k < 1 {
            return Err(Error::invalid("top_k", "must be >= 1"));
        }
        Ok(())
    }
}

/// Scale estimated-green tokens by `e^{-eta * delta_hat}` and renormalize
/// over the candidate set. Accepts truncated slices: mass outside the
/// window is dropped (the gray-box setting grants nothing better).
///
/// With `eta = 1`, exact colors and an exact strength this inverts the
/// green boost token-for-token; ratios among same-color candidates are
/// preserved for any parameters.
pub fn unboost_green(
    p_w: &TokenDistribution,
    eta: f64,
    delta_hat: f64,
    is_green: impl Fn(TokenId) -> bool,
) -> Result<TokenDistribution> {
    let scale = (-eta * delta_hat).exp();
    TokenDistribution::from_weights(
        p_w.iter()
            .map(|(t, p)| (t, if is_green(t) { p * scale } else { p }))
            .collect(),
    )
}

/// One removal step: classify every candidate of `p_w` against the trailing
/// n-gram and invert the estimated boost. Any unclassifiable candidate
/// aborts the step: silently passing a possibly-boosted token through
/// would reintroduce the signal. A zero effective strength skips the
/// probes: the scaling is the identity and the window is only renormalized.
pub fn remove_step(
    p_w: &TokenDistribution,
    ngram: &[TokenId],
    eta: f64,
    delta_hat: f64,
    colors: &dyn ColorSource,
) -> Result<TokenDistribution> {
    if eta * delta_hat == 0.0 {
        return unboost_green(p_w, eta, delta_hat, |_| false);
    }
    let candidates: Vec<TokenId> = p_w.tokens().collect();
    let assigned = colors.classify_many(ngram, &candidates)?;
    let mut green = std::collections::HashSet::new();
    for (&t, c) in candidates.iter().zip(&assigned) {
        match c {
            Some(Color::Green) => {
                green.insert(t);
            }
            Some(Color::Red) => {}
            None => return Err(Error::Unclassified { token: t }),
        }
    }
    unboost_green(p_w, eta, delta_hat, |t| green.contains(&t))
}

/// Sample `n_tokens` from the watermarked oracle with the boost inverted at
/// every step: fetch the top-k window, classify the candidates, down-weight
/// the estimated greens, renormalize, sample. Deterministic given the rng.
#[allow(clippy::too_many_arguments)]
pub fn remove_generate(
    oracle: &dyn ProbeOracle,
    cfg: &RemovalConfig,
    prefix_len: usize,
    delta_hat: f64,
    colors: &dyn ColorSource,
    prompt: &[TokenId],
    n_tokens: usize,
    rng: &mut impl Rng,
) -> Result<Vec<TokenId>> {
    cfg.validate()?;
    if n_tokens < 1 {
        return Err(Error::invalid("n_tokens", "must be >= 1"));
    }
    let mut sequence = prompt.to_vec();
    let mut out = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let window = oracle.top_k(&sequence, cfg.top_k)?;
        let ngram = NGramContext::from_tail(&sequence, prefix_len);
        let restored = remove_step(&window, ngram.tokens(), cfg.eta, delta_hat, colors)?;
        let token = restored.sample(rng);
        sequence.push(token);
        out.push(token);
    }
    Ok(out)
}

/// Inputs to the drift bound: the base-probability mass on misclassified
/// tokens, the absolute strength error, and the true strength.
#[derive(Debug, Clone, Copy)]
pub struct TvBoundInputs {
    pub epsilon1: f64,
    pub epsilon2: f64,
    pub delta: f64,
}

/// Closed-form bound on the total variation distance (as the plain sum
/// `sum_t |P_R(t) - P(t)|`) between the inverted and original distributions
/// at `eta = 1`, given misclassified mass at most `epsilon1` and strength
/// error at most `epsilon2`.
pub fn tv_bound(inputs: &TvBoundInputs) -> Result<f64> {
    let TvBoundInputs {
        epsilon1: e1,
        epsilon2: e2,
        delta,
    } = *inputs;
    if !(0.0..1.0).contains(&e1) {
        return Err(Error::invalid(
            "epsilon1",
            format!("{e1} must lie in [0, 1); the bound diverges at 1"),
        ));
    }
    if e2 < 0.0 || e2.is_nan() {
        return Err(Error::invalid("epsilon2", format!("{e2} < 0")));
    }
    if delta < 0.0 || delta.is_nan() {
        return Err(Error::invalid("delta", format!("{delta} < 0")));
    }
    let shared_denom = (1.0 - e1) + e1 * (delta - e2).exp();
    let f1 = ((2.0 * e2).exp() / (1.0 - e1) - 1.0).max(1.0 - (-2.0 * e2).exp() / shared_denom);
    let f2 = ((delta + 2.0 * e2).exp() / (1.0 - e1) - 1.0)
        .max(1.0 - (-delta - 2.0 * e2).exp() / shared_denom);
    Ok(e1 * f2 + (1.0 - e1) * f1)
}

/// `sum_t |p(t) - q(t)|` over the union support.
pub fn tv_distance(p: &TokenDistribution, q: &TokenDistribution) -> f64 {
    let mut total = 0.0;
    let a: Vec<(TokenId, f64)> = p.iter().collect();
    let b: Vec<(TokenId, f64)> = q.iter().collect();
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        match (a.get(i), b.get(j)) {
            (Some(&(ta, pa)), Some(&(tb, pb))) => {
                if ta == tb {
                    total += (pa - pb).abs();
                    i += 1;
                    j += 1;
                } else if ta < tb {
                    total += pa;
                    i += 1;
                } else {
                    total += pb;
                    j += 1;
                }
            }
            (Some(&(_, pa)), None) => {
                total += pa;
                i += 1;
            }
            (None, Some(&(_, pb))) => {
                total += pb;
                j += 1;
            }
            (None, None) => unreachable!(),
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::steal::PartitionColors;
    use crate::types::WatermarkSpec;
    use crate::watermark::boost_green;

    fn pair(p0: f64) -> TokenDistribution {
        TokenDistribution::normalized(vec![(0, p0), (1, 1.0 - p0)]).unwrap()
    }

    #[test]
    fn inverts_the_reference_boost() {
        // (0.75, 0.25) with token 0 green, strength ln 3, eta 1 -> uniform.
        let restored = unboost_green(&pair(0.75), 1.0, 3f64.ln(), |t| t == 0).unwrap();
        assert!((restored.prob(0).unwrap() - 0.5).abs() < 1e-12);
        assert!((restored.prob(1).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn eta_zero_only_renormalizes() {
        let w = TokenDistribution::truncated(vec![(0, 0.6), (1, 0.2)]).unwrap();
        let restored = unboost_green(&w, 0.0, 2.0, |t| t == 0).unwrap();
        assert!((restored.prob(0).unwrap() - 0.75).abs() < 1e-12);
        assert!(!restored.is_truncated());
    }

    #[test]
    fn doubled_eta_overshoots_to_the_mirror_point() {
        // eta = 2 on (0.75, 0.25) with strength ln 3 lands on (0.25, 0.75).
        let restored = unboost_green(&pair(0.75), 2.0, 3f64.ln(), |t| t == 0).unwrap();
        assert!((restored.prob(0).unwrap() - 0.25).abs() < 1e-12);
        assert!((restored.prob(1).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn zero_strength_estimate_changes_nothing() {
        let w = TokenDistribution::truncated(vec![(3, 0.3), (9, 0.5)]).unwrap();
        let restored = unboost_green(&w, 1.5, 0.0, |_| true).unwrap();
        assert!((restored.prob(3).unwrap() - 0.375).abs() < 1e-12);
        assert!((restored.prob(9).unwrap() - 0.625).abs() < 1e-12);
    }

    #[test]
    fn remove_step_round_trips_a_boost() {
        let spec = WatermarkSpec::new(b"rm-key".to_vec(), 3, 1.7, 0.5).unwrap();
        let ngram = [5u32, 9, 2];
        let ctx = crate::types::NGramContext::from_tail(&ngram, 3);
        let p = TokenDistribution::normalized((0..16).map(|t| (t, 1.0 / 16.0)).collect()).unwrap();
        let pw = boost_green(&p, spec.delta, |t| spec.partition(&ctx, t) == Color::Green).unwrap();
        let truth = PartitionColors(&spec);
        let restored = remove_step(&pw, &ngram, 1.0, spec.delta, &truth).unwrap();
        for (t, want) in p.iter() {
            assert!((restored.prob(t).unwrap() - want).abs() < 1e-9);
        }
    }

    #[test]
    fn remove_step_aborts_on_unclassifiable_candidates() {
        struct NoColors;
        impl ColorSource for NoColors {
            fn color_of(&self, _ngram: &[TokenId], _token: TokenId) -> Result<Option<Color>> {
                Ok(None)
            }
        }
        let w = pair(0.75);
        assert!(matches!(
            remove_step(&w, &[1, 2, 3], 1.0, 1.0, &NoColors),
            Err(Error::Unclassified { .. })
        ));
        // With zero effective strength nothing needs a color: the step
        // degenerates to renormalizing the window.
        let truncated = TokenDistribution::truncated(vec![(0, 0.6), (1, 0.2)]).unwrap();
        let restored = remove_step(&truncated, &[1, 2, 3], 1.0, 0.0, &NoColors).unwrap();
        assert!((restored.prob(0).unwrap() - 0.75).abs() < 1e-12);
        assert!((restored.prob(1).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn same_color_ratios_survive_removal() {
        let w = TokenDistribution::normalized(vec![(0, 0.5), (1, 0.3), (2, 0.2)]).unwrap();
        let restored = unboost_green(&w, 1.0, 2.0, |t| t == 2).unwrap();
        let r_before = w.prob(0).unwrap() / w.prob(1).unwrap();
        let r_after = restored.prob(0).unwrap() / restored.prob(1).unwrap();
        assert!((r_before - r_after).abs() < 1e-12);
    }

    #[test]
    fn bound_reference_points() {
        // Perfect estimates: zero drift, exactly.
        let zero = tv_bound(&TvBoundInputs {
            epsilon1: 0.0,
            epsilon2: 0.0,
            delta: 2.0,
        })
        .unwrap();
        assert_eq!(zero, 0.0);
        // Full misclassification is outside the bound's domain.
        assert!(tv_bound(&TvBoundInputs {
            epsilon1: 1.0,
            epsilon2: 0.0,
            delta: 2.0
        })
        .is_err());
    }

    #[test]
    fn bound_shrinks_continuously_in_epsilon1() {
        let mut last = f64::INFINITY;
        for &e1 in &[0.2, 0.1, 0.05, 0.02, 0.01, 0.001, 1e-6] {
            let b = tv_bound(&TvBoundInputs {
                epsilon1: e1,
                epsilon2: 0.0,
                delta: 2.0,
            })
            .unwrap();
            assert!(b < last, "bound must shrink: {b} !< {last}");
            last = b;
        }
        assert!(last < 1e-4, "bound near zero misclassification: {last}");
    }

    #[test]
    fn tv_distance_handles_disjoint_support() {
        let p = TokenDistribution::normalized(vec![(0, 1.0 - 1e-12), (1, 1e-12)]).unwrap();
        let q = TokenDistribution::normalized(vec![(2, 0.5), (3, 0.5)]).unwrap();
        assert!((tv_distance(&p, &q) - 2.0).abs() < 1e-9);
        assert_eq!(tv_distance(&p, &p), 0.0);
    }
}
