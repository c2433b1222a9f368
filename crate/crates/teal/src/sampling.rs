//! Stochastic decoding: temperature-scaled nucleus (top-p) sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Scalar;

fn default_temperature() -> f64 {
    0.1
}
fn default_top_p() -> f64 {
    0.75
}
fn default_max_new() -> usize {
    64
}
fn default_max_span() -> usize {
    30
}

/// Decoding settings. The temperature/top-p defaults are the tuned
/// generation settings used across all tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_max_new")]
    pub max_new_tokens: usize,
    /// Longest variable-length (audio) token span before the close marker
    /// is forced.
    #[serde(default = "default_max_span")]
    pub max_span: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { temperature: 0.1, top_p: 0.75, max_new_tokens: 64, max_span: 30, seed: 0 }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config("top_p must lie in (0, 1]".into()));
        }
        if self.max_new_tokens == 0 || self.max_span == 0 {
            return Err(Error::Config("max_new_tokens and max_span must be positive".into()));
        }
        Ok(())
    }
}

/// The deterministic half of nucleus sampling: softmax the logits at the
/// given temperature, keep the smallest probability-sorted prefix whose
/// mass reaches `top_p` (ties broken toward lower ids), and renormalize.
/// Returns the kept ids in sampling order with their renormalized
/// probabilities.
pub fn nucleus_distribution<S: Scalar>(
    logits: &[S],
    temperature: f64,
    top_p: f64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if logits.is_empty() {
        return Err(Error::Numeric("cannot sample from empty logits".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::Config("top_p must lie in (0, 1]".into()));
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l.as_f64() / temperature).collect();
    if scaled.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logit in sampling".into()));
    }
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|&e| e / sum).collect();

    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));

    let mut kept = Vec::new();
    let mut mass = 0.0f64;
    for &i in &order {
        kept.push(i);
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    let renorm: Vec<f64> = kept.iter().map(|&i| probs[i] / mass).collect();
    Ok((kept, renorm))
}

/// Draw one token id by inverse-CDF over the nucleus distribution.
pub fn top_p_sample<S: Scalar, R: Rng>(
    logits: &[S],
    temperature: f64,
    top_p: f64,
    rng: &mut R,
) -> Result<usize> {
    let (ids, probs) = nucleus_distribution(logits, temperature, top_p)?;
    let u: f64 = rng.gen::<f64>();
    let mut acc = 0.0f64;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(ids[i]);
        }
    }
    Ok(*ids.last().expect("nucleus keeps at least one id"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn defaults_are_the_tuned_decoding_settings() {
        let cfg = GenConfig::default();
        assert_eq!(cfg.temperature, 0.1);
        assert_eq!(cfg.top_p, 0.75);
        let parsed: GenConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn nucleus_keeps_smallest_prefix_reaching_the_mass() {
        // softmax([2,1,0]) = [0.665, 0.245, 0.090]; 0.665 < 0.75 so the
        // second id joins, and the renormalized head is sigmoid(1).
        let (ids, probs) = nucleus_distribution(&[2.0f64, 1.0, 0.0], 1.0, 0.75).unwrap();
        assert_eq!(ids, vec![0, 1]);
        assert!((probs[0] - 0.7310585786300049).abs() < 1e-12, "{}", probs[0]);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn low_temperature_collapses_to_argmax() {
        let (ids, probs) = nucleus_distribution(&[2.0f64, 1.0, 0.0], 0.01, 0.75).unwrap();
        assert_eq!(ids, vec![0]);
        assert_eq!(probs, vec![1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            assert_eq!(top_p_sample(&[2.0f64, 1.0, 0.0], 0.01, 0.75, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn full_top_p_keeps_every_id() {
        let (ids, probs) = nucleus_distribution(&[0.3f32, -1.0, 2.0, 0.0], 1.0, 1.0).unwrap();
        assert_eq!(ids.len(), 4);
        assert_eq!(ids[0], 2, "highest logit sorts first");
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn probability_ties_break_toward_lower_ids() {
        let (ids, _) = nucleus_distribution(&[1.0f64, 1.0, 0.0], 1.0, 0.5).unwrap();
        assert_eq!(ids, vec![0, 1]);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(nucleus_distribution::<f64>(&[], 1.0, 0.5).is_err());
        assert!(nucleus_distribution(&[f64::NAN, 0.0], 1.0, 0.5).is_err());
        assert!(nucleus_distribution(&[f64::INFINITY, 0.0], 1.0, 0.5).is_err());
        assert!(nucleus_distribution(&[1.0f64, 0.0], 0.0, 0.5).is_err());
        assert!(nucleus_distribution(&[1.0f64, 0.0], -1.0, 0.5).is_err());
        assert!(nucleus_distribution(&[1.0f64, 0.0], 1.0, 0.0).is_err());
        assert!(nucleus_distribution(&[1.0f64, 0.0], 1.0, 1.5).is_err());
        assert!(GenConfig { temperature: 0.0, ..Default::default() }.validate().is_err());
        assert!(GenConfig { top_p: 1.2, ..Default::default() }.validate().is_err());
        assert!(GenConfig { max_new_tokens: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn draw_frequencies_match_the_nucleus_distribution() {
        let logits = [2.0f64, 1.0, 0.0];
        let (ids, probs) = nucleus_distribution(&logits, 1.0, 0.75).unwrap();
        let n = 4000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = vec![0usize; 3];
        for _ in 0..n {
            counts[top_p_sample(&logits, 1.0, 0.75, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[2], 0, "id outside the nucleus must never be drawn");
        for (i, &id) in ids.iter().enumerate() {
            let freq = counts[id] as f64 / n as f64;
            let sigma = (probs[i] * (1.0 - probs[i]) / n as f64).sqrt();
            assert!(
                (freq - probs[i]).abs() < 4.0 * sigma,
                "id {id}: freq {freq} vs p {} (sigma {sigma})",
                probs[i]
            );
        }
    }

    #[test]
    fn same_seed_same_draws() {
        let logits = [0.5f32, 0.4, 0.3, 0.2];
        let draw = |seed: u64| -> Vec<usize> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| top_p_sample(&logits, 1.0, 0.9, &mut rng).unwrap()).collect()
        };
        assert_eq!(draw(3), draw(3));
    }
}
