//! Temperature-controlled nucleus sampling over attribute logits.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{token_from_ids, vocab};
use crate::model::net::AttributeLogits;
use crate::tokens::CompoundToken;

/// Per-attribute temperatures (canonical order: type, beat, density,
/// strength, instrument, pitch, duration) and the nucleus threshold.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SamplingConfig {
    pub temperatures: [f64; 7],
    pub nucleus_p: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            temperatures: [1.0, 1.0, 1.0, 1.0, 1.0, 1.2, 1.0],
            nucleus_p: 0.9,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperatures.iter().any(|&t| !(t.is_finite() && t >= 0.0)) {
            return Err(Error::InvalidArgument("temperatures must be >= 0".into()));
        }
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "nucleus_p {} outside (0, 1]",
                self.nucleus_p
            )));
        }
        Ok(())
    }
}

/// Samples one index from logits. Masked or -inf entries are excluded;
/// temperature 0 is the argmax limit (deterministic, ties to the lowest
/// index). Nucleus truncation keeps the smallest prefix of the sorted
/// distribution reaching cumulative probability `nucleus_p`.
pub fn sample_index(
    logits: &[f64],
    temperature: f64,
    nucleus_p: f64,
    mask: Option<&[bool]>,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    if let Some(m) = mask {
        debug_assert_eq!(m.len(), logits.len());
    }
    let allowed: Vec<usize> = (0..logits.len())
        .filter(|&i| mask.is_none_or(|m| m[i]) && logits[i] > f64::NEG_INFINITY)
        .collect();
    if allowed.is_empty() {
        return Err(Error::InvalidArgument(
            "degenerate logits: no sampleable entry".into(),
        ));
    }
    if temperature == 0.0 {
        let best = allowed
            .iter()
            .copied()
            .fold((allowed[0], f64::NEG_INFINITY), |acc, i| {
                if logits[i] > acc.1 {
                    (i, logits[i])
                } else {
                    acc
                }
            });
        return Ok(best.0);
    }

    let max = allowed.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(usize, f64)> = allowed
        .iter()
        .map(|&i| (i, ((logits[i] - max) / temperature).exp()))
        .collect();
    let sum: f64 = probs.iter().map(|&(_, p)| p).sum();
    for p in probs.iter_mut() {
        p.1 /= sum;
    }
    // Sort descending by probability, index ascending for determinism.
    probs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut cut = probs.len();
    let mut cum = 0.0;
    for (k, &(_, p)) in probs.iter().enumerate() {
        cum += p;
        if cum >= nucleus_p {
            cut = k + 1;
            break;
        }
    }
    let kept = &probs[..cut];
    let kept_sum: f64 = kept.iter().map(|&(_, p)| p).sum();
    let u: f64 = rng.random::<f64>() * kept_sum;
    let mut acc = 0.0;
    for &(i, p) in kept {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(kept.last().unwrap().0)
}

/// External constraints on next-token sampling; entries default to "all
/// allowed" when `None`.
#[derive(Debug, Clone, Default)]
pub struct TokenMasks {
    pub ttype: Option<[bool; vocab::TYPE]>,
    pub beat: Option<[bool; vocab::BEAT]>,
    pub instrument: Option<[bool; vocab::INSTRUMENT]>,
}

fn range_mask<const N: usize>(allowed: std::ops::RangeInclusive<usize>) -> [bool; N] {
    let mut m = [false; N];
    for i in allowed {
        m[i] = true;
    }
    m
}

/// Stage 1: samples the type id from type logits under an optional mask.
pub fn sample_type(
    type_logits: &[f64],
    cfg: &SamplingConfig,
    mask: Option<&[bool; vocab::TYPE]>,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    cfg.validate()?;
    let mut type_mask = mask.copied().unwrap_or([true; vocab::TYPE]);
    type_mask[0] = false; // type has no real None entry
    sample_index(
        type_logits,
        cfg.temperatures[0],
        cfg.nucleus_p,
        Some(&type_mask),
        rng,
    )
}

/// Stage 2: samples the six remaining attributes for an already-chosen type,
/// forcing attributes outside the type's group to None.
pub fn sample_attrs_for_type(
    type_id: usize,
    attrs: &[Vec<f64>; 6],
    cfg: &SamplingConfig,
    masks: &TokenMasks,
    rng: &mut ChaCha8Rng,
) -> Result<CompoundToken> {
    cfg.validate()?;
    let logits = AttributeLogits {
        ttype: Vec::new(),
        attrs: attrs.clone(),
    };
    sample_with_type(type_id, &logits, cfg, masks, rng)
}

/// Samples one compound token from full attribute logits: type first, then
/// the group of attributes the type allows, forcing the rest to None.
pub fn sample_token(
    logits: &AttributeLogits,
    cfg: &SamplingConfig,
    masks: &TokenMasks,
    rng: &mut ChaCha8Rng,
) -> Result<CompoundToken> {
    let type_id = sample_type(&logits.ttype, cfg, masks.ttype.as_ref(), rng)?;
    sample_with_type(type_id, logits, cfg, masks, rng)
}

fn sample_with_type(
    type_id: usize,
    logits: &AttributeLogits,
    cfg: &SamplingConfig,
    masks: &TokenMasks,
    rng: &mut ChaCha8Rng,
) -> Result<CompoundToken> {
    let mut ids = [type_id, 0, 0, 0, 0, 0, 0];
    match type_id {
        vocab::TYPE_RHYTHM => {
            let beat_mask = masks.beat.unwrap_or(range_mask(1..=17));
            let beat_id = sample_index(
                &logits.attrs[0],
                cfg.temperatures[1],
                cfg.nucleus_p,
                Some(&beat_mask),
                rng,
            )?;
            ids[1] = beat_id;
            let density_mask: [bool; vocab::DENSITY] = range_mask(1..=17);
            ids[2] = sample_index(
                &logits.attrs[1],
                cfg.temperatures[2],
                cfg.nucleus_p,
                Some(&density_mask),
                rng,
            )?;
            if beat_id > 1 {
                // Tick tokens carry strength; bar tokens do not.
                let strength_mask: [bool; vocab::STRENGTH] = range_mask(1..=20);
                ids[3] = sample_index(
                    &logits.attrs[2],
                    cfg.temperatures[3],
                    cfg.nucleus_p,
                    Some(&strength_mask),
                    rng,
                )?;
            }
        }
        vocab::TYPE_NOTE => {
            let mut inst_mask = masks.instrument.unwrap_or(range_mask(1..=5));
            inst_mask[0] = false;
            ids[4] = sample_index(
                &logits.attrs[3],
                cfg.temperatures[4],
                cfg.nucleus_p,
                Some(&inst_mask),
                rng,
            )?;
            let pitch_mask: [bool; vocab::PITCH] = range_mask(1..=128);
            ids[5] = sample_index(
                &logits.attrs[4],
                cfg.temperatures[5],
                cfg.nucleus_p,
                Some(&pitch_mask),
                rng,
            )?;
            let dur_mask: [bool; vocab::DURATION] = range_mask(1..=32);
            ids[6] = sample_index(
                &logits.attrs[5],
                cfg.temperatures[6],
                cfg.nucleus_p,
                Some(&dur_mask),
                rng,
            )?;
        }
        _ => {} // EOS: everything stays None
    }
    token_from_ids(&ids)
}
