//! Objective evaluation: pitch-class histogram entropy, grooving pattern
//! similarity, a self-similarity structureness indicator, the video/music
//! matching score, and the density/strength/time control errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{map_slice, ExecMode};
use crate::tokens::{bar_density, decode, group_simu_notes, tick_strength, DecodeMode, TokenSequence};
use crate::types::{Instrument, QuantizedScore, TICKS_PER_BAR};
use crate::video::VideoRhythm;

/// Divisor floor for the matching score; perfect matches cap at 1/EPSILON.
pub const MS_EPSILON: f64 = 1e-8;

/// Per-piece objective metrics. Fields are `None` when the piece is too
/// short for the metric's preconditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pitch_entropy: Option<f64>,
    pub grooving_similarity: Option<f64>,
    pub structureness: Option<f64>,
}

/// Normalized control error rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlError {
    pub density_err: f64,
    pub strength_err: f64,
    pub time_err: f64,
}

/// Shannon entropy (bits) of the 12-bin pitch-class histogram over all
/// non-drum notes of the whole piece.
pub fn pitch_entropy(score: &QuantizedScore) -> Result<f64> {
    pitch_entropy_windowed(score, None)
}

/// Windowed variant: `bars_per_window = Some(n)` averages the entropy over
/// consecutive n-bar windows (empty windows are skipped); `None` treats the
/// whole piece as one window.
pub fn pitch_entropy_windowed(score: &QuantizedScore, bars_per_window: Option<u32>) -> Result<f64> {
    let melodic: Vec<_> = score
        .notes
        .iter()
        .filter(|n| n.instrument != Instrument::Drums)
        .collect();
    if melodic.is_empty() {
        return Err(Error::InvalidArgument(
            "pitch entropy needs at least one non-drum note".into(),
        ));
    }
    let window = match bars_per_window {
        None => score.n_bars,
        Some(0) => return Err(Error::InvalidArgument("window must be positive".into())),
        Some(w) => w,
    };
    let mut entropies = Vec::new();
    let mut start = 0u32;
    while start < score.n_bars {
        let end = (start + window).min(score.n_bars);
        let mut hist = [0f64; 12];
        for n in melodic.iter().filter(|n| n.bar() >= start && n.bar() < end) {
            hist[(n.pitch % 12) as usize] += 1.0;
        }
        let total: f64 = hist.iter().sum();
        if total > 0.0 {
            let mut h = 0.0;
            for &c in &hist {
                if c > 0.0 {
                    let p = c / total;
                    h -= p * p.log2();
                }
            }
            entropies.push(h);
        }
        start = end;
    }
    Ok(entropies.iter().sum::<f64>() / entropies.len() as f64)
}

fn onset_vector(score: &QuantizedScore, bar: u32) -> [f64; TICKS_PER_BAR as usize] {
    let mut v = [0.0; TICKS_PER_BAR as usize];
    for n in &score.notes {
        if n.bar() == bar {
            v[(n.tick_in_bar() - 1) as usize] = 1.0;
        }
    }
    v
}

/// Mean pairwise grooving similarity 1 - Hamming/16 over all unordered bar
/// pairs of binary per-bar onset vectors.
pub fn grooving_similarity(score: &QuantizedScore) -> Result<f64> {
    if score.n_bars < 2 {
        return Err(Error::InvalidArgument(
            "grooving similarity needs at least 2 bars".into(),
        ));
    }
    let vectors: Vec<_> = (0..score.n_bars).map(|b| onset_vector(score, b)).collect();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for a in 0..vectors.len() {
        for b in a + 1..vectors.len() {
            let hamming: f64 = vectors[a]
                .iter()
                .zip(&vectors[b])
                .map(|(x, y)| if x != y { 1.0 } else { 0.0 })
                .sum();
            sum += 1.0 - hamming / TICKS_PER_BAR as f64;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// Per-bar feature for the self-similarity matrix: 16-dim binary onsets
/// concatenated with the bar's 12-dim pitch-class histogram.
fn bar_feature(score: &QuantizedScore, bar: u32) -> Vec<f64> {
    let mut f = onset_vector(score, bar).to_vec();
    let mut hist = [0f64; 12];
    for n in &score.notes {
        if n.bar() == bar && n.instrument != Instrument::Drums {
            hist[(n.pitch % 12) as usize] += 1.0;
        }
    }
    f.extend_from_slice(&hist);
    f
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 1.0; // covers identical and all-zero pairs exactly
    }
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

pub const STRUCTURENESS_MIN_LAG: u32 = 4;
pub const STRUCTURENESS_MAX_LAG: u32 = 16;

/// Repetitive-structure indicator: the maximum over bar lags 4..=16 of the
/// mean cosine self-similarity along the lag's diagonal stripe. 1.0 for an
/// exact loop at some lag; near 0 for unrelated bars.
pub fn structureness(score: &QuantizedScore) -> Result<f64> {
    if score.n_bars < 8 {
        return Err(Error::InvalidArgument(
            "structureness needs at least 8 bars".into(),
        ));
    }
    let features: Vec<Vec<f64>> = (0..score.n_bars).map(|b| bar_feature(score, b)).collect();
    let mut best: f64 = 0.0;
    let max_lag = STRUCTURENESS_MAX_LAG.min(score.n_bars - 1);
    for lag in STRUCTURENESS_MIN_LAG..=max_lag {
        let lag = lag as usize;
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..features.len() - lag {
            sum += cosine(&features[i], &features[i + lag]);
            count += 1;
        }
        if count > 0 {
            best = best.max(sum / count as f64);
        }
    }
    Ok(best.clamp(0.0, 1.0))
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Matching score between a piece's and a video's rhythm vectors:
/// `1 / max(MSE(d_m, d_v) + MSE(s_m .* 1(s_v), s_v), epsilon)`, where the
/// indicator keeps only positions with a requested (positive) strength. Both
/// vector pairs are truncated to their common length first.
pub fn matching_score(d_m: &[f64], d_v: &[f64], s_m: &[f64], s_v: &[f64]) -> Result<f64> {
    let dn = d_m.len().min(d_v.len());
    if dn == 0 {
        return Err(Error::InvalidArgument("empty density vectors".into()));
    }
    let sn = s_m.len().min(s_v.len());
    let d_term = mse(&d_m[..dn], &d_v[..dn]);
    let masked: Vec<f64> = (0..sn)
        .map(|i| if s_v[i] > 0.0 { s_m[i] } else { 0.0 })
        .collect();
    let s_true: Vec<f64> = (0..sn)
        .map(|i| if s_v[i] > 0.0 { s_v[i] } else { 0.0 })
        .collect();
    let s_term = mse(&masked, &s_true);
    Ok(1.0 / (d_term + s_term).max(MS_EPSILON))
}

/// Per-bar simu-note densities of a score, as reals.
pub fn density_vector(score: &QuantizedScore) -> Vec<f64> {
    (0..score.n_bars)
        .map(|b| bar_density(score, b).unwrap_or(0) as f64)
        .collect()
}

/// Per-tick strength vector over the whole score, zeros at unoccupied ticks.
pub fn strength_vector(score: &QuantizedScore) -> Vec<f64> {
    let total = (score.n_bars * TICKS_PER_BAR) as usize;
    let mut v = vec![0.0; total];
    for b in 0..score.n_bars {
        for j in 1..=TICKS_PER_BAR as u8 {
            let s = tick_strength(score, b, j);
            if s > 0 {
                v[(b * TICKS_PER_BAR) as usize + j as usize - 1] = s as f64;
            }
        }
    }
    v
}

fn rms(diffs: &[f64]) -> f64 {
    if diffs.is_empty() {
        return 0.0;
    }
    (diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64).sqrt()
}

/// Control error between generated tokens and the requested video rhythm.
///
/// Density: RMS distance between realized per-bar densities and the video's
/// classes (over their common length), normalized by the piece's average
/// simu-notes per bar. Strength: RMS distance at the requested visual-beat
/// positions, normalized by the average notes per simu-note. Time: absolute
/// difference between generated and video length in beats over the video
/// length.
pub fn control_error(tokens: &TokenSequence, rhythm: &VideoRhythm) -> Result<ControlError> {
    let score = decode(tokens, rhythm.tempo_bpm, DecodeMode::Tolerant)?;
    let simu = group_simu_notes(&score);
    let n_simu = simu.len();
    let n_notes: usize = simu.iter().map(|s| s.notes.len()).sum();
    let avg_simu_per_bar = n_simu as f64 / f64::from(score.n_bars.max(1));
    let avg_notes_per_simu = if n_simu == 0 {
        1.0
    } else {
        n_notes as f64 / n_simu as f64
    };

    let realized = density_vector(&score);
    let requested: Vec<f64> = rhythm.bar_density_class.iter().map(|&c| f64::from(c)).collect();
    let n = realized.len().min(requested.len());
    let d_diffs: Vec<f64> = (0..n).map(|i| realized[i] - requested[i]).collect();
    let density_err = if avg_simu_per_bar > 0.0 {
        rms(&d_diffs) / avg_simu_per_bar
    } else {
        rms(&d_diffs)
    };

    let s_diffs: Vec<f64> = rhythm
        .visual_beats
        .iter()
        .filter(|vb| vb.bar < score.n_bars)
        .map(|vb| f64::from(tick_strength(&score, vb.bar, vb.tick)) - f64::from(vb.strength))
        .collect();
    let strength_err = if avg_notes_per_simu > 0.0 {
        rms(&s_diffs) / avg_notes_per_simu
    } else {
        rms(&s_diffs)
    };

    let gen_beats = f64::from(score.n_bars) * 4.0;
    let time_err = (gen_beats - f64::from(rhythm.n_beats)).abs() / f64::from(rhythm.n_beats);
    Ok(ControlError {
        density_err,
        strength_err,
        time_err,
    })
}

/// Per-piece metric report; metrics whose preconditions fail are omitted.
pub fn report_for_score(score: &QuantizedScore) -> MetricReport {
    MetricReport {
        pitch_entropy: pitch_entropy(score).ok(),
        grooving_similarity: grooving_similarity(score).ok(),
        structureness: structureness(score).ok(),
    }
}

/// Reports for a batch of scores; the per-piece work parallelizes.
pub fn reports_for_scores(scores: &[QuantizedScore], mode: ExecMode) -> Vec<MetricReport> {
    map_slice(mode, scores, report_for_score)
}

/// Field-wise mean over the defined entries of many reports.
pub fn mean_report(reports: &[MetricReport]) -> MetricReport {
    fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
        let v: Vec<f64> = values.collect();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    }
    MetricReport {
        pitch_entropy: mean(reports.iter().filter_map(|r| r.pitch_entropy)),
        grooving_similarity: mean(reports.iter().filter_map(|r| r.grooving_similarity)),
        structureness: mean(reports.iter().filter_map(|r| r.structureness)),
    }
}
