//! Motion saliency and visual beat detection.
//!
//! Each flow field is binned into a 12-direction histogram weighted by vector
//! magnitude (a directogram). Saliency is the average positive change of that
//! histogram between consecutive flow fields; visual beats are salient local
//! maxima filtered to a near-constant tempo grid.

use crate::video::flow::FlowField;
use crate::video::timing::{frame_to_beat, tick_interval_frames};

pub const DIRECTION_BINS: usize = 12;
/// Allowed deviation of a beat gap from a whole number of ticks, as a
/// fraction of the tick interval.
pub const SPACING_TOLERANCE: f64 = 0.25;

/// A detected visual beat: a frame index and its motion saliency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisualBeat {
    pub frame_index: usize,
    pub saliency: f64,
}

fn directogram(field: &FlowField) -> [f64; DIRECTION_BINS] {
    let mut bins = [0.0; DIRECTION_BINS];
    for (&dx, &dy) in field.dx.iter().zip(&field.dy) {
        let mag = f64::from(dx).hypot(f64::from(dy));
        if mag == 0.0 {
            continue;
        }
        let angle = f64::from(dy).atan2(f64::from(dx)); // (-pi, pi]
        let frac = (angle + std::f64::consts::PI) / (2.0 * std::f64::consts::PI);
        let bin = ((frac * DIRECTION_BINS as f64) as usize).min(DIRECTION_BINS - 1);
        bins[bin] += mag;
    }
    bins
}

/// Per-frame saliency: entry `i` is the positive directogram change between
/// `flows[i]` and `flows[i+1]`, normalized by pixel count, and corresponds to
/// frame `i + 1` (0-based). Output length is `flows.len() - 1`.
pub fn motion_saliency(flows: &[FlowField]) -> Vec<f64> {
    if flows.len() < 2 {
        return Vec::new();
    }
    let area = (flows[0].width * flows[0].height) as f64;
    let mut prev = directogram(&flows[0]);
    let mut out = Vec::with_capacity(flows.len() - 1);
    for field in &flows[1..] {
        let cur = directogram(field);
        let change: f64 = cur
            .iter()
            .zip(&prev)
            .map(|(c, p)| (c - p).max(0.0))
            .sum();
        out.push(change / area);
        prev = cur;
    }
    out
}

/// Picks visual beats from a saliency series.
///
/// Candidates are strict local maxima above mean + one standard deviation.
/// A greedy forward pass keeps a candidate only when its gap to the previous
/// kept beat is within 25% of a whole number of tick intervals; candidates
/// closer than 3/4 of a tick replace the previous beat when more salient.
/// Saliency entry `i` corresponds to frame `i + 1` (see [`motion_saliency`]).
pub fn detect_visual_beats(saliency: &[f64], fps: f64, tempo_bpm: f64) -> Vec<VisualBeat> {
    if saliency.len() < 3 {
        return Vec::new();
    }
    let n = saliency.len() as f64;
    let mean = saliency.iter().sum::<f64>() / n;
    let var = saliency.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let threshold = mean + var.sqrt();

    let mut candidates = Vec::new();
    for i in 1..saliency.len() - 1 {
        if saliency[i] > saliency[i - 1] && saliency[i] > saliency[i + 1] && saliency[i] > threshold
        {
            candidates.push(VisualBeat {
                frame_index: i + 1,
                saliency: saliency[i],
            });
        }
    }

    let tick = tick_interval_frames(fps, tempo_bpm);
    if !(tick.is_finite() && tick > 0.0) {
        return Vec::new();
    }
    let mut kept: Vec<VisualBeat> = Vec::new();
    for cand in candidates {
        match kept.last() {
            None => kept.push(cand),
            Some(last) => {
                let gap = (cand.frame_index - last.frame_index) as f64;
                if gap < (1.0 - SPACING_TOLERANCE) * tick {
                    if cand.saliency > last.saliency {
                        *kept.last_mut().unwrap() = cand;
                    }
                } else {
                    let k = (gap / tick).round().max(1.0);
                    if (gap - k * tick).abs() <= SPACING_TOLERANCE * tick {
                        kept.push(cand);
                    }
                }
            }
        }
    }
    kept
}

/// Snaps a visual beat to its nearest global tick index (quarter beats).
pub fn snap_to_tick(beat: &VisualBeat, fps: f64, tempo_bpm: f64) -> u64 {
    let beats = frame_to_beat(beat.frame_index as f64, fps, tempo_bpm).unwrap_or(0.0);
    (beats * 4.0).round().max(0.0) as u64
}
