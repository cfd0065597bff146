//! Property tests over randomized inputs: the token grammar invariants, the
//! round-trip identities and the quantile classifier's monotonicity.

use proptest::prelude::*;

use cmt_core::metrics::{grooving_similarity, pitch_entropy};
use cmt_core::midi::{parse_midi, write_midi};
use cmt_core::tokens::{
    bar_density, decode, encode, group_simu_notes, validate, DecodeMode, TokenType,
};
use cmt_core::types::{Genre, Instrument, NoteEvent, QuantizedScore};
use cmt_core::video::{classify_density, DensityDistribution};

fn arb_note(max_bars: u32) -> impl Strategy<Value = NoteEvent> {
    (
        0..max_bars * 16,
        0..5usize,
        0..=127u8,
        1..=32u32,
    )
        .prop_map(|(onset, inst, pitch, dur)| {
            NoteEvent::new(pitch, onset, dur, Instrument::ALL[inst])
        })
}

fn arb_score() -> impl Strategy<Value = QuantizedScore> {
    proptest::collection::vec(arb_note(8), 1..60).prop_map(|mut notes| {
        // Keep notes sharing (instrument, pitch) disjoint in time: overlaps
        // have no unambiguous SMF byte form, so the MIDI round-trip could
        // only reproduce them up to a duration permutation.
        notes.sort_by_key(|n| (n.onset_tick, n.instrument.index(), n.pitch, n.duration_ticks));
        let mut last_end = std::collections::BTreeMap::new();
        let mut kept = Vec::with_capacity(notes.len());
        for n in notes {
            let key = (n.instrument.index(), n.pitch);
            let end = last_end.get(&key).copied().unwrap_or(0);
            if n.onset_tick >= end {
                last_end.insert(key, n.onset_tick + n.duration_ticks);
                kept.push(n);
            }
        }
        QuantizedScore::from_notes(120.0, kept).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn encode_then_decode_is_identity(score in arb_score()) {
        let tokens = encode(&score, Genre::Pop, &score.instruments_present()).unwrap();
        prop_assert!(validate(&tokens).is_valid());
        let back = decode(&tokens, score.tempo_bpm, DecodeMode::Strict).unwrap();
        prop_assert_eq!(back, score);
    }

    #[test]
    fn tick_densities_strictly_decrease_within_bars(score in arb_score()) {
        let tokens = encode(&score, Genre::Rock, &score.instruments_present()).unwrap();
        let mut last: Option<u8> = None;
        for tok in &tokens.body {
            if tok.is_bar() {
                last = None;
            } else if tok.is_tick() {
                let d = tok.density.unwrap();
                if let Some(prev) = last {
                    prop_assert_eq!(d, prev - 1);
                }
                last = Some(d);
            }
        }
        // The last tick of every bar carries remaining density 1.
        let mut pending: Option<u8> = None;
        for tok in &tokens.body {
            if tok.is_bar() || tok.ttype == TokenType::Eos {
                if let Some(d) = pending.take() {
                    prop_assert_eq!(d, 1);
                }
            } else if tok.is_tick() {
                pending = Some(tok.density.unwrap());
            }
        }
    }

    #[test]
    fn bar_token_densities_sum_to_occupied_ticks(score in arb_score()) {
        let tokens = encode(&score, Genre::Dance, &score.instruments_present()).unwrap();
        let bar_sum: u32 = tokens
            .body
            .iter()
            .filter(|t| t.is_bar())
            .map(|t| u32::from(t.density.unwrap()))
            .sum();
        let distinct: std::collections::BTreeSet<(u32, u32)> = score
            .notes
            .iter()
            .map(|n| (n.bar(), n.tick_in_bar()))
            .collect();
        prop_assert_eq!(bar_sum, distinct.len() as u32);
        // And the simu-note partition covers every note exactly once.
        let total: usize = group_simu_notes(&score).iter().map(|s| s.notes.len()).sum();
        prop_assert_eq!(total, score.notes.len());
    }

    #[test]
    fn midi_write_parse_is_identity(score in arb_score()) {
        let bytes = write_midi(&score).unwrap();
        let parsed = parse_midi(&bytes).unwrap();
        prop_assert_eq!(parsed, score);
    }

    #[test]
    fn classifier_is_monotone(speeds in proptest::collection::vec(0.0..100.0f64, 1..64)) {
        let dist = DensityDistribution::uniform();
        let classes = classify_density(&speeds, &dist).unwrap();
        for i in 0..speeds.len() {
            for j in 0..speeds.len() {
                if speeds[i] <= speeds[j] {
                    prop_assert!(classes[i] <= classes[j]);
                }
            }
        }
        prop_assert!(classes.iter().all(|&c| (1..=16).contains(&c)));
    }

    #[test]
    fn entropy_in_range_and_octave_invariant(score in arb_score()) {
        if let Ok(h) = pitch_entropy(&score) {
            prop_assert!((0.0..=12f64.log2() + 1e-12).contains(&h));
            let shifted: Vec<NoteEvent> = score
                .notes
                .iter()
                .map(|n| {
                    let mut m = *n;
                    m.pitch = if m.pitch < 116 { m.pitch + 12 } else { m.pitch };
                    m
                })
                .collect();
            // Only exact octave shifts keep the histogram; skip clamped notes.
            if score.notes.iter().all(|n| n.pitch < 116) {
                let t = QuantizedScore::from_notes(score.tempo_bpm, shifted).unwrap();
                prop_assert_eq!(pitch_entropy(&t).unwrap(), h);
            }
        }
    }

    #[test]
    fn grooving_within_unit_interval(score in arb_score()) {
        if let Ok(g) = grooving_similarity(&score) {
            prop_assert!((0.0..=1.0).contains(&g));
        }
    }

    #[test]
    fn bar_density_counts_at_most_16(score in arb_score()) {
        for b in 0..score.n_bars {
            prop_assert!(bar_density(&score, b).unwrap() <= 16);
        }
    }

    #[test]
    fn timing_conversions_invert_within_rounding(
        fps in 1.0..=240.0f64,
        tempo in 30.0..=300.0f64,
        quarter_beats in 0..4000u32,
    ) {
        use cmt_core::video::{beat_to_frame, frame_to_beat};
        let beat = f64::from(quarter_beats) * 0.25;
        let frame = beat_to_frame(beat, fps, tempo).unwrap();
        let back = frame_to_beat(frame as f64, fps, tempo).unwrap();
        // Half a frame of rounding expressed in beats.
        let bound = tempo / (fps * 120.0) + 1e-12;
        prop_assert!((back - beat).abs() <= bound);
    }
}
