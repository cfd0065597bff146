//! Standard MIDI File reading and writing.
//!
//! Reading accepts SMF formats 0 and 1, merges tracks into the five canonical
//! instrument categories and quantizes onsets/durations onto the 16-ticks-per-
//! bar grid. Writing emits format 1 at 480 PPQN with one track per instrument
//! present, a fixed velocity of 80, and a single tempo meta event, such that
//! `parse(write(s)) == s` for every valid score. One representability caveat:
//! notes sharing (instrument, pitch) that overlap in time have no unambiguous
//! SMF byte form (note-offs carry no note identity), so such scores round-trip
//! to an equal-sounding duration pairing rather than the original one.
//! Note-ons pair with the earliest open note-off candidate (FIFO).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::types::{sort_notes, Instrument, NoteEvent, QuantizedScore};

/// Pulses per quarter note used on the write path.
pub const WRITE_PPQN: u32 = 480;
/// Grid ticks per quarter note (a grid tick is a quarter beat).
const GRID_PER_QUARTER: u64 = 4;
const DEFAULT_TEMPO_BPM: f64 = 120.0;
const WRITE_VELOCITY: u8 = 80;

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::MidiParse {
        offset,
        message: message.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(parse_err(self.pos, format!("unexpected EOF, needed {n} bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn peek_u8(&self) -> Result<u8> {
        self.bytes
            .get(self.pos)
            .copied()
            .ok_or_else(|| parse_err(self.pos, "unexpected EOF"))
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Variable-length quantity, at most 4 bytes per the SMF spec.
    fn vlq(&mut self) -> Result<u32> {
        let mut value: u32 = 0;
        for i in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(value);
            }
            if i == 3 {
                break;
            }
        }
        Err(parse_err(self.pos, "variable-length quantity too long"))
    }
}

/// Raw note extracted from the event stream, in SMF ticks.
struct RawNote {
    onset: u64,
    duration: u64,
    pitch: u8,
    instrument: Instrument,
}

/// Maps a General MIDI program number to an instrument category.
///
/// Channel 10 is handled separately (always drums); everything not covered by
/// a range below falls back to piano.
fn program_to_instrument(program: u8) -> Instrument {
    match program {
        0..=7 => Instrument::Piano,
        24..=31 => Instrument::Guitar,
        32..=39 => Instrument::Bass,
        40..=51 => Instrument::Strings,
        _ => Instrument::Piano,
    }
}

/// Default GM program emitted per instrument on the write path; each one maps
/// back to the same category through `program_to_instrument`.
fn instrument_to_program(inst: Instrument) -> u8 {
    match inst {
        Instrument::Drums => 0,
        Instrument::Piano => 0,
        Instrument::Guitar => 24,
        Instrument::Bass => 32,
        Instrument::Strings => 48,
    }
}

fn write_channel(inst: Instrument) -> u8 {
    match inst {
        Instrument::Drums => 9,
        Instrument::Piano => 0,
        Instrument::Guitar => 1,
        Instrument::Bass => 2,
        Instrument::Strings => 3,
    }
}

struct TrackParse {
    notes: Vec<RawNote>,
    /// (tick, microseconds per quarter) tempo events in track order.
    tempos: Vec<(u64, u32)>,
}

fn parse_track(r: &mut Reader<'_>, len: usize) -> Result<TrackParse> {
    let end = r.pos + len;
    let mut tick: u64 = 0;
    let mut running_status: Option<u8> = None;
    // Per-channel current program.
    let mut programs = [0u8; 16];
    // Open note-ons keyed by (channel, pitch), FIFO per key.
    let mut open: BTreeMap<(u8, u8), Vec<(u64, Instrument)>> = BTreeMap::new();
    let mut notes = Vec::new();
    let mut tempos = Vec::new();

    while r.pos < end {
        tick += u64::from(r.vlq()?);
        let status_byte = r.peek_u8()?;
        let status = if status_byte & 0x80 != 0 {
            r.u8()?;
            if status_byte < 0xf0 {
                running_status = Some(status_byte);
            }
            status_byte
        } else {
            running_status.ok_or_else(|| parse_err(r.pos, "data byte without running status"))?
        };

        match status {
            0x80..=0x9f => {
                let channel = status & 0x0f;
                let pitch = r.u8()? & 0x7f;
                let velocity = r.u8()? & 0x7f;
                let is_on = status & 0xf0 == 0x90 && velocity > 0;
                if is_on {
                    let instrument = if channel == 9 {
                        Instrument::Drums
                    } else {
                        program_to_instrument(programs[channel as usize])
                    };
                    open.entry((channel, pitch)).or_default().push((tick, instrument));
                } else if let Some(stack) = open.get_mut(&(channel, pitch)) {
                    if !stack.is_empty() {
                        let (onset, instrument) = stack.remove(0);
                        notes.push(RawNote {
                            onset,
                            duration: tick.saturating_sub(onset),
                            pitch,
                            instrument,
                        });
                    }
                }
            }
            0xa0..=0xbf | 0xe0..=0xef => {
                r.take(2)?;
            }
            0xc0..=0xcf => {
                let program = r.u8()? & 0x7f;
                programs[(status & 0x0f) as usize] = program;
            }
            0xd0..=0xdf => {
                r.take(1)?;
            }
            0xf0 | 0xf7 => {
                let len = r.vlq()? as usize;
                r.take(len)?;
            }
            0xff => {
                let meta_type = r.u8()?;
                let len = r.vlq()? as usize;
                let data = r.take(len)?;
                match meta_type {
                    0x51 => {
                        if data.len() != 3 {
                            return Err(parse_err(r.pos, "tempo meta event must be 3 bytes"));
                        }
                        let us = (u32::from(data[0]) << 16) | (u32::from(data[1]) << 8) | u32::from(data[2]);
                        tempos.push((tick, us));
                    }
                    0x2f => {
                        // End of track: close any hanging notes here.
                        for ((_, pitch), stack) in open.iter() {
                            for (onset, instrument) in stack {
                                notes.push(RawNote {
                                    onset: *onset,
                                    duration: tick.saturating_sub(*onset),
                                    pitch: *pitch,
                                    instrument: *instrument,
                                });
                            }
                        }
                        open.clear();
                        r.pos = end;
                        return Ok(TrackParse { notes, tempos });
                    }
                    _ => {}
                }
            }
            other => {
                return Err(parse_err(r.pos, format!("unexpected status byte 0x{other:02x}")));
            }
        }
    }
    // Missing end-of-track marker: tolerate, closing hanging notes at the last tick.
    for ((_, pitch), stack) in open.iter() {
        for (onset, instrument) in stack {
            notes.push(RawNote {
                onset: *onset,
                duration: tick.saturating_sub(*onset),
                pitch: *pitch,
                instrument: *instrument,
            });
        }
    }
    Ok(TrackParse { notes, tempos })
}

/// Parses an SMF byte stream into a quantized score.
pub fn parse_midi(bytes: &[u8]) -> Result<QuantizedScore> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4)?;
    if magic != b"MThd" {
        return Err(parse_err(0, "missing MThd header"));
    }
    let header_len = r.u32()? as usize;
    if header_len < 6 {
        return Err(parse_err(r.pos, format!("header length {header_len} < 6")));
    }
    let format = r.u16()?;
    if format > 1 {
        return Err(parse_err(r.pos - 2, format!("unsupported SMF format {format}")));
    }
    let n_tracks = r.u16()?;
    let division = r.u16()?;
    if division & 0x8000 != 0 {
        return Err(parse_err(r.pos - 2, "SMPTE time division is not supported"));
    }
    if division == 0 {
        return Err(parse_err(r.pos - 2, "zero time division"));
    }
    r.take(header_len - 6)?;

    let mut raw_notes = Vec::new();
    let mut tempos: Vec<(u64, usize, u32)> = Vec::new();
    let mut track_index = 0usize;
    while track_index < n_tracks as usize {
        if r.remaining() == 0 {
            return Err(parse_err(
                r.pos,
                format!("expected {n_tracks} tracks, found {track_index}"),
            ));
        }
        let tag = r.take(4)?;
        let chunk_len = r.u32()? as usize;
        if tag != b"MTrk" {
            // Unknown chunk types are skipped per the SMF spec.
            r.take(chunk_len)?;
            continue;
        }
        let parsed = parse_track(&mut r, chunk_len)?;
        raw_notes.extend(parsed.notes);
        tempos.extend(parsed.tempos.into_iter().map(|(t, us)| (t, track_index, us)));
        track_index += 1;
    }

    // Only the first tempo event (earliest tick, then track order) is honored.
    tempos.sort_by_key(|&(tick, track, _)| (tick, track));
    let tempo_bpm = tempos
        .first()
        .map(|&(_, _, us)| 60_000_000.0 / f64::from(us))
        .unwrap_or(DEFAULT_TEMPO_BPM);

    quantize(raw_notes, division, tempo_bpm)
}

fn quantize(raw: Vec<RawNote>, division: u16, tempo_bpm: f64) -> Result<QuantizedScore> {
    let div = u64::from(division);
    let mut notes: Vec<NoteEvent> = raw
        .into_iter()
        .map(|n| {
            let onset = round_div(n.onset * GRID_PER_QUARTER, div);
            let duration = round_div(n.duration * GRID_PER_QUARTER, div).max(1);
            NoteEvent {
                onset_tick: onset as u32,
                instrument: n.instrument,
                pitch: n.pitch,
                duration_ticks: duration as u32,
            }
        })
        .collect();
    if notes.is_empty() {
        return Err(Error::EmptyScore);
    }
    sort_notes(&mut notes);
    // Identical (onset, instrument, pitch) collapse to the longest duration.
    let mut deduped: Vec<NoteEvent> = Vec::with_capacity(notes.len());
    for n in notes {
        match deduped.last_mut() {
            Some(prev)
                if prev.onset_tick == n.onset_tick
                    && prev.instrument == n.instrument
                    && prev.pitch == n.pitch =>
            {
                prev.duration_ticks = prev.duration_ticks.max(n.duration_ticks);
            }
            _ => deduped.push(n),
        }
    }
    QuantizedScore::from_notes(tempo_bpm, deduped)
}

/// Round-half-up integer division.
fn round_div(num: u64, den: u64) -> u64 {
    (num + den / 2) / den
}

fn push_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (value & 0x7f) as u8;
        value >>= 7;
        n += 1;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        let mut b = buf[i];
        if i > 0 {
            b |= 0x80;
        }
        out.push(b);
    }
}

/// Serializes a score as an SMF format 1 file.
///
/// Output is deterministic: a fixed score yields identical bytes.
pub fn write_midi(score: &QuantizedScore) -> Result<Vec<u8>> {
    score.validate()?;
    let instruments = score.instruments_present();

    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(1 + instruments.len() as u16).to_be_bytes());
    out.extend_from_slice(&(WRITE_PPQN as u16).to_be_bytes());

    // Tempo track.
    let us_per_quarter = (60_000_000.0 / score.tempo_bpm).round() as u32;
    let mut tempo_track = Vec::new();
    push_vlq(&mut tempo_track, 0);
    tempo_track.extend_from_slice(&[0xff, 0x51, 0x03]);
    tempo_track.extend_from_slice(&us_per_quarter.to_be_bytes()[1..]);
    push_vlq(&mut tempo_track, 0);
    tempo_track.extend_from_slice(&[0xff, 0x2f, 0x00]);
    push_track(&mut out, &tempo_track);

    let smf_per_grid = u64::from(WRITE_PPQN) / GRID_PER_QUARTER;
    for inst in instruments {
        let channel = write_channel(inst);
        // (tick, on_after_off, pitch, is_on) events in deterministic order.
        let mut events: Vec<(u64, u8, u8)> = Vec::new();
        for n in score.notes.iter().filter(|n| n.instrument == inst) {
            let on = u64::from(n.onset_tick) * smf_per_grid;
            let off = u64::from(n.onset_tick + n.duration_ticks) * smf_per_grid;
            events.push((on, 1, n.pitch));
            events.push((off, 0, n.pitch));
        }
        // Note-offs sort before note-ons at the same tick so re-struck pitches pair up.
        events.sort_by_key(|&(tick, kind, pitch)| (tick, kind, pitch));

        let mut track = Vec::new();
        if inst != Instrument::Drums {
            push_vlq(&mut track, 0);
            track.push(0xc0 | channel);
            track.push(instrument_to_program(inst));
        }
        let mut last_tick = 0u64;
        for (tick, kind, pitch) in events {
            push_vlq(&mut track, (tick - last_tick) as u32);
            last_tick = tick;
            if kind == 1 {
                track.push(0x90 | channel);
                track.push(pitch);
                track.push(WRITE_VELOCITY);
            } else {
                track.push(0x80 | channel);
                track.push(pitch);
                track.push(0);
            }
        }
        push_vlq(&mut track, 0);
        track.extend_from_slice(&[0xff, 0x2f, 0x00]);
        push_track(&mut out, &track);
    }
    Ok(out)
}

fn push_track(out: &mut Vec<u8>, payload: &[u8]) {
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-built single-track SMF: one note on the given channel.
    fn single_note_smf(ppqn: u16, channel: u8, pitch: u8, onset: u32, dur: u32, program: Option<u8>) -> Vec<u8> {
        let mut track = Vec::new();
        if let Some(p) = program {
            push_vlq(&mut track, 0);
            track.push(0xc0 | channel);
            track.push(p);
        }
        push_vlq(&mut track, onset);
        track.push(0x90 | channel);
        track.push(pitch);
        track.push(100);
        push_vlq(&mut track, dur);
        track.push(0x80 | channel);
        track.push(pitch);
        track.push(0);
        push_vlq(&mut track, 0);
        track.extend_from_slice(&[0xff, 0x2f, 0x00]);

        let mut out = Vec::new();
        out.extend_from_slice(b"MThd");
        out.extend_from_slice(&6u32.to_be_bytes());
        out.extend_from_slice(&0u16.to_be_bytes());
        out.extend_from_slice(&1u16.to_be_bytes());
        out.extend_from_slice(&ppqn.to_be_bytes());
        push_track(&mut out, &track);
        out
    }

    #[test]
    fn parses_single_piano_note() {
        // One beat = one quarter note = 4 grid ticks; onset at beat 0, length 1 beat.
        let bytes = single_note_smf(480, 0, 60, 0, 480, Some(0));
        let score = parse_midi(&bytes).unwrap();
        assert_eq!(score.tempo_bpm, 120.0);
        assert_eq!(
            score.notes,
            vec![NoteEvent::new(60, 0, 4, Instrument::Piano)]
        );
        assert_eq!(score.n_bars, 1);
    }

    #[test]
    fn empty_smf_is_empty_score_error() {
        let mut out = Vec::new();
        out.extend_from_slice(b"MThd");
        out.extend_from_slice(&6u32.to_be_bytes());
        out.extend_from_slice(&0u16.to_be_bytes());
        out.extend_from_slice(&1u16.to_be_bytes());
        out.extend_from_slice(&480u16.to_be_bytes());
        let track = {
            let mut t = Vec::new();
            push_vlq(&mut t, 0);
            t.extend_from_slice(&[0xff, 0x2f, 0x00]);
            t
        };
        push_track(&mut out, &track);
        assert!(matches!(parse_midi(&out), Err(Error::EmptyScore)));
    }

    #[test]
    fn channel_ten_is_drums_regardless_of_program() {
        let bytes = single_note_smf(480, 9, 36, 0, 120, Some(25));
        let score = parse_midi(&bytes).unwrap();
        assert_eq!(score.notes[0].instrument, Instrument::Drums);
    }

    #[test]
    fn program_ranges_map_to_categories() {
        for (program, want) in [
            (3u8, Instrument::Piano),
            (26, Instrument::Guitar),
            (33, Instrument::Bass),
            (48, Instrument::Strings),
            (70, Instrument::Piano),
        ] {
            let bytes = single_note_smf(480, 0, 60, 0, 480, Some(program));
            let score = parse_midi(&bytes).unwrap();
            assert_eq!(score.notes[0].instrument, want, "program {program}");
        }
    }

    #[test]
    fn malformed_header_reports_offset() {
        let err = parse_midi(b"MThx\x00\x00\x00\x06").unwrap_err();
        match err {
            Error::MidiParse { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn first_tempo_event_wins() {
        let mut track = Vec::new();
        push_vlq(&mut track, 0);
        track.extend_from_slice(&[0xff, 0x51, 0x03, 0x0a, 0x2c, 0x2a]); // 666666 us -> 90 bpm
        push_vlq(&mut track, 0);
        track.push(0x90);
        track.push(60);
        track.push(90);
        push_vlq(&mut track, 480);
        // Later tempo event must be ignored.
        track.extend_from_slice(&[0xff, 0x51, 0x03, 0x07, 0xa1, 0x20]); // 500000 us -> 120 bpm
        push_vlq(&mut track, 0);
        track.push(0x80);
        track.push(60);
        track.push(0);
        push_vlq(&mut track, 0);
        track.extend_from_slice(&[0xff, 0x2f, 0x00]);
        let mut out = Vec::new();
        out.extend_from_slice(b"MThd");
        out.extend_from_slice(&6u32.to_be_bytes());
        out.extend_from_slice(&0u16.to_be_bytes());
        out.extend_from_slice(&1u16.to_be_bytes());
        out.extend_from_slice(&480u16.to_be_bytes());
        push_track(&mut out, &track);
        let score = parse_midi(&out).unwrap();
        assert!((score.tempo_bpm - 60_000_000.0 / 666_666.0).abs() < 1e-9);
    }

    #[test]
    fn tempo_90_encodes_rounded_microseconds() {
        let score = QuantizedScore::from_notes(
            90.0,
            vec![NoteEvent::new(60, 0, 4, Instrument::Piano)],
        )
        .unwrap();
        let bytes = write_midi(&score).unwrap();
        // 60e6 / 90 = 666666.7 -> 666667 = 0x0a2c2b
        let pos = bytes
            .windows(3)
            .position(|w| w == [0xff, 0x51, 0x03])
            .unwrap();
        assert_eq!(&bytes[pos + 3..pos + 6], &[0x0a, 0x2c, 0x2b]);
    }

    #[test]
    fn drums_only_score_writes_one_note_track_on_channel_ten() {
        let score = QuantizedScore::from_notes(
            120.0,
            vec![NoteEvent::new(36, 0, 1, Instrument::Drums)],
        )
        .unwrap();
        let bytes = write_midi(&score).unwrap();
        // Format 1, two tracks total: tempo + one drum track.
        assert_eq!(&bytes[8..10], &1u16.to_be_bytes());
        assert_eq!(&bytes[10..12], &2u16.to_be_bytes());
        // The note-on must be on channel 10 (status 0x99).
        assert!(bytes.windows(3).any(|w| w == [0x99, 36, WRITE_VELOCITY]));
    }

    #[test]
    fn roundtrip_simple_score() {
        let score = QuantizedScore::from_notes(
            120.0,
            vec![
                NoteEvent::new(60, 0, 4, Instrument::Piano),
                NoteEvent::new(64, 0, 4, Instrument::Piano),
                NoteEvent::new(36, 4, 2, Instrument::Drums),
                NoteEvent::new(40, 18, 8, Instrument::Strings),
            ],
        )
        .unwrap();
        let bytes = write_midi(&score).unwrap();
        let parsed = parse_midi(&bytes).unwrap();
        assert_eq!(parsed, score);
    }

    #[test]
    fn quantization_is_idempotent_on_grid_aligned_input() {
        let score = QuantizedScore::from_notes(
            120.0,
            vec![NoteEvent::new(60, 5, 3, Instrument::Guitar)],
        )
        .unwrap();
        let once = parse_midi(&write_midi(&score).unwrap()).unwrap();
        let twice = parse_midi(&write_midi(&once).unwrap()).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once, score);
    }

    #[test]
    fn duplicate_notes_keep_longer_duration() {
        // Same pitch at the same onset in two tracks, different lengths.
        let mut out = Vec::new();
        out.extend_from_slice(b"MThd");
        out.extend_from_slice(&6u32.to_be_bytes());
        out.extend_from_slice(&1u16.to_be_bytes());
        out.extend_from_slice(&2u16.to_be_bytes());
        out.extend_from_slice(&480u16.to_be_bytes());
        for dur in [240u32, 480] {
            let mut t = Vec::new();
            push_vlq(&mut t, 0);
            t.push(0x90);
            t.push(60);
            t.push(100);
            push_vlq(&mut t, dur);
            t.push(0x80);
            t.push(60);
            t.push(0);
            push_vlq(&mut t, 0);
            t.extend_from_slice(&[0xff, 0x2f, 0x00]);
            push_track(&mut out, &t);
        }
        let score = parse_midi(&out).unwrap();
        assert_eq!(score.notes.len(), 1);
        assert_eq!(score.notes[0].duration_ticks, 4);
    }
}
