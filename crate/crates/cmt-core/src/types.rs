//! Core domain types shared across the crate: instruments, genres, notes and
//! the quantized multi-track score they live in.
//!
//! Time is measured on a fixed grid of 16 ticks per bar (4 ticks per beat,
//! 4 beats per bar); a tick is the shortest representable unit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ticks per bar on the quantization grid.
pub const TICKS_PER_BAR: u32 = 16;
/// Ticks per beat (a tick is a quarter beat).
pub const TICKS_PER_BEAT: u32 = 4;
/// Beats per bar.
pub const BEATS_PER_BAR: u32 = 4;
/// Maximum note duration in ticks kept by the token vocabulary (two bars).
pub const MAX_DURATION_TICKS: u32 = 32;
/// Maximum strength (notes per tick) kept by the token vocabulary.
pub const MAX_STRENGTH: u32 = 20;

/// The five canonical instrument categories tracks are merged into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Instrument {
    Drums,
    Piano,
    Guitar,
    Bass,
    Strings,
}

impl Instrument {
    pub const ALL: [Instrument; 5] = [
        Instrument::Drums,
        Instrument::Piano,
        Instrument::Guitar,
        Instrument::Bass,
        Instrument::Strings,
    ];

    pub fn index(self) -> usize {
        match self {
            Instrument::Drums => 0,
            Instrument::Piano => 1,
            Instrument::Guitar => 2,
            Instrument::Bass => 3,
            Instrument::Strings => 4,
        }
    }

    pub fn from_index(i: usize) -> Option<Instrument> {
        Instrument::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Instrument::Drums => "Drums",
            Instrument::Piano => "Piano",
            Instrument::Guitar => "Guitar",
            Instrument::Bass => "Bass",
            Instrument::Strings => "Strings",
        }
    }

    pub fn parse(s: &str) -> Option<Instrument> {
        Instrument::ALL
            .iter()
            .copied()
            .find(|inst| inst.name().eq_ignore_ascii_case(s))
    }
}

/// The six music genres used for the genre initial token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Genre {
    Country,
    Dance,
    Electronic,
    Metal,
    Pop,
    Rock,
}

impl Genre {
    pub const ALL: [Genre; 6] = [
        Genre::Country,
        Genre::Dance,
        Genre::Electronic,
        Genre::Metal,
        Genre::Pop,
        Genre::Rock,
    ];

    pub fn index(self) -> usize {
        match self {
            Genre::Country => 0,
            Genre::Dance => 1,
            Genre::Electronic => 2,
            Genre::Metal => 3,
            Genre::Pop => 4,
            Genre::Rock => 5,
        }
    }

    pub fn from_index(i: usize) -> Option<Genre> {
        Genre::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Genre::Country => "Country",
            Genre::Dance => "Dance",
            Genre::Electronic => "Electronic",
            Genre::Metal => "Metal",
            Genre::Pop => "Pop",
            Genre::Rock => "Rock",
        }
    }

    pub fn parse(s: &str) -> Option<Genre> {
        Genre::ALL
            .iter()
            .copied()
            .find(|g| g.name().eq_ignore_ascii_case(s))
    }
}

/// A single quantized note.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NoteEvent {
    /// Global tick index; 16 ticks = 1 bar.
    pub onset_tick: u32,
    pub instrument: Instrument,
    /// MIDI pitch 0-127.
    pub pitch: u8,
    /// Length in ticks, at least 1.
    pub duration_ticks: u32,
}

impl NoteEvent {
    pub fn new(pitch: u8, onset_tick: u32, duration_ticks: u32, instrument: Instrument) -> Self {
        NoteEvent {
            onset_tick,
            instrument,
            pitch,
            duration_ticks,
        }
    }

    pub fn bar(&self) -> u32 {
        self.onset_tick / TICKS_PER_BAR
    }

    /// Tick position within the bar, 1-based (1..=16).
    pub fn tick_in_bar(&self) -> u32 {
        self.onset_tick % TICKS_PER_BAR + 1
    }
}

/// Tempo-annotated multi-track note list on the 16-ticks-per-bar grid.
///
/// Notes are kept sorted by `(onset_tick, instrument, pitch, duration_ticks)`;
/// the sort order is total, so equal scores compare equal structurally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedScore {
    pub tempo_bpm: f64,
    pub notes: Vec<NoteEvent>,
    pub n_bars: u32,
}

impl QuantizedScore {
    /// Builds a score from unordered notes, sorting them canonically and
    /// deriving `n_bars` from the last onset.
    pub fn from_notes(tempo_bpm: f64, mut notes: Vec<NoteEvent>) -> Result<QuantizedScore> {
        if notes.is_empty() {
            return Err(Error::EmptyScore);
        }
        sort_notes(&mut notes);
        let last_onset = notes.iter().map(|n| n.onset_tick).max().unwrap();
        let score = QuantizedScore {
            tempo_bpm,
            notes,
            n_bars: last_onset / TICKS_PER_BAR + 1,
        };
        score.validate()?;
        Ok(score)
    }

    /// Checks every structural invariant; cheap enough to call at boundaries.
    pub fn validate(&self) -> Result<()> {
        if !(self.tempo_bpm.is_finite() && self.tempo_bpm > 0.0) {
            return Err(Error::InvalidScore(format!(
                "tempo must be positive, got {}",
                self.tempo_bpm
            )));
        }
        if self.n_bars == 0 {
            return Err(Error::InvalidScore("n_bars must be positive".into()));
        }
        if self.notes.is_empty() {
            return Err(Error::EmptyScore);
        }
        let limit = TICKS_PER_BAR * self.n_bars;
        for (i, n) in self.notes.iter().enumerate() {
            if n.pitch > 127 {
                return Err(Error::InvalidScore(format!("note {i}: pitch {} > 127", n.pitch)));
            }
            if n.duration_ticks == 0 {
                return Err(Error::InvalidScore(format!("note {i}: zero duration")));
            }
            if n.onset_tick >= limit {
                return Err(Error::InvalidScore(format!(
                    "note {i}: onset {} beyond {} bars",
                    n.onset_tick, self.n_bars
                )));
            }
        }
        if !self.notes.windows(2).all(|w| note_key(&w[0]) <= note_key(&w[1])) {
            return Err(Error::InvalidScore("notes not in canonical order".into()));
        }
        Ok(())
    }

    /// The set of instruments that actually appear, in index order.
    pub fn instruments_present(&self) -> Vec<Instrument> {
        let mut present = [false; 5];
        for n in &self.notes {
            present[n.instrument.index()] = true;
        }
        Instrument::ALL
            .iter()
            .copied()
            .filter(|i| present[i.index()])
            .collect()
    }

    /// Total length in beats (bars are always 4 beats).
    pub fn beats(&self) -> u32 {
        self.n_bars * BEATS_PER_BAR
    }
}

pub(crate) fn note_key(n: &NoteEvent) -> (u32, usize, u8, u32) {
    (n.onset_tick, n.instrument.index(), n.pitch, n.duration_ticks)
}

pub(crate) fn sort_notes(notes: &mut [NoteEvent]) {
    notes.sort_by_key(note_key);
}
