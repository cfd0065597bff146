//! Compound-word token representation.
//!
//! A score becomes a sequence of 7-attribute tokens split into a rhythm-
//! related group (beat position, density, strength) and a note-related group
//! (instrument, pitch, duration); the `type` attribute distinguishes them and
//! attributes of the other group are `None`. The sequence is prefixed by one
//! genre and 1-5 instrument initial tokens and terminated by a single EOS.
//!
//! Per bar the stream is: one bar token carrying the bar's simu-note density,
//! then for each occupied tick (ascending) one tick token carrying the
//! remaining-occupied-tick count (decrementing to 1) and the tick's strength,
//! followed by that tick's note tokens sorted by (instrument, pitch, duration).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    Genre, Instrument, NoteEvent, QuantizedScore, MAX_DURATION_TICKS, MAX_STRENGTH, TICKS_PER_BAR,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenType {
    Rhythm,
    Note,
    Eos,
}

/// Beat-position attribute of a rhythm token: a bar line or a 1-based tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BeatPos {
    Bar,
    Tick(u8),
}

impl fmt::Display for BeatPos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BeatPos::Bar => write!(f, "Bar"),
            BeatPos::Tick(j) => write!(f, "Tick_{j}"),
        }
    }
}

/// One element of the modeled sequence, bundling all 7 attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CompoundToken {
    pub ttype: TokenType,
    pub beat: Option<BeatPos>,
    /// On a bar token: the bar's full density. On a tick token: occupied
    /// ticks remaining in the bar including this one.
    pub density: Option<u8>,
    pub strength: Option<u8>,
    pub instrument: Option<Instrument>,
    pub pitch: Option<u8>,
    pub duration: Option<u8>,
}

impl CompoundToken {
    pub fn bar(density: u8) -> Self {
        CompoundToken {
            ttype: TokenType::Rhythm,
            beat: Some(BeatPos::Bar),
            density: Some(density),
            strength: None,
            instrument: None,
            pitch: None,
            duration: None,
        }
    }

    pub fn tick(tick_in_bar: u8, remaining_density: u8, strength: u8) -> Self {
        CompoundToken {
            ttype: TokenType::Rhythm,
            beat: Some(BeatPos::Tick(tick_in_bar)),
            density: Some(remaining_density),
            strength: Some(strength),
            instrument: None,
            pitch: None,
            duration: None,
        }
    }

    pub fn note(instrument: Instrument, pitch: u8, duration: u8) -> Self {
        CompoundToken {
            ttype: TokenType::Note,
            beat: None,
            density: None,
            strength: None,
            instrument: Some(instrument),
            pitch: Some(pitch),
            duration: Some(duration),
        }
    }

    pub fn eos() -> Self {
        CompoundToken {
            ttype: TokenType::Eos,
            beat: None,
            density: None,
            strength: None,
            instrument: None,
            pitch: None,
            duration: None,
        }
    }

    pub fn is_bar(&self) -> bool {
        self.ttype == TokenType::Rhythm && self.beat == Some(BeatPos::Bar)
    }

    pub fn is_tick(&self) -> bool {
        matches!(
            (self.ttype, self.beat),
            (TokenType::Rhythm, Some(BeatPos::Tick(_)))
        )
    }
}

/// Genre/instrument conditioning token preceding the compound-token body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InitialToken {
    Genre(Genre),
    Instrument(Instrument),
}

/// A full modeled sequence: initial-token prefix plus compound-token body
/// ending in exactly one EOS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub prefix: Vec<InitialToken>,
    pub body: Vec<CompoundToken>,
}

impl TokenSequence {
    pub fn genre(&self) -> Option<Genre> {
        self.prefix.iter().find_map(|t| match t {
            InitialToken::Genre(g) => Some(*g),
            InitialToken::Instrument(_) => None,
        })
    }

    pub fn instruments(&self) -> Vec<Instrument> {
        self.prefix
            .iter()
            .filter_map(|t| match t {
                InitialToken::Instrument(i) => Some(*i),
                InitialToken::Genre(_) => None,
            })
            .collect()
    }
}

/// A group of notes sharing one onset at (bar, tick, instrument).
#[derive(Debug, Clone, PartialEq)]
pub struct SimuNote {
    pub bar: u32,
    /// 1-based tick within the bar (1..=16).
    pub tick_in_bar: u8,
    pub instrument: Instrument,
    pub notes: Vec<NoteEvent>,
}

/// Partitions the score's notes into simu-notes keyed by (bar, tick,
/// instrument), in that key order.
pub fn group_simu_notes(score: &QuantizedScore) -> Vec<SimuNote> {
    let mut groups: BTreeMap<(u32, u8, usize), Vec<NoteEvent>> = BTreeMap::new();
    for n in &score.notes {
        let key = (n.bar(), n.tick_in_bar() as u8, n.instrument.index());
        groups.entry(key).or_default().push(*n);
    }
    groups
        .into_iter()
        .map(|((bar, tick_in_bar, inst), notes)| SimuNote {
            bar,
            tick_in_bar,
            instrument: Instrument::from_index(inst).unwrap(),
            notes,
        })
        .collect()
}

/// Occupied ticks of a bar (any instrument), ascending 1-based positions.
fn occupied_ticks(score: &QuantizedScore, bar: u32) -> Vec<u8> {
    let mut occ = [false; TICKS_PER_BAR as usize];
    for n in &score.notes {
        if n.bar() == bar {
            occ[(n.tick_in_bar() - 1) as usize] = true;
        }
    }
    (0..TICKS_PER_BAR as usize)
        .filter(|&j| occ[j])
        .map(|j| (j + 1) as u8)
        .collect()
}

/// Simu-note density of a bar: the number of distinct ticks occupied by at
/// least one simu-note of any instrument.
pub fn bar_density(score: &QuantizedScore, bar: u32) -> Result<u32> {
    if bar >= score.n_bars {
        return Err(Error::InvalidArgument(format!(
            "bar {bar} out of range (n_bars = {})",
            score.n_bars
        )));
    }
    Ok(occupied_ticks(score, bar).len() as u32)
}

/// Total note count across all instruments at (bar, tick), clipped to 20.
/// Unoccupied ticks yield 0.
pub fn tick_strength(score: &QuantizedScore, bar: u32, tick_in_bar: u8) -> u32 {
    let count = score
        .notes
        .iter()
        .filter(|n| n.bar() == bar && n.tick_in_bar() as u8 == tick_in_bar)
        .count() as u32;
    count.min(MAX_STRENGTH)
}

/// Encodes a score into the compound-token sequence.
///
/// `instruments` must equal the set of instruments actually present.
pub fn encode(
    score: &QuantizedScore,
    genre: Genre,
    instruments: &[Instrument],
) -> Result<TokenSequence> {
    score.validate()?;
    let present = score.instruments_present();
    let mut given: Vec<Instrument> = instruments.to_vec();
    given.sort_by_key(|i| i.index());
    given.dedup();
    if given != present {
        return Err(Error::InvalidArgument(format!(
            "instrument list {:?} does not match instruments present {:?}",
            given, present
        )));
    }

    let mut prefix = vec![InitialToken::Genre(genre)];
    prefix.extend(present.iter().map(|&i| InitialToken::Instrument(i)));

    let mut body = Vec::new();
    for bar in 0..score.n_bars {
        let ticks = occupied_ticks(score, bar);
        body.push(CompoundToken::bar(ticks.len() as u8));
        let mut remaining = ticks.len() as u8;
        for j in ticks {
            let strength = tick_strength(score, bar, j) as u8;
            body.push(CompoundToken::tick(j, remaining, strength));
            remaining -= 1;
            let mut notes: Vec<&NoteEvent> = score
                .notes
                .iter()
                .filter(|n| n.bar() == bar && n.tick_in_bar() as u8 == j)
                .collect();
            notes.sort_by_key(|n| (n.instrument.index(), n.pitch, n.duration_ticks));
            for n in notes.iter().take(MAX_STRENGTH as usize) {
                let duration = n.duration_ticks.min(MAX_DURATION_TICKS) as u8;
                body.push(CompoundToken::note(n.instrument, n.pitch, duration));
            }
        }
    }
    body.push(CompoundToken::eos());
    Ok(TokenSequence { prefix, body })
}

/// How strictly `decode` treats count/claim mismatches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// Any grammar violation is an error.
    Strict,
    /// Reconstruct from the note tokens actually present; density/strength
    /// claims are ignored when they disagree.
    Tolerant,
}

/// Inverse of `encode`. The token format carries no tempo, so the target
/// tempo is a parameter (the CLI defaults it to 120).
pub fn decode(tokens: &TokenSequence, tempo_bpm: f64, mode: DecodeMode) -> Result<QuantizedScore> {
    if mode == DecodeMode::Strict {
        let report = validate(tokens);
        if let Some(v) = report.violations.first() {
            return Err(Error::Grammar {
                index: v.index,
                message: v.message.clone(),
            });
        }
    }

    let mut notes: Vec<NoteEvent> = Vec::new();
    let mut bar: Option<u32> = None;
    let mut bar_count: u32 = 0;
    let mut tick: Option<u8> = None;
    for (idx, tok) in tokens.body.iter().enumerate() {
        match tok.ttype {
            TokenType::Rhythm => match tok.beat {
                Some(BeatPos::Bar) => {
                    bar = Some(bar_count);
                    bar_count += 1;
                    tick = None;
                }
                Some(BeatPos::Tick(j)) => {
                    if bar.is_none() {
                        return Err(Error::Grammar {
                            index: idx,
                            message: "tick token before any bar token".into(),
                        });
                    }
                    tick = Some(j);
                }
                None => {
                    return Err(Error::Grammar {
                        index: idx,
                        message: "rhythm token without beat position".into(),
                    })
                }
            },
            TokenType::Note => {
                let (Some(b), Some(j)) = (bar, tick) else {
                    if mode == DecodeMode::Tolerant {
                        continue;
                    }
                    return Err(Error::Grammar {
                        index: idx,
                        message: "note token before any rhythm token".into(),
                    });
                };
                let (Some(inst), Some(pitch), Some(dur)) = (tok.instrument, tok.pitch, tok.duration)
                else {
                    if mode == DecodeMode::Tolerant {
                        continue;
                    }
                    return Err(Error::Grammar {
                        index: idx,
                        message: "note token with missing attributes".into(),
                    });
                };
                notes.push(NoteEvent::new(
                    pitch,
                    b * TICKS_PER_BAR + u32::from(j) - 1,
                    u32::from(dur),
                    inst,
                ));
            }
            TokenType::Eos => break,
        }
    }
    if notes.is_empty() {
        return Err(Error::EmptyScore);
    }
    let mut score = QuantizedScore::from_notes(tempo_bpm, notes)?;
    // Trailing empty bars still count toward the piece length.
    score.n_bars = score.n_bars.max(bar_count);
    Ok(score)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    /// Malformed genre/instrument prefix.
    Prefix,
    /// Missing, duplicated or misplaced EOS.
    Eos,
    /// Attribute present/absent against the type's None pattern.
    Pattern,
    /// Attribute value outside its vocabulary range.
    Range,
    /// Note before any rhythm token, or tick before any bar token.
    Structure,
    /// Tick positions not strictly increasing within a bar.
    BeatOrder,
    /// Bar density disagrees with the number of tick tokens.
    DensityCount,
    /// Tick remaining-density fields not decrementing to 1.
    DensityMonotonic,
    /// Tick strength disagrees with the following note-token count.
    StrengthCount,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Body index of the offending token (prefix issues use index 0).
    pub index: usize,
    pub kind: ViolationKind,
    pub message: String,
}

/// Report listing every grammar violation found; empty iff the sequence is valid.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn flag(&mut self, index: usize, kind: ViolationKind, message: String) {
        self.violations.push(Violation { index, kind, message });
    }
}

/// Checks the full token grammar: prefix shape, per-type None patterns,
/// attribute ranges, beat ordering, density monotonicity and bar-density /
/// strength count agreement.
pub fn validate(tokens: &TokenSequence) -> ValidationReport {
    let mut report = ValidationReport::default();

    // Prefix: exactly one genre first, then 1-5 distinct instruments.
    let genres = tokens
        .prefix
        .iter()
        .filter(|t| matches!(t, InitialToken::Genre(_)))
        .count();
    let instruments = tokens.instruments();
    if genres != 1 || !matches!(tokens.prefix.first(), Some(InitialToken::Genre(_))) {
        report.flag(0, ViolationKind::Prefix, "prefix must start with exactly one genre token".into());
    }
    if instruments.is_empty() || instruments.len() > 5 {
        report.flag(
            0,
            ViolationKind::Prefix,
            format!("prefix must list 1-5 instruments, found {}", instruments.len()),
        );
    } else {
        let mut dedup = instruments.clone();
        dedup.sort_by_key(|i| i.index());
        dedup.dedup();
        if dedup.len() != instruments.len() {
            report.flag(0, ViolationKind::Prefix, "duplicate instrument token in prefix".into());
        }
    }

    // EOS: exactly one, as the final body token.
    let eos_count = tokens.body.iter().filter(|t| t.ttype == TokenType::Eos).count();
    if eos_count != 1 || tokens.body.last().map(|t| t.ttype) != Some(TokenType::Eos) {
        report.flag(
            tokens.body.len().saturating_sub(1),
            ViolationKind::Eos,
            format!("body must end in exactly one EOS (found {eos_count})"),
        );
    }

    // Attribute patterns and ranges.
    for (idx, tok) in tokens.body.iter().enumerate() {
        match tok.ttype {
            TokenType::Rhythm => {
                if tok.instrument.is_some() || tok.pitch.is_some() || tok.duration.is_some() {
                    report.flag(idx, ViolationKind::Pattern, "rhythm token carries note attributes".into());
                }
                match tok.beat {
                    None => report.flag(idx, ViolationKind::Pattern, "rhythm token without beat position".into()),
                    Some(BeatPos::Bar) => {
                        if tok.strength.is_some() {
                            report.flag(idx, ViolationKind::Pattern, "bar token carries strength".into());
                        }
                        match tok.density {
                            None => report.flag(idx, ViolationKind::Pattern, "bar token without density".into()),
                            Some(d) if d > TICKS_PER_BAR as u8 => {
                                report.flag(idx, ViolationKind::Range, format!("bar density {d} > 16"))
                            }
                            _ => {}
                        }
                    }
                    Some(BeatPos::Tick(j)) => {
                        if !(1..=TICKS_PER_BAR as u8).contains(&j) {
                            report.flag(idx, ViolationKind::Range, format!("tick position {j} outside 1..=16"));
                        }
                        match tok.strength {
                            None => report.flag(idx, ViolationKind::Pattern, "tick token without strength".into()),
                            Some(s) if s == 0 || s > MAX_STRENGTH as u8 => {
                                report.flag(idx, ViolationKind::Range, format!("tick strength {s} outside 1..=20"))
                            }
                            _ => {}
                        }
                        if tok.density.is_none() {
                            report.flag(idx, ViolationKind::Pattern, "tick token without remaining density".into());
                        }
                    }
                }
            }
            TokenType::Note => {
                if tok.beat.is_some() || tok.density.is_some() || tok.strength.is_some() {
                    report.flag(idx, ViolationKind::Pattern, "note token carries rhythm attributes".into());
                }
                match (tok.instrument, tok.pitch, tok.duration) {
                    (Some(_), Some(p), Some(d)) => {
                        if p > 127 {
                            report.flag(idx, ViolationKind::Range, format!("pitch {p} > 127"));
                        }
                        if d == 0 || d > MAX_DURATION_TICKS as u8 {
                            report.flag(idx, ViolationKind::Range, format!("duration {d} outside 1..=32"));
                        }
                    }
                    _ => report.flag(idx, ViolationKind::Pattern, "note token with missing attributes".into()),
                }
            }
            TokenType::Eos => {
                if tok.beat.is_some()
                    || tok.density.is_some()
                    || tok.strength.is_some()
                    || tok.instrument.is_some()
                    || tok.pitch.is_some()
                    || tok.duration.is_some()
                {
                    report.flag(idx, ViolationKind::Pattern, "EOS token must have all attributes None".into());
                }
            }
        }
    }

    // Structural counts: walk bars and ticks.
    let mut bar_start: Option<(usize, u8)> = None; // (index, claimed density)
    let mut ticks_in_bar: Vec<(usize, u8, u8, u8)> = Vec::new(); // (index, pos, remaining, strength)
    let mut notes_after_tick: usize = 0;
    let mut current_tick: Option<usize> = None; // index of open tick token

    let close_tick = |current_tick: &mut Option<usize>,
                          notes_after_tick: &mut usize,
                          ticks_in_bar: &[(usize, u8, u8, u8)],
                          report: &mut ValidationReport| {
        if let Some(ti) = current_tick.take() {
            let claimed = ticks_in_bar.last().map(|t| t.3).unwrap_or(0);
            if usize::from(claimed) != *notes_after_tick {
                report.violations.push(Violation {
                    index: ti,
                    kind: ViolationKind::StrengthCount,
                    message: format!(
                        "tick strength {claimed} disagrees with {} following note tokens",
                        notes_after_tick
                    ),
                });
            }
        }
        *notes_after_tick = 0;
    };
    let close_bar = |bar_start: &mut Option<(usize, u8)>,
                         ticks_in_bar: &mut Vec<(usize, u8, u8, u8)>,
                         report: &mut ValidationReport| {
        if let Some((bi, claimed)) = bar_start.take() {
            if usize::from(claimed) != ticks_in_bar.len() {
                report.violations.push(Violation {
                    index: bi,
                    kind: ViolationKind::DensityCount,
                    message: format!(
                        "bar density {claimed} disagrees with {} tick tokens",
                        ticks_in_bar.len()
                    ),
                });
            }
            // Remaining-count densities must decrement by one and end at 1.
            let n = ticks_in_bar.len() as u8;
            for (k, &(ti, _, remaining, _)) in ticks_in_bar.iter().enumerate() {
                let expected = n - k as u8;
                if remaining != expected {
                    report.violations.push(Violation {
                        index: ti,
                        kind: ViolationKind::DensityMonotonic,
                        message: format!(
                            "tick remaining density {remaining}, expected {expected}"
                        ),
                    });
                }
            }
            let mut last = 0u8;
            for &(ti, pos, _, _) in ticks_in_bar.iter() {
                if pos <= last {
                    report.violations.push(Violation {
                        index: ti,
                        kind: ViolationKind::BeatOrder,
                        message: format!("tick position {pos} not after previous {last}"),
                    });
                }
                last = pos;
            }
        }
        ticks_in_bar.clear();
    };

    for (idx, tok) in tokens.body.iter().enumerate() {
        match (tok.ttype, tok.beat) {
            (TokenType::Rhythm, Some(BeatPos::Bar)) => {
                close_tick(&mut current_tick, &mut notes_after_tick, &ticks_in_bar, &mut report);
                close_bar(&mut bar_start, &mut ticks_in_bar, &mut report);
                bar_start = Some((idx, tok.density.unwrap_or(0)));
            }
            (TokenType::Rhythm, Some(BeatPos::Tick(j))) => {
                close_tick(&mut current_tick, &mut notes_after_tick, &ticks_in_bar, &mut report);
                if bar_start.is_none() {
                    report.flag(idx, ViolationKind::Structure, "tick token before any bar token".into());
                    continue;
                }
                ticks_in_bar.push((idx, j, tok.density.unwrap_or(0), tok.strength.unwrap_or(0)));
                current_tick = Some(idx);
            }
            (TokenType::Note, _) => {
                if bar_start.is_none() || current_tick.is_none() {
                    report.flag(idx, ViolationKind::Structure, "note token before any rhythm token".into());
                } else {
                    notes_after_tick += 1;
                }
            }
            (TokenType::Eos, _) => {
                close_tick(&mut current_tick, &mut notes_after_tick, &ticks_in_bar, &mut report);
                close_bar(&mut bar_start, &mut ticks_in_bar, &mut report);
            }
            (TokenType::Rhythm, None) => {}
        }
    }
    close_tick(&mut current_tick, &mut notes_after_tick, &ticks_in_bar, &mut report);
    close_bar(&mut bar_start, &mut ticks_in_bar, &mut report);

    report.violations.sort_by_key(|v| v.index);
    report
}

// ---------------------------------------------------------------------------
// Line-oriented text serialization (.cwt)
// ---------------------------------------------------------------------------

fn field_opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "_".to_string())
}

/// Serializes a token sequence to the `.cwt` line format: prefix lines
/// `GENRE <name>` / `INSTR <name>`, then one token per line as
/// `TYPE beat density strength instrument pitch duration` with `_` for None.
pub fn to_cwt(tokens: &TokenSequence) -> String {
    let mut out = String::new();
    for t in &tokens.prefix {
        match t {
            InitialToken::Genre(g) => out.push_str(&format!("GENRE {}\n", g.name())),
            InitialToken::Instrument(i) => out.push_str(&format!("INSTR {}\n", i.name())),
        }
    }
    for t in &tokens.body {
        let ty = match t.ttype {
            TokenType::Rhythm => "RHYTHM",
            TokenType::Note => "NOTE",
            TokenType::Eos => "EOS",
        };
        out.push_str(&format!(
            "{} {} {} {} {} {} {}\n",
            ty,
            field_opt(t.beat),
            field_opt(t.density),
            field_opt(t.strength),
            field_opt(t.instrument.map(|i| i.name().to_string())),
            field_opt(t.pitch),
            field_opt(t.duration),
        ));
    }
    out
}

fn text_err(line: usize, message: impl Into<String>) -> Error {
    Error::TokenText {
        line,
        message: message.into(),
    }
}

fn parse_opt<T, F: Fn(&str) -> Option<T>>(s: &str, f: F, line: usize, what: &str) -> Result<Option<T>> {
    if s == "_" {
        return Ok(None);
    }
    f(s).map(Some)
        .ok_or_else(|| text_err(line, format!("bad {what} field '{s}'")))
}

/// Parses the `.cwt` line format back into a token sequence.
pub fn from_cwt(text: &str) -> Result<TokenSequence> {
    let mut prefix = Vec::new();
    let mut body = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        match fields[0] {
            "GENRE" => {
                if fields.len() != 2 {
                    return Err(text_err(line, "GENRE line needs one value"));
                }
                let g = Genre::parse(fields[1])
                    .ok_or_else(|| text_err(line, format!("unknown genre '{}'", fields[1])))?;
                prefix.push(InitialToken::Genre(g));
            }
            "INSTR" => {
                if fields.len() != 2 {
                    return Err(text_err(line, "INSTR line needs one value"));
                }
                let i = Instrument::parse(fields[1])
                    .ok_or_else(|| text_err(line, format!("unknown instrument '{}'", fields[1])))?;
                prefix.push(InitialToken::Instrument(i));
            }
            ty @ ("RHYTHM" | "NOTE" | "EOS") => {
                if fields.len() != 7 {
                    return Err(text_err(line, format!("expected 7 fields, found {}", fields.len())));
                }
                let beat = parse_opt(
                    fields[1],
                    |s| {
                        if s == "Bar" {
                            Some(BeatPos::Bar)
                        } else {
                            s.strip_prefix("Tick_")
                                .and_then(|n| n.parse::<u8>().ok())
                                .map(BeatPos::Tick)
                        }
                    },
                    line,
                    "beat",
                )?;
                let density = parse_opt(fields[2], |s| s.parse::<u8>().ok(), line, "density")?;
                let strength = parse_opt(fields[3], |s| s.parse::<u8>().ok(), line, "strength")?;
                let instrument = parse_opt(fields[4], Instrument::parse, line, "instrument")?;
                let pitch = parse_opt(fields[5], |s| s.parse::<u8>().ok(), line, "pitch")?;
                let duration = parse_opt(fields[6], |s| s.parse::<u8>().ok(), line, "duration")?;
                let ttype = match ty {
                    "RHYTHM" => TokenType::Rhythm,
                    "NOTE" => TokenType::Note,
                    _ => TokenType::Eos,
                };
                body.push(CompoundToken {
                    ttype,
                    beat,
                    density,
                    strength,
                    instrument,
                    pitch,
                    duration,
                });
            }
            other => return Err(text_err(line, format!("unknown line type '{other}'"))),
        }
    }
    Ok(TokenSequence { prefix, body })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Instrument::*;

    fn triad_score() -> QuantizedScore {
        QuantizedScore::from_notes(
            120.0,
            vec![
                NoteEvent::new(60, 0, 4, Piano),
                NoteEvent::new(64, 0, 4, Piano),
                NoteEvent::new(67, 0, 4, Piano),
            ],
        )
        .unwrap()
    }

    #[test]
    fn groups_triad_into_one_simu_note() {
        let groups = group_simu_notes(&triad_score());
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].notes.len(), 3);
        assert_eq!(groups[0].tick_in_bar, 1);
    }

    #[test]
    fn same_tick_different_instruments_are_distinct_simu_notes() {
        let s = QuantizedScore::from_notes(
            120.0,
            vec![
                NoteEvent::new(60, 0, 4, Piano),
                NoteEvent::new(36, 0, 4, Bass),
            ],
        )
        .unwrap();
        assert_eq!(group_simu_notes(&s).len(), 2);
    }

    #[test]
    fn bar_density_counts_distinct_ticks_across_instruments() {
        let s = QuantizedScore::from_notes(
            120.0,
            vec![
                NoteEvent::new(60, 0, 1, Piano),
                NoteEvent::new(36, 0, 1, Bass),
                NoteEvent::new(62, 4, 1, Piano),
                NoteEvent::new(64, 8, 1, Piano),
                NoteEvent::new(65, 12, 1, Piano),
            ],
        )
        .unwrap();
        // Ticks 1, 5, 9, 13 occupied; piano+bass on tick 1 counts once.
        assert_eq!(bar_density(&s, 0).unwrap(), 4);
        assert!(bar_density(&s, 1).is_err());
    }

    #[test]
    fn tick_strength_sums_instruments_and_clips() {
        let s = QuantizedScore::from_notes(
            120.0,
            vec![
                NoteEvent::new(60, 0, 4, Piano),
                NoteEvent::new(64, 0, 4, Piano),
                NoteEvent::new(67, 0, 4, Piano),
                NoteEvent::new(36, 0, 4, Bass),
            ],
        )
        .unwrap();
        assert_eq!(tick_strength(&s, 0, 1), 4);
        assert_eq!(tick_strength(&s, 0, 2), 0);

        let many = QuantizedScore::from_notes(
            120.0,
            (0..25).map(|p| NoteEvent::new(30 + p, 0, 1, Piano)).collect(),
        )
        .unwrap();
        assert_eq!(tick_strength(&many, 0, 1), 20);
    }

    #[test]
    fn encodes_triad_to_expected_grammar() {
        let tokens = encode(&triad_score(), Genre::Pop, &[Piano]).unwrap();
        assert_eq!(
            tokens.prefix,
            vec![InitialToken::Genre(Genre::Pop), InitialToken::Instrument(Piano)]
        );
        assert_eq!(
            tokens.body,
            vec![
                CompoundToken::bar(1),
                CompoundToken::tick(1, 1, 3),
                CompoundToken::note(Piano, 60, 4),
                CompoundToken::note(Piano, 64, 4),
                CompoundToken::note(Piano, 67, 4),
                CompoundToken::eos(),
            ]
        );
        assert!(validate(&tokens).is_valid());
    }

    #[test]
    fn tick_densities_decrement_to_one() {
        let s = QuantizedScore::from_notes(
            120.0,
            vec![
                NoteEvent::new(60, 0, 1, Piano),
                NoteEvent::new(62, 5, 1, Piano),
                NoteEvent::new(64, 10, 1, Piano),
            ],
        )
        .unwrap();
        let tokens = encode(&s, Genre::Rock, &[Piano]).unwrap();
        let densities: Vec<u8> = tokens
            .body
            .iter()
            .filter(|t| t.is_tick())
            .map(|t| t.density.unwrap())
            .collect();
        assert_eq!(densities, vec![3, 2, 1]);
    }

    #[test]
    fn decode_inverts_encode() {
        let s = triad_score();
        let tokens = encode(&s, Genre::Pop, &[Piano]).unwrap();
        let back = decode(&tokens, s.tempo_bpm, DecodeMode::Strict).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn strength_mismatch_strict_errors_tolerant_repairs() {
        let mut tokens = encode(&triad_score(), Genre::Pop, &[Piano]).unwrap();
        // Claim 3 notes but drop one.
        tokens.body.remove(4);
        assert!(matches!(
            decode(&tokens, 120.0, DecodeMode::Strict),
            Err(Error::Grammar { .. })
        ));
        let repaired = decode(&tokens, 120.0, DecodeMode::Tolerant).unwrap();
        assert_eq!(repaired.notes.len(), 2);
    }

    #[test]
    fn eos_only_body_is_empty_score() {
        let tokens = TokenSequence {
            prefix: vec![
                InitialToken::Genre(Genre::Pop),
                InitialToken::Instrument(Piano),
            ],
            body: vec![CompoundToken::eos()],
        };
        assert!(matches!(
            decode(&tokens, 120.0, DecodeMode::Tolerant),
            Err(Error::EmptyScore)
        ));
    }

    #[test]
    fn note_before_rhythm_is_grammar_error_with_index() {
        let tokens = TokenSequence {
            prefix: vec![
                InitialToken::Genre(Genre::Pop),
                InitialToken::Instrument(Piano),
            ],
            body: vec![CompoundToken::note(Piano, 60, 4), CompoundToken::eos()],
        };
        match decode(&tokens, 120.0, DecodeMode::Strict) {
            Err(Error::Grammar { index, .. }) => assert_eq!(index, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupted_density_yields_single_monotonicity_violation() {
        let s = QuantizedScore::from_notes(
            120.0,
            vec![
                NoteEvent::new(60, 0, 1, Piano),
                NoteEvent::new(62, 5, 1, Piano),
            ],
        )
        .unwrap();
        let mut tokens = encode(&s, Genre::Pop, &[Piano]).unwrap();
        // Second tick should carry remaining density 1; corrupt it.
        let idx = tokens
            .body
            .iter()
            .enumerate()
            .filter(|(_, t)| t.is_tick())
            .map(|(i, _)| i)
            .nth(1)
            .unwrap();
        tokens.body[idx].density = Some(2);
        let report = validate(&tokens);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].index, idx);
    }

    #[test]
    fn shuffled_notes_within_tick_decode_to_same_score() {
        let s = triad_score();
        let mut tokens = encode(&s, Genre::Pop, &[Piano]).unwrap();
        tokens.body.swap(2, 4);
        assert!(validate(&tokens).is_valid());
        let back = decode(&tokens, s.tempo_bpm, DecodeMode::Strict).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn cwt_text_roundtrip() {
        let s = QuantizedScore::from_notes(
            95.0,
            vec![
                NoteEvent::new(60, 0, 4, Piano),
                NoteEvent::new(36, 2, 2, Drums),
                NoteEvent::new(40, 19, 8, Strings),
            ],
        )
        .unwrap();
        let tokens = encode(&s, Genre::Electronic, &[Drums, Piano, Strings]).unwrap();
        let text = to_cwt(&tokens);
        let parsed = from_cwt(&text).unwrap();
        assert_eq!(parsed, tokens);
    }

    #[test]
    fn cwt_rejects_bad_lines() {
        assert!(from_cwt("BOGUS line\n").is_err());
        assert!(from_cwt("GENRE Swing\n").is_err());
        match from_cwt("GENRE Pop\nRHYTHM Bar 1 _ _\n") {
            Err(Error::TokenText { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
