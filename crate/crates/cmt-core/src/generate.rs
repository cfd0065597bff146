//! Rhythm-controlled autoregressive generation.
//!
//! The loop samples next tokens from a predictor, replaces bar-token density
//! and tick-token position/strength from the video rhythm with probability C
//! (the control degree), and terminates at EOS or when generation runs past
//! the video's total beats.
//!
//! A guardrail (on by default) keeps the grammar intact around the sampled
//! tokens: tick positions are constrained to strictly increase and to leave
//! room for the bar's remaining density, tick densities are overwritten by a
//! decrementing counter, and new bars or EOS are only offered once the open
//! bar's density is exhausted. With the guardrail off the model's raw
//! behavior is kept and only the replacements of Algorithm-style control are
//! applied.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::net::{attr_logits, forward_hidden, type_logits, SeqInput};
use crate::model::sample::{sample_attrs_for_type, sample_type, SamplingConfig, TokenMasks};
use crate::model::{vocab, ModelParams};
use crate::tokens::{BeatPos, CompoundToken, InitialToken, TokenSequence, TokenType};
use crate::types::{Genre, Instrument, TICKS_PER_BAR};
use crate::video::{RhythmBeat, VideoRhythm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub genre: Genre,
    pub instruments: Vec<Instrument>,
    /// Control degree C in [0, 1]: the probability of each density/strength
    /// replacement.
    pub control_degree: f64,
    pub sampling: SamplingConfig,
    pub seed: u64,
    pub max_tokens: usize,
    /// Keep the generated grammar consistent around sampled tokens.
    pub density_guardrail: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            genre: Genre::Pop,
            instruments: vec![Instrument::Piano],
            control_degree: 0.7,
            sampling: SamplingConfig::default(),
            seed: 0,
            max_tokens: 10_000,
            density_guardrail: true,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.control_degree) {
            return Err(Error::InvalidArgument(format!(
                "control degree {} outside [0,1]",
                self.control_degree
            )));
        }
        if self.instruments.is_empty() {
            return Err(Error::InvalidArgument("instrument set is empty".into()));
        }
        let mut sorted = self.instruments.clone();
        sorted.sort_by_key(|i| i.index());
        sorted.dedup();
        if sorted.len() != self.instruments.len() {
            return Err(Error::InvalidArgument("duplicate instruments".into()));
        }
        if self.max_tokens == 0 {
            return Err(Error::InvalidArgument("max_tokens must be positive".into()));
        }
        self.sampling.validate()
    }

    fn prefix(&self) -> Vec<InitialToken> {
        let mut sorted = self.instruments.clone();
        sorted.sort_by_key(|i| i.index());
        let mut prefix = vec![InitialToken::Genre(self.genre)];
        prefix.extend(sorted.into_iter().map(InitialToken::Instrument));
        prefix
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Replaced {
    None,
    Density,
    Strength,
}

/// One generation step of the audit trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub token: String,
    pub replaced: Replaced,
    pub beat: f64,
    pub bin: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerationTrace {
    pub steps: Vec<TraceStep>,
}

impl GenerationTrace {
    pub fn replacements(&self) -> usize {
        self.steps.iter().filter(|s| s.replaced != Replaced::None).count()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for step in &self.steps {
            out.push_str(&serde_json::to_string(step).unwrap());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutput {
    pub tokens: TokenSequence,
    pub trace: GenerationTrace,
}

/// Everything a predictor may rely on at one step. The masks already encode
/// the grammar: a predictor must only emit a token they allow.
#[derive(Debug, Clone)]
pub struct StepContext<'a> {
    pub n_beats: f64,
    /// Bar tokens emitted so far; the open bar has index `bars_emitted - 1`.
    pub bars_emitted: u32,
    pub bar_open: bool,
    /// Last tick position in the open bar (0 = none yet).
    pub current_tick: u8,
    /// Occupied-tick count still owed to the open bar.
    pub remaining_density: u8,
    /// Ticks of the open bar lying inside the video.
    pub tick_budget: u8,
    /// Strength claimed by the current tick token.
    pub claimed_strength: u8,
    /// Note tokens still owed to the current tick per its claimed strength.
    pub notes_due: u8,
    pub can_new_bar: bool,
    pub type_allowed: [bool; vocab::TYPE],
    pub beat_allowed: [bool; vocab::BEAT],
    pub instruments: &'a [Instrument],
}

/// A next-token source: the trained model (via sampling) or the rule-based
/// oracle.
pub trait TokenPredictor {
    fn predict(
        &self,
        prefix: &[InitialToken],
        body: &[CompoundToken],
        ctx: &StepContext<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<CompoundToken>;
}

/// Trained-model predictor: two-stage sampling under the context masks.
pub struct SampledModel<'a> {
    pub params: &'a ModelParams,
    pub sampling: SamplingConfig,
}

impl TokenPredictor for SampledModel<'_> {
    fn predict(
        &self,
        prefix: &[InitialToken],
        body: &[CompoundToken],
        ctx: &StepContext<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<CompoundToken> {
        let input = SeqInput::build(prefix, body, ctx.n_beats)?;
        let hidden = forward_hidden(self.params, &input)?;
        let last = hidden.row(hidden.nrows() - 1);

        // Stage 1: sample the type; stage 2: condition the six attribute
        // heads on the sampled type and sample the rest.
        let type_id = sample_type(
            &type_logits(self.params, last),
            &self.sampling,
            Some(&ctx.type_allowed),
            rng,
        )?;
        let attrs = attr_logits(self.params, last, type_id);
        let masks = TokenMasks {
            ttype: Some(ctx.type_allowed),
            beat: Some(ctx.beat_allowed),
            instrument: Some(instrument_mask(ctx.instruments)),
        };
        sample_attrs_for_type(type_id, &attrs, &self.sampling, &masks, rng)
    }
}

fn instrument_mask(instruments: &[Instrument]) -> [bool; vocab::INSTRUMENT] {
    let mut m = [false; vocab::INSTRUMENT];
    for inst in instruments {
        m[1 + inst.index()] = true;
    }
    m
}

/// With probability `c`, overwrites a bar token's density with the class.
pub fn replace_density(
    token: &CompoundToken,
    class: u8,
    c: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(CompoundToken, bool)> {
    if !token.is_bar() {
        return Err(Error::InvalidArgument(
            "density replacement applies to bar tokens".into(),
        ));
    }
    if !(1..=TICKS_PER_BAR as u8).contains(&class) {
        return Err(Error::InvalidArgument(format!("density class {class} outside 1..=16")));
    }
    if rng.random::<f64>() < c {
        let mut t = *token;
        t.density = Some(class);
        Ok((t, true))
    } else {
        Ok((*token, false))
    }
}

/// With probability `c`, moves a tick token onto the visual beat's tick and
/// overwrites its strength with the beat's class.
pub fn replace_strength(
    token: &CompoundToken,
    vbeat: &RhythmBeat,
    c: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(CompoundToken, bool)> {
    let Some(BeatPos::Tick(j)) = token.beat else {
        return Err(Error::InvalidArgument(
            "strength replacement applies to tick tokens".into(),
        ));
    };
    if token.ttype != TokenType::Rhythm {
        return Err(Error::InvalidArgument(
            "strength replacement applies to tick tokens".into(),
        ));
    }
    if j < vbeat.tick {
        return Err(Error::InvalidArgument(
            "predicted tick must be at or after the visual beat".into(),
        ));
    }
    if rng.random::<f64>() < c {
        let mut t = *token;
        t.beat = Some(BeatPos::Tick(vbeat.tick));
        t.strength = Some(vbeat.strength);
        Ok((t, true))
    } else {
        Ok((*token, false))
    }
}

struct LoopState {
    bars: u32,
    bar_open: bool,
    current_tick: u8,
    remaining: u8,
    claimed_strength: u8,
    notes_due: u8,
    /// Global tick index of the last emitted rhythm position (bar boundary
    /// counts as the tick before the bar's first slot).
    last_global: i64,
}

impl LoopState {
    fn new() -> LoopState {
        LoopState {
            bars: 0,
            bar_open: false,
            current_tick: 0,
            remaining: 0,
            claimed_strength: 0,
            notes_due: 0,
            last_global: -1,
        }
    }

    fn bar_budget(&self, bar_index: u32, n_beats: f64) -> u8 {
        let total_ticks = (n_beats * 4.0) as i64;
        let start = i64::from(bar_index) * i64::from(TICKS_PER_BAR);
        (total_ticks - start).clamp(0, i64::from(TICKS_PER_BAR)) as u8
    }

    fn context<'a>(
        &self,
        n_beats: f64,
        instruments: &'a [Instrument],
        guardrail: bool,
    ) -> StepContext<'a> {
        let can_new_bar = f64::from(self.bars) * 4.0 < n_beats;
        let budget = if self.bar_open {
            self.bar_budget(self.bars - 1, n_beats)
        } else {
            0
        };
        let mut beat_allowed = [false; vocab::BEAT];
        // Bar slot: under the guardrail only once the open bar is exhausted.
        beat_allowed[1] = can_new_bar && (!guardrail || self.remaining == 0);
        if self.bar_open {
            for j in (self.current_tick + 1)..=budget {
                let fits = if guardrail {
                    self.remaining > 0 && j + self.remaining - 1 <= budget
                } else {
                    true
                };
                if fits {
                    beat_allowed[1 + j as usize] = true;
                }
            }
        }
        let any_beat = beat_allowed.iter().any(|&b| b);
        let mut type_allowed = [false; vocab::TYPE];
        type_allowed[vocab::TYPE_RHYTHM] = any_beat;
        type_allowed[vocab::TYPE_NOTE] = self.bar_open && self.current_tick > 0;
        // Under the guardrail the piece must span at least one bar and may
        // only end once the open bar's density is exhausted.
        type_allowed[vocab::TYPE_EOS] = !guardrail || (self.remaining == 0 && self.bars > 0);
        StepContext {
            n_beats,
            bars_emitted: self.bars,
            bar_open: self.bar_open,
            current_tick: self.current_tick,
            remaining_density: self.remaining,
            tick_budget: budget,
            claimed_strength: self.claimed_strength,
            notes_due: self.notes_due,
            can_new_bar,
            type_allowed,
            beat_allowed,
            instruments,
        }
    }
}

/// Runs the control loop against a predictor and a video rhythm.
pub fn generate(
    predictor: &dyn TokenPredictor,
    rhythm: &VideoRhythm,
    cfg: &GenerationConfig,
) -> Result<GenerationOutput> {
    cfg.validate()?;
    rhythm.validate()?;
    let n_beats = f64::from(rhythm.n_beats);
    let prefix = cfg.prefix();
    let instruments = cfg.instruments.clone();
    let c = cfg.control_degree;

    // Independent substreams so toggling one control never perturbs another.
    let mut rng_sample = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_sample.set_stream(1);
    let mut rng_density = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_density.set_stream(2);
    let mut rng_strength = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_strength.set_stream(3);

    let mut body: Vec<CompoundToken> = Vec::new();
    let mut trace = GenerationTrace::default();
    let mut state = LoopState::new();
    let mut pending = rhythm.visual_beats.iter().peekable();

    let mut record = |step: usize, tok: &CompoundToken, replaced: Replaced, beat: f64| {
        let (bin, _) = crate::model::timing_bin(beat, n_beats);
        trace.steps.push(TraceStep {
            step,
            token: token_display(tok),
            replaced,
            beat,
            bin,
        });
    };

    let mut finished = false;
    for step in 0..cfg.max_tokens {
        let ctx = state.context(n_beats, &instruments, cfg.density_guardrail);
        let mut tok = predictor.predict(&prefix, &body, &ctx, &mut rng_sample)?;
        let mut replaced = Replaced::None;

        if tok.ttype == TokenType::Eos {
            record(step, &tok, Replaced::None, n_beats);
            body.push(tok);
            finished = true;
            break;
        }

        let beat;
        if tok.is_bar() {
            if !ctx.can_new_bar {
                // Hard stop: the next bar would start at or past the video end.
                let eos = CompoundToken::eos();
                record(step, &eos, Replaced::None, n_beats);
                body.push(eos);
                finished = true;
                break;
            }
            let bar_index = state.bars;
            if c > 0.0 {
                if let Some(&class) = rhythm.bar_density_class.get(bar_index as usize) {
                    let (t, did) = replace_density(&tok, class, c, &mut rng_density)?;
                    tok = t;
                    if did {
                        replaced = Replaced::Density;
                    }
                }
            }
            // A density larger than the bar's in-video tick budget can never
            // be realized; clamp so the guardrail stays satisfiable.
            let budget = state.bar_budget(bar_index, n_beats);
            if let Some(d) = tok.density {
                if d > budget {
                    tok.density = Some(budget);
                }
            }
            state.bars += 1;
            state.bar_open = true;
            state.current_tick = 0;
            state.remaining = tok.density.unwrap_or(0);
            state.claimed_strength = 0;
            state.notes_due = 0;
            state.last_global = i64::from(bar_index) * i64::from(TICKS_PER_BAR) - 1;
            beat = 4.0 * f64::from(bar_index);
        } else if tok.is_tick() {
            // Visual beats that generation has already moved past can never
            // be placed; drop them before looking at the next pending one.
            while let Some(v) = pending.peek() {
                if (v.global_tick() as i64) <= state.last_global {
                    pending.next();
                } else {
                    break;
                }
            }
            let Some(BeatPos::Tick(j_pred)) = tok.beat else {
                return Err(Error::InvalidArgument("tick token without position".into()));
            };
            let bar_index = state.bars - 1;
            let g_pred = i64::from(bar_index) * i64::from(TICKS_PER_BAR) + i64::from(j_pred) - 1;
            if c > 0.0 {
                if let Some(&v) = pending.peek().copied() {
                    let fits = cfg.density_guardrail
                        && v.tick > state.current_tick
                        && state.remaining > 0
                        && v.tick + state.remaining - 1 <= ctx.tick_budget;
                    let eligible = (v.global_tick() as i64) <= g_pred
                        && (fits || !cfg.density_guardrail);
                    if eligible {
                        let (t, did) = replace_strength(&tok, &v, c, &mut rng_strength)?;
                        tok = t;
                        if did {
                            replaced = Replaced::Strength;
                            pending.next();
                        }
                    }
                }
            }
            let Some(BeatPos::Tick(j)) = tok.beat else {
                unreachable!()
            };
            if cfg.density_guardrail {
                tok.density = Some(state.remaining);
            }
            state.remaining = state.remaining.saturating_sub(1);
            state.current_tick = j;
            state.claimed_strength = tok.strength.unwrap_or(0);
            state.notes_due = state.claimed_strength;
            state.last_global = i64::from(bar_index) * i64::from(TICKS_PER_BAR) + i64::from(j) - 1;
            beat = state.last_global as f64 / 4.0;
        } else {
            // Note token.
            state.notes_due = state.notes_due.saturating_sub(1);
            beat = if state.last_global >= 0 {
                state.last_global as f64 / 4.0
            } else {
                0.0
            };
        }

        if beat > n_beats {
            let eos = CompoundToken::eos();
            record(step, &eos, Replaced::None, n_beats);
            body.push(eos);
            finished = true;
            break;
        }
        record(step, &tok, replaced, beat);
        body.push(tok);
    }

    let tokens = TokenSequence {
        prefix,
        body,
    };
    let output = GenerationOutput {
        tokens,
        trace,
    };
    if !finished {
        return Err(Error::Truncated {
            max_tokens: cfg.max_tokens,
            partial: Box::new(output),
        });
    }
    Ok(output)
}

fn token_display(tok: &CompoundToken) -> String {
    let one = crate::tokens::to_cwt(&TokenSequence {
        prefix: Vec::new(),
        body: vec![*tok],
    });
    one.trim_end().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::oracle::OracleModel;
    use crate::tokens::{validate, DecodeMode, ViolationKind};

    fn simple_rhythm() -> VideoRhythm {
        VideoRhythm {
            tempo_bpm: 120.0,
            n_beats: 16,
            n_bars: 4,
            bar_density_class: vec![3, 2, 4, 1],
            visual_beats: vec![
                RhythmBeat { bar: 0, tick: 2, strength: 5 },
                RhythmBeat { bar: 2, tick: 7, strength: 3 },
            ],
            total_frames: 240,
            fps: 30.0,
        }
    }

    #[test]
    fn oracle_full_control_matches_rhythm_exactly() {
        let rhythm = simple_rhythm();
        let cfg = GenerationConfig {
            control_degree: 1.0,
            seed: 5,
            ..Default::default()
        };
        let out = generate(&OracleModel::default(), &rhythm, &cfg).unwrap();
        assert!(validate(&out.tokens).is_valid());
        let score = crate::tokens::decode(&out.tokens, 120.0, DecodeMode::Strict).unwrap();
        assert_eq!(score.n_bars, 4);
        for (i, &class) in rhythm.bar_density_class.iter().enumerate() {
            assert_eq!(
                crate::tokens::bar_density(&score, i as u32).unwrap(),
                u32::from(class),
                "bar {i}"
            );
        }
        for vb in &rhythm.visual_beats {
            assert_eq!(
                crate::tokens::tick_strength(&score, vb.bar, vb.tick),
                u32::from(vb.strength)
            );
        }
    }

    #[test]
    fn zero_control_never_replaces_and_is_seed_stable() {
        let rhythm = simple_rhythm();
        let cfg = GenerationConfig {
            control_degree: 0.0,
            seed: 11,
            ..Default::default()
        };
        let a = generate(&OracleModel::default(), &rhythm, &cfg).unwrap();
        let b = generate(&OracleModel::default(), &rhythm, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trace.replacements(), 0);
    }

    #[test]
    fn replacement_frequency_tracks_control_degree() {
        let tok = CompoundToken::bar(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let mut hits = 0usize;
        for _ in 0..n {
            let (_, did) = replace_density(&tok, 9, 0.7, &mut rng).unwrap();
            hits += usize::from(did);
        }
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.7).abs() <= 0.02, "freq {freq}");
    }

    #[test]
    fn replace_ops_reject_wrong_token_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let note = CompoundToken::note(Instrument::Piano, 60, 4);
        assert!(replace_density(&note, 5, 1.0, &mut rng).is_err());
        let vb = RhythmBeat { bar: 0, tick: 8, strength: 2 };
        let tick = CompoundToken::tick(5, 1, 1);
        assert!(replace_strength(&tick, &vb, 1.0, &mut rng).is_err());
        let tick_after = CompoundToken::tick(9, 1, 1);
        let (t, did) = replace_strength(&tick_after, &vb, 1.0, &mut rng).unwrap();
        assert!(did);
        assert_eq!(t.beat, Some(BeatPos::Tick(8)));
        assert_eq!(t.strength, Some(2));
    }

    #[test]
    fn oracle_output_beats_never_decrease_and_bars_bounded() {
        let rhythm = simple_rhythm();
        for c in [0.0, 0.5, 1.0] {
            let cfg = GenerationConfig {
                control_degree: c,
                seed: 21,
                ..Default::default()
            };
            let out = generate(&OracleModel::default(), &rhythm, &cfg).unwrap();
            let beats: Vec<f64> = out.trace.steps.iter().map(|s| s.beat).collect();
            assert!(beats.windows(2).all(|w| w[0] <= w[1]), "{beats:?}");
            let bars = out.tokens.body.iter().filter(|t| t.is_bar()).count();
            assert!(bars as u32 <= rhythm.n_bars + 1);
            // The controller never breaks the grammar: any strict-mode
            // violation could only be a strength/count mismatch.
            let report = validate(&out.tokens);
            assert!(report
                .violations
                .iter()
                .all(|v| v.kind == ViolationKind::StrengthCount));
        }
    }

    #[test]
    fn truncation_reports_partial_output() {
        struct NeverEos;
        impl TokenPredictor for NeverEos {
            fn predict(
                &self,
                _prefix: &[InitialToken],
                _body: &[CompoundToken],
                ctx: &StepContext<'_>,
                _rng: &mut ChaCha8Rng,
            ) -> Result<CompoundToken> {
                // Keep emitting notes once a tick exists; never end.
                if ctx.type_allowed[vocab::TYPE_NOTE] {
                    Ok(CompoundToken::note(Instrument::Piano, 60, 1))
                } else if ctx.beat_allowed[1] {
                    Ok(CompoundToken::bar(1))
                } else {
                    let j = ctx
                        .beat_allowed
                        .iter()
                        .skip(2)
                        .position(|&b| b)
                        .map(|p| p + 1)
                        .unwrap_or(1) as u8;
                    Ok(CompoundToken::tick(j, ctx.remaining_density, 1))
                }
            }
        }
        let rhythm = simple_rhythm();
        let cfg = GenerationConfig {
            max_tokens: 32,
            ..Default::default()
        };
        match generate(&NeverEos, &rhythm, &cfg) {
            Err(Error::Truncated { max_tokens, partial }) => {
                assert_eq!(max_tokens, 32);
                assert_eq!(partial.tokens.body.len(), 32);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }
}
