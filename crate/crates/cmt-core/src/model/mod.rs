//! Compound-token sequence model: per-attribute embeddings projected to the
//! model width, beat-timing and beat-based position encodings, a causal
//! self-attention stack, and a two-stage multi-head output (type first, then
//! the six remaining attributes conditioned on it).
//!
//! Parameters live in one flat f64 buffer with a named tensor registry, which
//! keeps Adam, the finite-difference gradient check and checkpoint
//! serialization trivial. Values are quantized to f32 after initialization
//! and after every optimizer step, so the 32-bit checkpoint round-trip is
//! lossless and reloaded models produce bit-identical logits.

pub mod checkpoint;
pub mod net;
pub mod oracle;
pub mod sample;
pub mod train;

use ndarray::{Array1, ArrayView1, ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokens::{BeatPos, CompoundToken, InitialToken, TokenType};
use crate::types::{Genre, Instrument};

/// Attribute vocabulary sizes; index 0 of every attribute is its `None` entry.
pub mod vocab {
    pub const TYPE: usize = 4; // None, Rhythm, Note, EOS
    pub const BEAT: usize = 18; // None, Bar, Tick_1..=Tick_16
    pub const DENSITY: usize = 18; // None, 0..=16
    pub const STRENGTH: usize = 21; // None, 1..=20
    pub const INSTRUMENT: usize = 6; // None, 5 instruments
    pub const PITCH: usize = 129; // None, 0..=127
    pub const DURATION: usize = 33; // None, 1..=32

    /// Sizes in canonical attribute order
    /// (type, beat, density, strength, instrument, pitch, duration).
    pub const SIZES: [usize; 7] = [TYPE, BEAT, DENSITY, STRENGTH, INSTRUMENT, PITCH, DURATION];

    /// Genre + instrument initial-token vocabulary.
    pub const INITIAL: usize = 11;
    /// Beat-timing bins 0..=100.
    pub const TIMING_BINS: usize = 101;

    pub const TYPE_RHYTHM: usize = 1;
    pub const TYPE_NOTE: usize = 2;
    pub const TYPE_EOS: usize = 3;
}

/// Embedding width per attribute, canonical order. Values follow the
/// per-attribute vocabulary sizes; they are fixed for every model scale and
/// sum to 896 before the input projection.
pub const ATTR_DIMS: [usize; 7] = [32, 64, 64, 64, 32, 512, 128];

pub const ATTR_NAMES: [&str; 7] = [
    "type",
    "beat",
    "density",
    "strength",
    "instrument",
    "pitch",
    "duration",
];

/// Total concatenated embedding width before the input projection.
pub fn concat_width() -> usize {
    ATTR_DIMS.iter().sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl ModelConfig {
    /// Full-scale configuration.
    pub fn paper() -> ModelConfig {
        ModelConfig {
            layers: 12,
            heads: 8,
            d_model: 512,
            d_ff: 2048,
            dropout: 0.1,
            max_len: 10_000,
        }
    }

    /// Desk-scale configuration used for the toy training runs.
    pub fn toy() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 4,
            d_model: 128,
            d_ff: 512,
            dropout: 0.0,
            max_len: 2_048,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::InvalidArgument("zero-sized model dimension".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// A named tensor in the flat parameter buffer. Vectors are rows = 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerHandles {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Handles {
    pub attr_emb: [usize; 7],
    pub w_in: usize,
    pub b_in: usize,
    pub initial_emb: usize,
    pub timing_emb: usize,
    pub layers: Vec<LayerHandles>,
    pub ln_f_g: usize,
    pub ln_f_b: usize,
    pub type_w: usize,
    pub type_b: usize,
    pub attr_w: [usize; 6],
    pub attr_b: [usize; 6],
}

struct Builder {
    specs: Vec<TensorSpec>,
    len: usize,
}

impl Builder {
    fn new() -> Builder {
        Builder {
            specs: Vec::new(),
            len: 0,
        }
    }

    fn tensor(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let id = self.specs.len();
        self.specs.push(TensorSpec {
            name,
            rows,
            cols,
            offset: self.len,
        });
        self.len += rows * cols;
        id
    }
}

fn build_registry(config: &ModelConfig) -> (Vec<TensorSpec>, Handles) {
    let d = config.d_model;
    let mut b = Builder::new();
    let attr_emb = std::array::from_fn(|k| {
        b.tensor(format!("emb.{}", ATTR_NAMES[k]), vocab::SIZES[k], ATTR_DIMS[k])
    });
    let w_in = b.tensor("emb.w_in".into(), concat_width(), d);
    let b_in = b.tensor("emb.b_in".into(), 1, d);
    let initial_emb = b.tensor("emb.initial".into(), vocab::INITIAL, d);
    let timing_emb = b.tensor("emb.timing".into(), vocab::TIMING_BINS, d);
    let mut layers = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        layers.push(LayerHandles {
            ln1_g: b.tensor(p("ln1.g"), 1, d),
            ln1_b: b.tensor(p("ln1.b"), 1, d),
            wq: b.tensor(p("attn.wq"), d, d),
            bq: b.tensor(p("attn.bq"), 1, d),
            wk: b.tensor(p("attn.wk"), d, d),
            bk: b.tensor(p("attn.bk"), 1, d),
            wv: b.tensor(p("attn.wv"), d, d),
            bv: b.tensor(p("attn.bv"), 1, d),
            wo: b.tensor(p("attn.wo"), d, d),
            bo: b.tensor(p("attn.bo"), 1, d),
            ln2_g: b.tensor(p("ln2.g"), 1, d),
            ln2_b: b.tensor(p("ln2.b"), 1, d),
            w1: b.tensor(p("ff.w1"), d, config.d_ff),
            b1: b.tensor(p("ff.b1"), 1, config.d_ff),
            w2: b.tensor(p("ff.w2"), config.d_ff, d),
            b2: b.tensor(p("ff.b2"), 1, d),
        });
    }
    let ln_f_g = b.tensor("ln_f.g".into(), 1, d);
    let ln_f_b = b.tensor("ln_f.b".into(), 1, d);
    let type_w = b.tensor("head.type.w".into(), d, vocab::TYPE);
    let type_b = b.tensor("head.type.b".into(), 1, vocab::TYPE);
    let cond = d + ATTR_DIMS[0];
    let attr_w = std::array::from_fn(|k| {
        b.tensor(format!("head.{}.w", ATTR_NAMES[k + 1]), cond, vocab::SIZES[k + 1])
    });
    let attr_b =
        std::array::from_fn(|k| b.tensor(format!("head.{}.b", ATTR_NAMES[k + 1]), 1, vocab::SIZES[k + 1]));
    (
        b.specs,
        Handles {
            attr_emb,
            w_in,
            b_in,
            initial_emb,
            timing_emb,
            layers,
            ln_f_g,
            ln_f_b,
            type_w,
            type_b,
            attr_w,
            attr_b,
        },
    )
}

/// The full parameter set of a model.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub(crate) specs: Vec<TensorSpec>,
    pub(crate) data: Vec<f64>,
    pub(crate) handles: Handles,
}

impl ModelParams {
    /// Deterministic seeded initialization; all values are f32-representable.
    pub fn init(config: ModelConfig, seed: u64) -> Result<ModelParams> {
        config.validate()?;
        let (specs, handles) = build_registry(&config);
        let len = specs.iter().map(|s| s.rows * s.cols).sum();
        let mut data = vec![0.0f64; len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in &specs {
            let slice = &mut data[spec.offset..spec.offset + spec.rows * spec.cols];
            let name = spec.name.as_str();
            if name.ends_with(".g") {
                slice.fill(1.0);
            } else if name.ends_with(".b")
                || name.ends_with(".b_in")
                || name.ends_with("bq")
                || name.ends_with("bk")
                || name.ends_with("bv")
                || name.ends_with("bo")
                || name.ends_with("b1")
                || name.ends_with("b2")
            {
                slice.fill(0.0);
            } else if name.starts_with("emb.") && !name.contains("w_in") {
                for v in slice.iter_mut() {
                    *v = rng.random_range(-0.02..0.02);
                }
            } else {
                // Xavier-uniform for linear maps.
                let limit = (6.0 / (spec.rows + spec.cols) as f64).sqrt();
                for v in slice.iter_mut() {
                    *v = rng.random_range(-limit..limit);
                }
            }
        }
        let mut params = ModelParams {
            config,
            specs,
            data,
            handles,
        };
        params.quantize_f32();
        Ok(params)
    }

    pub(crate) fn from_parts(config: ModelConfig, data: Vec<f64>) -> Result<ModelParams> {
        config.validate()?;
        let (specs, handles) = build_registry(&config);
        let len: usize = specs.iter().map(|s| s.rows * s.cols).sum();
        if data.len() != len {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match config ({} expected)",
                data.len(),
                len
            )));
        }
        Ok(ModelParams {
            config,
            specs,
            data,
            handles,
        })
    }

    pub fn n_params(&self) -> usize {
        self.data.len()
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    pub fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rounds every parameter to its nearest f32; keeps checkpoint round-trips
    /// exact.
    pub fn quantize_f32(&mut self) {
        for v in self.data.iter_mut() {
            *v = f64::from(*v as f32);
        }
    }

    pub(crate) fn m(&self, id: usize) -> ArrayView2<'_, f64> {
        let s = &self.specs[id];
        ArrayView2::from_shape((s.rows, s.cols), &self.data[s.offset..s.offset + s.rows * s.cols])
            .unwrap()
    }

    pub(crate) fn v(&self, id: usize) -> ArrayView1<'_, f64> {
        let s = &self.specs[id];
        ArrayView1::from_shape(s.cols, &self.data[s.offset..s.offset + s.cols]).unwrap()
    }

    /// Embeds one compound token: per-attribute lookups concatenated and
    /// projected to the model width.
    pub fn embed_token(&self, tok: &CompoundToken) -> Result<Array1<f64>> {
        let ids = token_ids(tok)?;
        let mut concat = Array1::zeros(concat_width());
        let mut at = 0;
        for k in 0..7 {
            let table = self.m(self.handles.attr_emb[k]);
            concat
                .slice_mut(ndarray::s![at..at + ATTR_DIMS[k]])
                .assign(&table.row(ids[k]));
            at += ATTR_DIMS[k];
        }
        let projected = concat.dot(&self.m(self.handles.w_in)) + self.v(self.handles.b_in);
        Ok(projected)
    }
}

/// Gradient buffer sharing the parameter layout.
#[derive(Debug, Clone)]
pub struct GradBuf {
    pub(crate) data: Vec<f64>,
}

impl GradBuf {
    pub fn zeros(params: &ModelParams) -> GradBuf {
        GradBuf {
            data: vec![0.0; params.data.len()],
        }
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn m(&mut self, params: &ModelParams, id: usize) -> ArrayViewMut2<'_, f64> {
        let s = &params.specs[id];
        ArrayViewMut2::from_shape(
            (s.rows, s.cols),
            &mut self.data[s.offset..s.offset + s.rows * s.cols],
        )
        .unwrap()
    }

    pub fn add(&mut self, other: &GradBuf) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, by: f64) {
        for v in self.data.iter_mut() {
            *v *= by;
        }
    }
}

/// Maps a token to its 7 attribute vocabulary ids (0 = None everywhere).
pub fn token_ids(tok: &CompoundToken) -> Result<[usize; 7]> {
    let type_id = match tok.ttype {
        TokenType::Rhythm => vocab::TYPE_RHYTHM,
        TokenType::Note => vocab::TYPE_NOTE,
        TokenType::Eos => vocab::TYPE_EOS,
    };
    let beat = match tok.beat {
        None => 0,
        Some(BeatPos::Bar) => 1,
        Some(BeatPos::Tick(j)) => {
            if !(1..=16).contains(&j) {
                return Err(Error::InvalidArgument(format!("tick {j} outside 1..=16")));
            }
            1 + j as usize
        }
    };
    let density = match tok.density {
        None => 0,
        Some(d) if d <= 16 => 1 + d as usize,
        Some(d) => return Err(Error::InvalidArgument(format!("density {d} > 16"))),
    };
    let strength = match tok.strength {
        None => 0,
        Some(s) if (1..=20).contains(&s) => s as usize,
        Some(s) => return Err(Error::InvalidArgument(format!("strength {s} outside 1..=20"))),
    };
    let instrument = tok.instrument.map(|i| 1 + i.index()).unwrap_or(0);
    let pitch = match tok.pitch {
        None => 0,
        Some(p) if p <= 127 => 1 + p as usize,
        Some(p) => return Err(Error::InvalidArgument(format!("pitch {p} > 127"))),
    };
    let duration = match tok.duration {
        None => 0,
        Some(d) if (1..=32).contains(&d) => d as usize,
        Some(d) => return Err(Error::InvalidArgument(format!("duration {d} outside 1..=32"))),
    };
    Ok([type_id, beat, density, strength, instrument, pitch, duration])
}

/// Inverse of [`token_ids`] given a sampled type and attribute ids.
pub fn token_from_ids(ids: &[usize; 7]) -> Result<CompoundToken> {
    let ttype = match ids[0] {
        vocab::TYPE_RHYTHM => TokenType::Rhythm,
        vocab::TYPE_NOTE => TokenType::Note,
        vocab::TYPE_EOS => TokenType::Eos,
        other => return Err(Error::InvalidArgument(format!("bad type id {other}"))),
    };
    let beat = match ids[1] {
        0 => None,
        1 => Some(BeatPos::Bar),
        j @ 2..=17 => Some(BeatPos::Tick((j - 1) as u8)),
        other => return Err(Error::InvalidArgument(format!("bad beat id {other}"))),
    };
    let density = match ids[2] {
        0 => None,
        d @ 1..=17 => Some((d - 1) as u8),
        other => return Err(Error::InvalidArgument(format!("bad density id {other}"))),
    };
    let strength = match ids[3] {
        0 => None,
        s @ 1..=20 => Some(s as u8),
        other => return Err(Error::InvalidArgument(format!("bad strength id {other}"))),
    };
    let instrument = match ids[4] {
        0 => None,
        i @ 1..=5 => Instrument::from_index(i - 1),
        other => return Err(Error::InvalidArgument(format!("bad instrument id {other}"))),
    };
    let pitch = match ids[5] {
        0 => None,
        p @ 1..=128 => Some((p - 1) as u8),
        other => return Err(Error::InvalidArgument(format!("bad pitch id {other}"))),
    };
    let duration = match ids[6] {
        0 => None,
        d @ 1..=32 => Some(d as u8),
        other => return Err(Error::InvalidArgument(format!("bad duration id {other}"))),
    };
    Ok(CompoundToken {
        ttype,
        beat,
        density,
        strength,
        instrument,
        pitch,
        duration,
    })
}

pub fn initial_token_id(tok: &InitialToken) -> usize {
    match tok {
        InitialToken::Genre(g) => g.index(),
        InitialToken::Instrument(i) => Genre::ALL.len() + i.index(),
    }
}

/// Beat-timing bin: `round(100 * beat / n_beat)` clamped to 0..=100. The
/// second value flags generation past the video end (`beat > n_beat`).
pub fn timing_bin(beat: f64, n_beat: f64) -> (usize, bool) {
    if n_beat <= 0.0 {
        return (0, false);
    }
    let past_end = beat > n_beat;
    let bin = (100.0 * beat / n_beat).round();
    ((bin.max(0.0) as usize).min(100), past_end)
}

/// Sinusoidal beat-based position encoding. All tokens within the same whole
/// beat share one encoding (the beat index is floored).
pub fn beat_position_encoding(beat: f64, d_model: usize) -> Array1<f64> {
    let b = beat.floor();
    let mut out = Array1::zeros(d_model);
    for n in 0..d_model / 2 {
        let denom = 10000f64.powf(2.0 * n as f64 / d_model as f64);
        out[2 * n] = (b / denom).sin();
        out[2 * n + 1] = (b / denom).cos();
    }
    if d_model % 2 == 1 {
        let n = d_model / 2;
        let denom = 10000f64.powf(2.0 * n as f64 / d_model as f64);
        out[d_model - 1] = (b / denom).sin();
    }
    out
}

/// Beat number for every body token: bar tokens sit at their bar's start,
/// tick tokens at their tick, note tokens at the current tick, EOS at
/// `n_beats`. Positions before any bar token fall back to beat 0.
pub fn body_beats(body: &[CompoundToken], n_beats: f64) -> Vec<f64> {
    let mut beats = Vec::with_capacity(body.len());
    let mut bars: i64 = -1;
    let mut current = 0.0;
    for tok in body {
        let beat = match (tok.ttype, tok.beat) {
            (TokenType::Rhythm, Some(BeatPos::Bar)) => {
                bars += 1;
                current = 4.0 * bars as f64;
                current
            }
            (TokenType::Rhythm, Some(BeatPos::Tick(j))) => {
                if bars >= 0 {
                    current = (bars as f64 * 16.0 + f64::from(j) - 1.0) / 4.0;
                }
                current
            }
            (TokenType::Eos, _) => n_beats,
            _ => current,
        };
        beats.push(beat);
    }
    beats
}
