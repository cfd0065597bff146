//! Rhythm-controlled multi-track symbolic background music generation.
//!
//! The crate turns a video's motion into rhythmic features (beat timing,
//! per-bar density classes, visual beats) and drives a compound-token
//! sequence model whose decoding loop can replace density and strength
//! attributes with the video's, at a configurable control degree.
//!
//! Modules follow the pipeline: [`midi`] parses and writes Standard MIDI
//! Files onto a 16-ticks-per-bar grid; [`tokens`] converts scores to and from
//! the 7-attribute compound-token sequence; [`video`] extracts rhythm from
//! frames; [`model`] embeds, trains and samples token sequences; [`generate`]
//! runs the controlled decoding loop; [`metrics`] and [`corpus`] evaluate and
//! match against a reference corpus.

pub mod corpus;
pub mod error;
pub mod generate;
pub mod metrics;
pub mod midi;
pub mod model;
pub mod par;
pub mod tokens;
pub mod types;
pub mod video;

pub use error::{Error, Result};
pub use par::ExecMode;
pub use types::{Genre, Instrument, NoteEvent, QuantizedScore};
