//! Deterministic rule-based next-token predictor.
//!
//! The oracle always honors declared counts: it emits exactly the open bar's
//! remaining density in tick tokens (evenly spaced over the bar's budget) and
//! exactly the current tick's claimed strength in note tokens, with a fixed
//! pitch pattern. It exists to exercise the control loop in isolation: under
//! full control (C = 1) every replaced density and strength is realized
//! exactly, so control errors are zero by construction.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::generate::{StepContext, TokenPredictor};
use crate::tokens::{CompoundToken, InitialToken};
use crate::types::Instrument;

#[derive(Debug, Clone)]
pub struct OracleModel {
    /// Density written on fresh bar tokens (before any replacement).
    pub default_density: u8,
    /// Strength written on fresh tick tokens (before any replacement).
    pub default_strength: u8,
}

impl Default for OracleModel {
    fn default() -> Self {
        OracleModel {
            default_density: 4,
            default_strength: 2,
        }
    }
}

impl TokenPredictor for OracleModel {
    fn predict(
        &self,
        prefix: &[InitialToken],
        _body: &[CompoundToken],
        ctx: &StepContext<'_>,
        _rng: &mut ChaCha8Rng,
    ) -> Result<CompoundToken> {
        let instrument = prefix
            .iter()
            .find_map(|t| match t {
                InitialToken::Instrument(i) => Some(*i),
                InitialToken::Genre(_) => None,
            })
            .unwrap_or(Instrument::Piano);

        if ctx.notes_due > 0 {
            let emitted = ctx.claimed_strength - ctx.notes_due;
            let pitch = 60 + (emitted * 4) % 12;
            return Ok(CompoundToken::note(instrument, pitch, 4));
        }
        if ctx.bar_open && ctx.remaining_density > 0 {
            // Latest feasible position: leaves exactly one slot per remaining
            // tick. Any visual beat that still fits the bar is therefore at
            // or before this prediction, so full control always consumes it.
            let budget = ctx.tick_budget;
            let current = ctx.current_tick;
            let remaining = ctx.remaining_density;
            let tick = budget - remaining + 1;
            if tick <= current || tick > budget {
                return Err(Error::InvalidArgument(format!(
                    "oracle cannot place tick: current {current}, remaining {remaining}, budget {budget}"
                )));
            }
            return Ok(CompoundToken::tick(tick, remaining, self.default_strength));
        }
        if ctx.can_new_bar {
            return Ok(CompoundToken::bar(self.default_density));
        }
        Ok(CompoundToken::eos())
    }
}
