//! Frame/beat conversions tying video time to musical time.

use crate::error::{Error, Result};

fn check_rates(fps: f64, tempo_bpm: f64) -> Result<()> {
    if !(fps.is_finite() && fps > 0.0) {
        return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
    }
    if !(tempo_bpm.is_finite() && tempo_bpm > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tempo must be positive, got {tempo_bpm}"
        )));
    }
    Ok(())
}

/// Beat number of frame `t`: `tempo * t / (fps * 60)`.
pub fn frame_to_beat(t: f64, fps: f64, tempo_bpm: f64) -> Result<f64> {
    check_rates(fps, tempo_bpm)?;
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::InvalidArgument(format!("frame index must be >= 0, got {t}")));
    }
    Ok(tempo_bpm * t / (fps * 60.0))
}

/// Beat number of frame `t` rounded to tick (quarter-beat) precision.
pub fn frame_to_beat_ticks(t: f64, fps: f64, tempo_bpm: f64) -> Result<f64> {
    Ok((frame_to_beat(t, fps, tempo_bpm)? * 4.0).round() / 4.0)
}

/// Frame index of beat `beat`: `round(beat * fps * 60 / tempo)`.
pub fn beat_to_frame(beat: f64, fps: f64, tempo_bpm: f64) -> Result<u64> {
    check_rates(fps, tempo_bpm)?;
    if !(beat.is_finite() && beat >= 0.0) {
        return Err(Error::InvalidArgument(format!("beat must be >= 0, got {beat}")));
    }
    Ok((beat * fps * 60.0 / tempo_bpm).round() as u64)
}

/// Length of one tick (quarter beat) in frames.
pub fn tick_interval_frames(fps: f64, tempo_bpm: f64) -> f64 {
    0.25 * fps * 60.0 / tempo_bpm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        assert_eq!(frame_to_beat(30.0, 30.0, 120.0).unwrap(), 2.0);
        assert_eq!(frame_to_beat(0.0, 30.0, 120.0).unwrap(), 0.0);
        assert_eq!(frame_to_beat(15.0, 30.0, 120.0).unwrap(), 1.0);
        assert_eq!(beat_to_frame(2.0, 30.0, 120.0).unwrap(), 30);
        assert_eq!(beat_to_frame(0.0, 30.0, 120.0).unwrap(), 0);
    }

    #[test]
    fn invalid_rates_rejected() {
        assert!(frame_to_beat(1.0, 0.0, 120.0).is_err());
        assert!(frame_to_beat(1.0, 30.0, -5.0).is_err());
        assert!(beat_to_frame(1.0, f64::NAN, 120.0).is_err());
    }

    #[test]
    fn mutual_inverse_within_rounding() {
        // |f_beat(f_frame(i)) - i| <= tempo / (fps * 120) (half-frame rounding).
        for (fps, tempo) in [(30.0, 120.0), (24.0, 97.0), (60.0, 211.0), (12.5, 45.0)] {
            for k in 0..200 {
                let beat = k as f64 * 0.25;
                let frame = beat_to_frame(beat, fps, tempo).unwrap();
                let back = frame_to_beat(frame as f64, fps, tempo).unwrap();
                let bound = tempo / (fps * 120.0) + 1e-12;
                assert!(
                    (back - beat).abs() <= bound,
                    "fps={fps} tempo={tempo} beat={beat} back={back}"
                );
            }
        }
    }
}
