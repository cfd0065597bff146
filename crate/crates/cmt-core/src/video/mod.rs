//! Video-side rhythm extraction: frame/beat timing, motion speed, density
//! classification, motion saliency and visual beats, plus the file formats
//! the CLI speaks (PGM frame directories, magnitude CSVs, rhythm JSON and the
//! distribution sidecar).

pub mod flow;
pub mod saliency;
pub mod timing;

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::ExecMode;
use crate::types::{MAX_STRENGTH, TICKS_PER_BAR};

pub use flow::{estimate_flow, estimate_flow_series, flow_magnitude, FlowField, Gray};
pub use saliency::{detect_visual_beats, motion_saliency, snap_to_tick, VisualBeat};
pub use timing::{beat_to_frame, frame_to_beat, frame_to_beat_ticks, tick_interval_frames};

pub const RHYTHM_SCHEMA_VERSION: u32 = 1;
const DIST_MAGIC: &[u8; 4] = b"CMTD";
const DIST_VERSION: u32 = 1;

/// An ordered grayscale frame sequence with its frame rate.
#[derive(Debug, Clone)]
pub struct FrameSeries {
    pub fps: f64,
    pub frames: Vec<Gray>,
}

impl FrameSeries {
    pub fn new(fps: f64, frames: Vec<Gray>) -> Result<FrameSeries> {
        if frames.len() < 2 {
            return Err(Error::InvalidArgument(
                "frame series needs at least 2 frames".into(),
            ));
        }
        let (w, h) = (frames[0].width, frames[0].height);
        if frames.iter().any(|f| f.width != w || f.height != h) {
            return Err(Error::InvalidArgument("frames differ in dimensions".into()));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
        }
        Ok(FrameSeries { fps, frames })
    }
}

/// Reference distributions for quantile classification, as cumulative
/// proportions: `density_cum[k-1]` is the corpus fraction of bars with
/// density <= k (k = 1..15), and likewise `strength_cum` over 1..19.
/// Classifying a batch of values against these reproduces the corpus's class
/// proportions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityDistribution {
    pub density_cum: Vec<f64>,
    pub strength_cum: Vec<f64>,
}

impl DensityDistribution {
    /// Uniform class proportions; used when no corpus statistics are given.
    pub fn uniform() -> DensityDistribution {
        DensityDistribution {
            density_cum: (1..16).map(|k| k as f64 / 16.0).collect(),
            strength_cum: (1..20).map(|k| k as f64 / 20.0).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.density_cum.len() != 15 || self.strength_cum.len() != 19 {
            return Err(Error::InvalidArgument(format!(
                "distribution needs 15 density and 19 strength proportions, got {} and {}",
                self.density_cum.len(),
                self.strength_cum.len()
            )));
        }
        for cum in [&self.density_cum, &self.strength_cum] {
            let mut last = 0.0;
            for &p in cum.iter() {
                if !(0.0..=1.0).contains(&p) || p < last {
                    return Err(Error::InvalidArgument(
                        "cumulative proportions must be nondecreasing within [0,1]".into(),
                    ));
                }
                last = p;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(DIST_MAGIC);
        out.extend_from_slice(&DIST_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.density_cum.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.strength_cum.len() as u32).to_le_bytes());
        for v in self.density_cum.iter().chain(&self.strength_cum) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DensityDistribution> {
        let bytes = fs::read(path)?;
        let fail = |m: &str| Error::Format {
            path: path.display().to_string(),
            message: m.to_string(),
        };
        if bytes.len() < 16 || &bytes[0..4] != DIST_MAGIC {
            return Err(fail("not a distribution file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != DIST_VERSION {
            return Err(Error::SchemaVersion {
                found: version,
                expected: DIST_VERSION,
            });
        }
        let n_d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let n_s = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if bytes.len() != 16 + 8 * (n_d + n_s) {
            return Err(fail("truncated distribution file"));
        }
        let mut vals = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let dist = DensityDistribution {
            density_cum: (&mut vals).take(n_d).collect(),
            strength_cum: vals.collect(),
        };
        dist.validate()?;
        Ok(dist)
    }
}

/// Speed thresholds realizing cumulative proportions over a sample: the
/// threshold for proportion `p` is the nearest-rank `p`-quantile of the
/// sample (negative infinity when `p` is 0, so no value falls below it).
fn quantile_thresholds(cum: &[f64], sample: &[f64]) -> Vec<f64> {
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    cum.iter()
        .map(|&p| {
            if p <= 0.0 || n == 0 {
                f64::NEG_INFINITY
            } else {
                let idx = ((p * n as f64).ceil() as usize).clamp(1, n) - 1;
                sorted[idx]
            }
        })
        .collect()
}

fn bracket(value: f64, thresholds: &[f64]) -> usize {
    1 + thresholds.iter().filter(|&&t| t < value).count()
}

/// Maps motion speeds to density classes 1..=16 so that class proportions
/// match the reference distribution. Monotone: a faster clip never gets a
/// lower class.
pub fn classify_density(speeds: &[f64], dist: &DensityDistribution) -> Result<Vec<u8>> {
    dist.validate()?;
    let thresholds = quantile_thresholds(&dist.density_cum, speeds);
    Ok(speeds.iter().map(|&s| bracket(s, &thresholds) as u8).collect())
}

/// Same quantile procedure for saliency values, onto strength classes 1..=20.
pub fn classify_strength(saliencies: &[f64], dist: &DensityDistribution) -> Result<Vec<u8>> {
    dist.validate()?;
    let thresholds = quantile_thresholds(&dist.strength_cum, saliencies);
    Ok(saliencies
        .iter()
        .map(|&s| (bracket(s, &thresholds) as u32).min(MAX_STRENGTH) as u8)
        .collect())
}

/// Motion speed of clip `m` (1-based): the mean per-frame flow magnitude over
/// the clip's frames. `magnitudes[t-1]` holds F_t, the magnitude between
/// 1-based frames t and t+1.
pub fn motion_speed(magnitudes: &[f64], m: usize, fps: f64, tempo_bpm: f64) -> Result<f64> {
    if m == 0 {
        return Err(Error::InvalidArgument("clip index is 1-based".into()));
    }
    let t_start = beat_to_frame(4.0 * (m as f64 - 1.0), fps, tempo_bpm)? as usize + 1;
    let t_end = beat_to_frame(4.0 * m as f64, fps, tempo_bpm)? as usize;
    if t_start > magnitudes.len() {
        return Err(Error::InvalidArgument(format!(
            "clip {m} starts beyond the video"
        )));
    }
    let t_end = t_end.min(magnitudes.len());
    if t_end < t_start {
        return Err(Error::InvalidArgument(format!("clip {m} is empty")));
    }
    let sum: f64 = magnitudes[t_start - 1..t_end].iter().sum();
    Ok(sum / (t_end - t_start + 1) as f64)
}

/// A visual beat snapped to the musical grid, with its strength class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RhythmBeat {
    pub bar: u32,
    /// 1-based tick within the bar.
    pub tick: u8,
    /// Strength class 1..=20.
    pub strength: u8,
}

impl RhythmBeat {
    pub fn global_tick(&self) -> u64 {
        u64::from(self.bar) * u64::from(TICKS_PER_BAR) + u64::from(self.tick) - 1
    }
}

/// All rhythmic features extracted from one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRhythm {
    pub tempo_bpm: f64,
    /// Total beat count of the video (whole beats).
    pub n_beats: u32,
    /// Number of bar-length clips.
    pub n_bars: u32,
    /// Density class per clip, 1..=16, length `n_bars`.
    pub bar_density_class: Vec<u8>,
    pub visual_beats: Vec<RhythmBeat>,
    pub total_frames: usize,
    pub fps: f64,
}

impl VideoRhythm {
    pub fn validate(&self) -> Result<()> {
        if self.n_beats == 0 || self.n_bars == 0 {
            return Err(Error::InvalidArgument("empty video rhythm".into()));
        }
        if self.n_bars != self.n_beats.div_ceil(4) {
            return Err(Error::InvalidArgument(format!(
                "n_bars {} != ceil(n_beats {} / 4)",
                self.n_bars, self.n_beats
            )));
        }
        if self.bar_density_class.len() != self.n_bars as usize {
            return Err(Error::InvalidArgument(format!(
                "expected {} density classes, got {}",
                self.n_bars,
                self.bar_density_class.len()
            )));
        }
        if self.bar_density_class.iter().any(|&c| !(1..=16).contains(&c)) {
            return Err(Error::InvalidArgument("density class outside 1..=16".into()));
        }
        let mut last: Option<u64> = None;
        for vb in &self.visual_beats {
            if !(1..=TICKS_PER_BAR as u8).contains(&vb.tick)
                || vb.strength == 0
                || vb.strength > MAX_STRENGTH as u8
            {
                return Err(Error::InvalidArgument(format!("bad visual beat {vb:?}")));
            }
            let g = vb.global_tick();
            if g >= u64::from(self.n_beats) * 4 {
                return Err(Error::InvalidArgument("visual beat beyond video end".into()));
            }
            if let Some(prev) = last {
                if g <= prev {
                    return Err(Error::InvalidArgument(
                        "visual beats must be strictly increasing".into(),
                    ));
                }
            }
            last = Some(g);
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct RhythmFile {
    schema_version: u32,
    #[serde(flatten)]
    rhythm: VideoRhythm,
}

pub fn save_rhythm(rhythm: &VideoRhythm, path: &Path) -> Result<()> {
    rhythm.validate()?;
    let file = RhythmFile {
        schema_version: RHYTHM_SCHEMA_VERSION,
        rhythm: rhythm.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_rhythm(path: &Path) -> Result<VideoRhythm> {
    let text = fs::read_to_string(path)?;
    let file: RhythmFile = serde_json::from_str(&text)?;
    if file.schema_version != RHYTHM_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: file.schema_version,
            expected: RHYTHM_SCHEMA_VERSION,
        });
    }
    file.rhythm.validate()?;
    Ok(file.rhythm)
}

/// Input to [`build_video_rhythm`]: either frames to run flow on, or
/// precomputed per-frame magnitudes (and optionally saliency values, without
/// which no visual beats are detected).
pub enum RhythmSource<'a> {
    Frames(&'a FrameSeries),
    Precomputed {
        fps: f64,
        magnitudes: &'a [f64],
        saliency: Option<&'a [f64]>,
    },
}

/// Composes the full video-side pipeline into a [`VideoRhythm`].
pub fn build_video_rhythm(
    source: RhythmSource<'_>,
    tempo_bpm: f64,
    dist: &DensityDistribution,
    mode: ExecMode,
) -> Result<VideoRhythm> {
    let (fps, total_frames, magnitudes, sal);
    match source {
        RhythmSource::Frames(series) => {
            fps = series.fps;
            total_frames = series.frames.len();
            let flows = estimate_flow_series(&series.frames, mode)?;
            magnitudes = flows.iter().map(flow_magnitude).collect::<Vec<f64>>();
            sal = motion_saliency(&flows);
        }
        RhythmSource::Precomputed {
            fps: f,
            magnitudes: m,
            saliency,
        } => {
            fps = f;
            total_frames = m.len() + 1;
            magnitudes = m.to_vec();
            sal = saliency.map(<[f64]>::to_vec).unwrap_or_default();
        }
    }

    let nb_ticks = (frame_to_beat(total_frames as f64, fps, tempo_bpm)? * 4.0).round() as u64;
    let n_beats = (nb_ticks / 4) as u32;
    if n_beats == 0 {
        return Err(Error::InvalidArgument(
            "video shorter than one beat".into(),
        ));
    }
    let n_bars = n_beats.div_ceil(4);

    let mut speeds = Vec::with_capacity(n_bars as usize);
    for m in 1..=n_bars as usize {
        speeds.push(motion_speed(&magnitudes, m, fps, tempo_bpm)?);
    }
    let bar_density_class = classify_density(&speeds, dist)?;

    let detected = detect_visual_beats(&sal, fps, tempo_bpm);
    let mut ticks: Vec<(u64, f64)> = Vec::new();
    for vb in &detected {
        let g = snap_to_tick(vb, fps, tempo_bpm);
        if g >= u64::from(n_beats) * 4 {
            continue;
        }
        // Two beats snapping to one tick: keep the first.
        if ticks.last().is_none_or(|&(last, _)| g > last) {
            ticks.push((g, vb.saliency));
        }
    }
    let saliencies: Vec<f64> = ticks.iter().map(|&(_, s)| s).collect();
    let strengths = classify_strength(&saliencies, dist)?;
    let visual_beats = ticks
        .iter()
        .zip(&strengths)
        .map(|(&(g, _), &s)| RhythmBeat {
            bar: (g / u64::from(TICKS_PER_BAR)) as u32,
            tick: (g % u64::from(TICKS_PER_BAR)) as u8 + 1,
            strength: s,
        })
        .collect();

    let rhythm = VideoRhythm {
        tempo_bpm,
        n_beats,
        n_bars,
        bar_density_class,
        visual_beats,
        total_frames,
        fps,
    };
    rhythm.validate()?;
    Ok(rhythm)
}

// ---------------------------------------------------------------------------
// File ingestion: PGM frame directories, manifests, magnitude CSVs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameManifest {
    pub fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tempo: Option<f64>,
}

/// Parses a binary (P5) PGM image with an 8-bit max value.
pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<Gray> {
    let fail = |m: String| Error::Format {
        path: path.display().to_string(),
        message: m,
    };
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<String> {
        // Skip whitespace and '#' comments.
        loop {
            match bytes.get(*pos) {
                Some(b) if b.is_ascii_whitespace() => *pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(*pos) {
                        *pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(fail("unexpected EOF in header".into())),
            }
        }
        let start = *pos;
        while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            *pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    if token(&mut pos)? != "P5" {
        return Err(fail("not a P5 PGM".into()));
    }
    let width: usize = token(&mut pos)?.parse().map_err(|_| fail("bad width".into()))?;
    let height: usize = token(&mut pos)?.parse().map_err(|_| fail("bad height".into()))?;
    let maxval: usize = token(&mut pos)?.parse().map_err(|_| fail("bad maxval".into()))?;
    if maxval == 0 || maxval > 255 {
        return Err(fail(format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(fail(format!(
            "pixel data truncated: need {need}, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    Gray::new(width, height, bytes[pos..pos + need].to_vec())
}

pub fn write_pgm(frame: &Gray) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend_from_slice(&frame.data);
    out
}

/// Loads `manifest.json` plus `frame_%06d.pgm` files from a directory.
pub fn load_frame_dir(dir: &Path) -> Result<(FrameSeries, Option<f64>)> {
    let manifest = load_manifest(dir)?;
    let mut names: Vec<String> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("frame_") && name.ends_with(".pgm") {
            names.push(name);
        }
    }
    names.sort();
    if names.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "{}: found {} frames, need at least 2",
            dir.display(),
            names.len()
        )));
    }
    let mut frames = Vec::with_capacity(names.len());
    for name in &names {
        let path = dir.join(name);
        let mut bytes = Vec::new();
        fs::File::open(&path)?.read_to_end(&mut bytes)?;
        frames.push(parse_pgm(&bytes, &path)?);
    }
    Ok((FrameSeries::new(manifest.fps, frames)?, manifest.tempo))
}

pub fn load_manifest(dir: &Path) -> Result<FrameManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)?;
    let manifest: FrameManifest = serde_json::from_str(&text)?;
    if !(manifest.fps.is_finite() && manifest.fps > 0.0) {
        return Err(Error::Format {
            path: path.display().to_string(),
            message: format!("fps must be positive, got {}", manifest.fps),
        });
    }
    Ok(manifest)
}

/// Reads a one-value-per-line CSV of reals (used for precomputed magnitudes
/// and saliency series).
pub fn load_csv_column(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v: f64 = t.parse().map_err(|_| Error::Format {
            path: path.display().to_string(),
            message: format!("line {}: bad value '{t}'", lineno + 1),
        })?;
        out.push(v);
    }
    Ok(out)
}
