//! Corpus ingestion, reference distributions and video-to-music matching.
//!
//! A corpus is a directory of `.mid` files plus a `genres.tsv` mapping file
//! ids to genres. Ingestion parses, tokenizes and precomputes each piece's
//! per-bar density and per-tick strength vectors; results are cached in a
//! content-hash-keyed binary sidecar so repeated runs skip re-tokenizing.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{density_vector, matching_score, strength_vector};
use crate::midi::{parse_midi, write_midi};
use crate::par::{map_slice, ExecMode};
use crate::tokens::{encode, TokenSequence};
use crate::types::{Genre, Instrument, NoteEvent, QuantizedScore, MAX_STRENGTH, TICKS_PER_BAR};
use crate::video::{DensityDistribution, VideoRhythm};

const CACHE_MAGIC: &[u8; 8] = b"CMTCACHE";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub genre: Genre,
    pub score: QuantizedScore,
    pub tokens: TokenSequence,
    /// Per-bar simu-note densities.
    pub d_m: Vec<f64>,
    /// Per-tick strengths, zeros at unoccupied ticks.
    pub s_m: Vec<f64>,
}

impl CorpusEntry {
    pub fn from_score(id: String, genre: Genre, score: QuantizedScore) -> Result<CorpusEntry> {
        let tokens = encode(&score, genre, &score.instruments_present())?;
        let d_m = density_vector(&score);
        let s_m = strength_vector(&score);
        Ok(CorpusEntry {
            id,
            genre,
            score,
            tokens,
            d_m,
            s_m,
        })
    }
}

/// Parses `genres.tsv` (`id<TAB>genre` with a header line).
pub fn parse_genres_tsv(text: &str, path: &Path) -> Result<BTreeMap<String, Genre>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "id\tgenre" => {}
        _ => {
            return Err(Error::Format {
                path: path.display().to_string(),
                message: "expected header 'id\\tgenre'".into(),
            })
        }
    }
    let mut map = BTreeMap::new();
    for (lineno, line) in lines {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let mut parts = t.split('\t');
        let (Some(id), Some(genre)) = (parts.next(), parts.next()) else {
            return Err(Error::Format {
                path: path.display().to_string(),
                message: format!("line {}: expected id<TAB>genre", lineno + 1),
            });
        };
        if let Some(g) = Genre::parse(genre.trim()) {
            map.insert(id.trim().to_string(), g);
        }
        // Unknown genre names are left unmapped; the file is skipped with a
        // warning during ingestion.
    }
    Ok(map)
}

#[derive(Debug, Default)]
pub struct IngestReport {
    pub warnings: Vec<String>,
}

/// Ingests every `.mid` file in `midi_dir` with a genre annotation.
/// Unparsable files and files without a genre are skipped with a warning;
/// an empty result is an error. Output is ordered by id.
pub fn ingest(
    midi_dir: &Path,
    genres_tsv: &Path,
    mode: ExecMode,
) -> Result<(Vec<CorpusEntry>, IngestReport)> {
    let genres = parse_genres_tsv(&fs::read_to_string(genres_tsv)?, genres_tsv)?;
    let mut ids: Vec<String> = Vec::new();
    for entry in fs::read_dir(midi_dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".mid") {
            ids.push(stem.to_string());
        }
    }
    ids.sort();

    let mut report = IngestReport::default();
    let mut tasks: Vec<(String, Genre)> = Vec::new();
    for id in ids {
        match genres.get(&id) {
            Some(&g) => tasks.push((id, g)),
            None => report
                .warnings
                .push(format!("{id}.mid: no genre annotation, skipped")),
        }
    }
    let results = map_slice(mode, &tasks, |(id, genre)| {
        let path = midi_dir.join(format!("{id}.mid"));
        let bytes = fs::read(&path).map_err(Error::Io)?;
        let score = parse_midi(&bytes)?;
        CorpusEntry::from_score(id.clone(), *genre, score)
    });
    let mut entries = Vec::new();
    for (task, result) in tasks.iter().zip(results) {
        match result {
            Ok(e) => entries.push(e),
            Err(err) => report
                .warnings
                .push(format!("{}.mid: {err}, skipped", task.0)),
        }
    }
    if entries.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok((entries, report))
}

/// Builds the quantile-classification reference from corpus statistics:
/// cumulative proportions of bar densities (1..=16, empty bars excluded) and
/// of per-tick strengths (1..=20).
pub fn density_distribution(entries: &[CorpusEntry]) -> Result<DensityDistribution> {
    if entries.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut density_hist = [0u64; 17];
    let mut strength_hist = [0u64; MAX_STRENGTH as usize + 1];
    for e in entries {
        for &d in &e.d_m {
            let d = d as usize;
            if d >= 1 {
                density_hist[d.min(16)] += 1;
            }
        }
        for &s in &e.s_m {
            let s = s as usize;
            if s >= 1 {
                strength_hist[s.min(MAX_STRENGTH as usize)] += 1;
            }
        }
    }
    let cum = |hist: &[u64], upto: usize| -> Result<Vec<f64>> {
        let total: u64 = hist.iter().sum();
        if total == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut out = Vec::with_capacity(upto);
        let mut acc = 0u64;
        for &count in &hist[1..=upto] {
            acc += count;
            out.push(acc as f64 / total as f64);
        }
        Ok(out)
    };
    let dist = DensityDistribution {
        density_cum: cum(&density_hist, 15)?,
        strength_cum: cum(&strength_hist, 19)?,
    };
    dist.validate()?;
    Ok(dist)
}

/// Builds the video-side strength vector on the same fixed-rate tick grid
/// the corpus vectors use: zeros everywhere except requested visual beats.
pub fn rhythm_strength_vector(rhythm: &VideoRhythm) -> Vec<f64> {
    let total = (rhythm.n_bars * TICKS_PER_BAR) as usize;
    let mut v = vec![0.0; total];
    for vb in &rhythm.visual_beats {
        let g = vb.global_tick() as usize;
        if g < total {
            v[g] = f64::from(vb.strength);
        }
    }
    v
}

/// Ranks corpus entries by matching score against a video rhythm. Ties break
/// by id; `k` larger than the corpus returns the full ranking.
pub fn match_top_k(
    rhythm: &VideoRhythm,
    entries: &[CorpusEntry],
    k: usize,
    mode: ExecMode,
) -> Result<Vec<(String, f64)>> {
    if entries.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let d_v: Vec<f64> = rhythm.bar_density_class.iter().map(|&c| f64::from(c)).collect();
    let s_v = rhythm_strength_vector(rhythm);
    let scores: Vec<Result<f64>> = map_slice(mode, entries, |e| {
        matching_score(&e.d_m, &d_v, &e.s_m, &s_v)
    });
    let mut ranked: Vec<(String, f64)> = Vec::with_capacity(entries.len());
    for (e, s) in entries.iter().zip(scores) {
        ranked.push((e.id.clone(), s?));
    }
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

// ---------------------------------------------------------------------------
// Cache sidecar
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CachePayload {
    entries: Vec<CorpusEntry>,
    dist: DensityDistribution,
}

fn fnv1a(bytes: &[u8], mut hash: u64) -> u64 {
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Content hash over the corpus inputs (sorted midi files + the genre TSV).
pub fn corpus_content_hash(midi_dir: &Path, genres_tsv: &Path) -> Result<u64> {
    let mut names: Vec<String> = Vec::new();
    for entry in fs::read_dir(midi_dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name.ends_with(".mid") {
            names.push(name);
        }
    }
    names.sort();
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for name in &names {
        hash = fnv1a(name.as_bytes(), hash);
        hash = fnv1a(&fs::read(midi_dir.join(name))?, hash);
    }
    hash = fnv1a(&fs::read(genres_tsv)?, hash);
    Ok(hash)
}

pub fn save_cache(
    path: &Path,
    entries: &[CorpusEntry],
    dist: &DensityDistribution,
    content_hash: u64,
) -> Result<()> {
    let payload = serde_json::to_vec(&CachePayload {
        entries: entries.to_vec(),
        dist: dist.clone(),
    })?;
    let mut out = Vec::with_capacity(payload.len() + 24);
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&content_hash.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    fs::write(path, out)?;
    Ok(())
}

pub fn load_cache(path: &Path) -> Result<(Vec<CorpusEntry>, DensityDistribution, u64)> {
    let bytes = fs::read(path)?;
    let fail = |m: &str| Error::Format {
        path: path.display().to_string(),
        message: m.to_string(),
    };
    if bytes.len() < 28 || &bytes[0..8] != CACHE_MAGIC {
        return Err(fail("not a corpus cache"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(Error::SchemaVersion {
            found: version,
            expected: CACHE_VERSION,
        });
    }
    let hash = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let len = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
    if bytes.len() != 28 + len {
        return Err(fail("truncated corpus cache"));
    }
    let payload: CachePayload = serde_json::from_slice(&bytes[28..])?;
    Ok((payload.entries, payload.dist, hash))
}

/// Loads the cache when it matches the corpus content, otherwise ingests and
/// rewrites it.
pub fn ingest_cached(
    midi_dir: &Path,
    genres_tsv: &Path,
    cache_path: &Path,
    mode: ExecMode,
) -> Result<(Vec<CorpusEntry>, DensityDistribution, IngestReport)> {
    let hash = corpus_content_hash(midi_dir, genres_tsv)?;
    if cache_path.exists() {
        if let Ok((entries, dist, cached_hash)) = load_cache(cache_path) {
            if cached_hash == hash {
                return Ok((entries, dist, IngestReport::default()));
            }
        }
    }
    let (entries, report) = ingest(midi_dir, genres_tsv, mode)?;
    let dist = density_distribution(&entries)?;
    save_cache(cache_path, &entries, &dist, hash)?;
    Ok((entries, dist, report))
}

// ---------------------------------------------------------------------------
// Synthetic toy corpus
// ---------------------------------------------------------------------------

/// Deterministic synthetic corpus for desk-scale training and tests: short
/// multi-track pieces with varied per-bar densities and chord strengths.
pub fn synthetic_corpus(n_pieces: usize, seed: u64) -> Vec<CorpusEntry> {
    let scale = [0u8, 2, 4, 5, 7, 9, 11];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_pieces);
    for i in 0..n_pieces {
        let genre = Genre::ALL[i % Genre::ALL.len()];
        let n_bars = 4 + (i % 3) as u32;
        let with_bass = i % 2 == 0;
        let with_drums = i % 3 == 0;
        let mut notes: Vec<NoteEvent> = Vec::new();
        for bar in 0..n_bars {
            let density = rng.random_range(2..=5u32);
            for t in 0..density {
                // Evenly spaced occupied ticks.
                let tick_in_bar = t * TICKS_PER_BAR / density + 1;
                let onset = bar * TICKS_PER_BAR + tick_in_bar - 1;
                let degree = scale[((bar + t) % 7) as usize];
                let root = 60 + degree;
                let chord = rng.random_range(1..=3usize);
                for offset in [0u8, 4, 7].iter().take(chord) {
                    notes.push(NoteEvent::new(root + offset, onset, 4, Instrument::Piano));
                }
                if with_bass && t == 0 {
                    notes.push(NoteEvent::new(36 + degree, onset, 8, Instrument::Bass));
                }
                if with_drums {
                    notes.push(NoteEvent::new(
                        if t == 0 { 36 } else { 42 },
                        onset,
                        1,
                        Instrument::Drums,
                    ));
                }
            }
        }
        let score = QuantizedScore::from_notes(120.0, notes).expect("synthetic piece is valid");
        let entry = CorpusEntry::from_score(format!("toy{i:03}"), genre, score)
            .expect("synthetic piece encodes");
        out.push(entry);
    }
    out
}

/// Writes a synthetic corpus as `.mid` files plus `genres.tsv` into `dir`.
pub fn write_synthetic_corpus_dir(dir: &Path, n_pieces: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let entries = synthetic_corpus(n_pieces, seed);
    let mut tsv = String::from("id\tgenre\n");
    for e in &entries {
        fs::write(dir.join(format!("{}.mid", e.id)), write_midi(&e.score)?)?;
        tsv.push_str(&format!("{}\t{}\n", e.id, e.genre.name()));
    }
    fs::write(dir.join("genres.tsv"), tsv)?;
    Ok(())
}
