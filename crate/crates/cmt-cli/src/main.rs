use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cmt_core::corpus;
use cmt_core::generate::{generate, GenerationConfig, SampledModel};
use cmt_core::metrics;
use cmt_core::model::oracle::OracleModel;
use cmt_core::model::sample::SamplingConfig;
use cmt_core::model::train::{train, write_loss_csv, TrainConfig, TrainPiece};
use cmt_core::model::{checkpoint, ModelConfig, ModelParams};
use cmt_core::tokens::{self, DecodeMode};
use cmt_core::types::{Genre, Instrument};
use cmt_core::video::{
    build_video_rhythm, load_csv_column, load_frame_dir, load_manifest, load_rhythm, save_rhythm,
    DensityDistribution, RhythmSource,
};
use cmt_core::{Error, ExecMode};

const DEFAULT_TEMPO: f64 = 120.0;

/// Exit codes: 0 success, 1 internal error, 2 usage error, 3 I/O error,
/// 4 format/schema error.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Io(_)) => 3,
        Some(
            Error::Json(_)
            | Error::SchemaVersion { .. }
            | Error::Format { .. }
            | Error::MidiParse { .. }
            | Error::TokenText { .. }
            | Error::Checkpoint(_),
        ) => 4,
        Some(Error::InvalidArgument(_)) => 2,
        Some(_) => 1,
        None => {
            if err.downcast_ref::<std::io::Error>().is_some() {
                3
            } else {
                1
            }
        }
    }
}

#[derive(Parser)]
#[command(
    name = "cmt",
    about = "Rhythm-controlled background music generation for video",
    version,
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a MIDI file to a compound-token text file (.cwt).
    Tokenize(TokenizeArgs),
    /// Convert a compound-token text file back to MIDI.
    Detokenize(DetokenizeArgs),
    /// Extract rhythm features (rhythm.json) from a frame directory.
    VideoFeatures(VideoFeaturesArgs),
    /// Train a model on a MIDI corpus with genre annotations.
    Train(TrainArgs),
    /// Generate music for a rhythm.json using a trained checkpoint.
    Generate(GenerateArgs),
    /// Rank corpus pieces by matching score against a rhythm.json.
    Match(MatchArgs),
    /// Evaluate objective metrics for a token file (and control errors
    /// against a rhythm.json when given).
    Eval(EvalArgs),
    /// Generate music with the rule-based oracle model (no checkpoint).
    OracleDemo(OracleDemoArgs),
}

#[derive(Args)]
struct TokenizeArgs {
    /// Input .mid file.
    input: PathBuf,
    /// Output token file (schema: one `TYPE beat density strength instrument
    /// pitch duration` line per token, `_` for None).
    #[arg(short, long, default_value = "out.cwt")]
    output: PathBuf,
    /// Genre written as the initial token.
    #[arg(long, default_value = "Pop")]
    genre: String,
}

#[derive(Args)]
struct DetokenizeArgs {
    /// Input .cwt token file.
    input: PathBuf,
    /// Output .mid file (SMF format 1, 480 PPQN).
    #[arg(short, long, default_value = "out.mid")]
    output: PathBuf,
    /// Tempo of the written file; the token format carries none.
    #[arg(long, default_value_t = DEFAULT_TEMPO)]
    tempo: f64,
    /// Repair strength/count mismatches instead of failing.
    #[arg(long)]
    tolerant: bool,
}

#[derive(Args)]
struct VideoFeaturesArgs {
    /// Directory of frame_%06d.pgm files plus manifest.json ({"fps", "tempo"?}).
    frames_dir: PathBuf,
    /// Output rhythm JSON (schema_version 1).
    #[arg(short, long, default_value = "rhythm.json")]
    output: PathBuf,
    /// Tempo override (default: manifest tempo, then 120).
    #[arg(long)]
    tempo: Option<f64>,
    /// Precomputed per-frame flow magnitudes (one value per line); skips
    /// in-process optical flow.
    #[arg(long)]
    flow_csv: Option<PathBuf>,
    /// Precomputed saliency values (one per line) for the flow-csv path;
    /// without it no visual beats are detected.
    #[arg(long)]
    saliency_csv: Option<PathBuf>,
    /// Density/strength distribution file from training (dist.bin,
    /// version 1); defaults to uniform class proportions.
    #[arg(long)]
    dist: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of <id>.mid files.
    corpus_dir: PathBuf,
    /// TSV mapping `id<TAB>genre` (header required).
    genres_tsv: PathBuf,
    /// Output directory for model.ckpt, losses.csv, corpus.cache, dist.bin.
    #[arg(short, long, default_value = "train_out")]
    out_dir: PathBuf,
    /// Desk-scale model (2 layers, width 128). This is the default.
    #[arg(long, conflicts_with = "paper_scale")]
    toy: bool,
    /// Full-scale model (12 layers, width 512).
    #[arg(long)]
    paper_scale: bool,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    /// Strip density/strength attributes from training data (ablation).
    #[arg(long)]
    ablate_rhythm_attrs: bool,
}

#[derive(Args)]
struct GenerateArgs {
    /// Trained checkpoint (binary container, version 1).
    checkpoint: PathBuf,
    /// Rhythm features of the target video (rhythm.json, schema_version 1).
    rhythm: PathBuf,
    /// Output prefix; writes <prefix>.mid, <prefix>.cwt, <prefix>.trace.jsonl.
    #[arg(short, long, default_value = "generated")]
    out_prefix: PathBuf,
    #[arg(long, default_value = "Pop")]
    genre: String,
    /// Comma-separated instrument subset (Drums,Piano,Guitar,Bass,Strings).
    #[arg(long, default_value = "Piano,Bass")]
    instruments: String,
    /// Control degree in [0,1].
    #[arg(long = "C", default_value_t = 0.7)]
    control_degree: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    max_tokens: usize,
}

#[derive(Args)]
struct MatchArgs {
    /// Rhythm features of the target video.
    rhythm: PathBuf,
    /// Corpus cache file (corpus.cache from `train`), or a corpus directory
    /// (then --genres is required and a cache sidecar is created).
    corpus_cache: PathBuf,
    #[arg(long)]
    genres: Option<PathBuf>,
    /// Output TSV of rank, id, matching score.
    #[arg(short, long, default_value = "ranking.tsv")]
    output: PathBuf,
    #[arg(short = 'k', long, default_value_t = 5)]
    top_k: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Input .cwt token file.
    input: PathBuf,
    /// Optional rhythm.json; enables control-error metrics.
    rhythm: Option<PathBuf>,
    /// Output report JSON (schema_version 1).
    #[arg(short, long, default_value = "report.json")]
    output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TEMPO)]
    tempo: f64,
}

#[derive(Args)]
struct OracleDemoArgs {
    /// Rhythm features of the target video.
    rhythm: PathBuf,
    #[arg(short, long, default_value = "oracle.mid")]
    output: PathBuf,
    #[arg(long, default_value = "Pop")]
    genre: String,
    #[arg(long, default_value = "Piano")]
    instruments: String,
    #[arg(long = "C", default_value_t = 1.0)]
    control_degree: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_genre(name: &str) -> anyhow::Result<Genre> {
    Genre::parse(name).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "unknown genre '{name}' (expected one of Country, Dance, Electronic, Metal, Pop, Rock)"
        ))
        .into()
    })
}

fn parse_instruments(list: &str) -> anyhow::Result<Vec<Instrument>> {
    let mut out = Vec::new();
    for part in list.split(',') {
        let name = part.trim();
        if name.is_empty() {
            continue;
        }
        let inst = Instrument::parse(name).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown instrument '{name}' (expected Drums, Piano, Guitar, Bass, Strings)"
            ))
        })?;
        out.push(inst);
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("empty instrument list".into()).into());
    }
    Ok(out)
}

/// CMT_THREADS caps worker parallelism for every subcommand.
fn init_thread_pool() {
    if let Ok(v) = std::env::var("CMT_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            cmt_core::par::set_thread_cap(n);
        }
    }
}

fn run() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Tokenize(args) => {
            let genre = parse_genre(&args.genre)?;
            let bytes = std::fs::read(&args.input)?;
            let score = cmt_core::midi::parse_midi(&bytes)?;
            let seq = tokens::encode(&score, genre, &score.instruments_present())?;
            std::fs::write(&args.output, tokens::to_cwt(&seq))?;
            println!("wrote {}", args.output.display());
        }
        Command::Detokenize(args) => {
            let text = std::fs::read_to_string(&args.input)?;
            let seq = tokens::from_cwt(&text)?;
            let mode = if args.tolerant {
                DecodeMode::Tolerant
            } else {
                DecodeMode::Strict
            };
            let score = tokens::decode(&seq, args.tempo, mode)?;
            std::fs::write(&args.output, cmt_core::midi::write_midi(&score)?)?;
            println!("wrote {}", args.output.display());
        }
        Command::VideoFeatures(args) => {
            let dist = match &args.dist {
                Some(path) => DensityDistribution::load(path)?,
                None => DensityDistribution::uniform(),
            };
            let rhythm = if let Some(flow_csv) = &args.flow_csv {
                let manifest = load_manifest(&args.frames_dir)?;
                let tempo = args.tempo.or(manifest.tempo).unwrap_or(DEFAULT_TEMPO);
                let magnitudes = load_csv_column(flow_csv)?;
                let saliency = args
                    .saliency_csv
                    .as_ref()
                    .map(|p| load_csv_column(p))
                    .transpose()?;
                build_video_rhythm(
                    RhythmSource::Precomputed {
                        fps: manifest.fps,
                        magnitudes: &magnitudes,
                        saliency: saliency.as_deref(),
                    },
                    tempo,
                    &dist,
                    ExecMode::default(),
                )?
            } else {
                let (series, manifest_tempo) = load_frame_dir(&args.frames_dir)?;
                let tempo = args.tempo.or(manifest_tempo).unwrap_or(DEFAULT_TEMPO);
                build_video_rhythm(
                    RhythmSource::Frames(&series),
                    tempo,
                    &dist,
                    ExecMode::default(),
                )?
            };
            save_rhythm(&rhythm, &args.output)?;
            println!(
                "wrote {} ({} beats, {} bars, {} visual beats)",
                args.output.display(),
                rhythm.n_beats,
                rhythm.n_bars,
                rhythm.visual_beats.len()
            );
        }
        Command::Train(args) => {
            std::fs::create_dir_all(&args.out_dir)?;
            let cache_path = args.out_dir.join("corpus.cache");
            let (entries, dist, report) = corpus::ingest_cached(
                &args.corpus_dir,
                &args.genres_tsv,
                &cache_path,
                ExecMode::default(),
            )?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            dist.save(&args.out_dir.join("dist.bin"))?;

            let config = if args.paper_scale {
                ModelConfig::paper()
            } else {
                ModelConfig::toy()
            };
            let mut params = ModelParams::init(config, args.seed)?;
            let pieces: Vec<TrainPiece> = entries
                .iter()
                .map(|e| TrainPiece {
                    tokens: e.tokens.clone(),
                    n_beats: f64::from(e.score.beats()),
                })
                .collect();
            let train_cfg = TrainConfig {
                epochs: args.epochs,
                batch_size: args.batch_size,
                seed: args.seed,
                ablate_rhythm_attrs: args.ablate_rhythm_attrs,
                ..TrainConfig::default()
            };
            let history = train(&mut params, &pieces, &train_cfg)?;
            let ckpt = args.out_dir.join("model.ckpt");
            checkpoint::save(&params, &ckpt)?;
            write_loss_csv(&args.out_dir.join("losses.csv"), &history)?;
            let first = history.first().map(|e| e.total).unwrap_or(0.0);
            let last = history.last().map(|e| e.total).unwrap_or(0.0);
            println!(
                "trained {} epochs on {} pieces: loss {first:.4} -> {last:.4}; wrote {}",
                history.len(),
                pieces.len(),
                ckpt.display()
            );
        }
        Command::Generate(args) => {
            let params = checkpoint::load(&args.checkpoint)?;
            let rhythm = load_rhythm(&args.rhythm)?;
            let cfg = GenerationConfig {
                genre: parse_genre(&args.genre)?,
                instruments: parse_instruments(&args.instruments)?,
                control_degree: args.control_degree,
                sampling: SamplingConfig::default(),
                seed: args.seed,
                max_tokens: args.max_tokens,
                density_guardrail: true,
            };
            let model = SampledModel {
                params: &params,
                sampling: cfg.sampling.clone(),
            };
            let out = generate(&model, &rhythm, &cfg)?;
            write_generation(&args.out_prefix, &out, rhythm.tempo_bpm)?;
        }
        Command::Match(args) => {
            let rhythm = load_rhythm(&args.rhythm)?;
            let entries = if args.corpus_cache.is_dir() {
                let genres = args.genres.clone().ok_or_else(|| {
                    Error::InvalidArgument(
                        "--genres is required when matching against a corpus directory".into(),
                    )
                })?;
                let cache_path = args.corpus_cache.join("corpus.cache");
                let (entries, _, report) = corpus::ingest_cached(
                    &args.corpus_cache,
                    &genres,
                    &cache_path,
                    ExecMode::default(),
                )?;
                for w in &report.warnings {
                    eprintln!("warning: {w}");
                }
                entries
            } else {
                corpus::load_cache(&args.corpus_cache)?.0
            };
            let ranked = corpus::match_top_k(&rhythm, &entries, args.top_k, ExecMode::default())?;
            let mut out = String::from("rank\tid\tmatching_score\n");
            for (rank, (id, ms)) in ranked.iter().enumerate() {
                out.push_str(&format!("{}\t{}\t{:.6e}\n", rank + 1, id, ms));
            }
            std::fs::write(&args.output, &out)?;
            print!("{out}");
        }
        Command::Eval(args) => {
            let text = std::fs::read_to_string(&args.input)?;
            let seq = tokens::from_cwt(&text)?;
            let rhythm = args.rhythm.as_ref().map(|p| load_rhythm(p)).transpose()?;
            let tempo = rhythm.as_ref().map(|r| r.tempo_bpm).unwrap_or(args.tempo);
            let score = tokens::decode(&seq, tempo, DecodeMode::Tolerant)?;
            let report = metrics::report_for_score(&score);
            let control = rhythm
                .as_ref()
                .map(|r| metrics::control_error(&seq, r))
                .transpose()?;
            let matching: Option<f64> = match rhythm.as_ref() {
                Some(r) => {
                    let d_v: Vec<f64> =
                        r.bar_density_class.iter().map(|&c| f64::from(c)).collect();
                    let s_v = corpus::rhythm_strength_vector(r);
                    Some(metrics::matching_score(
                        &metrics::density_vector(&score),
                        &d_v,
                        &metrics::strength_vector(&score),
                        &s_v,
                    )?)
                }
                None => None,
            };
            let json = serde_json::json!({
                "schema_version": 1,
                "pitch_entropy": report.pitch_entropy,
                "grooving_similarity": report.grooving_similarity,
                "structureness": report.structureness,
                "control_error": control,
                "matching_score": matching,
            });
            std::fs::write(&args.output, format!("{}\n", serde_json::to_string_pretty(&json)?))?;
            // One CSV row per piece for external aggregation.
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            println!(
                "{},{},{},{},{},{},{}",
                args.input.display(),
                fmt(report.pitch_entropy),
                fmt(report.grooving_similarity),
                fmt(report.structureness),
                fmt(control.map(|c| c.density_err)),
                fmt(control.map(|c| c.strength_err)),
                fmt(control.map(|c| c.time_err)),
            );
        }
        Command::OracleDemo(args) => {
            let rhythm = load_rhythm(&args.rhythm)?;
            let cfg = GenerationConfig {
                genre: parse_genre(&args.genre)?,
                instruments: parse_instruments(&args.instruments)?,
                control_degree: args.control_degree,
                seed: args.seed,
                ..GenerationConfig::default()
            };
            let out = generate(&OracleModel::default(), &rhythm, &cfg)?;
            let score = tokens::decode(&out.tokens, rhythm.tempo_bpm, DecodeMode::Strict)?;
            std::fs::write(&args.output, cmt_core::midi::write_midi(&score)?)?;
            println!(
                "wrote {} ({} bars, {} beats)",
                args.output.display(),
                score.n_bars,
                score.beats()
            );
        }
    }
    Ok(())
}

fn write_generation(
    prefix: &std::path::Path,
    out: &cmt_core::generate::GenerationOutput,
    tempo: f64,
) -> anyhow::Result<()> {
    let cwt_path = prefix.with_extension("cwt");
    let mid_path = prefix.with_extension("mid");
    let trace_path = prefix.with_extension("trace.jsonl");
    std::fs::write(&cwt_path, tokens::to_cwt(&out.tokens))?;
    std::fs::write(&trace_path, out.trace.to_jsonl())?;
    let score = tokens::decode(&out.tokens, tempo, DecodeMode::Tolerant)?;
    std::fs::write(&mid_path, cmt_core::midi::write_midi(&score)?)?;
    println!(
        "wrote {} {} {}",
        mid_path.display(),
        cwt_path.display(),
        trace_path.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    init_thread_pool();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
