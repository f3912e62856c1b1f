use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use vidctx_core::align::{alignment_margin, read_pairs, rotation_pairs, train_alignment, ProjectionParams};
use vidctx_core::asr_refine::{chunks_to_records, read_utterances, refine_transcript, shots_for, NoHooks};
use vidctx_core::config::Config;
use vidctx_core::corpus::{
    build_hierarchies, read_records, read_shots, segments_from_records, segments_to_records, validate_hierarchy, write_records,
    Segment,
};
use vidctx_core::dedup::minimize_redundancy_grouped;
use vidctx_core::harness::{evaluate, read_corpus, write_corpus, generate_corpus, HarnessError, SynthSpec};
use vidctx_core::index::{load_index, save_index};
use vidctx_core::pipeline::{build_index, process_video, QueryEngine};
use vidctx_core::select::SelectionMode;

#[derive(Parser)]
#[command(name = "vidctx", version, about = "Budgeted context retrieval over textual video segment streams")]
struct Cli {
    /// TOML config; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Emit {
    Prompt,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted needles.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Validate segment JSONL and print the hierarchy it yields.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        /// Write the normalised records here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score, deduplicate and index a corpus.
    BuildIndex {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Trained projection used for cross-modal coherence.
        #[arg(long)]
        projection: Option<PathBuf>,
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Train the modality projections on paired embeddings.
    AlignTrain {
        /// JSONL of {"visual": [...], "audio": [...]}; omit to use a synthetic rotation task.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1024)]
        synthetic_pairs: usize,
        #[arg(long, default_value_t = 32)]
        synthetic_dim: usize,
    },
    /// Run redundancy removal and write its report.
    Dedup {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Write the retained segments here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Answer one question from a saved index.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        question: String,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        k0: Option<usize>,
        #[arg(long)]
        mode: Option<SelectionMode>,
        #[arg(long, value_enum, default_value = "prompt")]
        emit: Emit,
    },
    /// Evaluate needle recall on a synthetic corpus.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Evaluate against this index instead of building one.
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Turn ASR utterances into aligned transcript records.
    RefineAsr {
        #[arg(long)]
        utterances: PathBuf,
        #[arg(long)]
        shots: Option<PathBuf>,
        #[arg(long)]
        video: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn load_segments(path: &Path) -> Result<Vec<Segment>> {
    Ok(segments_from_records(read_records(open(path)?)?)?)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => Config::default(),
    };
    match cli.command {
        Command::Synth { spec, out, seed } => {
            let mut spec: SynthSpec = match spec {
                Some(p) => serde_json::from_reader(open(&p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => SynthSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let corpus = generate_corpus(&spec)?;
            write_corpus(&out, &spec, &corpus)?;
            println!("{} records, {} queries -> {}", corpus.records.len(), corpus.truth.queries.len(), out.display());
        }
        Command::Ingest { input, out } => {
            let segments = load_segments(&input)?;
            let hierarchies = build_hierarchies(&segments, &cfg.scale()?)?;
            let mut violations = 0;
            for h in &hierarchies {
                let v = validate_hierarchy(h);
                violations += v.len();
                let counts: Vec<usize> = (1..=h.depth()).map(|l| h.level(l).len()).collect();
                let video = h.level(1).first().map(|s| s.video_id.as_str()).unwrap_or("");
                println!("{video}: segments per level {counts:?}, violations {}", v.len());
            }
            if let Some(out) = out {
                write_records(create(&out)?, &segments_to_records(&segments))?;
            }
            if violations > 0 {
                bail!("{violations} hierarchy violations");
            }
        }
        Command::BuildIndex { input, out, projection, stats } => {
            let projection = projection.map(ProjectionParams::load).transpose()?;
            let built = build_index(&load_segments(&input)?, &cfg, projection.as_ref())?;
            save_index(&built.index, &out)?;
            println!(
                "{} videos, {} segments, {} indexed, compression {:.3}, {:.0} ms",
                built.stats.videos,
                built.stats.hierarchy_segments,
                built.stats.indexed,
                built.stats.dedup.compression_ratio(),
                built.stats.build_ms
            );
            if let Some(p) = stats {
                write_json(&p, &built.stats)?;
            }
        }
        Command::AlignTrain { pairs, out, synthetic_pairs, synthetic_dim } => {
            let pairs = match pairs {
                Some(p) => read_pairs(open(&p)?)?,
                None => rotation_pairs(synthetic_pairs, synthetic_dim, cfg.align_seed),
            };
            let Some(d_in) = pairs.first().map(|p| p.0.len()) else { bail!("no pairs") };
            let init = ProjectionParams::random(d_in, cfg.align_d_out, cfg.align_seed);
            let trained = train_alignment(&pairs, init, &cfg.train_schedule())?;
            let (pos, neg) = alignment_margin(&trained.params, &pairs);
            trained.params.save(&out)?;
            let last = trained.losses.last().copied().unwrap_or(f64::NAN);
            println!("{} steps, final loss {last:.4}, positive cosine {pos:.3}, negative cosine {neg:.3}", trained.losses.len());
        }
        Command::Dedup { input, report, out } => {
            let embedder = cfg.embedder();
            let mut segments = Vec::new();
            let mut scores = Vec::new();
            for h in build_hierarchies(&load_segments(&input)?, &cfg.scale()?)? {
                let v = process_video(h, &embedder, &cfg, None)?;
                for s in v.hierarchy.iter() {
                    scores.push(v.scores[&s.id]);
                    segments.push(s.clone());
                }
            }
            let outcome = minimize_redundancy_grouped(&segments, &scores, &embedder, &cfg.dedup_config());
            write_json(&report, &outcome.report)?;
            println!(
                "{} segments: {} retained, {} refined, {} dropped",
                segments.len(),
                outcome.report.retained().len(),
                outcome.report.refined().len(),
                outcome.report.dropped().len()
            );
            if let Some(out) = out {
                write_records(create(&out)?, &segments_to_records(&outcome.pool))?;
            }
        }
        Command::Query { index, question, budget, k0, mode, emit } => {
            let mut cfg = cfg;
            cfg.budget = budget.unwrap_or(cfg.budget);
            cfg.k0 = k0.unwrap_or(cfg.k0);
            cfg.mode = mode.unwrap_or(cfg.mode);
            cfg.validate()?;
            let engine = QueryEngine::new(load_index(&index)?, cfg);
            let result = engine.query(&question)?;
            match emit {
                Emit::Prompt => println!("{}", result.prompt),
                Emit::Json => println!("{}", serde_json::to_string_pretty(&result)?),
            }
        }
        Command::Eval { corpus, report, index } => {
            let data = read_corpus(&corpus)?;
            let (mut result, compression) = match index {
                Some(p) if !p.exists() => return Err(HarnessError::MissingIndex).with_context(|| p.display().to_string()),
                Some(p) => {
                    let engine = QueryEngine::new(load_index(&p)?, cfg.clone());
                    (evaluate(&engine, &data.truth, cfg.recall_k)?, None)
                }
                None => {
                    let built = build_index(&segments_from_records(data.records)?, &cfg, None)?;
                    let compression = built.stats.dedup.compression_ratio();
                    let engine = QueryEngine::new(built.index, cfg.clone());
                    (evaluate(&engine, &data.truth, cfg.recall_k)?, Some(compression))
                }
            };
            result.compression_ratio = compression;
            write_json(&report, &result)?;
            let show = |r: Option<f64>| r.map_or("n/a".to_string(), |v| format!("{v:.3}"));
            println!(
                "{} queries: recall@{} {}, bundle {}, cross-modal {}, both-needle {}, p95 {:.2} ms",
                result.queries,
                result.k,
                show(result.recall_at_k),
                show(result.bundle_recall),
                show(result.cross_modal_recall),
                show(result.both_needle_recall),
                result.latency.p95_ms
            );
        }
        Command::RefineAsr { utterances, shots, video, out } => {
            let mut utts = read_utterances(open(&utterances)?)?;
            utts.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
            let shots = match shots {
                Some(p) => shots_for(&video, &read_shots(open(&p)?)?),
                None => Vec::new(),
            };
            let chunks = refine_transcript(&utts, &shots, &cfg.refine_config(), &NoHooks);
            write_records(create(&out)?, &chunks_to_records(&video, &chunks))?;
            println!("{} utterances -> {} chunks", utts.len(), chunks.len());
        }
    }
    Ok(())
}
