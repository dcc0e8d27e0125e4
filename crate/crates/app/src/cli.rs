//! Command-line interface.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use pathsearch_core::ingest::{tile_slide, Manifest, ManifestEntry, TilingConfig};
use pathsearch_core::model::{validate_corpus, Modality, Slide, SlidePair};
use pathsearch_core::pipeline::{evaluate, index_corpus, query_slide, IndexConfig, ModelSource, QueryOptions};
use pathsearch_core::synthetic::{paired_corpus, PairedCorpusConfig};
use pathsearch_core::vae::{train, TrainConfig};

use crate::persist::{load_index, save_index};
use crate::service::{serve, ServiceConfig};

pub const CORPUS_FILE: &str = "corpus.json";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] pathsearch_core::Error),
    #[error(transparent)]
    Persist(#[from] crate::persist::PersistError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "pathsearch", version, about = "Cross-modal H&E to mIF slide search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a manifest, load its slides and write a tiled corpus directory.
    Ingest(IngestArgs),
    /// Train the patch encoder on an ingested corpus.
    Train(TrainArgs),
    /// Build and save a search index.
    Index(IndexArgs),
    /// Rank indexed mIF slides for one H&E slide.
    Query(QueryArgs),
    /// Score query results against query metadata.
    Eval(EvalArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Write a synthetic paired corpus as PNG files and manifests.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub patch_size: usize,
    /// Defaults to the patch size (non-overlapping tiles).
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `ingest`.
    #[arg(long)]
    pub patches: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 256)]
    pub hidden: usize,
    #[arg(long, default_value_t = 256)]
    pub latent: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// Directory written by `ingest`.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k_graph: usize,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    #[arg(long, default_value_t = 2)]
    pub nprobe: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// A JSON file holding one manifest entry, or a slide id when
    /// `--manifest` is given.
    #[arg(long)]
    pub slide: String,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub top: usize,
    #[arg(long)]
    pub nprobe: Option<usize>,
    #[arg(long, conflicts_with = "table")]
    pub json: bool,
    #[arg(long)]
    pub table: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Manifest of H&E query slides.
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, default_value_t = 50.0)]
    pub dfs_threshold: f64,
    #[arg(long, default_value_t = 2)]
    pub top: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    #[arg(long, default_value_t = 4)]
    pub max_concurrent: usize,
    #[arg(long, default_value_t = 16 * 1024 * 1024)]
    pub body_limit: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub pairs: usize,
}

/// Contents of an ingested corpus directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusFile {
    pub tiling: TilingConfig,
    pub slides: Vec<Slide>,
    pub pairs: Vec<SlidePair>,
}

impl CorpusFile {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(CORPUS_FILE);
        if !path.exists() {
            return Err(CliError::Usage(format!("{} not found; run `ingest` first", path.display())));
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Index(a) => index_cmd(&a),
        Command::Query(a) => query_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Serve(a) => serve_cmd(&a),
        Command::Synth(a) => synth_cmd(&a),
    }
}

fn ingest(a: &IngestArgs) -> Result<()> {
    let tiling = TilingConfig {
        stride: a.stride.unwrap_or(a.patch_size),
        ..TilingConfig::non_overlapping(a.patch_size)
    };
    tiling.validate()?;
    let corpus = Manifest::read(&a.manifest)?.load()?;
    let summary = validate_corpus(&corpus.slides)?;
    let mut patch_count = 0;
    for s in &corpus.slides {
        patch_count += tile_slide(s, &tiling)?.iter().map(Vec::len).sum::<usize>();
    }
    fs::create_dir_all(&a.out)?;
    let file = CorpusFile {
        tiling,
        slides: corpus.slides,
        pairs: corpus.pairs,
    };
    fs::write(a.out.join(CORPUS_FILE), serde_json::to_string(&file)?)?;
    fs::write(a.out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "ingested {} slides ({} H&E, {} mIF), {} pairs, {} patches of {}px",
        file.slides.len(),
        summary.count(Modality::He),
        summary.count(Modality::Mif),
        file.pairs.len(),
        patch_count,
        tiling.patch_size
    );
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let corpus = CorpusFile::read(&a.patches)?;
    let mut patches = Vec::new();
    for s in &corpus.slides {
        patches.extend(tile_slide(s, &corpus.tiling)?.into_iter().flatten());
    }
    let cfg = TrainConfig {
        beta: a.beta,
        learning_rate: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        rng_seed: a.seed,
        hidden: a.hidden,
        latent: a.latent,
    };
    let outcome = train(&cfg, &patches)?;
    outcome.params.save(&a.out)?;
    let first = outcome.loss_trace.first().copied().unwrap_or(f64::NAN);
    let last = outcome.loss_trace.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained on {} patches for {} epochs: loss {first:.4} -> {last:.4}; wrote {}",
        patches.len(),
        cfg.epochs,
        a.out.display()
    );
    Ok(())
}

fn index_cmd(a: &IndexArgs) -> Result<()> {
    let corpus = CorpusFile::read(&a.corpus)?;
    let cfg = IndexConfig {
        tiling: corpus.tiling,
        k_graph: a.k_graph,
        top_k: a.top_k,
        nprobe: a.nprobe,
        seed: a.seed,
    };
    let index = index_corpus(&corpus.slides, &corpus.pairs, ModelSource::File(a.model.clone()), cfg)?;
    let bytes = save_index(&index, &a.out)?;
    let communities: Vec<usize> = index.channels.iter().map(|c| c.index.community_count()).collect();
    println!(
        "indexed {} latents over {} channels (communities {:?}); wrote {} bytes to {}",
        index.latent_count(),
        index.channels.len(),
        communities,
        bytes,
        a.out.display()
    );
    Ok(())
}

fn load_query_slide(slide: &str, manifest: Option<&Path>) -> Result<Slide> {
    match manifest {
        Some(path) => {
            let m = Manifest::read(path)?;
            let loaded = m.load()?;
            loaded
                .slides
                .into_iter()
                .find(|s| s.id() == slide)
                .ok_or_else(|| CliError::Usage(format!("slide {slide} not in {}", path.display())))
        }
        None => {
            let path = Path::new(slide);
            let mut entry: ManifestEntry = serde_json::from_str(&fs::read_to_string(path)?)?;
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            for ch in &mut entry.channels {
                if ch.path.is_relative() {
                    ch.path = base.join(&ch.path);
                }
            }
            Ok(entry.load()?)
        }
    }
}

fn query_cmd(a: &QueryArgs) -> Result<()> {
    let index = load_index(&a.index)?;
    let slide = load_query_slide(&a.slide, a.manifest.as_deref())?;
    let report = query_slide(
        &index,
        &slide,
        QueryOptions {
            top_n: a.top,
            nprobe: a.nprobe,
        },
    )?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        let rows = vec![(
            slide.metadata.clone(),
            report.results.iter().filter_map(|r| r.metadata.clone()).collect(),
        )];
        let table = pathsearch_core::pipeline::HitTable::from_pairs(&rows, pathsearch_core::pipeline::DEFAULT_DFS_THRESHOLD);
        print!("{}", table.to_text());
        if !a.table {
            let (p, c) = report.votes.shape();
            println!("{} ballots from {p} patches x {c} channels, {} candidates", report.votes.ballot_count(), report.candidate_count);
        }
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let index = load_index(&a.index)?;
    let queries: Vec<Slide> = Manifest::read(&a.queries)?
        .load()?
        .slides
        .into_iter()
        .filter(|s| s.modality == Modality::He)
        .collect();
    if queries.is_empty() {
        return Err(CliError::Usage("query manifest has no H&E slides".into()));
    }
    let table = evaluate(&index, &queries, a.top, a.dfs_threshold)?;
    print!("{}", table.to_text());
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_string_pretty(&table)?)?;
    }
    Ok(())
}

fn serve_cmd(a: &ServeArgs) -> Result<()> {
    let cfg = ServiceConfig {
        bind: a.bind,
        index_path: a.index.clone(),
        max_concurrent: a.max_concurrent,
        body_limit: a.body_limit,
    };
    cfg.validate().map_err(CliError::Usage)?;
    let index = load_index(&cfg.index_path)?;
    let runtime = tokio::runtime::Runtime::new()?;
    println!("serving {} on http://{}", cfg.index_path.display(), cfg.bind);
    runtime.block_on(serve(cfg, index))?;
    Ok(())
}

fn write_png(path: &Path, channel: &pathsearch_core::model::ChannelImage) -> Result<()> {
    let px: Vec<u8> = channel.pixels.iter().map(|v| (v * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(channel.width as u32, channel.height as u32, px)
        .ok_or_else(|| CliError::Usage("image buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

fn manifest_entry(dir: &Path, slide: &Slide, paired_with: Option<String>) -> Result<ManifestEntry> {
    let mut channels = Vec::new();
    for ch in &slide.channels {
        let name = format!("{}_{}.png", slide.id(), ch.channel_name);
        write_png(&dir.join(&name), ch)?;
        channels.push(pathsearch_core::ingest::ChannelEntry {
            channel_name: ch.channel_name.clone(),
            path: PathBuf::from(name),
        });
    }
    Ok(ManifestEntry {
        slide_id: slide.id().to_string(),
        modality: slide.modality,
        channels,
        metadata: Some(slide.metadata.to_csv_row()),
        paired_with,
    })
}

/// Writes `manifest.json` (training pairs plus held-out mIF slides),
/// `queries.json` (held-out H&E slides) and `truth.json`.
fn synth_cmd(a: &SynthArgs) -> Result<()> {
    let cfg = PairedCorpusConfig {
        test_pairs: a.pairs,
        train_pairs: a.pairs,
        seed: a.seed,
        ..PairedCorpusConfig::default()
    };
    let corpus = paired_corpus(&cfg)?;
    fs::create_dir_all(&a.out)?;
    let mut index_manifest = Manifest::default();
    for (pair, (he, mif)) in corpus.train_pairs.iter().zip(corpus.train_he.iter().zip(&corpus.train_mif)) {
        index_manifest.slides.push(manifest_entry(&a.out, he, Some(pair.mif.clone()))?);
        index_manifest.slides.push(manifest_entry(&a.out, mif, None)?);
    }
    for mif in &corpus.test_mif {
        index_manifest.slides.push(manifest_entry(&a.out, mif, None)?);
    }
    let mut queries = Manifest::default();
    for he in &corpus.test_he {
        queries.slides.push(manifest_entry(&a.out, he, None)?);
    }
    fs::write(a.out.join("manifest.json"), serde_json::to_string_pretty(&index_manifest)?)?;
    fs::write(a.out.join("queries.json"), serde_json::to_string_pretty(&queries)?)?;
    fs::write(a.out.join("truth.json"), serde_json::to_string_pretty(&corpus.test_truth)?)?;
    println!(
        "wrote {} index slides and {} queries to {}",
        index_manifest.slides.len(),
        queries.slides.len(),
        a.out.display()
    );
    Ok(())
}
