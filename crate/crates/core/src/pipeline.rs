//! Corpus indexing, H&E query, hit-table evaluation and 2-D projection.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dtw::{dtw_align, fit_integration_map, matched_pairs, IntegrationMap};
use crate::error::{Error, Result};
use crate::index::{build_centroid_index, build_knn_graph, louvain, query_index, Partition, VectorIndex};
use crate::ingest::{tile, tile_slide, TilingConfig};
use crate::model::{ChannelImage, LatentSource, LatentVector, Modality, Patch, Slide, SlideMetadata, SlidePair};
use crate::vae::{encode_patch, train, TrainConfig, VaeParams};
use crate::voting::{collect_votes, rank_with_outcome, RankedResult, Round, VoteMatrix};

pub const DEFAULT_TOP_N: usize = 2;
pub const DEFAULT_DFS_THRESHOLD: f64 = 50.0;

/// Where the encoder comes from when building an index.
#[derive(Debug, Clone)]
pub enum ModelSource {
    Params(VaeParams),
    /// Train a shared encoder on every patch of the corpus.
    Train(TrainConfig),
    File(PathBuf),
}

impl ModelSource {
    fn resolve(self, patches: &[Patch]) -> Result<VaeParams> {
        match self {
            ModelSource::Params(p) => Ok(p),
            ModelSource::Train(cfg) => Ok(train(&cfg, patches)?.params),
            ModelSource::File(path) => {
                if !path.exists() {
                    return Err(Error::CheckpointMissing(path));
                }
                VaeParams::load(&path)
            }
        }
    }
}

/// Settings that, together with the corpus and encoder, fully determine
/// an index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexConfig {
    pub tiling: TilingConfig,
    pub k_graph: usize,
    /// Patches retrieved per (query patch, channel).
    pub top_k: usize,
    pub nprobe: usize,
    pub seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            tiling: TilingConfig::default(),
            k_graph: 10,
            top_k: 5,
            nprobe: 2,
            seed: 0,
        }
    }
}

impl IndexConfig {
    pub fn validate(&self) -> Result<()> {
        self.tiling.validate()?;
        if self.k_graph == 0 || self.top_k == 0 || self.nprobe == 0 {
            return Err(Error::InvalidConfig("k_graph, top_k and nprobe must be positive".into()));
        }
        Ok(())
    }
}

/// Retrieval index for one mIF channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelIndex {
    pub channel_index: usize,
    pub channel_name: String,
    /// Integrated latents grouped by community.
    pub index: VectorIndex,
    /// Latents before the integration map, in corpus order.
    pub raw: Vec<LatentVector>,
    pub modularity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusIndex {
    pub vae: VaeParams,
    pub integration: IntegrationMap,
    pub channels: Vec<ChannelIndex>,
    pub metadata: BTreeMap<String, SlideMetadata>,
    /// Latents of the H&E slides seen at build time.
    pub he_latents: Vec<LatentVector>,
    pub pairs: Vec<SlidePair>,
    pub config: IndexConfig,
}

impl CorpusIndex {
    pub fn latent_count(&self) -> usize {
        self.channels.iter().map(|c| c.index.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.latent_count() == 0
    }

    pub fn slides(&self, modality: Option<Modality>) -> Vec<&SlideMetadata> {
        let mif: std::collections::BTreeSet<&str> = self
            .channels
            .iter()
            .flat_map(|c| c.index.members().map(|m| m.source.slide_id.as_str()))
            .collect();
        self.metadata
            .values()
            .filter(|m| match modality {
                None => true,
                Some(Modality::Mif) => mif.contains(m.slide_id.as_str()),
                Some(Modality::He) => !mif.contains(m.slide_id.as_str()),
            })
            .collect()
    }
}

fn encode_all(vae: &VaeParams, patches: &[Patch], modality: Modality) -> Result<Vec<LatentVector>> {
    patches
        .iter()
        .map(|p| {
            Ok(LatentVector {
                source: LatentSource::from(p),
                values: encode_patch(vae, p)?.mu,
                modality,
            })
        })
        .collect()
}

/// Partitions one channel's latents. Tiny or edgeless graphs collapse to a
/// single community.
fn partition_channel(latents: &[LatentVector], cfg: &IndexConfig) -> Result<(Partition, f64)> {
    if latents.len() < 2 {
        return Ok((Partition::single(latents.len()), 0.0));
    }
    let values: Vec<&[f64]> = latents.iter().map(|l| l.values.as_slice()).collect();
    let graph = build_knn_graph(&values, cfg.k_graph.min(latents.len() - 1))?;
    match louvain(&graph, cfg.seed) {
        Ok(res) => Ok((res.partition, res.modularity)),
        Err(Error::EmptyGraph) => Ok((Partition::single(latents.len()), 0.0)),
        Err(e) => Err(e),
    }
}

/// Tiles and encodes every slide, fits the mIF→H&E map on DTW-matched
/// latents of the given pairs (identity when there are none), and builds a
/// community index per mIF channel.
pub fn index_corpus(slides: &[Slide], pairs: &[SlidePair], model: ModelSource, cfg: IndexConfig) -> Result<CorpusIndex> {
    cfg.validate()?;
    if !slides.iter().any(|s| s.modality == Modality::Mif) {
        return Err(Error::NoMifSlides);
    }
    let mut tiled = Vec::with_capacity(slides.len());
    for s in slides {
        tiled.push(tile_slide(s, &cfg.tiling)?);
    }
    let all_patches: Vec<Patch> = tiled.iter().flatten().flatten().cloned().collect();
    let vae = model.resolve(&all_patches)?;

    let mut metadata = BTreeMap::new();
    let mut he_latents = Vec::new();
    let mut he_seqs: BTreeMap<&str, Vec<LatentVector>> = BTreeMap::new();
    let mut mif_channels: BTreeMap<usize, (String, Vec<LatentVector>)> = BTreeMap::new();
    let mut mif_seqs: BTreeMap<(&str, usize), Vec<LatentVector>> = BTreeMap::new();
    for (slide, channels) in slides.iter().zip(&tiled) {
        if metadata.insert(slide.id().to_string(), slide.metadata.clone()).is_some() {
            return Err(Error::DuplicateSlideId(slide.id().to_string()));
        }
        for (image, patches) in slide.channels.iter().zip(channels) {
            let latents = encode_all(&vae, patches, slide.modality)?;
            match slide.modality {
                Modality::He => {
                    he_latents.extend(latents.iter().cloned());
                    he_seqs.insert(slide.id(), latents);
                }
                Modality::Mif => {
                    let entry = mif_channels
                        .entry(image.channel_index)
                        .or_insert_with(|| (image.channel_name.clone(), Vec::new()));
                    entry.1.extend(latents.iter().cloned());
                    mif_seqs.insert((slide.id(), image.channel_index), latents);
                }
            }
        }
    }

    let mut used_pairs: Vec<SlidePair> = Vec::new();
    let mut matched: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for pair in pairs {
        let he = he_seqs
            .get(pair.he.as_str())
            .ok_or_else(|| Error::InvalidSlide(format!("paired H&E slide {} not in corpus", pair.he)))?;
        let mut found = false;
        for ((_, _), mif) in mif_seqs.range((pair.mif.as_str(), 0)..=(pair.mif.as_str(), usize::MAX)) {
            found = true;
            let a: Vec<&[f64]> = mif.iter().map(|l| l.values.as_slice()).collect();
            let b: Vec<&[f64]> = he.iter().map(|l| l.values.as_slice()).collect();
            let alignment = dtw_align(&a, &b)?;
            for (m, h) in matched_pairs(&alignment, &a, &b) {
                matched.push((m.to_vec(), h.to_vec()));
            }
        }
        if !found {
            return Err(Error::InvalidSlide(format!("paired mIF slide {} not in corpus", pair.mif)));
        }
        used_pairs.push(pair.clone());
    }
    used_pairs.sort();
    used_pairs.dedup();
    let integration = if matched.is_empty() {
        IntegrationMap::identity(vae.shape.latent)
    } else {
        fit_integration_map(&matched)?
    };

    let mut channels = Vec::with_capacity(mif_channels.len());
    for (channel_index, (channel_name, raw)) in mif_channels {
        let integrated = crate::dtw::apply_integration(&integration, &raw)?;
        let (partition, modularity) = partition_channel(&integrated, &cfg)?;
        channels.push(ChannelIndex {
            channel_index,
            channel_name,
            index: build_centroid_index(integrated, &partition)?,
            raw,
            modularity,
        });
    }

    Ok(CorpusIndex {
        vae,
        integration,
        channels,
        metadata,
        he_latents,
        pairs: used_pairs,
        config: cfg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryOptions {
    pub top_n: usize,
    /// Communities probed per channel; `None` uses the index default. Values
    /// above a channel's community count probe every community.
    pub nprobe: Option<usize>,
}

impl Default for QueryOptions {
    fn default() -> Self {
        Self {
            top_n: DEFAULT_TOP_N,
            nprobe: None,
        }
    }
}

/// Wall-clock milliseconds per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub tile_ms: f64,
    pub encode_ms: f64,
    pub retrieve_ms: f64,
    pub vote_ms: f64,
}

/// Per-feature agreement between a query and one result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitFlags {
    pub group: bool,
    pub diagnosis: bool,
    pub location: bool,
    pub budding: bool,
    pub dfs_delta: f64,
    pub dfs: bool,
}

impl HitFlags {
    pub fn compare(query: &SlideMetadata, result: &SlideMetadata, dfs_threshold: f64) -> Self {
        let dfs_delta = (query.dfs_months - result.dfs_months).abs();
        Self {
            group: query.group == result.group,
            diagnosis: query.diagnosis == result.diagnosis,
            location: query.location == result.location,
            budding: query.budding_grade == result.budding_grade,
            dfs_delta,
            dfs: dfs_delta < dfs_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    #[serde(flatten)]
    pub ranked: RankedResult,
    pub metadata: Option<SlideMetadata>,
    /// Present when the query carries metadata.
    pub hits: Option<HitFlags>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryReport {
    pub query_id: String,
    pub query_metadata: Option<SlideMetadata>,
    pub results: Vec<ReportRow>,
    /// Candidates in the full ranking, before truncation to `top_n`.
    pub candidate_count: usize,
    pub votes: VoteMatrix,
    pub rounds: Vec<Round>,
    pub timings: Timings,
}

impl PartialEq for QueryReport {
    fn eq(&self, other: &Self) -> bool {
        self.query_id == other.query_id
            && self.query_metadata == other.query_metadata
            && self.results == other.results
            && self.candidate_count == other.candidate_count
            && self.votes == other.votes
            && self.rounds == other.rounds
    }
}

fn millis(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Queries the index with a single grayscale image. `query_metadata`, when
/// given, is compared against each result with the default DFS threshold.
pub fn query_image(
    index: &CorpusIndex,
    query_id: &str,
    image: &ChannelImage,
    query_metadata: Option<&SlideMetadata>,
    opts: QueryOptions,
) -> Result<QueryReport> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if opts.top_n == 0 {
        return Err(Error::InvalidConfig("top_n must be at least 1".into()));
    }
    let t = Instant::now();
    let patches = tile(query_id, image, &index.config.tiling)?;
    let tile_ms = millis(t);

    let t = Instant::now();
    let latents = encode_all(&index.vae, &patches, Modality::He)?;
    let encode_ms = millis(t);

    let t = Instant::now();
    let nprobe = opts.nprobe.unwrap_or(index.config.nprobe).max(1);
    let mut results = Vec::with_capacity(latents.len());
    for q in &latents {
        let mut row = Vec::with_capacity(index.channels.len());
        for ch in &index.channels {
            if ch.index.is_empty() {
                row.push(Vec::new());
                continue;
            }
            let probe = nprobe.min(ch.index.community_count());
            row.push(query_index(&ch.index, &q.values, index.config.top_k, probe)?);
        }
        results.push(row);
    }
    let retrieve_ms = millis(t);

    let t = Instant::now();
    let positions: Vec<(usize, usize)> = patches.iter().map(|p| (p.grid_row, p.grid_col)).collect();
    let channel_ids: Vec<usize> = index.channels.iter().map(|c| c.channel_index).collect();
    let votes = collect_votes(&positions, &channel_ids, &results)?;
    let (ranked, outcome) = rank_with_outcome(&votes)?;
    let vote_ms = millis(t);

    let candidate_count = ranked.len();
    let rows = ranked
        .into_iter()
        .take(opts.top_n)
        .map(|r| {
            let metadata = index.metadata.get(&r.slide_id).cloned();
            let hits = match (query_metadata, &metadata) {
                (Some(q), Some(m)) => Some(HitFlags::compare(q, m, DEFAULT_DFS_THRESHOLD)),
                _ => None,
            };
            ReportRow {
                ranked: r,
                metadata,
                hits,
            }
        })
        .collect();
    Ok(QueryReport {
        query_id: query_id.to_string(),
        query_metadata: query_metadata.cloned(),
        results: rows,
        candidate_count,
        votes,
        rounds: outcome.rounds,
        timings: Timings {
            tile_ms,
            encode_ms,
            retrieve_ms,
            vote_ms,
        },
    })
}

/// Ranks indexed mIF slides by similarity to an H&E slide.
pub fn query_slide(index: &CorpusIndex, he_slide: &Slide, opts: QueryOptions) -> Result<QueryReport> {
    if he_slide.modality != Modality::He {
        return Err(Error::WrongModality(he_slide.modality));
    }
    query_image(index, he_slide.id(), &he_slide.channels[0], Some(&he_slide.metadata), opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitCell {
    pub slide_id: String,
    pub metadata: SlideMetadata,
    pub flags: HitFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRow {
    pub query: SlideMetadata,
    pub results: Vec<HitCell>,
}

/// Fraction of (query, result) cells that hit, per feature.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HitRates {
    pub group: f64,
    pub diagnosis: f64,
    pub location: f64,
    pub budding: f64,
    pub dfs: f64,
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitTable {
    pub dfs_threshold: f64,
    pub rows: Vec<HitRow>,
    pub rates: HitRates,
}

impl HitTable {
    /// Builds the table from query metadata and the metadata of its
    /// returned results, best first.
    pub fn from_pairs(rows: &[(SlideMetadata, Vec<SlideMetadata>)], dfs_threshold: f64) -> Self {
        let rows: Vec<HitRow> = rows
            .iter()
            .map(|(q, results)| HitRow {
                query: q.clone(),
                results: results
                    .iter()
                    .map(|r| HitCell {
                        slide_id: r.slide_id.clone(),
                        metadata: r.clone(),
                        flags: HitFlags::compare(q, r, dfs_threshold),
                    })
                    .collect(),
            })
            .collect();
        let mut rates = HitRates::default();
        for cell in rows.iter().flat_map(|r| &r.results) {
            let f = cell.flags;
            rates.cells += 1;
            rates.group += f64::from(u8::from(f.group));
            rates.diagnosis += f64::from(u8::from(f.diagnosis));
            rates.location += f64::from(u8::from(f.location));
            rates.budding += f64::from(u8::from(f.budding));
            rates.dfs += f64::from(u8::from(f.dfs));
        }
        if rates.cells > 0 {
            let n = rates.cells as f64;
            for v in [&mut rates.group, &mut rates.diagnosis, &mut rates.location, &mut rates.budding, &mut rates.dfs] {
                *v /= n;
            }
        }
        Self {
            dfs_threshold,
            rows,
            rates,
        }
    }

    /// Rebuilds every flag from the stored metadata.
    pub fn recompute(&self) -> Self {
        let rows: Vec<(SlideMetadata, Vec<SlideMetadata>)> = self
            .rows
            .iter()
            .map(|r| (r.query.clone(), r.results.iter().map(|c| c.metadata.clone()).collect()))
            .collect();
        Self::from_pairs(&rows, self.dfs_threshold)
    }

    /// Aligned plain-text table. Hits are marked with `*`.
    pub fn to_text(&self) -> String {
        let header = ["Query", "Result", "Group", "Diagnosis", "Location", "Bud", "DFS"];
        let mut lines: Vec<[String; 7]> = vec![header.map(String::from)];
        let mark = |v: String, hit: bool| if hit { format!("{v}*") } else { v };
        for row in &self.rows {
            let q = &row.query;
            lines.push([
                q.slide_id.clone(),
                "-".into(),
                q.group.to_string(),
                q.diagnosis.to_string(),
                q.location.to_string(),
                q.budding_grade.to_string(),
                format!("{:.2}", q.dfs_months),
            ]);
            for (i, cell) in row.results.iter().enumerate() {
                let (m, f) = (&cell.metadata, cell.flags);
                lines.push([
                    String::new(),
                    format!("{}: {}", i + 1, cell.slide_id),
                    mark(m.group.to_string(), f.group),
                    mark(m.diagnosis.to_string(), f.diagnosis),
                    mark(m.location.to_string(), f.location),
                    mark(m.budding_grade.to_string(), f.budding),
                    mark(format!("{:.2}", m.dfs_months), f.dfs),
                ]);
            }
        }
        let mut widths = [0usize; 7];
        for l in &lines {
            for (w, cell) in widths.iter_mut().zip(l) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        for l in &lines {
            let cells: Vec<String> = l.iter().zip(widths).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        let r = &self.rates;
        let _ = writeln!(
            out,
            "hit rates over {} results: group {:.2}, diagnosis {:.2}, location {:.2}, bud {:.2}, dfs {:.2}",
            r.cells, r.group, r.diagnosis, r.location, r.budding, r.dfs
        );
        out
    }
}

/// Runs each query and scores its top results against the query metadata.
pub fn evaluate(index: &CorpusIndex, queries: &[Slide], top_n: usize, dfs_threshold: f64) -> Result<HitTable> {
    let mut rows = Vec::with_capacity(queries.len());
    for q in queries {
        let report = query_slide(index, q, QueryOptions { top_n, nprobe: None })?;
        let results = report
            .results
            .into_iter()
            .map(|r| {
                r.metadata
                    .ok_or_else(|| Error::InvalidSlide(format!("result {} has no metadata", r.ranked.slide_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((q.metadata.clone(), results));
    }
    Ok(HitTable::from_pairs(&rows, dfs_threshold))
}

/// Eigenvalues below this fraction of the largest are treated as zero.
const PCA_RANK_TOL: f64 = 1e-12;

/// Projects latents onto their top two principal axes. Each axis is signed
/// so its first nonzero component is positive; an axis with no variance
/// yields a zero coordinate.
pub fn project_2d(latents: &[LatentVector]) -> Result<Vec<(f64, f64)>> {
    let rows: Vec<&[f64]> = latents.iter().map(|l| l.values.as_slice()).collect();
    project_rows(&rows)
}

pub fn project_rows(rows: &[&[f64]]) -> Result<Vec<(f64, f64)>> {
    if rows.len() < 2 {
        return Err(Error::TooFewPoints(rows.len()));
    }
    let dim = rows[0].len();
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::VectorDimension(dim, r.len()));
    }
    let n = rows.len();
    let mut mean = vec![0.0; dim];
    for r in rows {
        mean.iter_mut().zip(r.iter()).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, dim, |i, j| rows[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = order.first().map_or(0.0, |&i| eig.eigenvalues[i]);
    if !(top > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let axis = |k: usize| -> Option<Vec<f64>> {
        let &i = order.get(k)?;
        if eig.eigenvalues[i] <= PCA_RANK_TOL * top {
            return None;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        if v.iter().find(|x| **x != 0.0).is_some_and(|x| *x < 0.0) {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        Some(v)
    };
    let (a1, a2) = (axis(0), axis(1));
    let dot = |i: usize, a: &Option<Vec<f64>>| -> f64 {
        a.as_ref()
            .map_or(0.0, |a| centered.row(i).iter().zip(a).map(|(x, y)| x * y).sum())
    };
    Ok((0..n).map(|i| (dot(i, &a1), dot(i, &a2))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ChannelImage, Diagnosis, Location};
    use crate::vae::VaeShape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meta(id: &str, group: u8, diagnosis: Diagnosis, location: Location, bud: u8, dfs: f64) -> SlideMetadata {
        SlideMetadata {
            slide_id: id.into(),
            group,
            diagnosis,
            location,
            budding_grade: bud,
            dfs_months: dfs,
        }
    }

    fn slide(id: &str, modality: Modality, channels: usize, side: usize, rng: &mut ChaCha8Rng) -> Slide {
        let chans = (0..channels)
            .map(|c| {
                let px = (0..side * side).map(|_| rng.random::<f64>()).collect();
                ChannelImage::new(c, format!("c{c}"), side, side, px).unwrap()
            })
            .collect();
        Slide::new(meta(id, 1, Diagnosis::Ad, Location::Rec, 1, 10.0), modality, chans).unwrap()
    }

    fn small_config() -> IndexConfig {
        IndexConfig {
            tiling: TilingConfig::non_overlapping(8),
            ..IndexConfig::default()
        }
    }

    fn params() -> VaeParams {
        VaeParams::init(VaeShape::new(8, 8, 4), &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn count_conservation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let slides = vec![slide("M", Modality::Mif, 2, 16, &mut rng)];
        let idx = index_corpus(&slides, &[], ModelSource::Params(params()), small_config()).unwrap();
        assert_eq!(idx.latent_count(), 8);
        assert_eq!(idx.channels.len(), 2);
        assert_eq!(idx.integration, IntegrationMap::identity(4));
    }

    #[test]
    fn rejects_bad_corpora() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let he = vec![slide("H", Modality::He, 1, 16, &mut rng)];
        assert!(matches!(
            index_corpus(&he, &[], ModelSource::Params(params()), small_config()),
            Err(Error::NoMifSlides)
        ));
        let mif = vec![slide("M", Modality::Mif, 1, 16, &mut rng)];
        let missing = PathBuf::from("/nonexistent/model.bin");
        assert!(matches!(
            index_corpus(&mif, &[], ModelSource::File(missing), small_config()),
            Err(Error::CheckpointMissing(_))
        ));
    }

    #[test]
    fn query_contract_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut slides: Vec<Slide> = (0..4).map(|i| slide(&format!("M{i}"), Modality::Mif, 3, 16, &mut rng)).collect();
        slides.push(slide("H0", Modality::He, 1, 16, &mut rng));
        let pairs = vec![SlidePair {
            he: "H0".into(),
            mif: "M0".into(),
        }];
        let build = || index_corpus(&slides, &pairs, ModelSource::Params(params()), small_config()).unwrap();
        let idx = build();
        assert_eq!(idx, build());
        assert_ne!(idx.integration, IntegrationMap::identity(4));

        let query = slide("Q", Modality::He, 1, 24, &mut rng);
        let report = query_slide(&idx, &query, QueryOptions::default()).unwrap();
        assert_eq!(report.results.len(), 2);
        assert_eq!(report.votes.shape(), (9, 3));
        assert_eq!(report.votes.ballot_count(), 27);
        let ranks: Vec<usize> = report.results.iter().map(|r| r.ranked.final_rank).collect();
        assert_eq!(ranks, vec![1, 2]);
        assert!(report.results.iter().all(|r| r.metadata.is_some() && r.hits.is_some()));
        assert_eq!(report, query_slide(&idx, &query, QueryOptions::default()).unwrap());

        let mif = slide("X", Modality::Mif, 3, 16, &mut rng);
        assert!(matches!(
            query_slide(&idx, &mif, QueryOptions::default()),
            Err(Error::WrongModality(Modality::Mif))
        ));
    }

    #[test]
    fn hit_flags_follow_rule() {
        let q = meta("q", 1, Diagnosis::Mu, Location::Cec, 2, 127.67);
        let r = meta("r", 1, Diagnosis::Ad, Location::Sig, 3, 94.80);
        let f = HitFlags::compare(&q, &r, 50.0);
        assert!(f.group && !f.diagnosis && !f.location && !f.budding);
        assert!(f.dfs);
        assert!((f.dfs_delta - 32.87).abs() < 1e-9);
        let same = HitFlags::compare(&q, &q, 50.0);
        assert!(same.group && same.diagnosis && same.location && same.budding && same.dfs);
    }

    #[test]
    fn hit_table_rates_and_text() {
        let q = meta("reg055", 1, Diagnosis::Ad, Location::Rec, 3, 22.15);
        let r1 = meta("a", 1, Diagnosis::Ad, Location::Rec, 3, 22.15);
        let r2 = meta("b", 2, Diagnosis::Mu, Location::Rec, 3, 32.97);
        let t = HitTable::from_pairs(&[(q, vec![r1, r2])], 50.0);
        assert_eq!(t.rates.cells, 2);
        assert_eq!((t.rates.group, t.rates.location, t.rates.dfs), (0.5, 1.0, 1.0));
        assert_eq!(t, t.recompute());
        let text = t.to_text();
        let header: Vec<&str> = text.lines().next().unwrap().split_whitespace().collect();
        assert_eq!(header, ["Query", "Result", "Group", "Diagnosis", "Location", "Bud", "DFS"]);
        assert!(text.contains("Ad*"));
        assert!(text.contains("32.97*"));
    }

    #[test]
    fn projection_of_planar_data_is_identity() {
        let pts: Vec<Vec<f64>> = vec![vec![3.0, 0.0], vec![-3.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        let rows: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let out = project_rows(&rows).unwrap();
        for (p, o) in pts.iter().zip(&out) {
            assert!((p[0] - o.0).abs() < 1e-12 && (p[1] - o.1).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_of_collinear_data() {
        let dir = [1.0, -2.0, 0.5, 3.0];
        let pts: Vec<Vec<f64>> = [-1.0, 0.5, 2.0].iter().map(|t| dir.iter().map(|d| d * t + 1.0).collect()).collect();
        let rows: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let out = project_rows(&rows).unwrap();
        assert!(out.iter().all(|p| p.1 == 0.0));
        assert!(out[0].0 < out[1].0 && out[1].0 < out[2].0);
    }

    #[test]
    fn projection_rejections() {
        let a = [1.0, 2.0];
        assert!(matches!(project_rows(&[&a]), Err(Error::TooFewPoints(1))));
        assert!(matches!(project_rows(&[&a, &a, &a]), Err(Error::ZeroVariance)));
    }

    #[test]
    fn projection_matches_svd_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, d) = (60, 6);
        let scale = [5.0, 3.0, 1.5, 1.0, 0.5, 0.2];
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|j| scale[j] * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect())
            .collect();
        let rows: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let proj = project_rows(&rows).unwrap();
        let ours: f64 = proj.iter().map(|(x, y)| x * x + y * y).sum();

        let mean: Vec<f64> = (0..d).map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
        let m = DMatrix::from_fn(n, d, |i, j| pts[i][j] - mean[j]);
        let total: f64 = m.iter().map(|v| v * v).sum();
        let mut sv: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let oracle_residual = total - sv[0] * sv[0] - sv[1] * sv[1];
        assert!(((total - ours) - oracle_residual).abs() < 1e-8);
    }
}
