//! Seeded synthetic data: two-cluster patch sets and paired H&E/mIF
//! pseudo-slides rendered from a shared field.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::model::{ChannelImage, Diagnosis, Location, Modality, Patch, Slide, SlideMetadata, SlidePair};

/// `n` patches of side `size` split between a dark smooth cluster and a
/// bright striped one, with per-pixel jitter.
pub fn two_cluster_patches(n: usize, size: usize, seed: u64) -> Vec<Patch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let bright = i % 2 == 1;
            let pixels = (0..size * size)
                .map(|k| {
                    let (r, c) = (k / size, k % size);
                    let base = if bright {
                        if (r + c) % 2 == 0 { 0.85 } else { 0.65 }
                    } else {
                        0.15 + 0.1 * (r as f64 / size as f64)
                    };
                    (base + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0)
                })
                .collect();
            Patch {
                slide_id: format!("p{i}"),
                channel_index: 0,
                grid_row: 0,
                grid_col: 0,
                size,
                pixels,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedCorpusConfig {
    /// Held-out pairs whose H&E slides are queried.
    pub test_pairs: usize,
    /// Pairs with known pairing used to fit the integration map.
    pub train_pairs: usize,
    pub side: usize,
    pub mif_channels: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for PairedCorpusConfig {
    fn default() -> Self {
        Self {
            test_pairs: 20,
            train_pairs: 20,
            side: 32,
            mif_channels: 3,
            noise: 0.02,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PairedCorpus {
    pub train_he: Vec<Slide>,
    pub train_mif: Vec<Slide>,
    pub train_pairs: Vec<SlidePair>,
    pub test_he: Vec<Slide>,
    pub test_mif: Vec<Slide>,
    /// Ground truth for the held-out pairs; never given to the indexer.
    pub test_truth: Vec<SlidePair>,
}

impl PairedCorpus {
    /// Everything the indexer sees: training slides of both modalities and
    /// the held-out mIF slides.
    pub fn index_slides(&self) -> Vec<Slide> {
        self.train_he
            .iter()
            .chain(&self.train_mif)
            .chain(&self.test_mif)
            .cloned()
            .collect()
    }
}

/// Per-slide parameters of the shared field.
#[derive(Debug, Clone, Copy)]
struct FieldParams {
    angle: f64,
    freq: f64,
    phase: f64,
}

impl FieldParams {
    fn at(&self, x: f64, y: f64) -> f64 {
        let t = x * self.angle.cos() + y * self.angle.sin();
        0.5 + 0.5 * (std::f64::consts::TAU * self.freq * t + self.phase).sin()
    }
}

const ANGLES: usize = 5;
const FREQS: [f64; 4] = [0.05, 0.09, 0.13, 0.17];
const FREQ_STEP: f64 = 0.04;

/// Grid of distinct (angle, frequency) settings. `offset` shifts by half a
/// step in both axes so the two grids never coincide.
fn field_grid(count: usize, offset: bool, rng: &mut ChaCha8Rng) -> Vec<FieldParams> {
    let half = if offset { 0.5 } else { 0.0 };
    (0..count)
        .map(|i| {
            let (a, f) = (i % ANGLES, (i / ANGLES) % FREQS.len());
            let wrap = (i / (ANGLES * FREQS.len())) as f64 * 0.25;
            FieldParams {
                angle: std::f64::consts::PI * (a as f64 + half + wrap) / ANGLES as f64,
                freq: FREQS[f] + half * FREQ_STEP,
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect()
}

fn random_metadata(id: String, rng: &mut ChaCha8Rng) -> SlideMetadata {
    SlideMetadata {
        slide_id: id,
        group: rng.random_range(1..=2),
        diagnosis: if rng.random_bool(0.5) { Diagnosis::Ad } else { Diagnosis::Mu },
        location: Location::ALL[rng.random_range(0..4)],
        budding_grade: rng.random_range(1..=3),
        dfs_months: (rng.random_range(0.0..150.0f64) * 100.0).round() / 100.0,
    }
}

/// Renders `offset + gain * field` with Gaussian pixel noise, clamped to
/// [0, 1].
fn render(field: &FieldParams, side: usize, gain: f64, offset: f64, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("finite noise");
    (0..side * side)
        .map(|k| {
            let v = offset + gain * field.at((k % side) as f64, (k / side) as f64);
            let jitter = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
            (v + jitter).clamp(0.0, 1.0)
        })
        .collect()
}

const HE_RENDER: (f64, f64) = (0.3, 0.6);
const MIF_RENDER: [(f64, f64); 4] = [(0.9, 0.05), (0.7, 0.1), (0.8, 0.0), (0.6, 0.2)];

/// H&E: low contrast on a bright background. mIF channels: higher contrast
/// with a per-channel gain and offset.
fn make_pair(
    he_id: String,
    mif_id: String,
    field: &FieldParams,
    cfg: &PairedCorpusConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Slide, Slide)> {
    let side = cfg.side;
    let he_px = render(field, side, HE_RENDER.0, HE_RENDER.1, cfg.noise, rng);
    let he = Slide::new(
        random_metadata(he_id, rng),
        Modality::He,
        vec![ChannelImage::new(0, "he", side, side, he_px)?],
    )?;
    let channels = (0..cfg.mif_channels)
        .map(|c| {
            let (g, o) = MIF_RENDER[c % MIF_RENDER.len()];
            ChannelImage::new(c, format!("marker{c}"), side, side, render(field, side, g, o, cfg.noise, rng))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mif_meta = he.metadata.clone();
    mif_meta.slide_id = mif_id;
    let mif = Slide::new(mif_meta, Modality::Mif, channels)?;
    Ok((he, mif))
}

/// Paired pseudo-slides. Each pair shares one oriented-grating field with
/// its own angle, frequency and phase; held-out and training pairs use
/// interleaved parameter grids so every field is distinct. Held-out mIF ids
/// are shuffled so they carry no pairing information.
pub fn paired_corpus(cfg: &PairedCorpusConfig) -> Result<PairedCorpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let test_fields = field_grid(cfg.test_pairs, false, &mut rng);
    let train_fields = field_grid(cfg.train_pairs, true, &mut rng);

    let mut corpus = PairedCorpus {
        train_he: Vec::new(),
        train_mif: Vec::new(),
        train_pairs: Vec::new(),
        test_he: Vec::new(),
        test_mif: Vec::new(),
        test_truth: Vec::new(),
    };
    for (i, f) in train_fields.iter().enumerate() {
        let (he, mif) = make_pair(format!("train-he-{i:02}"), format!("train-mif-{i:02}"), f, cfg, &mut rng)?;
        corpus.train_pairs.push(SlidePair {
            he: he.id().into(),
            mif: mif.id().into(),
        });
        corpus.train_he.push(he);
        corpus.train_mif.push(mif);
    }
    let mut labels: Vec<usize> = (0..cfg.test_pairs).collect();
    labels.shuffle(&mut rng);
    for (i, f) in test_fields.iter().enumerate() {
        let (he, mif) = make_pair(format!("he-{i:02}"), format!("mif-{:02}", labels[i]), f, cfg, &mut rng)?;
        corpus.test_truth.push(SlidePair {
            he: he.id().into(),
            mif: mif.id().into(),
        });
        corpus.test_he.push(he);
        corpus.test_mif.push(mif);
    }
    corpus.test_mif.sort_by(|a, b| a.id().cmp(b.id()));
    Ok(corpus)
}
