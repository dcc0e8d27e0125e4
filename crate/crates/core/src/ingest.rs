//! Slide loading, channel decomposition and raster-order tiling.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    parse_metadata_csv, parse_metadata_row, ChannelImage, Modality, Patch, Slide, SlideMetadata, SlidePair,
};

/// Luminance weights applied to RGB inputs.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PadPolicy {
    /// Only windows lying fully inside the image are emitted.
    DropPartial,
    /// Windows overhanging the right/bottom edge are filled with 0.0.
    ZeroPad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilingConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub pad_policy: PadPolicy,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self::non_overlapping(64)
    }
}

impl TilingConfig {
    pub fn non_overlapping(patch_size: usize) -> Self {
        Self {
            patch_size,
            stride: patch_size,
            pad_policy: PadPolicy::DropPartial,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 8 {
            return Err(Error::InvalidTiling(format!(
                "patch size {} is below the minimum of 8",
                self.patch_size
            )));
        }
        if self.stride == 0 || self.stride > self.patch_size {
            return Err(Error::InvalidTiling(format!(
                "stride {} must be in 1..={}",
                self.stride, self.patch_size
            )));
        }
        Ok(())
    }

    /// Number of windows along an axis of `extent` pixels.
    fn windows(&self, extent: usize) -> Option<usize> {
        let p = self.patch_size;
        match self.pad_policy {
            PadPolicy::DropPartial if extent < p => None,
            PadPolicy::DropPartial => Some((extent - p) / self.stride + 1),
            PadPolicy::ZeroPad if extent <= p => Some(1),
            PadPolicy::ZeroPad => Some((extent - p).div_ceil(self.stride) + 1),
        }
    }

    /// Grid shape `(rows, cols)` for an image of the given size.
    pub fn grid(&self, width: usize, height: usize) -> Result<(usize, usize)> {
        self.validate()?;
        match (self.windows(height), self.windows(width)) {
            (Some(rows), Some(cols)) => Ok((rows, cols)),
            _ => Err(Error::ImageTooSmall {
                width,
                height,
                patch_size: self.patch_size,
            }),
        }
    }
}

/// Returns the slide's channels as independent grayscale images, in order.
pub fn split_channels(slide: &Slide) -> Vec<ChannelImage> {
    slide.channels.clone()
}

/// Cuts a channel into patches, left to right then top to bottom.
pub fn tile(slide_id: &str, channel: &ChannelImage, cfg: &TilingConfig) -> Result<Vec<Patch>> {
    let (rows, cols) = cfg.grid(channel.width, channel.height)?;
    let p = cfg.patch_size;
    let mut patches = Vec::with_capacity(rows * cols);
    for gr in 0..rows {
        for gc in 0..cols {
            let (y0, x0) = (gr * cfg.stride, gc * cfg.stride);
            let mut pixels = vec![0.0; p * p];
            for dy in 0..p {
                let y = y0 + dy;
                if y >= channel.height {
                    break;
                }
                let x_end = (x0 + p).min(channel.width);
                let src = &channel.pixels[y * channel.width + x0..y * channel.width + x_end];
                pixels[dy * p..dy * p + src.len()].copy_from_slice(src);
            }
            patches.push(Patch {
                slide_id: slide_id.to_string(),
                channel_index: channel.channel_index,
                grid_row: gr,
                grid_col: gc,
                size: p,
                pixels,
            });
        }
    }
    Ok(patches)
}

/// Tiles every channel of a slide; the outer vector is indexed by channel.
pub fn tile_slide(slide: &Slide, cfg: &TilingConfig) -> Result<Vec<Vec<Patch>>> {
    split_channels(slide)
        .iter()
        .map(|ch| tile(slide.id(), ch, cfg))
        .collect()
}

/// Converts a decoded image to one `[0, 1]` plane. Color images are reduced
/// with [`LUMA_WEIGHTS`]; alpha is ignored.
pub fn to_grayscale(img: &DynamicImage) -> (usize, usize, Vec<f64>) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = if img.color().has_color() {
        img.to_rgb8()
            .pixels()
            .map(|px| {
                let [r, g, b] = px.0;
                let y = LUMA_WEIGHTS[0] * r as f64 + LUMA_WEIGHTS[1] * g as f64 + LUMA_WEIGHTS[2] * b as f64;
                (y / 255.0).clamp(0.0, 1.0)
            })
            .collect()
    } else {
        img.to_luma8().pixels().map(|px| px.0[0] as f64 / 255.0).collect()
    };
    (w, h, pixels)
}

/// Decodes an in-memory PNG into a channel.
pub fn decode_channel(bytes: &[u8], channel_index: usize, name: &str) -> Result<ChannelImage> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Decode {
        path: PathBuf::from(name),
        message: e.to_string(),
    })?;
    let (w, h, px) = to_grayscale(&img);
    ChannelImage::new(channel_index, name, w, h, px)
}

fn read_channel(path: &Path, channel_index: usize, name: &str) -> Result<ChannelImage> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h, px) = to_grayscale(&img);
    ChannelImage::new(channel_index, name, w, h, px)
}

/// Loads a slide with one file per channel. Channel names are the file
/// stems.
pub fn load_slide(paths: &[PathBuf], metadata: SlideMetadata, modality: Modality) -> Result<Slide> {
    let named: Vec<ChannelEntry> = paths
        .iter()
        .map(|p| ChannelEntry {
            channel_name: p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            path: p.clone(),
        })
        .collect();
    load_slide_named(&named, metadata, modality)
}

pub fn load_slide_named(entries: &[ChannelEntry], metadata: SlideMetadata, modality: Modality) -> Result<Slide> {
    let channels = entries
        .iter()
        .enumerate()
        .map(|(i, e)| read_channel(&e.path, i, &e.channel_name))
        .collect::<Result<Vec<_>>>()?;
    Slide::new(metadata, modality, channels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelEntry {
    pub channel_name: String,
    pub path: PathBuf,
}

/// One slide in a manifest. Metadata comes either inline as a CSV record or
/// from the manifest-level metadata file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub modality: Modality,
    pub channels: Vec<ChannelEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<String>,
    /// Slide id of the other-modality scan of the same tissue, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paired_with: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata_csv: Option<PathBuf>,
    pub slides: Vec<ManifestEntry>,
}

/// Slides and pairings loaded from a manifest.
#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub slides: Vec<Slide>,
    pub pairs: Vec<SlidePair>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let mut manifest: Manifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        manifest.resolve_paths(base);
        Ok(manifest)
    }

    /// Makes relative paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let Some(csv) = &mut self.metadata_csv {
            if csv.is_relative() {
                *csv = base.join(&*csv);
            }
        }
        for entry in &mut self.slides {
            for ch in &mut entry.channels {
                if ch.path.is_relative() {
                    ch.path = base.join(&ch.path);
                }
            }
        }
    }

    pub fn load(&self) -> Result<LoadedCorpus> {
        let table: HashMap<String, SlideMetadata> = match &self.metadata_csv {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::FileNotFound(p.clone()));
                }
                parse_metadata_csv(&std::fs::read_to_string(p)?)?
                    .into_iter()
                    .map(|m| (m.slide_id.clone(), m))
                    .collect()
            }
            None => HashMap::new(),
        };
        let mut slides = Vec::with_capacity(self.slides.len());
        let mut pairs = Vec::new();
        for entry in &self.slides {
            let metadata = entry.resolve_metadata(&table)?;
            slides.push(load_slide_named(&entry.channels, metadata, entry.modality)?);
        }
        let modality_of: HashMap<&str, Modality> =
            self.slides.iter().map(|e| (e.slide_id.as_str(), e.modality)).collect();
        for entry in &self.slides {
            let Some(other) = &entry.paired_with else { continue };
            let other_modality = modality_of
                .get(other.as_str())
                .ok_or_else(|| Error::Manifest(format!("{} paired with unknown slide {other}", entry.slide_id)))?;
            let pair = match (entry.modality, other_modality) {
                (Modality::He, Modality::Mif) => SlidePair {
                    he: entry.slide_id.clone(),
                    mif: other.clone(),
                },
                (Modality::Mif, Modality::He) => SlidePair {
                    he: other.clone(),
                    mif: entry.slide_id.clone(),
                },
                _ => {
                    return Err(Error::Manifest(format!(
                        "{} and {other} must have different modalities",
                        entry.slide_id
                    )))
                }
            };
            if !pairs.contains(&pair) {
                pairs.push(pair);
            }
        }
        pairs.sort();
        Ok(LoadedCorpus { slides, pairs })
    }
}

impl ManifestEntry {
    pub fn resolve_metadata(&self, table: &HashMap<String, SlideMetadata>) -> Result<SlideMetadata> {
        let meta = match &self.metadata {
            Some(row) => parse_metadata_row(row)?,
            None => table
                .get(&self.slide_id)
                .cloned()
                .ok_or_else(|| Error::Manifest(format!("no metadata for slide {}", self.slide_id)))?,
        };
        if meta.slide_id != self.slide_id {
            return Err(Error::Manifest(format!(
                "metadata id {} does not match slide {}",
                meta.slide_id, self.slide_id
            )));
        }
        Ok(meta)
    }

    /// Loads a standalone entry (no manifest-level metadata table).
    pub fn load(&self) -> Result<Slide> {
        let metadata = self.resolve_metadata(&HashMap::new())?;
        load_slide_named(&self.channels, metadata, self.modality)
    }
}
