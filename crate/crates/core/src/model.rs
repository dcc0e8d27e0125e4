//! Domain types shared by every stage of the pipeline, plus the metadata CSV
//! codec.
//!
//! Metadata rows are headerless CSV records of the form
//! `slide_id,group,diagnosis,location,budding,dfs`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Imaging modality of a slide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    /// Single-image brightfield stain, reduced to one grayscale channel.
    #[serde(rename = "HE")]
    He,
    /// Multiplexed immunofluorescence, one grayscale image per marker.
    #[serde(rename = "MIF")]
    Mif,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::He => "HE",
            Modality::Mif => "MIF",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "HE" => Ok(Modality::He),
            "MIF" => Ok(Modality::Mif),
            other => Err(Error::InvalidEnum {
                field: "modality",
                value: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Diagnosis {
    Ad,
    Mu,
}

impl Diagnosis {
    pub fn as_str(self) -> &'static str {
        match self {
            Diagnosis::Ad => "Ad",
            Diagnosis::Mu => "Mu",
        }
    }
}

impl FromStr for Diagnosis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Ad" => Ok(Diagnosis::Ad),
            "Mu" => Ok(Diagnosis::Mu),
            other => Err(Error::InvalidEnum {
                field: "diagnosis",
                value: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Location {
    Cec,
    Rec,
    Asc,
    Sig,
}

impl Location {
    pub const ALL: [Location; 4] = [Location::Cec, Location::Rec, Location::Asc, Location::Sig];

    pub fn as_str(self) -> &'static str {
        match self {
            Location::Cec => "Cec",
            Location::Rec => "Rec",
            Location::Asc => "Asc",
            Location::Sig => "Sig",
        }
    }
}

impl FromStr for Location {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Location::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::InvalidEnum {
                field: "location",
                value: s.to_string(),
            })
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Clinical metadata attached to one slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideMetadata {
    pub slide_id: String,
    pub group: u8,
    pub diagnosis: Diagnosis,
    pub location: Location,
    pub budding_grade: u8,
    /// Disease-free survival. Stored as given; no unit conversion is applied.
    pub dfs_months: f64,
}

impl SlideMetadata {
    /// Checks field ranges. Construction through [`parse_metadata_row`]
    /// already does this; callers building the struct by hand can use it
    /// directly.
    pub fn validate(&self) -> Result<()> {
        if self.slide_id.is_empty() {
            return Err(Error::MalformedRecord("empty slide_id".into()));
        }
        if !(1..=2).contains(&self.group) {
            return Err(Error::InvalidRange {
                field: "group",
                value: self.group.to_string(),
            });
        }
        if !(1..=3).contains(&self.budding_grade) {
            return Err(Error::InvalidRange {
                field: "budding_grade",
                value: self.budding_grade.to_string(),
            });
        }
        if !self.dfs_months.is_finite() || self.dfs_months < 0.0 {
            return Err(Error::InvalidRange {
                field: "dfs",
                value: self.dfs_months.to_string(),
            });
        }
        Ok(())
    }

    /// Serializes to the CSV record accepted by [`parse_metadata_row`].
    /// `f64`'s `Display` is shortest-round-trip, so parsing the output gives
    /// back the same value.
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.slide_id, self.group, self.diagnosis, self.location, self.budding_grade, self.dfs_months
        )
    }
}

fn parse_int_field(field: &'static str, raw: &str) -> Result<u8> {
    raw.parse::<u8>().map_err(|_| Error::InvalidRange {
        field,
        value: raw.to_string(),
    })
}

/// Parses one `slide_id,group,diagnosis,location,budding,dfs` record.
pub fn parse_metadata_row(line: &str) -> Result<SlideMetadata> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 6 {
        return Err(Error::MalformedRecord(format!(
            "expected 6 fields, found {} in {line:?}",
            fields.len()
        )));
    }
    if fields[0].is_empty() {
        return Err(Error::MalformedRecord(format!("empty slide_id in {line:?}")));
    }
    let dfs_months = fields[5].parse::<f64>().map_err(|_| Error::InvalidRange {
        field: "dfs",
        value: fields[5].to_string(),
    })?;
    let meta = SlideMetadata {
        slide_id: fields[0].to_string(),
        group: parse_int_field("group", fields[1])?,
        diagnosis: fields[2].parse()?,
        location: fields[3].parse()?,
        budding_grade: parse_int_field("budding_grade", fields[4])?,
        dfs_months,
    };
    meta.validate()?;
    Ok(meta)
}

/// Parses a whole metadata file. Blank lines are skipped.
pub fn parse_metadata_csv(text: &str) -> Result<Vec<SlideMetadata>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(parse_metadata_row)
        .collect()
}

/// One grayscale image plane with pixels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelImage {
    pub channel_index: usize,
    pub channel_name: String,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl ChannelImage {
    pub fn new(
        channel_index: usize,
        channel_name: impl Into<String>,
        width: usize,
        height: usize,
        pixels: Vec<f64>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidSlide("channel has zero extent".into()));
        }
        if pixels.len() != width * height {
            return Err(Error::ShapeMismatch {
                expected: width * height,
                actual: pixels.len(),
            });
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidRange {
                field: "pixel",
                value: bad.to_string(),
            });
        }
        Ok(Self {
            channel_index,
            channel_name: channel_name.into(),
            width,
            height,
            pixels,
        })
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }
}

/// One sample in one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slide {
    pub metadata: SlideMetadata,
    pub modality: Modality,
    pub channels: Vec<ChannelImage>,
    pub width: usize,
    pub height: usize,
}

impl Slide {
    /// Builds a slide, enforcing shared channel dimensions and the channel
    /// count rule for the modality.
    pub fn new(metadata: SlideMetadata, modality: Modality, channels: Vec<ChannelImage>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::InvalidSlide(format!("{} has no channels", metadata.slide_id)))?;
        let (width, height) = (first.width, first.height);
        for ch in &channels {
            if (ch.width, ch.height) != (width, height) {
                return Err(Error::DimensionMismatch {
                    expected: (width, height),
                    actual: (ch.width, ch.height),
                });
            }
        }
        if modality == Modality::He && channels.len() != 1 {
            return Err(Error::InvalidSlide(format!(
                "HE slide {} has {} channels, expected 1",
                metadata.slide_id,
                channels.len()
            )));
        }
        Ok(Self {
            metadata,
            modality,
            channels,
            width,
            height,
        })
    }

    pub fn id(&self) -> &str {
        &self.metadata.slide_id
    }
}

/// A square tile cut from one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub slide_id: String,
    pub channel_index: usize,
    pub grid_row: usize,
    pub grid_col: usize,
    pub size: usize,
    pub pixels: Vec<f64>,
}

/// Where a latent came from. The derived ordering (slide, channel, row,
/// column) is the tie-break order used by retrieval.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LatentSource {
    pub slide_id: String,
    pub channel_index: usize,
    pub grid_row: usize,
    pub grid_col: usize,
}

impl From<&Patch> for LatentSource {
    fn from(p: &Patch) -> Self {
        Self {
            slide_id: p.slide_id.clone(),
            channel_index: p.channel_index,
            grid_row: p.grid_row,
            grid_col: p.grid_col,
        }
    }
}

/// Embedding of one patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector {
    pub source: LatentSource,
    pub values: Vec<f64>,
    pub modality: Modality,
}

/// A known H&E / mIF pairing of the same tissue, used to fit the
/// cross-modal integration map.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlidePair {
    pub he: String,
    pub mif: String,
}

/// Slide counts per modality and class histograms per metadata feature.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CorpusSummary {
    pub modality: BTreeMap<Modality, usize>,
    pub group: BTreeMap<u8, usize>,
    pub diagnosis: BTreeMap<Diagnosis, usize>,
    pub location: BTreeMap<Location, usize>,
    pub budding_grade: BTreeMap<u8, usize>,
}

impl CorpusSummary {
    pub fn count(&self, modality: Modality) -> usize {
        self.modality.get(&modality).copied().unwrap_or(0)
    }
}

/// Checks slide-id uniqueness and summarizes the corpus.
pub fn validate_corpus(slides: &[Slide]) -> Result<CorpusSummary> {
    if slides.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut seen = BTreeSet::new();
    let mut summary = CorpusSummary::default();
    for slide in slides {
        let meta = &slide.metadata;
        if !seen.insert(meta.slide_id.as_str()) {
            return Err(Error::DuplicateSlideId(meta.slide_id.clone()));
        }
        *summary.modality.entry(slide.modality).or_default() += 1;
        *summary.group.entry(meta.group).or_default() += 1;
        *summary.diagnosis.entry(meta.diagnosis).or_default() += 1;
        *summary.location.entry(meta.location).or_default() += 1;
        *summary.budding_grade.entry(meta.budding_grade).or_default() += 1;
    }
    Ok(summary)
}
