//! Single-file index container.
//!
//! Layout: `XMSI`, u32 format version, u32 block count, then a table of
//! (4-byte tag, u64 payload length) entries, then the payloads in table
//! order. Integers are little-endian u32, reals little-endian f64, strings
//! a u32 byte length followed by UTF-8.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use pathsearch_core::dtw::IntegrationMap;
use pathsearch_core::index::{Community, VectorIndex};
use pathsearch_core::ingest::{PadPolicy, TilingConfig};
use pathsearch_core::model::{Diagnosis, LatentSource, LatentVector, Location, Modality, SlideMetadata, SlidePair};
use pathsearch_core::pipeline::{ChannelIndex, CorpusIndex, IndexConfig};
use pathsearch_core::vae::VaeParams;

pub const MAGIC: &[u8; 4] = b"XMSI";
pub const FORMAT_VERSION: u32 = 1;
const IMAP_MAGIC: &[u8; 4] = b"IMAP";

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an index file (bad magic)")]
    BadMagic,
    #[error("unsupported index format version {0}")]
    VersionUnsupported(u32),
    #[error("index file is truncated")]
    Truncated,
    #[error("malformed index block {block}: {message}")]
    Malformed { block: String, message: String },
    #[error(transparent)]
    Core(#[from] pathsearch_core::Error),
}

pub type Result<T, E = PersistError> = std::result::Result<T, E>;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("count fits in u32"));
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        vs.iter().for_each(|v| self.f64(*v));
    }

    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }

    fn latent(&mut self, l: &LatentVector) {
        let s = &l.source;
        self.str(&s.slide_id);
        self.len(s.channel_index);
        self.len(s.grid_row);
        self.len(s.grid_col);
        self.u32(modality_code(l.modality));
        self.f64s(&l.values);
    }

    fn latents(&mut self, dim: usize, ls: &[LatentVector]) {
        self.len(ls.len());
        self.len(dim);
        ls.iter().for_each(|l| self.latent(l));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    block: &'static str,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(PersistError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if self.buf.len() / 8 < n {
            return Err(PersistError::Truncated);
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        let raw = self.bytes(n)?;
        String::from_utf8(raw.to_vec()).map_err(|e| self.malformed(e.to_string()))
    }

    fn malformed(&self, message: impl Into<String>) -> PersistError {
        PersistError::Malformed {
            block: self.block.to_string(),
            message: message.into(),
        }
    }

    fn latent(&mut self, dim: usize) -> Result<LatentVector> {
        let source = LatentSource {
            slide_id: self.str()?,
            channel_index: self.usize()?,
            grid_row: self.usize()?,
            grid_col: self.usize()?,
        };
        let modality = self.modality()?;
        Ok(LatentVector {
            source,
            values: self.f64s(dim)?,
            modality,
        })
    }

    fn latents(&mut self) -> Result<Vec<LatentVector>> {
        let n = self.usize()?;
        let dim = self.usize()?;
        (0..n).map(|_| self.latent(dim)).collect()
    }

    fn modality(&mut self) -> Result<Modality> {
        match self.u32()? {
            0 => Ok(Modality::He),
            1 => Ok(Modality::Mif),
            other => Err(self.malformed(format!("modality code {other}"))),
        }
    }

    fn finish(self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(self.malformed(format!("{} trailing bytes", self.buf.len())))
        }
    }
}

fn modality_code(m: Modality) -> u32 {
    match m {
        Modality::He => 0,
        Modality::Mif => 1,
    }
}

fn config_block(cfg: &IndexConfig) -> Vec<u8> {
    let mut w = Writer::default();
    w.len(cfg.tiling.patch_size);
    w.len(cfg.tiling.stride);
    w.u32(match cfg.tiling.pad_policy {
        PadPolicy::DropPartial => 0,
        PadPolicy::ZeroPad => 1,
    });
    w.len(cfg.k_graph);
    w.len(cfg.top_k);
    w.len(cfg.nprobe);
    w.u32(cfg.seed as u32);
    w.u32((cfg.seed >> 32) as u32);
    w.0
}

fn read_config(r: &mut Reader) -> Result<IndexConfig> {
    let patch_size = r.usize()?;
    let stride = r.usize()?;
    let pad_policy = match r.u32()? {
        0 => PadPolicy::DropPartial,
        1 => PadPolicy::ZeroPad,
        other => return Err(r.malformed(format!("pad policy {other}"))),
    };
    let k_graph = r.usize()?;
    let top_k = r.usize()?;
    let nprobe = r.usize()?;
    let seed = u64::from(r.u32()?) | (u64::from(r.u32()?) << 32);
    Ok(IndexConfig {
        tiling: TilingConfig {
            patch_size,
            stride,
            pad_policy,
        },
        k_graph,
        top_k,
        nprobe,
        seed,
    })
}

fn imap_block(map: &IntegrationMap) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(IMAP_MAGIC);
    w.len(map.dim);
    w.f64s(&map.weights);
    w.f64s(&map.offset);
    w.0
}

fn read_imap(r: &mut Reader) -> Result<IntegrationMap> {
    if r.bytes(4)? != IMAP_MAGIC {
        return Err(r.malformed("missing IMAP magic"));
    }
    let dim = r.usize()?;
    let weights = r.f64s(dim * dim)?;
    let offset = r.f64s(dim)?;
    Ok(IntegrationMap { dim, weights, offset })
}

fn meta_block(metadata: &BTreeMap<String, SlideMetadata>) -> Vec<u8> {
    let mut w = Writer::default();
    w.len(metadata.len());
    for m in metadata.values() {
        w.str(&m.slide_id);
        w.u32(u32::from(m.group));
        w.u32(match m.diagnosis {
            Diagnosis::Ad => 0,
            Diagnosis::Mu => 1,
        });
        w.len(Location::ALL.iter().position(|l| *l == m.location).expect("known location"));
        w.u32(u32::from(m.budding_grade));
        w.f64(m.dfs_months);
    }
    w.0
}

fn read_meta(r: &mut Reader) -> Result<BTreeMap<String, SlideMetadata>> {
    let n = r.usize()?;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let slide_id = r.str()?;
        let group = u8::try_from(r.u32()?).map_err(|_| r.malformed("group out of range"))?;
        let diagnosis = match r.u32()? {
            0 => Diagnosis::Ad,
            1 => Diagnosis::Mu,
            other => return Err(r.malformed(format!("diagnosis code {other}"))),
        };
        let location = *Location::ALL
            .get(r.usize()?)
            .ok_or_else(|| r.malformed("location code out of range"))?;
        let budding_grade = u8::try_from(r.u32()?).map_err(|_| r.malformed("budding grade out of range"))?;
        let dfs_months = r.f64()?;
        let m = SlideMetadata {
            slide_id,
            group,
            diagnosis,
            location,
            budding_grade,
            dfs_months,
        };
        out.insert(m.slide_id.clone(), m);
    }
    Ok(out)
}

fn pair_block(pairs: &[SlidePair]) -> Vec<u8> {
    let mut w = Writer::default();
    w.len(pairs.len());
    for p in pairs {
        w.str(&p.he);
        w.str(&p.mif);
    }
    w.0
}

fn read_pairs(r: &mut Reader) -> Result<Vec<SlidePair>> {
    let n = r.usize()?;
    (0..n)
        .map(|_| {
            Ok(SlidePair {
                he: r.str()?,
                mif: r.str()?,
            })
        })
        .collect()
}

fn latent_block(dim: usize, latents: &[LatentVector]) -> Vec<u8> {
    let mut w = Writer::default();
    w.latents(dim, latents);
    w.0
}

fn channel_block(ch: &ChannelIndex) -> Vec<u8> {
    let mut w = Writer::default();
    let dim = ch.index.dim;
    w.len(ch.channel_index);
    w.str(&ch.channel_name);
    w.f64(ch.modularity);
    w.len(dim);
    w.len(ch.index.communities.len());
    for c in &ch.index.communities {
        w.u32(u32::from(c.degenerate));
        w.f64s(&c.centroid);
        w.latents(dim, &c.members);
    }
    w.latents(dim, &ch.raw);
    w.0
}

fn read_channel(r: &mut Reader) -> Result<ChannelIndex> {
    let channel_index = r.usize()?;
    let channel_name = r.str()?;
    let modularity = r.f64()?;
    let dim = r.usize()?;
    let count = r.usize()?;
    let mut communities = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let degenerate = match r.u32()? {
            0 => false,
            1 => true,
            other => return Err(r.malformed(format!("degenerate flag {other}"))),
        };
        let centroid = r.f64s(dim)?;
        let members = r.latents()?;
        communities.push(Community {
            centroid,
            degenerate,
            members,
        });
    }
    let raw = r.latents()?;
    Ok(ChannelIndex {
        channel_index,
        channel_name,
        index: VectorIndex { dim, communities },
        raw,
        modularity,
    })
}

/// Serializes the index. Equal indexes produce identical bytes.
pub fn encode_index(index: &CorpusIndex) -> Vec<u8> {
    let dim = index.vae.shape.latent;
    let mut blocks: Vec<(&[u8; 4], Vec<u8>)> = vec![
        (b"CONF", config_block(&index.config)),
        (b"VAE1", index.vae.to_bytes()),
        (IMAP_MAGIC, imap_block(&index.integration)),
        (b"META", meta_block(&index.metadata)),
        (b"PAIR", pair_block(&index.pairs)),
        (b"HELT", latent_block(dim, &index.he_latents)),
    ];
    blocks.extend(index.channels.iter().map(|c| (b"CHAN", channel_block(c))));

    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.len(blocks.len());
    for (tag, payload) in &blocks {
        w.0.extend_from_slice(*tag);
        w.0.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    }
    for (_, payload) in blocks {
        w.0.extend_from_slice(&payload);
    }
    w.0
}

fn block_name(tag: &[u8]) -> &'static str {
    match tag {
        b"CONF" => "CONF",
        b"VAE1" => "VAE1",
        b"IMAP" => "IMAP",
        b"META" => "META",
        b"PAIR" => "PAIR",
        b"HELT" => "HELT",
        b"CHAN" => "CHAN",
        _ => "unknown",
    }
}

/// Parses a container produced by [`encode_index`]. The header and block
/// table are validated before any payload is decoded.
pub fn decode_index(bytes: &[u8]) -> Result<CorpusIndex> {
    let mut head = Reader { buf: bytes, block: "header" };
    if head.bytes(4).map_err(|_| PersistError::BadMagic)? != MAGIC {
        return Err(PersistError::BadMagic);
    }
    let version = head.u32()?;
    if version != FORMAT_VERSION {
        return Err(PersistError::VersionUnsupported(version));
    }
    let count = head.usize()?;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let tag: [u8; 4] = head.bytes(4)?.try_into().expect("4 bytes");
        let len = u64::from_le_bytes(head.bytes(8)?.try_into().expect("8 bytes"));
        table.push((tag, usize::try_from(len).map_err(|_| PersistError::Truncated)?));
    }
    let declared = table.iter().try_fold(0usize, |acc, (_, n)| acc.checked_add(*n));
    match declared {
        Some(total) if total == head.buf.len() => {}
        Some(total) if total > head.buf.len() => return Err(PersistError::Truncated),
        _ => return Err(head.malformed("block lengths do not match file size")),
    }

    let mut rest = head.buf;
    let mut config = None;
    let mut vae = None;
    let mut integration = None;
    let mut metadata = None;
    let mut pairs = None;
    let mut he_latents = None;
    let mut channels = Vec::new();
    for (tag, len) in table {
        let (payload, tail) = rest.split_at(len);
        rest = tail;
        let name = block_name(&tag);
        let mut r = Reader { buf: payload, block: name };
        match &tag {
            b"CONF" => config = Some(read_config(&mut r)?),
            b"VAE1" => {
                let mut cursor = r.buf;
                vae = Some(VaeParams::read_checkpoint(&mut cursor)?);
                r.buf = cursor;
            }
            b"IMAP" => integration = Some(read_imap(&mut r)?),
            b"META" => metadata = Some(read_meta(&mut r)?),
            b"PAIR" => pairs = Some(read_pairs(&mut r)?),
            b"HELT" => he_latents = Some(r.latents()?),
            b"CHAN" => channels.push(read_channel(&mut r)?),
            other => {
                return Err(PersistError::Malformed {
                    block: String::from_utf8_lossy(other).into_owned(),
                    message: "unknown block".into(),
                })
            }
        }
        r.finish()?;
    }
    let missing = |block: &str| PersistError::Malformed {
        block: block.into(),
        message: "missing".into(),
    };
    Ok(CorpusIndex {
        vae: vae.ok_or_else(|| missing("VAE1"))?,
        integration: integration.ok_or_else(|| missing("IMAP"))?,
        channels,
        metadata: metadata.ok_or_else(|| missing("META"))?,
        he_latents: he_latents.ok_or_else(|| missing("HELT"))?,
        pairs: pairs.ok_or_else(|| missing("PAIR"))?,
        config: config.ok_or_else(|| missing("CONF"))?,
    })
}

/// Writes the index atomically (temp file in the target directory, then
/// rename) and returns the byte count.
pub fn save_index(index: &CorpusIndex, path: &Path) -> Result<u64> {
    let bytes = encode_index(index);
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| PersistError::Io(e.error))?;
    Ok(bytes.len() as u64)
}

pub fn load_index(path: &Path) -> Result<CorpusIndex> {
    decode_index(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pathsearch_core::model::{ChannelImage, Slide};
    use pathsearch_core::pipeline::{index_corpus, ModelSource};
    use pathsearch_core::vae::VaeShape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_index() -> CorpusIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut slide = |id: &str, modality, n| {
            let chans = (0..n)
                .map(|c| {
                    let px = (0..256).map(|_| rng.random::<f64>()).collect();
                    ChannelImage::new(c, format!("c{c}"), 16, 16, px).unwrap()
                })
                .collect();
            let meta = pathsearch_core::model::parse_metadata_row(&format!("{id},1,Mu,Sig,2,12.5")).unwrap();
            Slide::new(meta, modality, chans).unwrap()
        };
        let slides = vec![
            slide("m0", Modality::Mif, 2),
            slide("m1", Modality::Mif, 2),
            slide("h0", Modality::He, 1),
        ];
        let pairs = vec![SlidePair {
            he: "h0".into(),
            mif: "m0".into(),
        }];
        let vae = VaeParams::init(VaeShape::new(8, 8, 4), &mut rng);
        let cfg = IndexConfig {
            tiling: TilingConfig::non_overlapping(8),
            seed: u64::MAX - 3,
            ..IndexConfig::default()
        };
        index_corpus(&slides, &pairs, ModelSource::Params(vae), cfg).unwrap()
    }

    #[test]
    fn round_trip_is_exact_and_canonical() {
        let idx = sample_index();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        let n = save_index(&idx, &a).unwrap();
        save_index(&idx, &b).unwrap();
        assert_eq!(n, std::fs::metadata(&a).unwrap().len());
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(load_index(&a).unwrap(), idx);
    }

    #[test]
    fn rejects_bad_headers() {
        let bytes = encode_index(&sample_index());
        let mut wrong = bytes.clone();
        wrong[0] = b'Y';
        assert!(matches!(decode_index(&wrong), Err(PersistError::BadMagic)));
        assert!(matches!(decode_index(b"XM"), Err(PersistError::BadMagic)));
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(decode_index(&version), Err(PersistError::VersionUnsupported(9))));
    }

    #[test]
    fn rejects_truncation_anywhere() {
        let bytes = encode_index(&sample_index());
        for cut in [8, 12, 20, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode_index(&bytes[..cut]), Err(PersistError::Truncated)),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn save_into_missing_directory_fails() {
        let idx = sample_index();
        let err = save_index(&idx, Path::new("/nonexistent-dir/x/index.bin")).unwrap_err();
        assert!(matches!(err, PersistError::Io(_)));
    }
}
