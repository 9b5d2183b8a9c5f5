//! CMFEAT: per-trial multi-layer feature container.
//!
//! ```text
//! "CMF1" | u32 version=1 | u32 K | u32 N | u32 D | K·N·D f32 | u32 crc32(f32 block)
//! ```
//! All integers and floats little-endian; layers outermost, then frames.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use crate::dsp::FeatureSequence;
use crate::error::{Error, Result};

pub const CMFEAT_MAGIC: [u8; 4] = *b"CMF1";
pub const CMFEAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;
const MANIFEST_HEADER: &str = "trial_id\tpath";

/// K layers of N×D frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLayerFeatures {
    k: usize,
    n: usize,
    d: usize,
    data: Vec<f32>,
}

impl MultiLayerFeatures {
    pub fn new(k: usize, n: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        if k == 0 || n == 0 || d == 0 {
            return Err(Error::Shape(format!("layer shape {k}x{n}x{d} has a zero extent")));
        }
        if data.len() != k * n * d {
            return Err(Error::Shape(format!("{} values for {k}x{n}x{d} layers", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFault("non-finite layer feature".into()));
        }
        Ok(Self { k, n, d, data })
    }

    pub fn from_layers(layers: &[FeatureSequence]) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::Shape("no layers".into()))?;
        let (n, d) = (first.n_frames(), first.dim());
        if layers.iter().any(|l| l.n_frames() != n || l.dim() != d) {
            return Err(Error::Shape("layers disagree in N or D".into()));
        }
        Self::new(layers.len(), n, d, layers.iter().flat_map(|l| l.data().iter().copied()).collect())
    }

    pub fn n_layers(&self) -> usize {
        self.k
    }

    pub fn n_frames(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn layer(&self, i: usize, frame_shift_s: f64) -> FeatureSequence {
        let per = self.n * self.d;
        FeatureSequence::new(self.data[i * per..(i + 1) * per].to_vec(), self.n, self.d, frame_shift_s)
            .expect("layer slice is well formed")
    }

    /// Frames `start..end` of every layer.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        let end = end.min(self.n);
        if start >= end {
            return Err(Error::Param(format!("empty frame range {start}..{end}")));
        }
        let per = self.n * self.d;
        let data = (0..self.k)
            .flat_map(|l| self.data[l * per + start * self.d..l * per + end * self.d].iter().copied())
            .collect();
        Self::new(self.k, end - start, self.d, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len() + 4);
        out.extend_from_slice(&CMFEAT_MAGIC);
        for v in [CMFEAT_VERSION, self.k as u32, self.n as u32, self.d as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[HEADER_LEN..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (k, n, d) = parse_header(bytes)?;
        let payload_len = k
            .checked_mul(n)
            .and_then(|v| v.checked_mul(d))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::Corrupt("shape overflow".into()))?;
        if bytes.len() != HEADER_LEN + payload_len + 4 {
            return Err(Error::Corrupt(format!(
                "expected {} bytes for {k}x{n}x{d}, found {}",
                HEADER_LEN + payload_len + 4,
                bytes.len()
            )));
        }
        let payload = &bytes[HEADER_LEN..HEADER_LEN + payload_len];
        let stored = u32::from_le_bytes(bytes[HEADER_LEN + payload_len..].try_into().unwrap());
        if crc32fast::hash(payload) != stored {
            return Err(Error::Corrupt("payload checksum mismatch".into()));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(k, n, d, data).map_err(|e| Error::Corrupt(e.to_string()))
    }
}

fn parse_header(bytes: &[u8]) -> Result<(usize, usize, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corrupt("truncated header".into()));
    }
    if bytes[..4] != CMFEAT_MAGIC {
        return Err(Error::Corrupt("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != CMFEAT_VERSION {
        return Err(Error::Version(word(0)));
    }
    let (k, n, d) = (word(1) as usize, word(2) as usize, word(3) as usize);
    if k == 0 || n == 0 || d == 0 {
        return Err(Error::Corrupt(format!("zero extent in {k}x{n}x{d}")));
    }
    Ok((k, n, d))
}

pub fn write_features(path: impl AsRef<Path>, features: &MultiLayerFeatures) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, features.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<MultiLayerFeatures> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    MultiLayerFeatures::from_bytes(&bytes).map_err(|e| match e {
        Error::Corrupt(msg) => Error::Corrupt(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Trial id → CMFEAT file, with the layer count and width shared by all files.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureManifest {
    pub root: PathBuf,
    pub entries: BTreeMap<String, PathBuf>,
    pub n_layers: usize,
    pub dim: usize,
}

impl FeatureManifest {
    /// Reads the TSV and checks every referenced file's header.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim_end_matches('\r') == MANIFEST_HEADER => {}
            _ => return Err(Error::Parse { line: 1, msg: format!("expected header '{MANIFEST_HEADER}'") }),
        }
        let mut entries = BTreeMap::new();
        for (i, line) in lines {
            let fields: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
            if fields.len() != 2 {
                return Err(Error::Parse { line: i + 1, msg: "expected trial_id<TAB>path".into() });
            }
            if entries.insert(fields[0].to_string(), PathBuf::from(fields[1])).is_some() {
                return Err(Error::Duplicate(fields[0].to_string()));
            }
        }
        let mut shape: Option<(usize, usize)> = None;
        for (id, rel) in &entries {
            let full = root.join(rel);
            let mut header = [0u8; HEADER_LEN];
            fs::File::open(&full)
                .and_then(|mut f| f.read_exact(&mut header))
                .map_err(|e| Error::io(&full, e))?;
            let (k, _, d) = parse_header(&header)?;
            match shape {
                None => shape = Some((k, d)),
                Some(s) if s != (k, d) => {
                    return Err(Error::Shape(format!(
                        "trial {id} has K={k}, D={d}; manifest declares K={}, D={}",
                        s.0, s.1
                    )))
                }
                _ => {}
            }
        }
        let (n_layers, dim) = shape.ok_or_else(|| Error::Config(format!("{}: empty manifest", path.display())))?;
        Ok(Self { root, entries, n_layers, dim })
    }

    pub fn write(path: impl AsRef<Path>, entries: &BTreeMap<String, PathBuf>) -> Result<()> {
        let path = path.as_ref();
        let mut text = format!("{MANIFEST_HEADER}\n");
        for (id, p) in entries {
            text.push_str(&format!("{id}\t{}\n", p.to_string_lossy()));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn path_of(&self, trial_id: &str) -> Option<PathBuf> {
        self.entries.get(trial_id).map(|p| self.root.join(p))
    }
}

pub fn load_features(manifest: &FeatureManifest, trial_id: &str) -> Result<MultiLayerFeatures> {
    let path = manifest
        .path_of(trial_id)
        .ok_or_else(|| Error::Lookup(format!("trial {trial_id} not in feature manifest")))?;
    let feats = read_features(&path)?;
    if feats.n_layers() != manifest.n_layers || feats.dim() != manifest.dim {
        return Err(Error::Corrupt(format!(
            "{}: shape {}x{}x{} disagrees with manifest K={}, D={}",
            path.display(),
            feats.n_layers(),
            feats.n_frames(),
            feats.dim(),
            manifest.n_layers,
            manifest.dim
        )));
    }
    Ok(feats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MultiLayerFeatures {
        MultiLayerFeatures::new(2, 3, 2, (0..12).map(|v| v as f32 * 0.5 - 2.0).collect()).unwrap()
    }

    #[test]
    fn layout_is_bit_exact() {
        let bytes = MultiLayerFeatures::new(1, 1, 1, vec![1.0]).unwrap().to_bytes();
        assert_eq!(&bytes[..4], &[0x43, 0x4D, 0x46, 0x31]);
        assert_eq!(&bytes[4..20], &[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[24..], &crc32fast::hash(&1.0f32.to_le_bytes()).to_le_bytes());
    }

    #[test]
    fn truncated_and_tampered() {
        let bytes = sample().to_bytes();
        for cut in [3, 19, 30, bytes.len() - 1] {
            assert!(matches!(MultiLayerFeatures::from_bytes(&bytes[..cut]), Err(Error::Corrupt(_))));
        }
        let mut flipped = bytes.clone();
        flipped[25] ^= 0x40;
        assert!(matches!(MultiLayerFeatures::from_bytes(&flipped), Err(Error::Corrupt(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(MultiLayerFeatures::from_bytes(&magic), Err(Error::Corrupt(_))));
        let mut version = bytes;
        version[4] = 2;
        assert!(matches!(MultiLayerFeatures::from_bytes(&version), Err(Error::Version(2))));
    }

    #[test]
    fn manifest_lookup_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_features(dir.path().join("a.cmf"), &sample()).unwrap();
        let mut entries = BTreeMap::new();
        entries.insert("t1".to_string(), PathBuf::from("a.cmf"));
        FeatureManifest::write(dir.path().join("m.tsv"), &entries).unwrap();
        let m = FeatureManifest::load(dir.path().join("m.tsv")).unwrap();
        assert_eq!((m.n_layers, m.dim), (2, 2));
        assert_eq!(load_features(&m, "t1").unwrap(), sample());
        assert!(matches!(load_features(&m, "nope"), Err(Error::Lookup(_))));

        entries.insert("t2".to_string(), PathBuf::from("missing.cmf"));
        FeatureManifest::write(dir.path().join("m2.tsv"), &entries).unwrap();
        assert!(matches!(FeatureManifest::load(dir.path().join("m2.tsv")), Err(Error::Io { .. })));
    }

    #[test]
    fn slicing_keeps_layers_aligned() {
        let s = sample().slice_frames(1, 3).unwrap();
        assert_eq!((s.n_layers(), s.n_frames(), s.dim()), (2, 2, 2));
        assert_eq!(s.data(), &[-1.0, -0.5, 0.0, 0.5, 2.0, 2.5, 3.0, 3.5]);
    }
}
