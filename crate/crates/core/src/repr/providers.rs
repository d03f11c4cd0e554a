//! Embedding providers: deterministic toy encoders and file-backed stores.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::lora::{AdaptedLinear, LoraAdapter};
use super::nn::gaussian_matrix;
use super::{Embedding, ReprError};
use crate::encoding::{Plane, RgbSlice};
use crate::labeler::normalize_impression;
use crate::sha256_hex;

/// Side of the downsampled grid fed to the toy vision encoder.
pub const TOY_GRID: usize = 16;
/// Hash buckets of the toy text encoder.
pub const TEXT_BUCKETS: usize = 1024;

pub trait SliceEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_slice(&self, study_id: &str, slice: &RgbSlice) -> Result<Embedding, ReprError>;
}

pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_text(&self, normalized_impression: &str) -> Result<Embedding, ReprError>;
}

/// One embedding per slice, in input order.
pub fn embed_slices(
    provider: &dyn SliceEmbedder,
    study_id: &str,
    slices: &[RgbSlice],
) -> Result<Vec<Embedding>, ReprError> {
    if slices.is_empty() {
        return Err(ReprError::EmptyInput);
    }
    crate::parallel::try_map(slices, |s| provider.embed_slice(study_id, s))
}

pub fn embed_text(provider: &dyn TextEmbedder, normalized_impression: &str) -> Result<Embedding, ReprError> {
    provider.embed_text(normalized_impression)
}

/// Box-averages an (h, w, 3) image onto a `TOY_GRID` square and flattens it.
pub fn downsample(pixels: &Array3<f32>) -> Array1<f64> {
    let (h, w, ch) = pixels.dim();
    let mut out = Array1::zeros(TOY_GRID * TOY_GRID * ch);
    let bin = |i: usize, n: usize| {
        let lo = i * n / TOY_GRID;
        let hi = ((i + 1) * n / TOY_GRID).max(lo + 1).min(n);
        (lo.min(n - 1), hi)
    };
    for gy in 0..TOY_GRID {
        let (y0, y1) = bin(gy, h);
        for gx in 0..TOY_GRID {
            let (x0, x1) = bin(gx, w);
            let area = ((y1 - y0) * (x1 - x0)) as f64;
            for c in 0..ch {
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += pixels[[y, x, c]] as f64;
                    }
                }
                out[(gy * TOY_GRID + gx) * ch + c] = acc / area;
            }
        }
    }
    out
}

/// Frozen seeded projection of a downsampled slice, followed by an
/// adaptable `d x d` layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyVisionEncoder {
    /// (d, grid * grid * 3)
    pub projection: Array2<f64>,
    pub head: AdaptedLinear,
}

impl ToyVisionEncoder {
    pub fn new(d: usize, rank: usize, seed: u64) -> Result<Self, ReprError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = TOY_GRID * TOY_GRID * 3;
        let projection = gaussian_matrix(d, k, 1.0 / (k as f64).sqrt(), &mut rng);
        let base = gaussian_matrix(d, d, 1.0 / (d as f64).sqrt(), &mut rng);
        let adapter = LoraAdapter::init(d, d, rank, &mut rng)?;
        Ok(Self {
            projection,
            head: AdaptedLinear { base, adapter },
        })
    }

    pub fn with_adapter(mut self, adapter: LoraAdapter) -> Self {
        self.head.adapter = adapter;
        self
    }

    /// Output of the frozen part, before the adaptable layer.
    pub fn features(&self, slice: &RgbSlice) -> Array1<f64> {
        self.projection.dot(&downsample(&slice.pixels))
    }
}

impl SliceEmbedder for ToyVisionEncoder {
    fn dim(&self) -> usize {
        self.projection.nrows()
    }

    fn embed_slice(&self, _study_id: &str, slice: &RgbSlice) -> Result<Embedding, ReprError> {
        Ok(Embedding::new(self.head.apply(self.features(slice).view())?))
    }
}

/// Lowercased tokens with punctuation stripped from both ends.
pub fn text_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

fn bucket(token: &str) -> usize {
    let h = Sha256::digest(token.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&h[..8]);
    (u64::from_le_bytes(b) % TEXT_BUCKETS as u64) as usize
}

/// Hashed bag-of-words counts, a frozen seeded projection, then an
/// adaptable `d x d` layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTextEncoder {
    /// (d, TEXT_BUCKETS)
    pub projection: Array2<f64>,
    pub head: AdaptedLinear,
}

impl ToyTextEncoder {
    pub fn new(d: usize, rank: usize, seed: u64) -> Result<Self, ReprError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = gaussian_matrix(d, TEXT_BUCKETS, 1.0 / (d as f64).sqrt(), &mut rng);
        let base = gaussian_matrix(d, d, 1.0 / (d as f64).sqrt(), &mut rng);
        let adapter = LoraAdapter::init(d, d, rank, &mut rng)?;
        Ok(Self {
            projection,
            head: AdaptedLinear { base, adapter },
        })
    }

    pub fn with_adapter(mut self, adapter: LoraAdapter) -> Self {
        self.head.adapter = adapter;
        self
    }

    pub fn counts(text: &str) -> Array1<f64> {
        let mut c = Array1::zeros(TEXT_BUCKETS);
        for t in text_tokens(&normalize_impression(text)) {
            c[bucket(&t)] += 1.0;
        }
        c
    }

    pub fn features(&self, text: &str) -> Array1<f64> {
        self.projection.dot(&Self::counts(text))
    }
}

impl TextEmbedder for ToyTextEncoder {
    fn dim(&self) -> usize {
        self.projection.nrows()
    }

    fn embed_text(&self, normalized_impression: &str) -> Result<Embedding, ReprError> {
        Ok(Embedding::new(self.head.apply(self.features(normalized_impression).view())?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub study_id: String,
    pub plane: Plane,
    pub index: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRecord {
    pub key: String,
    pub values: Vec<f64>,
}

/// Store key for a text: sha256 hex of its normalized form.
pub fn text_key(impression: &str) -> String {
    sha256_hex(normalize_impression(impression).as_bytes())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ReprError> {
    let f = File::open(path).map_err(|e| ReprError::Store(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| ReprError::Store(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| ReprError::Store(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), ReprError> {
    let io = |e: std::io::Error| ReprError::Store(format!("{}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for r in rows {
        serde_json::to_writer(&mut w, &r).map_err(|e| ReprError::Store(e.to_string()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

fn check_dim(dim: &mut Option<usize>, len: usize) -> Result<(), ReprError> {
    match *dim {
        Some(d) if d != len => Err(ReprError::ShapeMismatch { expected: d, actual: len }),
        _ => {
            *dim = Some(len);
            Ok(())
        }
    }
}

/// Precomputed slice embeddings keyed by `(study_id, plane, index)`.
#[derive(Debug, Clone, Default)]
pub struct FileSliceStore {
    entries: HashMap<(String, Plane, usize), Array1<f64>>,
    dim: Option<usize>,
}

impl FileSliceStore {
    pub fn load(path: &Path) -> Result<Self, ReprError> {
        let mut s = Self::default();
        for r in read_jsonl::<SliceRecord>(path)? {
            s.insert(r)?;
        }
        Ok(s)
    }

    pub fn insert(&mut self, r: SliceRecord) -> Result<(), ReprError> {
        check_dim(&mut self.dim, r.values.len())?;
        self.entries.insert((r.study_id, r.plane, r.index), Array1::from(r.values));
        Ok(())
    }

    pub fn get(&self, study_id: &str, plane: Plane, index: usize) -> Option<&Array1<f64>> {
        self.entries.get(&(study_id.to_string(), plane, index))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes records sorted by key.
    pub fn save(&self, path: &Path) -> Result<(), ReprError> {
        let mut keys: Vec<_> = self.entries.keys().collect();
        keys.sort();
        write_jsonl(
            path,
            keys.into_iter().map(|k| SliceRecord {
                study_id: k.0.clone(),
                plane: k.1,
                index: k.2,
                values: self.entries[k].to_vec(),
            }),
        )
    }
}

impl SliceEmbedder for FileSliceStore {
    fn dim(&self) -> usize {
        self.dim.unwrap_or(0)
    }

    fn embed_slice(&self, study_id: &str, slice: &RgbSlice) -> Result<Embedding, ReprError> {
        self.entries
            .get(&(study_id.to_string(), slice.plane, slice.index))
            .map(|v| Embedding::new(v.clone()))
            .ok_or_else(|| ReprError::MissingEmbedding(format!("{study_id}/{}/{}", slice.plane.name(), slice.index)))
    }
}

/// Precomputed text embeddings keyed by `text_key`.
#[derive(Debug, Clone, Default)]
pub struct FileTextStore {
    entries: HashMap<String, Array1<f64>>,
    dim: Option<usize>,
}

impl FileTextStore {
    pub fn load(path: &Path) -> Result<Self, ReprError> {
        let mut s = Self::default();
        for r in read_jsonl::<TextRecord>(path)? {
            s.insert(r)?;
        }
        Ok(s)
    }

    pub fn insert(&mut self, r: TextRecord) -> Result<(), ReprError> {
        check_dim(&mut self.dim, r.values.len())?;
        self.entries.insert(r.key, Array1::from(r.values));
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&Array1<f64>> {
        self.entries.get(key)
    }

    pub fn save(&self, path: &Path) -> Result<(), ReprError> {
        let mut keys: Vec<_> = self.entries.keys().collect();
        keys.sort();
        write_jsonl(
            path,
            keys.into_iter().map(|k| TextRecord {
                key: k.clone(),
                values: self.entries[k].to_vec(),
            }),
        )
    }
}

impl TextEmbedder for FileTextStore {
    fn dim(&self) -> usize {
        self.dim.unwrap_or(0)
    }

    fn embed_text(&self, normalized_impression: &str) -> Result<Embedding, ReprError> {
        let key = text_key(normalized_impression);
        self.entries
            .get(&key)
            .map(|v| Embedding::new(v.clone()))
            .ok_or(ReprError::MissingEmbedding(key))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slice(value: f32, index: usize) -> RgbSlice {
        RgbSlice {
            pixels: Array3::from_elem((40, 24, 3), value),
            plane: Plane::Axial,
            index,
            fraction: 0.5,
        }
    }

    #[test]
    fn toy_vision_deterministic_and_discriminative() {
        let enc = ToyVisionEncoder::new(16, 2, 3).unwrap();
        let a = enc.embed_slice("s", &slice(0.3, 1)).unwrap();
        assert_eq!(a, enc.embed_slice("s", &slice(0.3, 1)).unwrap());
        let zero = enc.embed_slice("s", &slice(0.0, 1)).unwrap();
        let one = enc.embed_slice("s", &slice(1.0, 1)).unwrap();
        // With B = 0 the difference is W P 1, computed independently here.
        let ones = Array1::<f64>::ones(TOY_GRID * TOY_GRID * 3);
        let want = enc.head.base.dot(&enc.projection.dot(&ones));
        assert!(zero.values.iter().all(|v| *v == 0.0));
        assert!((&one.values - &zero.values - &want).iter().all(|d| d.abs() < 1e-12));
        assert!(want.iter().any(|v| v.abs() > 1e-3));
    }

    #[test]
    fn downsample_box_average() {
        let mut px = Array3::<f32>::zeros((32, 32, 3));
        px[[0, 0, 0]] = 4.0;
        let d = downsample(&px);
        assert_eq!(d[0], 1.0);
        assert_eq!(d.sum(), 1.0);
        let small = downsample(&Array3::from_elem((4, 4, 3), 0.5));
        assert!(small.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn toy_text_examples() {
        let enc = ToyTextEncoder::new(16, 2, 4).unwrap();
        let a = enc.embed_text("active ileitis").unwrap();
        assert_eq!(a, enc.embed_text("active ileitis").unwrap());
        let b = enc.embed_text(&normalize_impression("  Active   ILEITIS.")).unwrap();
        assert_eq!(a, b);
        let empty = enc.embed_text("").unwrap();
        assert!(empty.values.iter().all(|v| v.is_finite() && *v == 0.0));
        assert_eq!(ToyTextEncoder::counts("a a b").sum(), 3.0);
        assert_ne!(a, enc.embed_text("no ileitis").unwrap());
    }

    #[test]
    fn file_stores_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = FileSliceStore::default();
        s.insert(SliceRecord {
            study_id: "s1".into(),
            plane: Plane::Axial,
            index: 3,
            values: vec![1.0, 2.0],
        })
        .unwrap();
        assert!(s
            .insert(SliceRecord {
                study_id: "s1".into(),
                plane: Plane::Coronal,
                index: 0,
                values: vec![1.0],
            })
            .is_err());
        let p = dir.path().join("slices.jsonl");
        s.save(&p).unwrap();
        let loaded = FileSliceStore::load(&p).unwrap();
        let got = embed_slices(&loaded, "s1", &[slice(0.0, 3)]).unwrap();
        assert_eq!(got[0].values.to_vec(), vec![1.0, 2.0]);
        assert!(matches!(
            embed_slices(&loaded, "s1", &[slice(0.0, 4)]),
            Err(ReprError::MissingEmbedding(_))
        ));
        assert_eq!(embed_slices(&loaded, "s1", &[]), Err(ReprError::EmptyInput));

        let mut t = FileTextStore::default();
        t.insert(TextRecord {
            key: text_key("No Ileitis."),
            values: vec![0.5, 0.5],
        })
        .unwrap();
        let tp = dir.path().join("text.jsonl");
        t.save(&tp).unwrap();
        let t = FileTextStore::load(&tp).unwrap();
        assert_eq!(embed_text(&t, "no ileitis").unwrap().values.to_vec(), vec![0.5, 0.5]);
        assert!(matches!(embed_text(&t, "ileitis"), Err(ReprError::MissingEmbedding(_))));
    }
}
