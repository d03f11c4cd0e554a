//! CT volume ingestion: HU rescaling, isotropic resampling, series selection
//! and the on-disk `.ctvol` container.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parallel;

pub const HU_MIN: i16 = -1000;
pub const HU_MAX: i16 = 1000;
/// Minimum axial slice count for a series to be usable.
pub const MIN_SLICES: usize = 30;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("volume has an empty dimension: {0:?}")]
    EmptyVolume([usize; 3]),
    #[error("invalid rescale parameters (slope {slope}, intercept {intercept})")]
    InvalidRescale { slope: f64, intercept: f64 },
    #[error("invalid spacing {0:?}")]
    InvalidSpacing([f64; 3]),
    #[error("no series with at least {MIN_SLICES} slices")]
    NoEligibleSeries,
    #[error("payload holds {actual} voxels, header declares {expected}")]
    PayloadSize { expected: usize, actual: usize },
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("voxel {value} outside [{HU_MIN}, {HU_MAX}]")]
    OutOfRange { value: i16 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Physical voxel size in millimetres, ordered (z, y, x).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing(pub [f64; 3]);

impl Spacing {
    pub const ISOTROPIC_1MM: Spacing = Spacing([1.0, 1.0, 1.0]);

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|s| s.is_finite() && *s > 0.0)
    }
}

/// A clipped HU grid, axes ordered (axial slice, row, column).
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    data: Array3<i16>,
    spacing: Spacing,
    study_id: String,
}

impl VoxelVolume {
    /// Validates dimensions, spacing and the HU range.
    pub fn new(
        data: Array3<i16>,
        spacing: Spacing,
        study_id: impl Into<String>,
    ) -> Result<Self, VolumeError> {
        let dims = dims_of(&data);
        if dims.contains(&0) {
            return Err(VolumeError::EmptyVolume(dims));
        }
        if !spacing.is_valid() {
            return Err(VolumeError::InvalidSpacing(spacing.0));
        }
        if let Some(&value) = data.iter().find(|v| !(HU_MIN..=HU_MAX).contains(*v)) {
            return Err(VolumeError::OutOfRange { value });
        }
        Ok(Self {
            data,
            spacing,
            study_id: study_id.into(),
        })
    }

    /// Builds a volume by clamping arbitrary HU values into range.
    pub fn from_clamped(
        data: Array3<i16>,
        spacing: Spacing,
        study_id: impl Into<String>,
    ) -> Result<Self, VolumeError> {
        Self::new(data.mapv(|v| v.clamp(HU_MIN, HU_MAX)), spacing, study_id)
    }

    pub fn data(&self) -> &Array3<i16> {
        &self.data
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn study_id(&self) -> &str {
        &self.study_id
    }

    pub fn dims(&self) -> [usize; 3] {
        dims_of(&self.data)
    }

    pub fn axial_len(&self) -> usize {
        self.data.shape()[0]
    }
}

fn dims_of<T>(a: &Array3<T>) -> [usize; 3] {
    let s = a.shape();
    [s[0], s[1], s[2]]
}

fn clamp_round(v: f64) -> i16 {
    // f64::round is half-away-from-zero.
    v.round().clamp(HU_MIN as f64, HU_MAX as f64) as i16
}

/// Converts stored pixel values to clipped HU: `clamp(round(raw*slope + intercept))`.
pub fn rescale_to_hu<T>(
    raw: ArrayView3<'_, T>,
    slope: f64,
    intercept: f64,
    spacing: Spacing,
    study_id: impl Into<String>,
) -> Result<VoxelVolume, VolumeError>
where
    T: Copy + Into<f64>,
{
    let s = raw.shape();
    let dims = [s[0], s[1], s[2]];
    if dims.contains(&0) {
        return Err(VolumeError::EmptyVolume(dims));
    }
    if slope == 0.0 || !slope.is_finite() || !intercept.is_finite() {
        return Err(VolumeError::InvalidRescale { slope, intercept });
    }
    let hu = raw.mapv(|r| clamp_round(r.into() * slope + intercept));
    VoxelVolume::new(hu, spacing, study_id)
}

/// Linear sampling positions along one axis: (lower index, upper index, weight of upper).
fn axis_taps(n_in: usize, n_out: usize, ratio: f64) -> Vec<(usize, usize, f64)> {
    let last = (n_in - 1) as f64;
    (0..n_out)
        .map(|o| {
            let c = (o as f64 * ratio).clamp(0.0, last);
            let i0 = c.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, c - i0 as f64)
        })
        .collect()
}

/// Trilinear resampling to `target_mm` isotropic spacing.
///
/// Output voxel `o` sits at physical offset `o * target_mm` from the first
/// input voxel centre; samples past the last voxel clamp to the edge. Each
/// output axis has `max(1, round(dim * spacing / target_mm))` voxels.
pub fn resample_isotropic(v: &VoxelVolume, target_mm: f64) -> Result<VoxelVolume, VolumeError> {
    if !(target_mm.is_finite() && target_mm > 0.0) {
        return Err(VolumeError::InvalidSpacing([target_mm; 3]));
    }
    let dims = v.dims();
    let sp = v.spacing.0;
    let mut out_dims = [0usize; 3];
    let mut taps = Vec::with_capacity(3);
    for a in 0..3 {
        out_dims[a] = ((dims[a] as f64 * sp[a] / target_mm).round() as usize).max(1);
        let ratio = if target_mm == sp[a] { 1.0 } else { target_mm / sp[a] };
        taps.push(axis_taps(dims[a], out_dims[a], ratio));
    }
    let (tz, ty, tx) = (&taps[0], &taps[1], &taps[2]);
    let data = &v.data;
    let planes = parallel::map(tz, |&(z0, z1, fz)| {
        let mut plane = Vec::with_capacity(out_dims[1] * out_dims[2]);
        for &(y0, y1, fy) in ty {
            for &(x0, x1, fx) in tx {
                let at = |z: usize, y: usize, x: usize| data[[z, y, x]] as f64;
                let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + (b - a) * t };
                let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
                let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
                let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
                let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
                let c0 = lerp(c00, c01, fy);
                let c1 = lerp(c10, c11, fy);
                plane.push(clamp_round(lerp(c0, c1, fz)));
            }
        }
        plane
    });
    let flat: Vec<i16> = planes.into_iter().flatten().collect();
    let out = Array3::from_shape_vec((out_dims[0], out_dims[1], out_dims[2]), flat)
        .expect("resample output shape");
    VoxelVolume::new(out, Spacing([target_mm; 3]), v.study_id.clone())
}

/// One candidate series of an examination.
#[derive(Debug, Clone)]
pub struct SeriesCandidate {
    pub series_id: String,
    pub slice_count: usize,
    pub volume: Option<VoxelVolume>,
}

impl SeriesCandidate {
    pub fn deferred(series_id: impl Into<String>, slice_count: usize) -> Self {
        Self {
            series_id: series_id.into(),
            slice_count,
            volume: None,
        }
    }

    pub fn materialized(series_id: impl Into<String>, volume: VoxelVolume) -> Self {
        Self {
            series_id: series_id.into(),
            slice_count: volume.axial_len(),
            volume: Some(volume),
        }
    }
}

/// Picks the largest series with at least [`MIN_SLICES`] slices; ties go to
/// the lexicographically smallest series id.
pub fn select_series(candidates: &[SeriesCandidate]) -> Result<&SeriesCandidate, VolumeError> {
    candidates
        .iter()
        .filter(|c| c.slice_count >= MIN_SLICES)
        .min_by(|a, b| {
            b.slice_count
                .cmp(&a.slice_count)
                .then_with(|| a.series_id.cmp(&b.series_id))
        })
        .ok_or(VolumeError::NoEligibleSeries)
}

/// JSON header of the `.ctvol` container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub study_id: String,
    /// (z, y, x)
    pub dims: [usize; 3],
    /// (z, y, x) in millimetres
    pub spacing: [f64; 3],
    pub dtype: String,
}

pub const CONTAINER_DTYPE: &str = "int16le";

/// Paths of the header/payload pair for a study inside `dir`.
pub fn container_paths(dir: &Path, study_id: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{study_id}.ctvol.json")),
        dir.join(format!("{study_id}.ctvol.bin")),
    )
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `<study_id>.ctvol.json` and `<study_id>.ctvol.bin` into `dir`.
pub fn write_container(dir: &Path, v: &VoxelVolume) -> Result<(PathBuf, PathBuf), VolumeError> {
    let (hp, bp) = container_paths(dir, &v.study_id);
    let header = ContainerHeader {
        study_id: v.study_id.clone(),
        dims: v.dims(),
        spacing: v.spacing.0,
        dtype: CONTAINER_DTYPE.to_string(),
    };
    let json = serde_json::to_string_pretty(&header).map_err(|source| VolumeError::Json {
        path: hp.clone(),
        source,
    })?;
    fs::write(&hp, json).map_err(io_err(&hp))?;
    let mut payload = Vec::with_capacity(v.data.len() * 2);
    // iter() walks in logical (C) order regardless of memory layout
    for x in v.data.iter() {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(&bp, payload).map_err(io_err(&bp))?;
    Ok((hp, bp))
}

pub fn read_container(header_path: &Path, payload_path: &Path) -> Result<VoxelVolume, VolumeError> {
    let text = fs::read_to_string(header_path).map_err(io_err(header_path))?;
    let header: ContainerHeader =
        serde_json::from_str(&text).map_err(|source| VolumeError::Json {
            path: header_path.to_path_buf(),
            source,
        })?;
    if header.dtype != CONTAINER_DTYPE {
        return Err(VolumeError::UnsupportedDtype(header.dtype));
    }
    let bytes = fs::read(payload_path).map_err(io_err(payload_path))?;
    let expected: usize = header.dims.iter().product();
    if bytes.len() != expected * 2 {
        return Err(VolumeError::PayloadSize {
            expected,
            actual: bytes.len() / 2,
        });
    }
    let values: Vec<i16> = bytes
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]))
        .collect();
    let [z, y, x] = header.dims;
    if expected == 0 {
        return Err(VolumeError::EmptyVolume(header.dims));
    }
    let data = Array3::from_shape_vec((z, y, x), values).expect("shape checked above");
    VoxelVolume::new(data, Spacing(header.spacing), header.study_id)
}

/// One line of the ingestion manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub study_id: String,
    pub header_path: PathBuf,
    pub payload_path: PathBuf,
    /// Used for patient-level splitting; defaults to the study id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_id: Option<String>,
}

impl ManifestEntry {
    pub fn patient(&self) -> &str {
        self.patient_id.as_deref().unwrap_or(&self.study_id)
    }

    pub fn load(&self) -> Result<VoxelVolume, VolumeError> {
        read_container(&self.header_path, &self.payload_path)
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, VolumeError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| VolumeError::Json {
                path: path.to_path_buf(),
                source,
            })?,
        );
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), VolumeError> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn one_voxel(raw: f64, slope: f64, intercept: f64) -> i16 {
        let a = Array3::from_elem((1, 1, 1), raw);
        let v = rescale_to_hu(a.view(), slope, intercept, Spacing::ISOTROPIC_1MM, "s").unwrap();
        v.data()[[0, 0, 0]]
    }

    #[test]
    fn rescale_examples() {
        assert_eq!(one_voxel(1024.0, 1.0, -1024.0), 0);
        assert_eq!(one_voxel(3000.0, 1.0, -1024.0), 1000);
        assert_eq!(one_voxel(1024.0, 2.0, -2048.0), 0);
        // half away from zero
        assert_eq!(one_voxel(1.0, 0.5, 0.0), 1);
        assert_eq!(one_voxel(-1.0, 0.5, 0.0), -1);
        assert_eq!(one_voxel(0.0, 1.0, -5000.0), -1000);
    }

    #[test]
    fn rescale_errors() {
        let a = Array3::from_elem((1, 1, 1), 1.0f64);
        assert!(matches!(
            rescale_to_hu(a.view(), 0.0, 0.0, Spacing::ISOTROPIC_1MM, "s"),
            Err(VolumeError::InvalidRescale { .. })
        ));
        assert!(matches!(
            rescale_to_hu(a.view(), f64::NAN, 0.0, Spacing::ISOTROPIC_1MM, "s"),
            Err(VolumeError::InvalidRescale { .. })
        ));
        let e = Array3::<f64>::zeros((0, 2, 2));
        assert!(matches!(
            rescale_to_hu(e.view(), 1.0, 0.0, Spacing::ISOTROPIC_1MM, "s"),
            Err(VolumeError::EmptyVolume(_))
        ));
    }

    #[test]
    fn new_rejects_bad_spacing() {
        let d = Array3::<i16>::zeros((1, 1, 1));
        assert!(VoxelVolume::new(d.clone(), Spacing([1.0, 0.0, 1.0]), "s").is_err());
        assert!(VoxelVolume::new(d, Spacing([1.0, f64::INFINITY, 1.0]), "s").is_err());
    }

    #[test]
    fn resample_identity() {
        let d = Array3::from_shape_fn((4, 5, 6), |(z, y, x)| (z * 30 + y * 7 + x) as i16 - 50);
        let v = VoxelVolume::new(d, Spacing::ISOTROPIC_1MM, "s").unwrap();
        assert_eq!(resample_isotropic(&v, 1.0).unwrap(), v);
    }

    #[test]
    fn resample_constant_doubles() {
        let d = Array3::from_elem((3, 4, 5), 123i16);
        let v = VoxelVolume::new(d, Spacing([2.0, 2.0, 2.0]), "s").unwrap();
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r.dims(), [6, 8, 10]);
        assert!(r.data().iter().all(|&x| x == 123));
        assert_eq!(r.spacing(), Spacing::ISOTROPIC_1MM);
    }

    #[test]
    fn resample_ramp_matches_linear_oracle() {
        let d = Array3::from_shape_vec((3, 1, 1), vec![0i16, 2, 4]).unwrap();
        let v = VoxelVolume::new(d, Spacing([2.0, 1.0, 1.0]), "s").unwrap();
        let r = resample_isotropic(&v, 1.0).unwrap();
        let got: Vec<i16> = r.data().iter().copied().collect();
        // round(3 * 2 / 1) = 6 samples; the last one clamps to the edge voxel
        assert_eq!(got, vec![0, 1, 2, 3, 4, 4]);
    }

    #[test]
    fn resample_rejects_nonpositive_target() {
        let v = VoxelVolume::new(Array3::zeros((1, 1, 1)), Spacing::ISOTROPIC_1MM, "s").unwrap();
        assert!(matches!(
            resample_isotropic(&v, 0.0),
            Err(VolumeError::InvalidSpacing(_))
        ));
        assert!(resample_isotropic(&v, -1.0).is_err());
    }

    #[test]
    fn select_series_examples() {
        let c = vec![
            SeriesCandidate::deferred("a", 25),
            SeriesCandidate::deferred("b", 40),
            SeriesCandidate::deferred("c", 60),
        ];
        assert_eq!(select_series(&c).unwrap().series_id, "c");
        let c = vec![
            SeriesCandidate::deferred("a", 25),
            SeriesCandidate::deferred("b", 28),
        ];
        assert!(matches!(
            select_series(&c),
            Err(VolumeError::NoEligibleSeries)
        ));
        let c = vec![
            SeriesCandidate::deferred("b", 40),
            SeriesCandidate::deferred("a", 40),
        ];
        assert_eq!(select_series(&c).unwrap().series_id, "a");
    }

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = Array3::from_shape_fn((3, 4, 2), |(z, y, x)| (z as i16 - 1) * 300 + (y * 2 + x) as i16);
        let v = VoxelVolume::new(d, Spacing([2.5, 0.7, 0.7]), "study-1").unwrap();
        let (hp, bp) = write_container(dir.path(), &v).unwrap();
        assert!(hp.ends_with("study-1.ctvol.json"));
        assert_eq!(std::fs::metadata(&bp).unwrap().len(), 3 * 4 * 2 * 2);
        let back = read_container(&hp, &bp).unwrap();
        assert_eq!(back, v);

        let m = dir.path().join("m.jsonl");
        let entry = ManifestEntry {
            study_id: "study-1".into(),
            header_path: hp,
            payload_path: bp,
            patient_id: None,
        };
        write_manifest(&m, std::slice::from_ref(&entry)).unwrap();
        let got = read_manifest(&m).unwrap();
        assert_eq!(got, vec![entry]);
        assert_eq!(got[0].load().unwrap(), v);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let v = VoxelVolume::new(Array3::zeros((2, 2, 2)), Spacing::ISOTROPIC_1MM, "t").unwrap();
        let (hp, bp) = write_container(dir.path(), &v).unwrap();
        std::fs::write(&bp, [0u8; 6]).unwrap();
        assert!(matches!(
            read_container(&hp, &bp),
            Err(VolumeError::PayloadSize { .. })
        ));
    }

    proptest! {
        #[test]
        fn rescale_monotone(a in -5000.0f64..5000.0, b in -5000.0f64..5000.0,
                            slope in 0.01f64..4.0, intercept in -2000.0f64..2000.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(one_voxel(lo, slope, intercept) <= one_voxel(hi, slope, intercept));
        }

        #[test]
        fn trilinear_stays_within_neighbours(
            vals in proptest::collection::vec(-1000i16..=1000, 8),
            sz in 0.3f64..3.0, sy in 0.3f64..3.0, sx in 0.3f64..3.0,
        ) {
            let d = Array3::from_shape_vec((2, 2, 2), vals.clone()).unwrap();
            let v = VoxelVolume::new(d, Spacing([sz, sy, sx]), "p").unwrap();
            let r = resample_isotropic(&v, 1.0).unwrap();
            let lo = *vals.iter().min().unwrap();
            let hi = *vals.iter().max().unwrap();
            prop_assert!(r.data().iter().all(|&x| x >= lo && x <= hi));
        }

        #[test]
        fn select_series_permutation_invariant(
            counts in proptest::collection::vec(0usize..80, 1..8),
            rot in 0usize..8,
        ) {
            let c: Vec<_> = counts.iter().enumerate()
                .map(|(i, &n)| SeriesCandidate::deferred(format!("s{}", i % 3), n)).collect();
            let mut p = c.clone();
            let k = rot % p.len();
            p.rotate_left(k);
            p.reverse();
            let a = select_series(&c).map(|s| (s.series_id.clone(), s.slice_count)).ok();
            let b = select_series(&p).map(|s| (s.series_id.clone(), s.slice_count)).ok();
            prop_assert_eq!(a, b);
        }
    }
}
