//! Seeded synthetic studies for desk-scale checks: volumes with a bowel-loop
//! ring whose wall brightness and thickness follow the activity class, and
//! rule-consistent impressions naming the segment the ring sits in.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeler::{ActivityLabel, ReportDoc};
use crate::train::mix_seed;
use crate::volume::{write_container, write_manifest, ManifestEntry, Spacing, VolumeError, VoxelVolume};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Bowel segments and where their loop sits: (row half, column half, axial half).
pub const SEGMENTS: [(&str, [usize; 3]); 8] = [
    ("terminal ileum", [1, 1, 1]),
    ("cecum", [1, 1, 0]),
    ("ascending colon", [0, 1, 0]),
    ("transverse colon", [0, 0, 0]),
    ("descending colon", [0, 0, 1]),
    ("sigmoid colon", [1, 0, 1]),
    ("rectum", [1, 0, 0]),
    ("jejunum", [0, 1, 1]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub studies: usize,
    /// Normal, possibly abnormal, abnormal.
    pub distribution: [f64; 3],
    /// Scales the wall contrast of every ring.
    pub signal_strength: f64,
    /// `{segment}` is replaced by the segment name.
    pub templates: [Vec<String>; 3],
    /// Probability that a study reuses the previous study's patient.
    pub repeat_patient_rate: f64,
    /// (z, y, x)
    pub dims: [usize; 3],
    pub noise_hu: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let t = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        Self {
            studies: 125,
            distribution: [0.312, 0.224, 0.464],
            signal_strength: 1.0,
            templates: [
                t(&[
                    "No wall thickening or active inflammation of the {segment}.",
                    "no wall thickening or active inflammation of the {segment}",
                ]),
                t(&["Possible mild wall thickening of the {segment}."]),
                t(&["Active inflammation with wall thickening of the {segment}."]),
            ],
            repeat_patient_rate: 0.0,
            dims: [40, 48, 48],
            noise_hu: 12.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        let sum: f64 = self.distribution.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.distribution.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return bad(format!("distribution {:?} must be a probability vector", self.distribution));
        }
        if self.studies == 0 {
            return bad("studies must be positive".into());
        }
        if self.templates.iter().any(Vec::is_empty) {
            return bad("every class needs at least one template".into());
        }
        if self.dims[0] < crate::volume::MIN_SLICES || self.dims[1] < 16 || self.dims[2] < 16 {
            return bad(format!("dims {:?} too small", self.dims));
        }
        if !(0.0..=1.0).contains(&self.repeat_patient_rate) || self.signal_strength < 0.0 || self.noise_hu < 0.0 {
            return bad("rates and strengths must be non-negative".into());
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` over `p`; earlier classes win ties.
pub fn class_counts(n: usize, p: [f64; 3]) -> [usize; 3] {
    let raw = p.map(|v| v * n as f64);
    let mut counts = raw.map(|v| v.floor() as usize);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let assigned: usize = counts.iter().sum();
    for &c in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[c] += 1;
    }
    counts
}

#[derive(Debug, Clone)]
pub struct SyntheticStudy {
    pub study_id: String,
    pub patient_id: String,
    pub label: ActivityLabel,
    pub segment: usize,
    pub report: ReportDoc,
    pub volume: VoxelVolume,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelRecord {
    pub study_id: String,
    pub label: ActivityLabel,
}

/// Wall (thickness in voxels, HU) per class before signal scaling.
fn wall(label: ActivityLabel) -> (f64, f64) {
    match label {
        ActivityLabel::Normal => (1.0, 50.0),
        ActivityLabel::PossiblyAbnormal => (2.0, 130.0),
        ActivityLabel::Abnormal => (3.5, 220.0),
    }
}

const FAT_HU: f64 = -100.0;
const LUMEN_HU: f64 = 0.0;

fn render(spec: &SyntheticSpec, label: ActivityLabel, segment: usize, rng: &mut ChaCha8Rng) -> Array3<i16> {
    let [nz, ny, nx] = spec.dims;
    let [qy, qx, qz] = SEGMENTS[segment].1;
    let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-1.5..=1.5);
    let cy = (qy as f64 + 0.5) * ny as f64 / 2.0 + jitter(rng);
    let cx = (qx as f64 + 0.5) * nx as f64 / 2.0 + jitter(rng);
    let (z0, z1) = if qz == 0 { (0.15, 0.5) } else { (0.5, 0.85) };
    let (z0, z1) = ((z0 * nz as f64).round() as usize, (z1 * nz as f64).round() as usize);
    let (thickness, wall_hu) = wall(label);
    let wall_hu = FAT_HU + (wall_hu - FAT_HU) * spec.signal_strength;
    let lumen_r = ny.min(nx) as f64 / 12.0;
    let noise = Normal::new(0.0, spec.noise_hu.max(1e-9)).expect("finite noise");
    let (by, bx) = (ny as f64 / 2.0, nx as f64 / 2.0);
    Array3::from_shape_fn((nz, ny, nx), |(z, y, x)| {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        let body = ((fy - by) / (by * 0.98)).powi(2) + ((fx - bx) / (bx * 0.98)).powi(2) <= 1.0;
        let mut hu = if body { FAT_HU } else { -1000.0 };
        if body && (z0..z1).contains(&z) {
            let r = ((fy - cy).powi(2) + (fx - cx).powi(2)).sqrt();
            if r < lumen_r {
                hu = LUMEN_HU;
            } else if r < lumen_r + thickness {
                hu = wall_hu;
            }
        }
        if body {
            hu += noise.sample(rng);
        }
        hu.round() as i16
    })
}

/// Generates the whole dataset in memory. Study `i` depends only on the
/// seed and `i`.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<SyntheticStudy>, SynthError> {
    spec.validate()?;
    let counts = class_counts(spec.studies, spec.distribution);
    let mut labels: Vec<ActivityLabel> = ActivityLabel::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&l, c)| std::iter::repeat_n(l, c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    labels.shuffle(&mut rng);
    let mut patients = Vec::with_capacity(spec.studies);
    let mut next_patient = 0usize;
    for i in 0..spec.studies {
        if i == 0 || rng.random::<f64>() >= spec.repeat_patient_rate {
            next_patient += 1;
        }
        patients.push(format!("P{next_patient:04}"));
    }
    crate::parallel::try_map(&labels.iter().copied().enumerate().collect::<Vec<_>>(), |&(i, label)| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, i as u64 + 1));
        let segment = rng.random_range(0..SEGMENTS.len());
        let pool = &spec.templates[label.ordinal()];
        let impression = pool[rng.random_range(0..pool.len())].replace("{segment}", SEGMENTS[segment].0);
        let data = render(spec, label, segment, &mut rng);
        let study_id = format!("S{i:04}");
        let volume = VoxelVolume::from_clamped(data, Spacing::ISOTROPIC_1MM, study_id.clone())?;
        Ok(SyntheticStudy {
            report: ReportDoc::new(study_id.clone(), "Synthetic enterography volume.", impression),
            study_id,
            patient_id: patients[i].clone(),
            label,
            segment,
            volume,
        })
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPaths {
    pub manifest: PathBuf,
    pub reports: PathBuf,
    pub labels: PathBuf,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), SynthError> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `volumes/`, `manifest.jsonl`, `reports.jsonl` and `labels.jsonl`.
pub fn write_dataset(dir: &Path, studies: &[SyntheticStudy]) -> Result<SyntheticPaths, SynthError> {
    let vol_dir = dir.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|source| SynthError::Io {
        path: vol_dir.clone(),
        source,
    })?;
    let entries = crate::parallel::try_map(studies, |s| {
        let (header_path, payload_path) = write_container(&vol_dir, &s.volume)?;
        Ok::<_, SynthError>(ManifestEntry {
            study_id: s.study_id.clone(),
            header_path,
            payload_path,
            patient_id: Some(s.patient_id.clone()),
        })
    })?;
    let paths = SyntheticPaths {
        manifest: dir.join("manifest.jsonl"),
        reports: dir.join("reports.jsonl"),
        labels: dir.join("labels.jsonl"),
    };
    write_manifest(&paths.manifest, &entries)?;
    let reports: Vec<&ReportDoc> = studies.iter().map(|s| &s.report).collect();
    write_jsonl(&paths.reports, &reports)?;
    let labels: Vec<LabelRecord> = studies
        .iter()
        .map(|s| LabelRecord {
            study_id: s.study_id.clone(),
            label: s.label,
        })
        .collect();
    write_jsonl(&paths.labels, &labels)?;
    Ok(paths)
}
