//! Slice planning, HU windowing into three-channel slices, and montage
//! construction for the generation pathway.

use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{VoxelVolume, MIN_SLICES};

#[derive(Debug, Error)]
pub enum EncodingError {
    #[error("index {index} outside {plane:?} extent {extent}")]
    IndexOutOfRange {
        plane: Plane,
        index: usize,
        extent: usize,
    },
    #[error("volume has {0} axial slices, montage needs at least {MIN_SLICES}")]
    VolumeTooSmall(usize),
    #[error("invalid window [{lo}, {hi}]")]
    InvalidWindow { lo: f64, hi: f64 },
    #[error("invalid encoding config: {0}")]
    InvalidConfig(String),
    #[error("png write failed: {0}")]
    Image(#[from] image::ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    /// Volume axis the plane index runs along.
    pub fn axis(self) -> usize {
        match self {
            Plane::Axial => 0,
            Plane::Coronal => 1,
            Plane::Sagittal => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }
}

/// Closed HU interval mapped linearly onto [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HuWindow {
    pub lo: f64,
    pub hi: f64,
}

impl HuWindow {
    pub const SOFT_TISSUE: HuWindow = HuWindow { lo: -150.0, hi: 250.0 };
    pub const FULL_RANGE: HuWindow = HuWindow { lo: -1000.0, hi: 1000.0 };
    pub const ENHANCED: HuWindow = HuWindow { lo: 0.0, hi: 500.0 };
    pub const MONTAGE: HuWindow = HuWindow { lo: -160.0, hi: 240.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self, EncodingError> {
        if lo.is_finite() && hi.is_finite() && lo < hi {
            Ok(Self { lo, hi })
        } else {
            Err(EncodingError::InvalidWindow { lo, hi })
        }
    }
}

pub fn window_to_unit(hu: f64, w: HuWindow) -> f64 {
    ((hu - w.lo) / (w.hi - w.lo)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingMode {
    Grayscale,
    AdjacentRgb,
    MultiwindowRgb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Linear,
    Stratified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodingConfig {
    pub mode: EncodingMode,
    /// Slices per plane; planes absent from the list are not sampled.
    pub counts: Vec<(Plane, usize)>,
    pub sampling: Sampling,
    pub range: (f64, f64),
    /// Window for grayscale and adjacent-slice modes.
    pub window: HuWindow,
    /// Per-channel windows for multi-window mode (R, G, B).
    pub rgb_windows: [HuWindow; 3],
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            mode: EncodingMode::MultiwindowRgb,
            counts: vec![(Plane::Axial, 16), (Plane::Coronal, 6), (Plane::Sagittal, 6)],
            sampling: Sampling::Linear,
            range: (0.20, 0.80),
            window: HuWindow::SOFT_TISSUE,
            rgb_windows: [HuWindow::SOFT_TISSUE, HuWindow::FULL_RANGE, HuWindow::ENHANCED],
        }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<(), EncodingError> {
        let (lo, hi) = self.range;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(EncodingError::InvalidConfig(format!(
                "range ({lo}, {hi}) must satisfy 0 <= lo < hi <= 1"
            )));
        }
        if self.counts.is_empty() || self.counts.iter().any(|&(_, n)| n == 0) {
            return Err(EncodingError::InvalidConfig(
                "every selected plane needs at least one slice".into(),
            ));
        }
        for w in std::iter::once(&self.window).chain(self.rgb_windows.iter()) {
            HuWindow::new(w.lo, w.hi)?;
        }
        Ok(())
    }

    /// Total planned slices before deduplication.
    pub fn max_slices(&self) -> usize {
        self.counts.iter().map(|&(_, n)| n).sum()
    }
}

/// `count` evenly spaced fractions over `[lo, hi]`; a single slice takes the midpoint.
pub fn linear_fractions(count: usize, (lo, hi): (f64, f64)) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        n => {
            let step = (hi - lo) / (n - 1) as f64;
            (0..n)
                .map(|k| if k == n - 1 { hi } else { lo + k as f64 * step })
                .collect()
        }
    }
}

/// One seeded uniform draw per equal-width bin of `[lo, hi]`.
pub fn stratified_fractions(count: usize, (lo, hi): (f64, f64), rng: &mut impl Rng) -> Vec<f64> {
    let width = (hi - lo) / count as f64;
    (0..count)
        .map(|k| lo + (k as f64 + rng.random::<f64>()) * width)
        .collect()
}

pub fn fraction_to_index(fraction: f64, dim: usize) -> usize {
    (fraction * (dim.saturating_sub(1)) as f64).round() as usize
}

fn plane_seed(seed: u64, plane: Plane) -> u64 {
    seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(plane.axis() as u64 + 1))
}

/// Plans `(plane, index)` slice positions for a volume of extent `dims` (z, y, x).
/// Duplicate positions are dropped, keeping first occurrences.
pub fn plan_slices(dims: [usize; 3], config: &EncodingConfig, seed: u64) -> Vec<(Plane, usize)> {
    let mut out: Vec<(Plane, usize)> = Vec::new();
    for &(plane, count) in &config.counts {
        let dim = dims[plane.axis()].max(1);
        let fractions = match config.sampling {
            Sampling::Linear => linear_fractions(count, config.range),
            Sampling::Stratified => {
                let mut rng = ChaCha8Rng::seed_from_u64(plane_seed(seed, plane));
                stratified_fractions(count, config.range, &mut rng)
            }
        };
        for f in fractions {
            let key = (plane, fraction_to_index(f, dim));
            if !out.contains(&key) {
                out.push(key);
            }
        }
    }
    out
}

/// A three-channel slice image with values in [0, 1], laid out (row, col, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct RgbSlice {
    pub pixels: Array3<f32>,
    pub plane: Plane,
    pub index: usize,
    /// Position of the slice along its axis, in [0, 1].
    pub fraction: f64,
}

/// Extracts a 2D HU plane. Coronal and sagittal planes keep z as the row axis.
pub fn plane_view(v: &VoxelVolume, plane: Plane, index: usize) -> ArrayView2<'_, i16> {
    match plane {
        Plane::Axial => v.data().slice(s![index, .., ..]),
        Plane::Coronal => v.data().slice(s![.., index, ..]),
        Plane::Sagittal => v.data().slice(s![.., .., index]),
    }
}

fn check_index(v: &VoxelVolume, plane: Plane, index: usize) -> Result<usize, EncodingError> {
    let extent = v.dims()[plane.axis()];
    if index >= extent {
        return Err(EncodingError::IndexOutOfRange {
            plane,
            index,
            extent,
        });
    }
    Ok(extent)
}

fn stack_channels(channels: [Array2<f32>; 3]) -> Array3<f32> {
    let (h, w) = channels[0].dim();
    Array3::from_shape_fn((h, w, 3), |(r, c, ch)| channels[ch][[r, c]])
}

fn windowed(plane: ArrayView2<'_, i16>, w: HuWindow) -> Array2<f32> {
    plane.mapv(|hu| window_to_unit(hu as f64, w) as f32)
}

pub fn encode_slice(
    v: &VoxelVolume,
    plane: Plane,
    index: usize,
    config: &EncodingConfig,
) -> Result<RgbSlice, EncodingError> {
    let extent = check_index(v, plane, index)?;
    let pixels = match config.mode {
        EncodingMode::Grayscale => {
            let g = windowed(plane_view(v, plane, index), config.window);
            stack_channels([g.clone(), g.clone(), g])
        }
        EncodingMode::MultiwindowRgb => {
            let p = plane_view(v, plane, index);
            let [r, g, b] = config.rgb_windows;
            stack_channels([windowed(p, r), windowed(p, g), windowed(p, b)])
        }
        EncodingMode::AdjacentRgb => {
            let prev = index.saturating_sub(1);
            let next = (index + 1).min(extent - 1);
            stack_channels([prev, index, next].map(|i| windowed(plane_view(v, plane, i), config.window)))
        }
    };
    let fraction = if extent > 1 {
        index as f64 / (extent - 1) as f64
    } else {
        0.5
    };
    Ok(RgbSlice {
        pixels,
        plane,
        index,
        fraction,
    })
}

/// Encodes every planned slice of a volume.
pub fn encode_volume(
    v: &VoxelVolume,
    config: &EncodingConfig,
    seed: u64,
) -> Result<Vec<RgbSlice>, EncodingError> {
    plan_slices(v.dims(), config, seed)
        .into_iter()
        .map(|(plane, index)| encode_slice(v, plane, index, config))
        .collect()
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (in_h, in_w, ch) = img.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return img.clone();
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let c = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = c.floor() as usize;
                (i0, (i0 + 1).min(n_in - 1), (c - i0 as f64) as f32)
            })
            .collect()
    };
    let ty = taps(in_h, out_h);
    let tx = taps(in_w, out_w);
    let lerp = |a: f32, b: f32, t: f32| if t == 0.0 || a == b { a } else { a + (b - a) * t };
    Array3::from_shape_fn((out_h, out_w, ch), |(r, c, k)| {
        let (y0, y1, fy) = ty[r];
        let (x0, x1, fx) = tx[c];
        let top = lerp(img[[y0, x0, k]], img[[y0, x1, k]], fx);
        let bot = lerp(img[[y1, x0, k]], img[[y1, x1, k]], fx);
        lerp(top, bot, fy)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MontageConfig {
    pub counts: Vec<(Plane, usize)>,
    pub range: (f64, f64),
    pub window: HuWindow,
    pub columns: usize,
    pub tile: usize,
    pub max_side: usize,
}

impl Default for MontageConfig {
    fn default() -> Self {
        Self {
            counts: vec![(Plane::Axial, 16), (Plane::Coronal, 10), (Plane::Sagittal, 10)],
            range: (0.20, 0.80),
            window: HuWindow::MONTAGE,
            columns: 3,
            tile: 256,
            max_side: 1536,
        }
    }
}

/// Train-time augmentation bounds for montages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MontageJitter {
    pub slice_jitter: i64,
    pub hu_jitter: i64,
}

impl Default for MontageJitter {
    fn default() -> Self {
        Self {
            slice_jitter: 3,
            hu_jitter: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub plane: Plane,
    pub count: usize,
    pub rows: usize,
    pub columns: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MontageImage {
    /// (row, col, channel), values in [0, 1].
    pub pixels: Array3<f32>,
    pub layout: Vec<BlockLayout>,
    /// Canvas size before the final resize, (height, width).
    pub canvas_size: (usize, usize),
}

impl MontageImage {
    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w, _) = self.pixels.dim();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |k| (self.pixels[[y as usize, x as usize, k]].clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn write_png(&self, path: &Path) -> Result<(), EncodingError> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// Assembles the un-resized montage canvas and its block layout.
pub fn montage_canvas(
    v: &VoxelVolume,
    cfg: &MontageConfig,
    jitter: Option<MontageJitter>,
    seed: u64,
) -> Result<(Array3<f32>, Vec<BlockLayout>), EncodingError> {
    if v.axial_len() < MIN_SLICES {
        return Err(EncodingError::VolumeTooSmall(v.axial_len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let window = match jitter {
        Some(j) => {
            let dlo = rng.random_range(-j.hu_jitter..=j.hu_jitter) as f64;
            let dhi = rng.random_range(-j.hu_jitter..=j.hu_jitter) as f64;
            HuWindow::new(cfg.window.lo + dlo, cfg.window.hi + dhi)?
        }
        None => cfg.window,
    };
    let tile = cfg.tile;
    let layout: Vec<BlockLayout> = cfg
        .counts
        .iter()
        .map(|&(plane, count)| BlockLayout {
            plane,
            count,
            rows: count.div_ceil(cfg.columns),
            columns: cfg.columns,
        })
        .collect();
    let total_rows: usize = layout.iter().map(|b| b.rows).sum();
    let mut canvas = Array3::<f32>::zeros((total_rows * tile, cfg.columns * tile, 3));
    let mut row0 = 0usize;
    for block in &layout {
        let extent = v.dims()[block.plane.axis()];
        for (cell, f) in linear_fractions(block.count, cfg.range).into_iter().enumerate() {
            let mut index = fraction_to_index(f, extent) as i64;
            if let Some(j) = jitter {
                index += rng.random_range(-j.slice_jitter..=j.slice_jitter);
            }
            let index = index.clamp(0, extent as i64 - 1) as usize;
            let prev = index.saturating_sub(1);
            let next = (index + 1).min(extent - 1);
            let rgb = stack_channels([prev, index, next].map(|i| windowed(plane_view(v, block.plane, i), window)));
            let tile_img = resize_bilinear(&rgb, tile, tile);
            let (r, c) = (row0 + cell / cfg.columns, cell % cfg.columns);
            canvas
                .slice_mut(s![r * tile..(r + 1) * tile, c * tile..(c + 1) * tile, ..])
                .assign(&tile_img);
        }
        row0 += block.rows;
    }
    Ok((canvas, layout))
}

/// Multiplanar montage: adjacent-slice RGB tiles in a fixed-column grid, plane
/// blocks stacked vertically, resized so the longest side fits `max_side`.
pub fn build_montage(
    v: &VoxelVolume,
    cfg: &MontageConfig,
    jitter: Option<MontageJitter>,
    seed: u64,
) -> Result<MontageImage, EncodingError> {
    let (canvas, layout) = montage_canvas(v, cfg, jitter, seed)?;
    let (h, w, _) = canvas.dim();
    let longest = h.max(w);
    let pixels = if longest > cfg.max_side {
        let scale = cfg.max_side as f64 / longest as f64;
        let nh = ((h as f64 * scale).round() as usize).clamp(1, cfg.max_side);
        let nw = ((w as f64 * scale).round() as usize).clamp(1, cfg.max_side);
        resize_bilinear(&canvas, nh, nw)
    } else {
        canvas
    };
    Ok(MontageImage {
        pixels,
        layout,
        canvas_size: (h, w),
    })
}
