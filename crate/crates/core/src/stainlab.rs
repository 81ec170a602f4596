//! Color operations: statistics-matching stain normalization in the log-LMS
//! opponent space (lαβ) and the blue-ratio transform.
//!
//! The normalization follows the classic color-transfer recipe: convert RGB
//! to LMS with the published 3x3 matrix, take log10 (floored at 1e-6 so zero
//! channels stay finite), rotate into lαβ, match per-channel mean and
//! standard deviation to a target, and invert. All math is f64; pixels are
//! quantized only at the final clamp back to u8.

use serde::{Deserialize, Serialize};

use crate::raster::RgbRaster;

const LOG_FLOOR: f64 = 1e-6;

const RGB_TO_LMS: [[f64; 3]; 3] = [
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
];

// Exact f64 inverse of RGB_TO_LMS (the commonly quoted 4-decimal inverse is
// too coarse for a lossless round-trip).
const LMS_TO_RGB: [[f64; 3]; 3] = [
    [4.468669863496255, -3.5886759034721267, 0.11960436657860116],
    [-1.2197166276177631, 2.3830879129554567, -0.16263011175140055],
    [0.058508476938545856, -0.2610784390276937, 1.205665908525623],
];

const SQRT3_INV: f64 = 0.577_350_269_189_625_8; // 1/sqrt(3)
const SQRT6_INV: f64 = 0.408_248_290_463_863_05; // 1/sqrt(6)
const SQRT2_INV: f64 = 0.707_106_781_186_547_6; // 1/sqrt(2)

#[derive(Debug, thiserror::Error)]
pub enum StainError {
    #[error("empty tile")]
    EmptyTile,
    #[error("target statistics degenerate (zero std in channel {0})")]
    DegenerateTarget(usize),
}

/// Per-channel mean and standard deviation in lαβ space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl StainStats {
    /// True when any channel has zero spread (uniform tile).
    pub fn is_degenerate(&self) -> bool {
        self.std.iter().any(|&s| s == 0.0)
    }
}

#[inline]
fn mat_mul(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// RGB (0-255) -> lαβ for one pixel.
#[inline]
pub fn rgb_to_lab(px: [u8; 3]) -> [f64; 3] {
    let rgb = [px[0] as f64, px[1] as f64, px[2] as f64];
    let lms = mat_mul(&RGB_TO_LMS, rgb);
    let log = [
        lms[0].max(LOG_FLOOR).log10(),
        lms[1].max(LOG_FLOOR).log10(),
        lms[2].max(LOG_FLOOR).log10(),
    ];
    [
        SQRT3_INV * (log[0] + log[1] + log[2]),
        SQRT6_INV * (log[0] + log[1] - 2.0 * log[2]),
        SQRT2_INV * (log[0] - log[1]),
    ]
}

/// lαβ -> RGB (clamped to 0-255, rounded) for one pixel.
#[inline]
pub fn lab_to_rgb(lab: [f64; 3]) -> [u8; 3] {
    let log = [
        SQRT3_INV * lab[0] + SQRT6_INV * lab[1] + SQRT2_INV * lab[2],
        SQRT3_INV * lab[0] + SQRT6_INV * lab[1] - SQRT2_INV * lab[2],
        SQRT3_INV * lab[0] - 2.0 * SQRT6_INV * lab[1],
    ];
    let lms = [
        10f64.powf(log[0]),
        10f64.powf(log[1]),
        10f64.powf(log[2]),
    ];
    let rgb = mat_mul(&LMS_TO_RGB, lms);
    let q = |v: f64| -> u8 { v.clamp(0.0, 255.0).round() as u8 };
    [q(rgb[0]), q(rgb[1]), q(rgb[2])]
}

/// Per-channel mean and population standard deviation of the tile in lαβ.
/// A channel whose values are all identical gets std exactly 0.
pub fn compute_stats(tile: &RgbRaster) -> Result<StainStats, StainError> {
    if tile.width == 0 || tile.height == 0 {
        return Err(StainError::EmptyTile);
    }
    let n = (tile.width * tile.height) as f64;
    let labs: Vec<[f64; 3]> = tile.pixels().map(rgb_to_lab).collect();
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..3 {
        let mut sum = 0.0;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for lab in &labs {
            sum += lab[c];
            lo = lo.min(lab[c]);
            hi = hi.max(lab[c]);
        }
        mean[c] = sum / n;
        if lo == hi {
            // constant channel: exactly degenerate, regardless of rounding
            mean[c] = lo;
            std[c] = 0.0;
        } else {
            let var = labs.iter().map(|l| (l[c] - mean[c]).powi(2)).sum::<f64>() / n;
            std[c] = var.max(0.0).sqrt();
        }
    }
    Ok(StainStats { mean, std })
}

#[derive(Debug, Clone)]
pub struct NormalizeOutcome {
    pub tile: RgbRaster,
    /// Channels that had zero source spread and were only mean-shifted.
    pub degenerate_channels: [bool; 3],
}

/// Match the tile's lαβ statistics to `target`: scale each channel about the
/// source mean by `target_std / source_std`, then shift to the target mean.
pub fn normalize(tile: &RgbRaster, target: &StainStats) -> Result<NormalizeOutcome, StainError> {
    let src = compute_stats(tile)?;
    normalize_with_source(tile, &src, target)
}

/// [`normalize`] with externally supplied source statistics (e.g. whole-slide
/// statistics applied uniformly to every tile of that slide).
pub fn normalize_with_source(
    tile: &RgbRaster,
    src: &StainStats,
    target: &StainStats,
) -> Result<NormalizeOutcome, StainError> {
    if let Some(c) = target.std.iter().position(|&s| s <= 0.0) {
        return Err(StainError::DegenerateTarget(c));
    }
    if tile.width == 0 || tile.height == 0 {
        return Err(StainError::EmptyTile);
    }
    let mut scale = [0.0; 3];
    let mut degenerate = [false; 3];
    for c in 0..3 {
        if src.std[c] == 0.0 {
            degenerate[c] = true;
            scale[c] = 1.0;
        } else {
            scale[c] = target.std[c] / src.std[c];
        }
    }
    let mut out = RgbRaster::new(tile.width, tile.height);
    for y in 0..tile.height {
        for x in 0..tile.width {
            let lab = rgb_to_lab(tile.get(x, y));
            let mut mapped = [0.0; 3];
            for c in 0..3 {
                mapped[c] = (lab[c] - src.mean[c]) * scale[c] + target.mean[c];
            }
            out.set(x, y, lab_to_rgb(mapped));
        }
    }
    Ok(NormalizeOutcome {
        tile: out,
        degenerate_channels: degenerate,
    })
}

/// Per-pixel blue ratio: `Br = 100*B/(1+R+G) * 256/(1+R+G+B)`, channels taken
/// as 0-255 integers.
#[derive(Debug, Clone)]
pub struct BlueRatioMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

#[inline]
pub fn blue_ratio_pixel(px: [u8; 3]) -> f64 {
    let r = px[0] as f64;
    let g = px[1] as f64;
    let b = px[2] as f64;
    (100.0 * b / (1.0 + r + g)) * (256.0 / (1.0 + r + g + b))
}

pub fn blue_ratio(tile: &RgbRaster) -> BlueRatioMap {
    BlueRatioMap {
        width: tile.width,
        height: tile.height,
        values: tile.pixels().map(blue_ratio_pixel).collect(),
    }
}

pub fn mean_blue_ratio(tile: &RgbRaster) -> f64 {
    if tile.width == 0 || tile.height == 0 {
        return 0.0;
    }
    let map = blue_ratio(tile);
    map.values.iter().sum::<f64>() / map.values.len() as f64
}
