//! Tissue masking and overlapping tile grids over a slide level.
//!
//! A level is thresholded on hue to produce a tissue mask, cleaned with
//! morphological closing then opening, and covered with an overlapping grid
//! of fixed-size tiles; tiles with insufficient tissue are discarded.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::raster::{GrayRaster, RgbRaster};

#[derive(Debug, thiserror::Error)]
pub enum TilerError {
    #[error("empty raster")]
    EmptyRaster,
    #[error("mask dimensions {0}x{1} do not match level {2}x{3}")]
    MaskMismatch(usize, usize, usize, usize),
    #[error("invalid tile config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    #[serde(rename = "5x")]
    Mag5x,
    #[serde(rename = "10x")]
    Mag10x,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::Mag5x => write!(f, "5x"),
            Level::Mag10x => write!(f, "10x"),
        }
    }
}

impl std::str::FromStr for Level {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "5x" => Ok(Level::Mag5x),
            "10x" => Ok(Level::Mag10x),
            other => Err(format!("unknown level '{other}' (expected 5x or 10x)")),
        }
    }
}

/// Identity of one tile: slide, magnification level, top-left corner and size.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileRef {
    pub slide_id: String,
    pub level: Level,
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TileConfig {
    pub tile_size: usize,
    pub overlap_fraction: f64,
    pub min_tissue_fraction: f64,
    /// Hue band `[lo, hi)` in [0,1). When `lo > hi` the band wraps through 1,
    /// i.e. a pixel is tissue when `h >= lo || h < hi`.
    pub hue_band: (f64, f64),
    pub morph_radius: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        TileConfig {
            tile_size: 256,
            overlap_fraction: 0.125,
            min_tissue_fraction: 0.80,
            hue_band: (0.6, 0.1),
            morph_radius: 2,
        }
    }
}

impl TileConfig {
    pub fn stride(&self) -> usize {
        (self.tile_size as f64 * (1.0 - self.overlap_fraction)).round() as usize
    }

    pub fn validate(&self) -> Result<(), TilerError> {
        if self.tile_size == 0 {
            return Err(TilerError::BadConfig("tile_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(TilerError::BadConfig(
                "overlap_fraction must lie in [0,1)".into(),
            ));
        }
        if self.stride() < 1 {
            return Err(TilerError::BadConfig("stride must be >= 1".into()));
        }
        if !(self.min_tissue_fraction > 0.0 && self.min_tissue_fraction <= 1.0) {
            return Err(TilerError::BadConfig(
                "min_tissue_fraction must lie in (0,1]".into(),
            ));
        }
        Ok(())
    }

    fn hue_in_band(&self, h: f64) -> bool {
        let (lo, hi) = self.hue_band;
        if lo <= hi {
            h >= lo && h < hi
        } else {
            h >= lo || h < hi
        }
    }
}

/// Standard hexcone RGB -> HSV. `h` is in [0,1) (0 for achromatic pixels),
/// `s` and `v` in [0,1].
pub fn rgb_to_hsv(px: [u8; 3]) -> (f64, f64, f64) {
    let r = px[0] as f64 / 255.0;
    let g = px[1] as f64 / 255.0;
    let b = px[2] as f64 / 255.0;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max == 0.0 { 0.0 } else { delta / max };
    if delta == 0.0 {
        return (0.0, s, v);
    }
    let mut h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    } / 6.0;
    if h >= 1.0 {
        h -= 1.0;
    }
    (h, s, v)
}

/// Binary tissue mask aligned to one slide level.
#[derive(Debug, Clone)]
pub struct TissueMask {
    pub width: usize,
    pub height: usize,
    pub level: Level,
    data: Vec<bool>,
}

impl TissueMask {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count_tissue(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn to_gray(&self) -> GrayRaster {
        let mut g = GrayRaster::new(self.width, self.height);
        for (i, &b) in self.data.iter().enumerate() {
            g.bytes_mut()[i] = if b { 255 } else { 0 };
        }
        g
    }

    pub fn from_gray(g: &GrayRaster, level: Level) -> TissueMask {
        TissueMask {
            width: g.width,
            height: g.height,
            level,
            data: g.bytes().iter().map(|&v| v != 0).collect(),
        }
    }
}

/// Separable running-extreme filter with a square window of side `2r+1`.
/// Windows are clipped at the borders, so a solid mask stays solid.
fn square_filter(src: &[bool], w: usize, h: usize, r: usize, max_mode: bool) -> Vec<bool> {
    let pick = |acc: bool, v: bool| if max_mode { acc || v } else { acc && v };
    let mut tmp = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            let mut acc = src[y * w + lo];
            for xx in lo + 1..=hi {
                acc = pick(acc, src[y * w + xx]);
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![false; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            let mut acc = tmp[lo * w + x];
            for yy in lo + 1..=hi {
                acc = pick(acc, tmp[yy * w + x]);
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn dilate(src: &[bool], w: usize, h: usize, r: usize) -> Vec<bool> {
    square_filter(src, w, h, r, true)
}

fn erode(src: &[bool], w: usize, h: usize, r: usize) -> Vec<bool> {
    square_filter(src, w, h, r, false)
}

/// Hue-threshold the level and clean the result with morphological closing
/// (dilate, erode) followed by opening (erode, dilate).
pub fn tissue_mask(level: &RgbRaster, level_tag: Level, cfg: &TileConfig) -> Result<TissueMask, TilerError> {
    if level.width == 0 || level.height == 0 {
        return Err(TilerError::EmptyRaster);
    }
    cfg.validate()?;
    let (w, h) = (level.width, level.height);
    let mut data: Vec<bool> = Vec::with_capacity(w * h);
    for px in level.pixels() {
        let (hue, _, _) = rgb_to_hsv(px);
        data.push(cfg.hue_in_band(hue));
    }
    if cfg.morph_radius > 0 {
        let r = cfg.morph_radius;
        // closing
        data = erode(&dilate(&data, w, h, r), w, h, r);
        // opening
        data = dilate(&erode(&data, w, h, r), w, h, r);
    }
    Ok(TissueMask {
        width: w,
        height: h,
        level: level_tag,
        data,
    })
}

/// A grid tile together with its measured tissue coverage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileIndexEntry {
    #[serde(flatten)]
    pub tile: TileRef,
    pub tissue_fraction: f64,
}

/// Enumerate grid positions (multiples of the stride such that the tile fits
/// entirely inside the level) and keep tiles whose mask coverage reaches
/// `min_tissue_fraction`. Output is sorted by (y, x).
pub fn tile_grid(
    slide_id: &str,
    mask: &TissueMask,
    cfg: &TileConfig,
) -> Result<Vec<TileIndexEntry>, TilerError> {
    cfg.validate()?;
    let (w, h) = (mask.width, mask.height);
    let n = cfg.tile_size;
    if w < n || h < n {
        return Ok(Vec::new());
    }
    let stride = cfg.stride();

    // summed-area table over the mask: sat[y+1][x+1] = tissue count in [0..=x, 0..=y]
    let mut sat = vec![0u64; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0u64;
        for x in 0..w {
            row += mask.get(x, y) as u64;
            sat[(y + 1) * (w + 1) + (x + 1)] = sat[y * (w + 1) + (x + 1)] + row;
        }
    }
    let area_count = |x: usize, y: usize, size: usize| -> u64 {
        sat[(y + size) * (w + 1) + (x + size)] + sat[y * (w + 1) + x]
            - sat[(y + size) * (w + 1) + x]
            - sat[y * (w + 1) + (x + size)]
    };

    let tile_area = (n * n) as f64;
    let mut out = Vec::new();
    let mut y = 0;
    while y + n <= h {
        let mut x = 0;
        while x + n <= w {
            let fraction = area_count(x, y, n) as f64 / tile_area;
            if fraction >= cfg.min_tissue_fraction {
                out.push(TileIndexEntry {
                    tile: TileRef {
                        slide_id: slide_id.to_string(),
                        level: mask.level,
                        x,
                        y,
                        size: n,
                    },
                    tissue_fraction: fraction,
                });
            }
            x += stride;
        }
        y += stride;
    }
    Ok(out)
}

/// A 5x tile projected into 10x coordinates. `clamped` is set when the
/// doubled rectangle overhung the 10x raster and was shifted (or shrunk) to
/// fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedTile {
    pub tile: TileRef,
    pub clamped: bool,
}

/// Double a 5x tile's coordinates and size to address the same region at 10x.
pub fn project_tile(tile_5x: &TileRef, dims_10x: (usize, usize)) -> ProjectedTile {
    assert_eq!(tile_5x.level, Level::Mag5x, "project_tile expects a 5x tile");
    let (w, h) = dims_10x;
    let mut x = tile_5x.x * 2;
    let mut y = tile_5x.y * 2;
    let mut size = tile_5x.size * 2;
    let mut clamped = false;
    if size > w || size > h {
        size = w.min(h);
        clamped = true;
    }
    if x + size > w {
        x = w - size;
        clamped = true;
    }
    if y + size > h {
        y = h - size;
        clamped = true;
    }
    ProjectedTile {
        tile: TileRef {
            slide_id: tile_5x.slide_id.clone(),
            level: Level::Mag10x,
            x,
            y,
            size,
        },
        clamped,
    }
}

/// Split a projected 2N x 2N region into its four non-overlapping N x N
/// sub-tiles (row-major order).
pub fn split_into_subtiles(tile_10x: &TileRef) -> Vec<TileRef> {
    let half = tile_10x.size / 2;
    let mut out = Vec::with_capacity(4);
    for dy in 0..2 {
        for dx in 0..2 {
            out.push(TileRef {
                slide_id: tile_10x.slide_id.clone(),
                level: tile_10x.level,
                x: tile_10x.x + dx * half,
                y: tile_10x.y + dy * half,
                size: half,
            });
        }
    }
    out
}
