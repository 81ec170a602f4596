//! Handcrafted tile features: 16 first-order intensity statistics plus 5
//! co-occurrence texture features over 4 offsets (20 values), concatenated to
//! a 36-dimensional vector. Externally computed embeddings can be ingested
//! from the same binary file format the extractor writes.

use std::io::{self, Read, Write};

use crate::raster::RgbRaster;
use crate::stainlab::{self, StainStats};
use crate::tiler::TileRef;

/// Schema identifier for the built-in extractor.
pub const SCHEMA_FO16_GLCM20: &str = "fo16-glcm20-d36";
pub const FEATURE_DIM: usize = 36;

/// GLCM quantization levels and pair offsets (dy, dx).
pub const GLCM_LEVELS: usize = 32;
pub const GLCM_OFFSETS: [(isize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("empty tile")]
    EmptyTile,
    #[error("tile must be at least 2x2 for co-occurrence features")]
    TileTooSmall,
    #[error("tile ({x},{y}) size {size} does not fit level {w}x{h}")]
    TileOutsideLevel {
        x: usize,
        y: usize,
        size: usize,
        w: usize,
        h: usize,
    },
    #[error("stain error: {0}")]
    Stain(#[from] stainlab::StainError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed feature file header at byte {offset}: {reason}")]
    BadHeader { offset: usize, reason: String },
    #[error("feature payload length mismatch: expected {expected} bytes, got {actual}")]
    PayloadMismatch { expected: usize, actual: usize },
}

/// Grayscale tile as u8 luma values, `round(0.299 R + 0.587 G + 0.114 B)`.
pub fn to_grayscale(tile: &RgbRaster) -> Vec<u8> {
    tile.pixels()
        .map(|p| {
            let luma = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
            luma.round().clamp(0.0, 255.0) as u8
        })
        .collect()
}

/// Percentile with linear interpolation between closest ranks: the value at
/// fractional index `(n-1) * p` of the sorted data.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let idx = (n - 1) as f64 * p;
    let lo = idx.floor() as usize;
    let hi = idx.ceil() as usize;
    let frac = idx - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// The 16 first-order statistics, in order: mean, variance, std, min, max,
/// range, median, p10, p90, iqr, skewness, kurtosis, energy, entropy, mean
/// absolute deviation, rms.
///
/// Variance is the population variance; skewness is `m3 / m2^1.5` and
/// kurtosis `m4 / m2^2` (both defined as 0 for constant tiles); entropy uses
/// a 256-bin histogram with log2 and the convention `0 log 0 = 0`; energy is
/// the plain sum of squared intensities.
pub fn first_order_features(gray: &[u8]) -> Result<[f64; 16], FeatureError> {
    if gray.is_empty() {
        return Err(FeatureError::EmptyTile);
    }
    let n = gray.len() as f64;
    let vals: Vec<f64> = gray.iter().map(|&v| v as f64).collect();

    let mean = vals.iter().sum::<f64>() / n;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    let mut m4 = 0.0;
    let mut mad = 0.0;
    let mut energy = 0.0;
    for &v in &vals {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
        mad += d.abs();
        energy += v * v;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    mad /= n;
    let variance = m2;
    let std = variance.sqrt();
    let (skewness, kurtosis) = if m2 > 0.0 {
        (m3 / (m2 * std), m4 / (m2 * m2))
    } else {
        (0.0, 0.0)
    };

    let mut sorted = vals.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let min = sorted[0];
    let max = sorted[sorted.len() - 1];
    let median = percentile(&sorted, 0.5);
    let p10 = percentile(&sorted, 0.10);
    let p90 = percentile(&sorted, 0.90);
    let iqr = percentile(&sorted, 0.75) - percentile(&sorted, 0.25);

    let mut hist = [0u64; 256];
    for &v in gray {
        hist[v as usize] += 1;
    }
    let mut entropy = 0.0;
    for &count in &hist {
        if count > 0 {
            let p = count as f64 / n;
            entropy -= p * p.log2();
        }
    }
    let rms = (energy / n).sqrt();

    Ok([
        mean, variance, std, min, max, max - min, median, p10, p90, iqr, skewness, kurtosis,
        energy, entropy, mad, rms,
    ])
}

/// Symmetric normalized co-occurrence matrix for one offset after uniform
/// quantization to `GLCM_LEVELS` gray levels.
fn cooccurrence(gray: &[u8], w: usize, h: usize, offset: (isize, isize)) -> Vec<f64> {
    let bins = GLCM_LEVELS;
    let quant = |v: u8| -> usize { v as usize * bins / 256 };
    let mut counts = vec![0u64; bins * bins];
    let (dy, dx) = offset;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (ny, nx) = (y + dy, x + dx);
            if ny < 0 || ny >= h as isize || nx < 0 || nx >= w as isize {
                continue;
            }
            let a = quant(gray[y as usize * w + x as usize]);
            let b = quant(gray[ny as usize * w + nx as usize]);
            counts[a * bins + b] += 1;
            counts[b * bins + a] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect()
}

/// contrast, correlation, energy (angular second moment), homogeneity
/// (inverse difference moment), entropy — for one normalized matrix.
fn glcm_summary(p: &[f64]) -> [f64; 5] {
    let bins = GLCM_LEVELS;
    let mut contrast = 0.0;
    let mut energy = 0.0;
    let mut homogeneity = 0.0;
    let mut entropy = 0.0;
    let mut mean_i = 0.0;
    let mut mean_j = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let v = p[i * bins + j];
            let d = i as f64 - j as f64;
            contrast += v * d * d;
            energy += v * v;
            homogeneity += v / (1.0 + d * d);
            if v > 0.0 {
                entropy -= v * v.log2();
            }
            mean_i += i as f64 * v;
            mean_j += j as f64 * v;
        }
    }
    let mut var_i = 0.0;
    let mut var_j = 0.0;
    let mut cov = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let v = p[i * bins + j];
            var_i += (i as f64 - mean_i).powi(2) * v;
            var_j += (j as f64 - mean_j).powi(2) * v;
            cov += (i as f64 - mean_i) * (j as f64 - mean_j) * v;
        }
    }
    // zero marginal variance (single occupied level): correlation defined as 1
    let correlation = if var_i <= 0.0 || var_j <= 0.0 {
        1.0
    } else {
        cov / (var_i.sqrt() * var_j.sqrt())
    };
    [contrast, correlation, energy, homogeneity, entropy]
}

/// 20 co-occurrence features: 5 summaries for each of the 4 offsets, in
/// `GLCM_OFFSETS` order.
pub fn glcm_features(gray: &[u8], w: usize, h: usize) -> Result<[f64; 20], FeatureError> {
    if w < 2 || h < 2 {
        return Err(FeatureError::TileTooSmall);
    }
    debug_assert_eq!(gray.len(), w * h);
    let mut out = [0.0; 20];
    for (k, &offset) in GLCM_OFFSETS.iter().enumerate() {
        let p = cooccurrence(gray, w, h, offset);
        out[k * 5..k * 5 + 5].copy_from_slice(&glcm_summary(&p));
    }
    Ok(out)
}

/// Stain-normalization mode applied before feature extraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalization<'a> {
    Off,
    /// Each tile's own statistics are matched to the target.
    PerTile { target: &'a StainStats },
    /// Fixed per-slide source statistics; preserves contrasts between tiles.
    PerSlide {
        source: &'a StainStats,
        target: &'a StainStats,
    },
}

/// Full 36-dimensional feature vector for one tile raster.
pub fn featurize_tile(tile: &RgbRaster, norm: Normalization) -> Result<Vec<f64>, FeatureError> {
    let normalized;
    let tile = match norm {
        Normalization::Off => tile,
        Normalization::PerTile { target } => {
            normalized = stainlab::normalize(tile, target)?.tile;
            &normalized
        }
        Normalization::PerSlide { source, target } => {
            normalized = stainlab::normalize_with_source(tile, source, target)?.tile;
            &normalized
        }
    };
    let gray = to_grayscale(tile);
    let fo = first_order_features(&gray)?;
    let glcm = glcm_features(&gray, tile.width, tile.height)?;
    let mut v = Vec::with_capacity(FEATURE_DIM);
    v.extend_from_slice(&fo);
    v.extend_from_slice(&glcm);
    Ok(v)
}

/// Extract and featurize every tile of `refs` from one level raster. Refs
/// must all lie on the given level; order is preserved.
pub fn featurize_tiles(
    level: &RgbRaster,
    refs: &[TileRef],
    norm: Normalization,
) -> Result<Vec<Vec<f64>>, FeatureError> {
    let mut rows = Vec::with_capacity(refs.len());
    for r in refs {
        let tile = level.crop(r.x, r.y, r.size, r.size).map_err(|_| {
            FeatureError::TileOutsideLevel {
                x: r.x,
                y: r.y,
                size: r.size,
                w: level.width,
                h: level.height,
            }
        })?;
        rows.push(featurize_tile(&tile, norm)?);
    }
    Ok(rows)
}

/// Feature vector of a uniform tile filled with the given RGB value — the
/// neutral instance substituted during instance dropout.
pub fn replacement_vector(mean_rgb: [u8; 3], tile_size: usize) -> Vec<f64> {
    let tile = RgbRaster::from_fn(tile_size, tile_size, |_, _| mean_rgb);
    featurize_tile(&tile, Normalization::Off).expect("uniform tile featurization cannot fail")
}

/// Ordered per-slide feature rows. `tiles` carries the originating tile refs
/// when known (the binary file format does not store them).
#[derive(Debug, Clone, PartialEq)]
pub struct SlideFeatures {
    pub slide_id: String,
    pub schema_id: String,
    pub d: usize,
    pub tiles: Vec<TileRef>,
    pub rows: Vec<Vec<f64>>,
}

impl SlideFeatures {
    pub fn k(&self) -> usize {
        self.rows.len()
    }

    /// Rows as a dense row-major matrix.
    pub fn matrix(&self) -> Vec<f64> {
        let mut m = Vec::with_capacity(self.rows.len() * self.d);
        for row in &self.rows {
            m.extend_from_slice(row);
        }
        m
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct FeatureFileHeader {
    schema_id: String,
    k: usize,
    d: usize,
    slide_id: String,
}

/// Write the binary feature file: one JSON header line, then `k*d`
/// little-endian f32 values, row-major.
pub fn write_feature_file(mut w: impl Write, feats: &SlideFeatures) -> Result<(), FeatureError> {
    let header = FeatureFileHeader {
        schema_id: feats.schema_id.clone(),
        k: feats.k(),
        d: feats.d,
        slide_id: feats.slide_id.clone(),
    };
    let mut line = serde_json::to_string(&header).expect("header serializes");
    line.push('\n');
    w.write_all(line.as_bytes())?;
    for row in &feats.rows {
        debug_assert_eq!(row.len(), feats.d);
        for &v in row {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a binary feature file. Tile refs are not stored in this format, so
/// `tiles` comes back empty; callers re-attach them from the tile index.
pub fn read_feature_file(mut r: impl Read) -> Result<SlideFeatures, FeatureError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let newline = buf
        .iter()
        .position(|&b| b == b'\n')
        .ok_or(FeatureError::BadHeader {
            offset: buf.len(),
            reason: "no newline-terminated header line".into(),
        })?;
    let header: FeatureFileHeader =
        serde_json::from_slice(&buf[..newline]).map_err(|e| FeatureError::BadHeader {
            offset: 0,
            reason: e.to_string(),
        })?;
    let payload = &buf[newline + 1..];
    let expected = header.k * header.d * 4;
    if payload.len() != expected {
        return Err(FeatureError::PayloadMismatch {
            expected,
            actual: payload.len(),
        });
    }
    let mut rows = Vec::with_capacity(header.k);
    for i in 0..header.k {
        let mut row = Vec::with_capacity(header.d);
        for j in 0..header.d {
            let off = (i * header.d + j) * 4;
            let bits = [
                payload[off],
                payload[off + 1],
                payload[off + 2],
                payload[off + 3],
            ];
            row.push(f32::from_le_bytes(bits) as f64);
        }
        rows.push(row);
    }
    Ok(SlideFeatures {
        slide_id: header.slide_id,
        schema_id: header.schema_id,
        d: header.d,
        tiles: Vec::new(),
        rows,
    })
}

/// CSV export, one row per tile: tile identity (when known) and the feature
/// values.
pub fn write_feature_csv(mut w: impl Write, feats: &SlideFeatures) -> Result<(), FeatureError> {
    write!(w, "slide_id,level,x,y,size")?;
    for j in 0..feats.d {
        write!(w, ",f{j}")?;
    }
    writeln!(w)?;
    for (i, row) in feats.rows.iter().enumerate() {
        if let Some(t) = feats.tiles.get(i) {
            write!(w, "{},{},{},{},{}", feats.slide_id, t.level, t.x, t.y, t.size)?;
        } else {
            write!(w, "{},,,,", feats.slide_id)?;
        }
        for &v in row {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
