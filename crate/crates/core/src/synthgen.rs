//! Deterministic synthetic slide generation.
//!
//! A slide is a background texture with zero or more planted disk-shaped
//! lesions whose texture differs from the background; the ground-truth mask
//! records exactly which 10x pixels are lesion. The 5x level is a 2x2 mean
//! downsample of the 10x level. Everything derives from a documented RNG
//! ([`crate::rng::SplitMix64`] + Irwin-Hall noise), so identical configs give
//! byte-identical rasters on any platform.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::raster::{GrayRaster, RgbRaster};
use crate::rng::SplitMix64;
use crate::tiler::{Level, TileRef};

/// A tile counts as lesion-positive when at least this fraction of its 10x
/// pixels are lesion. Harness constant for evaluation, not a model input.
pub const TILE_POSITIVE_LESION_FRACTION: f64 = 0.30;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("could not place {0} non-overlapping lesions after {1} attempts")]
    Placement(usize, usize),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("manifest error: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthLabel {
    #[serde(rename = "BN")]
    Bn,
    #[serde(rename = "LG")]
    Lg,
    #[serde(rename = "HG")]
    Hg,
}

impl fmt::Display for SynthLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthLabel::Bn => write!(f, "BN"),
            SynthLabel::Lg => write!(f, "LG"),
            SynthLabel::Hg => write!(f, "HG"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    None,
    /// Vertical stripes: intensity flips with `x` every half period.
    StripesX,
    /// Checkerboard: flips with both coordinates.
    Checker,
}

/// Periodic intensity pattern added on top of the texture mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub kind: PatternKind,
    /// Full period in pixels (half period drives the flip), >= 2 when used.
    pub period_px: usize,
    pub amplitude: f64,
}

impl PatternSpec {
    pub fn none() -> Self {
        PatternSpec {
            kind: PatternKind::None,
            period_px: 2,
            amplitude: 0.0,
        }
    }

    #[inline]
    fn value(&self, x: usize, y: usize) -> f64 {
        let half = (self.period_px / 2).max(1);
        let flip = match self.kind {
            PatternKind::None => return 0.0,
            PatternKind::StripesX => (x / half) % 2,
            PatternKind::Checker => (x / half + y / half) % 2,
        };
        if flip == 0 {
            self.amplitude
        } else {
            -self.amplitude
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub mean_rgb: [f64; 3],
    pub std_rgb: [f64; 3],
    pub pattern: PatternSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub slide_id: String,
    pub seed: u64,
    pub width_10x: usize,
    pub height_10x: usize,
    pub class_label: SynthLabel,
    pub lesion_count: usize,
    /// Inclusive radius range in 10x pixels.
    pub lesion_radius_range: (usize, usize),
    pub background_texture: TextureSpec,
    pub lesion_texture: TextureSpec,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.width_10x < 512 || self.height_10x < 512 {
            return Err(SynthError::BadConfig(format!(
                "slide must be at least 512x512 at 10x, got {}x{}",
                self.width_10x, self.height_10x
            )));
        }
        let benign = self.class_label == SynthLabel::Bn;
        if benign != (self.lesion_count == 0) {
            return Err(SynthError::BadConfig(format!(
                "lesion_count must be 0 exactly for BN slides (label {}, count {})",
                self.class_label, self.lesion_count
            )));
        }
        let (lo, hi) = self.lesion_radius_range;
        if self.lesion_count > 0 {
            if lo == 0 || lo > hi {
                return Err(SynthError::BadConfig(format!(
                    "bad radius range ({lo}, {hi})"
                )));
            }
            if 2 * hi >= self.width_10x.min(self.height_10x) {
                return Err(SynthError::BadConfig(format!(
                    "radius {hi} does not fit inside {}x{}",
                    self.width_10x, self.height_10x
                )));
            }
        }
        Ok(())
    }
}

/// Multi-magnification raster stack for one slide plus the planted truth.
/// Mask pixels are 255 inside lesions and 0 elsewhere.
#[derive(Debug, Clone)]
pub struct ImagePyramid {
    pub slide_id: String,
    pub level_10x: RgbRaster,
    pub level_5x: RgbRaster,
    pub truth_mask_10x: GrayRaster,
}

impl ImagePyramid {
    pub fn level(&self, level: Level) -> &RgbRaster {
        match level {
            Level::Mag5x => &self.level_5x,
            Level::Mag10x => &self.level_10x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lesion {
    pub cx: i64,
    pub cy: i64,
    pub r: i64,
}

const PLACEMENT_ATTEMPTS: usize = 1000;

/// Deterministic lesion placement: rejection-sample non-overlapping disks
/// fully inside the slide. Shares the RNG stream prefix with
/// [`generate_slide`], so the returned disks are exactly those planted.
pub fn plan_lesions(cfg: &SynthConfig) -> Result<Vec<Lesion>, SynthError> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(cfg.seed).derive(0x1e51);
    let mut lesions: Vec<Lesion> = Vec::with_capacity(cfg.lesion_count);
    let (rlo, rhi) = cfg.lesion_radius_range;
    for _ in 0..cfg.lesion_count {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let r = rng.next_in_range(rlo as u64, rhi as u64) as i64;
            let cx = rng.next_in_range(r as u64, (cfg.width_10x as u64) - 1 - r as u64) as i64;
            let cy = rng.next_in_range(r as u64, (cfg.height_10x as u64) - 1 - r as u64) as i64;
            let overlaps = lesions.iter().any(|l| {
                let dx = l.cx - cx;
                let dy = l.cy - cy;
                let reach = l.r + r;
                dx * dx + dy * dy <= reach * reach
            });
            if !overlaps {
                lesions.push(Lesion { cx, cy, r });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SynthError::Placement(cfg.lesion_count, PLACEMENT_ATTEMPTS));
        }
    }
    Ok(lesions)
}

/// Generate the full pyramid for one config. Identical configs produce
/// byte-identical rasters.
pub fn generate_slide(cfg: &SynthConfig) -> Result<ImagePyramid, SynthError> {
    let lesions = plan_lesions(cfg)?;
    let (w, h) = (cfg.width_10x, cfg.height_10x);

    let mut mask = GrayRaster::new(w, h);
    for l in &lesions {
        let x0 = (l.cx - l.r).max(0) as usize;
        let x1 = ((l.cx + l.r) as usize).min(w - 1);
        let y0 = (l.cy - l.r).max(0) as usize;
        let y1 = ((l.cy + l.r) as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as i64 - l.cx;
                let dy = y as i64 - l.cy;
                if dx * dx + dy * dy <= l.r * l.r {
                    mask.set(x, y, 255);
                }
            }
        }
    }

    // One noise stream for the whole raster; every pixel consumes exactly
    // three gaussians in channel order, independent of the mask.
    let mut noise = SplitMix64::new(cfg.seed).derive(0x7e97);
    let mut level_10x = RgbRaster::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let tex = if mask.get(x, y) != 0 {
                &cfg.lesion_texture
            } else {
                &cfg.background_texture
            };
            let pat = tex.pattern.value(x, y);
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = tex.mean_rgb[c] + pat + noise.next_gauss() * tex.std_rgb[c];
                px[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            level_10x.set(x, y, px);
        }
    }

    let level_5x = level_10x.box_downsample_2x();
    Ok(ImagePyramid {
        slide_id: cfg.slide_id.clone(),
        level_10x,
        level_5x,
        truth_mask_10x: mask,
    })
}

/// Fraction of a tile's nominal area covered by the truth mask. 5x tiles are
/// projected (coordinates and size doubled) onto the 10x mask.
pub fn tile_lesion_fraction(mask_10x: &GrayRaster, tile: &TileRef) -> f64 {
    let (x, y, size) = match tile.level {
        Level::Mag10x => (tile.x, tile.y, tile.size),
        Level::Mag5x => (tile.x * 2, tile.y * 2, tile.size * 2),
    };
    let x1 = (x + size).min(mask_10x.width);
    let y1 = (y + size).min(mask_10x.height);
    if x >= x1 || y >= y1 {
        return 0.0;
    }
    let mut count = 0usize;
    for yy in y..y1 {
        for xx in x..x1 {
            count += (mask_10x.get(xx, yy) != 0) as usize;
        }
    }
    count as f64 / (size * size) as f64
}

pub fn tile_is_positive(mask_10x: &GrayRaster, tile: &TileRef) -> bool {
    tile_lesion_fraction(mask_10x, tile) >= TILE_POSITIVE_LESION_FRACTION
}

// ---------------------------------------------------------------------------
// dataset generation
// ---------------------------------------------------------------------------

/// Parameters for a stratified synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_bn: usize,
    pub n_lg: usize,
    pub n_hg: usize,
    pub base_seed: u64,
    pub width_10x: usize,
    pub height_10x: usize,
    pub lesion_radius_range: (usize, usize),
    /// Malignant slides carry between 1 and this many lesions.
    pub max_lesions: usize,
    pub background_texture: TextureSpec,
    pub lg_texture: TextureSpec,
    pub hg_texture: TextureSpec,
}

impl DatasetSpec {
    /// Equal slide counts per class with the default textures: a pink-hued
    /// background, purple lesions, and lesion patterns (stripes for LG,
    /// checkerboard for HG) whose half period of one 10x pixel cancels under
    /// the 2x2 downsample, so grade is only visible at 10x.
    pub fn balanced(n_per_class: usize, base_seed: u64) -> Self {
        let background = TextureSpec {
            mean_rgb: [206.0, 168.0, 196.0],
            std_rgb: [8.0, 8.0, 8.0],
            pattern: PatternSpec::none(),
        };
        let lg = TextureSpec {
            mean_rgb: [150.0, 118.0, 174.0],
            std_rgb: [8.0, 8.0, 8.0],
            pattern: PatternSpec {
                kind: PatternKind::StripesX,
                period_px: 2,
                amplitude: 26.0,
            },
        };
        let hg = TextureSpec {
            mean_rgb: [150.0, 118.0, 174.0],
            std_rgb: [8.0, 8.0, 8.0],
            pattern: PatternSpec {
                kind: PatternKind::Checker,
                period_px: 2,
                amplitude: 26.0,
            },
        };
        DatasetSpec {
            n_bn: n_per_class,
            n_lg: n_per_class,
            n_hg: n_per_class,
            base_seed,
            width_10x: 1792,
            height_10x: 1792,
            lesion_radius_range: (320, 384),
            max_lesions: 2,
            background_texture: background,
            lg_texture: lg,
            hg_texture: hg,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_bn + self.n_lg + self.n_hg == 0 {
            return Err(SynthError::BadConfig("dataset must contain slides".into()));
        }
        if self.max_lesions == 0 {
            return Err(SynthError::BadConfig("max_lesions must be >= 1".into()));
        }
        if self.lg_texture == self.hg_texture {
            return Err(SynthError::BadConfig(
                "LG and HG lesion textures must differ in at least one parameter".into(),
            ));
        }
        Ok(())
    }
}

/// Fully resolved per-slide generation plan.
#[derive(Debug, Clone)]
pub struct SlidePlan {
    pub label: SynthLabel,
    pub cfg: SynthConfig,
}

impl SlidePlan {
    pub fn slide_id(&self) -> &str {
        &self.cfg.slide_id
    }

    pub fn generate(&self) -> Result<ImagePyramid, SynthError> {
        generate_slide(&self.cfg)
    }
}

/// Expand a dataset spec into per-slide configs. Pure function of the spec.
pub fn plan_dataset(spec: &DatasetSpec) -> Result<Vec<SlidePlan>, SynthError> {
    spec.validate()?;
    let root = SplitMix64::new(spec.base_seed);
    let classes = [
        (SynthLabel::Bn, spec.n_bn),
        (SynthLabel::Lg, spec.n_lg),
        (SynthLabel::Hg, spec.n_hg),
    ];
    let mut plans = Vec::new();
    let mut index = 0u64;
    for (label, count) in classes {
        for i in 0..count {
            let mut slide_rng = root.derive(index);
            let seed = slide_rng.next_u64();
            let lesion_count = match label {
                SynthLabel::Bn => 0,
                _ => 1 + slide_rng.next_below(spec.max_lesions as u64) as usize,
            };
            let lesion_texture = match label {
                SynthLabel::Bn => spec.lg_texture, // unused: no lesions
                SynthLabel::Lg => spec.lg_texture,
                SynthLabel::Hg => spec.hg_texture,
            };
            let slide_id = format!("{}-{:04}", label.to_string().to_lowercase(), i);
            plans.push(SlidePlan {
                label,
                cfg: SynthConfig {
                    slide_id,
                    seed,
                    width_10x: spec.width_10x,
                    height_10x: spec.height_10x,
                    class_label: label,
                    lesion_count,
                    lesion_radius_range: spec.lesion_radius_range,
                    background_texture: spec.background_texture,
                    lesion_texture,
                },
            });
            index += 1;
        }
    }
    Ok(plans)
}

/// One manifest row. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub label: String,
    pub level_paths: BTreeMap<String, String>,
    pub mask_path: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub slides: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        let json =
            serde_json::to_string_pretty(self).map_err(|e| SynthError::Manifest(e.to_string()))?;
        fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DatasetManifest, SynthError> {
        let data = fs::read_to_string(path)?;
        serde_json::from_str(&data).map_err(|e| SynthError::Manifest(e.to_string()))
    }

    pub fn entry(&self, slide_id: &str) -> Option<&ManifestEntry> {
        self.slides.iter().find(|e| e.slide_id == slide_id)
    }

    /// Load one level raster, resolving the stored relative path.
    pub fn load_level(
        &self,
        base_dir: &Path,
        slide_id: &str,
        level: Level,
    ) -> Result<RgbRaster, SynthError> {
        let entry = self
            .entry(slide_id)
            .ok_or_else(|| SynthError::Manifest(format!("unknown slide '{slide_id}'")))?;
        let rel = entry.level_paths.get(&level.to_string()).ok_or_else(|| {
            SynthError::Manifest(format!("slide '{slide_id}' has no {level} level"))
        })?;
        let file = fs::File::open(base_dir.join(rel))?;
        RgbRaster::read_ppm(std::io::BufReader::new(file))
            .map_err(|e| SynthError::Manifest(format!("{slide_id} {level}: {e}")))
    }

    pub fn load_mask(&self, base_dir: &Path, slide_id: &str) -> Result<GrayRaster, SynthError> {
        let entry = self
            .entry(slide_id)
            .ok_or_else(|| SynthError::Manifest(format!("unknown slide '{slide_id}'")))?;
        let file = fs::File::open(base_dir.join(&entry.mask_path))?;
        GrayRaster::read_pgm(std::io::BufReader::new(file))
            .map_err(|e| SynthError::Manifest(format!("{slide_id} mask: {e}")))
    }
}

/// Generate a balanced dataset with default parameters and write it under
/// `out_dir` (rasters in `slides/`, manifest at `manifest.json`).
pub fn generate_dataset(
    n_per_class: usize,
    base_seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest, SynthError> {
    if n_per_class == 0 {
        return Err(SynthError::BadConfig("n_per_class must be >= 1".into()));
    }
    generate_dataset_with(&DatasetSpec::balanced(n_per_class, base_seed), out_dir)
}

pub fn generate_dataset_with(
    spec: &DatasetSpec,
    out_dir: &Path,
) -> Result<DatasetManifest, SynthError> {
    let plans = plan_dataset(spec)?;
    let slide_dir = out_dir.join("slides");
    fs::create_dir_all(&slide_dir)?;
    let mut entries = Vec::with_capacity(plans.len());
    for plan in &plans {
        let pyramid = plan.generate()?;
        let id = plan.slide_id();
        let p10 = PathBuf::from("slides").join(format!("{id}.10x.ppm"));
        let p5 = PathBuf::from("slides").join(format!("{id}.5x.ppm"));
        let pm = PathBuf::from("slides").join(format!("{id}.mask.pgm"));
        write_raster(&out_dir.join(&p10), |w| pyramid.level_10x.write_ppm(w))?;
        write_raster(&out_dir.join(&p5), |w| pyramid.level_5x.write_ppm(w))?;
        write_raster(&out_dir.join(&pm), |w| pyramid.truth_mask_10x.write_pgm(w))?;
        let mut level_paths = BTreeMap::new();
        level_paths.insert("10x".to_string(), path_str(&p10));
        level_paths.insert("5x".to_string(), path_str(&p5));
        entries.push(ManifestEntry {
            slide_id: id.to_string(),
            label: plan.label.to_string(),
            level_paths,
            mask_path: path_str(&pm),
            seed: plan.cfg.seed,
        });
    }
    let manifest = DatasetManifest { slides: entries };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

fn write_raster(
    path: &Path,
    write: impl FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>,
) -> Result<(), SynthError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write(&mut w)?;
    w.flush()?;
    Ok(())
}
