//! In-memory rasters and binary netpbm serialization.
//!
//! Slide levels are plain 8-bit RGB rasters stored row-major; masks are 8-bit
//! grayscale. On disk they are binary PPM (P6) and PGM (P5), the formats the
//! rest of the pipeline reads and writes verbatim.

use std::fmt;
use std::io::{self, Read, Write};

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad netpbm header: {0}")]
    Header(String),
    #[error("payload truncated: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("crop rectangle ({x},{y}) {w}x{h} outside raster {rw}x{rh}")]
    CropOutOfBounds {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        rw: usize,
        rh: usize,
    },
}

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
#[derive(Clone, PartialEq, Eq)]
pub struct RgbRaster {
    pub width: usize,
    pub height: usize,
    data: Vec<u8>,
}

impl fmt::Debug for RgbRaster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RgbRaster({}x{})", self.width, self.height)
    }
}

impl RgbRaster {
    pub fn new(width: usize, height: usize) -> Self {
        RgbRaster {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut r = RgbRaster::new(width, height);
        for y in 0..height {
            for x in 0..width {
                r.set(x, y, f(x, y));
            }
        }
        r
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, px: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<RgbRaster, RasterError> {
        if x + w > self.width || y + h > self.height {
            return Err(RasterError::CropOutOfBounds {
                x,
                y,
                w,
                h,
                rw: self.width,
                rh: self.height,
            });
        }
        let mut out = RgbRaster::new(w, h);
        for row in 0..h {
            let src = ((y + row) * self.width + x) * 3;
            let dst = row * w * 3;
            out.data[dst..dst + w * 3].copy_from_slice(&self.data[src..src + w * 3]);
        }
        Ok(out)
    }

    /// 2x2 mean box filter; output dimensions are the floor of half the input.
    /// Integer arithmetic `(sum + 2) / 4` rounds to nearest (ties up) so the
    /// result is identical on every platform.
    pub fn box_downsample_2x(&self) -> RgbRaster {
        let w = self.width / 2;
        let h = self.height / 2;
        let mut out = RgbRaster::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut px = [0u8; 3];
                for (c, slot) in px.iter_mut().enumerate() {
                    let sum = self.data[(2 * y * self.width + 2 * x) * 3 + c] as u32
                        + self.data[(2 * y * self.width + 2 * x + 1) * 3 + c] as u32
                        + self.data[((2 * y + 1) * self.width + 2 * x) * 3 + c] as u32
                        + self.data[((2 * y + 1) * self.width + 2 * x + 1) * 3 + c] as u32;
                    *slot = ((sum + 2) / 4) as u8;
                }
                out.set(x, y, px);
            }
        }
        out
    }

    pub fn write_ppm(&self, mut w: impl Write) -> io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)
    }

    pub fn read_ppm(mut r: impl Read) -> Result<RgbRaster, RasterError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let (magic, w, h, offset) = parse_netpbm_header(&buf)?;
        if magic != b"P6" {
            return Err(RasterError::Header(format!(
                "expected P6, got {}",
                String::from_utf8_lossy(magic)
            )));
        }
        let expected = w * h * 3;
        let payload = &buf[offset..];
        if payload.len() < expected {
            return Err(RasterError::Truncated {
                expected,
                actual: payload.len(),
            });
        }
        Ok(RgbRaster {
            width: w,
            height: h,
            data: payload[..expected].to_vec(),
        })
    }
}

/// 8-bit grayscale raster. Binary masks use 0 and 255.
#[derive(Clone, PartialEq, Eq)]
pub struct GrayRaster {
    pub width: usize,
    pub height: usize,
    data: Vec<u8>,
}

impl fmt::Debug for GrayRaster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GrayRaster({}x{})", self.width, self.height)
    }
}

impl GrayRaster {
    pub fn new(width: usize, height: usize) -> Self {
        GrayRaster {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn bytes_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn write_pgm(&self, mut w: impl Write) -> io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)
    }

    pub fn read_pgm(mut r: impl Read) -> Result<GrayRaster, RasterError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let (magic, w, h, offset) = parse_netpbm_header(&buf)?;
        if magic != b"P5" {
            return Err(RasterError::Header(format!(
                "expected P5, got {}",
                String::from_utf8_lossy(magic)
            )));
        }
        let expected = w * h;
        let payload = &buf[offset..];
        if payload.len() < expected {
            return Err(RasterError::Truncated {
                expected,
                actual: payload.len(),
            });
        }
        Ok(GrayRaster {
            width: w,
            height: h,
            data: payload[..expected].to_vec(),
        })
    }
}

/// Parse "magic width height maxval" allowing `#` comments, returning the
/// offset of the first payload byte.
fn parse_netpbm_header(buf: &[u8]) -> Result<(&[u8], usize, usize, usize), RasterError> {
    let mut pos = 0;
    let mut tokens: Vec<(usize, usize)> = Vec::new(); // (start, end)
    while tokens.len() < 4 {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < buf.len() && buf[pos] == b'#' {
            while pos < buf.len() && buf[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(RasterError::Header("unexpected end of header".into()));
        }
        tokens.push((start, pos));
    }
    // exactly one whitespace byte separates the maxval from the payload
    if pos >= buf.len() {
        return Err(RasterError::Header("missing payload".into()));
    }
    pos += 1;
    let magic = &buf[tokens[0].0..tokens[0].1];
    let parse_num = |range: (usize, usize)| -> Result<usize, RasterError> {
        std::str::from_utf8(&buf[range.0..range.1])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| RasterError::Header("bad numeric field".into()))
    };
    let w = parse_num(tokens[1])?;
    let h = parse_num(tokens[2])?;
    let maxval = parse_num(tokens[3])?;
    if maxval != 255 {
        return Err(RasterError::Header(format!("unsupported maxval {maxval}")));
    }
    Ok((magic, w, h, pos))
}
