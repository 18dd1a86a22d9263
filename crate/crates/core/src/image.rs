//! Planar RGB images with values in `[0, 1]` and binary PPM I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Bbox;

pub const MIN_SIDE: u32 = 8;

/// Three-channel image stored channel-major (`[3, height, width]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(Error::InvalidArgument(format!(
                "image {width}x{height} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if data.len() != 3 * (width * height) as usize {
            return Err(Error::shape(
                "image",
                format!(
                    "{width}x{height}x3 needs {} values, got {}",
                    3 * width * height,
                    data.len()
                ),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: u32, height: u32, rgb: [f32; 3]) -> Result<Self> {
        let plane = (width * height) as usize;
        let data = rgb.iter().flat_map(|&c| std::iter::repeat_n(c, plane)).collect();
        Image::new(width, height, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bounds(&self) -> Bbox {
        Bbox {
            x: 0,
            y: 0,
            w: self.width,
            h: self.height,
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = (self.width * self.height) as usize;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f32; 3] {
        let n = (self.width * self.height) as usize;
        let i = (y * self.width + x) as usize;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    /// Bilinear resampling of `crop` to `out_w × out_h`, pixel centers
    /// aligned, returned as a planar buffer.
    pub fn crop_resize(&self, crop: &Bbox, out_w: usize, out_h: usize) -> Vec<f32> {
        resample(
            &self.data,
            self.width as usize,
            self.height as usize,
            crop,
            out_w,
            out_h,
        )
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        let n = (self.width * self.height) as usize;
        out.reserve(3 * n);
        for i in 0..n {
            for c in 0..3 {
                out.push(quantize(self.data[c * n + i]));
            }
        }
        out
    }

    pub fn from_ppm(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut cursor = HeaderCursor { bytes, pos: 0, origin };
        let magic = cursor.token()?;
        if magic.1 != "P6" {
            return Err(cursor.error(magic.0, format!("expected P6 magic, found `{}`", magic.1)));
        }
        let width = cursor.number()?;
        let height = cursor.number()?;
        let maxval = cursor.number()?;
        if maxval != 255 {
            return Err(cursor.error(cursor.pos, format!("only 8-bit PPM supported, maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        let start = cursor.pos + 1;
        let n = (width * height) as usize;
        let raster = bytes
            .get(start..start + 3 * n)
            .ok_or_else(|| cursor.error(start, format!("raster truncated: need {} bytes", 3 * n)))?;
        let mut data = vec![0.0f32; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                data[c * n + i] = raster[3 * i + c] as f32 / 255.0;
            }
        }
        Image::new(width, height, data)
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::from_ppm(&bytes, path)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

/// Nearest 8-bit level.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Snap a value to the 8-bit grid so that PPM round trips are exact.
pub fn snap(v: f32) -> f32 {
    quantize(v) as f32 / 255.0
}

pub(crate) fn resample(data: &[f32], width: usize, height: usize, crop: &Bbox, out_w: usize, out_h: usize) -> Vec<f32> {
    let taps = |origin: u32, extent: u32, out: usize, limit: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|i| {
                let s = origin as f64 + (i as f64 + 0.5) * extent as f64 / out as f64 - 0.5;
                let s = s.clamp(0.0, (limit - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(limit - 1);
                (lo, hi, (s - lo as f64) as f32)
            })
            .collect()
    };
    let xs = taps(crop.x, crop.w, out_w, width);
    let ys = taps(crop.y, crop.h, out_h, height);
    let plane = width * height;
    let mut out = Vec::with_capacity(3 * out_w * out_h);
    for c in 0..3 {
        let src = &data[c * plane..(c + 1) * plane];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = lerp(src[y0 * width + x0], src[y0 * width + x1], fx);
                let bottom = lerp(src[y1 * width + x0], src[y1 * width + x1], fx);
                out.push(lerp(top, bottom, fy));
            }
        }
    }
    out
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl HeaderCursor<'_> {
    fn error(&self, offset: usize, message: String) -> Error {
        let before = &self.bytes[..offset.min(self.bytes.len())];
        let line = before.iter().filter(|&&b| b == b'\n').count() + 1;
        let column = offset - before.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1) + 1;
        Error::Parse {
            path: self.origin.to_path_buf(),
            line,
            column,
            message,
        }
    }

    fn token(&mut self) -> Result<(usize, String)> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => return Err(self.error(self.pos, "unexpected end of header".into())),
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        Ok((
            start,
            String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned(),
        ))
    }

    fn number(&mut self) -> Result<u32> {
        let (at, tok) = self.token()?;
        tok.parse()
            .map_err(|_| self.error(at, format!("`{tok}` is not a positive integer")))
    }
}
