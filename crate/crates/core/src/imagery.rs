//! Raster types and their on-disk formats.
//!
//! Images are RGB, row-major, channel-interleaved `f64` intensities in
//! `[0, 1]` (8-bit files map `v -> v / 255`). Masks are binary and stored as
//! 8-bit grayscale PNG (`0 <-> 0`, `1 <-> 255`). Flow fields use the
//! Middlebury `.flo` container: little-endian `f32` magic `202021.25`,
//! `i32` width, `i32` height, then interleaved `(u, v)` `f32` pairs.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{ColorType, DynamicImage, GrayImage, ImageReader, RgbImage};

use crate::error::{check_dims, Error, Result};
use crate::splat::SplatField;

pub const FLO_MAGIC: f32 = 202021.25;

fn nonzero(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::ZeroDimensions { width, height });
    }
    Ok(())
}

/// RGB intensity image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        nonzero(width, height)?;
        if data.len() != width * height * 3 {
            return Err(Error::Truncated {
                expected: width * height * 3,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// True when every intensity lies in `[0, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn to_field(&self) -> SplatField {
        SplatField::from_parts(self.width, self.height, 3, self.data.clone())
    }

    /// Wraps a 3-channel field. Panics if the field does not have 3 channels.
    pub fn from_field(field: SplatField) -> Self {
        assert_eq!(field.channels(), 3, "image fields carry three channels");
        let (width, height) = field.dims();
        Self {
            width,
            height,
            data: field.into_data(),
        }
    }
}

/// Binary per-pixel mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        nonzero(width, height)?;
        if data.len() != width * height {
            return Err(Error::Truncated {
                expected: width * height,
                found: data.len(),
            });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidConfig("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y) as u8);
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }
}

/// Dense displacement field in pixels, `(u, v)` interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        nonzero(width, height)?;
        if data.len() != width * height * 2 {
            return Err(Error::Truncated {
                expected: width * height * 2,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow field"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 2],
        }
    }

    pub fn constant(width: usize, height: usize, u: f64, v: f64) -> Self {
        let mut f = Self::zeros(width, height);
        for uv in f.data.chunks_exact_mut(2) {
            uv[0] = u;
            uv[1] = v;
        }
        f
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = (y * self.width + x) * 2;
        (self.data[i], self.data[i + 1])
    }

    pub fn set(&mut self, x: usize, y: usize, uv: (f64, f64)) {
        let i = (y * self.width + x) * 2;
        self.data[i] = uv.0;
        self.data[i + 1] = uv.1;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Zeroes every vector outside `region`.
    pub fn restricted(&self, region: &Mask) -> Result<Self> {
        check_dims(self.dims(), region.dims())?;
        let mut out = self.clone();
        for (uv, &m) in out.data.chunks_exact_mut(2).zip(region.data()) {
            if m == 0 {
                uv[0] = 0.0;
                uv[1] = 0.0;
            }
        }
        Ok(out)
    }
}

/// Single-channel real field (latent `p`, alpha maps, warped alpha).
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaField {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl AlphaField {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        nonzero(width, height)?;
        if data.len() != width * height {
            return Err(Error::Truncated {
                expected: width * height,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_field(&self) -> SplatField {
        SplatField::from_parts(self.width, self.height, 1, self.data.clone())
    }

    /// Wraps a 1-channel field. Panics if the field has more channels.
    pub fn from_field(field: SplatField) -> Self {
        assert_eq!(field.channels(), 1, "alpha fields carry one channel");
        let (width, height) = field.dims();
        Self {
            width,
            height,
            data: field.into_data(),
        }
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

fn is_wide(color: ColorType) -> bool {
    matches!(
        color,
        ColorType::L16
            | ColorType::La16
            | ColorType::Rgb16
            | ColorType::Rgba16
            | ColorType::Rgb32F
            | ColorType::Rgba32F
    )
}

/// Reads an 8-bit RGB PNG or binary PPM (P6).
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let img = decode(path)?;
    let color = img.color();
    if is_wide(color) {
        return Err(Error::UnsupportedBitDepth {
            path: path.to_path_buf(),
        });
    }
    let DynamicImage::ImageRgb8(rgb) = img else {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            expected: "8-bit RGB",
        });
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    nonzero(w, h)?;
    let data = rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Image::new(w, h, data)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit image; the container follows the extension (`.png`, `.ppm`).
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let buf = RgbImage::from_raw(img.width as u32, img.height as u32, raw)
        .expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

/// Reads an 8-bit grayscale PNG; values above 127 map to 1.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let img = decode(path)?;
    if is_wide(img.color()) {
        return Err(Error::UnsupportedBitDepth {
            path: path.to_path_buf(),
        });
    }
    let DynamicImage::ImageLuma8(gray) = img else {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            expected: "8-bit grayscale",
        });
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    nonzero(w, h)?;
    let data = gray.into_raw().into_iter().map(|v| (v > 127) as u8).collect();
    Mask::new(w, h, data)
}

pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u8> = mask.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    let buf = GrayImage::from_raw(mask.width as u32, mask.height as u32, raw)
        .expect("buffer length matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Decode {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
}

pub fn encode_flow(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + flow.data.len() * 4);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for &v in &flow.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_flow(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            expected: 12,
            found: bytes.len(),
        });
    }
    let word = |i: usize| -> [u8; 4] { bytes[i..i + 4].try_into().unwrap() };
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let w = i32::from_le_bytes(word(4));
    let h = i32::from_le_bytes(word(8));
    if w <= 0 || h <= 0 {
        return Err(Error::ZeroDimensions {
            width: w.max(0) as usize,
            height: h.max(0) as usize,
        });
    }
    let (w, h) = (w as usize, h as usize);
    let expected = 12 + w * h * 8;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[12..expected]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    FlowField::new(w, h, data)
}

pub fn load_flow(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flow(&bytes)
}

pub fn save_flow(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_flow(flow)).map_err(|e| Error::io(path, e))
}
