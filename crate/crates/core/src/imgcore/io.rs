//! PNG (8/16-bit) and PFM persistence.
//!
//! PFM files are written with a `-1.0` scale (little-endian) and rows stored
//! bottom to top, as the format prescribes. All writers go through a
//! temporary sibling file that is renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};

use super::buffer::{FloatMap, Image};
use crate::error::{Error, Result};
use crate::scalar::Real;

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Bit depth for PNG output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            8 => Ok(BitDepth::Eight),
            16 => Ok(BitDepth::Sixteen),
            other => Err(Error::UnsupportedFormat(format!("{other}-bit PNG output"))),
        }
    }

    fn max_code(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

/// sRGB-encoded value to linear light.
#[inline]
pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// Round-half-up quantization of a `[0, 1]` sample.
#[inline]
pub fn quantize(v: f64, depth: BitDepth) -> u16 {
    let max = depth.max_code();
    (v.clamp(0.0, 1.0) * max + 0.5).floor().min(max) as u16
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = temp_sibling(path);
    if let Err(e) = write(&tmp) {
        let _ = fs::remove_file(&tmp);
        return Err(e);
    }
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn temp_sibling(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!(".{name}.{}.tmp", std::process::id()))
}

/// Loads an 8/16-bit PNG or a PFM as an image scaled to `[0, 1]`.
///
/// With `want_linear` the sRGB transfer is inverted; otherwise samples are
/// kept as stored.
pub fn load_image<T: Real>(path: impl AsRef<Path>, want_linear: bool) -> Result<Image<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = if bytes.starts_with(b"Pf") || bytes.starts_with(b"PF") {
        let (h, w, c, data) = parse_pfm(&bytes)?;
        let data: Vec<T> = data
            .into_iter()
            .map(|v| T::of((v as f64).clamp(0.0, 1.0)))
            .collect();
        Image::from_interleaved(h, w, c, &data)?
    } else if bytes.starts_with(PNG_MAGIC) {
        decode_png(path, &bytes)?
    } else {
        return Err(Error::UnsupportedFormat(format!(
            "{} is neither PNG nor PFM",
            path.display()
        )));
    };
    Ok(if want_linear {
        img.map(|v| T::of(srgb_to_linear(v.as_f64())))
    } else {
        img
    })
}

fn decode_png<T: Real>(path: &Path, bytes: &[u8]) -> Result<Image<T>> {
    let decoded = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| {
        Error::Decode {
            path: path.to_path_buf(),
            msg: e.to_string(),
        }
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let scale8 = |v: &u8| T::of(*v as f64 / 255.0);
    let scale16 = |v: &u16| T::of(*v as f64 / 65535.0);
    let (channels, data): (usize, Vec<T>) = match decoded {
        DynamicImage::ImageLuma8(b) => (1, b.as_raw().iter().map(scale8).collect()),
        DynamicImage::ImageLumaA8(b) => (1, b.as_raw().iter().step_by(2).map(scale8).collect()),
        DynamicImage::ImageRgb8(b) => (3, b.as_raw().iter().map(scale8).collect()),
        DynamicImage::ImageRgba8(b) => (
            3,
            b.as_raw()
                .chunks(4)
                .flat_map(|px| px[..3].iter().map(scale8))
                .collect(),
        ),
        DynamicImage::ImageLuma16(b) => (1, b.as_raw().iter().map(scale16).collect()),
        DynamicImage::ImageLumaA16(b) => {
            (1, b.as_raw().iter().step_by(2).map(scale16).collect())
        }
        DynamicImage::ImageRgb16(b) => (3, b.as_raw().iter().map(scale16).collect()),
        DynamicImage::ImageRgba16(b) => (
            3,
            b.as_raw()
                .chunks(4)
                .flat_map(|px| px[..3].iter().map(scale16))
                .collect(),
        ),
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: pixel layout {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Image::from_interleaved(h, w, channels, &data)
}

/// Saves as PNG with round-half-up quantization.
pub fn save_image<T: Real>(img: &Image<T>, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = img.dims();
    let codes: Vec<u16> = img
        .to_interleaved()
        .into_iter()
        .map(|v| quantize(v.as_f64(), depth))
        .collect();
    let encode_err = |e: image::ImageError| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    };
    let (w32, h32) = (w as u32, h as u32);
    write_atomic(path, |tmp| {
        let res = match (depth, img.channels()) {
            (BitDepth::Eight, 1) => {
                let buf: Vec<u8> = codes.iter().map(|&c| c as u8).collect();
                ImageBuffer::<Luma<u8>, _>::from_raw(w32, h32, buf)
                    .expect("buffer sized from image")
                    .save_with_format(tmp, ImageFormat::Png)
            }
            (BitDepth::Eight, _) => {
                let buf: Vec<u8> = codes.iter().map(|&c| c as u8).collect();
                ImageBuffer::<Rgb<u8>, _>::from_raw(w32, h32, buf)
                    .expect("buffer sized from image")
                    .save_with_format(tmp, ImageFormat::Png)
            }
            (BitDepth::Sixteen, 1) => ImageBuffer::<Luma<u16>, _>::from_raw(w32, h32, codes.clone())
                .expect("buffer sized from image")
                .save_with_format(tmp, ImageFormat::Png),
            (BitDepth::Sixteen, _) => ImageBuffer::<Rgb<u16>, _>::from_raw(w32, h32, codes.clone())
                .expect("buffer sized from image")
                .save_with_format(tmp, ImageFormat::Png),
        };
        res.map_err(encode_err)
    })
}

/// Parses a PFM file into `(height, width, channels, samples)` with samples
/// interleaved and ordered top row first.
fn parse_pfm(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedPfm("truncated header".into()));
        }
        let t = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        Ok(t)
    };
    let channels = match token()?.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::MalformedPfm(format!("bad magic {other:?}"))),
    };
    let width: usize = token()?
        .parse()
        .map_err(|_| Error::MalformedPfm("bad width".into()))?;
    let height: usize = token()?
        .parse()
        .map_err(|_| Error::MalformedPfm("bad height".into()))?;
    let scale: f64 = token()?
        .parse()
        .map_err(|_| Error::MalformedPfm("bad scale".into()))?;
    if width == 0 || height == 0 {
        return Err(Error::MalformedPfm("zero dimension".into()));
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::MalformedPfm("zero scale".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height * channels;
    let raster = bytes
        .get(pos..pos + 4 * n)
        .ok_or_else(|| Error::MalformedPfm(format!("expected {n} samples")))?;
    let little = scale < 0.0;
    let mut data = vec![0f32; n];
    let row_len = width * channels;
    for (i, chunk) in raster.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        if !v.is_finite() {
            return Err(Error::MalformedPfm(format!("non-finite sample {i}")));
        }
        let (file_row, col) = (i / row_len, i % row_len);
        data[(height - 1 - file_row) * row_len + col] = v;
    }
    Ok((height, width, channels, data))
}

/// Reads a single-channel PFM.
pub fn load_pfm(path: impl AsRef<Path>) -> Result<FloatMap<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, w, c, data) = parse_pfm(&bytes)?;
    if c != 1 {
        return Err(Error::MalformedPfm(format!(
            "{} has {c} channels, expected 1",
            path.display()
        )));
    }
    FloatMap::new(h, w, data)
}

/// Serializes a single-channel map to PFM bytes.
pub fn encode_pfm<T: Real>(map: &FloatMap<T>) -> Vec<u8> {
    let (h, w) = map.dims();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * h * w);
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(map.get(y, x).as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_pfm<T: Real>(map: &FloatMap<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pfm(map);
    write_atomic(path, |tmp| {
        let mut f = fs::File::create(tmp).map_err(|e| Error::io(tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(tmp, e))?;
        f.sync_all().map_err(|e| Error::io(tmp, e))
    })
}
