//! Input complexity as the bit length of a lossless encoding.
//!
//! An image's complexity is the size of its compressed representation under a
//! fixed, fully parameter-pinned lossless codec. The raw count is normalized by
//! the largest count seen on in-distribution data and then mapped onto one of
//! `k` exits: simple inputs leave the network early, complex ones go deep.

use std::fmt;
use std::io::Cursor;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MoodError, Result};

/// An 8-bit image, row-major with interleaved channels.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    height: u16,
    width: u16,
    channels: u8,
    pixels: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(height: u16, width: u16, channels: u8, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(MoodError::input(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(MoodError::input(format!(
                "unsupported channel count {channels}, expected 1 or 3"
            )));
        }
        let expected = height as usize * width as usize * channels as usize;
        if pixels.len() != expected {
            return Err(MoodError::input(format!(
                "pixel buffer holds {} bytes, expected {expected} for {height}x{width}x{channels}",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    /// Single-color image.
    pub fn filled(height: u16, width: u16, channels: u8, value: u8) -> Result<Self> {
        let len = height as usize * width as usize * channels as usize;
        Self::new(height, width, channels, vec![value; len])
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    /// Number of scalar inputs once flattened.
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

impl fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageBuffer")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("channels", &self.channels)
            .field("bytes", &self.pixels.len())
            .finish()
    }
}

/// Lossless codec used to measure complexity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CodecId {
    #[serde(rename = "png")]
    DeflatePng,
    #[serde(rename = "jpeg2000")]
    Jpeg2000Lossless,
}

impl CodecId {
    pub fn name(self) -> &'static str {
        match self {
            CodecId::DeflatePng => "png",
            CodecId::Jpeg2000Lossless => "jpeg2000",
        }
    }

    pub fn is_available(self) -> bool {
        matches!(self, CodecId::DeflatePng)
    }
}

impl fmt::Display for CodecId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CodecId {
    type Err = MoodError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "png" => Ok(CodecId::DeflatePng),
            "jpeg2000" | "jp2" => Ok(CodecId::Jpeg2000Lossless),
            other => Err(MoodError::input(format!("unknown codec '{other}'"))),
        }
    }
}

/// Raw and normalized complexity of one input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexityScore {
    pub bits: u64,
    pub normalized: f64,
}

impl ComplexityScore {
    pub fn measure(img: &ImageBuffer, codec: CodecId, l_max: u64) -> Result<Self> {
        let bits = compress_bit_length(img, codec)?;
        let normalized = normalize_complexity(bits, l_max)?;
        Ok(Self { bits, normalized })
    }
}

/// Encodes `img` losslessly with the pinned parameters of `codec`.
///
/// DeflatePng writes a complete PNG stream (signature, IHDR, IDAT, IEND) with
/// DEFLATE level 9 and the adaptive per-row filter heuristic. No ancillary
/// chunks are emitted, so the output depends only on the pixels.
pub fn encode(img: &ImageBuffer, codec: CodecId) -> Result<Vec<u8>> {
    match codec {
        CodecId::DeflatePng => encode_png(img),
        CodecId::Jpeg2000Lossless => Err(MoodError::UnsupportedCodec(codec.name())),
    }
}

fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(img.len() / 2 + 64);
    {
        let mut encoder = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        encoder.set_color(match img.channels {
            1 => png::ColorType::Grayscale,
            _ => png::ColorType::Rgb,
        });
        encoder.set_depth(png::BitDepth::Eight);
        encoder.set_deflate_compression(png::DeflateCompression::Level(9));
        encoder.set_filter(png::Filter::Adaptive);
        let mut writer = encoder
            .write_header()
            .map_err(|e| MoodError::Encode(e.to_string()))?;
        writer
            .write_image_data(&img.pixels)
            .map_err(|e| MoodError::Encode(e.to_string()))?;
        writer
            .finish()
            .map_err(|e| MoodError::Encode(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes a PNG stream into an 8-bit gray or RGB buffer.
///
/// Palette images are expanded, 16-bit samples are truncated to 8 bits and an
/// alpha channel, if present, is dropped.
pub fn decode_png(bytes: &[u8]) -> std::result::Result<ImageBuffer, String> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| "image too large".to_string())?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    buf.truncate(info.buffer_size());

    let (height, width) = (info.height, info.width);
    if height > u16::MAX as u32 || width > u16::MAX as u32 {
        return Err(format!("{width}x{height} exceeds the 65535 pixel limit"));
    }
    let pixels = match info.color_type {
        png::ColorType::Grayscale => buf,
        png::ColorType::Rgb => buf,
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).map(|px| px[0]).collect(),
        png::ColorType::Rgba => buf
            .chunks_exact(4)
            .flat_map(|px| [px[0], px[1], px[2]])
            .collect(),
        png::ColorType::Indexed => return Err("palette was not expanded".to_string()),
    };
    let channels = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => 1,
        _ => 3,
    };
    ImageBuffer::new(height as u16, width as u16, channels, pixels).map_err(|e| e.to_string())
}

/// `L(x)`: number of bits in the encoded stream.
pub fn compress_bit_length(img: &ImageBuffer, codec: CodecId) -> Result<u64> {
    let encoded = encode(img, codec)?;
    Ok(8 * encoded.len() as u64)
}

pub fn normalize_complexity(bits: u64, l_max: u64) -> Result<f64> {
    if l_max == 0 {
        return Err(MoodError::calibration(
            "maximum ID complexity is zero; calibration set is empty or degenerate",
        ));
    }
    Ok(bits as f64 / l_max as f64)
}

/// Maps a normalized complexity onto an exit in `1..=k`:
/// `min(max(ceil(normalized * k), 1), k)`.
pub fn select_exit(normalized: f64, k: usize) -> usize {
    assert!(k >= 1, "exit count must be at least 1");
    let scaled = (normalized * k as f64).ceil();
    if scaled.is_nan() || scaled < 1.0 {
        1
    } else if scaled >= k as f64 {
        k
    } else {
        scaled as usize
    }
}

/// Largest bit length over the ID set.
pub fn compute_l_max<'a, I>(id_images: I, codec: CodecId) -> Result<u64>
where
    I: IntoIterator<Item = &'a ImageBuffer>,
{
    let mut max = None;
    for img in id_images {
        let bits = compress_bit_length(img, codec)?;
        max = Some(max.map_or(bits, |m: u64| m.max(bits)));
    }
    max.ok_or_else(|| MoodError::calibration("no ID images to compute maximum complexity"))
}
