//! Wire encodings for masks and images: run-length JSON and base64 PNG.

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::dataset::{decode_png_gray, image_to_png, mask_to_png};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, MaskGrid};

/// Row-major run lengths alternating background/foreground, starting with a
/// (possibly zero) background run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub size: [usize; 2],
    pub counts: Vec<usize>,
}

pub fn rle_encode(mask: &MaskGrid) -> Rle {
    let (h, w) = mask.dims();
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0;
    for r in 0..h {
        for c in 0..w {
            let v = mask.is_set(r, c);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    Rle { size: [h, w], counts }
}

pub fn rle_decode(rle: &Rle) -> Result<MaskGrid> {
    let [h, w] = rle.size;
    let total: usize = rle.counts.iter().sum();
    if total != h * w {
        return Err(Error::shape(format!("RLE covers {total} pixels, size is {h}x{w}")));
    }
    let mut flat = Vec::with_capacity(total);
    for (i, &n) in rle.counts.iter().enumerate() {
        flat.extend(std::iter::repeat_n(i % 2 == 1, n));
    }
    Ok(MaskGrid::from_fn(h, w, |r, c| flat[r * w + c]))
}

fn b64() -> base64::engine::GeneralPurpose {
    base64::engine::general_purpose::STANDARD
}

pub fn mask_to_png_base64(mask: &MaskGrid) -> Result<String> {
    Ok(b64().encode(mask_to_png(mask)?))
}

pub fn decode_base64(s: &str) -> Result<Vec<u8>> {
    b64()
        .decode(s.trim())
        .map_err(|e| Error::InvalidArgument(format!("bad base64: {e}")))
}

pub fn mask_from_png_base64(s: &str) -> Result<MaskGrid> {
    crate::dataset::mask_from_png(&decode_base64(s)?)
}

pub fn image_to_png_base64(image: &ImageGrid) -> Result<String> {
    Ok(b64().encode(image_to_png(image)?))
}

/// Decodes a base64 PNG (any color type, converted to 8-bit gray), refusing
/// images with more than `max_pixels` pixels before decoding them fully.
pub fn image_from_png_base64(s: &str, max_pixels: usize) -> Result<ImageGrid> {
    let bytes = decode_base64(s)?;
    let (w, h) = png_dimensions(&bytes)?;
    if w * h > max_pixels {
        return Err(Error::shape(format!("image {h}x{w} exceeds {max_pixels} pixels")));
    }
    let (h, w, px) = decode_png_gray(&bytes)?;
    ImageGrid::from_u8(h, w, &px)
}

/// `(width, height)` from the IHDR chunk.
pub fn png_dimensions(bytes: &[u8]) -> Result<(usize, usize)> {
    const SIG: &[u8] = b"\x89PNG\r\n\x1a\n";
    if bytes.len() < 24 || &bytes[..8] != SIG || &bytes[12..16] != b"IHDR" {
        return Err(Error::InvalidArgument("not a PNG image".into()));
    }
    let w = u32::from_be_bytes(bytes[16..20].try_into().expect("4 bytes")) as usize;
    let h = u32::from_be_bytes(bytes[20..24].try_into().expect("4 bytes")) as usize;
    Ok((w, h))
}

/// How masks travel in responses and session exports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFormat {
    #[default]
    PngBase64,
    Rle,
}

/// A mask in either wire form; told apart by JSON shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EncodedMask {
    Rle(Rle),
    PngBase64(String),
}

impl EncodedMask {
    pub fn encode(mask: &MaskGrid, format: MaskFormat) -> Result<Self> {
        Ok(match format {
            MaskFormat::PngBase64 => EncodedMask::PngBase64(mask_to_png_base64(mask)?),
            MaskFormat::Rle => EncodedMask::Rle(rle_encode(mask)),
        })
    }

    pub fn decode(&self) -> Result<MaskGrid> {
        match self {
            EncodedMask::Rle(r) => rle_decode(r),
            EncodedMask::PngBase64(s) => mask_from_png_base64(s),
        }
    }
}

/// One grounded slot of an answer with its mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub slot_index: usize,
    pub phrase: String,
    pub mask: EncodedMask,
    pub area_px: usize,
}
