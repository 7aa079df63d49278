//! On-disk dataset layout: `manifest.jsonl` plus grayscale PNGs under
//! `images/` and `masks/`. Paths in the manifest are relative to the dataset
//! directory.

use std::fs;
use std::io::{BufRead, BufReader, Cursor, Write};
use std::path::{Path, PathBuf};

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder, ImageReader};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, MaskGrid};
use crate::protocol::{Conversation, Sample, TurnRecord};

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_id: String,
    /// Source dataset name, used to pick an annotation prefix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub image: String,
    pub masks: Vec<String>,
    pub class_names: Vec<String>,
    #[serde(default)]
    pub conversation: Vec<TurnRecord>,
}

pub fn encode_png_gray(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out).write_image(pixels, width as u32, height as u32, ExtendedColorType::L8)?;
    Ok(out)
}

/// Decodes any PNG to 8-bit luma; returns `(height, width, pixels)`.
pub fn decode_png_gray(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let img = ImageReader::with_format(Cursor::new(bytes), image::ImageFormat::Png)
        .decode()?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn image_to_png(image: &ImageGrid) -> Result<Vec<u8>> {
    encode_png_gray(image.width(), image.height(), &image.to_u8())
}

pub fn mask_to_png(mask: &MaskGrid) -> Result<Vec<u8>> {
    encode_png_gray(mask.width(), mask.height(), &mask.to_u8())
}

pub fn image_from_png(bytes: &[u8]) -> Result<ImageGrid> {
    let (h, w, px) = decode_png_gray(bytes)?;
    ImageGrid::from_u8(h, w, &px)
}

pub fn mask_from_png(bytes: &[u8]) -> Result<MaskGrid> {
    let (h, w, px) = decode_png_gray(bytes)?;
    MaskGrid::from_u8(h, w, &px)
}

pub fn record_for(sample: &Sample) -> ManifestRecord {
    ManifestRecord {
        image_id: sample.image_id.clone(),
        dataset: None,
        image: format!("images/{}.png", sample.image_id),
        masks: (0..sample.masks.len())
            .map(|k| format!("masks/{}_{k}.png", sample.image_id))
            .collect(),
        class_names: sample.class_names.clone(),
        conversation: sample.conversation.to_records(),
    }
}

/// Writes PNGs and the manifest; existing files are overwritten.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    let mut manifest = Vec::new();
    for s in samples {
        let rec = record_for(s);
        write_file(&dir.join(&rec.image), &image_to_png(&s.image)?)?;
        for (m, rel) in s.masks.iter().zip(&rec.masks) {
            write_file(&dir.join(rel), &mask_to_png(m)?)?;
        }
        serde_json::to_writer(&mut manifest, &rec)?;
        manifest.push(b'\n');
    }
    write_file(&dir.join(MANIFEST), &manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let path = dir.join(MANIFEST);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub(crate) fn resolve(dir: &Path, rel: &str) -> Result<PathBuf> {
    let p = Path::new(rel);
    if p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(Error::Dataset(format!("path `{rel}` must be relative and stay inside the dataset")));
    }
    Ok(dir.join(p))
}

pub fn load_record(dir: &Path, rec: &ManifestRecord) -> Result<Sample> {
    let image = image_from_png(&read(&resolve(dir, &rec.image)?)?)?;
    let masks = rec
        .masks
        .iter()
        .map(|m| mask_from_png(&read(&resolve(dir, m)?)?))
        .collect::<Result<Vec<_>>>()?;
    let conversation = Conversation::from_records(&rec.conversation)
        .map_err(|e| Error::Dataset(format!("{}: {e}", rec.image_id)))?;
    Ok(Sample {
        image_id: rec.image_id.clone(),
        image,
        masks,
        conversation,
        class_names: rec.class_names.clone(),
    })
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    read_manifest(dir)?.iter().map(|r| load_record(dir, r)).collect()
}

/// Appends one JSON object per line.
pub fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    f.write_all(&line).map_err(|e| Error::io(path, e))
}
