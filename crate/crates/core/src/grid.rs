//! Pixel grids: grayscale images and binary/logit masks.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Grayscale image with intensities in `[0, 1]`, indexed `[row, col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    data: Array2<f64>,
}

impl ImageGrid {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::shape("image must have positive height and width"));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "image intensities must lie in [0, 1]".into(),
            ));
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array2::zeros((height, width)),
        }
    }

    /// Quantizes from 8-bit gray levels.
    pub fn from_u8(height: usize, width: usize, pixels: &[u8]) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::shape(format!(
                "expected {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        let data = Array2::from_shape_fn((height, width), |(r, c)| {
            f64::from(pixels[r * width + c]) / 255.0
        });
        Self::new(data)
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    /// Snaps every intensity to the nearest 8-bit level so the in-memory image
    /// matches what a PNG round trip produces.
    pub fn quantized(&self) -> Self {
        let (h, w) = self.dims();
        Self::from_u8(h, w, &self.to_u8()).expect("quantized image is valid")
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskRole {
    Binary,
    Logit,
}

/// Mask over an image. Binary grids hold only `0.0` / `1.0`; logit grids hold
/// real-valued scores where positive means foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGrid {
    values: Array2<f64>,
    role: MaskRole,
}

impl MaskGrid {
    pub fn binary(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::shape("mask must have positive height and width"));
        }
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(
                "binary mask contains values other than 0 and 1".into(),
            ));
        }
        Ok(Self {
            values,
            role: MaskRole::Binary,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            values: Array2::zeros((height, width)),
            role: MaskRole::Binary,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        Self {
            values: Array2::from_shape_fn((height, width), |(r, c)| {
                if f(r, c) {
                    1.0
                } else {
                    0.0
                }
            }),
            role: MaskRole::Binary,
        }
    }

    pub fn logits(values: Array2<f64>) -> Self {
        Self {
            values,
            role: MaskRole::Logit,
        }
    }

    /// 8-bit encoding: any nonzero byte is foreground.
    pub fn from_u8(height: usize, width: usize, pixels: &[u8]) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::shape(format!(
                "expected {} mask pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Self::from_fn(height, width, |r, c| pixels[r * width + c] != 0))
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.binarized()
            .values
            .iter()
            .map(|&v| if v > 0.5 { 255 } else { 0 })
            .collect()
    }

    /// Binary view. Logit grids are thresholded at zero (strictly positive is
    /// foreground).
    pub fn binarized(&self) -> MaskGrid {
        match self.role {
            MaskRole::Binary => self.clone(),
            MaskRole::Logit => MaskGrid {
                values: self.values.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
                role: MaskRole::Binary,
            },
        }
    }

    pub fn role(&self) -> MaskRole {
        self.role
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn is_set(&self, row: usize, col: usize) -> bool {
        match self.role {
            MaskRole::Binary => self.values[[row, col]] > 0.5,
            MaskRole::Logit => self.values[[row, col]] > 0.0,
        }
    }

    pub fn area(&self) -> usize {
        let (h, w) = self.dims();
        (0..h)
            .flat_map(|r| (0..w).map(move |c| (r, c)))
            .filter(|&(r, c)| self.is_set(r, c))
            .count()
    }
}
