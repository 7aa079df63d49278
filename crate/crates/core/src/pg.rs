//! Pixel-level grounding: convolutional grounding encoder, SEG-state prompt
//! projection, and the prompt-conditioned mask decoder.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Conv2dGeom, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::tokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgConfig {
    /// Channels after the first stride-2 convolution.
    pub c_hidden: usize,
    /// Channels of the grounding feature map at 1/4 resolution.
    pub d_feat: usize,
    pub d_prompt: usize,
    pub prompt_hidden: usize,
    pub refine_hidden: usize,
}

impl Default for PgConfig {
    fn default() -> Self {
        Self {
            c_hidden: 16,
            d_feat: 32,
            d_prompt: 32,
            prompt_hidden: 64,
            refine_hidden: 8,
        }
    }
}

/// `G(x_v)`: `(H/4 · W/4) × d_feat` feature map, rows in raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundFeatures {
    pub features: Array2<f64>,
    pub height: usize,
    pub width: usize,
    /// Source image; the decoder's refinement head reads it at full
    /// resolution.
    pub image: ImageGrid,
}

/// Decoder-side prompt for one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SegPrompt {
    pub embedding: Vec<f64>,
    pub slot_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PgParams {
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    pixel_w: ParamId,
    pixel_b: ParamId,
    pub(crate) prompt_w1: ParamId,
    prompt_b1: ParamId,
    prompt_w2: ParamId,
    prompt_b2: ParamId,
    refine_w1: ParamId,
    refine_b1: ParamId,
    refine_w2: ParamId,
    refine_b2: ParamId,
}

fn fan_in<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let dist = Normal::new(0.0, (1.0 / rows as f64).sqrt()).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

const NAMES: [&str; 14] = [
    "ground.conv1.w",
    "ground.conv1.b",
    "ground.conv2.w",
    "ground.conv2.b",
    "decoder.pixel.w",
    "decoder.pixel.b",
    "prompt.w1",
    "prompt.b1",
    "prompt.w2",
    "prompt.b2",
    "decoder.refine.w1",
    "decoder.refine.b1",
    "decoder.refine.w2",
    "decoder.refine.b2",
];

impl PgParams {
    pub(crate) fn register<R: Rng>(cfg: &PgConfig, d_model: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        let shapes = [
            (9, cfg.c_hidden),
            (1, cfg.c_hidden),
            (9 * cfg.c_hidden, cfg.d_feat),
            (1, cfg.d_feat),
            (cfg.d_feat, cfg.d_prompt),
            (1, cfg.d_prompt),
            (d_model, cfg.prompt_hidden),
            (1, cfg.prompt_hidden),
            (cfg.prompt_hidden, cfg.d_prompt),
            (1, cfg.d_prompt),
            (9 * 2, cfg.refine_hidden),
            (1, cfg.refine_hidden),
            (cfg.refine_hidden, 1),
            (1, 1),
        ];
        let ids: Vec<ParamId> = NAMES
            .iter()
            .zip(shapes)
            .map(|(name, (r, c))| {
                let value = if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
                    Array2::zeros((r, c))
                } else {
                    fan_in(rng, r, c)
                };
                store.add(format!("pg.{name}"), value)
            })
            .collect();
        Self::from_ids(&ids)
    }

    pub(crate) fn bind(store: &ParamStore) -> Result<Self> {
        let ids = NAMES
            .iter()
            .map(|n| {
                store
                    .lookup(&format!("pg.{n}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor pg.{n}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_ids(&ids))
    }

    fn from_ids(ids: &[ParamId]) -> Self {
        Self {
            conv1_w: ids[0],
            conv1_b: ids[1],
            conv2_w: ids[2],
            conv2_b: ids[3],
            pixel_w: ids[4],
            pixel_b: ids[5],
            prompt_w1: ids[6],
            prompt_b1: ids[7],
            prompt_w2: ids[8],
            prompt_b2: ids[9],
            refine_w1: ids[10],
            refine_b1: ids[11],
            refine_w2: ids[12],
            refine_b2: ids[13],
        }
    }
}

/// Bilinear interpolation weights (half-pixel centers, edge clamped) mapping a
/// length-`src` axis onto length `dst`.
pub fn bilinear_matrix(dst: usize, src: usize) -> Array2<f64> {
    let mut m = Array2::zeros((dst, src));
    let ratio = src as f64 / dst as f64;
    for i in 0..dst {
        let pos = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        let frac = pos - lo as f64;
        m[[i, lo]] += 1.0 - frac;
        m[[i, hi]] += frac;
    }
    m
}

/// Rows of `h` states (offset by the visual prefix) whose text token is `[SEG]`,
/// in textual order.
pub fn seg_positions(text_ids: &[u32]) -> Vec<usize> {
    text_ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id == tokenizer::SEG)
        .map(|(i, _)| i)
        .collect()
}

pub(crate) struct Pg<'a> {
    pub cfg: &'a PgConfig,
    pub p: &'a PgParams,
}

impl Pg<'_> {
    /// Two stride-2 3×3 convolutions with GELU: `H×W` → `H/4 × W/4 × d_feat`.
    pub fn ground_encode(&self, t: &mut Tape, image: &ImageGrid) -> Result<(Var, usize, usize)> {
        let (h, w) = image.dims();
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!("image {h}x{w} is not divisible by 4")));
        }
        let col = Array2::from_shape_vec((h * w, 1), image.data().iter().cloned().collect())
            .expect("image column");
        let x = t.constant(col);
        let g1 = Conv2dGeom {
            height: h,
            width: w,
            channels: 1,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x = t.im2col(x, g1);
        let x = t.linear(x, self.p.conv1_w, self.p.conv1_b);
        let x = t.gelu(x);
        let g2 = Conv2dGeom {
            height: g1.out_height(),
            width: g1.out_width(),
            channels: self.cfg.c_hidden,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x = t.im2col(x, g2);
        let x = t.linear(x, self.p.conv2_w, self.p.conv2_b);
        let x = t.gelu(x);
        Ok((x, g2.out_height(), g2.out_width()))
    }

    /// Two-layer MLP `d_model → d_prompt`, applied rowwise.
    pub fn project_prompt(&self, t: &mut Tape, states: Var) -> Var {
        let x = t.linear(states, self.p.prompt_w1, self.p.prompt_b1);
        let x = t.gelu(x);
        t.linear(x, self.p.prompt_w2, self.p.prompt_b2)
    }

    /// Per-pixel embeddings of the feature map (1×1 convolution).
    pub fn pixel_embed(&self, t: &mut Tape, features: Var) -> Var {
        t.linear(features, self.p.pixel_w, self.p.pixel_b)
    }

    /// Logits at full resolution for one prompt row (`1 × d_prompt`).
    ///
    /// The coarse score is the inner product of each pixel embedding with the
    /// prompt, bilinearly upsampled; a 3×3 refinement head over
    /// `[coarse, image]` adds a residual correction.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_mask(
        &self,
        t: &mut Tape,
        pixel_emb: Var,
        feat_hw: (usize, usize),
        prompt: Var,
        image_col: Var,
        image_hw: (usize, usize),
        up_rows: Var,
        up_cols: Var,
    ) -> Var {
        let (fh, fw) = feat_hw;
        let (h, w) = image_hw;
        let coarse = t.matmul_nt(pixel_emb, prompt);
        let coarse = t.reshape(coarse, fh, fw);
        let up = t.matmul(up_rows, coarse);
        let up = t.matmul_nt(up, up_cols);
        let up = t.reshape(up, h * w, 1);
        let both = t.concat_cols(&[up, image_col]);
        let geom = Conv2dGeom {
            height: h,
            width: w,
            channels: 2,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let r = t.im2col(both, geom);
        let r = t.linear(r, self.p.refine_w1, self.p.refine_b1);
        let r = t.gelu(r);
        let r = t.linear(r, self.p.refine_w2, self.p.refine_b2);
        let out = t.add(up, r);
        t.reshape(out, h, w)
    }
}
