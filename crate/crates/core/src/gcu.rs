//! Global context understanding: patch encoder, visual projection and the
//! prefix-LM transformer that produces hidden tokens and next-token logits.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcuConfig {
    pub patch_size: usize,
    pub d_vision: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub vocab_size: usize,
}

impl GcuConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            patch_size: 8,
            d_vision: 64,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_seq: 256,
            vocab_size,
        }
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.patch_size == 0 || !image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {image_size} is not divisible by patch size {}",
                self.patch_size
            )));
        }
        let patches = (image_size / self.patch_size).pow(2);
        if patches >= self.max_seq {
            return Err(Error::Config(format!(
                "{patches} visual tokens leave no room in max_seq {}",
                self.max_seq
            )));
        }
        Ok(())
    }
}

/// `s_v`: one row per image patch, `d_vision` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTokens {
    pub tokens: Array2<f64>,
}

/// `α_v`: visual tokens mapped into the text embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedTokens {
    pub tokens: Array2<f64>,
}

/// `h_l`: last-layer states and logits for every position of
/// `[visual prefix, text]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTokens {
    pub states: Array2<f64>,
    pub logits: Array2<f64>,
    pub num_patches: usize,
}

impl HiddenTokens {
    pub fn seq_len(&self) -> usize {
        self.states.nrows()
    }

    pub fn text_len(&self) -> usize {
        self.seq_len() - self.num_patches
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BlockParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct GcuParams {
    patch_w: ParamId,
    patch_b: ParamId,
    pos_row: ParamId,
    pos_col: ParamId,
    pub(crate) proj_w: ParamId,
    pub(crate) proj_b: ParamId,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<BlockParams>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    lm_w: ParamId,
    lm_b: ParamId,
}

fn normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

impl GcuParams {
    /// Registers every GCU tensor under the `gcu.` prefix.
    pub(crate) fn register<R: Rng>(cfg: &GcuConfig, image_size: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        let grid = image_size / cfg.patch_size;
        let p2 = cfg.patch_size * cfg.patch_size;
        let (dv, d) = (cfg.d_vision, cfg.d_model);
        let mut add_w = |store: &mut ParamStore, name: &str, r: usize, c: usize| {
            store.add(format!("gcu.{name}"), normal(rng, r, c, INIT_STD))
        };
        let patch_w = add_w(store, "vision.patch_w", p2, dv);
        let pos_row = add_w(store, "vision.pos_row", grid, dv);
        let pos_col = add_w(store, "vision.pos_col", grid, dv);
        let proj_w = add_w(store, "proj.w", dv, d);
        let tok_emb = add_w(store, "tok_emb", cfg.vocab_size, d);
        let pos_emb = add_w(store, "pos_emb", cfg.max_seq, d);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("layer{l}");
            let wq = add_w(store, &format!("{p}.attn.wq"), d, d);
            let wk = add_w(store, &format!("{p}.attn.wk"), d, d);
            let wv = add_w(store, &format!("{p}.attn.wv"), d, d);
            let wo = add_w(store, &format!("{p}.attn.wo"), d, d);
            let w1 = add_w(store, &format!("{p}.ff.w1"), d, cfg.d_ff);
            let w2 = add_w(store, &format!("{p}.ff.w2"), cfg.d_ff, d);
            blocks.push(BlockParams {
                ln1_g: store.add(format!("gcu.{p}.ln1.g"), Array2::ones((1, d))),
                ln1_b: store.add(format!("gcu.{p}.ln1.b"), Array2::zeros((1, d))),
                wq,
                bq: store.add(format!("gcu.{p}.attn.bq"), Array2::zeros((1, d))),
                wk,
                bk: store.add(format!("gcu.{p}.attn.bk"), Array2::zeros((1, d))),
                wv,
                bv: store.add(format!("gcu.{p}.attn.bv"), Array2::zeros((1, d))),
                wo,
                bo: store.add(format!("gcu.{p}.attn.bo"), Array2::zeros((1, d))),
                ln2_g: store.add(format!("gcu.{p}.ln2.g"), Array2::ones((1, d))),
                ln2_b: store.add(format!("gcu.{p}.ln2.b"), Array2::zeros((1, d))),
                w1,
                b1: store.add(format!("gcu.{p}.ff.b1"), Array2::zeros((1, cfg.d_ff))),
                w2,
                b2: store.add(format!("gcu.{p}.ff.b2"), Array2::zeros((1, d))),
            });
        }
        let lm_w = add_w(store, "lm_head.w", d, cfg.vocab_size);
        Self {
            patch_w,
            patch_b: store.add("gcu.vision.patch_b", Array2::zeros((1, dv))),
            pos_row,
            pos_col,
            proj_w,
            proj_b: store.add("gcu.proj.b", Array2::zeros((1, d))),
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: store.add("gcu.ln_f.g", Array2::ones((1, d))),
            lnf_b: store.add("gcu.ln_f.b", Array2::zeros((1, d))),
            lm_w,
            lm_b: store.add("gcu.lm_head.b", Array2::zeros((1, cfg.vocab_size))),
        }
    }

    /// Looks up every tensor by name in a loaded store.
    pub(crate) fn bind(cfg: &GcuConfig, store: &ParamStore) -> Result<Self> {
        let get = |name: &str| {
            store
                .lookup(&format!("gcu.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor gcu.{name}")))
        };
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let g = |s: &str| get(&format!("layer{l}.{s}"));
            blocks.push(BlockParams {
                ln1_g: g("ln1.g")?,
                ln1_b: g("ln1.b")?,
                wq: g("attn.wq")?,
                bq: g("attn.bq")?,
                wk: g("attn.wk")?,
                bk: g("attn.bk")?,
                wv: g("attn.wv")?,
                bv: g("attn.bv")?,
                wo: g("attn.wo")?,
                bo: g("attn.bo")?,
                ln2_g: g("ln2.g")?,
                ln2_b: g("ln2.b")?,
                w1: g("ff.w1")?,
                b1: g("ff.b1")?,
                w2: g("ff.w2")?,
                b2: g("ff.b2")?,
            });
        }
        Ok(Self {
            patch_w: get("vision.patch_w")?,
            patch_b: get("vision.patch_b")?,
            pos_row: get("vision.pos_row")?,
            pos_col: get("vision.pos_col")?,
            proj_w: get("proj.w")?,
            proj_b: get("proj.b")?,
            tok_emb: get("tok_emb")?,
            pos_emb: get("pos_emb")?,
            blocks,
            lnf_g: get("ln_f.g")?,
            lnf_b: get("ln_f.b")?,
            lm_w: get("lm_head.w")?,
            lm_b: get("lm_head.b")?,
        })
    }
}

/// Non-overlapping patches flattened row-major: one row per patch, patches in
/// raster order.
pub fn patchify(image: &ImageGrid, patch: usize) -> Result<Array2<f64>> {
    let (h, w) = image.dims();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!(
            "image {h}x{w} is not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let data = image.data();
    Ok(Array2::from_shape_fn((gh * gw, patch * patch), |(p, k)| {
        let (py, px) = (p / gw, p % gw);
        let (ky, kx) = (k / patch, k % patch);
        data[[py * patch + ky, px * patch + kx]]
    }))
}

/// Graph builders over a borrowed parameter set.
pub(crate) struct Gcu<'a> {
    pub cfg: &'a GcuConfig,
    pub p: &'a GcuParams,
    /// Largest supported patch grid side.
    pub grid: usize,
}

impl Gcu<'_> {
    pub fn encode_image(&self, t: &mut Tape, image: &ImageGrid) -> Result<Var> {
        let patch = self.cfg.patch_size;
        let patches = patchify(image, patch)?;
        let (gh, gw) = (image.height() / patch, image.width() / patch);
        if gh > self.grid || gw > self.grid {
            return Err(Error::shape(format!(
                "image {}x{} exceeds the {}x{} patch grid the model was built for",
                image.height(),
                image.width(),
                self.grid * patch,
                self.grid * patch
            )));
        }
        let x = t.constant(patches);
        let emb = t.linear(x, self.p.patch_w, self.p.patch_b);
        let rows: Vec<usize> = (0..gh * gw).map(|i| i / gw).collect();
        let cols: Vec<usize> = (0..gh * gw).map(|i| i % gw).collect();
        let pr = t.param(self.p.pos_row);
        let pc = t.param(self.p.pos_col);
        let pr = t.gather(pr, &rows);
        let pc = t.gather(pc, &cols);
        let pos = t.add(pr, pc);
        Ok(t.add(emb, pos))
    }

    pub fn project_visual(&self, t: &mut Tape, s_v: Var) -> Result<Var> {
        if t.value(s_v).ncols() != self.cfg.d_vision {
            return Err(Error::shape(format!(
                "visual tokens have {} columns, expected {}",
                t.value(s_v).ncols(),
                self.cfg.d_vision
            )));
        }
        Ok(t.linear(s_v, self.p.proj_w, self.p.proj_b))
    }

    /// Returns `(states, logits)` for `[α_v, text]`.
    pub fn llm_forward(&self, t: &mut Tape, alpha: Var, text_ids: &[u32]) -> Result<(Var, Var)> {
        let prefix = t.value(alpha).nrows();
        let seq = prefix + text_ids.len();
        if seq > self.cfg.max_seq {
            return Err(Error::SequenceTooLong {
                len: seq,
                max: self.cfg.max_seq,
            });
        }
        if let Some(&bad) = text_ids.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
            return Err(Error::IdOutOfRange {
                id: bad as usize,
                size: self.cfg.vocab_size,
            });
        }
        let mut x = alpha;
        if !text_ids.is_empty() {
            let ids: Vec<usize> = text_ids.iter().map(|&i| i as usize).collect();
            let table = t.param(self.p.tok_emb);
            let emb = t.gather(table, &ids);
            x = t.concat_rows(&[alpha, emb]);
        }
        let pos_table = t.param(self.p.pos_emb);
        let positions: Vec<usize> = (0..seq).collect();
        let pos = t.gather(pos_table, &positions);
        x = t.add(x, pos);

        let heads = self.cfg.n_heads;
        let dh = self.cfg.d_model / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for b in &self.p.blocks {
            let h = t.layer_norm(x, b.ln1_g, b.ln1_b);
            let q = t.linear(h, b.wq, b.bq);
            let k = t.linear(h, b.wk, b.bk);
            let v = t.linear(h, b.wv, b.bv);
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (lo, hi) = (hd * dh, (hd + 1) * dh);
                let qh = t.slice_cols(q, lo, hi);
                let kh = t.slice_cols(k, lo, hi);
                let vh = t.slice_cols(v, lo, hi);
                let scores = t.matmul_nt(qh, kh);
                let scores = t.scale(scores, scale);
                let attn = t.prefix_softmax(scores, prefix);
                outs.push(t.matmul(attn, vh));
            }
            let cat = if heads == 1 { outs[0] } else { t.concat_cols(&outs) };
            let o = t.linear(cat, b.wo, b.bo);
            x = t.add(x, o);

            let h = t.layer_norm(x, b.ln2_g, b.ln2_b);
            let f = t.linear(h, b.w1, b.b1);
            let f = t.gelu(f);
            let f = t.linear(f, b.w2, b.b2);
            x = t.add(x, f);
        }
        let states = t.layer_norm(x, self.p.lnf_g, self.p.lnf_b);
        let logits = t.linear(states, self.p.lm_w, self.p.lm_b);
        Ok((states, logits))
    }
}
