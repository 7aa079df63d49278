//! The end-to-end reasoning segmentation model: GCU and PG wired together,
//! plus conversation flattening, greedy generation and prediction.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::gcu::{Gcu, GcuConfig, GcuParams, HiddenTokens, ProjectedTokens, VisualTokens};
use crate::grid::{ImageGrid, MaskGrid};
use crate::pg::{bilinear_matrix, seg_positions, GroundFeatures, Pg, PgConfig, PgParams, SegPrompt};
use crate::protocol::{parse_grounded_with, Conversation, GroundedText, ParseMode, Role, Turn};
use crate::tokenizer::{self, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side of the square training images; inputs may be smaller.
    pub image_size: usize,
    pub gcu: GcuConfig,
    pub pg: PgConfig,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            image_size: 64,
            gcu: GcuConfig::new(vocab_size),
            pg: PgConfig::default(),
        }
    }

    /// Small configuration for gradient checks and fast tests: 16×16 images,
    /// one layer, `d_model = 16`.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            image_size: 16,
            gcu: GcuConfig {
                patch_size: 4,
                d_vision: 8,
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                d_ff: 32,
                max_seq: 64,
                vocab_size,
            },
            pg: PgConfig {
                c_hidden: 4,
                d_feat: 8,
                d_prompt: 8,
                prompt_hidden: 16,
                refine_hidden: 4,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gcu.validate(self.image_size)?;
        if !self.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by 4",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.gcu.patch_size).pow(2)
    }
}

/// Token ids of a flattened conversation and, per position, whether the
/// token is an assistant target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatText {
    pub ids: Vec<u32>,
    pub supervised: Vec<bool>,
}

impl FlatText {
    /// Next-token targets aligned with the text positions.
    pub fn targets(&self) -> Vec<Option<usize>> {
        (0..self.ids.len())
            .map(|i| match (self.ids.get(i + 1), self.supervised.get(i + 1)) {
                (Some(&id), Some(true)) => Some(id as usize),
                _ => None,
            })
            .collect()
    }
}

/// `BOS IMG user : … assistant : … EOS user : …`. Assistant content and the
/// EOS closing it are supervised.
pub fn flatten_turns(vocab: &Vocab, turns: &[Turn]) -> FlatText {
    let colon = vocab.id(":").unwrap_or(tokenizer::UNK);
    let mut ids = vec![tokenizer::BOS, tokenizer::IMG];
    let mut supervised = vec![false, false];
    for turn in turns {
        let role = vocab.id(turn.role.as_str()).unwrap_or(tokenizer::UNK);
        ids.extend([role, colon]);
        supervised.extend([false, false]);
        let content = vocab.encode(&turn.text());
        let is_assistant = turn.role == Role::Assistant;
        supervised.extend(std::iter::repeat_n(is_assistant, content.len()));
        ids.extend(content);
        if is_assistant {
            ids.push(tokenizer::EOS);
            supervised.push(true);
        }
    }
    FlatText { ids, supervised }
}

pub fn flatten_conversation(vocab: &Vocab, conv: &Conversation) -> FlatText {
    flatten_turns(vocab, conv.turns())
}

/// Prompt ids for generating the next assistant turn after `history`, which
/// must end with a user turn.
pub fn prompt_ids(vocab: &Vocab, history: &[Turn]) -> Result<Vec<u32>> {
    match history.last() {
        Some(t) if t.role == Role::User => {}
        _ => {
            return Err(Error::InvalidArgument(
                "conversation prefix must end with a user turn".into(),
            ))
        }
    }
    let mut ids = flatten_turns(vocab, history).ids;
    ids.push(vocab.id("assistant").unwrap_or(tokenizer::UNK));
    ids.push(vocab.id(":").unwrap_or(tokenizer::UNK));
    Ok(ids)
}

/// Output of [`MedSegModel::predict`]: one binary mask per slot in `text`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub text: GroundedText,
    pub masks: Vec<MaskGrid>,
    pub token_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MedSegModel {
    config: ModelConfig,
    vocab: Vocab,
    params: ParamStore,
    gcu: GcuParams,
    pg: PgParams,
}

/// Graph handles for the grounding side of one image.
pub(crate) struct GroundGraph {
    pub pixel_emb: Var,
    pub feat_hw: (usize, usize),
    pub image_col: Var,
    pub image_hw: (usize, usize),
    pub up_rows: Var,
    pub up_cols: Var,
}

impl MedSegModel {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.gcu.vocab_size != vocab.size() {
            return Err(Error::Config(format!(
                "config vocab_size {} does not match vocabulary of {} tokens",
                config.gcu.vocab_size,
                vocab.size()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let gcu = GcuParams::register(&config.gcu, config.image_size, &mut params, &mut rng);
        let pg = PgParams::register(&config.pg, config.gcu.d_model, &mut params, &mut rng);
        Ok(Self {
            config,
            vocab,
            params,
            gcu,
            pg,
        })
    }

    /// Rebuilds a model around loaded parameters, checking that every tensor
    /// is present with the shape the config implies.
    pub fn from_parts(config: ModelConfig, vocab: Vocab, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config.clone(), vocab.clone(), 0)?;
        for (name, value) in reference.params.iter() {
            let id = params
                .lookup(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if params.get(id).dim() != value.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    params.get(id).dim(),
                    value.dim()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, expected {}",
                params.len(),
                reference.params.len()
            )));
        }
        let gcu = GcuParams::bind(&config.gcu, &params)?;
        let pg = PgParams::bind(&params)?;
        Ok(Self {
            config,
            vocab,
            params,
            gcu,
            pg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub(crate) fn gcu_graph(&self) -> Gcu<'_> {
        Gcu {
            cfg: &self.config.gcu,
            p: &self.gcu,
            grid: self.config.image_size / self.config.gcu.patch_size,
        }
    }

    pub(crate) fn pg_graph(&self) -> Pg<'_> {
        Pg {
            cfg: &self.config.pg,
            p: &self.pg,
        }
    }

    fn check_image(&self, image: &ImageGrid) -> Result<()> {
        let (h, w) = image.dims();
        let patch = self.config.gcu.patch_size;
        if h % patch != 0 || w % patch != 0 {
            return Err(Error::shape(format!(
                "image {h}x{w} is not divisible by patch size {patch}"
            )));
        }
        if h > self.config.image_size || w > self.config.image_size {
            return Err(Error::shape(format!(
                "image {h}x{w} exceeds model image size {}",
                self.config.image_size
            )));
        }
        Ok(())
    }

    /// `s_v = V(x_v)`
    pub fn encode_image(&self, image: &ImageGrid) -> Result<VisualTokens> {
        let mut t = Tape::new(&self.params);
        let v = self.gcu_graph().encode_image(&mut t, image)?;
        Ok(VisualTokens {
            tokens: t.value(v).clone(),
        })
    }

    /// `α_v = P_v(s_v)`
    pub fn project_visual(&self, s_v: &VisualTokens) -> Result<ProjectedTokens> {
        let mut t = Tape::new(&self.params);
        let x = t.constant(s_v.tokens.clone());
        let a = self.gcu_graph().project_visual(&mut t, x)?;
        Ok(ProjectedTokens {
            tokens: t.value(a).clone(),
        })
    }

    /// `h_l = L([α_v, x_l])`
    pub fn llm_forward(&self, alpha: &ProjectedTokens, text_ids: &[u32]) -> Result<HiddenTokens> {
        let mut t = Tape::new(&self.params);
        let a = t.constant(alpha.tokens.clone());
        let (states, logits) = self.gcu_graph().llm_forward(&mut t, a, text_ids)?;
        Ok(HiddenTokens {
            states: t.value(states).clone(),
            logits: t.value(logits).clone(),
            num_patches: alpha.tokens.nrows(),
        })
    }

    /// Image straight to hidden tokens on one tape.
    pub fn forward(&self, image: &ImageGrid, text_ids: &[u32]) -> Result<HiddenTokens> {
        self.check_image(image)?;
        let mut t = Tape::new(&self.params);
        let g = self.gcu_graph();
        let s_v = g.encode_image(&mut t, image)?;
        let alpha = g.project_visual(&mut t, s_v)?;
        let num_patches = t.value(alpha).nrows();
        let (states, logits) = g.llm_forward(&mut t, alpha, text_ids)?;
        Ok(HiddenTokens {
            states: t.value(states).clone(),
            logits: t.value(logits).clone(),
            num_patches,
        })
    }

    /// Greedy decoding until EOS (not included in the result) or
    /// `max_new_tokens`. Ties go to the lowest token id.
    pub fn generate(&self, image: &ImageGrid, prefix_ids: &[u32], max_new_tokens: usize) -> Result<Vec<u32>> {
        self.generate_inner(image, prefix_ids, max_new_tokens).map(|(ids, _)| ids)
    }

    /// Returns the generated ids and whether EOS was reached.
    fn generate_inner(&self, image: &ImageGrid, prefix_ids: &[u32], max_new_tokens: usize) -> Result<(Vec<u32>, bool)> {
        self.check_image(image)?;
        let num_patches = (image.height() / self.config.gcu.patch_size) * (image.width() / self.config.gcu.patch_size);
        let total = num_patches + prefix_ids.len();
        if total > self.config.gcu.max_seq {
            return Err(Error::SequenceTooLong {
                len: total,
                max: self.config.gcu.max_seq,
            });
        }
        if max_new_tokens == 0 {
            return Ok((Vec::new(), false));
        }
        let alpha = {
            let mut t = Tape::new(&self.params);
            let g = self.gcu_graph();
            let s_v = g.encode_image(&mut t, image)?;
            let a = g.project_visual(&mut t, s_v)?;
            ProjectedTokens {
                tokens: t.value(a).clone(),
            }
        };
        let mut ids = prefix_ids.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new_tokens && num_patches + ids.len() < self.config.gcu.max_seq {
            let mut t = Tape::new(&self.params);
            let a = t.constant(alpha.tokens.clone());
            let (_, logits) = self.gcu_graph().llm_forward(&mut t, a, &ids)?;
            let last = t.value(logits).row(num_patches + ids.len() - 1).to_owned();
            let next = argmax(last.as_slice().expect("contiguous row")) as u32;
            if next == tokenizer::EOS {
                return Ok((out, true));
            }
            ids.push(next);
            out.push(next);
        }
        Ok((out, false))
    }

    /// `G(x_v)`
    pub fn ground_encode(&self, image: &ImageGrid) -> Result<GroundFeatures> {
        let mut t = Tape::new(&self.params);
        let (f, h, w) = self.pg_graph().ground_encode(&mut t, image)?;
        Ok(GroundFeatures {
            features: t.value(f).clone(),
            height: h,
            width: w,
            image: image.clone(),
        })
    }

    pub fn project_prompt(&self, state: &[f64], slot_index: usize) -> Result<SegPrompt> {
        let d = self.config.gcu.d_model;
        if state.len() != d {
            return Err(Error::shape(format!("state has {} entries, expected {d}", state.len())));
        }
        let mut t = Tape::new(&self.params);
        let x = t.constant(Array2::from_shape_vec((1, d), state.to_vec()).expect("row"));
        let p = self.pg_graph().project_prompt(&mut t, x);
        Ok(SegPrompt {
            embedding: t.value(p).row(0).to_vec(),
            slot_index,
        })
    }

    /// `m = M(G(x_v), t_seg)` as a full-resolution logit grid.
    pub fn decode_mask(&self, f: &GroundFeatures, prompt: &SegPrompt) -> Result<MaskGrid> {
        let d = self.config.pg.d_prompt;
        if prompt.embedding.len() != d {
            return Err(Error::shape(format!(
                "prompt has {} entries, expected {d}",
                prompt.embedding.len()
            )));
        }
        if f.features.dim() != (f.height * f.width, self.config.pg.d_feat)
            || f.image.height() != 4 * f.height
            || f.image.width() != 4 * f.width
        {
            return Err(Error::shape("grounding features do not match their image"));
        }
        let mut t = Tape::new(&self.params);
        let feats = t.constant(f.features.clone());
        let ground = self.ground_graph(&mut t, feats, (f.height, f.width), &f.image);
        let q = t.constant(Array2::from_shape_vec((1, d), prompt.embedding.clone()).expect("row"));
        let logits = self.decode_on(&mut t, &ground, q);
        Ok(MaskGrid::logits(t.value(logits).clone()))
    }

    pub(crate) fn ground_graph(&self, t: &mut Tape, features: Var, feat_hw: (usize, usize), image: &ImageGrid) -> GroundGraph {
        let (h, w) = image.dims();
        let pixel_emb = self.pg_graph().pixel_embed(t, features);
        let image_col = t.constant(
            Array2::from_shape_vec((h * w, 1), image.data().iter().cloned().collect()).expect("column"),
        );
        let up_rows = t.constant(bilinear_matrix(h, feat_hw.0));
        let up_cols = t.constant(bilinear_matrix(w, feat_hw.1));
        GroundGraph {
            pixel_emb,
            feat_hw,
            image_col,
            image_hw: (h, w),
            up_rows,
            up_cols,
        }
    }

    pub(crate) fn decode_on(&self, t: &mut Tape, g: &GroundGraph, prompt_row: Var) -> Var {
        self.pg_graph().decode_mask(
            t,
            g.pixel_emb,
            g.feat_hw,
            prompt_row,
            g.image_col,
            g.image_hw,
            g.up_rows,
            g.up_cols,
        )
    }

    /// Answers the last user turn of `history` with grounded text and one
    /// binary mask per `[SEG]` slot.
    pub fn predict(&self, image: &ImageGrid, history: &[Turn], max_new_tokens: usize) -> Result<Prediction> {
        let prefix = prompt_ids(&self.vocab, history)?;
        let (generated, finished) = self.generate_inner(image, &prefix, max_new_tokens)?;
        if !finished {
            return Err(Error::GenerationBudgetExceeded(max_new_tokens));
        }
        let text = parse_grounded_with(&self.vocab.decode(&generated)?, ParseMode::Lenient)?;
        let masks = self.masks_for(image, &prefix, &generated)?;
        debug_assert_eq!(masks.len(), text.slot_count());
        Ok(Prediction {
            text,
            masks,
            token_ids: generated,
        })
    }

    /// One binary mask per `[SEG]` in `generated`, conditioned on the hidden
    /// states of `prefix ++ generated`.
    fn masks_for(&self, image: &ImageGrid, prefix: &[u32], generated: &[u32]) -> Result<Vec<MaskGrid>> {
        let seg: Vec<usize> = seg_positions(generated).into_iter().map(|p| p + prefix.len()).collect();
        if seg.is_empty() {
            return Ok(Vec::new());
        }
        let mut ids = prefix.to_vec();
        ids.extend_from_slice(generated);
        let mut t = Tape::new(&self.params);
        let g = self.gcu_graph();
        let s_v = g.encode_image(&mut t, image)?;
        let alpha = g.project_visual(&mut t, s_v)?;
        let num_patches = t.value(alpha).nrows();
        let (states, _) = g.llm_forward(&mut t, alpha, &ids)?;
        let rows: Vec<usize> = seg.iter().map(|p| p + num_patches).collect();
        let seg_states = t.select_rows(states, &rows);
        let prompts = self.pg_graph().project_prompt(&mut t, seg_states);
        let (feats, fh, fw) = self.pg_graph().ground_encode(&mut t, image)?;
        let ground = self.ground_graph(&mut t, feats, (fh, fw), image);
        let mut masks = Vec::with_capacity(rows.len());
        for k in 0..rows.len() {
            let q = t.select_rows(prompts, &[k]);
            let logits = self.decode_on(&mut t, &ground, q);
            masks.push(MaskGrid::logits(t.value(logits).clone()).binarized());
        }
        Ok(masks)
    }

    /// Teacher-forced masks for a full conversation: the `[SEG]` positions come
    /// from the conversation itself rather than from generation.
    pub fn teacher_forced_masks(&self, image: &ImageGrid, conv: &Conversation) -> Result<Vec<MaskGrid>> {
        let flat = flatten_conversation(&self.vocab, conv);
        self.masks_for(image, &[], &flat.ids)
    }
}

/// Index of the largest value; the first one on ties.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Rows of `h.states` at `[SEG]` tokens of `text_ids`, in textual order.
/// `text_ids` must be aligned with the text positions of `h`.
pub fn extract_seg_states(h: &HiddenTokens, text_ids: &[u32]) -> Vec<Vec<f64>> {
    seg_positions(text_ids)
        .into_iter()
        .filter(|&p| p < h.text_len())
        .map(|p| h.states.row(h.num_patches + p).to_vec())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5, 0.2]), 1);
        assert_eq!(argmax(&[1.0]), 0);
    }

    #[test]
    fn flatten_marks_assistant_targets() {
        let vocab = Vocab::build(&["nodule"]);
        let conv = Conversation::single(
            "Please segment the nodule in the medical image",
            crate::protocol::parse_grounded("Sure, it is [SEG].").unwrap(),
        );
        let flat = flatten_conversation(&vocab, &conv);
        let text = vocab.decode(&flat.ids).unwrap();
        assert_eq!(
            text,
            "<bos> <img> user: please segment the nodule in the medical image assistant: sure, it is [SEG]. <eos>"
        );
        let supervised: Vec<u32> = flat
            .ids
            .iter()
            .zip(&flat.supervised)
            .filter(|(_, &s)| s)
            .map(|(&i, _)| i)
            .collect();
        let mut expect = vocab.encode("Sure, it is [SEG].");
        expect.push(tokenizer::EOS);
        assert_eq!(supervised, expect);
        let targets = flat.targets();
        assert_eq!(targets.len(), flat.ids.len());
        assert_eq!(targets.iter().flatten().count(), expect.len());
        assert_eq!(*targets.last().unwrap(), None);
    }

    #[test]
    fn prompt_ids_require_user_turn() {
        let vocab = Vocab::build::<&str>(&[]);
        assert!(prompt_ids(&vocab, &[]).is_err());
        let ids = prompt_ids(&vocab, &[Turn::user("hello")]).unwrap();
        assert_eq!(&ids[ids.len() - 2..], &[vocab.id("assistant").unwrap(), vocab.id(":").unwrap()]);
    }

    use crate::autograd::{gelu, ParamId};
    use crate::protocol::parse_grounded;
    use rand::Rng;

    fn tiny(seed: u64) -> MedSegModel {
        let vocab = Vocab::build(&["nodule", "cyst"]);
        MedSegModel::new(ModelConfig::tiny(vocab.size()), vocab, seed).unwrap()
    }

    fn default_model() -> MedSegModel {
        let vocab = Vocab::build(&["nodule", "cyst"]);
        MedSegModel::new(ModelConfig::new(vocab.size()), vocab, 1).unwrap()
    }

    fn noise_image(n: usize, seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::new(Array2::from_shape_fn((n, n), |_| rng.random_range(0.0..1.0))).unwrap()
    }

    fn randomize(m: &mut MedSegModel, names: &[&str]) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for name in names {
            let id = m.params().lookup(name).unwrap();
            m.params_mut().get_mut(id).mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
    }

    /// `<R, out>` as a scalar on the tape.
    fn probe(t: &mut Tape, out: Var, seed: u64) -> Var {
        let (r, c) = t.value(out).dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = t.constant(Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0)));
        let prod = t.mul(out, weights);
        let left = t.constant(Array2::ones((1, r)));
        let right = t.constant(Array2::ones((c, 1)));
        let row = t.matmul(left, prod);
        t.matmul(row, right)
    }

    /// Central differences against the tape gradient for every entry of the
    /// given parameters (up to `limit` per tensor).
    fn fd_check(model: &MedSegModel, params: &[&str], limit: usize, f: impl Fn(&MedSegModel, &mut Tape) -> Var) -> f64 {
        let mut t = Tape::new(model.params());
        let out = f(model, &mut t);
        let grads = t.backward(out);
        let mut probe_model = model.clone();
        let mut worst = 0.0f64;
        let h = 1e-6;
        for name in params {
            let id: ParamId = model.params().lookup(name).unwrap();
            let (rows, cols) = model.params().get(id).dim();
            for k in (0..rows * cols).take(limit) {
                let (r, c) = (k / cols, k % cols);
                let orig = probe_model.params().get(id)[[r, c]];
                let mut eval = |v: f64| {
                    probe_model.params_mut().get_mut(id)[[r, c]] = v;
                    let mut t = Tape::new(probe_model.params());
                    let o = f(&probe_model, &mut t);
                    t.scalar(o)
                };
                let numeric = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
                probe_model.params_mut().get_mut(id)[[r, c]] = orig;
                let analytic = grads.at(id, r, c);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn visual_token_counts() {
        let m = default_model();
        assert_eq!(m.encode_image(&noise_image(64, 0)).unwrap().tokens.dim(), (64, 64));
        assert_eq!(m.encode_image(&noise_image(32, 0)).unwrap().tokens.dim(), (16, 64));
        assert!(m.encode_image(&noise_image(60, 0)).is_err());
        assert!(m.encode_image(&noise_image(72, 0)).is_err());
    }

    #[test]
    fn positions_separate_identical_patches() {
        let mut m = tiny(0);
        let zero = ImageGrid::zeros(16, 16);
        let with_pos = m.encode_image(&zero).unwrap().tokens;
        for a in 0..with_pos.nrows() {
            for b in 0..a {
                assert_ne!(with_pos.row(a), with_pos.row(b));
            }
        }
        for name in ["gcu.vision.pos_row", "gcu.vision.pos_col"] {
            let id = m.params().lookup(name).unwrap();
            m.params_mut().get_mut(id).fill(0.0);
        }
        let without = m.encode_image(&zero).unwrap().tokens;
        for r in 1..without.nrows() {
            assert_eq!(without.row(r), without.row(0));
        }
    }

    #[test]
    fn projection_shapes_and_identity() {
        let m = default_model();
        let s_v = m.encode_image(&noise_image(64, 1)).unwrap();
        assert_eq!(m.project_visual(&s_v).unwrap().tokens.dim(), (64, 128));

        let vocab = Vocab::build::<&str>(&[]);
        let mut cfg = ModelConfig::tiny(vocab.size());
        cfg.gcu.d_vision = cfg.gcu.d_model;
        let mut sq = MedSegModel::new(cfg, vocab, 3).unwrap();
        let w = sq.params().lookup("gcu.proj.w").unwrap();
        let b = sq.params().lookup("gcu.proj.b").unwrap();
        *sq.params_mut().get_mut(w) = Array2::eye(16);
        sq.params_mut().get_mut(b).fill(0.0);
        let s_v = sq.encode_image(&noise_image(16, 2)).unwrap();
        assert_eq!(sq.project_visual(&s_v).unwrap().tokens, s_v.tokens);
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let m = tiny(5);
        let img = noise_image(16, 5);
        let worst = fd_check(&m, &["gcu.proj.w", "gcu.proj.b"], 64, |m, t| {
            let g = m.gcu_graph();
            let s_v = g.encode_image(t, &img).unwrap();
            let a = g.project_visual(t, s_v).unwrap();
            probe(t, a, 1)
        });
        assert!(worst <= 1e-4, "{worst}");
    }

    #[test]
    fn ground_encoder_gradient_matches_finite_differences() {
        let mut m = tiny(6);
        randomize(&mut m, &["pg.ground.conv1.b", "pg.ground.conv2.b"]);
        let img = noise_image(16, 6);
        let names = ["pg.ground.conv1.w", "pg.ground.conv1.b", "pg.ground.conv2.w", "pg.ground.conv2.b"];
        let worst = fd_check(&m, &names, 40, |m, t| {
            let (f, _, _) = m.pg_graph().ground_encode(t, &img).unwrap();
            probe(t, f, 2)
        });
        assert!(worst <= 1e-4, "{worst}");
    }

    #[test]
    fn prompt_projection_gradient_matches_finite_differences() {
        let mut m = tiny(7);
        randomize(&mut m, &["pg.prompt.b1", "pg.prompt.b2"]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let state = Array2::from_shape_fn((2, 16), |_| rng.random_range(-1.0..1.0));
        let names = ["pg.prompt.w1", "pg.prompt.b1", "pg.prompt.w2", "pg.prompt.b2"];
        let worst = fd_check(&m, &names, 40, |m, t| {
            let x = t.constant(state.clone());
            let p = m.pg_graph().project_prompt(t, x);
            probe(t, p, 3)
        });
        assert!(worst <= 1e-4, "{worst}");
    }

    #[test]
    fn hidden_token_shapes_and_causality() {
        let m = tiny(8);
        let img = noise_image(16, 8);
        let ids = m.vocab().encode("sure, it is [SEG] and more words here.");
        let h = m.forward(&img, &ids).unwrap();
        assert_eq!(h.seq_len(), 16 + ids.len());
        assert_eq!(h.states.dim(), (16 + ids.len(), 16));
        assert!(h.logits.iter().all(|v| v.is_finite()));
        for j in [1, 4, ids.len() - 1] {
            let mut changed = ids.clone();
            changed[j] = if changed[j] == 10 { 11 } else { 10 };
            let h2 = m.forward(&img, &changed).unwrap();
            for p in 0..16 + j {
                assert_eq!(h.states.row(p), h2.states.row(p), "position {p} saw token {j}");
            }
            assert_ne!(h.states.row(16 + j), h2.states.row(16 + j));
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let m = tiny(8);
        let img = noise_image(16, 8);
        assert!(matches!(m.forward(&img, &[9999]), Err(Error::IdOutOfRange { .. })));
        assert!(matches!(m.forward(&img, &[5; 60]), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn generation_contracts() {
        let m = tiny(9);
        let img = noise_image(16, 9);
        let prefix = prompt_ids(m.vocab(), &[Turn::user("hello")]).unwrap();
        assert!(m.generate(&img, &prefix, 0).unwrap().is_empty());
        let a = m.generate(&img, &prefix, 6).unwrap();
        assert_eq!(a, m.generate(&img, &prefix, 6).unwrap());
        assert!(a.len() <= 6);
    }

    #[test]
    fn ground_features_shape_and_bias_response() {
        let m = default_model();
        let f = m.ground_encode(&noise_image(64, 3)).unwrap();
        assert_eq!((f.height, f.width, f.features.dim()), (16, 16, (256, 32)));

        let mut t = tiny(4);
        randomize(&mut t, &["pg.ground.conv1.b", "pg.ground.conv2.b"]);
        let f = t.ground_encode(&ImageGrid::zeros(16, 16)).unwrap();
        let get = |n: &str| t.params().get(t.params().lookup(n).unwrap()).clone();
        let (w2, b1, b2) = (get("pg.ground.conv2.w"), get("pg.ground.conv1.b"), get("pg.ground.conv2.b"));
        // a zero image leaves only biases; interior cells see a full 3×3 window
        let hidden = b1.mapv(gelu);
        let taps = Array2::from_shape_fn((1, w2.nrows()), |(_, k)| hidden[[0, k % hidden.ncols()]]);
        let expect = (taps.dot(&w2) + &b2).mapv(gelu);
        for r in 1..f.height {
            for c in 1..f.width {
                let row = f.features.row(r * f.width + c);
                for (a, b) in row.iter().zip(expect.row(0)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn prompt_projection_of_zero_is_bias_response() {
        let mut m = tiny(4);
        randomize(&mut m, &["pg.prompt.b1", "pg.prompt.b2"]);
        let p = m.project_prompt(&[0.0; 16], 0).unwrap();
        assert_eq!(p.embedding.len(), 8);
        let get = |n: &str| m.params().get(m.params().lookup(n).unwrap()).clone();
        let expect = get("pg.prompt.b1").mapv(gelu).dot(&get("pg.prompt.w2")) + get("pg.prompt.b2");
        for (a, b) in p.embedding.iter().zip(expect.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(m.project_prompt(&[0.0; 3], 0).is_err());
    }

    #[test]
    fn decoded_masks_are_full_resolution() {
        let m = default_model();
        let img = noise_image(64, 4);
        let f = m.ground_encode(&img).unwrap();
        let p = m.project_prompt(&vec![0.1; 128], 0).unwrap();
        let mask = m.decode_mask(&f, &p).unwrap();
        assert_eq!(mask.dims(), (64, 64));
        assert!(mask.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn seg_state_extraction() {
        let m = tiny(2);
        let img = noise_image(16, 2);
        let one = m.vocab().encode("sure , it is [SEG] .");
        let h = m.forward(&img, &one).unwrap();
        let states = extract_seg_states(&h, &one);
        assert_eq!(states.len(), 1);
        assert_eq!(states[0], h.states.row(16 + 4).to_vec());
        let none = m.vocab().encode("no abnormality");
        assert!(extract_seg_states(&m.forward(&img, &none).unwrap(), &none).is_empty());
        let text = "the image shows <p> nodule </p> [SEG] and <p> cyst </p> [SEG].";
        let two = m.vocab().encode(text);
        let s2 = extract_seg_states(&m.forward(&img, &two).unwrap(), &two);
        assert_eq!(s2.len(), parse_grounded(text).unwrap().slot_count());
        assert_ne!(s2[0], s2[1]);
    }
}
