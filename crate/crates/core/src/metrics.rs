//! Mask overlap (DSC), boundary agreement (NSD) and VQA text metrics.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, MaskGrid};
use crate::model::{MedSegModel, Prediction};
use crate::protocol::{GroundedText, Role, Sample, Turn};

fn same_shape(a: &MaskGrid, b: &MaskGrid) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "mask shapes differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)` on binarized masks; 1 when both are empty.
pub fn dsc(pred: &MaskGrid, gt: &MaskGrid) -> Result<f64> {
    same_shape(pred, gt)?;
    let (h, w) = pred.dims();
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for r in 0..h {
        for c in 0..w {
            let (a, b) = (pred.is_set(r, c), gt.is_set(r, c));
            inter += usize::from(a && b);
            p += usize::from(a);
            g += usize::from(b);
        }
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Foreground pixels with a background 4-neighbour; outside the grid counts
/// as background.
pub fn border(mask: &MaskGrid) -> Vec<(usize, usize)> {
    let (h, w) = mask.dims();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.is_set(r, c) {
                continue;
            }
            let edge = r == 0 || c == 0 || r + 1 == h || c + 1 == w;
            if edge
                || !mask.is_set(r - 1, c)
                || !mask.is_set(r + 1, c)
                || !mask.is_set(r, c - 1)
                || !mask.is_set(r, c + 1)
            {
                out.push((r, c));
            }
        }
    }
    out
}

/// Number of points in `from` within Euclidean distance `tau` of some set
/// cell of `to`.
fn count_within(from: &[(usize, usize)], to: &[Vec<bool>], tau: f64) -> usize {
    let h = to.len() as isize;
    let w = to.first().map_or(0, Vec::len) as isize;
    let reach = tau.floor() as isize;
    let tau2 = tau * tau;
    from.iter()
        .filter(|&&(r, c)| {
            let (r, c) = (r as isize, c as isize);
            for dr in -reach..=reach {
                let rr = r + dr;
                if rr < 0 || rr >= h {
                    continue;
                }
                for dc in -reach..=reach {
                    let cc = c + dc;
                    if cc < 0 || cc >= w || ((dr * dr + dc * dc) as f64) > tau2 {
                        continue;
                    }
                    if to[rr as usize][cc as usize] {
                        return true;
                    }
                }
            }
            false
        })
        .count()
}

/// Normalized surface distance at tolerance `tau` pixels.
pub fn nsd(pred: &MaskGrid, gt: &MaskGrid, tau: f64) -> Result<f64> {
    same_shape(pred, gt)?;
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let (bp, bg) = (border(pred), border(gt));
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let (h, w) = pred.dims();
    let grid = |pts: &[(usize, usize)]| {
        let mut g = vec![vec![false; w]; h];
        for &(r, c) in pts {
            g[r][c] = true;
        }
        g
    };
    let hits = count_within(&bp, &grid(&bg), tau) + count_within(&bg, &grid(&bp), tau);
    Ok(hits as f64 / (bp.len() + bg.len()) as f64)
}

/// Lowercase, punctuation (other than in-word hyphens) to spaces, whitespace
/// tokens.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '-' { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(|t| t.trim_matches('-').to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

pub fn normalize_answer(text: &str) -> String {
    normalize_tokens(text).join(" ")
}

/// Exact-match fraction after normalization.
pub fn closed_accuracy<S: AsRef<str>, T: AsRef<str>>(preds: &[S], gts: &[T]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} references",
            preds.len(),
            gts.len()
        )));
    }
    if gts.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| normalize_answer(p.as_ref()) == normalize_answer(g.as_ref()))
        .count();
    Ok(hits as f64 / gts.len() as f64)
}

/// Fraction of unique reference tokens that occur in the prediction; 1 for an
/// empty reference.
pub fn open_recall(pred: &str, gt: &str) -> f64 {
    let gt: HashSet<String> = normalize_tokens(gt).into_iter().collect();
    if gt.is_empty() {
        return 1.0;
    }
    let pred: HashSet<String> = normalize_tokens(pred).into_iter().collect();
    gt.intersection(&pred).count() as f64 / gt.len() as f64
}

/// Answer text with slot markers removed and grounded phrases kept.
pub fn answer_text(text: &GroundedText) -> String {
    use crate::protocol::Chunk;
    text.chunks()
        .iter()
        .map(|c| match c {
            Chunk::Text(s) => s.clone(),
            Chunk::Seg(span) => format!(" {} ", span.phrase),
        })
        .collect()
}

pub fn is_closed_answer(text: &str) -> bool {
    matches!(normalize_answer(text).as_str(), "yes" | "no")
}

/// Population mean and standard deviation; `None` for no values.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Anything that answers a conversation prefix with text and masks.
pub trait Segmenter {
    fn predict(&self, image: &ImageGrid, history: &[Turn], max_new_tokens: usize) -> Result<Prediction>;
}

impl Segmenter for MedSegModel {
    fn predict(&self, image: &ImageGrid, history: &[Turn], max_new_tokens: usize) -> Result<Prediction> {
        MedSegModel::predict(self, image, history, max_new_tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub dsc_mean: Option<f64>,
    pub dsc_std: Option<f64>,
    pub nsd_mean: Option<f64>,
    pub nsd_std: Option<f64>,
    pub tau: f64,
    /// Number of (prediction, reference) mask pairs scored.
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaReport {
    /// `None` when no reference answer is yes/no.
    pub closed_accuracy: Option<f64>,
    pub open_recall: Option<f64>,
    pub closed_count: usize,
    pub open_count: usize,
}

/// Per-assistant-turn outcome, kept for callers that want more than the
/// aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnOutcome {
    pub image_id: String,
    pub turn: usize,
    pub predicted: String,
    pub reference: String,
    pub exact_match: bool,
    pub dsc: Vec<f64>,
    pub nsd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seg: SegReport,
    pub vqa: VqaReport,
    pub turns: Vec<TurnOutcome>,
}

/// Scores each assistant turn given the reference history before it. Masks
/// are paired by slot order; a slot without a partner scores 0. A generation
/// that never terminates counts as an empty answer.
pub fn evaluate_dataset<M: Segmenter + ?Sized>(
    model: &M,
    samples: &[Sample],
    tau: f64,
    max_new_tokens: usize,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let (mut dscs, mut nsds) = (Vec::new(), Vec::new());
    let (mut closed_p, mut closed_g) = (Vec::new(), Vec::new());
    let mut recalls = Vec::new();
    let mut turns = Vec::new();
    for s in samples {
        let mut slot = 0;
        for (k, turn) in s.conversation.turns().iter().enumerate() {
            if turn.role != Role::Assistant {
                continue;
            }
            let gt_masks = s
                .masks
                .get(slot..slot + turn.content.slot_count())
                .ok_or_else(|| Error::Dataset(format!("{}: fewer masks than slots", s.image_id)))?;
            slot += turn.content.slot_count();
            let pred = match model.predict(&s.image, &s.conversation.turns()[..k], max_new_tokens) {
                Ok(p) => p,
                Err(Error::GenerationBudgetExceeded(_)) => Prediction {
                    text: GroundedText::new(),
                    masks: Vec::new(),
                    token_ids: Vec::new(),
                },
                Err(e) => return Err(e),
            };
            let mut outcome = TurnOutcome {
                image_id: s.image_id.clone(),
                turn: k,
                predicted: pred.text.to_string(),
                reference: turn.text(),
                exact_match: pred.text == turn.content,
                dsc: Vec::new(),
                nsd: Vec::new(),
            };
            for i in 0..gt_masks.len().max(pred.masks.len()) {
                let (d, n) = match (pred.masks.get(i), gt_masks.get(i)) {
                    (Some(p), Some(g)) => (dsc(p, g)?, nsd(p, g, tau)?),
                    _ => (0.0, 0.0),
                };
                outcome.dsc.push(d);
                outcome.nsd.push(n);
            }
            dscs.extend_from_slice(&outcome.dsc);
            nsds.extend_from_slice(&outcome.nsd);
            let (p_text, g_text) = (answer_text(&pred.text), answer_text(&turn.content));
            if is_closed_answer(&g_text) {
                closed_p.push(p_text);
                closed_g.push(g_text);
            } else {
                recalls.push(open_recall(&p_text, &g_text));
            }
            turns.push(outcome);
        }
    }
    let d = mean_std(&dscs);
    let n = mean_std(&nsds);
    Ok(EvalReport {
        seg: SegReport {
            dsc_mean: d.map(|v| v.0),
            dsc_std: d.map(|v| v.1),
            nsd_mean: n.map(|v| v.0),
            nsd_std: n.map(|v| v.1),
            tau,
            pairs: dscs.len(),
        },
        vqa: VqaReport {
            closed_accuracy: if closed_g.is_empty() {
                None
            } else {
                Some(closed_accuracy(&closed_p, &closed_g)?)
            },
            open_recall: mean_std(&recalls).map(|v| v.0),
            closed_count: closed_g.len(),
            open_count: recalls.len(),
        },
        turns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, pts: &[(usize, usize)]) -> MaskGrid {
        MaskGrid::from_fn(h, w, |r, c| pts.contains(&(r, c)))
    }

    #[test]
    fn dsc_cases() {
        let a = mask(4, 4, &[(0, 0), (0, 1)]);
        let b = mask(4, 4, &[(0, 1), (1, 1)]);
        assert_eq!(dsc(&a, &b).unwrap(), 0.5);
        assert_eq!(dsc(&MaskGrid::empty(4, 4), &MaskGrid::empty(4, 4)).unwrap(), 1.0);
        assert_eq!(dsc(&a, &MaskGrid::empty(4, 4)).unwrap(), 0.0);
        assert!(dsc(&a, &MaskGrid::empty(3, 4)).is_err());
    }

    #[test]
    fn nsd_single_pixels() {
        let a = mask(8, 8, &[(3, 2)]);
        let b = mask(8, 8, &[(3, 4)]);
        assert_eq!(nsd(&a, &b, 1.0).unwrap(), 0.0);
        assert_eq!(nsd(&a, &b, 2.0).unwrap(), 1.0);
        assert_eq!(nsd(&a, &a, 1.0).unwrap(), 1.0);
        assert!(nsd(&a, &b, 0.0).is_err());
        assert_eq!(nsd(&a, &MaskGrid::empty(8, 8), 1.0).unwrap(), 0.0);
        assert_eq!(nsd(&MaskGrid::empty(8, 8), &MaskGrid::empty(8, 8), 1.0).unwrap(), 1.0);
    }

    #[test]
    fn border_of_filled_block_is_its_ring() {
        let m = MaskGrid::from_fn(5, 5, |r, c| (1..4).contains(&r) && (1..4).contains(&c));
        assert_eq!(border(&m).len(), 8);
        let full = MaskGrid::from_fn(4, 4, |_, _| true);
        assert_eq!(border(&full).len(), 12);
    }

    #[test]
    fn closed_and_open() {
        assert!((closed_accuracy(&["Yes.", "no", "no"], &["yes", "no", "yes"]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(closed_accuracy::<&str, &str>(&[], &[]), Err(Error::EmptyEvalSet)));
        assert!((open_recall("there is glass opacity", "ground glass opacity") - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(open_recall("", "ground glass"), 0.0);
        assert_eq!(open_recall("anything", ""), 1.0);
        assert_eq!(normalize_tokens("COVID-19, opacity."), vec!["covid-19", "opacity"]);
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]).unwrap();
        assert_eq!((m, s), (2.0, 1.0));
        assert!(mean_std(&[]).is_none());
    }
}
