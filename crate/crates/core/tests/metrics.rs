use std::collections::HashMap;

use medseg_core::grid::{ImageGrid, MaskGrid};
use medseg_core::metrics::{closed_accuracy, dsc, evaluate_dataset, nsd, open_recall, Segmenter};
use medseg_core::model::Prediction;
use medseg_core::protocol::{parse_grounded, Conversation, GroundedText, Sample, Turn};
use medseg_core::{Error, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> MaskGrid {
    let density = rng.random_range(0.0..0.7);
    MaskGrid::from_fn(h, w, |_, _| rng.random_bool(density))
}

fn cells(m: &MaskGrid) -> Vec<(usize, usize)> {
    let (h, w) = m.dims();
    (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).filter(|&(r, c)| m.is_set(r, c)).collect()
}

fn dsc_oracle(p: &MaskGrid, g: &MaskGrid) -> f64 {
    let (a, b) = (cells(p), cells(g));
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.iter().filter(|x| b.contains(x)).count();
    2.0 * inter as f64 / (a.len() + b.len()) as f64
}

/// Surface pixels as the set difference between a mask and its 4-neighbour
/// erosion, with the outside of the grid treated as background.
fn surface(m: &MaskGrid) -> Vec<(usize, usize)> {
    let (h, w) = m.dims();
    let at = |r: isize, c: isize| r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && m.is_set(r as usize, c as usize);
    cells(m)
        .into_iter()
        .filter(|&(r, c)| {
            let (r, c) = (r as isize, c as isize);
            let eroded = at(r - 1, c) && at(r + 1, c) && at(r, c - 1) && at(r, c + 1);
            !eroded
        })
        .collect()
}

fn nsd_oracle(p: &MaskGrid, g: &MaskGrid, tau: f64) -> f64 {
    let (sp, sg) = (surface(p), surface(g));
    if sp.is_empty() && sg.is_empty() {
        return 1.0;
    }
    if sp.is_empty() || sg.is_empty() {
        return 0.0;
    }
    let min_dist = |x: &(usize, usize), to: &[(usize, usize)]| {
        to.iter()
            .map(|y| ((x.0 as f64 - y.0 as f64).powi(2) + (x.1 as f64 - y.1 as f64).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let hits = sp.iter().filter(|x| min_dist(x, &sg) <= tau).count()
        + sg.iter().filter(|x| min_dist(x, &sp) <= tau).count();
    hits as f64 / (sp.len() + sg.len()) as f64
}

#[test]
fn overlap_and_surface_scores_match_brute_force() {
    let started = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let h = rng.random_range(1..=16);
        let w = rng.random_range(1..=16);
        let p = random_mask(&mut rng, h, w);
        let g = random_mask(&mut rng, h, w);
        assert!((dsc(&p, &g).unwrap() - dsc_oracle(&p, &g)).abs() <= 1e-12);
        for tau in [1.0, 2.0, 3.0] {
            assert!((nsd(&p, &g, tau).unwrap() - nsd_oracle(&p, &g, tau)).abs() <= 1e-12);
        }
    }
    assert!(started.elapsed().as_secs() < 30);
}

#[test]
fn analytic_surface_cases() {
    let a = MaskGrid::from_fn(9, 9, |r, c| (r, c) == (4, 2));
    let b = MaskGrid::from_fn(9, 9, |r, c| (r, c) == (4, 4));
    assert_eq!(nsd(&a, &b, 1.0).unwrap(), 0.0);
    assert_eq!(nsd(&a, &b, 2.0).unwrap(), 1.0);
    let blob = MaskGrid::from_fn(9, 9, |r, c| (2..7).contains(&r) && (3..8).contains(&c));
    assert_eq!(nsd(&blob, &blob, 1.0).unwrap(), 1.0);
    assert_eq!(dsc(&blob, &blob).unwrap(), 1.0);
}

fn mask_pair() -> impl Strategy<Value = (MaskGrid, MaskGrid)> {
    (1usize..=12, 1usize..=12).prop_flat_map(|(h, w)| {
        let n = h * w;
        (prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n)).prop_map(move |(a, b)| {
            (MaskGrid::from_fn(h, w, |r, c| a[r * w + c]), MaskGrid::from_fn(h, w, |r, c| b[r * w + c]))
        })
    })
}

proptest! {
    #[test]
    fn scores_are_symmetric_and_bounded((p, g) in mask_pair(), tau in 0.5f64..4.0) {
        let d = dsc(&p, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, dsc(&g, &p).unwrap());
        let n = nsd(&p, &g, tau).unwrap();
        prop_assert!((0.0..=1.0).contains(&n));
        prop_assert_eq!(n, nsd(&g, &p, tau).unwrap());
    }

    #[test]
    fn surface_score_grows_with_tolerance((p, g) in mask_pair(), a in 0.5f64..3.0, extra in 0.0f64..3.0) {
        prop_assert!(nsd(&p, &g, a).unwrap() <= nsd(&p, &g, a + extra).unwrap());
    }

    #[test]
    fn self_comparison_is_perfect((p, _) in mask_pair(), tau in 0.5f64..4.0) {
        prop_assert_eq!(dsc(&p, &p).unwrap(), 1.0);
        prop_assert_eq!(nsd(&p, &p, tau).unwrap(), 1.0);
    }
}

#[derive(Deserialize)]
struct Pair {
    prediction: String,
    reference: String,
}

fn vqa_pairs() -> Vec<Pair> {
    serde_json::from_str(include_str!("fixtures/vqa_pairs.json")).unwrap()
}

// 3 of 5 yes/no answers match after normalization.
const CLOSED: f64 = 3.0 / 5.0;
// Per-pair recall 2/3, 1/6, 1, 0, 3/4.
const OPEN: f64 = 31.0 / 60.0;

#[test]
fn vqa_fixture_matches_hand_computed_scores() {
    let pairs = vqa_pairs();
    let (closed, open) = pairs.split_at(5);
    let p: Vec<&str> = closed.iter().map(|x| x.prediction.as_str()).collect();
    let g: Vec<&str> = closed.iter().map(|x| x.reference.as_str()).collect();
    assert!((closed_accuracy(&p, &g).unwrap() - CLOSED).abs() <= 1e-12);
    let recalls: Vec<f64> = open.iter().map(|x| open_recall(&x.prediction, &x.reference)).collect();
    for (r, want) in recalls.iter().zip([2.0 / 3.0, 1.0 / 6.0, 1.0, 0.0, 0.75]) {
        assert!((r - want).abs() <= 1e-12);
    }
    let mean = recalls.iter().sum::<f64>() / recalls.len() as f64;
    assert!((mean - OPEN).abs() <= 1e-12);
}

/// Replies from a fixed table keyed by the last user question.
struct Scripted {
    replies: HashMap<String, (GroundedText, Vec<MaskGrid>)>,
}

impl Segmenter for Scripted {
    fn predict(&self, _image: &ImageGrid, history: &[Turn], _max: usize) -> Result<Prediction> {
        let key = history.last().unwrap().text();
        let (text, masks) = self.replies.get(&key).cloned().ok_or(Error::EmptyEvalSet)?;
        Ok(Prediction {
            text,
            masks,
            token_ids: Vec::new(),
        })
    }
}

fn sample(id: usize, question: &str, answer: GroundedText, masks: Vec<MaskGrid>) -> Sample {
    Sample {
        image_id: format!("s{id}"),
        image: ImageGrid::zeros(8, 8),
        class_names: vec!["nodule".into(); masks.len()],
        masks,
        conversation: Conversation::single(question, answer),
    }
}

#[test]
fn evaluation_reports_fixture_scores() {
    let mut samples = Vec::new();
    let mut replies = HashMap::new();
    for (i, p) in vqa_pairs().into_iter().enumerate() {
        let q = format!("question {i}");
        samples.push(sample(i, &q, GroundedText::plain(p.reference), Vec::new()));
        replies.insert(q, (GroundedText::plain(p.prediction), Vec::new()));
    }
    let report = evaluate_dataset(&Scripted { replies }, &samples, 1.0, 16).unwrap();
    assert!((report.vqa.closed_accuracy.unwrap() - CLOSED).abs() <= 1e-12);
    assert!((report.vqa.open_recall.unwrap() - OPEN).abs() <= 1e-12);
    assert_eq!((report.vqa.closed_count, report.vqa.open_count), (5, 5));
    assert_eq!(report.seg.pairs, 0);
    assert!(report.seg.dsc_mean.is_none());
}

fn seg_samples() -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let answer = parse_grounded("the image shows <p> nodule </p> [SEG] and <p> cyst </p> [SEG].").unwrap();
    (0..4)
        .map(|i| {
            let masks = vec![random_mask(&mut rng, 8, 8), random_mask(&mut rng, 8, 8)];
            sample(i, &format!("question {i}"), answer.clone(), masks)
        })
        .collect()
}

#[test]
fn perfect_answers_score_one() {
    let samples = seg_samples();
    let replies = samples
        .iter()
        .map(|s| {
            let t = &s.conversation.turns()[1];
            (s.conversation.turns()[0].text(), (t.content.clone(), s.masks.clone()))
        })
        .collect();
    let r = evaluate_dataset(&Scripted { replies }, &samples, 2.0, 16).unwrap();
    assert_eq!(r.seg.pairs, 8);
    assert_eq!((r.seg.dsc_mean, r.seg.dsc_std), (Some(1.0), Some(0.0)));
    assert_eq!(r.seg.nsd_mean, Some(1.0));
    assert_eq!(r.vqa.open_recall, Some(1.0));
    assert!(r.turns.iter().all(|t| t.exact_match));
}

#[test]
fn answers_without_slots_score_zero_overlap() {
    let samples = seg_samples();
    let replies = samples
        .iter()
        .map(|s| (s.conversation.turns()[0].text(), (GroundedText::plain("nothing here."), Vec::new())))
        .collect();
    let r = evaluate_dataset(&Scripted { replies }, &samples, 2.0, 16).unwrap();
    assert_eq!(r.seg.pairs, 8);
    assert_eq!(r.seg.dsc_mean, Some(0.0));
    assert_eq!(r.seg.nsd_mean, Some(0.0));
}

#[test]
fn evaluation_rejects_empty_sets_and_bad_tolerance() {
    let replies = HashMap::new();
    assert!(matches!(evaluate_dataset(&Scripted { replies }, &[], 1.0, 8), Err(Error::EmptyEvalSet)));
    let replies = HashMap::new();
    assert!(evaluate_dataset(&Scripted { replies }, &seg_samples(), 0.0, 8).is_err());
}
