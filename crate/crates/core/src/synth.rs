//! Deterministic synthetic image/mask/conversation generator.
//!
//! Images are smooth low-intensity backgrounds with elliptical "lesions".
//! Each lesion class has a fixed mean intensity (see [`class_signature`]), so
//! a small model can tell classes apart from pixels alone.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, MaskGrid};
use crate::protocol::{Conversation, GroundedText, Sample, Turn};

pub const EXPLICIT_RESPONSE: &str = "Sure, it is [SEG].";
pub const REASONING_QUESTION: &str = "What possible conditions are indicated by this examination?";
pub const NEGATIVE_RESPONSE: &str = "No abnormality is found in this image.";
pub const MAX_PLACEMENT_ATTEMPTS: usize = 100;
pub const MIN_LESION_PIXELS: usize = 16;

pub fn explicit_question(class_name: &str) -> String {
    format!("Please segment the {class_name} in the medical image")
}

/// Intensity signature of a lesion class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassSignature {
    pub mean: f64,
    /// Amplitude of a zero-mean sinusoidal texture.
    pub texture: f64,
}

/// Fixed class table. Means are 0.12 apart; the background stays below 0.25.
const SIGNATURES: &[(&str, f64, f64)] = &[
    ("nodule", 0.95, 0.0),
    ("tumor", 0.83, 0.02),
    ("opacity", 0.71, 0.04),
    ("cyst", 0.59, 0.0),
    ("polyp", 0.47, 0.02),
    ("covid-19", 0.35, 0.03),
];

pub fn known_classes() -> impl Iterator<Item = &'static str> {
    SIGNATURES.iter().map(|(n, _, _)| *n)
}

pub fn class_signature(name: &str) -> Result<ClassSignature> {
    SIGNATURES
        .iter()
        .find(|(n, _, _)| *n == name)
        .map(|&(_, mean, texture)| ClassSignature { mean, texture })
        .ok_or_else(|| {
            Error::Config(format!(
                "lesion class `{name}` has no intensity signature; known: {}",
                known_classes().collect::<Vec<_>>().join(", ")
            ))
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConversationStyle {
    Explicit,
    Reasoning,
    Negative,
}

impl ConversationStyle {
    pub const ALL: [ConversationStyle; 3] = [Self::Explicit, Self::Reasoning, Self::Negative];
}

impl FromStr for ConversationStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "explicit" => Ok(Self::Explicit),
            "reasoning" => Ok(Self::Reasoning),
            "negative" => Ok(Self::Negative),
            other => Err(Error::UnknownStyle(other.to_string())),
        }
    }
}

impl fmt::Display for ConversationStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Explicit => "explicit",
            Self::Reasoning => "reasoning",
            Self::Negative => "negative",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemplateMix {
    pub explicit: f64,
    pub reasoning: f64,
    pub negative: f64,
}

impl Default for TemplateMix {
    fn default() -> Self {
        Self {
            explicit: 0.4,
            reasoning: 0.4,
            negative: 0.2,
        }
    }
}

impl TemplateMix {
    /// Parses `explicit=0.4,reasoning=0.4,negative=0.2`; omitted styles are 0.
    pub fn parse(s: &str) -> Result<Self> {
        let mut mix = Self {
            explicit: 0.0,
            reasoning: 0.0,
            negative: 0.0,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("expected style=fraction, got `{part}`")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad fraction in `{part}`")))?;
            match k.trim().parse::<ConversationStyle>()? {
                ConversationStyle::Explicit => mix.explicit = v,
                ConversationStyle::Reasoning => mix.reasoning = v,
                ConversationStyle::Negative => mix.negative = v,
            }
        }
        mix.validate()?;
        Ok(mix)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.explicit, self.reasoning, self.negative];
        if parts.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("template fractions must be non-negative".into()));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("template fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Exact per-style counts for `n` samples by largest remainder; ties go to
    /// the earlier style.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let fracs = [self.explicit, self.reasoning, self.negative];
        let raw: Vec<f64> = fracs.iter().map(|f| f * n as f64).collect();
        let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
        let mut left = n - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let ra = raw[a] - raw[a].floor();
            let rb = raw[b] - raw[b].floor();
            rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            if fracs[i] > 0.0 {
                counts[i] += 1;
                left -= 1;
            }
        }
        [counts[0], counts[1], counts[2]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_samples: usize,
    pub image_size: usize,
    pub lesion_classes: Vec<String>,
    pub max_lesions_per_image: usize,
    pub seed: u64,
    pub template_mix: TemplateMix,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_samples: 16,
            image_size: 64,
            lesion_classes: ["nodule", "opacity", "cyst", "tumor"].map(String::from).to_vec(),
            max_lesions_per_image: 2,
            seed: 0,
            template_mix: TemplateMix::default(),
        }
    }
}

impl SynthConfig {
    /// `patch_size` is the vision patch size the data will be fed to.
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        self.template_mix.validate()?;
        if self.num_samples == 0 {
            return Err(Error::InvalidArgument("num_samples must be positive".into()));
        }
        if self.image_size < 16 || patch_size == 0 || !self.image_size.is_multiple_of(patch_size) {
            return Err(Error::InvalidArgument(format!(
                "image size {} must be at least 16 and divisible by patch size {patch_size}",
                self.image_size
            )));
        }
        if self.max_lesions_per_image == 0 || self.max_lesions_per_image > self.lesion_classes.len() {
            return Err(Error::InvalidArgument(format!(
                "max_lesions_per_image must be in 1..={}",
                self.lesion_classes.len()
            )));
        }
        for (i, c) in self.lesion_classes.iter().enumerate() {
            class_signature(c)?;
            if self.lesion_classes[..i].contains(c) {
                return Err(Error::InvalidArgument(format!("duplicate lesion class `{c}`")));
            }
        }
        Ok(())
    }
}

/// One elliptical blob with a three-lobed radial wobble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub class_name: String,
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub angle: f64,
    pub wobble: f64,
    pub phase: f64,
}

impl Lesion {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let dx = col as f64 + 0.5 - self.cx;
        let dy = row as f64 + 0.5 - self.cy;
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        let rho = (u * u + v * v).sqrt();
        let phi = v.atan2(u);
        rho <= 1.0 + self.wobble * (3.0 * phi + self.phase).sin()
    }

    fn reach(&self) -> f64 {
        self.rx.max(self.ry) * (1.0 + self.wobble)
    }

    pub fn mask(&self, size: usize) -> MaskGrid {
        MaskGrid::from_fn(size, size, |r, c| self.contains(r, c))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionLayout {
    pub size: usize,
    pub lesions: Vec<Lesion>,
}

impl LesionLayout {
    /// Lesion indices ordered left to right by center (then top to bottom).
    pub fn left_to_right(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.lesions.len()).collect();
        idx.sort_by(|&a, &b| {
            let (la, lb) = (&self.lesions[a], &self.lesions[b]);
            la.cx
                .partial_cmp(&lb.cx)
                .expect("finite")
                .then(la.cy.partial_cmp(&lb.cy).expect("finite"))
        });
        idx
    }
}

fn iou(a: &MaskGrid, b: &MaskGrid) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.values().iter().zip(b.values().iter()) {
        let (x, y) = (*x > 0.5, *y > 0.5);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Places one lesion per class in `classes`, fully inside the frame and with
/// pairwise IoU below 0.2 (placements that touch are rejected outright).
pub fn sample_layout<R: Rng>(classes: &[String], size: usize, rng: &mut R) -> Result<LesionLayout> {
    let scale = size as f64 / 64.0;
    let mut lesions: Vec<Lesion> = Vec::new();
    let mut masks: Vec<MaskGrid> = Vec::new();
    let mut attempts = 0;
    for class in classes {
        loop {
            if attempts == MAX_PLACEMENT_ATTEMPTS {
                return Err(Error::LayoutInfeasible { attempts });
            }
            attempts += 1;
            let rx = rng.random_range(5.0..10.0) * scale;
            let ry = rng.random_range(5.0..10.0) * scale;
            let wobble = rng.random_range(0.0..0.12);
            let reach = rx.max(ry) * (1.0 + wobble) + 1.0;
            if 2.0 * reach >= size as f64 {
                continue;
            }
            let lesion = Lesion {
                class_name: class.clone(),
                cx: rng.random_range(reach..size as f64 - reach),
                cy: rng.random_range(reach..size as f64 - reach),
                rx,
                ry,
                angle: rng.random_range(0.0..PI),
                wobble,
                phase: rng.random_range(0.0..2.0 * PI),
            };
            let mask = lesion.mask(size);
            if mask.area() < MIN_LESION_PIXELS {
                continue;
            }
            let clear = lesions.iter().zip(&masks).all(|(other, m)| {
                let gap = ((lesion.cx - other.cx).powi(2) + (lesion.cy - other.cy).powi(2)).sqrt();
                gap > lesion.reach() + other.reach() + 2.0 && iou(&mask, m) < 0.2
            });
            if clear {
                lesions.push(lesion);
                masks.push(mask);
                break;
            }
        }
    }
    Ok(LesionLayout { size, lesions })
}

/// Renders the image (quantized to 8 bits) and one mask per lesion in layout
/// order.
pub fn render_image<R: Rng>(layout: &LesionLayout, rng: &mut R) -> Result<(ImageGrid, Vec<MaskGrid>)> {
    let n = layout.size;
    let masks: Vec<MaskGrid> = layout.lesions.iter().map(|l| l.mask(n)).collect();
    for (i, m) in masks.iter().enumerate() {
        if m.area() < MIN_LESION_PIXELS {
            return Err(Error::InvalidArgument(format!(
                "lesion {i} covers {} pixels, fewer than {MIN_LESION_PIXELS}",
                m.area()
            )));
        }
        for (j, other) in masks[..i].iter().enumerate() {
            if iou(m, other) >= 0.2 {
                return Err(Error::InvalidArgument(format!("lesions {j} and {i} overlap")));
            }
        }
    }
    let signatures = layout
        .lesions
        .iter()
        .map(|l| class_signature(&l.class_name))
        .collect::<Result<Vec<_>>>()?;

    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..2.0) * 2.0 * PI / n as f64,
                rng.random_range(0.5..2.0) * 2.0 * PI / n as f64,
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let texture_phase: f64 = rng.random_range(0.0..2.0 * PI);
    let mut data = Array2::zeros((n, n));
    for r in 0..n {
        for c in 0..n {
            let smooth: f64 = waves
                .iter()
                .map(|(fx, fy, ph)| (fx * c as f64 + fy * r as f64 + ph).sin())
                .sum::<f64>()
                / 3.0;
            let noise = rng.random_range(-0.02..0.02);
            let mut v = 0.14 + 0.06 * smooth + noise;
            for (m, sig) in masks.iter().zip(&signatures) {
                if m.is_set(r, c) {
                    let tex = sig.texture * ((r + 2 * c) as f64 * 0.9 + texture_phase).sin();
                    v = sig.mean + tex + noise;
                }
            }
            data[[r, c]] = v.clamp(0.0, 1.0);
        }
    }
    Ok((ImageGrid::new(data)?.quantized(), masks))
}

/// Lesions that receive a slot, in slot order.
pub fn slot_lesions(layout: &LesionLayout, style: ConversationStyle) -> Vec<usize> {
    match style {
        ConversationStyle::Explicit => layout.lesions.first().map(|_| vec![0]).unwrap_or_default(),
        ConversationStyle::Reasoning => layout.left_to_right(),
        ConversationStyle::Negative => Vec::new(),
    }
}

/// Explicit: the fixed segmentation instruction for the first lesion,
/// answered with a bare slot. Reasoning: the open question, answered with one
/// grounded slot per lesion left to right. Negative: the open question with a
/// slot-free answer.
pub fn make_conversation(layout: &LesionLayout, style: ConversationStyle) -> Result<Conversation> {
    match style {
        ConversationStyle::Explicit => {
            let first = layout
                .lesions
                .first()
                .ok_or_else(|| Error::InvalidArgument("explicit style needs at least one lesion".into()))?;
            Ok(Conversation::single(
                explicit_question(&first.class_name),
                GroundedText::new().with_text("Sure, it is ").with_seg("").with_text("."),
            ))
        }
        ConversationStyle::Reasoning => {
            let order = layout.left_to_right();
            if order.is_empty() {
                return Err(Error::InvalidArgument("reasoning style needs at least one lesion".into()));
            }
            let mut answer = GroundedText::new().with_text("The image shows ");
            for (k, &i) in order.iter().enumerate() {
                if k > 0 {
                    answer.push_text(if k + 1 == order.len() { " and " } else { ", " });
                }
                answer.push_seg(layout.lesions[i].class_name.clone());
            }
            answer.push_text(".");
            Ok(Conversation::single(REASONING_QUESTION, answer))
        }
        ConversationStyle::Negative => {
            if !layout.lesions.is_empty() {
                return Err(Error::InvalidArgument("negative style needs a lesion-free layout".into()));
            }
            Ok(Conversation::new(vec![
                Turn::user(REASONING_QUESTION),
                Turn::assistant(GroundedText::plain(NEGATIVE_RESPONSE)),
            ])?)
        }
    }
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Styles per sample index: exact counts from the mix, shuffled by seed.
pub fn assign_styles(cfg: &SynthConfig) -> Vec<ConversationStyle> {
    let counts = cfg.template_mix.counts(cfg.num_samples);
    let mut styles: Vec<ConversationStyle> = ConversationStyle::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&s, n)| std::iter::repeat_n(s, n))
        .collect();
    styles.shuffle(&mut sample_rng(cfg.seed, u64::MAX));
    styles
}

/// Sample `index` of the dataset; depends only on `(cfg, index)`.
pub fn generate_sample(cfg: &SynthConfig, index: usize, style: ConversationStyle) -> Result<Sample> {
    let mut rng = sample_rng(cfg.seed, index as u64);
    let n_lesions = match style {
        ConversationStyle::Negative => 0,
        _ => rng.random_range(1..=cfg.max_lesions_per_image),
    };
    let mut classes = cfg.lesion_classes.clone();
    classes.shuffle(&mut rng);
    classes.truncate(n_lesions);
    let layout = sample_layout(&classes, cfg.image_size, &mut rng)?;
    let (image, masks) = render_image(&layout, &mut rng)?;
    let conversation = make_conversation(&layout, style)?;
    let slots = slot_lesions(&layout, style);
    Ok(Sample {
        image_id: format!("synth-{}-{index:05}", cfg.seed),
        image,
        masks: slots.iter().map(|&i| masks[i].clone()).collect(),
        class_names: slots.iter().map(|&i| layout.lesions[i].class_name.clone()).collect(),
        conversation,
    })
}

pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate(1)?;
    assign_styles(cfg)
        .into_iter()
        .enumerate()
        .map(|(i, style)| generate_sample(cfg, i, style))
        .collect()
}
