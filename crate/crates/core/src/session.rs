//! Chat session exports: the transcript a client saw, with per-slot masks,
//! in a form that converts back into a dataset sample.

use serde::{Deserialize, Serialize};

use crate::codec::{image_from_png_base64, SpanRecord};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, MaskGrid};
use crate::protocol::{parse_grounded, validate_sample, Conversation, Role, Sample, Turn};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionTurn {
    pub role: Role,
    /// Serialized grounded text.
    pub text: String,
    #[serde(default)]
    pub spans: Vec<SpanRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionExport {
    /// Identifier or content hash of the image.
    #[serde(default)]
    pub image_id: String,
    /// Base64 PNG; optional since a client may export only the transcript.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default)]
    pub turns: Vec<SessionTurn>,
}

/// Problems that keep `s` from being re-ingested. An empty session is valid.
pub fn session_issues(s: &SessionExport) -> Vec<String> {
    let mut out = Vec::new();
    let image = match &s.image {
        Some(b64) => match image_from_png_base64(b64, usize::MAX) {
            Ok(img) => Some(img),
            Err(e) => {
                out.push(format!("image: {e}"));
                None
            }
        },
        None => None,
    };
    let mut dims = image.as_ref().map(ImageGrid::dims);
    for (i, turn) in s.turns.iter().enumerate() {
        let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
        if turn.role != expected {
            out.push(format!("turn {i}: roles must alternate starting with user"));
        }
        if turn.role == Role::User {
            if turn.text.contains(crate::protocol::SEG) {
                out.push(format!("turn {i}: user turn contains [SEG] slots"));
            }
            if !turn.spans.is_empty() {
                out.push(format!("turn {i}: user turn carries spans"));
            }
            continue;
        }
        let text = match parse_grounded(&turn.text) {
            Ok(t) => t,
            Err(e) => {
                out.push(format!("turn {i}: {e}"));
                continue;
            }
        };
        if text.slot_count() != turn.spans.len() {
            out.push(format!(
                "turn {i}: {} [SEG] slots but {} spans",
                text.slot_count(),
                turn.spans.len()
            ));
        }
        for (k, (span, slot)) in turn.spans.iter().zip(text.spans()).enumerate() {
            if span.slot_index != slot.slot_index || span.phrase != slot.phrase {
                out.push(format!("turn {i} span {k}: does not match slot {}", slot.slot_index));
            }
            match span.mask.decode() {
                Ok(m) => {
                    if m.area() != span.area_px {
                        out.push(format!("turn {i} span {k}: area_px {} but mask has {}", span.area_px, m.area()));
                    }
                    match dims {
                        Some(d) if d != m.dims() => out.push(format!(
                            "turn {i} span {k}: mask {}x{} does not match {}x{}",
                            m.height(),
                            m.width(),
                            d.0,
                            d.1
                        )),
                        Some(_) => {}
                        None => dims = Some(m.dims()),
                    }
                }
                Err(e) => out.push(format!("turn {i} span {k}: {e}")),
            }
        }
    }
    out
}

/// Converts a valid, non-empty session with an image into a sample. Spans
/// carry no class, so class names are the slot phrases.
pub fn session_to_sample(s: &SessionExport) -> Result<Sample> {
    if let Some(first) = session_issues(s).into_iter().next() {
        return Err(Error::Dataset(first));
    }
    let image = match &s.image {
        Some(b64) => image_from_png_base64(b64, usize::MAX)?,
        None => return Err(Error::Dataset("session has no image".into())),
    };
    let mut turns = Vec::new();
    let mut masks: Vec<MaskGrid> = Vec::new();
    let mut class_names = Vec::new();
    for t in &s.turns {
        match t.role {
            Role::User => turns.push(Turn::user(t.text.clone())),
            Role::Assistant => {
                turns.push(Turn::assistant(parse_grounded(&t.text)?));
                for span in &t.spans {
                    masks.push(span.mask.decode()?);
                    class_names.push(span.phrase.clone());
                }
            }
        }
    }
    let sample = Sample {
        image_id: s.image_id.clone(),
        image,
        masks,
        conversation: Conversation::new(turns)?,
        class_names,
    };
    if let Some(v) = validate_sample(&sample).into_iter().next() {
        return Err(Error::Dataset(v.to_string()));
    }
    Ok(sample)
}
