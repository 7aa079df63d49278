//! Grounded-text wire format, conversations and samples.
//!
//! An assistant answer is a sequence of plain-text chunks and segmentation
//! slots. A slot is written either as `<p> phrase </p> [SEG]` (grounded) or
//! as a bare `[SEG]`. Every `[SEG]` marker is exactly one slot, and slots are
//! numbered in textual order.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, MaskGrid, MaskRole};

pub const P_OPEN: &str = "<p>";
pub const P_CLOSE: &str = "</p>";
pub const SEG: &str = "[SEG]";

const MARKERS: [&str; 3] = [P_OPEN, P_CLOSE, SEG];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegSpan {
    /// Display phrase; empty for a bare slot.
    pub phrase: String,
    pub slot_index: usize,
}

impl SegSpan {
    pub fn is_bare(&self) -> bool {
        self.phrase.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Chunk {
    Text(String),
    Seg(SegSpan),
}

/// Ordered text/slot chunks of one assistant answer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct GroundedText {
    chunks: Vec<Chunk>,
}

impl GroundedText {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn plain(text: impl Into<String>) -> Self {
        let mut g = Self::new();
        g.push_text(text);
        g
    }

    /// Chunks are taken as given; call [`GroundedText::check`] when they come
    /// from an untrusted source.
    pub fn from_chunks(chunks: Vec<Chunk>) -> Self {
        Self { chunks }
    }

    /// Appends text, merging with a trailing text chunk. Empty text is dropped.
    pub fn push_text(&mut self, text: impl Into<String>) {
        let text = text.into();
        if text.is_empty() {
            return;
        }
        if let Some(Chunk::Text(prev)) = self.chunks.last_mut() {
            prev.push_str(&text);
        } else {
            self.chunks.push(Chunk::Text(text));
        }
    }

    /// Appends a slot with the next free slot index.
    pub fn push_seg(&mut self, phrase: impl Into<String>) {
        let slot_index = self.slot_count();
        self.chunks.push(Chunk::Seg(SegSpan {
            phrase: phrase.into(),
            slot_index,
        }));
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.push_text(text);
        self
    }

    pub fn with_seg(mut self, phrase: impl Into<String>) -> Self {
        self.push_seg(phrase);
        self
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn spans(&self) -> impl Iterator<Item = &SegSpan> {
        self.chunks.iter().filter_map(|c| match c {
            Chunk::Seg(s) => Some(s),
            Chunk::Text(_) => None,
        })
    }

    pub fn slot_count(&self) -> usize {
        self.spans().count()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// Checks the canonical-form invariants: dense slot indices in order, no
    /// empty or adjacent text chunks, no markers inside text or phrases, and
    /// trimmed phrases.
    pub fn check(&self) -> Result<()> {
        let mut next_slot = 0;
        let mut prev_text = false;
        for (i, chunk) in self.chunks.iter().enumerate() {
            match chunk {
                Chunk::Text(t) => {
                    if t.is_empty() {
                        return Err(invalid(format!("chunk {i}: empty text")));
                    }
                    if prev_text {
                        return Err(invalid(format!("chunk {i}: adjacent text chunks")));
                    }
                    if contains_marker(t) {
                        return Err(invalid(format!("chunk {i}: text contains a protocol marker")));
                    }
                    prev_text = true;
                }
                Chunk::Seg(s) => {
                    if s.slot_index != next_slot {
                        return Err(invalid(format!(
                            "chunk {i}: slot index {} where {next_slot} expected",
                            s.slot_index
                        )));
                    }
                    if contains_marker(&s.phrase) {
                        return Err(invalid(format!("chunk {i}: phrase contains a protocol marker")));
                    }
                    if s.phrase.trim() != s.phrase {
                        return Err(invalid(format!("chunk {i}: phrase is not trimmed")));
                    }
                    next_slot += 1;
                    prev_text = false;
                }
            }
        }
        Ok(())
    }
}

fn invalid(msg: String) -> Error {
    Error::InvalidArgument(msg)
}

fn contains_marker(s: &str) -> bool {
    MARKERS.iter().any(|m| s.contains(m))
}

impl fmt::Display for GroundedText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_grounded(self))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// Orphan or nested markers are errors.
    #[default]
    Strict,
    /// Orphan `<p>` / `</p>` markers are kept as plain text. `[SEG]` is
    /// always a slot.
    Lenient,
}

/// Strict parse of one assistant answer.
pub fn parse_grounded(text: &str) -> Result<GroundedText> {
    parse_grounded_with(text, ParseMode::Strict)
}

pub fn parse_grounded_with(text: &str, mode: ParseMode) -> Result<GroundedText> {
    Parser::new(text, mode).run()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Marker {
    Open,
    Close,
    Seg,
}

/// Splits `text` into `(offset, piece)` where a piece is either a marker or the
/// text between markers.
fn lex(text: &str) -> Vec<(usize, Result<Marker, &str>)> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < text.len() {
        let rest = &text[pos..];
        let next = MARKERS
            .iter()
            .enumerate()
            .filter_map(|(k, m)| rest.find(m).map(|at| (at, k)))
            .min();
        match next {
            Some((at, k)) => {
                if at > 0 {
                    out.push((pos, Err(&rest[..at])));
                }
                let marker = [Marker::Open, Marker::Close, Marker::Seg][k];
                out.push((pos + at, Ok(marker)));
                pos += at + MARKERS[k].len();
            }
            None => {
                out.push((pos, Err(rest)));
                break;
            }
        }
    }
    out
}

struct Parser<'a> {
    text: &'a str,
    mode: ParseMode,
    out: GroundedText,
    /// Byte offset of an unclosed `<p>` and the phrase gathered so far.
    open: Option<(usize, String)>,
    /// A closed `<p> .. </p>` waiting for its `[SEG]`: offset, phrase, and the
    /// whitespace seen after `</p>`.
    closed: Option<(usize, String, String)>,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str, mode: ParseMode) -> Self {
        Self {
            text,
            mode,
            out: GroundedText::new(),
            open: None,
            closed: None,
        }
    }

    fn fail(&self, offset: usize, reason: &str) -> Result<()> {
        match self.mode {
            ParseMode::Strict => Err(Error::MalformedMarkup {
                offset,
                reason: reason.to_string(),
            }),
            ParseMode::Lenient => Ok(()),
        }
    }

    fn flush_open(&mut self) {
        if let Some((_, phrase)) = self.open.take() {
            self.out.push_text(format!("{P_OPEN}{phrase}"));
        }
    }

    fn flush_closed(&mut self) {
        if let Some((_, phrase, ws)) = self.closed.take() {
            self.out.push_text(format!("{P_OPEN}{phrase}{P_CLOSE}{ws}"));
        }
    }

    fn run(mut self) -> Result<GroundedText> {
        let text = self.text;
        for (offset, piece) in lex(text) {
            match piece {
                Err(plain) => {
                    if let Some((_, phrase)) = self.open.as_mut() {
                        phrase.push_str(plain);
                    } else if let Some((at, _, ws)) = self.closed.as_mut() {
                        if plain.trim().is_empty() {
                            ws.push_str(plain);
                        } else {
                            let at = *at;
                            self.fail(at, "grounded phrase is not followed by [SEG]")?;
                            self.flush_closed();
                            self.out.push_text(plain);
                        }
                    } else {
                        self.out.push_text(plain);
                    }
                }
                Ok(Marker::Open) => {
                    if self.open.is_some() {
                        self.fail(offset, "nested <p>")?;
                        self.flush_open();
                    }
                    if let Some((at, _, _)) = self.closed {
                        self.fail(at, "grounded phrase is not followed by [SEG]")?;
                        self.flush_closed();
                    }
                    self.open = Some((offset, String::new()));
                }
                Ok(Marker::Close) => match self.open.take() {
                    Some((at, phrase)) => self.closed = Some((at, phrase, String::new())),
                    None => {
                        self.fail(offset, "</p> without matching <p>")?;
                        self.flush_closed();
                        self.out.push_text(P_CLOSE);
                    }
                },
                Ok(Marker::Seg) => {
                    if self.open.is_some() {
                        self.fail(offset, "[SEG] inside an open <p>")?;
                        self.flush_open();
                    }
                    match self.closed.take() {
                        Some((_, phrase, _)) => self.out.push_seg(phrase.trim()),
                        None => self.out.push_seg(""),
                    }
                }
            }
        }
        if let Some((at, _)) = self.open {
            self.fail(at, "<p> without matching </p>")?;
            self.flush_open();
        }
        if let Some((at, _, _)) = self.closed {
            self.fail(at, "grounded phrase is not followed by [SEG]")?;
            self.flush_closed();
        }
        Ok(self.out)
    }
}

/// Canonical form: `<p> {phrase} </p> [SEG]` for grounded slots, `[SEG]` for
/// bare ones, text verbatim.
pub fn serialize_grounded(gt: &GroundedText) -> String {
    let mut out = String::new();
    for chunk in &gt.chunks {
        match chunk {
            Chunk::Text(t) => out.push_str(t),
            Chunk::Seg(s) if s.is_bare() => out.push_str(SEG),
            Chunk::Seg(s) => {
                out.push_str(P_OPEN);
                out.push(' ');
                out.push_str(&s.phrase);
                out.push(' ');
                out.push_str(P_CLOSE);
                out.push(' ');
                out.push_str(SEG);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Turn {
    pub role: Role,
    pub content: GroundedText,
}

impl Turn {
    /// User turns are stored as a single text chunk; any `[SEG]`-looking
    /// content makes the conversation invalid.
    pub fn user(text: impl Into<String>) -> Self {
        let text = text.into();
        let content = parse_grounded_with(&text, ParseMode::Lenient)
            .unwrap_or_else(|_| GroundedText::plain(text));
        Self {
            role: Role::User,
            content,
        }
    }

    pub fn assistant(content: GroundedText) -> Self {
        Self {
            role: Role::Assistant,
            content,
        }
    }

    pub fn text(&self) -> String {
        serialize_grounded(&self.content)
    }
}

/// Serialized turn: `{role, text}` with `text` in canonical grounded form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub role: Role,
    pub text: String,
}

impl From<&Turn> for TurnRecord {
    fn from(t: &Turn) -> Self {
        Self {
            role: t.role,
            text: t.text(),
        }
    }
}

impl TryFrom<&TurnRecord> for Turn {
    type Error = Error;

    fn try_from(r: &TurnRecord) -> Result<Self> {
        Ok(match r.role {
            Role::User => Turn::user(r.text.clone()),
            Role::Assistant => Turn::assistant(parse_grounded(&r.text)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Conversation {
    turns: Vec<Turn>,
}

impl Conversation {
    pub fn new(turns: Vec<Turn>) -> Result<Self> {
        let conv = Self { turns };
        if let Some(v) = conv.violations().into_iter().next() {
            return Err(Error::InvalidArgument(v.to_string()));
        }
        Ok(conv)
    }

    /// Builds without checking role order; used for partially built or
    /// externally sourced conversations that are validated later.
    pub fn from_turns_unchecked(turns: Vec<Turn>) -> Self {
        Self { turns }
    }

    pub fn single(user: impl Into<String>, assistant: GroundedText) -> Self {
        Self {
            turns: vec![Turn::user(user), Turn::assistant(assistant)],
        }
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn push(&mut self, turn: Turn) {
        self.turns.push(turn);
    }

    pub fn assistant_turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(|t| t.role == Role::Assistant)
    }

    pub fn to_records(&self) -> Vec<TurnRecord> {
        self.turns.iter().map(TurnRecord::from).collect()
    }

    pub fn from_records(records: &[TurnRecord]) -> Result<Self> {
        let turns = records
            .iter()
            .map(Turn::try_from)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_turns_unchecked(turns))
    }

    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.turns.is_empty() {
            out.push(Violation::EmptyConversation);
        }
        for (i, turn) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if turn.role != expected {
                out.push(Violation::RoleOrder { turn: i });
            }
            if turn.role == Role::User && turn.content.slot_count() > 0 {
                out.push(Violation::UserTurnHasSlots { turn: i });
            }
        }
        out
    }
}

/// Total slots across assistant turns.
pub fn count_seg_slots(c: &Conversation) -> usize {
    c.assistant_turns().map(|t| t.content.slot_count()).sum()
}

/// Spans across assistant turns in global order (turn order, then position).
pub fn global_spans(c: &Conversation) -> Vec<SegSpan> {
    c.assistant_turns()
        .flat_map(|t| t.content.spans().cloned())
        .collect()
}

/// One dataset record: image, per-slot masks, and the conversation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_id: String,
    pub image: ImageGrid,
    /// One mask per slot across all assistant turns, in global textual order.
    pub masks: Vec<MaskGrid>,
    pub conversation: Conversation,
    /// Parallel to `masks`.
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    EmptyConversation,
    RoleOrder { turn: usize },
    UserTurnHasSlots { turn: usize },
    SlotMaskCountMismatch { slots: usize, masks: usize },
    ClassNameCountMismatch { class_names: usize, masks: usize },
    ShapeMismatch { mask: usize, mask_dims: (usize, usize), image_dims: (usize, usize) },
    NonBinaryMask { mask: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyConversation => write!(f, "conversation has no turns"),
            Violation::RoleOrder { turn } => {
                write!(f, "turn {turn}: roles must alternate starting with user")
            }
            Violation::UserTurnHasSlots { turn } => {
                write!(f, "turn {turn}: user turn contains [SEG] slots")
            }
            Violation::SlotMaskCountMismatch { slots, masks } => {
                write!(f, "{slots} [SEG] slots but {masks} masks")
            }
            Violation::ClassNameCountMismatch { class_names, masks } => {
                write!(f, "{class_names} class names but {masks} masks")
            }
            Violation::ShapeMismatch {
                mask,
                mask_dims,
                image_dims,
            } => write!(
                f,
                "mask {mask}: {}x{} does not match image {}x{}",
                mask_dims.0, mask_dims.1, image_dims.0, image_dims.1
            ),
            Violation::NonBinaryMask { mask } => write!(f, "mask {mask}: not a binary mask"),
        }
    }
}

pub fn validate_sample(s: &Sample) -> Vec<Violation> {
    let mut out = s.conversation.violations();
    let slots = count_seg_slots(&s.conversation);
    if slots != s.masks.len() {
        out.push(Violation::SlotMaskCountMismatch {
            slots,
            masks: s.masks.len(),
        });
    }
    if s.class_names.len() != s.masks.len() {
        out.push(Violation::ClassNameCountMismatch {
            class_names: s.class_names.len(),
            masks: s.masks.len(),
        });
    }
    let image_dims = s.image.dims();
    for (i, m) in s.masks.iter().enumerate() {
        if m.dims() != image_dims {
            out.push(Violation::ShapeMismatch {
                mask: i,
                mask_dims: m.dims(),
                image_dims,
            });
        }
        if m.role() != MaskRole::Binary {
            out.push(Violation::NonBinaryMask { mask: i });
        }
    }
    out
}
