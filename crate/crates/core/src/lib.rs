pub mod autograd;
pub mod checkpoint;
pub mod codec;
pub mod dataset;
pub mod error;
pub mod gcu;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod pg;
pub mod pipeline;
pub mod protocol;
pub mod session;
pub mod synth;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use codec::{EncodedMask, MaskFormat, Rle, SpanRecord};
pub use grid::{ImageGrid, MaskGrid};
pub use model::{MedSegModel, ModelConfig, Prediction};
pub use protocol::{Conversation, GroundedText, Role, Sample, SegSpan, Turn, TurnRecord};
