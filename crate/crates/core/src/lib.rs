pub mod agent;
pub mod data;
pub mod diagnostics;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod kg;
pub mod numerics;
pub mod pipeline;
pub mod selector;
pub mod session;

pub use agent::{AnswerSource, BeamConfig, RankedAnswer, RankedAnswerList, TraceStep};
pub use error::{Error, Result};
pub use eval::{EvalReport, Metrics};
pub use kg::{EntityId, KnowledgeGraph, RelationId};
pub use pipeline::{ModelBundle, PipelineConfig};
pub use session::{ConversationState, Engine, TurnLog};
