//! Conversation corpus model, tokenizer, reformulation providers and the
//! synthetic corpus generator.

pub mod corpus;
pub mod reformulate;
pub mod synth;
pub mod vocab;

pub use corpus::{Conversation, ConversationRecord, LoadReport, Turn, TurnRecord};
pub use reformulate::{ReformulationMode, ReformulationProvider};
pub use synth::{synth_generate, synth_kg, SynthConfig, SynthCorpus};
pub use vocab::{tokenize, Question, Vocabulary};
