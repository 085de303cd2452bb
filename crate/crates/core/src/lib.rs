//! Context-aware LLM pipeline building blocks.
//!
//! * [`schema`]: hierarchical category schemas with mandatory fallbacks.
//! * [`decomp`]: level-by-level structured classification of prompts.
//! * [`filter`]: relevance filtering of conversation context.
//! * [`backend`]: OpenAI-compatible HTTP client and deterministic mocks.
//! * [`synth`]: seeded synthetic prompt and conversation datasets.
//! * [`eval`]: Exponential Consistency Index scoring and the benchmark runner.

pub mod backend;
pub mod decomp;
pub mod embedding;
pub mod error;
pub mod filter;
pub mod hash;
pub mod schema;
pub mod eval;
pub mod synth;

pub use backend::{BackendConfig, CompletionRequest, EmbeddingBackend, LlmBackend, ResponseFormat};
pub use decomp::{decompose, DecomposeOptions, DecompositionRecord, LevelConstraint, ParsedLevelOutput};
pub use embedding::{cosine, EmbeddingVector};
pub use error::{Error, Result};
pub use eval::{eci, EciParams, EntryScore, EvalReport, ItemTally};
pub use filter::{ContextSegment, ConversationTree, FilterMethod, FilterResult, Speaker};
pub use schema::{load_schema, CategoryId, DecompositionSchema, FieldSpec, SchemaNode};
