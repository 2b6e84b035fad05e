//! Evaluation harness for joint visual and text prompting on VQA benchmarks.
//!
//! The pipeline extracts key concepts from a question, localizes them with a
//! detection backend, composites visual markers onto the image, wraps the
//! question in a structured answer prompt, and scores parsed answers with the
//! MME, MMBench and POPE metrics. Every remote call goes through a cassette so
//! that runs can be replayed offline and bit-for-bit.

pub mod cache;
pub mod cassette;
pub mod concepts;
pub mod dataset;
pub mod detector;
pub mod digest;
pub mod model_client;
pub mod pipeline;
pub mod render;
pub mod scoring;
pub mod tprompt;
pub mod transport;

pub use concepts::{ConceptMode, ConceptSet};
pub use dataset::{Dataset, PopeQuery, PopeSetting, TaskKind, VQAInstance};
pub use detector::{Detection, DetectionSet, DetectorKind};
pub use model_client::{ChatRequest, ModelClient};
pub use pipeline::{RunConfig, RunManifest};
pub use render::{AnnotatedImage, RenderConfig, VPromptStyle};
pub use scoring::{MetricsReport, RunRecord};
pub use tprompt::{AnswerPrompt, ParsedAnswer, PromptStrategy};
