//! Core library: distill expert knowledge about logs from an LLM via a
//! multi-expert collaboration loop, inject it into a small bi-encoder through
//! two knowledge-enhanced pre-training objectives, and fine-tune/evaluate the
//! encoder on downstream log-analysis tasks.

pub use ndarray;

pub mod corpus;
pub mod distill;
pub mod encoder;
pub mod finetune;
pub mod gateway;
pub mod metrics;
pub mod pretrain;

pub use corpus::{KnowledgePair, LogRecord, LogTemplate, Split, TaskDataset, TaskItem, TaskKind};
pub use distill::{ContrastiveExampleSet, DistillationTrace, EvaluationVerdict, RoleCard, RoleCards};
pub use encoder::{EncodedSequence, EncoderDims, EncoderParams, Vocab};
pub use finetune::{FineTuneConfig, PairHead, SingleHead};
pub use gateway::{ChatMessage, ChatRequest, Gateway, MockScript};
pub use pretrain::{BiEncoder, KpmParams, PretrainBatch, PretrainConfig};
