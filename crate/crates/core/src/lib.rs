//! Event detection over a large type ontology.
//!
//! Three stages run in sequence: span-based trigger identification, a
//! late-interaction ranker that narrows the ontology to a top-K list per
//! sentence, and a yes/no classifier that picks one type per trigger. The
//! classifier is trained on clean mentions first and then on pseudo-labels
//! it assigns to partially labeled mentions.

pub mod checkpoint;
pub mod classifier;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod fixture;
pub mod io;
pub mod nn;
pub mod ontology;
pub mod pipeline;
pub mod ranker;
pub mod trigger;

pub use classifier::{ClassifierModel, ClsMention, QAPrompt, SelfLabelConfig};
pub use corpus::{Corpus, EventMention, Sentence, Span};
pub use encoder::{Encoder, EncoderConfig};
pub use error::{Error, Result};
pub use evaluation::{MetricReport, PredictedEvent, PredictionRecord, Prf};
pub use fixture::{Fixture, FixtureSpec};
pub use nn::TrainConfig;
pub use ontology::{EventType, FilterRules, Ontology, Relation, RolesetId, TypeId};
pub use pipeline::{PipelineConfig, Predictor, Stage};
pub use ranker::{EmbeddingBag, RankedType, RankerModel, TypeIndex};
pub use trigger::{SpanScore, TriggerModel};
