//! Retrieval, probe classification, text-overlap and ordinal metrics.

mod classify;
pub mod external;
mod ordinal;
mod probe;
mod retrieval;
mod text_metrics;

use thiserror::Error;

use crate::labeler::ActivityLabel;

pub use classify::{classify_metrics, ClassScores, ClassifyReport};
pub use external::{corpus_score, MetricProvider, SubprocessMetric};
pub use ordinal::{
    chance_within1_prevalence, chance_within1_uniform, label_consistency, monte_carlo_within1, ordinal_eval,
    prevalence, ConsistencyReport, OrdinalReport,
};
pub use probe::{balanced_class_weights, probe_fit, ProbeConfig, ProbeModel};
pub use retrieval::{
    bidirectional_retrieval, first_equivalent_ranks, metrics_from_ranks, random_hit_probability, random_mrr,
    random_recall, random_reciprocal_rank,
    retrieval_eval, EquivalenceClasses, RetrievalMetrics, RetrievalReport,
};
pub use text_metrics::{bleu_sentence, rouge_l_f1};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("query {0} has no equivalent item in the gallery")]
    NoPositiveInGallery(usize),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("class {0} absent from training labels")]
    DegenerateLabels(ActivityLabel),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("metric provider {0}")]
    Provider(String),
}
