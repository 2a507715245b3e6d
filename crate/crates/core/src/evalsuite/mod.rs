//! Embedding export and evaluation: cross-domain retrieval, one-shot
//! classification, match filtering and 2-D projection.

mod fewshot;
mod filter;
mod project;
mod retrieval;
mod table;

pub use fewshot::{few_shot_eval, FewShotReport, DEFAULT_REPEATS};
pub use filter::{aggregate_triples, bootstrap_filter, match_scores, CandidatePair, DEFAULT_THRESHOLD};
pub use project::{project2d, write_projection_csv, Projection};
pub use retrieval::{
    all_directions, metric_oracle, rank_gallery, retrieval_eval, RetrievalReport, DIRECTIONS, LIST_KS, RECALL_KS,
};
pub use table::{export_embeddings, sidecar_path, EmbeddingTable, RowMeta, EMBEDDING_MAGIC, EMBEDDING_VERSION};
