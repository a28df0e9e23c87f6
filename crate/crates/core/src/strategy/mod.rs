//! Strategy summarization, selection and clustering.

pub mod cluster;
pub mod similarity;
pub mod summarize;

pub use cluster::{cluster_summaries, dbscan, medoid, prune_clusters, Clustering};
pub use similarity::{cosine_similarity, SimilarityError, SimilarityMatrix};
pub use summarize::{select_summary, summarize_all, summarize_commit, summary_prompt, EmbedderInfo, SummaryBatch};
