//! Clusterability scoring.

pub mod kmeans;
pub mod scott;

pub use kmeans::{kmeans, KMeansConfig, KMeansResult};
pub use scott::{align_embeddings, layer_score_top_rho, scatter_matrices, scott_score, scott_score_fixed, ScoreGrid};
