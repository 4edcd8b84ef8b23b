//! Deterministic numeric substrate: dense linear algebra, edit distance,
//! mini-batch k-means, a small MLP with analytic backprop, Adam, and named
//! reproducible random streams.

mod adam;
mod dense;
mod kmeans;
mod mlp;
mod rng;
mod text;

pub use adam::AdamState;
pub use dense::{cosine_similarity, dot, norm, normalize, squared_distance, DenseMatrix};
pub use kmeans::{default_cluster_count, kmeans_cluster, KMeansModel};
pub use mlp::{sigmoid, Activation, ForwardTrace, Layer, Mlp, MlpGradients};
pub use rng::RngStream;
pub use text::{levenshtein, levenshtein_below};
