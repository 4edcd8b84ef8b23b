//! Data-curation engine for multimodal image-text corpora.
//!
//! The engine takes a corpus of records with precomputed image and text
//! embeddings and produces a curated subset in four phases:
//!
//! 1. **Deduplication** — metadata collisions, cluster-quota trimming, and
//!    pairwise structural/semantic redundancy removal.
//! 2. **Characterization** — a learned quality score trained from weak
//!    supervision, a per-task relevance profile against prototype
//!    embeddings, and a cluster-population diversity factor.
//! 3. **Valuation** — a data value network scores every sample from its
//!    characterization profile.
//! 4. **Feedback** — sampled subsets train a lightweight proxy model whose
//!    downstream evaluation drives policy-gradient updates of the value
//!    network; thresholding the converged scores yields the final subset.
//!
//! All stochastic steps draw from named seeded streams, so a run is a pure
//! function of its configuration and master seed.

pub mod cli;
pub mod corpus;
pub mod dedup;
pub mod diversity;
pub mod dvn;
pub mod error;
pub mod fdo;
pub mod numeric;
pub mod proxy;
pub mod quality;
pub mod relevance;
pub mod synth;

pub use error::{Result, TadsError};
