//! Geo-aware generative recommender.
//!
//! Items are tokenized into geography-aware semantic IDs by residual k-means,
//! an encoder-decoder sequence model with geo-aware self-attention and a
//! neighbor-aware location prompt predicts the next semantic ID, beam search
//! generates recommendations, and preference optimization post-trains the
//! model against geographic and monetary-value rewards.

pub mod numerics;

/// CLI entry point; returns the process exit code.
pub fn run_cli() -> i32 {
    0
}
