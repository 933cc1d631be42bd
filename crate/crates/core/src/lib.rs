//! penmark: writer identification and retrieval for handwritten documents.
//!
//! The pipeline turns page images into ranked retrieval results:
//!
//! 1. [`page`] — binarize pages, locate handwriting contours, cut 32×32 patches.
//! 2. [`descriptor`] — produce local descriptors per patch (seeded orthonormal
//!    projection, or externally computed descriptors loaded from `DESC1` files).
//! 3. [`netvlad`] — embed each descriptor against a learned codebook with
//!    softmax soft assignment (residual encoding).
//! 4. [`training`] — learn the codebook parameters with semi-hard triplet loss
//!    and an Adamax optimizer.
//! 5. [`encoding`] — aggregate per-document embeddings (sum or generalized
//!    max-pooling), power-normalize, and PCA-whiten into one global descriptor.
//! 6. [`retrieval`] — leave-one-out cosine ranking, krNN query expansion
//!    re-ranking, and Top-1 / Hard-N / mAP evaluation.
//!
//! Everything is deterministic: all randomness flows through
//! [`numerics::SeededRng`], and equal seeds produce bit-identical results on
//! every platform.

pub mod descriptor;
pub mod encoding;
pub mod netvlad;
pub mod numerics;
pub mod page;
pub mod retrieval;
pub mod synth;
pub mod training;

pub use numerics::{Matrix, SeededRng};
