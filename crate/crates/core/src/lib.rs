//! Privacy-preserving 3D face mesh recognition.
//!
//! The pipeline turns a triangular face mesh into a protected biometric
//! template in four stages:
//!
//! 1. [`mesh`] / [`geometry`] — load or synthesize a mesh, normalize it, and
//!    compute ten per-vertex geometric descriptors.
//! 2. [`spectral`] — build the mesh graph, eigendecompose its normalized
//!    Laplacian, and project the descriptors onto the lowest-frequency
//!    eigenvectors (truncated graph Fourier transform).
//! 3. [`neural`] — refine the truncated spectral coefficients into a unit-norm
//!    embedding with a small graph convolutional network trained under a
//!    siamese contrastive loss.
//! 4. [`protect`] — run a key-conditioned forward diffusion over the embedding
//!    to produce an irreversible, renewable, unlinkable template. Matching is
//!    cosine similarity against a threshold in the protected domain.
//!
//! [`eval`] measures accuracy (EER / F1 / ROC / PR), template entropy and
//! mutual information, and cross-key correlation; [`attack`] mounts a
//! white-box pre-image attack against the protection; [`service`] is a small
//! newline-delimited-JSON TCP server that stores only protected templates;
//! [`pipeline`] wires the stages together behind a single config.

pub mod attack;
pub mod eval;
pub mod geometry;
pub mod linalg;
pub mod mesh;
pub mod neural;
pub mod pipeline;
pub mod protect;
pub mod rng;
pub mod service;
pub mod spectral;
