//! Cluster-contractive t-SNE.
//!
//! The embedding objective is the usual t-SNE divergence `KL(P_X, Q_Y)` plus
//! `lambda * Tr(V^T L_Y V)`, where `L_Y` is the symmetric normalized Laplacian
//! of the embedding-space kernel graph and `V` holds its `k_hat` smallest
//! eigenvectors. Driving those eigenvalues towards zero pulls the layout
//! apart into (nearly) disconnected, compact groups.
//!
//! Module map:
//!
//! | module        | contents                                                     |
//! |---------------|--------------------------------------------------------------|
//! | [`affinity`]  | perplexity-calibrated input affinities `P_X`                 |
//! | [`spectral`]  | normalized Laplacians, eigenpairs, eigengap `k_hat`, init    |
//! | [`objective`] | loss and analytical gradients (KL + Laplacian regularizer)   |
//! | [`optimizer`] | majorization-minimization gradient loop, full and mini-batch |
//! | [`scale`]     | k-means landmarks and the out-of-sample MLP regressor        |
//! | [`metrics`]   | k-NN accuracy, NMI, silhouette, Davies-Bouldin               |
//! | [`io`]        | CSV/binary ingestion, embedding output, SVG plots, manifests |

pub mod affinity;
mod eigen;
pub mod error;
pub mod io;
pub mod metrics;
pub mod objective;
pub mod optimizer;
pub mod scale;
pub mod spectral;

pub use error::{Error, Result};
