//! The simplified differentiable Siamese tracker: a two-stage point-set
//! feature extractor, template-to-search feature fusion, and a Hough-voting
//! proposal head, plus the four-term training loss, an adaptive-moment
//! optimizer and checkpoint I/O.

mod checkpoint;
mod loss;
mod network;
mod optim;
mod params;
pub mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use loss::{compute_losses, foreground_mask, BoxLoss, ClsLoss, LossBreakdown, LossConfig, LossVars};
pub use network::{ball_query, farthest_point_sample, ForwardPass, NetConfig, Network, ProposalOutput};
pub use optim::{optimizer_step, AdamConfig, AdamState};
pub use params::{collect_param_grads, ParamGrads, ParamStore};
pub use tape::{Gradients, ParamId, Tape, ValueGrid, Var};

use std::path::PathBuf;

use crate::geom::{Box3D, PointCloud};

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("feature extraction needs at least 8 points and a multiple of 8, got {0}")]
    TooFewPoints(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no recorded graph for backward")]
    NoRecordedGraph,
    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: [usize; 2], found: [usize; 2] },
    #[error("{path}: checkpoint version {found}, expected {expected}")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: corrupt checkpoint: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Forward pass plus the four-term loss for one template/search pair with
/// ground truth `gt` in the search frame. Proposal boxes take `gt`'s size,
/// which is the template box size.
pub fn forward_with_loss(
    net: &Network,
    tape: &mut Tape,
    template: &PointCloud,
    search: &PointCloud,
    gt: &Box3D,
    config: &LossConfig,
) -> Result<(ForwardPass, LossVars), NetError> {
    let pass = net.forward(tape, template, search, gt.size)?;
    let mask = foreground_mask(&pass.proposals.seeds, gt);
    let losses = compute_losses(tape, &pass.proposals, gt, &mask, config);
    Ok((pass, losses))
}
