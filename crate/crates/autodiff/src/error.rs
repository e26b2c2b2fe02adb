//! Error type for tape recording and reverse passes.

use crate::tape::NodeId;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("node {0:?} is not on the active tape")]
    InvalidNode(NodeId),

    #[error("backward requires a 1x1 loss node, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("non-finite partial encountered at node {0:?}")]
    NonFinitePartial(NodeId),

    #[error("parameter value at flat index {index} is not finite")]
    NonFiniteParam { index: usize },

    #[error("parameter layout gap at block '{name}': offset {offset}, expected {expected}")]
    LayoutGap {
        name: String,
        offset: usize,
        expected: usize,
    },
}
