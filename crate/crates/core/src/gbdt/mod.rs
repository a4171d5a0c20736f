//! Situation predictor: gradient-boosted trees with a softmax objective,
//! plus decision-tree and nearest-neighbor baselines.

mod baselines;
mod forest;
mod train;

pub use baselines::*;
pub use forest::*;
pub use train::*;
