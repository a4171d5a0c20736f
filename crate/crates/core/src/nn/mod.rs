//! A small CPU neural-network engine (manual backpropagation, Adam) and the
//! user-aware autotagger built on it.

mod gradcheck;
mod io;
mod ops;
mod train;
mod uamat;

pub use gradcheck::*;
pub use ops::Tensor;
pub use train::*;
pub use uamat::{
    loss, LayerKind, Mode, ModelMeta, Param, UamatConfig, UamatModel, AUDIO_EMBEDDING_DIM, BASE_FILTERS, BN_EPS,
    BN_MOMENTUM, JOINT_HIDDEN, LOSS_CLIP, USER_HIDDEN,
};
