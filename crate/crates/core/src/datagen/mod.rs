//! Dataset construction: playlist labeling, sessions, splits and the
//! synthetic generator.

mod io;
mod keywords;
mod playlists;
mod report;
mod sessions;
mod split;
mod synth;

pub use io::*;
pub use keywords::*;
pub use playlists::*;
pub use report::*;
pub use sessions::*;
pub use split::*;
pub use synth::*;
