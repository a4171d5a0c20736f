//! The deployed side: an offline tag store filled by the autotagger, real-time
//! situation ranking by the situation predictor, and session generation,
//! served over HTTP.

mod api;
mod session;
mod store;

pub use api::*;
pub use session::*;
pub use store::*;
