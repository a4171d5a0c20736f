//! Metrics, the three evaluation protocols and their reports.

mod metrics;
mod protocol;
mod report;

pub use metrics::*;
pub use protocol::*;
pub use report::render_grid;
