//! OS state layout and shared OS plumbing.

pub mod clock;
pub mod schema;

pub use clock::{Clock, ManualClock, SystemClock};
