//! Scenario reconstruction from partially observed SoC signal traces.

pub mod catalog;
pub mod flowspec;
pub mod lpn;
pub mod report;
pub mod template;
pub mod scenario;
pub mod select;
pub mod sim;
pub mod trace;
