//! File formats, image export and experiment drivers around `proxnf-core`.

pub mod export;
pub mod format;
pub mod study;
