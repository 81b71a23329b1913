//! Synthetic document-level entity and relation annotation, verification,
//! demonstration retrieval and in-context extraction.

pub mod annotator;
pub mod demo_store;
pub mod eval;
pub mod gateway;
pub mod inference;
pub mod markup;
pub mod model;
pub mod pool;
pub mod postprocess;
pub mod stats;
pub mod template;
