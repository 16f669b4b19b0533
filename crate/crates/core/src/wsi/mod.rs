//! Hierarchical slide analysis: low-power screening, similarity-aware patch
//! mining at ×10, confidence-driven zoom to ×20, checklist extraction and
//! summarization.

pub mod checklist;
pub mod pipeline;
pub mod regions;
pub mod similarity;

pub use checklist::Checklist;
pub use pipeline::{analyze_slide, WsiAnalysis, WsiParams};
pub use regions::{propose_regions, Region, RegionParams};
pub use similarity::{pairwise_cosine, threshold_select, SelectionPolicy, SimilarityMatrix};
