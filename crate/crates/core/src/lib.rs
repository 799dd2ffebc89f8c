//! Sub-behavior-sequence selection and multi-persona user profiling.
//!
//! A user's behavior history is embedded, clustered by complete linkage,
//! given a per-cluster selection budget, and reduced to short
//! sub-behavior sequences (SBS) that balance prototypicality and diversity.
//! Each SBS is turned into a persona by an LLM profiler; personas are cached
//! in a store and retrieved online by nearest cluster centroid.

pub mod behavior;
pub mod budget;
pub mod cluster;
pub mod embed;
pub mod latency;
pub mod llm;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod profile;
pub mod select;
pub mod store;
pub mod template;
