pub mod align;
pub mod asr_refine;
pub mod config;
pub mod corpus;
pub mod dedup;
pub mod fusion;
pub mod harness;
pub mod index;
pub mod pipeline;
pub mod scoring;
pub mod select;
pub mod textmodel;
