//! Corpus taxonomy mining and distribution alignment.

pub mod corpus;
pub mod embedding;
pub mod gateway;
pub mod io;
pub mod taxonomy;
pub mod merger;
pub mod miner;
pub mod annotator;
pub mod agreement;
pub mod analysis;
pub mod pipeline;
