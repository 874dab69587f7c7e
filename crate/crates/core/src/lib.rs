pub mod analysis;
pub mod clustering;
pub mod completion;
pub mod corpus;
pub mod embedding;
pub mod fixtures;
pub mod grounding;
pub mod index;
pub mod persona;
pub mod pipeline;
pub mod provider;
pub mod simulation;
pub mod stats;
