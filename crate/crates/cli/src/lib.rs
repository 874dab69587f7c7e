//! `persona-eco`: the pipeline command line and the moderation service.

pub mod cli;
pub mod service;
