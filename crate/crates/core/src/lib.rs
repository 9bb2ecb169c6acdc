pub mod cli;
pub mod degradation;
pub mod demo;
pub mod encoder;
pub mod evaluation;
pub mod font;
pub mod geom;
pub mod glyph;
pub mod ids;
pub mod metrics;
pub mod refinement;
pub mod retrieval;
pub mod seed;
pub mod service;
pub mod synthesis;
