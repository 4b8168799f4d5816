pub mod codec;
pub mod curriculum;
pub mod datasets;
pub mod embedding;
pub mod evalreport;
pub mod nn;
pub mod replay;
pub mod seed;
