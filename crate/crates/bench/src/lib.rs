pub mod dataset;
pub mod heatmap;
pub mod lodo;
pub mod pretrain;
pub mod profile;
pub mod report;
pub mod synth;
