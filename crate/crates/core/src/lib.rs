pub mod autodiff;
pub mod skeleton;
pub mod dataset;
pub mod embedder;
pub mod triplet;
pub mod analysis;
pub mod trainer;
