//! Organ-at-risk segmentation of anisotropic head-and-neck CT with a hybrid
//! 2D/3D convolutional network.

pub mod data;
pub mod datamodel;
pub mod engine;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod report;
