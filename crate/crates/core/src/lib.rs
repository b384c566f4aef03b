//! Filter-grouped transfer learning for few-shot image classification.
//!
//! The crate trains small convolutional classifiers, clusters each layer's
//! filters by their activation profiles, and fine-tunes with group-averaged
//! gradients so every filter in a group moves in lockstep. Group counts per
//! layer can be picked by hand, by a greedy doubling schedule, or by a
//! REINFORCE-trained LSTM controller.

pub mod config;
pub mod controller;
pub mod data;
pub mod error;
pub mod checkpoint;
pub mod clustering;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod network;
pub mod rng;
pub mod policy;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
