//! Attribution-prior training for scarce-data binary classifiers.
//!
//! A classifier is trained on its usual cross-entropy plus a second
//! cross-entropy between the labels and the sum of its own Expected
//! Gradients attributions, differentiated through the attribution.

pub mod attribution;
pub mod autodiff;
pub mod bundle;
pub mod cli;
pub mod data;
pub mod evaluation;
pub mod models;
pub mod seeds;
pub mod training;
