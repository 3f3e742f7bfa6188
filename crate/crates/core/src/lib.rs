//! Voice conversion with an adversarially trained autoencoder: one shared
//! encoder, one decoder per speaker, and a speaker classifier on the code.

pub mod analysis;
pub mod audio_io;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod dsp;
pub mod model;
pub mod train;
