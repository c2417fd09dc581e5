//! Audio-visual singing voice separation.
//!
//! A complex-spectrogram U-Net predicts a tanh-bounded complex ratio mask for
//! a target singer, optionally conditioned (via FiLM) on motion features
//! that a spatio-temporal graph network extracts from the singer's face
//! landmarks.

pub mod dsp;
pub mod maskmath;
pub mod mixer;
pub mod numerics;
pub mod visualnet;
pub mod audionet;
pub mod datasetio;
pub mod training;
pub mod evaluation;
pub mod cli;
