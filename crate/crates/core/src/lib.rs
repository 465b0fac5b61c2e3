//! Self-supervised spatial position coding: proxy labels from skeletons and
//! space masks, a fully-convolutional position network, ratemap analysis,
//! a waviness metric and a black-box grating attack.

pub mod dataio;
pub mod error;
pub mod expcli;
pub mod grid;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod ratemap;
pub mod render;
pub mod spacemask;
pub mod waveattack;

pub use error::{Error, Result};
pub use grid::Grid;
