//! Rectified-flow counterfactual reconstruction for unsupervised anomaly
//! detection on synthetic brain phantoms, with object-level (FROC) and
//! pixel-level (Dice, HD95, ASD, lesion-wise F1) evaluation.
//!
//! The pipeline, module by module:
//!
//! - [`phantom`] generates healthy phantoms, focal lesions and subtle
//!   non-lesional abnormalities, and assembles train/val/test pools.
//! - [`flow`] trains a velocity field that carries a synthetically lesioned
//!   image back to its healthy original along a straight line.
//! - [`transport`] integrates that field to obtain a healthy counterfactual
//!   and the anomaly map `|input - reconstruction|`.
//! - [`segmetrics`] and [`detection`] score anomaly maps against masks and
//!   point annotations; [`stats`] compares two models subject by subject.
//! - [`experiment`] wires everything into a reproducible two-variant run
//!   (clean vs contaminated training pool).

pub mod agrd;
pub mod annotations;
pub mod components;
pub mod dataset_io;
pub mod detection;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod grid;
pub mod phantom;
pub mod rng;
pub mod segmetrics;
pub mod stats;
pub mod transport;

pub use error::{Error, Result};
pub use grid::{AnomalyMap, BinaryMask, Geometry, Grid, Image2D};

/// Rater clicks closer than this (pixels) are averaged into one reference point.
pub const MERGE_RADIUS: f64 = 5.0;

/// A component counts as a hit when it contains a point or lies within this
/// many pixels of it.
pub const MATCH_TOLERANCE: f64 = 5.0;
