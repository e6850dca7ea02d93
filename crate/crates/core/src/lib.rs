//! GNSS pseudorange bias correction with a satellite-wise neural network:
//! geodesy, trace ingest, WLS and filter/smoother engines, label
//! generation, features, the network itself, a measurement simulator and
//! evaluation metrics.
//!
//! Numerical code is generic over [`num::Real`] (`f32` or `f64`). File I/O
//! and the pipeline work in `f64`; the aliases below name those types.

pub mod estimators;
pub mod eval;
pub mod features;
pub mod geo;
pub mod ingest;
pub mod labeling;
pub mod num;
pub mod pipeline;
pub mod prnet;
pub mod simulator;
pub mod solver;

pub use num::Real;

pub type EcefPoint = geo::EcefPoint<f64>;
pub type GeodeticPoint = geo::GeodeticPoint<f64>;
pub type NedVector = geo::NedVector<f64>;
pub type SatObservation = ingest::SatObservation<f64>;
pub type MeasurementSet = ingest::MeasurementSet<f64>;
pub type GroundTruthTrack = ingest::GroundTruthTrack<f64>;
pub type NavSolution = solver::NavSolution<f64>;
pub type GeometrySolve = solver::GeometrySolve<f64>;
pub type FilterState = estimators::FilterState<f64>;
pub type SmoothedTrack = estimators::SmoothedTrack<f64>;
pub type LabelDataset = labeling::LabelDataset<f64>;
pub type EpochFeatures = features::EpochFeatures<f64>;
pub type FeatureSample = features::FeatureSample<f64>;
pub type PrnetModel = prnet::PrnetModel<f64>;
