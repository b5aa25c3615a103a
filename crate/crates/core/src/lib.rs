//! Active-learning toolkit for object detection: dataset versioning,
//! evaluation, pseudo-label filtering, acquisition scoring, auxiliary scene
//! synthesis, a surrogate student/teacher detector, simulated annotation
//! and the loop that ties them together.

pub mod acquisition;
pub mod al_loop;
pub mod annotation;
pub mod assignment;
pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod pseudo_label;
pub mod seed;
pub mod service;
pub mod surrogate;
pub mod synth;
pub mod world;
