//! Weakly-supervised spatiotemporal video anomaly detection.
//!
//! Each video segment's feature cuboid is cut into a grid of spatial cells;
//! the cells form a bag labelled only by whether the video is anomalous. A
//! small classifier scores every cell, and a ranking loss pushes the top
//! score of an anomalous bag above the top score of a normal bag. The
//! highest-scoring cell localizes the anomaly inside the frame.
//!
//! Modules follow the pipeline: [`feature_store`] (cuboid files, manifests,
//! synthetic data), [`bagging`] (cell grids), [`net`] (classifier),
//! [`mil_train`] (ranking objective and training), [`evalkit`] (ROC/AUC,
//! localization, exports) and [`cli`].

pub mod bagging;
pub mod cli;
pub mod error;
pub mod evalkit;
pub mod feature_store;
pub mod mil_train;
pub mod net;

pub use error::{Error, Result};
