//! Universal multi-dataset nucleus detection and classification.
//!
//! A detection transformer predicts nucleus centroids and classes. One
//! trunk is shared by every dataset; each dataset owns its prediction heads,
//! and a prompt module conditions features on the dataset's label taxonomy.

pub mod cdn;
pub mod data;
pub mod dpm;
pub mod error;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod registry;
pub mod rng;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use registry::{AnnotatedSample, CategoryRegistry, DatasetDescriptor, Point};
