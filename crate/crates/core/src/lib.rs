//! Mixtures of marginal regression models for longitudinal data, fitted by
//! a penalized quasi-likelihood that prunes unneeded components.

pub mod data;
pub mod em;
pub mod error;
pub mod family;
pub mod gee;
pub mod glm;
pub mod kmeans;
mod linalg;
pub mod metrics;
pub mod sandwich;
pub mod selection;
pub mod simulate;

pub use data::{LongitudinalDataset, Schema, SubjectBlock};
pub use em::{fit_em, EmSettings, MixtureFit, PosteriorMatrix};
pub use error::{Error, ErrorCategory, Result};
pub use family::Family;
