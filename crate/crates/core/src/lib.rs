//! Predictive distributions for sparsely observed functional data.
//!
//! The crate fits a PACE-style functional principal component model to
//! irregular longitudinal observations, predicts subject scores by
//! conditional expectation, and turns those predictions into Gaussian
//! predictive laws for scores, trajectories and scalar responses of a
//! functional linear model. Predictive laws are evaluated with squared
//! 2-Wasserstein distances.
//!
//! The numerical core is generic over the scalar type through [`Real`];
//! `f64` aliases for the main types live at the crate root. The simulation
//! [`harness`] works in `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data_model;
pub mod error;
pub mod flm;
pub mod harness;
pub mod linalg;
pub mod predictive;
pub mod scalar;
pub mod smoothing;
pub mod spectral;
pub mod wasserstein;

pub use error::{FpcaError, Result};
pub use scalar::Real;

pub use data_model::{Domain, Grid, Responses, SparseFunctionalDataset, SubjectRecord};
pub use flm::FlmModel;
pub use predictive::{FunctionalGaussian, LatentModel, ScorePredictive};
pub use smoothing::{Bandwidths, CovarianceSurface, CrossCovariance, KernelFamily, KernelSpec, MeanFunction};
pub use spectral::{EigenSystem, FittedFpcaModel, FpcaOptions};
pub use wasserstein::{Gaussian1D, QuantileFunction};

pub type Dataset64 = SparseFunctionalDataset<f64>;
pub type Subject64 = SubjectRecord<f64>;
pub type Grid64 = Grid<f64>;
pub type FpcaModel64 = FittedFpcaModel<f64>;
pub type EigenSystem64 = EigenSystem<f64>;
pub type ScorePredictive64 = ScorePredictive<f64>;
pub type FunctionalGaussian64 = FunctionalGaussian<f64>;
pub type FlmModel64 = FlmModel<f64>;
pub type Gaussian1D64 = Gaussian1D<f64>;

pub type Dataset32 = SparseFunctionalDataset<f32>;
pub type FpcaModel32 = FittedFpcaModel<f32>;
