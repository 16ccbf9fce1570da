//! Feature-space analyses: PCA, regression onto control parameters, Gaussian
//! mixture clustering, cross-run robustness and loss landscapes.

mod gmm;
mod landscape;
mod pca;
mod regression;
mod robustness;

pub use gmm::{cluster_accuracy, gmm_assign, gmm_fit, hungarian_max, GmmFit, GmmModel, COVARIANCE_FLOOR};
pub use landscape::{count_local_minima, loss_landscape_scan};
pub use pca::{pca, Pca};
pub use regression::{regress_features, Regression};
pub use robustness::{cosine_similarity_matrix, feature_robustness, pearson, Robustness};

use alloc::vec::Vec;

use crate::linalg::Mat;
use crate::model::SubjectFeature;
use crate::Result;

/// Stacks subject features into an `S × N_feat` matrix.
pub fn feature_matrix(features: &[SubjectFeature]) -> Result<Mat> {
    let rows: Vec<Vec<f64>> = features.iter().map(|f| f.0.clone()).collect();
    Mat::from_rows(&rows)
}
