//! TRECOR: Bayesian covariance regression on the internal nodes of a
//! phylogenetic tree, for zero-inflated compositional count data.
//!
//! Microbiome-style count vectors are mapped to binomial observations at the
//! internal nodes of a binary tree (the logistic-tree-normal decomposition).
//! The latent log-odds at the q internal nodes follow a multivariate normal
//! whose mean and covariance both depend on sample covariates:
//!
//! ```text
//! phi_i ~ N_q( B_0 x_i , Sigma + sum_{r=1..R} (B_r x_i)(B_r x_i)' )
//! ```
//!
//! `Sigma` is a sparse baseline covariance under a graphical-LASSO prior; the
//! rank-R perturbation captures covariate-driven network rewiring. Inference
//! is a fully conjugate Gibbs sampler built on Polya-Gamma augmentation of the
//! binomial layer and a column-block update of `Sigma`.
//!
//! Module map:
//! - [`phylo`]: trees, count matrices, and the leaf/internal-node transform.
//! - [`randdist`]: the random-variate generators the sweep needs (MVN, matrix
//!   normal, Polya-Gamma, GIG, inverse-Gaussian, gamma families).
//! - [`model`]: parameter state, `Sigma(x)`, priors, effect-size summaries.
//! - [`gibbs`]: the full Gibbs sweep and chain orchestration.
//! - [`selection`]: WAIC and rank selection.
//! - [`network`]: differential-correlation networks with Bayesian FDR control.
//! - [`simgen`]: synthetic-data generator and reference-data calibration.
//! - [`evalm`]: metrics (ROC/PR, errors, convergence) and the method
//!   comparison harness.

pub mod evalm;
pub mod gibbs;
pub mod model;
pub mod network;
pub mod phylo;
pub mod randdist;
pub mod selection;
pub mod simgen;
