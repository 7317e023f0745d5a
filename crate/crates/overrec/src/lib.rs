//! Training-free sequential recommendation with analytic infinite-width
//! recurrent-network kernels.
//!
//! The library scores pairs of user interaction sequences with two kernels
//! of an infinite-width recurrent network — the Gaussian-process kernel of
//! the network at initialisation and the tangent kernel that governs its
//! training — and predicts the next item with a weighted nearest-neighbour
//! rule over a dense Gram matrix. A Monte-Carlo oracle samples finite-width
//! networks to verify the analytic kernels independently.
//!
//! Module map:
//!
//! * [`kernel_math`] — closed-form bivariate-Gaussian expectations for ReLU
//!   and the 2x2 covariance block they act on.
//! * [`rntk`] — the layer/time kernel recursions over item sequences,
//!   including zero-padding alignment for unequal lengths.
//! * [`gram`] — batched query x corpus kernel matrices with self-trace
//!   caching and a persistent binary format.
//! * [`knn`] — neighbour selection and next-item score maps.
//! * [`dataset`] — interaction-log parsing, 5-core filtering and
//!   leave-one-out splits.
//! * [`evaluation`] — full-item-set MRR@k / NDCG@k.
//! * [`oracle`] — finite-width RNN sampling, gradients, and Monte-Carlo
//!   kernel estimates.

pub mod dataset;
pub mod evaluation;
pub mod gram;
pub mod kernel_math;
pub mod knn;
pub mod oracle;
pub mod rntk;
