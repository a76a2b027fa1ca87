//! Dense small-matrix numerics shared by every other module.
//!
//! Everything here is a pure function of its inputs and generic over [`Scalar`](crate::Scalar).

mod eig;
mod mat;
mod svd;
mod vector;

pub use eig::{symmetric_eig, SymmetricEigen, MAX_SWEEPS};
pub use mat::Mat;
pub use svd::{svd_thin, SvdResult};
pub use vector::{
    axpy, cosine_similarity, dot, is_unit, norm, normalize, softmax, top_k_indices, UNIT_NORM_TOL,
};
