pub mod descriptors;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod matching;
pub mod replay;
pub mod rng;
pub mod router;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = linalg::Mat<f64>;
pub type Matrix32 = linalg::Mat<f32>;
pub type Svd = linalg::SvdResult<f64>;
pub type Router = router::RouterState<f64>;
pub type Router32 = router::RouterState<f32>;
pub type Hierarchy = matching::HierarchyEmbeddings<f64>;
pub type Tables = matching::ClassTables<f64>;
