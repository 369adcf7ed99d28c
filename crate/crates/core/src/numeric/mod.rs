//! Tensors, random streams, dense linear algebra, smoothing and autodiff.

pub mod linalg;
pub mod optim;
pub mod rng;
pub mod smooth;
pub mod tape;
pub mod tensor;

pub use linalg::{cholesky_logdet, guarded_logdet, pca_fit_transform, Matrix, Pca};
pub use rng::Rng;
pub use smooth::moving_average_centered;
pub use tape::{Gradients, Real, Tape, Var};
pub use tensor::Tensor;
