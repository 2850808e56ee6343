//! Iterative low-rank compression of small convolutional networks.
//!
//! Convolution kernels are factorized with a Tucker-2 decomposition (HOSVD on
//! the two channel modes) into a `1×1 → k×k → 1×1` stack, and fully connected
//! layers with a truncated SVD into two thin layers. Ranks come from analytic
//! variational Bayesian matrix factorization, weakened toward the original
//! rank so the network can recover in a short fine-tune. Repeating the cycle
//! compresses further while accuracy holds.
//!
//! ```
//! use lowrank::factorization::{relative_error, truncated_svd, Reconstruct};
//! use lowrank::tensor::Matrix;
//!
//! let a = Matrix::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]).unwrap();
//! let rank1 = truncated_svd(&a, 1).unwrap();
//! let err = relative_error(&a, &rank1.reconstruct()).unwrap();
//! assert!((err - 1.0 / 10f64.sqrt()).abs() < 1e-12);
//! ```

pub mod error;
pub mod factorization;
mod linalg;
pub mod model;
pub mod pipeline;
pub mod rank;
pub mod runtime;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/tensors.md")]
    struct Tensors;
    #[doc = include_str!("../../../book/src/factorization.md")]
    struct Factorization;
    #[doc = include_str!("../../../book/src/ranks.md")]
    struct Ranks;
    #[doc = include_str!("../../../book/src/models.md")]
    struct Models;
    #[doc = include_str!("../../../book/src/runtime.md")]
    struct Runtime;
    #[doc = include_str!("../../../book/src/pipeline.md")]
    struct Pipeline;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
