//! Minimal reverse-mode automatic differentiation over dense arrays.
//!
//! Graphs are rebuilt for every evaluation (define-by-run). Parameters live
//! in a [`ParamStore`] outside the graph; a graph borrows their values, the
//! reverse sweep fills leaf gradients, and [`adam_step`] applies updates.
//!
//! ```
//! use lidarfield_autodiff::{Graph, ParamStore, Tensor};
//!
//! let mut store = ParamStore::<f64>::new();
//! let p = store.add("p", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), 0).unwrap();
//! let g = Graph::new();
//! let x = g.param(&store, p);
//! let loss = x.mul(x).unwrap().sum();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod adam;
pub mod checkpoint;
mod conv;
mod error;
mod gradcheck;
mod graph;
mod ops;
mod param;
mod scalar;
mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use conv::ConvGeometry;
pub use error::{AutodiffError, Result};
pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckReport, ParamGradReport};
pub use graph::{Graph, Var};
pub use ops::{CustomOp, LatticeCoords, UnaryKind};
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;
