//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] is rebuilt for every training step. Parameters live in a
//! [`ParamStore`] between steps and are bound into the graph as leaves; after
//! [`Graph::backward`] the store reads their gradients back out and applies
//! the update.
//!
//! ```
//! use ide::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.square(x);
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).item(), 6.0);
//! ```

mod graph;
mod params;
mod tensor;

pub use graph::{softmax_values as softmax, Graph, Var};
pub use params::{Bindings, ParamStore};
pub use tensor::{Shape, Tensor};
