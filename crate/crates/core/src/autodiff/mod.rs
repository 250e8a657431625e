//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! The primitive set is exactly what the recurrent encoder/decoder, the
//! variational objective and the frame classifier need:
//!
//! | primitive        | forward                    |
//! |------------------|----------------------------|
//! | `matvec`         | `W x`                      |
//! | `add`/`sub`/`mul`| elementwise                |
//! | `sigmoid`/`tanh` | elementwise                |
//! | `exp`/`log`      | elementwise                |
//! | `relu`/`clamp`   | elementwise, piecewise     |
//! | `scale`          | `a · x`                    |
//! | `sum`            | scalar reduction           |
//! | `window_mean`    | mean of several nodes      |
//! | `concat`         | vector concatenation       |
//! | `half_sq_dist`   | `½‖a − b‖²`                |
//! | `softmax_xent`   | `−log softmax(l)[k]`       |
//!
//! Graphs are rebuilt for every sequence, so variable lengths need no
//! special handling.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckReport, Stencil};
pub use graph::{sigmoid, Graph, NodeId};
pub use params::ParamSet;
pub use tensor::Tensor;
