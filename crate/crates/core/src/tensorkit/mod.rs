//! Dense tensors with tape-based reverse-mode differentiation, limited to the
//! operations a small vision transformer needs.

mod conv;
mod element;
mod gradcheck;
mod tape;
mod tensor;

pub use conv::ConvGeom;
pub use element::Element;
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, ParamCheck};
pub use tape::{set_gelu_grad_fault, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
#[allow(clippy::needless_range_loop, clippy::type_complexity)]
mod tests;
