//! Dense rank-2 tensors, a recording tape for reverse-mode gradients,
//! the Adam update and a finite-difference gradient checker.
//!
//! ```
//! use earlystop::diffcore::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.variable(Tensor::scalar(0.0));
//! let y = tape.sigmoid(x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap()[0], 0.25);
//! ```

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_with_fault, relative_error, GradCheckReport};
pub use tape::{cross_entropy, OpKind, Tape, Var, LOG_CLAMP};
pub use tensor::{ParamSet, Tensor};

use tape::softmax_in_place;

/// Row softmax of a plain slice, returning a new vector.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}
