//! Parameters, reverse-mode differentiation, the Adam optimizer and the
//! finite-difference gradient checker.

pub mod adam;
pub mod gradcheck;
pub mod params;
pub mod tape;

pub use adam::{adam_step, lr_schedule, AdamState, LrSchedule, Moments};
pub use gradcheck::{check_gradients, relative_error, GradCheckReport, GroupError, FD_STEP};
pub use params::{Gradients, Param, ParamStore};
pub use tape::{ConvLayer, Exec, Infer, NodeId, NormLayer, Recorder, Tape};
