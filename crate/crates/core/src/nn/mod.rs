//! Minimal CPU layers with hand-written backward passes.
//!
//! Every layer caches what it needs in `forward_train` and consumes the cache
//! in `backward`, accumulating parameter gradients in place. `forward` is the
//! side-effect-free eval path.

pub mod act;
pub mod adam;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod param;
pub mod pool;

use ndarray::Array4;

pub use act::Relu;
pub use adam::{Adam, StepSchedule};
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::BatchNorm;
pub use param::{Param, Parameterized};
pub use pool::MaxPool2d;

pub trait Layer {
    fn forward(&self, x: &Array4<f64>) -> Array4<f64>;
    fn forward_train(&mut self, x: &Array4<f64>) -> Array4<f64>;
    fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64>;
}
