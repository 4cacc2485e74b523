//! Model compression by knowledge distillation through an ensemble of
//! intermediate "teaching assistant" networks.
//!
//! The crate trains a large teacher CNN, distills it into several
//! mid-sized assistants, combines their softened predictions by simple or
//! weighted averaging (weights found with differential evolution on the
//! probability simplex), and distills the combined signal into a small
//! student. Everything runs on the CPU in `f64` and is bit-reproducible
//! for a fixed seed, independent of thread count.
//!
//! Module map:
//! - [`tensor`]: dense tensors and a minimal reverse-mode tape covering
//!   exactly the layer set the networks need.
//! - [`models`]: the depth-parameterized CNN family and its checkpoint
//!   format.
//! - [`dataio`]: MNIST IDX / CIFAR binary parsers, normalization, splits.
//! - [`distill`]: softened outputs, distillation losses, SGD-Nesterov
//!   training.
//! - [`ensemble`]: prediction combiners and the differential-evolution
//!   weight search.
//! - [`pipeline`]: declarative experiment orchestration and reporting.
//!
//! The `parallel` feature (default) enables rayon data parallelism for
//! convolution kernels, batch inference, assistant training, and DE
//! fitness evaluation. Building with `--no-default-features` gives a
//! sequential binary that produces identical numbers.

pub mod dataio;
pub mod distill;
pub mod ensemble;
mod error;
mod exec;
pub mod models;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Parameter, Tensor};
