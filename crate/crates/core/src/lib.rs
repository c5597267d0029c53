//! Convolutional-stack encoder-decoder segmentation of small and large
//! lesions in 2-modality brain MR volumes.
//!
//! The crate contains everything from the layer math up: tensors and their
//! adjoints ([`tensor`]), the Stack-Net model ([`model`]), the training recipe
//! ([`train`]), volume preprocessing ([`preprocess`]), multi-model fusion
//! ([`aggregate`]), lesion-level evaluation ([`metrics`]), NIfTI-1 and JSON I/O
//! ([`io`]), synthetic phantoms ([`synth`]) and the experiment drivers used by
//! the command-line tool ([`experiment`]).

pub mod aggregate;
pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use model::{StackNet, StackNetConfig};
pub use tensor::{Parameter, Shape, Tensor};
pub use volume::{Volume, VolumeKind};
