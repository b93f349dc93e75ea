//! Fully convolutional CTC recognizer for continuous gloss sequences.
//!
//! The network encodes each frame spatially, slides a two-level temporal
//! convolutional encoder over the frame features, and decodes with CTC. An
//! auxiliary gloss feature enhancement (GFE) head is trained jointly on
//! forced-alignment proposals. Because every temporal operator has a finite
//! receptive field, recognition can run incrementally with bounded memory
//! (see [`stream`]).

pub mod ctc;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod gfe;
pub mod model;
pub mod parallel;
pub mod stream;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
