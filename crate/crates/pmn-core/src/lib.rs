//! Prototype-matching fault diagnosis for 1-D vibration spectra.
//!
//! The crate implements a convolutional autoencoder whose classifier matches
//! encoded features against learnable prototype vectors, together with
//! everything needed to use it end to end:
//!
//! - [`tensor`]: dense row-major tensors and a counter-based deterministic RNG
//! - [`nn`]: forward/backward rules for the fixed layer set (Conv1d, Deconv1d,
//!   BatchNorm1d, Linear, ReLU, Flatten, Reshape) and an Adam optimizer with
//!   per-epoch learning-rate decay
//! - [`model`]: the autoencoder + prototype classifier assembly and an
//!   MLP-head baseline sharing the same backbone
//! - [`loss`]: the five-term training objective (classification,
//!   reconstruction, and three prototype regularizers) with gradients
//! - [`signal`]: synthetic gearbox-style vibration data, FFT preprocessing,
//!   0-1 normalization, spectrum augmentations, and the PMDS dataset format
//! - [`metrics`]: accuracy, confusion matrices, the representation-quality
//!   ratio of intra-class to inter-class feature distances, feature export
//! - [`interpret`]: distance readouts, decoded sample-level prototypes, and
//!   1-D Grad-CAM frequency attribution
//! - [`train`]: minibatch training loop, run configuration, epoch logs
//! - [`checkpoint`]: binary model persistence (magic `PMN1`)

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod interpret;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod signal;
pub mod tensor;
pub mod train;

pub use error::{PmnError, Result};
pub use rng::Rng;
pub use tensor::Tensor;
