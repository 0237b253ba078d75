//! Unpaired single-image fog removal with a physics-embedded
//! cycle-consistent adversarial network.
//!
//! The crate is organised bottom-up:
//!
//! * [`fogmodel`]: atmospheric scattering, transmission, sky segmentation
//!   and airlight estimation;
//! * [`networks`]: the defog generator, the refog transmission estimator,
//!   the enhancer and the patch discriminators;
//! * [`losses`]: adversarial, cycle, enhancer and perceptual objectives;
//! * [`trainer`]: alternating two-direction optimisation and checkpoints;
//! * [`data`]: unpaired datasets, toy fog generation, multi-level fog indexes;
//! * [`metrics`]: blind visibility assessment and a fog-density proxy;
//! * [`cli`]: the operator commands behind the `defog2refog` binary.

pub mod cli;
pub mod data;
pub mod error;
pub mod fogmodel;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod ops;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Real, Shape, Tensor};
