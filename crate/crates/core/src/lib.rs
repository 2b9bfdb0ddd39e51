//! Weight-direction rotation adapters and one-step score distillation for
//! toy diffusion models.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`optim`]: dense tensors, a reverse-mode tape
//!   and AdamW.
//! * [`adapters`]: the low-rank rotation adapter (`LoRaD`) and the LoRA,
//!   DoRA and full fine-tune baselines behind one contract.
//! * [`analysis`], [`svd`]: norm/direction decomposition, drift statistics
//!   and residual spectra between weight snapshots.
//! * [`diffusion`]: schedules, 2-D datasets, the MLP denoiser, teacher
//!   training and DDIM sampling.
//! * [`distill`], [`metrics`]: the alternating one-step distillation loop
//!   and sample-based distribution distances.
//! * [`checkpoint`]: the binary tensor container used for every artifact.



pub mod adapters;
pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod svd;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
