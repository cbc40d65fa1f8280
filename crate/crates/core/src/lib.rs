//! Deep-unfolded MCMC samplers for linear-Gaussian inverse problems.
//!
//! A fixed number of Markov kernel iterations (split-Gibbs or LATINO) is
//! treated as a conditional generator whose per-layer step sizes and prior
//! weights are trained adversarially, with an L1 consistency term on the
//! chain's ergodic mean and a tuned sample-diversity reward.
//!
//! Module map:
//! - [`tensor`] and [`autodiff`]: dense tensors and a reverse-mode tape.
//! - [`linops`]: forward operators, likelihood proximal maps and the exact
//!   Gaussian conditional sampler.
//! - [`priors`]: latent Laplace prior, VP diffusion schedule, denoisers.
//! - [`kernels`]: split-Gibbs and LATINO steps, the unfolded chain.
//! - [`training`]: losses, weight tuning, the alternating training loop,
//!   checkpoints.
//! - [`metrics`]: PSNR, SSIM, sliced Wasserstein, Fréchet, MMD, PCA.
//! - [`problems`]: datasets, blur kernels, Fourier masks, toy oracles.

pub mod autodiff;
pub mod error;
pub mod kernels;
pub mod linops;
pub mod metrics;
pub mod persist;
pub mod priors;
pub mod problems;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
