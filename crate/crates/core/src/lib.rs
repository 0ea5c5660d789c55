//! Language-conditioned latent diffusion for hyperspectral image patches.
//!
//! The crate is `no_std` with `alloc`; file formats and the command-line
//! driver live in the `hsi-ldm` companion crate. Pipeline stages:
//!
//! 1. [`vae`] compresses `C×S×S` patches spectrally into `4×S×S` latents.
//! 2. [`trainer`] trains a text-conditioned transformer denoiser
//!    ([`denoiser`], [`textcond`]) semi-supervised, with the [`augment`]
//!    perturbations and an EMA teacher.
//! 3. [`synth`] samples new patches with guided DDIM ([`schedule`]) and
//!    expands an imbalanced training set.
//! 4. [`eval`] scores the result.
#![no_std]
// `!(x > 0.0)` style checks deliberately reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::needless_range_loop)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod augment;
pub mod autograd;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod hsicube;
pub mod nn;
pub mod params;
pub mod schedule;
pub mod synth;
pub mod tensor;
pub mod textcond;
pub mod trainer;
pub mod vae;

pub use error::{Error, Result};
pub use tensor::Matrix;

/// Random generator used throughout; seeded explicitly for reproducibility.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds a generator for `seed` on an independent `stream`.
pub fn rng_stream(seed: u64, stream: u64) -> Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
