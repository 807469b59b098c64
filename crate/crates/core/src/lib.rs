//! Split-timestep collaborative training for denoising diffusion models.
//!
//! Clients keep their images and a local noise predictor for the low-noise
//! end of the reverse chain; a shared server model learns the high-noise
//! steps from the noised images clients choose to send. The crate contains
//! the whole stack: a small autodiff engine and UNet, the diffusion maths,
//! the client/server protocol, metrics, synthetic data and the experiment
//! runner behind the `splitdiff` binary.

pub mod autograd;
pub mod data;
pub mod diffusion;
pub mod experiment;
pub mod metrics;
pub mod net;
pub mod protocol;
pub mod tensor;
pub mod training;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the `index`-th member of a named random stream under `root`.
/// Distinct `(stream, index)` pairs give unrelated seeds.
pub fn derive_seed(root: u64, stream: &str, index: u64) -> u64 {
    // FNV-1a of the stream name
    let name = stream
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3));
    splitmix64(splitmix64(splitmix64(root) ^ name) ^ index)
}
