//! Shared setup for the criterion benches.

use maskclip_core::data::make_fixtures;
use maskclip_core::engine::Trainer;
use maskclip_core::{DType, Device, ModelState, Result, Setup, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic pseudo-random tensor in `[-1, 1)`.
pub fn tensor(shape: &[usize], seed: u64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let data: Vec<f32> = (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 40) as f32 / (1u64 << 23) as f32 - 1.0
        })
        .collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
}

/// A toy trainer over `n` fresh fixtures; keep the directory alive while
/// benchmarking.
pub fn toy_trainer(n: usize) -> Result<(tempfile::TempDir, Trainer)> {
    let dir = tempfile::tempdir().map_err(|source| maskclip_core::Error::Io {
        path: std::env::temp_dir(),
        source,
    })?;
    let manifest = make_fixtures(dir.path(), n, 64, &mut ChaCha8Rng::seed_from_u64(7))?;
    let state = ModelState::init(&Setup::toy(), DType::F32, &Device::Cpu)?;
    let trainer = Trainer::new(state, &manifest)?;
    Ok((dir, trainer))
}
