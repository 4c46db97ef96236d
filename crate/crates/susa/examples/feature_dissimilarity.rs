//! Spearman representational dissimilarity between feature responses.
//! Compares a feature set against itself (d = 0), against a monotone
//! transform of itself (still 0: rank invariance), and against noise.
//!
//! Run with: cargo run --release --example feature_dissimilarity

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use susa::dataio::{synth_scene, SyntheticSceneSpec};
use susa::eval::dissimilarity;

fn main() -> susa::Result<()> {
    let (cube, _) = synth_scene(&SyntheticSceneSpec {
        classes: 3,
        bands: 6,
        height: 24,
        width: 24,
        seed: 5,
        ..SyntheticSceneSpec::default()
    })?;
    let x = cube.values.clone();

    println!("d(X, X)           = {:.6}", dissimilarity(&x, &x, None)?);

    // A strictly increasing per-feature transform preserves ranks exactly.
    let monotone = x.mapv(|v| (2.0 * v).tanh() + 0.1 * v);
    println!("d(X, tanh-warped) = {:.6}", dissimilarity(&x, &monotone, None)?);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noise: ArrayD<f32> = ArrayD::from_shape_fn(x.raw_dim(), |_| rng.gen_range(-1.0..1.0));
    println!("d(X, noise)       = {:.6}", dissimilarity(&x, &noise, None)?);
    Ok(())
}
