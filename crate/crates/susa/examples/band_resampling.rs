//! Resample a densely sampled spectrum onto a coarser sensor layout using
//! per-band Gaussian responses.
//!
//! Run with: cargo run --release --example band_resampling

use ndarray::{ArrayD, IxDyn};
use susa::spectral::{resample_bands, resample_weights, HsiCube, SensorSpec};

fn main() -> susa::Result<()> {
    // Dense source: 401 bands, 400..600 nm at 0.5 nm spacing.
    let source = SensorSpec::uniform("dense", 400.0, 0.5, 401, 1.0);
    let spectrum = |lambda: f64| 1.0 + (lambda / 30.0).sin();
    let values = ArrayD::from_shape_fn(IxDyn(&[1, 1, 401]), |ix| {
        spectrum(400.0 + 0.5 * ix[2] as f64) as f32
    });
    let cube = HsiCube::new(values, source.clone(), 1.0)?;

    // Coarse target: 10 bands at 20 nm spacing with 10 nm FWHM.
    let target = SensorSpec::uniform("coarse", 410.0, 20.0, 10, 10.0);
    let weights = resample_weights(&source, &target)?;
    println!("weight matrix: {} target x {} source bands", weights.dim().0, weights.dim().1);
    for (t, row) in weights.rows().into_iter().enumerate() {
        let support = row.iter().filter(|&&w| w > 0.0).count();
        println!("  band {t} ({} nm): {support} contributing source bands", target.centers_nm[t]);
    }

    let out = resample_bands(&cube, &target)?;
    println!("resampled pixel:");
    for (t, &center) in target.centers_nm.iter().enumerate() {
        println!(
            "  {center:6.1} nm -> {:+.4} (true spectrum {:+.4})",
            out.values[[0, 0, t]],
            spectrum(center)
        );
    }
    Ok(())
}
