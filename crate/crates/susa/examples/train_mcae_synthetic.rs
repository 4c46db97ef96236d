//! Train a single multi-loss convolutional autoencoder on patches from a
//! synthetic scene and print the per-layer reconstruction losses.
//!
//! Run with: cargo run --release --example train_mcae_synthetic

use susa::dataio::{sample_patches, synth_scene, SyntheticSceneSpec};
use susa::kernels::standardize;
use susa::mcae::{build_mcae, train_mcae, McaeConfig};

fn main() -> susa::Result<()> {
    let (cube, _) = synth_scene(&SyntheticSceneSpec {
        classes: 4,
        bands: 8,
        height: 48,
        width: 48,
        seed: 7,
        ..SyntheticSceneSpec::default()
    })?;
    let patches = sample_patches(&[&cube], 64, 8, 1)?;
    let (std_patches, _) = standardize(&patches.data.clone().into_dyn())?;
    let std_patches = std_patches.into_dimensionality::<ndarray::Ix4>().unwrap();

    let cfg = McaeConfig {
        width_scale: 1.0 / 16.0,
        batch_size: 8,
        max_epochs: 100,
        ..McaeConfig::default()
    };
    let mut model = build_mcae(&cfg, cube.bands(), 3)?;
    let train = std_patches.slice(ndarray::s![..patches.train_count, .., .., ..]);
    let val = std_patches.slice(ndarray::s![patches.train_count.., .., .., ..]);
    let history = train_mcae(&mut model, &train, &val, 4)?;

    println!("epochs: {} (stopped early: {})", history.train_loss.len(), history.stopped_early);
    println!("first epoch loss: {:.5}", history.train_loss.first().unwrap());
    println!("last epoch loss:  {:.5}", history.train_loss.last().unwrap());
    let (total, per_layer) = model.evaluate_loss(&std_patches.view())?;
    println!("final multi-loss on all patches: {total:.5}");
    for (j, mse) in per_layer.iter().enumerate() {
        println!("  layer {j} reconstruction mse: {mse:.5}");
    }
    Ok(())
}
