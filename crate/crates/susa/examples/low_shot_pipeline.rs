//! End-to-end low-shot pipeline on a synthetic scene: stacked feature
//! extractor -> whole-image features -> semi-supervised classifier -> metrics.
//!
//! Run with: cargo run --release --example low_shot_pipeline

use std::collections::BTreeMap;

use susa::dataio::{lowshot_split, sample_patches, synth_scene, LabelMap, SyntheticSceneSpec};
use susa::eval::{confusion, metrics};
use susa::kernels::standardize;
use susa::mcae::McaeConfig;
use susa::smcae::{smcae_extract, train_smcae_stack};
use susa::ssmlp::{build_ssmlp, predict_map, train_ssmlp, SsmlpConfig};

fn main() -> susa::Result<()> {
    let (cube, labels) = synth_scene(&SyntheticSceneSpec {
        classes: 4,
        bands: 16,
        height: 48,
        width: 48,
        seed: 11,
        ..SyntheticSceneSpec::default()
    })?;
    println!("scene: {}x{}x{} with {} classes", cube.height(), cube.width(), cube.bands(), labels.classes());

    // Stage 1: unsupervised feature learning on random patches.
    let patches = sample_patches(&[&cube], 64, 16, 1)?;
    let cfg = McaeConfig {
        width_scale: 1.0 / 16.0,
        batch_size: 8,
        drop_patience: 1_000_000,
        stop_patience: 2_000_000,
        max_epochs: usize::MAX / 2,
        max_steps: Some(300),
        ..McaeConfig::default()
    };
    let (stack, _) = train_smcae_stack(&patches.data, patches.train_count, 2, &cfg, &cube.spec, 2)?;
    let features = smcae_extract(&stack, &cube, false)?;
    println!("extracted {} feature channels per pixel", features.shape()[2]);

    // Stage 2: semi-supervised classification from 10 labels per class.
    let (h, w, f) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    let (std_feats, _) = standardize(&features)?;
    let flat = std_feats.view().into_shape_with_order((h * w, f)).unwrap();
    let split = lowshot_split(&labels, 10, &BTreeMap::new(), 3)?;
    let mut rows = Vec::new();
    let mut row_labels = Vec::new();
    for (class, (y, x)) in split.training_pixels() {
        rows.push(y * w + x);
        row_labels.push(class as usize - 1);
    }
    let labeled = flat.select(ndarray::Axis(0), &rows);
    let unlabeled = flat.to_owned();
    let scfg = SsmlpConfig {
        hidden_widths: vec![100, 59, 16, 14],
        max_epochs: 200,
        ..SsmlpConfig::default()
    };
    let mut model = build_ssmlp(&scfg, f, labels.classes(), 4)?;
    let history = train_ssmlp(&mut model, &labeled.view(), &row_labels, &unlabeled.view(), 5)?;
    println!("classifier trained for {} steps (stopped early: {})", history.steps, history.stopped_early);

    let (pred, _) = predict_map(&model, &std_feats)?;
    let pred = LabelMap::new(pred.ids, labels.class_names.clone())?;
    let m = metrics(&confusion(&labels, &pred)?)?;
    print!("{}", m.to_text());
    Ok(())
}
