//! Stacked MCAEs: greedy stage-wise training on patches, whole-image feature
//! extraction, and cross-sensor feature fusion.

use ndarray::{Array4, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{pool2d_forward, standardize, Pad, PoolKind, Stats};
use crate::mcae::{build_mcae, extract_mcae_features, train_mcae, McaeConfig, McaeModel, TrainHistory};
use crate::spectral::{resample_bands, HsiCube, SensorSpec};

/// Window of the mean pool applied to the fused stage features.
pub const FEATURE_POOL_WINDOW: usize = 5;

/// A trained stack: stage models plus the sensor layout the stack expects.
/// Standardization statistics are recomputed per image at extraction time, so
/// the stack carries none.
#[derive(Debug, Clone)]
pub struct SmcaeStack {
    pub models: Vec<McaeModel>,
    pub sensor: SensorSpec,
}

impl SmcaeStack {
    pub fn stages(&self) -> usize {
        self.models.len()
    }

    /// Channel count of the concatenated stage output.
    pub fn feature_channels(&self) -> usize {
        self.models.iter().map(|m| m.config.feature_channels()).sum()
    }
}

fn standardize_patches(patches: &Array4<f32>) -> Result<(Array4<f32>, Stats)> {
    let dynp = patches.clone().into_dyn();
    let (out, stats) = standardize(&dynp)?;
    Ok((out.into_dimensionality::<ndarray::Ix4>().unwrap(), stats))
}

fn extract_patch_features(model: &McaeModel, patches: &Array4<f32>) -> Result<Array4<f32>> {
    let (n, h, w, _) = patches.dim();
    let fc = model.config.feature_channels();
    let mut out = Array4::<f32>::zeros((n, h, w, fc));
    let bs = 16usize;
    let mut start = 0;
    while start < n {
        let end = (start + bs).min(n);
        let batch = patches.slice(ndarray::s![start..end, .., .., ..]).to_owned().into_dyn();
        let acts = model.forward(&batch)?;
        let feats = acts.features.into_dimensionality::<ndarray::Ix4>().unwrap();
        out.slice_mut(ndarray::s![start..end, .., .., ..]).assign(&feats);
        start = end;
    }
    Ok(out)
}

/// Train `stages` MCAEs greedily: each stage trains on the standardized
/// feature responses of the previous one. If a stage aborts, the error names
/// it and reports how many stages completed; no partial stack is returned.
pub fn train_smcae_stack(
    patches: &Array4<f32>,
    train_count: usize,
    stages: usize,
    config: &McaeConfig,
    sensor: &SensorSpec,
    seed: u64,
) -> Result<(SmcaeStack, Vec<TrainHistory>)> {
    if stages == 0 {
        return Err(Error::InvalidArgument("stack needs at least one stage".into()));
    }
    let (n, h, w, b) = patches.dim();
    if train_count == 0 || train_count > n {
        return Err(Error::InvalidArgument(format!(
            "train_count {train_count} out of range for {n} patches"
        )));
    }
    if b != sensor.bands() {
        return Err(Error::shape(
            "train_smcae_stack bands",
            format!("{} (sensor {})", sensor.bands(), sensor.name),
            format!("{b}"),
        ));
    }
    let factor = config.spatial_factor();
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "patch size {h}x{w} must be divisible by {factor}"
        )));
    }

    let mut models = Vec::with_capacity(stages);
    let mut histories = Vec::with_capacity(stages);
    let mut current = patches.clone();
    for k in 0..stages {
        let (std_patches, _) = standardize_patches(&current)?;
        let bands = std_patches.dim().3;
        let mut model = build_mcae(config, bands, seed.wrapping_add(k as u64))?;
        let train = std_patches.slice(ndarray::s![..train_count, .., .., ..]);
        let val = std_patches.slice(ndarray::s![train_count.., .., .., ..]);
        let val = if val.dim().0 > 0 { val } else { train };
        let history = train_mcae(&mut model, &train, &val, seed.wrapping_add(1000 + k as u64))
            .map_err(|e| {
                Error::InvalidArgument(format!(
                    "stage {} of {stages} aborted after {k} completed stages: {e}",
                    k + 1
                ))
            })?;
        let feats = extract_patch_features(&model, &std_patches)?;
        let (feats_std, _) = standardize_patches(&feats)?;
        current = feats_std;
        models.push(model);
        histories.push(history);
    }
    Ok((SmcaeStack { models, sensor: sensor.clone() }, histories))
}

/// Extract the stacked feature response for a whole image: per-band
/// standardize, run each stage on the (standardized) output of the previous,
/// concatenate all stage responses, standardize per feature, then apply a
/// 5x5 stride-1 same-padded mean pool. Statistics come from the image itself.
/// If the cube's sensor differs from the stack's, it is resampled first when
/// `resample` is allowed, otherwise this errors.
pub fn smcae_extract(stack: &SmcaeStack, cube: &HsiCube, resample: bool) -> Result<ArrayD<f32>> {
    let cube = if cube.spec == stack.sensor {
        cube.clone()
    } else if resample {
        resample_bands(cube, &stack.sensor)?
    } else {
        return Err(Error::InvalidArgument(format!(
            "cube sensor {} does not match stack sensor {} and resampling is disabled",
            cube.spec.name, stack.sensor.name
        )));
    };
    let (mut x, _) = standardize(&cube.values)?;
    let mut stage_outputs = Vec::with_capacity(stack.stages());
    for model in &stack.models {
        let feats = extract_mcae_features(model, &x)?;
        let (feats_std, _) = standardize(&feats)?;
        stage_outputs.push(feats_std.clone());
        x = feats_std;
    }
    let mut fused = stage_outputs[0].clone();
    for s in &stage_outputs[1..] {
        fused = crate::kernels::concat_channels(&fused, s)?;
    }
    let (fused_std, _) = standardize(&fused)?;
    let (h, w, c) = (fused_std.shape()[0], fused_std.shape()[1], fused_std.shape()[2]);
    let batch = fused_std.into_shape_with_order(IxDyn(&[1, h, w, c])).unwrap();
    let (pooled, _) = pool2d_forward(&batch, PoolKind::Mean, FEATURE_POOL_WINDOW, 1, Pad::Same)?;
    Ok(pooled.into_shape_with_order(IxDyn(&[h, w, c])).unwrap())
}

/// Concatenate per-sensor feature responses over matching spatial grids.
pub fn fuse_sensor_features(responses: &[ArrayD<f32>]) -> Result<ArrayD<f32>> {
    if responses.is_empty() {
        return Err(Error::InvalidArgument("fuse_sensor_features: no inputs".into()));
    }
    for r in responses {
        if r.ndim() != 3 {
            return Err(Error::shape("fuse_sensor_features", "[H,W,F]", format!("{:?}", r.shape())));
        }
        if r.shape()[..2] != responses[0].shape()[..2] {
            return Err(Error::shape(
                "fuse_sensor_features grids",
                format!("{:?}", &responses[0].shape()[..2]),
                format!("{:?}", &r.shape()[..2]),
            ));
        }
    }
    let mut out = responses[0].clone();
    for r in &responses[1..] {
        out = crate::kernels::concat_channels(&out, r)?;
    }
    Ok(out)
}

/// Serialization glue for stack checkpoints. Stage parameters are stored
/// concatenated with `stage{k}/` name prefixes.
#[derive(Debug, Serialize, Deserialize)]
pub struct SmcaeManifest {
    pub config: McaeConfig,
    pub sensor: SensorSpec,
    pub stage_input_bands: Vec<usize>,
}

impl SmcaeStack {
    pub fn manifest(&self) -> SmcaeManifest {
        SmcaeManifest {
            config: self.models[0].config.clone(),
            sensor: self.sensor.clone(),
            stage_input_bands: self.models.iter().map(|m| m.input_bands).collect(),
        }
    }

    /// Flatten stage parameters into one set for checkpointing.
    pub fn flat_params(&self) -> crate::optim::ParamSet {
        let mut flat = crate::optim::ParamSet::default();
        for (k, model) in self.models.iter().enumerate() {
            for p in &model.params.params {
                flat.push(format!("stage{k}/{}", p.name), p.value.clone(), p.kind);
            }
        }
        flat
    }

    pub fn from_parts(manifest: SmcaeManifest, flat: crate::optim::ParamSet) -> Result<Self> {
        let mut models = Vec::with_capacity(manifest.stage_input_bands.len());
        let mut cursor = 0usize;
        for (k, &bands) in manifest.stage_input_bands.iter().enumerate() {
            let reference = build_mcae(&manifest.config, bands, 0)?;
            let count = reference.params.len();
            if cursor + count > flat.len() {
                return Err(Error::InvalidArgument(format!(
                    "stack checkpoint truncated at stage {k}: {} parameters present",
                    flat.len()
                )));
            }
            let mut params = crate::optim::ParamSet::default();
            for p in &flat.params[cursor..cursor + count] {
                let name = p.name.strip_prefix(&format!("stage{k}/")).unwrap_or(&p.name);
                params.push(name, p.value.clone(), p.kind);
            }
            cursor += count;
            models.push(McaeModel::from_parts(
                crate::mcae::McaeManifest { config: manifest.config.clone(), input_bands: bands },
                params,
            )?);
        }
        if cursor != flat.len() {
            return Err(Error::InvalidArgument(format!(
                "stack checkpoint has {} trailing parameters",
                flat.len() - cursor
            )));
        }
        Ok(SmcaeStack { models, sensor: manifest.sensor })
    }
}
