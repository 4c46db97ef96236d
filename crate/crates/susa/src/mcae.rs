//! Multi-loss convolutional autoencoder: architecture, multi-loss objective,
//! unsupervised training, and full-resolution feature extraction.

use ndarray::{ArrayD, ArrayView4, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{take_grads, Graph, NodeId};
use crate::kernels::{check_finite, reflect_pad_to_multiple, Pad, PoolKind};
use crate::optim::{xavier_init, Monitor, NadamState, ParamKind, ParamSet, PlateauSchedule};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    /// Trainable PELU (one a/b pair per activation layer).
    Pelu,
    /// Fixed ReLU; compatibility mode reproducing the single-loss CAE.
    Relu,
}

/// Architecture and training parameters. Defaults follow the published
/// training setup; `width_scale` shrinks every layer for desk-scale runs
/// without changing the structure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McaeConfig {
    pub encoder_widths: Vec<usize>,
    pub refinement_widths: Vec<usize>,
    /// Multi-loss weights, shallowest (data layer) first.
    pub loss_weights: Vec<f32>,
    pub activation: Activation,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub kernel: usize,
    pub width_scale: f64,
    pub drop_patience: usize,
    pub stop_patience: usize,
    pub weight_decay: f32,
    pub max_epochs: usize,
    /// Optional hard cap on optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for McaeConfig {
    fn default() -> Self {
        McaeConfig {
            encoder_widths: vec![256, 512, 512, 1024],
            refinement_widths: vec![512, 512, 256],
            loss_weights: vec![1.0, 1e-1, 1e-2, 1e-2],
            activation: Activation::Pelu,
            learning_rate: 2e-3,
            batch_size: 512,
            kernel: 3,
            width_scale: 1.0,
            drop_patience: 5,
            stop_patience: 10,
            weight_decay: 0.0,
            max_epochs: 1000,
            max_steps: None,
        }
    }
}

impl McaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.loss_weights.len() != self.encoder_widths.len() {
            return Err(Error::InvalidArgument(format!(
                "{} loss weights for {} encoder layers",
                self.loss_weights.len(),
                self.encoder_widths.len()
            )));
        }
        if self.refinement_widths.len() + 1 != self.encoder_widths.len() {
            return Err(Error::InvalidArgument(format!(
                "{} refinement layers must be one fewer than {} encoder layers",
                self.refinement_widths.len(),
                self.encoder_widths.len()
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidArgument("kernel size must be odd".into()));
        }
        if self.encoder_widths.iter().chain(&self.refinement_widths).any(|&w| w == 0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        Ok(())
    }

    fn scale(&self, w: usize) -> usize {
        ((w as f64 * self.width_scale).round() as usize).max(1)
    }

    pub fn scaled_encoder_widths(&self) -> Vec<usize> {
        self.encoder_widths.iter().map(|&w| self.scale(w)).collect()
    }

    pub fn scaled_refinement_widths(&self) -> Vec<usize> {
        self.refinement_widths.iter().map(|&w| self.scale(w)).collect()
    }

    /// Spatial downsampling factor across the encoder (2 per pooled block).
    pub fn spatial_factor(&self) -> usize {
        1 << self.refinement_widths.len()
    }

    /// Channel count of the extracted feature response.
    pub fn feature_channels(&self) -> usize {
        *self.scaled_refinement_widths().last().unwrap()
    }
}

/// One MCAE: parameters plus the config that determines its wiring.
#[derive(Debug, Clone)]
pub struct McaeModel {
    pub config: McaeConfig,
    pub input_bands: usize,
    pub params: ParamSet,
}

fn derive_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Xavier weights; biases and PELU parameters initialized to one.
pub fn build_mcae(config: &McaeConfig, input_bands: usize, seed: u64) -> Result<McaeModel> {
    config.validate()?;
    if input_bands == 0 {
        return Err(Error::InvalidArgument("input_bands must be >= 1".into()));
    }
    let enc = config.scaled_encoder_widths();
    let refine = config.scaled_refinement_widths();
    let k = config.kernel;
    let depth = enc.len();
    let mut params = ParamSet::default();
    let mut pi = 0u64;
    let mut push_conv = |params: &mut ParamSet, name: &str, cin: usize, cout: usize| -> Result<()> {
        let w = xavier_init(&[k, k, cin, cout], derive_seed(seed, pi))?;
        pi += 1;
        params.push(format!("{name}_w"), w, ParamKind::Weight);
        params.push(format!("{name}_b"), ArrayD::from_elem(IxDyn(&[cout]), 1.0f32), ParamKind::Bias);
        if config.activation == Activation::Pelu && name != "head" {
            params.push(format!("{name}_pelu_a"), ArrayD::from_elem(IxDyn(&[1]), 1.0f32), ParamKind::Pelu);
            params.push(format!("{name}_pelu_b"), ArrayD::from_elem(IxDyn(&[1]), 1.0f32), ParamKind::Pelu);
        }
        Ok(())
    };

    let mut cin = input_bands;
    for (j, &w) in enc.iter().enumerate() {
        push_conv(&mut params, &format!("enc{j}"), cin, w)?;
        cin = w;
    }
    for (j, &w) in refine.iter().enumerate() {
        let up_channels = if j == 0 { enc[depth - 1] } else { refine[j - 1] };
        let skip_channels = enc[depth - 2 - j];
        push_conv(&mut params, &format!("ref{j}"), up_channels + skip_channels, w)?;
    }
    // Output head is linear (no activation parameters).
    let head_w = xavier_init(&[k, k, *refine.last().unwrap(), input_bands], derive_seed(seed, pi))?;
    params.push("head_w", head_w, ParamKind::Weight);
    params.push("head_b", ArrayD::from_elem(IxDyn(&[input_bands]), 1.0f32), ParamKind::Bias);

    Ok(McaeModel { config: config.clone(), input_bands, params })
}

/// Nodes produced by one forward pass on a graph.
pub struct McaeGraphOutputs {
    /// (target signal, reconstruction), shallowest first; index 0 is the
    /// data layer (input vs output head).
    pub recon_pairs: Vec<(NodeId, NodeId)>,
    pub bottleneck: NodeId,
    /// Final refinement activation at full input resolution.
    pub features: NodeId,
}

struct Cursor<'a> {
    ids: &'a [NodeId],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn next(&mut self) -> NodeId {
        let id = self.ids[self.pos];
        self.pos += 1;
        id
    }
}

fn conv_block<F: Scalar>(
    g: &mut Graph<F>,
    cursor: &mut Cursor<'_>,
    activation: Activation,
    input: NodeId,
    linear: bool,
) -> Result<NodeId> {
    let w = cursor.next();
    let b = cursor.next();
    let conv = g.conv2d(input, w, Pad::Same)?;
    let pre = g.add_bias(conv, b)?;
    if linear {
        return Ok(pre);
    }
    match activation {
        Activation::Relu => Ok(g.relu(pre)),
        Activation::Pelu => {
            let a = cursor.next();
            let bp = cursor.next();
            g.pelu(pre, a, bp)
        }
    }
}

/// Build the MCAE forward pass on an existing graph. `ids` must be the
/// model's parameters inserted in build order.
pub fn mcae_forward_graph<F: Scalar>(
    config: &McaeConfig,
    input_bands: usize,
    g: &mut Graph<F>,
    ids: &[NodeId],
    input: NodeId,
) -> Result<McaeGraphOutputs> {
    let shape = g.value(input).shape().to_vec();
    if shape.len() != 4 || shape[3] != input_bands {
        return Err(Error::shape(
            "mcae_forward input",
            format!("[N,H,W,{input_bands}]"),
            format!("{:?}", shape),
        ));
    }
    let factor = config.spatial_factor();
    if shape[1] % factor != 0 || shape[2] % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "mcae_forward spatial dims {}x{} must be divisible by {factor}",
            shape[1], shape[2]
        )));
    }
    let depth = config.encoder_widths.len();
    let refinements = config.refinement_widths.len();
    let mut cursor = Cursor { ids, pos: 0 };

    // Encoder: pooling at block entry for blocks 2..D, so each block's input
    // is the previous activation at full block resolution.
    let mut acts = Vec::with_capacity(depth);
    let mut cur = input;
    for j in 0..depth {
        if j > 0 {
            cur = g.pool2d(cur, PoolKind::Max, 2, 2, Pad::Valid)?;
        }
        cur = conv_block(g, &mut cursor, config.activation, cur, false)?;
        acts.push(cur);
    }
    let bottleneck = acts[depth - 1];

    // Refinement: upsample, concatenate the matching encoder activation,
    // convolve, activate.
    let mut ref_outs = Vec::with_capacity(refinements);
    let mut cur_d = bottleneck;
    for j in 0..refinements {
        let up = g.upsample(cur_d, 2)?;
        let skip = acts[depth - 2 - j];
        let cat = g.concat_channels(up, skip)?;
        cur_d = conv_block(g, &mut cursor, config.activation, cat, false)?;
        ref_outs.push(cur_d);
    }
    let head = conv_block(g, &mut cursor, config.activation, cur_d, true)?;

    let mut recon_pairs = vec![(input, head)];
    for i in 1..depth {
        recon_pairs.push((acts[i - 1], ref_outs[refinements - i]));
    }
    Ok(McaeGraphOutputs { recon_pairs, bottleneck, features: ref_outs[refinements - 1] })
}

/// Weighted multi-loss objective over per-layer reconstruction MSEs.
pub fn mcae_loss(per_layer_mse: &[f64], loss_weights: &[f64]) -> Result<f64> {
    if per_layer_mse.len() != loss_weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} reconstruction pairs for {} loss weights",
            per_layer_mse.len(),
            loss_weights.len()
        )));
    }
    Ok(per_layer_mse.iter().zip(loss_weights).map(|(m, w)| m * w).sum())
}

/// Graph-side multi-loss: MSE node per pair, weighted sum.
pub fn mcae_loss_graph<F: Scalar>(
    g: &mut Graph<F>,
    pairs: &[(NodeId, NodeId)],
    loss_weights: &[f32],
) -> Result<(NodeId, Vec<NodeId>)> {
    if pairs.len() != loss_weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} reconstruction pairs for {} loss weights",
            pairs.len(),
            loss_weights.len()
        )));
    }
    let mut mses = Vec::with_capacity(pairs.len());
    for &(target, recon) in pairs {
        mses.push(g.mse(recon, target)?);
    }
    let terms = mses.iter().zip(loss_weights).map(|(&m, &w)| (F::from_f64(w as f64), m)).collect();
    let total = g.weighted_sum(terms)?;
    Ok((total, mses))
}

/// Owned-array view of one forward pass (inference).
pub struct McaeActivations {
    pub recon_pairs: Vec<(ArrayD<f32>, ArrayD<f32>)>,
    pub per_layer_mse: Vec<f64>,
    pub features: ArrayD<f32>,
    pub bottleneck: ArrayD<f32>,
}

impl McaeModel {
    fn leaf_params(&self, g: &mut Graph<f32>, trainable: bool) -> Vec<NodeId> {
        self.params
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), trainable))
            .collect()
    }

    /// Forward pass returning owned arrays; pure, no parameter mutation.
    pub fn forward(&self, batch: &ArrayD<f32>) -> Result<McaeActivations> {
        let mut g = Graph::<f32>::new();
        let ids = self.leaf_params(&mut g, false);
        let input = g.constant(batch.clone());
        let out = mcae_forward_graph(&self.config, self.input_bands, &mut g, &ids, input)?;
        let mut pairs = Vec::new();
        let mut mses = Vec::new();
        for &(t, r) in &out.recon_pairs {
            mses.push(crate::kernels::mse_forward(g.value(r), g.value(t))?.to_f64());
            pairs.push((g.value(t).clone(), g.value(r).clone()));
        }
        Ok(McaeActivations {
            recon_pairs: pairs,
            per_layer_mse: mses,
            features: g.value(out.features).clone(),
            bottleneck: g.value(out.bottleneck).clone(),
        })
    }

    /// Total Eq-style multi-loss and per-layer MSEs on a patch set, batched.
    pub fn evaluate_loss(&self, patches: &ArrayView4<'_, f32>) -> Result<(f64, Vec<f64>)> {
        let n = patches.dim().0;
        if n == 0 {
            return Err(Error::InvalidArgument("evaluate_loss on empty patch set".into()));
        }
        let bs = self.config.batch_size.min(n);
        let mut per_layer = vec![0.0f64; self.config.loss_weights.len()];
        let mut count = 0usize;
        let mut start = 0;
        while start < n {
            let end = (start + bs).min(n);
            let batch = patches.slice(ndarray::s![start..end, .., .., ..]).to_owned().into_dyn();
            let acts = self.forward(&batch)?;
            let m = end - start;
            for (acc, v) in per_layer.iter_mut().zip(&acts.per_layer_mse) {
                *acc += v * m as f64;
            }
            count += m;
            start = end;
        }
        for v in per_layer.iter_mut() {
            *v /= count as f64;
        }
        let weights: Vec<f64> = self.config.loss_weights.iter().map(|&w| w as f64).collect();
        Ok((mcae_loss(&per_layer, &weights)?, per_layer))
    }
}

/// Per-epoch record of an MCAE training run.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub lr: Vec<f64>,
    pub steps: usize,
    pub stopped_early: bool,
}

/// Minimize the multi-loss objective with mini-batch Nadam under the
/// plateau schedule. Deterministic for a fixed seed. On a non-finite loss
/// the parameters are restored to the last epoch boundary and an error is
/// returned.
pub fn train_mcae(
    model: &mut McaeModel,
    train: &ArrayView4<'_, f32>,
    val: &ArrayView4<'_, f32>,
    seed: u64,
) -> Result<TrainHistory> {
    let n = train.dim().0;
    if n == 0 {
        return Err(Error::InvalidArgument("train_mcae: empty training set".into()));
    }
    let cfg = model.config.clone();
    let bs = cfg.batch_size.min(n);
    let kinds = model.params.kinds();
    let mut opt = NadamState::<f32>::new(cfg.learning_rate);
    let mut schedule = PlateauSchedule::new(Monitor::LossMin, cfg.drop_patience, cfg.stop_patience)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = TrainHistory::default();
    let mut checkpoint = model.params.clone();
    let mut steps = 0usize;

    'epochs: for _epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut epoch_count = 0usize;
        for chunk in order.chunks(bs) {
            let batch = train.select(Axis(0), chunk).into_dyn();
            let mut g = Graph::<f32>::new();
            let ids: Vec<NodeId> = model.params.params.iter().map(|p| g.leaf(p.value.clone(), true)).collect();
            let input = g.constant(batch);
            let out = mcae_forward_graph(&cfg, model.input_bands, &mut g, &ids, input)?;
            let (total, _) = mcae_loss_graph(&mut g, &out.recon_pairs, &cfg.loss_weights)?;
            let loss = g.scalar_value(total) as f64;
            if !loss.is_finite() {
                model.params = checkpoint;
                return Err(Error::NonFinite("mcae training loss".into()));
            }
            epoch_loss += loss * chunk.len() as f64;
            epoch_count += chunk.len();
            let mut grads = g.backward(total)?;
            let grads = take_grads(&mut grads, &g, &ids);
            let mut values: Vec<ArrayD<f32>> =
                model.params.params.iter().map(|p| p.value.clone()).collect();
            opt.step(&mut values, &kinds, &grads, cfg.weight_decay)?;
            for (p, v) in model.params.params.iter_mut().zip(values) {
                p.value = v;
            }
            steps += 1;
            if let Some(cap) = cfg.max_steps {
                if steps >= cap {
                    history.train_loss.push(epoch_loss / epoch_count as f64);
                    let (vl, _) = model.evaluate_loss(val)?;
                    history.val_loss.push(vl);
                    history.lr.push(opt.lr as f64);
                    break 'epochs;
                }
            }
        }
        let (val_total, _) = model.evaluate_loss(val)?;
        check_finite(&ArrayD::from_elem(IxDyn(&[1]), val_total as f32), "mcae validation loss")?;
        history.train_loss.push(epoch_loss / epoch_count as f64);
        history.val_loss.push(val_total);
        history.lr.push(opt.lr as f64);
        checkpoint = model.params.clone();
        match schedule.update(val_total) {
            crate::optim::Action::Continue => {}
            crate::optim::Action::DropLr => opt.drop_lr(schedule.drop_factor as f32),
            crate::optim::Action::Stop => {
                history.stopped_early = true;
                break;
            }
        }
    }
    history.steps = steps;
    Ok(history)
}

/// Full-resolution feature response for an image `[H,W,F]`. Spatial dims are
/// reflect-padded to the pooling multiple internally and cropped after.
pub fn extract_mcae_features(model: &McaeModel, image: &ArrayD<f32>) -> Result<ArrayD<f32>> {
    if image.ndim() != 3 {
        return Err(Error::shape("extract_mcae_features", "[H,W,F]", format!("{:?}", image.shape())));
    }
    if image.shape()[2] != model.input_bands {
        return Err(Error::shape(
            "extract_mcae_features channels",
            format!("{}", model.input_bands),
            format!("{}", image.shape()[2]),
        ));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let padded = reflect_pad_to_multiple(image, model.config.spatial_factor())?;
    let (hp, wp, c) = (padded.shape()[0], padded.shape()[1], padded.shape()[2]);
    let batch = padded.into_shape_with_order(IxDyn(&[1, hp, wp, c])).unwrap();
    let acts = model.forward(&batch)?;
    let feat = acts.features;
    let fc = *feat.shape().last().unwrap();
    let full = feat.into_shape_with_order(IxDyn(&[hp, wp, fc])).unwrap();
    Ok(full.slice(ndarray::s![..h, ..w, ..]).to_owned().into_dyn())
}

/// Serialization glue for checkpoints.
#[derive(Debug, Serialize, Deserialize)]
pub struct McaeManifest {
    pub config: McaeConfig,
    pub input_bands: usize,
}

impl McaeModel {
    pub fn manifest(&self) -> McaeManifest {
        McaeManifest { config: self.config.clone(), input_bands: self.input_bands }
    }

    pub fn from_parts(manifest: McaeManifest, params: ParamSet) -> Result<Self> {
        let reference = build_mcae(&manifest.config, manifest.input_bands, 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint has {} parameters, model expects {}",
                params.len(),
                reference.params.len()
            )));
        }
        for (a, b) in reference.params.params.iter().zip(&params.params) {
            if a.value.shape() != b.value.shape() {
                return Err(Error::shape(
                    format!("checkpoint parameter {}", b.name),
                    format!("{:?}", a.value.shape()),
                    format!("{:?}", b.value.shape()),
                ));
            }
        }
        Ok(McaeModel { config: manifest.config, input_bands: manifest.input_bands, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> McaeConfig {
        McaeConfig {
            encoder_widths: vec![4, 6],
            refinement_widths: vec![4],
            loss_weights: vec![1.0, 0.1],
            batch_size: 4,
            ..McaeConfig::default()
        }
    }

    fn random_batch(n: usize, h: usize, w: usize, c: usize, seed: u64) -> ArrayD<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(&[n, h, w, c]), |_| rng.gen_range(-1.0f32..1.0))
    }

    #[test]
    fn default_first_conv_param_count() {
        // 200 input bands at full scale: 3x3x200x256 = 460800 weights, 256 biases.
        let model = build_mcae(&McaeConfig::default(), 200, 0).unwrap();
        let w = model.params.params.iter().find(|p| p.name == "enc0_w").unwrap();
        let b = model.params.params.iter().find(|p| p.name == "enc0_b").unwrap();
        assert_eq!(w.value.len(), 460_800);
        assert_eq!(b.value.len(), 256);
    }

    #[test]
    fn build_is_seed_deterministic() {
        let a = build_mcae(&tiny_config(), 5, 42).unwrap();
        let b = build_mcae(&tiny_config(), 5, 42).unwrap();
        let c = build_mcae(&tiny_config(), 5, 43).unwrap();
        for (pa, pb) in a.params.params.iter().zip(&b.params.params) {
            assert_eq!(pa.value, pb.value);
        }
        assert!(a.params.params.iter().zip(&c.params.params).any(|(pa, pc)| pa.value != pc.value));
    }

    #[test]
    fn relu_mode_has_no_pelu_params() {
        let cfg = McaeConfig { activation: Activation::Relu, ..tiny_config() };
        let model = build_mcae(&cfg, 5, 0).unwrap();
        assert!(model.params.params.iter().all(|p| !p.name.contains("pelu")));
        let pelu = build_mcae(&tiny_config(), 5, 0).unwrap();
        assert!(pelu.params.params.iter().any(|p| p.name.contains("pelu")));
    }

    #[test]
    fn worked_multi_loss_example() {
        // (0.5, 0.2, 0.1, 0.1) weighted by (1, 0.1, 0.01, 0.01) = 0.522.
        let v = mcae_loss(&[0.5, 0.2, 0.1, 0.1], &[1.0, 0.1, 0.01, 0.01]).unwrap();
        assert!((v - 0.522).abs() < 1e-12);
        // Zeroed deep weights mask those layers entirely.
        let masked = mcae_loss(&[0.5, 9.0, 9.0, 9.0], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((masked - 0.5).abs() < 1e-12);
        assert!(mcae_loss(&[0.5], &[1.0, 0.1]).is_err());
    }

    #[test]
    fn forward_pair_shapes_match_and_features_full_res() {
        let model = build_mcae(&tiny_config(), 5, 7).unwrap();
        let batch = random_batch(2, 8, 8, 5, 0);
        let acts = model.forward(&batch).unwrap();
        assert_eq!(acts.recon_pairs.len(), 2);
        for (t, r) in &acts.recon_pairs {
            assert_eq!(t.shape(), r.shape());
        }
        // Data pair lives at input resolution and band count.
        assert_eq!(acts.recon_pairs[0].0.shape(), &[2, 8, 8, 5]);
        // Feature response is the last refinement activation, full resolution.
        assert_eq!(acts.features.shape(), &[2, 8, 8, 4]);
        assert_eq!(acts.bottleneck.shape(), &[2, 4, 4, 6]);
    }

    #[test]
    fn zero_head_gives_zero_output_reconstruction() {
        let mut model = build_mcae(&tiny_config(), 5, 7).unwrap();
        for p in model.params.params.iter_mut() {
            if p.name.starts_with("head_") {
                p.value.fill(0.0);
            }
        }
        let acts = model.forward(&random_batch(1, 8, 8, 5, 1)).unwrap();
        assert!(acts.recon_pairs[0].1.iter().all(|&v| v == 0.0));
        assert!(acts.per_layer_mse[0] > 0.0);
    }

    #[test]
    fn evaluate_loss_matches_manual_weighting() {
        let model = build_mcae(&tiny_config(), 3, 1).unwrap();
        let patches = random_batch(6, 8, 8, 3, 2);
        let view = patches.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let (total, per_layer) = model.evaluate_loss(&view).unwrap();
        let manual: f64 = per_layer.iter().zip(&model.config.loss_weights).map(|(&m, &w)| m * w as f64).sum();
        assert!((total - manual).abs() < 1e-12);
        assert_eq!(per_layer.len(), 2);
    }

    #[test]
    fn extract_restores_odd_spatial_size() {
        let model = build_mcae(&tiny_config(), 4, 3).unwrap();
        // 33x33 with spatial factor 2 pads to 34x34 internally, crops back.
        let image = random_batch(1, 33, 33, 4, 3).index_axis_move(ndarray::Axis(0), 0);
        let feats = extract_mcae_features(&model, &image).unwrap();
        assert_eq!(feats.shape(), &[33, 33, 4]);
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut cfg = tiny_config();
        cfg.loss_weights = vec![1.0];
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.refinement_widths = vec![4, 4];
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.kernel = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn manifest_roundtrip_preserves_params() {
        let model = build_mcae(&tiny_config(), 4, 9).unwrap();
        let rebuilt = McaeModel::from_parts(model.manifest(), model.params.clone()).unwrap();
        for (a, b) in model.params.params.iter().zip(&rebuilt.params.params) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn short_training_reduces_loss() {
        let mut cfg = tiny_config();
        cfg.learning_rate = 1e-2;
        cfg.max_epochs = 10;
        cfg.batch_size = 8;
        let mut model = build_mcae(&cfg, 3, 11).unwrap();
        let patches = random_batch(16, 8, 8, 3, 4);
        let view = patches.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let before = model.evaluate_loss(&view).unwrap().0;
        let hist = train_mcae(&mut model, &view, &view, 5).unwrap();
        let after = model.evaluate_loss(&view).unwrap().0;
        assert!(after < before, "loss {before} -> {after}");
        assert_eq!(hist.train_loss.len(), hist.val_loss.len());
    }
}
