//! Semi-supervised MLP classifier: PELU encoder with a softmax class head
//! and a mirrored decoder providing per-layer reconstruction regularizers
//! that unlabeled pixels can train.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayD, ArrayView2, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::LabelMap;
use crate::error::{Error, Result};
use crate::graph::{take_grads, Graph, NodeId};
use crate::kernels::Stats;
use crate::optim::{xavier_init, Monitor, NadamState, ParamKind, ParamSet, PlateauSchedule};
use crate::scalar::Scalar;

/// Architecture and training parameters. `lambda_recon` has one weight per
/// reconstruction pair, shallowest first: data layer, each hidden layer, and
/// the class layer (hidden count + 2 entries).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SsmlpConfig {
    pub hidden_widths: Vec<usize>,
    pub lambda_recon: Vec<f32>,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub weight_decay: f32,
    pub drop_patience: usize,
    pub stop_patience: usize,
    /// Unlabeled rows drawn per labeled row in each batch.
    pub unlabeled_ratio: f64,
    /// Std of Gaussian noise injected into the decoder's class-layer input.
    pub noise_std: f32,
    pub max_epochs: usize,
}

impl Default for SsmlpConfig {
    fn default() -> Self {
        SsmlpConfig {
            hidden_widths: vec![1600, 950, 250, 225],
            lambda_recon: vec![1.0, 1.0, 0.1, 0.1, 0.1, 0.1],
            learning_rate: 2e-3,
            batch_size: 8,
            weight_decay: 1e-3,
            drop_patience: 25,
            stop_patience: 50,
            unlabeled_ratio: 1.0,
            noise_std: 0.0,
            max_epochs: 2000,
        }
    }
}

impl SsmlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_widths.is_empty() {
            return Err(Error::InvalidArgument("ssmlp needs at least one hidden layer".into()));
        }
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument("hidden widths must be positive".into()));
        }
        if self.lambda_recon.len() != self.hidden_widths.len() + 2 {
            return Err(Error::InvalidArgument(format!(
                "{} reconstruction weights for {} hidden layers (need hidden + 2)",
                self.lambda_recon.len(),
                self.hidden_widths.len()
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// SS-MLP parameters plus the feature standardization used at training time.
#[derive(Debug, Clone)]
pub struct SsmlpModel {
    pub config: SsmlpConfig,
    pub in_features: usize,
    pub classes: usize,
    pub params: ParamSet,
    /// Feature stats applied before inference; set by `train_ssmlp` callers.
    pub stats: Option<Stats>,
}

fn derive_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Xavier dense weights; biases zero, PELU parameters one.
pub fn build_ssmlp(config: &SsmlpConfig, in_features: usize, classes: usize, seed: u64) -> Result<SsmlpModel> {
    config.validate()?;
    if in_features == 0 || classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "ssmlp needs in_features >= 1 and classes >= 2, got {in_features}/{classes}"
        )));
    }
    let mut params = ParamSet::default();
    let mut pi = 0u64;
    let mut push_dense = |params: &mut ParamSet, name: &str, fin: usize, fout: usize, pelu: bool| -> Result<()> {
        let w = xavier_init(&[fin, fout], derive_seed(seed, pi))?;
        pi += 1;
        params.push(format!("{name}_w"), w, ParamKind::Weight);
        params.push(format!("{name}_b"), ArrayD::zeros(IxDyn(&[fout])), ParamKind::Bias);
        if pelu {
            params.push(format!("{name}_pelu_a"), ArrayD::from_elem(IxDyn(&[1]), 1.0f32), ParamKind::Pelu);
            params.push(format!("{name}_pelu_b"), ArrayD::from_elem(IxDyn(&[1]), 1.0f32), ParamKind::Pelu);
        }
        Ok(())
    };

    let widths = &config.hidden_widths;
    let mut fin = in_features;
    for (j, &w) in widths.iter().enumerate() {
        push_dense(&mut params, &format!("enc{j}"), fin, w, true)?;
        fin = w;
    }
    push_dense(&mut params, "head", fin, classes, false)?;
    // Decoder mirrors the encoder from the softmax output back to the data
    // layer; the final layer is linear.
    let mut din = classes;
    for j in 0..widths.len() {
        let dout = widths[widths.len() - 1 - j];
        push_dense(&mut params, &format!("dec{j}"), din, dout, true)?;
        din = dout;
    }
    push_dense(&mut params, "dec_out", din, in_features, false)?;

    Ok(SsmlpModel { config: config.clone(), in_features, classes, params, stats: None })
}

/// Nodes produced by one forward pass.
pub struct SsmlpGraphOutputs {
    pub logits: NodeId,
    pub probs: NodeId,
    /// (target, reconstruction), shallowest first: data layer, hidden layers,
    /// class layer. The class-layer target is detached so the pair acts as a
    /// denoising anchor rather than pulling the target toward its input.
    pub recon_pairs: Vec<(NodeId, NodeId)>,
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

fn dense<F: Scalar>(
    g: &mut Graph<F>,
    cursor: &mut Cursor<'_>,
    input: NodeId,
    pelu: bool,
) -> Result<NodeId> {
    let w = cursor.next();
    let b = cursor.next();
    let mm = g.matmul(input, w)?;
    let pre = g.add_bias(mm, b)?;
    if !pelu {
        return Ok(pre);
    }
    let a = cursor.next();
    let bp = cursor.next();
    g.pelu(pre, a, bp)
}

/// Build the forward pass on an existing graph. `noise` (same shape as the
/// softmax output) is added to the decoder input when present.
pub fn ssmlp_forward_graph<F: Scalar>(
    config: &SsmlpConfig,
    in_features: usize,
    g: &mut Graph<F>,
    ids: &[NodeId],
    input: NodeId,
    noise: Option<NodeId>,
) -> Result<SsmlpGraphOutputs> {
    let shape = g.value(input).shape().to_vec();
    if shape.len() != 2 || shape[1] != in_features {
        return Err(Error::shape(
            "ssmlp_forward input",
            format!("[N,{in_features}]"),
            format!("{:?}", shape),
        ));
    }
    let depth = config.hidden_widths.len();
    let mut cursor = Cursor { ids, pos: 0 };

    let mut acts = Vec::with_capacity(depth);
    let mut cur = input;
    for _ in 0..depth {
        cur = dense(g, &mut cursor, cur, true)?;
        acts.push(cur);
    }
    let logits = dense(g, &mut cursor, cur, false)?;
    let probs = g.softmax(logits)?;

    let dec_in = match noise {
        Some(n) => g.add(probs, n)?,
        None => probs,
    };
    let mut dec = dec_in;
    let mut dec_outs = Vec::with_capacity(depth);
    for _ in 0..depth {
        dec = dense(g, &mut cursor, dec, true)?;
        dec_outs.push(dec);
    }
    let data_recon = dense(g, &mut cursor, dec, false)?;

    // Pairs shallowest first. Hidden layer j (encoder act j) is mirrored by
    // decoder output depth-1-j; the class pair compares the decoder input
    // against the detached softmax output.
    let mut recon_pairs = vec![(input, data_recon)];
    for j in 0..depth {
        recon_pairs.push((acts[j], dec_outs[depth - 1 - j]));
    }
    let probs_detached = g.detach(probs);
    recon_pairs.push((probs_detached, dec_in));
    Ok(SsmlpGraphOutputs { logits, probs, recon_pairs })
}

/// Weighted reconstruction term over per-pair MSEs.
pub fn ssmlp_recon_term(per_pair_mse: &[f64], lambda: &[f64]) -> Result<f64> {
    if per_pair_mse.len() != lambda.len() {
        return Err(Error::InvalidArgument(format!(
            "{} reconstruction pairs for {} weights",
            per_pair_mse.len(),
            lambda.len()
        )));
    }
    Ok(per_pair_mse.iter().zip(lambda).map(|(m, w)| m * w).sum())
}

/// Graph-side objective: cross-entropy over the labeled rows plus the
/// weighted reconstruction term. `labels` are 0-based and aligned with
/// `labeled_rows`. Errors if nothing contributes (no labeled rows and all
/// weights zero).
pub fn ssmlp_loss_graph<F: Scalar>(
    g: &mut Graph<F>,
    out: &SsmlpGraphOutputs,
    lambda: &[f32],
    labeled_rows: &[usize],
    labels: &[usize],
) -> Result<(NodeId, Option<NodeId>, Vec<NodeId>)> {
    if labeled_rows.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} labeled rows vs {} labels",
            labeled_rows.len(),
            labels.len()
        )));
    }
    if out.recon_pairs.len() != lambda.len() {
        return Err(Error::InvalidArgument(format!(
            "{} reconstruction pairs for {} weights",
            out.recon_pairs.len(),
            lambda.len()
        )));
    }
    if labeled_rows.is_empty() && lambda.iter().all(|&w| w == 0.0) {
        return Err(Error::InvalidArgument(
            "ssmlp loss has no labeled rows and all reconstruction weights are zero".into(),
        ));
    }
    let mut terms: Vec<(F, NodeId)> = Vec::new();
    let ce = if labeled_rows.is_empty() {
        None
    } else {
        let rows = g.rows(out.logits, labeled_rows.to_vec())?;
        let ce = g.softmax_cross_entropy(rows, labels.to_vec())?;
        terms.push((F::one(), ce));
        Some(ce)
    };
    let mut mses = Vec::with_capacity(lambda.len());
    for (&(target, recon), &w) in out.recon_pairs.iter().zip(lambda) {
        let m = g.mse(recon, target)?;
        mses.push(m);
        if w != 0.0 {
            terms.push((F::from_f64(w as f64), m));
        }
    }
    if terms.is_empty() {
        let zero = g.constant(ArrayD::zeros(IxDyn(&[])));
        terms.push((F::one(), zero));
    }
    let total = g.weighted_sum(terms)?;
    Ok((total, ce, mses))
}

impl SsmlpModel {
    /// Class probabilities `[N,C]` for standardized features; pure.
    pub fn predict_probs(&self, features: &ArrayView2<'_, f32>) -> Result<Array2<f32>> {
        let mut g = Graph::<f32>::new();
        let ids: Vec<NodeId> =
            self.params.params.iter().map(|p| g.leaf(p.value.clone(), false)).collect();
        let input = g.constant(features.to_owned().into_dyn());
        let out = ssmlp_forward_graph(&self.config, self.in_features, &mut g, &ids, input, None)?;
        Ok(g.value(out.probs).clone().into_dimensionality::<ndarray::Ix2>().unwrap())
    }

    fn accuracy(&self, features: &ArrayView2<'_, f32>, labels: &[usize]) -> Result<(f64, f64)> {
        let probs = self.predict_probs(features)?;
        let pred = crate::kernels::argmax_rows(&probs.clone().into_dyn())?;
        let mut per_class: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
        let mut hits = 0u64;
        for (p, &t) in pred.iter().zip(labels) {
            let e = per_class.entry(t).or_insert((0, 0));
            e.1 += 1;
            if *p == t {
                e.0 += 1;
                hits += 1;
            }
        }
        let oa = hits as f64 / labels.len() as f64;
        let aa = per_class.values().map(|&(h, n)| h as f64 / n as f64).sum::<f64>()
            / per_class.len() as f64;
        Ok((oa, aa))
    }
}

/// Per-epoch record of an SS-MLP training run.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SsmlpHistory {
    pub train_loss: Vec<f64>,
    pub val_overall_accuracy: Vec<f64>,
    pub val_average_accuracy: Vec<f64>,
    pub lr: Vec<f64>,
    pub steps: usize,
    pub stopped_early: bool,
    pub warnings: Vec<String>,
}

/// Train on labeled rows (`labels` 0-based) plus an unlabeled pool that only
/// the reconstruction term sees. Splits the labeled set 90/10 stratified for
/// validation, monitors validation overall accuracy under the plateau
/// schedule, and logs average accuracy alongside. Deterministic for a fixed
/// seed.
pub fn train_ssmlp(
    model: &mut SsmlpModel,
    labeled: &ArrayView2<'_, f32>,
    labels: &[usize],
    unlabeled: &ArrayView2<'_, f32>,
    seed: u64,
) -> Result<SsmlpHistory> {
    let cfg = model.config.clone();
    let nl = labeled.dim().0;
    if nl == 0 || nl != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "train_ssmlp: {} labeled rows vs {} labels",
            nl,
            labels.len()
        )));
    }
    if labeled.dim().1 != model.in_features || (unlabeled.dim().0 > 0 && unlabeled.dim().1 != model.in_features) {
        return Err(Error::shape(
            "train_ssmlp features",
            format!("{}", model.in_features),
            format!("{} / {}", labeled.dim().1, unlabeled.dim().1),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            model.classes
        )));
    }
    let mut history = SsmlpHistory::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Stratified 90/10 split; every class keeps at least one training row.
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    for c in 0..model.classes {
        if !by_class.contains_key(&c) {
            let w = format!("class {} has no labeled training samples", c + 1);
            log::warn!("{w}");
            history.warnings.push(w);
        }
    }
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for rows in by_class.values() {
        let mut rows = rows.clone();
        rows.shuffle(&mut rng);
        let take = if rows.len() >= 2 { rows.len().div_ceil(10) } else { 0 };
        val_idx.extend(rows.drain(..take));
        train_idx.extend(rows);
    }
    if val_idx.is_empty() {
        let w = "validation fold is empty; monitoring training accuracy".to_string();
        log::warn!("{w}");
        history.warnings.push(w);
        val_idx = train_idx.clone();
    }
    let val_feats = labeled.select(Axis(0), &val_idx);
    let val_labels: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();

    let nu_pool = unlabeled.dim().0;
    let kinds = model.params.kinds();
    let mut opt = NadamState::<f32>::new(cfg.learning_rate);
    let mut schedule = PlateauSchedule::new(Monitor::AccuracyMax, cfg.drop_patience, cfg.stop_patience)?;
    let lambda = cfg.lambda_recon.clone();
    let noise = if cfg.noise_std > 0.0 {
        Some(Normal::new(0.0, cfg.noise_std as f64).unwrap())
    } else {
        None
    };
    let mut best_params = model.params.clone();
    let mut best_metric = f64::NEG_INFINITY;
    let mut steps = 0usize;

    for _epoch in 0..cfg.max_epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let n_lab = chunk.len();
            let n_unlab = if nu_pool > 0 {
                (cfg.unlabeled_ratio * n_lab as f64).round() as usize
            } else {
                0
            };
            let mut batch = Array2::<f32>::zeros((n_lab + n_unlab, model.in_features));
            for (r, &i) in chunk.iter().enumerate() {
                batch.row_mut(r).assign(&labeled.row(i));
            }
            for r in 0..n_unlab {
                let i = rng.gen_range(0..nu_pool);
                batch.row_mut(n_lab + r).assign(&unlabeled.row(i));
            }
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let labeled_rows: Vec<usize> = (0..n_lab).collect();

            let mut g = Graph::<f32>::new();
            let ids: Vec<NodeId> =
                model.params.params.iter().map(|p| g.leaf(p.value.clone(), true)).collect();
            let input = g.constant(batch.into_dyn());
            let noise_node = noise.map(|dist| {
                let mut arr = Array2::<f32>::zeros((n_lab + n_unlab, model.classes));
                for v in arr.iter_mut() {
                    *v = dist.sample(&mut rng) as f32;
                }
                g.constant(arr.into_dyn())
            });
            let out = ssmlp_forward_graph(&cfg, model.in_features, &mut g, &ids, input, noise_node)?;
            let (total, _, _) = ssmlp_loss_graph(&mut g, &out, &lambda, &labeled_rows, &batch_labels)?;
            let loss = g.scalar_value(total) as f64;
            if !loss.is_finite() {
                model.params = best_params;
                return Err(Error::NonFinite("ssmlp training loss".into()));
            }
            epoch_loss += loss;
            batches += 1;
            let mut grads = g.backward(total)?;
            let grads = take_grads(&mut grads, &g, &ids);
            let mut values: Vec<ArrayD<f32>> =
                model.params.params.iter().map(|p| p.value.clone()).collect();
            opt.step(&mut values, &kinds, &grads, cfg.weight_decay)?;
            for (p, v) in model.params.params.iter_mut().zip(values) {
                p.value = v;
            }
            steps += 1;
        }
        let (oa, aa) = model.accuracy(&val_feats.view(), &val_labels)?;
        history.train_loss.push(epoch_loss / batches as f64);
        history.val_overall_accuracy.push(oa);
        history.val_average_accuracy.push(aa);
        history.lr.push(opt.lr as f64);
        if oa > best_metric {
            best_metric = oa;
            best_params = model.params.clone();
        }
        match schedule.update(oa) {
            crate::optim::Action::Continue => {}
            crate::optim::Action::DropLr => opt.drop_lr(schedule.drop_factor as f32),
            crate::optim::Action::Stop => {
                history.stopped_early = true;
                break;
            }
        }
    }
    history.steps = steps;
    // Keep the best validation-accuracy parameters.
    model.params = best_params;
    Ok(history)
}

/// Classify every pixel of a feature image `[H,W,F]`. Applies the model's
/// stored stats when present. Returns ids 1..C (ties to the lowest index)
/// plus the per-class probability planes `[H,W,C]`.
pub fn predict_map(model: &SsmlpModel, features: &ArrayD<f32>) -> Result<(LabelMap, Array3<f32>)> {
    if features.ndim() != 3 {
        return Err(Error::shape("predict_map", "[H,W,F]", format!("{:?}", features.shape())));
    }
    let (h, w, f) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    if f != model.in_features {
        return Err(Error::shape(
            "predict_map features",
            format!("{}", model.in_features),
            format!("{f}"),
        ));
    }
    let mut flat = features.view().into_shape_with_order((h * w, f)).unwrap().to_owned();
    if let Some(stats) = &model.stats {
        let dynflat = crate::kernels::apply_stats(&flat.clone().into_dyn(), stats)?;
        flat = dynflat.into_dimensionality::<ndarray::Ix2>().unwrap();
    }
    let mut ids = Array2::<u16>::zeros((h, w));
    let mut probs = Array3::<f32>::zeros((h, w, model.classes));
    let chunk = 2048usize;
    let mut start = 0;
    while start < h * w {
        let end = (start + chunk).min(h * w);
        let part = flat.slice(ndarray::s![start..end, ..]);
        let p = model.predict_probs(&part)?;
        let winners = crate::kernels::argmax_rows(&p.clone().into_dyn())?;
        for (r, row) in (start..end).enumerate() {
            let (y, x) = (row / w, row % w);
            ids[[y, x]] = (winners[r] + 1) as u16;
            for c in 0..model.classes {
                probs[[y, x, c]] = p[[r, c]];
            }
        }
        start = end;
    }
    let names = (1..=model.classes).map(|c| format!("class_{c}")).collect();
    Ok((LabelMap::new(ids, names)?, probs))
}

/// Serialization glue for checkpoints.
#[derive(Debug, Serialize, Deserialize)]
pub struct SsmlpManifest {
    pub config: SsmlpConfig,
    pub in_features: usize,
    pub classes: usize,
    pub stats: Option<Stats>,
}

impl SsmlpModel {
    pub fn manifest(&self) -> SsmlpManifest {
        SsmlpManifest {
            config: self.config.clone(),
            in_features: self.in_features,
            classes: self.classes,
            stats: self.stats.clone(),
        }
    }

    pub fn from_parts(manifest: SsmlpManifest, params: ParamSet) -> Result<Self> {
        let reference = build_ssmlp(&manifest.config, manifest.in_features, manifest.classes, 0)?;
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
        Ok(SsmlpModel {
            config: manifest.config,
            in_features: manifest.in_features,
            classes: manifest.classes,
            params,
            stats: manifest.stats,
        })
    }
}
