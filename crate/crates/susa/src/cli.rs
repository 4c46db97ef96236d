//! Command-line pipeline. Every command that writes artifacts also writes a
//! `<out>.run.json` manifest recording the resolved config, the seed, and
//! SHA-256 digests of its inputs, so runs can be audited and reproduced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::{ArrayD, Axis, IxDyn};
use sha2::{Digest, Sha256};

use crate::dataio::{
    load_cube, load_label_map, load_tensor, lowshot_split, sample_patches, save_cube,
    save_label_map, save_tensor, synth_scene, SyntheticSceneSpec,
};
use crate::error::{Error, Result};
use crate::eval::{confusion, dissimilarity, metrics};
use crate::kernels::standardize;
use crate::mcae::{build_mcae, mcae_forward_graph, mcae_loss_graph, Activation, McaeConfig};
use crate::smcae::{fuse_sensor_features, smcae_extract, train_smcae_stack, SmcaeManifest, SmcaeStack};
use crate::ssmlp::{
    build_ssmlp, predict_map, ssmlp_forward_graph, ssmlp_loss_graph, train_ssmlp, SsmlpConfig,
    SsmlpManifest, SsmlpModel,
};

#[derive(Parser, Debug)]
#[command(name = "susa", version, about = "Low-shot hyperspectral segmentation pipeline")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled scene.
    Synth(SynthArgs),
    /// Sample training patches from one or more cubes.
    SamplePatches(SamplePatchesArgs),
    /// Train a stacked MCAE feature extractor on patches.
    TrainSmcae(TrainSmcaeArgs),
    /// Extract stacked features for a whole cube.
    Extract(ExtractArgs),
    /// Concatenate feature responses from multiple sensors.
    Fuse(FuseArgs),
    /// Train the semi-supervised MLP classifier on a low-shot split.
    TrainSsmlp(TrainSsmlpArgs),
    /// Classify every pixel of a feature image.
    Classify(ClassifyArgs),
    /// Compare a predicted map against ground truth.
    Evaluate(EvaluateArgs),
    /// Spearman representational dissimilarity between feature responses.
    Dissimilarity(DissimilarityArgs),
    /// Finite-difference check of the training gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    bands: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 0.02)]
    noise: f32,
    #[arg(long, default_value_t = 0.05)]
    variation: f32,
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SamplePatchesArgs {
    /// Input cube(s); repeatable.
    #[arg(long = "cube", required = true)]
    cubes: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    size: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainSmcaeArgs {
    #[arg(long)]
    patches: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    stages: usize,
    #[arg(long)]
    seed: u64,
    /// Uniform shrink factor on all layer widths.
    #[arg(long, default_value_t = 1.0)]
    width_scale: f64,
    #[arg(long, default_value_t = 2e-3)]
    lr: f32,
    #[arg(long, default_value_t = 512)]
    batch_size: usize,
    #[arg(long, default_value_t = 1000)]
    max_epochs: usize,
    #[arg(long)]
    max_steps: Option<usize>,
    /// `pelu` (multi-loss default) or `relu`.
    #[arg(long, default_value = "pelu")]
    activation: String,
    /// Comma-separated multi-loss weights, shallowest first.
    #[arg(long)]
    loss_weights: Option<String>,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    stack: PathBuf,
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fail instead of resampling when the cube's bands differ from the
    /// stack's sensor.
    #[arg(long, default_value_t = false)]
    no_resample: bool,
}

#[derive(Args, Debug)]
struct FuseArgs {
    /// Feature tensors to concatenate; order is recorded in the manifest.
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainSsmlpArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Labeled training pixels per class.
    #[arg(long)]
    shots: usize,
    #[arg(long)]
    seed: u64,
    /// Comma-separated hidden layer widths.
    #[arg(long, default_value = "1600,950,250,225")]
    hidden: String,
    /// Comma-separated reconstruction weights (hidden count + 2 entries).
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long, default_value_t = 2e-3)]
    lr: f32,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    weight_decay: f32,
    #[arg(long, default_value_t = 1.0)]
    unlabeled_ratio: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_std: f32,
    #[arg(long, default_value_t = 2000)]
    max_epochs: usize,
    /// Size of the unlabeled pool sampled from the image (default: all pixels).
    #[arg(long)]
    unlabeled_count: Option<usize>,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Optional per-class probability planes.
    #[arg(long)]
    probs: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// Classifier checkpoint holding the low-shot split; enables the
    /// training-pixel-excluded protocol (reported alongside the inclusive one).
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DissimilarityArgs {
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    y: PathBuf,
    #[arg(long)]
    subsample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = crate::gradcheck::DEFAULT_STEP)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Digest inputs (including their sidecars when present) and write the run
/// manifest next to the primary output.
fn write_run_manifest(
    out: &Path,
    command: &str,
    seed: Option<u64>,
    config: serde_json::Value,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<()> {
    let mut digests = BTreeMap::new();
    for input in inputs {
        digests.insert(input.display().to_string(), sha256_file(input)?);
        let hdr = PathBuf::from(format!("{}.hdr", input.display()));
        if hdr.exists() {
            digests.insert(hdr.display().to_string(), sha256_file(&hdr)?);
        }
    }
    let manifest = serde_json::json!({
        "command": command,
        "seed": seed,
        "config": config,
        "inputs_sha256": digests,
        "outputs": outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    });
    let path = PathBuf::from(format!("{}.run.json", out.display()));
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad {what} entry: {t}")))
        })
        .collect()
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = SyntheticSceneSpec {
        classes: a.classes,
        bands: a.bands,
        height: a.height,
        width: a.width,
        noise: a.noise,
        intra_class_variation: a.variation,
        seed: a.seed,
        ..SyntheticSceneSpec::default()
    };
    let (cube, labels) = synth_scene(&spec)?;
    save_cube(&a.out, &cube)?;
    save_label_map(&a.labels, &labels)?;
    write_run_manifest(
        &a.out,
        "synth",
        Some(a.seed),
        serde_json::to_value(&spec).unwrap(),
        &[],
        &[&a.out, &a.labels],
    )?;
    println!(
        "synth: wrote {}x{}x{} cube to {} and labels to {}",
        spec.height,
        spec.width,
        spec.bands,
        a.out.display(),
        a.labels.display()
    );
    Ok(())
}

fn cmd_sample_patches(a: SamplePatchesArgs) -> Result<()> {
    let cubes: Vec<_> = a.cubes.iter().map(load_cube).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&crate::spectral::HsiCube> = cubes.iter().collect();
    let set = sample_patches(&refs, a.count, a.size, a.seed)?;
    let spec = &cubes[0].spec;
    let centers: Vec<String> = spec.centers_nm.iter().map(|v| v.to_string()).collect();
    let fwhms: Vec<String> = spec.fwhm_nm.iter().map(|v| v.to_string()).collect();
    let extra = vec![
        ("train_count".to_string(), set.train_count.to_string()),
        ("band_centers_nm".to_string(), centers.join(" ")),
        ("fwhm_nm".to_string(), fwhms.join(" ")),
        ("sensor".to_string(), spec.name.clone()),
    ];
    save_tensor(&a.out, &set.data.clone().into_dyn(), &extra)?;
    let inputs: Vec<&Path> = a.cubes.iter().map(|p| p.as_path()).collect();
    write_run_manifest(
        &a.out,
        "sample-patches",
        Some(a.seed),
        serde_json::json!({"count": a.count, "size": a.size, "train_count": set.train_count}),
        &inputs,
        &[&a.out],
    )?;
    println!(
        "sample-patches: wrote {} patches ({} train / {} val) to {}",
        a.count,
        set.train_count,
        a.count - set.train_count,
        a.out.display()
    );
    Ok(())
}

fn cube_sensor_from_tensor_sidecar(
    extra: &BTreeMap<String, String>,
) -> Result<crate::spectral::SensorSpec> {
    let centers: Vec<f64> = extra
        .get("band_centers_nm")
        .ok_or_else(|| Error::InvalidArgument("patch tensor missing band_centers_nm".into()))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::InvalidArgument(format!("bad center {t}"))))
        .collect::<Result<_>>()?;
    let fwhms: Vec<f64> = extra
        .get("fwhm_nm")
        .ok_or_else(|| Error::InvalidArgument("patch tensor missing fwhm_nm".into()))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::InvalidArgument(format!("bad fwhm {t}"))))
        .collect::<Result<_>>()?;
    let name = extra.get("sensor").cloned().unwrap_or_else(|| "unknown".to_string());
    crate::spectral::SensorSpec::new(name, centers, fwhms)
}

fn cmd_train_smcae(a: TrainSmcaeArgs) -> Result<()> {
    let (tensor, extra) = load_tensor(&a.patches)?;
    if tensor.ndim() != 4 {
        return Err(Error::shape("patch tensor", "[N,P,P,B]", format!("{:?}", tensor.shape())));
    }
    let train_count: usize = extra
        .get("train_count")
        .and_then(|s| s.parse().ok())
        .unwrap_or_else(|| tensor.shape()[0] - tensor.shape()[0] / 10);
    let sensor = match cube_sensor_from_tensor_sidecar(&extra) {
        Ok(s) => s,
        // Patch tensors without spectral metadata get a nominal layout.
        Err(_) => crate::spectral::SensorSpec::uniform("unknown", 400.0, 10.0, tensor.shape()[3], 10.0),
    };
    let mut config = McaeConfig {
        width_scale: a.width_scale,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        max_epochs: a.max_epochs,
        max_steps: a.max_steps,
        ..McaeConfig::default()
    };
    config.activation = match a.activation.as_str() {
        "pelu" => Activation::Pelu,
        "relu" => Activation::Relu,
        other => return Err(Error::InvalidArgument(format!("unknown activation {other}"))),
    };
    if let Some(lw) = &a.loss_weights {
        config.loss_weights = parse_list(lw, "loss weight")?;
    }
    let patches = tensor.into_dimensionality::<ndarray::Ix4>().unwrap();
    let (stack, histories) = train_smcae_stack(&patches, train_count, a.stages, &config, &sensor, a.seed)?;
    let manifest = stack.manifest();
    let config_json = serde_json::json!({
        "manifest": serde_json::to_value(&manifest).unwrap(),
        "histories": serde_json::to_value(&histories).unwrap(),
    });
    crate::dataio::save_checkpoint(&a.out, "smcae", &config_json, &stack.flat_params())?;
    write_run_manifest(
        &a.out,
        "train-smcae",
        Some(a.seed),
        serde_json::json!({"stages": a.stages, "config": serde_json::to_value(&config).unwrap()}),
        &[&a.patches],
        &[&a.out],
    )?;
    for (k, h) in histories.iter().enumerate() {
        println!(
            "train-smcae: stage {} finished after {} epochs ({} steps), final val loss {:.6}",
            k + 1,
            h.val_loss.len(),
            h.steps,
            h.val_loss.last().copied().unwrap_or(f64::NAN)
        );
    }
    println!("train-smcae: wrote stack checkpoint to {}", a.out.display());
    Ok(())
}

fn load_stack(path: &Path) -> Result<SmcaeStack> {
    let (kind, config, params) = crate::dataio::load_checkpoint(path)?;
    if kind != "smcae" {
        return Err(Error::format(path.display().to_string(), format!("expected smcae checkpoint, found {kind}")));
    }
    let manifest: SmcaeManifest = serde_json::from_value(config["manifest"].clone())
        .map_err(|e| Error::format(path.display().to_string(), format!("stack manifest: {e}")))?;
    SmcaeStack::from_parts(manifest, params)
}

fn cmd_extract(a: ExtractArgs) -> Result<()> {
    let stack = load_stack(&a.stack)?;
    let cube = load_cube(&a.cube)?;
    let features = smcae_extract(&stack, &cube, !a.no_resample)?;
    let extra = vec![
        ("source_cube".to_string(), a.cube.display().to_string()),
        ("sensor".to_string(), stack.sensor.name.clone()),
        ("stages".to_string(), stack.stages().to_string()),
    ];
    save_tensor(&a.out, &features, &extra)?;
    write_run_manifest(
        &a.out,
        "extract",
        None,
        serde_json::json!({"resample": !a.no_resample}),
        &[&a.stack, &a.cube],
        &[&a.out],
    )?;
    println!(
        "extract: wrote {:?} feature response to {}",
        features.shape(),
        a.out.display()
    );
    Ok(())
}

fn cmd_fuse(a: FuseArgs) -> Result<()> {
    let mut tensors = Vec::new();
    for p in &a.inputs {
        tensors.push(load_tensor(p)?.0);
    }
    let fused = fuse_sensor_features(&tensors)?;
    let order: Vec<String> = a.inputs.iter().map(|p| p.display().to_string()).collect();
    let extra = vec![("fused_inputs".to_string(), order.join(" "))];
    save_tensor(&a.out, &fused, &extra)?;
    let inputs: Vec<&Path> = a.inputs.iter().map(|p| p.as_path()).collect();
    write_run_manifest(&a.out, "fuse", None, serde_json::json!({"order": order}), &inputs, &[&a.out])?;
    println!("fuse: wrote {:?} fused response to {}", fused.shape(), a.out.display());
    Ok(())
}

fn cmd_train_ssmlp(a: TrainSsmlpArgs) -> Result<()> {
    let (features, _) = load_tensor(&a.features)?;
    if features.ndim() != 3 {
        return Err(Error::shape("feature tensor", "[H,W,F]", format!("{:?}", features.shape())));
    }
    let labels = load_label_map(&a.labels)?;
    let (h, w, f) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    if labels.height() != h || labels.width() != w {
        return Err(Error::shape(
            "label map",
            format!("{h}x{w}"),
            format!("{}x{}", labels.height(), labels.width()),
        ));
    }
    let classes = labels.classes();

    let hidden: Vec<usize> = parse_list(&a.hidden, "hidden width")?;
    let lambda = match &a.lambda {
        Some(s) => parse_list(s, "reconstruction weight")?,
        None => {
            let mut l = vec![1.0f32, 1.0];
            l.extend(std::iter::repeat(0.1).take(hidden.len()));
            l
        }
    };
    let config = SsmlpConfig {
        hidden_widths: hidden,
        lambda_recon: lambda,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        weight_decay: a.weight_decay,
        unlabeled_ratio: a.unlabeled_ratio,
        noise_std: a.noise_std,
        max_epochs: a.max_epochs,
        ..SsmlpConfig::default()
    };

    // Standardize features over the whole image; the stats ship with the model.
    let (std_features, stats) = standardize(&features)?;
    let flat = std_features.view().into_shape_with_order((h * w, f)).unwrap();

    let split = lowshot_split(&labels, a.shots, &BTreeMap::new(), a.seed)?;
    for (&class, &short) in &split.shortfall {
        log::warn!("class {class} short {short} labeled pixels of the requested {}", a.shots);
    }
    let mut rows = Vec::new();
    let mut row_labels = Vec::new();
    for (class, (y, x)) in split.training_pixels() {
        rows.push(y * w + x);
        row_labels.push(class as usize - 1);
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("low-shot split produced no labeled pixels".into()));
    }
    let labeled = flat.select(Axis(0), &rows);

    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let pool_size = a.unlabeled_count.unwrap_or(h * w).min(h * w);
    let mut pool_rows: Vec<usize> = (0..h * w).collect();
    if pool_size < h * w {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed ^ 0x5eed);
        pool_rows.shuffle(&mut rng);
        pool_rows.truncate(pool_size);
        pool_rows.sort_unstable();
    }
    let unlabeled = flat.select(Axis(0), &pool_rows);

    let mut model = build_ssmlp(&config, f, classes, a.seed)?;
    model.stats = Some(stats);
    let history = train_ssmlp(&mut model, &labeled.view(), &row_labels, &unlabeled.view(), a.seed)?;

    let manifest = model.manifest();
    let config_json = serde_json::json!({
        "manifest": serde_json::to_value(&manifest).unwrap(),
        "history": serde_json::to_value(&history).unwrap(),
        "split": serde_json::to_value(&split).unwrap(),
    });
    crate::dataio::save_checkpoint(&a.out, "ssmlp", &config_json, &model.params)?;
    write_run_manifest(
        &a.out,
        "train-ssmlp",
        Some(a.seed),
        serde_json::json!({"shots": a.shots, "config": serde_json::to_value(&config).unwrap()}),
        &[&a.features, &a.labels],
        &[&a.out],
    )?;
    println!(
        "train-ssmlp: {} labeled pixels, {} epochs ({} steps), best val OA {:.4}",
        rows.len(),
        history.val_overall_accuracy.len(),
        history.steps,
        history
            .val_overall_accuracy
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    );
    println!("train-ssmlp: wrote classifier checkpoint to {}", a.out.display());
    Ok(())
}

fn load_ssmlp(path: &Path) -> Result<SsmlpModel> {
    let (kind, config, params) = crate::dataio::load_checkpoint(path)?;
    if kind != "ssmlp" {
        return Err(Error::format(path.display().to_string(), format!("expected ssmlp checkpoint, found {kind}")));
    }
    let manifest: SsmlpManifest = serde_json::from_value(config["manifest"].clone())
        .map_err(|e| Error::format(path.display().to_string(), format!("ssmlp manifest: {e}")))?;
    SsmlpModel::from_parts(manifest, params)
}

fn cmd_classify(a: ClassifyArgs) -> Result<()> {
    let model = load_ssmlp(&a.model)?;
    let (features, _) = load_tensor(&a.features)?;
    let (map, probs) = predict_map(&model, &features)?;
    save_label_map(&a.out, &map)?;
    let mut outputs: Vec<&Path> = vec![&a.out];
    if let Some(pp) = &a.probs {
        save_tensor(pp, &probs.into_dyn(), &[])?;
        outputs.push(pp);
    }
    write_run_manifest(
        &a.out,
        "classify",
        None,
        serde_json::json!({"classes": model.classes}),
        &[&a.model, &a.features],
        &outputs,
    )?;
    println!("classify: wrote prediction map to {}", a.out.display());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let truth = load_label_map(&a.truth)?;
    let pred = load_label_map(&a.pred)?;
    let inclusive = metrics(&confusion(&truth, &pred)?)?;

    // With the training split available, the headline protocol excludes the
    // training pixels; the all-labeled-pixels numbers are reported alongside.
    let mut text = String::new();
    let mut inputs: Vec<&Path> = vec![&a.truth, &a.pred];
    if let Some(split_path) = &a.split {
        let (kind, config, _) = crate::dataio::load_checkpoint(split_path)?;
        if kind != "ssmlp" {
            return Err(Error::InvalidArgument(format!(
                "--split expects a classifier checkpoint, got kind {kind}"
            )));
        }
        let split: crate::dataio::LowShotSplit = serde_json::from_value(
            config
                .get("split")
                .cloned()
                .ok_or_else(|| Error::InvalidArgument("checkpoint has no training split".into()))?,
        )
        .map_err(|e| Error::InvalidArgument(format!("bad split in checkpoint: {e}")))?;
        let mut masked = truth.clone();
        for (_, (y, x)) in split.training_pixels() {
            masked.ids[[y, x]] = 0;
        }
        let exclusive = metrics(&confusion(&masked, &pred)?)?;
        text.push_str("protocol: excluding_training_pixels\n");
        text.push_str(&exclusive.to_text());
        text.push_str("protocol: all_labeled_pixels\n");
        text.push_str(&inclusive.to_text());
        inputs.push(split_path.as_path());
    } else {
        text.push_str(&inclusive.to_text());
    }
    print!("{text}");
    if let Some(out) = &a.out {
        std::fs::write(out, &text).map_err(|e| Error::io(out.display().to_string(), e))?;
        write_run_manifest(out, "evaluate", None, serde_json::json!({}), &inputs, &[out])?;
    }
    Ok(())
}

fn cmd_dissimilarity(a: DissimilarityArgs) -> Result<()> {
    let (x, _) = load_tensor(&a.x)?;
    let (y, _) = load_tensor(&a.y)?;
    let d = dissimilarity(&x, &y, a.subsample.map(|cap| (cap, a.seed)))?;
    let text = format!("dissimilarity: {d:.6}\n");
    print!("{text}");
    if let Some(out) = &a.out {
        std::fs::write(out, &text).map_err(|e| Error::io(out.display().to_string(), e))?;
        write_run_manifest(
            out,
            "dissimilarity",
            Some(a.seed),
            serde_json::json!({"subsample": a.subsample}),
            &[&a.x, &a.y],
            &[out],
        )?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    // Tiny MCAE: full structure (pool, skip, multi-loss) at toy widths.
    let mcae_cfg = McaeConfig {
        encoder_widths: vec![3, 4],
        refinement_widths: vec![3],
        loss_weights: vec![1.0, 0.1],
        batch_size: 2,
        ..McaeConfig::default()
    };
    let bands = 2usize;
    let model = build_mcae(&mcae_cfg, bands, a.seed)?;
    let params = model.params.values_f64();
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed.wrapping_add(7));
    let input: Vec<f64> = (0..2 * 4 * 4 * bands).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let input = ArrayD::from_shape_vec(IxDyn(&[2, 4, 4, bands]), input).unwrap();
    let cfg = mcae_cfg.clone();
    let mcae_err = crate::gradcheck::grad_check(
        move |g, ids| {
            let x = g.constant(input.clone());
            let out = mcae_forward_graph(&cfg, bands, g, ids, x)?;
            let (total, _) = mcae_loss_graph(g, &out.recon_pairs, &cfg.loss_weights)?;
            Ok(total)
        },
        &params,
        a.step,
    )?;
    println!("gradcheck: mcae multi-loss max relative error {mcae_err:.3e}");

    // Tiny SS-MLP with every loss term active.
    let ssmlp_cfg = SsmlpConfig {
        hidden_widths: vec![5, 4],
        lambda_recon: vec![1.0, 1.0, 0.1, 0.1],
        ..SsmlpConfig::default()
    };
    let smodel = build_ssmlp(&ssmlp_cfg, 3, 3, a.seed.wrapping_add(1))?;
    let sparams = smodel.params.values_f64();
    let sinput: Vec<f64> = (0..6 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let sinput = ArrayD::from_shape_vec(IxDyn(&[6, 3]), sinput).unwrap();
    let scfg = ssmlp_cfg.clone();
    let ssmlp_err = crate::gradcheck::grad_check(
        move |g, ids| {
            let x = g.constant(sinput.clone());
            let out = ssmlp_forward_graph(&scfg, 3, g, ids, x, None)?;
            let (total, _, _) =
                ssmlp_loss_graph(g, &out, &scfg.lambda_recon, &[0, 1, 2, 3], &[0, 1, 2, 0])?;
            Ok(total)
        },
        &sparams,
        a.step,
    )?;
    println!("gradcheck: ssmlp semi-supervised loss max relative error {ssmlp_err:.3e}");

    if mcae_err > a.tolerance || ssmlp_err > a.tolerance {
        return Err(Error::NonFinite(format!(
            "gradient check failed: errors {mcae_err:.3e} / {ssmlp_err:.3e} exceed {:.1e}",
            a.tolerance
        )));
    }
    println!("gradcheck: all gradients within {:.1e}", a.tolerance);
    Ok(())
}

/// Parse and run; callable from tests for end-to-end determinism checks.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::SamplePatches(a) => cmd_sample_patches(a),
        Command::TrainSmcae(a) => cmd_train_smcae(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::TrainSsmlp(a) => cmd_train_ssmlp(a),
        Command::Classify(a) => cmd_classify(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Dissimilarity(a) => cmd_dissimilarity(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}
