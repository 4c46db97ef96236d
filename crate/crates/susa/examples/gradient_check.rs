//! Finite-difference verification of the training gradients at toy widths.
//!
//! Run with: cargo run --release --example gradient_check

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use susa::gradcheck::grad_check;
use susa::mcae::{build_mcae, mcae_forward_graph, mcae_loss_graph, McaeConfig};
use susa::ssmlp::{build_ssmlp, ssmlp_forward_graph, ssmlp_loss_graph, SsmlpConfig};

fn main() -> susa::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    // Full MCAE structure (pooling, lateral skips, multi-loss) at toy widths.
    let cfg = McaeConfig {
        encoder_widths: vec![3, 4],
        refinement_widths: vec![3],
        loss_weights: vec![1.0, 0.1],
        ..McaeConfig::default()
    };
    let model = build_mcae(&cfg, 2, 1)?;
    let params = model.params.values_f64();
    let input: ArrayD<f64> =
        ArrayD::from_shape_fn(IxDyn(&[2, 4, 4, 2]), |_| rng.gen_range(-1.0..1.0));
    let cfg2 = cfg.clone();
    let err = grad_check(
        move |g, ids| {
            let x = g.constant(input.clone());
            let out = mcae_forward_graph(&cfg2, 2, g, ids, x)?;
            let (total, _) = mcae_loss_graph(g, &out.recon_pairs, &cfg2.loss_weights)?;
            Ok(total)
        },
        &params,
        1e-5,
    )?;
    println!("mcae multi-loss max relative gradient error: {err:.3e}");

    // Semi-supervised MLP with every reconstruction term active.
    let scfg = SsmlpConfig {
        hidden_widths: vec![5, 4],
        lambda_recon: vec![1.0, 1.0, 0.1, 0.1],
        ..SsmlpConfig::default()
    };
    let smodel = build_ssmlp(&scfg, 3, 3, 2)?;
    let sparams = smodel.params.values_f64();
    let sinput: ArrayD<f64> = ArrayD::from_shape_fn(IxDyn(&[6, 3]), |_| rng.gen_range(-1.0..1.0));
    let scfg2 = scfg.clone();
    let err = grad_check(
        move |g, ids| {
            let x = g.constant(sinput.clone());
            let out = ssmlp_forward_graph(&scfg2, 3, g, ids, x, None)?;
            let (total, _, _) =
                ssmlp_loss_graph(g, &out, &scfg2.lambda_recon, &[0, 2, 4], &[0, 1, 2])?;
            Ok(total)
        },
        &sparams,
        1e-5,
    )?;
    println!("ssmlp semi-supervised loss max relative gradient error: {err:.3e}");
    Ok(())
}
