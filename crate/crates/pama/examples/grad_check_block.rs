//! Verify the hand-rolled reverse-mode gradients against central finite
//! differences, end to end through the masked-reconstruction loss: anchor
//! gather, both cross-attention directions, positional-bias lookups,
//! kernel re-orientation between blocks, the decoder, and the masked MSE.
//!
//! The model here is deliberately tiny (4-dim features, 2+1 blocks) so the
//! check over every single parameter finishes in a few seconds.
//!
//!     cargo run --example grad_check_block

use pama::geometry::{build_bag, GeometryConfig};
use pama::gradcheck::grad_check;
use pama::model::{
    bind_model, make_mask_plan, pretrain_loss, ModelHyper, ModelParams, Trainability,
};
use pama::seed::{self, stream};
use pama::tensor::{Tape, TensorError};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let hyper = ModelHyper {
        d_f: 4,
        heads: 2,
        enc_blocks: 2,
        dec_blocks: 1,
        mlp_expansion: 2,
        polar_bins: 4,
        d_max: 4,
        max_anchors: 3,
        n_classes: None,
        kro_enabled: true,
    };
    let params = ModelParams::init(&hyper, 11)?;

    // 6 patches on a 3×2 grid, 2 anchors, half of the patches masked.
    let coords: Vec<(i32, i32)> = (0..6).map(|i| (i % 3, i / 3)).collect();
    let features: Vec<f32> = (0..24).map(|i| ((i % 5) as f32 - 2.0) / 2.0).collect();
    let geometry = GeometryConfig {
        patches_per_anchor: 3,
        polar_bins: 4,
        d_max: 4,
        kmeans_iters: 20,
        seed: 2,
    };
    let bag = build_bag(coords, features, 4, None, geometry)?;
    let plan = make_mask_plan(bag.n_patches(), 0.5, &mut seed::rng(3, &[stream::MASK]))?;
    println!(
        "bag: {} patches, {} anchors; masking rows {:?}",
        bag.n_patches(),
        bag.n_anchors(),
        plan.masked
    );

    // One closure evaluates loss (and optionally the analytic gradient) at
    // an arbitrary parameter vector; grad_check re-runs it 2·|θ| times.
    let theta0 = params.flatten();
    let run = |theta: &[f64]| -> Result<(f64, Vec<f64>), TensorError> {
        let mut p = params.clone();
        p.assign_flat(theta);
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, &p, Trainability::All);
        let mut rng = seed::rng(0, &[stream::DROPOUT]);
        let (loss, _) = pretrain_loss(&mut tape, &bag, &plan, &bound, &hyper, 0.0, false, &mut rng)
            .map_err(|e| match e {
                pama::model::ModelError::Tensor(t) => t,
                other => panic!("unexpected error: {other}"),
            })?;
        let grads = tape.backward(loss)?;
        let mut flat = Vec::with_capacity(theta.len());
        for (_, var) in &bound.named {
            match grads.get(*var) {
                Some(g) => flat.extend_from_slice(g),
                None => flat.extend(std::iter::repeat(0.0).take(tape.value(*var).numel())),
            }
        }
        Ok((tape.scalar_value(loss), flat))
    };

    let (loss, analytic) = run(&theta0)?;
    println!("loss at θ₀: {loss:.6}, parameters: {}", theta0.len());

    let worst = grad_check(|t| run(t).map(|(l, _)| l), &theta0, &analytic, 1e-5)?;
    println!("max |analytic − finite difference| / max(1, |fd|): {worst:.3e}");
    assert!(worst < 1e-4, "gradient check failed: {worst}");
    println!("gradients agree with finite differences");
    Ok(())
}
