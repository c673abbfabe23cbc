//! Run a short masked-reconstruction pretraining and watch the loss fall.
//! The encoder only ever sees 25% of each bag's patches; the decoder must
//! reconstruct the hidden 75% from the visible content plus the position
//! information, so the loss can only drop by learning position-aware
//! structure.
//!
//!     cargo run --release --example pretrain_small

use pama::geometry::GeometryConfig;
use pama::model::ModelHyper;
use pama::synth::{gen_dataset, pair_spec, SplitCounts, SynthSpec};
use pama::training::{load_dataset, pretrain, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Two arrangement classes, small bags, small model — all sized so this
    // finishes in well under a minute.
    let spec = SynthSpec {
        d_f: 16,
        n_p_min: 48,
        n_p_max: 96,
        geometry: GeometryConfig {
            patches_per_anchor: 32,
            polar_bins: 8,
            d_max: 16,
            kmeans_iters: 25,
            seed: 0,
        },
        ..pair_spec()
    };
    let dir = tempfile::tempdir()?;
    gen_dataset(&spec, &SplitCounts { train: 24, val: 8, test: 8 }, dir.path())?;
    let ds = load_dataset(dir.path())?;

    let hyper = ModelHyper {
        d_f: 16,
        heads: 2,
        enc_blocks: 2,
        dec_blocks: 1,
        mlp_expansion: 2,
        polar_bins: 8,
        d_max: 16,
        max_anchors: 4,
        n_classes: None,
        kro_enabled: true,
    };
    let cfg = TrainConfig {
        lr: 1e-3,
        epochs: 8,
        batch_size: 8,
        r: 0.75,
        p_drop: 0.2,
        seed: 1,
        ..TrainConfig::default()
    };

    let mut records = Vec::new();
    let ckpt = pretrain(&ds, &hyper, &cfg, 1, &mut records)?;

    println!("epoch  split  loss        lr");
    for r in &records {
        println!("{:>5}  {:5}  {:.6}  {:.2e}", r.epoch, r.split, r.loss, r.lr);
    }

    let first = records.iter().find(|r| r.split == "train").unwrap().loss;
    let last = records.iter().rev().find(|r| r.split == "train").unwrap().loss;
    println!(
        "\ntrain reconstruction loss {first:.4} → {last:.4} over {} epochs",
        cfg.epochs
    );
    assert!(last < first, "loss should fall on this workload");

    // The checkpoint keeps the best-validation weights plus the optimizer
    // moments, so training could resume from here.
    println!(
        "checkpoint: step {}, optimizer state {}",
        ckpt.global_step,
        if ckpt.opt.is_some() { "present" } else { "absent" }
    );
    Ok(())
}
