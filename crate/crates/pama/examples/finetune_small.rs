//! Supervised fine-tuning on the arrangement pair: start from a short
//! masked-autoencoder pretraining, attach a task head, train everything on
//! cross-entropy over class-token logits, and report held-out metrics.
//! Early stopping watches validation macro-F1.
//!
//!     cargo run --release --example finetune_small

use pama::geometry::GeometryConfig;
use pama::model::ModelHyper;
use pama::synth::{gen_dataset, pair_spec, SplitCounts, SynthSpec};
use pama::training::{finetune, load_dataset, pretrain, TrainConfig, TrainMode};

fn main() -> Result<(), Box<dyn std::error::Error>> {
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
    gen_dataset(&spec, &SplitCounts { train: 32, val: 12, test: 16 }, dir.path())?;
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

    let pre_cfg = TrainConfig { epochs: 8, batch_size: 8, seed: 9, ..TrainConfig::default() };
    let mut pre_records = Vec::new();
    let base = pretrain(&ds, &hyper, &pre_cfg, 1, &mut pre_records)?;
    let pre_loss = pre_records.iter().rev().find(|r| r.split == "val").unwrap().loss;
    println!("pretraining done, final val reconstruction loss {pre_loss:.4}");

    // Fine-tuning uses a 10× smaller learning rate than pretraining: the
    // encoder starts from useful weights and should move gently.
    let ft_cfg = TrainConfig {
        lr: 1e-4,
        epochs: 15,
        batch_size: 8,
        seed: 10,
        early_stop_patience: 4,
        mode: TrainMode::Finetune,
        ..TrainConfig::default()
    };
    let mut records = Vec::new();
    let (ckpt, test_metrics) = finetune(&ds, &base, &ft_cfg, 1, &mut records)?;

    println!("epoch  split  loss      macro-F1");
    for r in &records {
        match &r.metrics {
            Some(m) => println!("{:>5}  {:5}  {:.4}  {:.3}", r.epoch, r.split, r.loss, m.macro_f1),
            None => println!("{:>5}  {:5}  {:.4}", r.epoch, r.split, r.loss),
        }
    }

    println!("\ntest metrics at the best-validation epoch:");
    println!("  accuracy  {:.3}", test_metrics.accuracy);
    println!("  macro-F1  {:.3}", test_metrics.macro_f1);
    match test_metrics.macro_auc {
        Some(auc) => println!("  macro-AUC {auc:.3}"),
        None => println!("  macro-AUC not defined on this split"),
    }
    println!(
        "fine-tuned checkpoint carries a {}-class task head",
        ckpt.hyper.n_classes.unwrap()
    );
    Ok(())
}
