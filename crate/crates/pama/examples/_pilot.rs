//! Scratch pilot for sizing the acceptance experiments. Not part of the
//! deliverable; deleted before the suite is final.

use std::path::Path;
use std::time::Instant;

use pama::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use pama::model::{ModelHyper, ModelParams};
use pama::synth::{default_spec, gen_dataset, pair_spec, MeanFeatureClassifier, SplitCounts};
use pama::training::{
    finetune, linear_probe, load_dataset, pretrain, random_checkpoint, Dataset, TrainConfig,
};

fn hyper(n_classes: usize, kro: bool) -> ModelHyper {
    ModelHyper {
        d_f: 32,
        n_classes: Some(n_classes),
        kro_enabled: kro,
        ..ModelHyper::default()
    }
}

fn cached_pretrain(path: &str, ds: &Dataset, hyper: &ModelHyper, cfg: &TrainConfig) -> Checkpoint {
    if Path::new(path).exists() {
        eprintln!("  (reusing {path})");
        return load_checkpoint(Path::new(path)).unwrap();
    }
    let t = Instant::now();
    let mut recs = Vec::new();
    let ckpt = pretrain(ds, hyper, cfg, 1, &mut recs).unwrap();
    save_checkpoint(&ckpt, Path::new(path)).unwrap();
    let train: Vec<f64> =
        recs.iter().filter(|r| r.split == "train").map(|r| r.loss).collect();
    eprintln!(
        "  (pretrained {path} in {:.0}s; loss {:.4} -> {:.4}, ratio {:.3})",
        t.elapsed().as_secs_f64(),
        train[0],
        train[train.len() - 1],
        train[train.len() - 1] / train[0]
    );
    ckpt
}

fn probe(ds: &Dataset, params: &ModelParams, h: &ModelHyper, label: &str) {
    let cfg = TrainConfig {
        seed: 5,
        lr: 1e-2,
        epochs: 60,
        early_stop_patience: 0,
        ..TrainConfig::default()
    };
    let mut recs = Vec::new();
    let (m, _) = linear_probe(ds, params, h, &cfg, 1.0, &mut recs).unwrap();
    eprintln!("  probe {label}: acc {:.3} f1 {:.3}", m.accuracy, m.macro_f1);
}

fn ft(ds: &Dataset, base: &Checkpoint, seed: u64, lr: f64, epochs: usize, p_drop: f64, label: &str) {
    let cfg = TrainConfig { seed, lr, epochs, p_drop, early_stop_patience: 0, ..TrainConfig::default() };
    let t = Instant::now();
    let mut recs = Vec::new();
    let (_, report) = finetune(ds, base, &cfg, 1, &mut recs).unwrap();
    let val: Vec<f64> = recs
        .iter()
        .filter(|r| r.split == "val")
        .filter_map(|r| r.metrics.as_ref().map(|m| m.macro_f1))
        .collect();
    let traj: Vec<String> =
        val.iter().enumerate().step_by(5).map(|(e, f)| format!("{e}:{f:.2}")).collect();
    eprintln!(
        "  ft {label}: test acc {:.3} f1 {:.3} best_val {:.3} ({:.0}s)\n    val {}",
        report.accuracy,
        report.macro_f1,
        val.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        t.elapsed().as_secs_f64(),
        traj.join(" ")
    );
}

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "pair".into());
    match mode.as_str() {
        "pair" => {
            let dir = tempfile::tempdir().unwrap();
            let counts = SplitCounts { train: 120, val: 30, test: 400 };
            gen_dataset(&pair_spec(), &counts, dir.path()).unwrap();
            let ds = load_dataset(dir.path()).unwrap();
            let train_bags: Vec<_> = ds
                .train
                .iter()
                .map(|&i| (&ds.items[i].bag, ds.items[i].class.unwrap()))
                .collect();
            let oracle = MeanFeatureClassifier::fit(&train_bags);
            let hits = ds
                .test
                .iter()
                .filter(|&&i| oracle.predict(&ds.items[i].bag) == ds.items[i].class.unwrap())
                .count();
            eprintln!("pair v2: oracle acc {:.3} (test 400)", hits as f64 / ds.test.len() as f64);

            let h = hyper(2, true);
            let pre_cfg = TrainConfig { seed: 11, epochs: 90, ..TrainConfig::default() };
            let pre = cached_pretrain("/tmp/v2_pairpre.pamc", &ds, &h, &pre_cfg);
            probe(&ds, &pre.params, &h, "pair from-pre90");
            probe(&ds, &ModelParams::init(&h, 500).unwrap(), &h, "pair from-random");
            ft(&ds, &pre, 7, 1e-3, 40, 0.2, "pair from-pre lr1e-3");
            let rand = random_checkpoint(&h, ds.items[0].bag.config.clone(), 7).unwrap();
            ft(&ds, &rand, 7, 1e-3, 40, 0.2, "pair from-rand lr1e-3");
        }
        "pairlong" => {
            let dir = tempfile::tempdir().unwrap();
            let counts = SplitCounts { train: 120, val: 30, test: 400 };
            gen_dataset(&pair_spec(), &counts, dir.path()).unwrap();
            let ds = load_dataset(dir.path()).unwrap();
            let h = hyper(2, true);
            let pre_cfg = TrainConfig { seed: 11, epochs: 90, ..TrainConfig::default() };
            let pre = cached_pretrain("/tmp/v2_pairpre.pamc", &ds, &h, &pre_cfg);
            ft(&ds, &pre, 7, 1e-3, 150, 0.2, "pair from-pre lr1e-3 ep150");
            ft(&ds, &pre, 7, 3e-3, 100, 0.2, "pair from-pre lr3e-3 ep100");
        }
        "four" => {
            let dir = tempfile::tempdir().unwrap();
            let counts = SplitCounts { train: 200, val: 50, test: 100 };
            gen_dataset(&default_spec(), &counts, dir.path()).unwrap();
            let ds = load_dataset(dir.path()).unwrap();
            let h_on = hyper(4, true);
            let pre_cfg = TrainConfig { seed: 11, epochs: 90, ..TrainConfig::default() };
            let pre_on = cached_pretrain("/tmp/v2_pre90_on.pamc", &ds, &h_on, &pre_cfg);
            probe(&ds, &pre_on.params, &h_on, "4class from-pre90");
            probe(&ds, &ModelParams::init(&h_on, 500).unwrap(), &h_on, "4class from-random");
            ft(&ds, &pre_on, 7, 1e-3, 40, 0.2, "4class kro-on  p0.2");

            let h_off = hyper(4, false);
            let pre_off = cached_pretrain("/tmp/v2_pre90_off.pamc", &ds, &h_off, &pre_cfg);
            ft(&ds, &pre_off, 7, 1e-3, 40, 0.2, "4class kro-off p0.2");
            ft(&ds, &pre_on, 7, 1e-3, 40, 0.0, "4class kro-on  p0.0");
        }
        other => eprintln!("unknown mode {other}"),
    }
}
