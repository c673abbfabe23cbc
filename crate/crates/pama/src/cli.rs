//! The `pama` binary: dataset generation, the three training loops,
//! attention inspection, and the cost benchmark behind one entry point.
//!
//! Conventions shared by every subcommand:
//!
//! - stdout carries exactly one JSON result object per run; everything
//!   meant for humans goes to stderr.
//! - exit 0 on success, 1 on runtime/IO failures, 2 on usage or config
//!   mistakes (including unknown keys in the config file).
//! - the effective seed resolves as `PAMA_SEED` env var, then `--seed`,
//!   then the config file value.
//!
//! The library is the real interface — see `examples/` — so each command
//! here stays a thin wrapper: parse flags, resolve config, call one
//! library entry point, print one JSON object.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use crate::bench::{bench_csv, run_bench, BenchConfig};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
use crate::geometry::load_bag;
use crate::model::{all_visible, bind_model, encode, ModelHyper, Trainability};
use crate::paca::orientation_histogram;
use crate::seed::{self, stream};
use crate::synth::{default_spec, gen_dataset, SplitCounts, SynthError, SynthSpec};
use crate::tensor::Tape;
use crate::training::{
    finetune, linear_probe, load_dataset, pretrain, random_checkpoint, write_jsonl, Dataset,
    EpochRecord, TrainConfig, TrainError, TrainMode,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Command failures split by whose fault they are: `Usage` (bad flags or
/// config → exit 2) vs `Runtime` (IO, training, corrupt files → exit 1).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn synth_err(e: SynthError) -> CliError {
    match e {
        SynthError::Io(_) | SynthError::Format(_) => CliError::Runtime(e.to_string()),
        _ => CliError::Usage(e.to_string()),
    }
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::InvalidConfig(_) => CliError::Usage(e.to_string()),
        TrainError::EmptyDataset { .. } => CliError::Usage(e.to_string()),
        _ => CliError::Runtime(e.to_string()),
    }
}

fn ckpt_err(e: CheckpointError) -> CliError {
    match e {
        CheckpointError::Hyper(_) | CheckpointError::HyperMismatch { .. } => {
            CliError::Usage(e.to_string())
        }
        _ => CliError::Runtime(e.to_string()),
    }
}

// ── flags ───────────────────────────────────────────────────────────────

#[derive(Debug, Parser)]
#[command(
    name = "pama",
    about = "Position-aware masked autoencoding over slide bags",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic slide-bag dataset with spatial-motif classes.
    GenData {
        /// JSON config file (synth/splits sections); defaults are shipped in.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for .pamb bags and manifest.json.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed (PAMA_SEED beats this flag).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Masked-reconstruction pretraining on an unlabeled bag directory.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the checkpoint and the JSONL loss log.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Batch workers; >1 selects the deterministic parallel mode.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Supervised fine-tuning of the full model on class labels.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Starting checkpoint; omitted → random initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Linear probe: freeze the checkpoint encoder, train only a task head.
    Probe {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Per-class fraction of train labels to use, in (0, 1].
        #[arg(long, default_value_t = 1.0)]
        label_fraction: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dump one block/head's anchor attention maps and polar histograms.
    InspectAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A single .pamb bag to run through the frozen encoder.
        #[arg(long)]
        bag: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Encoder block index.
        #[arg(long, default_value_t = 0)]
        block: usize,
        /// Attention head index.
        #[arg(long, default_value_t = 0)]
        head: usize,
    },
    /// Compare anchored cross-attention MACs against dense self-attention.
    Bench {
        /// Directory for bench.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

// ── config file ─────────────────────────────────────────────────────────

fn default_splits() -> SplitCounts {
    SplitCounts { train: 200, val: 50, test: 100 }
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}

/// The JSON config file. Every section is optional and falls back to the
/// shipped defaults; unknown keys anywhere are an error so typos cannot
/// silently revert a field to its default.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    /// Where the training commands read bags from.
    pub data_dir: Option<PathBuf>,
    /// Dataset generator spec (gen-data).
    pub synth: Option<SynthSpec>,
    /// Bags per split (gen-data).
    pub splits: Option<SplitCounts>,
    /// Architecture shape (ignored when a checkpoint provides it).
    pub model: Option<ModelHyper>,
    /// Optimization settings for pretrain/finetune/probe.
    pub train: Option<TrainConfig>,
}

pub fn load_config(path: Option<&Path>) -> Result<AppConfig, CliError> {
    let Some(path) = path else {
        return Ok(AppConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))
}

/// `PAMA_SEED` env var beats the `--seed` flag beats the config file.
pub fn effective_seed(flag: Option<u64>) -> Result<Option<u64>, CliError> {
    match std::env::var("PAMA_SEED") {
        Ok(s) => s
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("PAMA_SEED must be an unsigned integer, got `{s}`"))),
        Err(_) => Ok(flag),
    }
}

fn resolved_train_config(
    cfg: &AppConfig,
    seed_flag: Option<u64>,
    mode: TrainMode,
) -> Result<TrainConfig, CliError> {
    let mut train = cfg.train.clone().unwrap_or_default();
    if let Some(s) = effective_seed(seed_flag)? {
        train.seed = s;
    }
    train.mode = mode;
    train.validate().map_err(train_err)?;
    Ok(train)
}

fn load_data(cfg: &AppConfig) -> Result<(PathBuf, Dataset), CliError> {
    let dir = cfg.data_dir.clone().unwrap_or_else(default_data_dir);
    if !dir.join("manifest.json").exists() {
        return Err(CliError::Usage(format!(
            "{} has no manifest.json; set data_dir in the config or run gen-data first",
            dir.display()
        )));
    }
    let ds = load_dataset(&dir).map_err(train_err)?;
    Ok((dir, ds))
}

/// The model must have been shaped for the bags it will read: feature width
/// from the manifest, bias-table sizes from the bag geometry.
fn check_model_matches_data(hyper: &ModelHyper, ds: &Dataset) -> Result<(), CliError> {
    if hyper.d_f != ds.d_f {
        return Err(CliError::Usage(format!(
            "model.d_f is {} but the dataset features are {}-dimensional",
            hyper.d_f, ds.d_f
        )));
    }
    let geo = &ds.items[0].bag.config;
    if hyper.polar_bins != geo.polar_bins || hyper.d_max != geo.d_max {
        return Err(CliError::Usage(format!(
            "model bias tables (polar_bins {}, d_max {}) do not match the bag geometry (polar_bins {}, d_max {})",
            hyper.polar_bins, hyper.d_max, geo.polar_bins, geo.d_max
        )));
    }
    Ok(())
}

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))
}

fn write_log(records: &[EpochRecord], path: &Path) -> Result<(), CliError> {
    write_jsonl(records, path)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

// ── subcommands ─────────────────────────────────────────────────────────

fn cmd_gen_data(
    config: Option<&Path>,
    out: &Path,
    seed_flag: Option<u64>,
) -> Result<serde_json::Value, CliError> {
    let cfg = load_config(config)?;
    let mut spec = cfg.synth.unwrap_or_else(default_spec);
    if let Some(s) = effective_seed(seed_flag)? {
        spec.seed = s;
    }
    let counts = cfg.splits.unwrap_or_else(default_splits);
    ensure_out_dir(out)?;
    gen_dataset(&spec, &counts, out).map_err(synth_err)?;
    let manifest = out.join("manifest.json");
    eprintln!(
        "generated {} bags ({} train / {} val / {} test) in {}",
        counts.train + counts.val + counts.test,
        counts.train,
        counts.val,
        counts.test,
        out.display()
    );
    Ok(json!({
        "manifest": manifest,
        "bags": counts.train + counts.val + counts.test,
        "n_classes": spec.n_classes,
        "seed": spec.seed,
    }))
}

fn cmd_pretrain(
    config: Option<&Path>,
    out: &Path,
    seed_flag: Option<u64>,
    threads: usize,
) -> Result<serde_json::Value, CliError> {
    let cfg = load_config(config)?;
    let train = resolved_train_config(&cfg, seed_flag, TrainMode::Pretrain)?;
    let (data_dir, ds) = load_data(&cfg)?;
    let hyper = cfg.model.unwrap_or_default();
    check_model_matches_data(&hyper, &ds)?;
    eprintln!(
        "pretraining on {} bags from {} ({} epochs, seed {})",
        ds.train.len(),
        data_dir.display(),
        train.epochs,
        train.seed
    );
    let mut records = Vec::new();
    let ckpt = pretrain(&ds, &hyper, &train, threads, &mut records).map_err(train_err)?;
    ensure_out_dir(out)?;
    let ckpt_path = out.join("pretrain.pamc");
    save_checkpoint(&ckpt, &ckpt_path).map_err(ckpt_err)?;
    let log_path = out.join("pretrain_log.jsonl");
    write_log(&records, &log_path)?;
    let losses = |split: &str| {
        records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.loss)
            .collect::<Vec<_>>()
    };
    let train_losses = losses("train");
    let val_losses = losses("val");
    Ok(json!({
        "checkpoint": ckpt_path,
        "log": log_path,
        "epochs": train_losses.len(),
        "final_train_loss": train_losses.last(),
        "best_val_loss": val_losses.iter().cloned().fold(None, |best: Option<f64>, x| {
            Some(best.map_or(x, |b| b.min(x)))
        }),
    }))
}

fn cmd_finetune(
    config: Option<&Path>,
    out: &Path,
    checkpoint: Option<&Path>,
    seed_flag: Option<u64>,
    threads: usize,
) -> Result<serde_json::Value, CliError> {
    let cfg = load_config(config)?;
    let train = resolved_train_config(&cfg, seed_flag, TrainMode::Finetune)?;
    let (_, ds) = load_data(&cfg)?;
    let base: Checkpoint = match checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path).map_err(ckpt_err)?;
            check_model_matches_data(&ckpt.hyper, &ds)?;
            eprintln!("fine-tuning from {}", path.display());
            ckpt
        }
        None => {
            let hyper = cfg.model.unwrap_or_default();
            check_model_matches_data(&hyper, &ds)?;
            eprintln!("no --checkpoint given; fine-tuning from random initialization");
            random_checkpoint(&hyper, ds.items[0].bag.config.clone(), train.seed)
                .map_err(train_err)?
        }
    };
    let mut records = Vec::new();
    let (ckpt, metrics) = finetune(&ds, &base, &train, threads, &mut records).map_err(train_err)?;
    ensure_out_dir(out)?;
    let ckpt_path = out.join("finetune.pamc");
    save_checkpoint(&ckpt, &ckpt_path).map_err(ckpt_err)?;
    let log_path = out.join("finetune_log.jsonl");
    write_log(&records, &log_path)?;
    Ok(json!({
        "accuracy": metrics.accuracy,
        "macro_f1": metrics.macro_f1,
        "macro_auc": metrics.macro_auc,
        "checkpoint": ckpt_path,
        "log": log_path,
    }))
}

fn cmd_probe(
    config: Option<&Path>,
    out: &Path,
    checkpoint: &Path,
    label_fraction: f64,
    seed_flag: Option<u64>,
) -> Result<serde_json::Value, CliError> {
    if !(label_fraction > 0.0 && label_fraction <= 1.0) {
        return Err(CliError::Usage(format!(
            "--label-fraction must be in (0, 1], got {label_fraction}"
        )));
    }
    let cfg = load_config(config)?;
    let train = resolved_train_config(&cfg, seed_flag, TrainMode::Probe)?;
    let (_, ds) = load_data(&cfg)?;
    let base = load_checkpoint(checkpoint).map_err(ckpt_err)?;
    check_model_matches_data(&base.hyper, &ds)?;
    eprintln!(
        "probing {} with {:.0}% of train labels",
        checkpoint.display(),
        label_fraction * 100.0
    );
    let mut records = Vec::new();
    let (metrics, _head) =
        linear_probe(&ds, &base.params, &base.hyper, &train, label_fraction, &mut records)
            .map_err(train_err)?;
    ensure_out_dir(out)?;
    let log_path = out.join("probe_log.jsonl");
    write_log(&records, &log_path)?;
    Ok(json!({
        "accuracy": metrics.accuracy,
        "macro_f1": metrics.macro_f1,
        "macro_auc": metrics.macro_auc,
        "label_fraction": label_fraction,
        "log": log_path,
    }))
}

fn cmd_inspect_attention(
    checkpoint: &Path,
    bag_path: &Path,
    out: &Path,
    block: usize,
    head: usize,
) -> Result<serde_json::Value, CliError> {
    let ckpt = load_checkpoint(checkpoint).map_err(ckpt_err)?;
    let hyper = &ckpt.hyper;
    if block >= hyper.enc_blocks {
        return Err(CliError::Usage(format!(
            "--block {block} out of range; the encoder has {} blocks",
            hyper.enc_blocks
        )));
    }
    if head >= hyper.heads {
        return Err(CliError::Usage(format!(
            "--head {head} out of range; the model has {} heads",
            hyper.heads
        )));
    }
    let bag = load_bag(bag_path).map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, &ckpt.params, Trainability::Frozen);
    let mut rng = seed::rng(0, &[stream::DROPOUT]);
    let enc = encode(
        &mut tape,
        &bag,
        &all_visible(bag.n_patches()),
        &bound,
        hyper,
        0.0,
        false,
        &mut rng,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;

    let state = &enc.attn[block];
    let attn = &state.anchor_to_patch[head];
    let polar = &state.polar[head];
    let n_p = bag.n_patches();
    ensure_out_dir(out)?;

    let mut files = Vec::new();
    for anchor in 0..attn.rows {
        // column 0 of the attention row is the class token, which has no
        // grid position; drop it and renormalize so the dumped scores form
        // a distribution over the n_p patches.
        let row: Vec<f64> = (0..n_p).map(|j| attn.at(anchor, j + 1)).collect();
        let mass: f64 = row.iter().sum();
        let scores: Vec<f64> = row.iter().map(|s| s / mass).collect();

        let mut map_csv = String::from("col,row,score\n");
        for (j, &(c, r)) in bag.coords.iter().enumerate() {
            map_csv.push_str(&format!("{c},{r},{:.12e}\n", scores[j]));
        }
        let map_path = out.join(format!("block{block}_head{head}_anchor{anchor}.csv"));
        fs::write(&map_path, map_csv)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", map_path.display())))?;

        let polar_row: Vec<u32> = (0..n_p).map(|j| polar.at(anchor, j + 1)).collect();
        let (hist, best) = orientation_histogram(&polar_row, &scores, hyper.polar_bins);
        let mut hist_csv = String::from("bin,mass,is_reoriented_axis\n");
        for (b, &m) in hist.iter().enumerate() {
            hist_csv.push_str(&format!("{b},{:.12e},{}\n", m, b == best));
        }
        let hist_path = out.join(format!("block{block}_head{head}_anchor{anchor}_polar.csv"));
        fs::write(&hist_path, hist_csv)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", hist_path.display())))?;

        files.push(map_path);
        files.push(hist_path);
    }
    eprintln!(
        "wrote {} attention files for block {block}, head {head} ({} anchors, {} patches)",
        files.len(),
        attn.rows,
        n_p
    );
    Ok(json!({
        "out_dir": out,
        "block": block,
        "head": head,
        "anchors": attn.rows,
        "patches": n_p,
        "files": files,
    }))
}

fn cmd_bench(out: &Path, seed_flag: Option<u64>) -> Result<serde_json::Value, CliError> {
    let mut cfg = BenchConfig::default();
    if let Some(s) = effective_seed(seed_flag)? {
        cfg.seed = s;
    }
    eprintln!(
        "sweeping n_p = {:?} at n_k = {}, d_f = {}, {} heads",
        cfg.sizes, cfg.n_k, cfg.d_f, cfg.heads
    );
    let rows = run_bench(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    let csv = bench_csv(&rows);
    eprint!("{csv}");
    ensure_out_dir(out)?;
    let csv_path = out.join("bench.csv");
    fs::write(&csv_path, &csv)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", csv_path.display())))?;
    Ok(json!({
        "csv": csv_path,
        "rows": rows
            .iter()
            .map(|r| json!({
                "n_p": r.n_p,
                "paca_macs": r.paca_macs,
                "self_attn_macs": r.self_attn_macs,
                "paca_ms": r.paca_ms,
                "self_ms": r.self_ms,
            }))
            .collect::<Vec<_>>(),
    }))
}

// ── entry point ─────────────────────────────────────────────────────────

/// Dispatches one parsed command and returns the JSON object for stdout.
pub fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    match &cli.command {
        Command::GenData { config, out, seed } => cmd_gen_data(config.as_deref(), out, *seed),
        Command::Pretrain { config, out, seed, threads } => {
            cmd_pretrain(config.as_deref(), out, *seed, *threads)
        }
        Command::Finetune { config, out, checkpoint, seed, threads } => {
            cmd_finetune(config.as_deref(), out, checkpoint.as_deref(), *seed, *threads)
        }
        Command::Probe { config, out, checkpoint, label_fraction, seed } => {
            cmd_probe(config.as_deref(), out, checkpoint, *label_fraction, *seed)
        }
        Command::InspectAttention { checkpoint, bag, out, block, head } => {
            cmd_inspect_attention(checkpoint, bag, out, *block, *head)
        }
        Command::Bench { out, seed } => cmd_bench(out, *seed),
    }
}

/// Full process body: parse, run, print, map to an exit code. `Cli::parse`
/// already exits with code 2 on malformed flags.
pub fn main_impl() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(result) => {
            println!("{result}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<AppConfig>(r#"{"modle": {}}"#).unwrap_err();
        assert!(err.to_string().contains("modle"));
    }

    #[test]
    fn empty_config_uses_defaults() {
        let cfg: AppConfig = serde_json::from_str("{}").unwrap();
        assert!(cfg.synth.is_none() && cfg.model.is_none() && cfg.train.is_none());
        let loaded = load_config(None).unwrap();
        assert!(loaded.data_dir.is_none());
    }

    #[test]
    fn nested_sections_parse_with_their_own_defaults() {
        let cfg: AppConfig = serde_json::from_str(
            r#"{"data_dir": "d", "model": {"d_f": 32}, "train": {"lr": 0.01}}"#,
        )
        .unwrap();
        assert_eq!(cfg.model.unwrap().d_f, 32);
        let train = cfg.train.unwrap();
        assert_eq!(train.lr, 0.01);
        assert_eq!(train.epochs, 30);
    }

    #[test]
    fn missing_config_file_names_the_flag() {
        let err = load_config(Some(Path::new("/nonexistent/cfg.json"))).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_USAGE);
        assert!(err.message().contains("--config"));
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CliError::Runtime("x".into()).exit_code(), 1);
        let e = train_err(TrainError::InvalidConfig("bad".into()));
        assert_eq!(e.exit_code(), 2);
        let e = train_err(TrainError::NonFiniteGrad { name: "w".into() });
        assert_eq!(e.exit_code(), 1);
        let e = synth_err(SynthError::InvalidSpec("bad".into()));
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn label_fraction_bounds_are_usage_errors() {
        let err = cmd_probe(None, Path::new("out"), Path::new("c.pamc"), 0.0, None).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_USAGE);
        let err = cmd_probe(None, Path::new("out"), Path::new("c.pamc"), 1.5, None).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_USAGE);
    }

    #[test]
    fn cli_parses_every_subcommand() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from([
            "pama", "gen-data", "--out", "d", "--seed", "7",
        ])
        .unwrap();
        assert!(matches!(cli.command, Command::GenData { seed: Some(7), .. }));
        let cli = Cli::try_parse_from([
            "pama", "inspect-attention", "--checkpoint", "c", "--bag", "b", "--out", "o",
            "--block", "1", "--head", "2",
        ])
        .unwrap();
        assert!(matches!(
            cli.command,
            Command::InspectAttention { block: 1, head: 2, .. }
        ));
        assert!(Cli::try_parse_from(["pama", "probe", "--out", "o"]).is_err());
    }
}
