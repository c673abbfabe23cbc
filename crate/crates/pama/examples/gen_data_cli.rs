//! Drive the same pipeline through the `pama` binary instead of the
//! library: generate data, pretrain, probe — checking the one-JSON-object
//! stdout contract along the way. Useful as a template for shell scripts.
//!
//!     cargo run --release --example gen_data_cli

use std::path::PathBuf;
use std::process::Command;

/// The example lives at target/<profile>/examples/…; the binary two levels
/// up. Falls back to `cargo run` when it has not been built yet.
fn pama_cmd() -> Command {
    let mut exe = std::env::current_exe().expect("own path");
    exe.pop();
    exe.pop();
    exe.push("pama");
    if exe.exists() {
        Command::new(exe)
    } else {
        let mut c = Command::new(PathBuf::from(env!("CARGO")));
        c.args(["run", "--quiet", "--bin", "pama", "--"]);
        c
    }
}

fn run(args: &[&str]) -> Result<serde_json::Value, Box<dyn std::error::Error>> {
    let out = pama_cmd().args(args).output()?;
    if !out.status.success() {
        return Err(format!(
            "pama {:?} exited with {:?}: {}",
            args,
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        )
        .into());
    }
    // stdout is exactly one JSON object; logs went to stderr
    Ok(serde_json::from_slice(&out.stdout)?)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let data = dir.path().join("data");
    let runs = dir.path().join("runs");
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        serde_json::to_string_pretty(&serde_json::json!({
            "data_dir": data,
            "splits": { "train": 12, "val": 6, "test": 6 },
            "model": { "d_f": 32, "enc_blocks": 2, "dec_blocks": 1 },
            "train": { "epochs": 2, "batch_size": 4 }
        }))?,
    )?;
    let config = config.to_str().unwrap();

    let gen = run(&["gen-data", "--config", config, "--out", data.to_str().unwrap()])?;
    println!("gen-data → {} bags, manifest {}", gen["bags"], gen["manifest"]);

    let pre = run(&["pretrain", "--config", config, "--out", runs.to_str().unwrap()])?;
    println!(
        "pretrain → checkpoint {}, best val loss {}",
        pre["checkpoint"], pre["best_val_loss"]
    );

    let probe = run(&[
        "probe",
        "--config",
        config,
        "--out",
        runs.to_str().unwrap(),
        "--checkpoint",
        pre["checkpoint"].as_str().unwrap(),
    ])?;
    println!(
        "probe → accuracy {}, macro-F1 {}, macro-AUC {}",
        probe["accuracy"], probe["macro_f1"], probe["macro_auc"]
    );
    Ok(())
}
