//! Why anchors: attention cost scales with n_k·n_p instead of n_p². This
//! sweep counts exact multiply-accumulate operations for both forms under
//! the same counting rules, so the doubling ratios are clean: ≈2× per
//! doubling for anchored cross-attention, ≈4× for dense self-attention.
//!
//!     cargo run --release --example bench_macs

use pama::bench::{bench_csv, run_bench, BenchConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = BenchConfig::default();
    println!(
        "sweep: n_p = {:?}, fixed n_k = {}, d_f = {}, {} heads\n",
        cfg.sizes, cfg.n_k, cfg.d_f, cfg.heads
    );
    let rows = run_bench(&cfg)?;
    print!("{}", bench_csv(&rows));

    println!("\ndoubling ratios (MACs at 2·n_p / MACs at n_p):");
    for pair in rows.windows(2) {
        let anchored = pair[1].paca_macs as f64 / pair[0].paca_macs as f64;
        let dense = pair[1].self_attn_macs as f64 / pair[0].self_attn_macs as f64;
        println!(
            "  {:>4} → {:>4}: anchored {anchored:.3}, dense {dense:.3}",
            pair[0].n_p, pair[1].n_p
        );
    }
    println!("\n(dense ratios approach 4 from below as the n_p² term dominates");
    println!(" the linear projection cost; anchored stays at 2 throughout)");
    Ok(())
}
