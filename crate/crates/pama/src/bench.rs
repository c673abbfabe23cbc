//! Measured cost of anchor cross-attention vs. dense self-attention.
//!
//! Both sides are counted with the same rules the tape applies to its own
//! ops — `m·k·n` per matrix product, `m·n` per elementwise multiply, adds
//! and softmax free — so the two MAC columns are directly comparable. The
//! anchored form touches each patch a constant number of times per anchor
//! (O(n_k · n_p)); dense self-attention pairs every patch with every other
//! (O(n_p²)). Doubling n_p therefore doubles one column and quadruples the
//! other, which is the property the unit tests pin down.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::paca::{paca_forward, BoundPaca, PacaError};
use crate::seed::{self, stream};
use crate::tensor::{IndexMatrix, Tape, Tensor};

/// Workload shape for one cost sweep.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// Patch counts to sweep, in order.
    pub sizes: Vec<usize>,
    /// Fixed anchor count across the sweep.
    pub n_k: usize,
    pub d_f: usize,
    pub heads: usize,
    /// Distance-bucket table length (d_max + 1).
    pub dist_buckets: u32,
    pub polar_bins: u32,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![256, 512, 1024, 2048, 4096],
            n_k: 16,
            d_f: 32,
            heads: 4,
            dist_buckets: 17,
            polar_bins: 8,
            seed: 0,
        }
    }
}

/// One sweep point. MAC columns are exact counts; the millisecond columns
/// are single-shot wall times for the same forwards.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n_p: usize,
    pub paca_macs: u64,
    pub self_attn_macs: u64,
    pub paca_ms: f64,
    pub self_ms: f64,
}

fn randn(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(rows, cols, data).expect("generated shape is consistent")
}

fn random_indices(rng: &mut impl Rng, rows: usize, cols: usize, max: u32) -> IndexMatrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(0..max)).collect();
    IndexMatrix::new(rows, cols, data).expect("generated shape is consistent")
}

/// Shared projection weights for one sweep: per-head `d_f × d_e` Q/K/V, a
/// `d_f × d_f` output projection, and the positional bias tables. Both
/// attention forms use the identical weights, so the MAC difference is
/// purely structural.
struct BenchWeights {
    w_q: Vec<Tensor>,
    w_k: Vec<Tensor>,
    w_v: Vec<Tensor>,
    w_o: Tensor,
    phi_dist: Vec<Tensor>,
    phi_polar: Vec<Tensor>,
}

impl BenchWeights {
    fn generate(cfg: &BenchConfig, rng: &mut impl Rng) -> Self {
        let d_e = cfg.d_f / cfg.heads;
        BenchWeights {
            w_q: (0..cfg.heads).map(|_| randn(rng, cfg.d_f, d_e, 0.05)).collect(),
            w_k: (0..cfg.heads).map(|_| randn(rng, cfg.d_f, d_e, 0.05)).collect(),
            w_v: (0..cfg.heads).map(|_| randn(rng, cfg.d_f, d_e, 0.05)).collect(),
            w_o: randn(rng, cfg.d_f, cfg.d_f, 0.05),
            phi_dist: (0..cfg.heads)
                .map(|_| randn(rng, 1, cfg.dist_buckets as usize, 0.05))
                .collect(),
            phi_polar: (0..cfg.heads)
                .map(|_| randn(rng, 1, cfg.polar_bins as usize, 0.05))
                .collect(),
        }
    }
}

fn bind_const(tape: &mut Tape, w: &BenchWeights) -> BoundPaca {
    BoundPaca {
        w_q: w.w_q.iter().map(|t| tape.constant(t.clone())).collect(),
        w_k: w.w_k.iter().map(|t| tape.constant(t.clone())).collect(),
        w_v: w.w_v.iter().map(|t| tape.constant(t.clone())).collect(),
        w_o: tape.constant(w.w_o.clone()),
        phi_dist: w.phi_dist.iter().map(|t| tape.constant(t.clone())).collect(),
        phi_polar: w.phi_polar.iter().map(|t| tape.constant(t.clone())).collect(),
    }
}

/// `a (m×k) · b (k×n)` with the product count charged to `macs`.
fn matmul_counted(a: &Tensor, b: &Tensor, macs: &mut u64) -> Tensor {
    assert_eq!(a.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    *macs += (m * k * n) as u64;
    Tensor::new(m, n, out).expect("matmul shape")
}

/// Dense multi-head self-attention over all `n_p` patch tokens, streamed one
/// query row at a time so the `n_p × n_p` score matrix is never stored.
/// Returns the output tokens and the exact MAC count.
fn self_attention_reference(x: &Tensor, w: &BenchWeights) -> (Tensor, u64) {
    let n_p = x.rows;
    let heads = w.w_q.len();
    let d_e = w.w_q[0].cols;
    let inv_sqrt_de = 1.0 / (d_e as f64).sqrt();
    let mut macs = 0u64;

    let mut concat = vec![0.0; n_p * heads * d_e];
    for h in 0..heads {
        let q = matmul_counted(x, &w.w_q[h], &mut macs);
        let k = matmul_counted(x, &w.w_k[h], &mut macs);
        let v = matmul_counted(x, &w.w_v[h], &mut macs);
        let mut scores = vec![0.0; n_p];
        for i in 0..n_p {
            let q_row = &q.data[i * d_e..(i + 1) * d_e];
            // one row of Q·Kᵀ, scaled — n_p·d_e products plus n_p scales
            for (j, s) in scores.iter_mut().enumerate() {
                let k_row = &k.data[j * d_e..(j + 1) * d_e];
                *s = q_row.iter().zip(k_row).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt_de;
            }
            macs += (n_p * d_e + n_p) as u64;
            // softmax in place (adds/exponentials are not counted, matching
            // the tape's rules for its own softmax)
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            for s in scores.iter_mut() {
                *s /= z;
            }
            // attention-weighted value sum — n_p·d_e products
            let out_row = &mut concat[i * heads * d_e + h * d_e..][..d_e];
            for (j, &a) in scores.iter().enumerate() {
                let v_row = &v.data[j * d_e..(j + 1) * d_e];
                for (o, &vv) in out_row.iter_mut().zip(v_row) {
                    *o += a * vv;
                }
            }
            macs += (n_p * d_e) as u64;
        }
    }
    let concat = Tensor::new(n_p, heads * d_e, concat).expect("concat shape");
    let out = matmul_counted(&concat, &w.w_o, &mut macs);
    (out, macs)
}

/// Runs the sweep: one anchored forward and one dense forward per patch
/// count, identical weights and inputs, MACs and wall time per side.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>, PacaError> {
    assert!(cfg.heads > 0 && cfg.d_f % cfg.heads == 0, "heads must divide d_f");
    let mut rng = seed::rng(cfg.seed, &[stream::BENCH]);
    let weights = BenchWeights::generate(cfg, &mut rng);

    let mut rows = Vec::with_capacity(cfg.sizes.len());
    for &n_p in &cfg.sizes {
        let x = randn(&mut rng, n_p, cfg.d_f, 1.0);
        let k = randn(&mut rng, cfg.n_k, cfg.d_f, 1.0);
        let dist = random_indices(&mut rng, cfg.n_k, n_p, cfg.dist_buckets);
        let polar: Vec<IndexMatrix> = (0..cfg.heads)
            .map(|_| random_indices(&mut rng, cfg.n_k, n_p, cfg.polar_bins))
            .collect();

        let t0 = Instant::now();
        let mut tape = Tape::new();
        let x_var = tape.constant(x.clone());
        let k_var = tape.constant(k);
        let bound = bind_const(&mut tape, &weights);
        paca_forward(&mut tape, x_var, k_var, &dist, &polar, &bound)?;
        let paca_ms = t0.elapsed().as_secs_f64() * 1e3;
        let paca_macs = tape.macs();

        let t1 = Instant::now();
        let (_, self_attn_macs) = self_attention_reference(&x, &weights);
        let self_ms = t1.elapsed().as_secs_f64() * 1e3;

        rows.push(BenchRow { n_p, paca_macs, self_attn_macs, paca_ms, self_ms });
    }
    Ok(rows)
}

/// CSV rendering: a header line plus one data row per sweep point.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("n_p,paca_macs,self_attn_macs,paca_ms,self_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.3},{:.3}\n",
            r.n_p, r.paca_macs, r.self_attn_macs, r.paca_ms, r.self_ms
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> BenchConfig {
        BenchConfig { sizes: vec![256, 512, 1024], ..BenchConfig::default() }
    }

    #[test]
    fn anchored_attention_macs_double_when_patches_double() {
        let rows = run_bench(&small_cfg()).unwrap();
        for pair in rows.windows(2) {
            let ratio = pair[1].paca_macs as f64 / pair[0].paca_macs as f64;
            assert!(
                (1.9..=2.1).contains(&ratio),
                "n_p {}→{}: ratio {ratio}",
                pair[0].n_p,
                pair[1].n_p
            );
        }
    }

    #[test]
    fn dense_attention_macs_quadruple_when_patches_double() {
        // below n_p ≈ 1024 the linear projection terms still dilute the
        // quadratic part, so the contract window applies from 1024 up
        let cfg = BenchConfig { sizes: vec![1024, 2048], ..BenchConfig::default() };
        let rows = run_bench(&cfg).unwrap();
        let ratio = rows[1].self_attn_macs as f64 / rows[0].self_attn_macs as f64;
        assert!((3.8..=4.2).contains(&ratio), "1024→2048 ratio {ratio}");
    }

    #[test]
    fn mac_counts_are_deterministic_and_time_is_not_counted() {
        let cfg = BenchConfig { sizes: vec![256], ..BenchConfig::default() };
        let a = run_bench(&cfg).unwrap();
        let b = run_bench(&cfg).unwrap();
        assert_eq!(a[0].paca_macs, b[0].paca_macs);
        assert_eq!(a[0].self_attn_macs, b[0].self_attn_macs);
        assert!(a[0].paca_macs > 0 && a[0].self_attn_macs > 0);
    }

    #[test]
    fn dense_reference_counts_match_a_closed_form() {
        // H heads: 3 projections (n_p·d_f·d_e each), per query row one
        // scaled score row (n_p·d_e + n_p) and one value reduction
        // (n_p·d_e), then the d_f×d_f output projection.
        let cfg = BenchConfig { sizes: vec![256], ..BenchConfig::default() };
        let rows = run_bench(&cfg).unwrap();
        let (n_p, d_f, h) = (256u64, cfg.d_f as u64, cfg.heads as u64);
        let d_e = d_f / h;
        let per_head = 3 * n_p * d_f * d_e + n_p * (n_p * d_e + n_p) + n_p * n_p * d_e;
        let expected = h * per_head + n_p * d_f * d_f;
        assert_eq!(rows[0].self_attn_macs, expected);
    }

    #[test]
    fn csv_has_header_and_one_row_per_size() {
        let rows = run_bench(&small_cfg()).unwrap();
        let csv = bench_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "n_p,paca_macs,self_attn_macs,paca_ms,self_ms");
        assert!(lines[1].starts_with("256,"));
        assert!(lines[3].starts_with("1024,"));
    }
}
