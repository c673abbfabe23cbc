//! Full model assembly: masked-autoencoder encoder/decoder stacks over
//! slide bags, the classification path, and parameter management.
//!
//! The encoder sees only the unmasked patches — masked columns of D and P
//! are sliced away before the first block, so masked features cannot leak in
//! by construction. The decoder rebuilds the full-length token sequence
//! (mask token at every hidden position), lets the anchors carry over their
//! encoder states, and reconstructs patch features; the loss is mean squared
//! error over the masked rows only. A learned class token rides along at
//! row 0 of the patch stream with a reserved distance bucket (`d_max`) and
//! polar bin 0 toward every anchor; its final state feeds the task head.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::SlideBag;
use crate::paca::{
    anchor_dropout, encoder_block, AttnState, BlockParams, BoundBlock, BoundLn, BoundMlp,
    BoundPaca, LnParams, MlpParams, PacaError, PacaParams,
};
use crate::seed::{self, stream};
use crate::tensor::{IndexMatrix, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("bag incompatible with model: {field} is {bag} in the bag, {model} in the model")]
    HyperMismatch { field: &'static str, model: String, bag: String },
    #[error("bag has {bag} anchors, model pool holds {max}")]
    TooManyAnchors { bag: usize, max: usize },
    #[error("masking needs at least 2 patches, bag has {n_p}")]
    DegenerateBag { n_p: usize },
    #[error("mask ratio must be in (0, 1), got {0}")]
    InvalidRatio(f64),
    #[error("mask plan covers {plan} patches, bag has {bag}")]
    PlanMismatch { plan: usize, bag: usize },
    #[error("mask plan has an empty masked set")]
    EmptyMask,
    #[error("model has no task head (fine-tune/probe requires n_classes)")]
    MissingTaskHead,
    #[error("bag is unlabeled")]
    UnlabeledBag,
    #[error("bag label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: u32, n_classes: usize },
    #[error(transparent)]
    Paca(#[from] PacaError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

// ── hyperparameters ─────────────────────────────────────────────────────

fn default_d_f() -> usize {
    64
}
fn default_heads() -> usize {
    4
}
fn default_enc_blocks() -> usize {
    4
}
fn default_dec_blocks() -> usize {
    2
}
fn default_mlp_expansion() -> usize {
    4
}
fn default_polar_bins() -> u32 {
    8
}
fn default_d_max() -> u32 {
    32
}
fn default_max_anchors() -> usize {
    16
}
fn default_kro() -> bool {
    true
}

/// Architecture shape. `polar_bins`/`d_max` size the bias tables and must
/// match the geometry the bags were built with; `encode` re-checks per bag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHyper {
    #[serde(default = "default_d_f")]
    pub d_f: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_enc_blocks")]
    pub enc_blocks: usize,
    #[serde(default = "default_dec_blocks")]
    pub dec_blocks: usize,
    #[serde(default = "default_mlp_expansion")]
    pub mlp_expansion: usize,
    #[serde(default = "default_polar_bins")]
    pub polar_bins: u32,
    #[serde(default = "default_d_max")]
    pub d_max: u32,
    #[serde(default = "default_max_anchors")]
    pub max_anchors: usize,
    #[serde(default)]
    pub n_classes: Option<usize>,
    /// Kernel re-orientation between blocks; disable for the fixed-axis
    /// ablation.
    #[serde(default = "default_kro")]
    pub kro_enabled: bool,
}

impl Default for ModelHyper {
    fn default() -> Self {
        ModelHyper {
            d_f: default_d_f(),
            heads: default_heads(),
            enc_blocks: default_enc_blocks(),
            dec_blocks: default_dec_blocks(),
            mlp_expansion: default_mlp_expansion(),
            polar_bins: default_polar_bins(),
            d_max: default_d_max(),
            max_anchors: default_max_anchors(),
            n_classes: None,
            kro_enabled: true,
        }
    }
}

impl ModelHyper {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_f == 0 || self.heads == 0 || self.d_f % self.heads != 0 {
            return Err(ModelError::InvalidHyper(format!(
                "heads ({}) must divide d_f ({})",
                self.heads, self.d_f
            )));
        }
        if self.dec_blocks < 1 || self.enc_blocks <= self.dec_blocks {
            return Err(ModelError::InvalidHyper(format!(
                "need enc_blocks > dec_blocks >= 1, got {} / {}",
                self.enc_blocks, self.dec_blocks
            )));
        }
        if self.mlp_expansion == 0 || self.max_anchors == 0 {
            return Err(ModelError::InvalidHyper(
                "mlp_expansion and max_anchors must be positive".into(),
            ));
        }
        if self.polar_bins < 2 || self.d_max < 1 {
            return Err(ModelError::InvalidHyper(
                "polar_bins >= 2 and d_max >= 1 required".into(),
            ));
        }
        if self.n_classes == Some(0) {
            return Err(ModelError::InvalidHyper("n_classes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn d_e(&self) -> usize {
        self.d_f / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_expansion * self.d_f
    }
}

// ── parameters ──────────────────────────────────────────────────────────

/// Every learnable tensor in the model. Anchors draw their feature vectors
/// from a fixed-size pool: a bag with `n_k` anchors uses rows `0..n_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub anchor_pool: Tensor,
    pub class_token: Tensor,
    pub mask_token: Tensor,
    pub enc_blocks: Vec<BlockParams>,
    pub dec_blocks: Vec<BlockParams>,
    /// Reconstruction head after the decoder stack.
    pub recon_w: Tensor,
    pub recon_b: Tensor,
    /// `d_f × n_classes`; present only when fine-tuning/probing.
    pub task_head: Option<Tensor>,
}

fn randn_param(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sigma: f64) -> Tensor {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * sigma)
        .collect();
    Tensor::param(rows, cols, data).expect("shape by construction")
}

fn init_ln(d: usize) -> LnParams {
    LnParams {
        gamma: Tensor::filled(1, d, 1.0).with_grad(),
        beta: Tensor::zeros(1, d).with_grad(),
    }
}

fn init_block(rng: &mut ChaCha8Rng, hyper: &ModelHyper) -> BlockParams {
    let d_f = hyper.d_f;
    let d_e = hyper.d_e();
    let hidden = hyper.mlp_hidden();
    const SIGMA: f64 = 0.02;
    BlockParams {
        ln_x: init_ln(d_f),
        ln_k: init_ln(d_f),
        attn: PacaParams {
            w_q: (0..hyper.heads).map(|_| randn_param(rng, d_f, d_e, SIGMA)).collect(),
            w_k: (0..hyper.heads).map(|_| randn_param(rng, d_f, d_e, SIGMA)).collect(),
            w_v: (0..hyper.heads).map(|_| randn_param(rng, d_f, d_e, SIGMA)).collect(),
            w_o: randn_param(rng, hyper.heads * d_e, d_f, SIGMA),
            // bias tables start flat: position influences attention only
            // once training moves them
            phi_dist: (0..hyper.heads)
                .map(|_| Tensor::zeros(1, hyper.d_max as usize + 1).with_grad())
                .collect(),
            phi_polar: (0..hyper.heads)
                .map(|_| Tensor::zeros(1, hyper.polar_bins as usize).with_grad())
                .collect(),
        },
        ln_mid_x: init_ln(d_f),
        ln_mid_k: init_ln(d_f),
        mlp: MlpParams {
            w1: randn_param(rng, d_f, hidden, SIGMA),
            b1: Tensor::zeros(1, hidden).with_grad(),
            w2: randn_param(rng, hidden, d_f, SIGMA),
            b2: Tensor::zeros(1, d_f).with_grad(),
        },
    }
}

impl ModelParams {
    /// Fresh parameters: N(0, 0.02²) projections and tokens, identity layer
    /// norms, zero bias tables, zero task head.
    pub fn init(hyper: &ModelHyper, root_seed: u64) -> Result<ModelParams, ModelError> {
        hyper.validate()?;
        let mut rng = seed::rng(root_seed, &[stream::INIT]);
        const SIGMA: f64 = 0.02;
        Ok(ModelParams {
            anchor_pool: randn_param(&mut rng, hyper.max_anchors, hyper.d_f, SIGMA),
            class_token: randn_param(&mut rng, 1, hyper.d_f, SIGMA),
            mask_token: randn_param(&mut rng, 1, hyper.d_f, SIGMA),
            enc_blocks: (0..hyper.enc_blocks).map(|_| init_block(&mut rng, hyper)).collect(),
            dec_blocks: (0..hyper.dec_blocks).map(|_| init_block(&mut rng, hyper)).collect(),
            recon_w: randn_param(&mut rng, hyper.d_f, hyper.d_f, SIGMA),
            recon_b: Tensor::zeros(1, hyper.d_f).with_grad(),
            task_head: hyper
                .n_classes
                .map(|c| Tensor::zeros(hyper.d_f, c).with_grad()),
        })
    }

    pub fn for_each_named<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor)) {
        f("anchor_pool".into(), &self.anchor_pool);
        f("class_token".into(), &self.class_token);
        f("mask_token".into(), &self.mask_token);
        for (i, b) in self.enc_blocks.iter().enumerate() {
            b.for_each_named(&format!("enc.{i}"), f);
        }
        for (i, b) in self.dec_blocks.iter().enumerate() {
            b.for_each_named(&format!("dec.{i}"), f);
        }
        f("recon.w".into(), &self.recon_w);
        f("recon.b".into(), &self.recon_b);
        if let Some(h) = &self.task_head {
            f("head.w".into(), h);
        }
    }

    pub fn for_each_named_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        f("anchor_pool".into(), &mut self.anchor_pool);
        f("class_token".into(), &mut self.class_token);
        f("mask_token".into(), &mut self.mask_token);
        for (i, b) in self.enc_blocks.iter_mut().enumerate() {
            b.for_each_named_mut(&format!("enc.{i}"), f);
        }
        for (i, b) in self.dec_blocks.iter_mut().enumerate() {
            b.for_each_named_mut(&format!("dec.{i}"), f);
        }
        f("recon.w".into(), &mut self.recon_w);
        f("recon.b".into(), &mut self.recon_b);
        if let Some(h) = &mut self.task_head {
            f("head.w".into(), h);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_named(&mut |_, t| n += t.numel());
        n
    }

    /// All parameters as one flat vector, in `for_each_named` order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each_named(&mut |_, t| out.extend_from_slice(&t.data));
        out
    }

    /// Inverse of [`ModelParams::flatten`]; panics on length mismatch.
    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.for_each_named_mut(&mut |_, t| {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        assert_eq!(off, flat.len(), "flat vector length mismatch");
    }
}

// ── binding onto a tape ─────────────────────────────────────────────────

/// Which parameters receive gradients when this binding's tape runs
/// backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainability {
    All,
    /// Task head only — the linear-probe setting. Everything else is bound
    /// as a constant, so the encoder cannot move even in principle.
    HeadOnly,
    /// Everything constant: evaluation passes that never call backward.
    Frozen,
}

pub struct BoundModel {
    pub anchor_pool: Var,
    pub class_token: Var,
    pub mask_token: Var,
    pub enc: Vec<BoundBlock>,
    pub dec: Vec<BoundBlock>,
    pub recon_w: Var,
    pub recon_b: Var,
    pub task_head: Option<Var>,
    /// `(name, var)` pairs in [`ModelParams::for_each_named`] order; the
    /// optimizer walks this to collect gradients.
    pub named: Vec<(String, Var)>,
}

fn bind_tensor(
    tape: &mut Tape,
    t: &Tensor,
    name: String,
    trainable: bool,
    named: &mut Vec<(String, Var)>,
) -> Var {
    let v = if trainable {
        tape.leaf(t.clone().with_grad())
    } else {
        tape.constant(t.clone())
    };
    named.push((name, v));
    v
}

fn bind_ln(
    tape: &mut Tape,
    ln: &LnParams,
    prefix: &str,
    trainable: bool,
    named: &mut Vec<(String, Var)>,
) -> BoundLn {
    BoundLn {
        gamma: bind_tensor(tape, &ln.gamma, format!("{prefix}.gamma"), trainable, named),
        beta: bind_tensor(tape, &ln.beta, format!("{prefix}.beta"), trainable, named),
    }
}

fn bind_block(
    tape: &mut Tape,
    b: &BlockParams,
    prefix: &str,
    trainable: bool,
    named: &mut Vec<(String, Var)>,
) -> BoundBlock {
    let ln_x = bind_ln(tape, &b.ln_x, &format!("{prefix}.ln_x"), trainable, named);
    let ln_k = bind_ln(tape, &b.ln_k, &format!("{prefix}.ln_k"), trainable, named);
    let attn = {
        let p = &b.attn;
        let pre = format!("{prefix}.attn");
        let w_q = p
            .w_q
            .iter()
            .enumerate()
            .map(|(h, t)| bind_tensor(tape, t, format!("{pre}.w_q.{h}"), trainable, named))
            .collect();
        let w_k = p
            .w_k
            .iter()
            .enumerate()
            .map(|(h, t)| bind_tensor(tape, t, format!("{pre}.w_k.{h}"), trainable, named))
            .collect();
        let w_v = p
            .w_v
            .iter()
            .enumerate()
            .map(|(h, t)| bind_tensor(tape, t, format!("{pre}.w_v.{h}"), trainable, named))
            .collect();
        let w_o = bind_tensor(tape, &p.w_o, format!("{pre}.w_o"), trainable, named);
        let phi_dist = p
            .phi_dist
            .iter()
            .enumerate()
            .map(|(h, t)| bind_tensor(tape, t, format!("{pre}.phi_dist.{h}"), trainable, named))
            .collect();
        let phi_polar = p
            .phi_polar
            .iter()
            .enumerate()
            .map(|(h, t)| bind_tensor(tape, t, format!("{pre}.phi_polar.{h}"), trainable, named))
            .collect();
        BoundPaca { w_q, w_k, w_v, w_o, phi_dist, phi_polar }
    };
    let ln_mid_x = bind_ln(tape, &b.ln_mid_x, &format!("{prefix}.ln_mid_x"), trainable, named);
    let ln_mid_k = bind_ln(tape, &b.ln_mid_k, &format!("{prefix}.ln_mid_k"), trainable, named);
    let mlp = BoundMlp {
        w1: bind_tensor(tape, &b.mlp.w1, format!("{prefix}.mlp.w1"), trainable, named),
        b1: bind_tensor(tape, &b.mlp.b1, format!("{prefix}.mlp.b1"), trainable, named),
        w2: bind_tensor(tape, &b.mlp.w2, format!("{prefix}.mlp.w2"), trainable, named),
        b2: bind_tensor(tape, &b.mlp.b2, format!("{prefix}.mlp.b2"), trainable, named),
    };
    BoundBlock { ln_x, ln_k, attn, ln_mid_x, ln_mid_k, mlp }
}

/// Copies every parameter onto the tape as a leaf. `Trainability::HeadOnly`
/// binds everything except the task head as constants (frozen encoder).
pub fn bind_model(tape: &mut Tape, params: &ModelParams, scope: Trainability) -> BoundModel {
    let body = scope == Trainability::All;
    let head = scope != Trainability::Frozen;
    let mut named = Vec::new();
    let anchor_pool =
        bind_tensor(tape, &params.anchor_pool, "anchor_pool".into(), body, &mut named);
    let class_token =
        bind_tensor(tape, &params.class_token, "class_token".into(), body, &mut named);
    let mask_token =
        bind_tensor(tape, &params.mask_token, "mask_token".into(), body, &mut named);
    let enc = params
        .enc_blocks
        .iter()
        .enumerate()
        .map(|(i, b)| bind_block(tape, b, &format!("enc.{i}"), body, &mut named))
        .collect();
    let dec = params
        .dec_blocks
        .iter()
        .enumerate()
        .map(|(i, b)| bind_block(tape, b, &format!("dec.{i}"), body, &mut named))
        .collect();
    let recon_w = bind_tensor(tape, &params.recon_w, "recon.w".into(), body, &mut named);
    let recon_b = bind_tensor(tape, &params.recon_b, "recon.b".into(), body, &mut named);
    let task_head = params
        .task_head
        .as_ref()
        .map(|h| bind_tensor(tape, h, "head.w".into(), head, &mut named));
    BoundModel {
        anchor_pool,
        class_token,
        mask_token,
        enc,
        dec,
        recon_w,
        recon_b,
        task_head,
        named,
    }
}

// ── mask plans ──────────────────────────────────────────────────────────

/// Random partition of patch indices into masked/unmasked sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    /// Sorted indices hidden from the encoder.
    pub masked: Vec<usize>,
    /// Sorted indices the encoder sees.
    pub unmasked: Vec<usize>,
}

impl MaskPlan {
    pub fn n_p(&self) -> usize {
        self.masked.len() + self.unmasked.len()
    }
}

/// Uniform random mask of `round(r · n_p)` patches, clamped so that at
/// least one patch is masked and at least one stays visible.
pub fn make_mask_plan(
    n_p: usize,
    r: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MaskPlan, ModelError> {
    use rand::Rng;
    if n_p < 2 {
        return Err(ModelError::DegenerateBag { n_p });
    }
    if !(r > 0.0 && r < 1.0) {
        return Err(ModelError::InvalidRatio(r));
    }
    let n_masked = ((r * n_p as f64).round() as usize).clamp(1, n_p - 1);
    // partial Fisher-Yates: the first n_masked entries are the sample
    let mut idx: Vec<usize> = (0..n_p).collect();
    for i in 0..n_masked {
        let j = rng.gen_range(i..n_p);
        idx.swap(i, j);
    }
    let mut masked: Vec<usize> = idx[..n_masked].to_vec();
    let mut unmasked: Vec<usize> = idx[n_masked..].to_vec();
    masked.sort_unstable();
    unmasked.sort_unstable();
    Ok(MaskPlan { masked, unmasked })
}

// ── forward passes ──────────────────────────────────────────────────────

fn validate_bag(hyper: &ModelHyper, bag: &SlideBag) -> Result<(), ModelError> {
    if bag.d_f != hyper.d_f {
        return Err(ModelError::HyperMismatch {
            field: "d_f",
            model: hyper.d_f.to_string(),
            bag: bag.d_f.to_string(),
        });
    }
    if bag.config.polar_bins != hyper.polar_bins {
        return Err(ModelError::HyperMismatch {
            field: "polar_bins",
            model: hyper.polar_bins.to_string(),
            bag: bag.config.polar_bins.to_string(),
        });
    }
    if bag.config.d_max != hyper.d_max {
        return Err(ModelError::HyperMismatch {
            field: "d_max",
            model: hyper.d_max.to_string(),
            bag: bag.config.d_max.to_string(),
        });
    }
    if bag.n_anchors() > hyper.max_anchors {
        return Err(ModelError::TooManyAnchors {
            bag: bag.n_anchors(),
            max: hyper.max_anchors,
        });
    }
    Ok(())
}

/// Prepends a constant column (the class token's reserved position codes).
fn with_class_column(m: &IndexMatrix, class_value: u32) -> IndexMatrix {
    let mut data = Vec::with_capacity(m.rows * (m.cols + 1));
    for i in 0..m.rows {
        data.push(class_value);
        data.extend_from_slice(m.row(i));
    }
    IndexMatrix::new(m.rows, m.cols + 1, data).expect("shape by construction")
}

/// Patch features of the selected rows as an `n × d_f` constant.
fn features_const(tape: &mut Tape, bag: &SlideBag, rows: &[usize]) -> Var {
    let mut data = Vec::with_capacity(rows.len() * bag.d_f);
    for &i in rows {
        data.extend(bag.feature_row(i).iter().map(|&v| v as f64));
    }
    tape.constant(Tensor::new(rows.len(), bag.d_f, data).expect("shape by construction"))
}

pub struct EncodeOutput {
    /// `(1 + n_visible) × d_f`: class token at row 0, then visible patches
    /// in ascending index order.
    pub tokens: Var,
    /// Kept-anchor states after the last block.
    pub anchors: Var,
    /// Pool rows that survived anchor dropout (all rows in eval).
    pub kept_anchors: Vec<usize>,
    /// Attention snapshots per encoder block (for inspection/KRO export).
    pub attn: Vec<AttnState>,
    /// Per-head polar frames after the last block's re-orientation.
    pub polar_final: Vec<IndexMatrix>,
}

/// Runs the encoder stack over the given visible patch subset.
///
/// `visible` must be sorted, unique, non-empty and in range — mask plans and
/// the all-visible helper guarantee this. D/P are column-sliced to the
/// visible set (plus the class column) before the first block, anchor rows
/// are row-sliced by dropout, and KRO updates the per-head polar frames
/// between blocks.
pub fn encode(
    tape: &mut Tape,
    bag: &SlideBag,
    visible: &[usize],
    bound: &BoundModel,
    hyper: &ModelHyper,
    p_drop: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<EncodeOutput, ModelError> {
    validate_bag(hyper, bag)?;
    debug_assert!(!visible.is_empty());
    debug_assert!(visible.windows(2).all(|w| w[0] < w[1]));
    if visible.last().is_some_and(|&v| v >= bag.n_patches()) {
        return Err(ModelError::PlanMismatch {
            plan: visible.last().copied().unwrap_or(0) + 1,
            bag: bag.n_patches(),
        });
    }

    let keep = anchor_dropout(bag.n_anchors(), p_drop, training, rng)?;
    let kept_anchors: Vec<usize> =
        keep.iter().enumerate().filter(|&(_, &k)| k).map(|(i, _)| i).collect();

    let feats = features_const(tape, bag, visible);
    let tokens0 = tape.concat_rows(&[bound.class_token, feats])?;
    let anchors0 = tape.gather_rows(bound.anchor_pool, &kept_anchors)?;

    let dist = with_class_column(
        &bag.dist.select_cols(visible)?.select_rows(&kept_anchors)?,
        hyper.d_max,
    );
    let polar_base = with_class_column(
        &bag.polar.select_cols(visible)?.select_rows(&kept_anchors)?,
        0,
    );
    let mut polar: Vec<IndexMatrix> = vec![polar_base; hyper.heads];

    let mut x = tokens0;
    let mut k = anchors0;
    let mut attn_states = Vec::with_capacity(hyper.enc_blocks);
    for block in &bound.enc {
        let out = encoder_block(tape, x, k, &dist, &polar, block, hyper.kro_enabled)?;
        x = out.x;
        k = out.k;
        polar = out.polar_next;
        attn_states.push(out.attn);
    }
    Ok(EncodeOutput {
        tokens: x,
        anchors: k,
        kept_anchors,
        attn: attn_states,
        polar_final: polar,
    })
}

pub fn all_visible(n_p: usize) -> Vec<usize> {
    (0..n_p).collect()
}

/// Rebuilds the full patch sequence (mask token at masked positions, class
/// token up front), runs the decoder stack with the complete D/P, and
/// projects back to feature space. Returns `n_p × d_f` reconstructions in
/// original patch order (class row dropped).
pub fn decode(
    tape: &mut Tape,
    bag: &SlideBag,
    plan: &MaskPlan,
    enc: &EncodeOutput,
    bound: &BoundModel,
    hyper: &ModelHyper,
) -> Result<Var, ModelError> {
    let n_p = bag.n_patches();
    if plan.n_p() != n_p {
        return Err(ModelError::PlanMismatch { plan: plan.n_p(), bag: n_p });
    }
    // source rows: encoder tokens then the mask token
    let src = tape.concat_rows(&[enc.tokens, bound.mask_token])?;
    let mask_row = plan.unmasked.len() + 1;
    let mut pos_of_visible = vec![usize::MAX; n_p];
    for (i, &j) in plan.unmasked.iter().enumerate() {
        pos_of_visible[j] = i + 1; // +1: class token occupies row 0
    }
    let mut perm = Vec::with_capacity(n_p + 1);
    perm.push(0);
    for j in 0..n_p {
        perm.push(if pos_of_visible[j] == usize::MAX { mask_row } else { pos_of_visible[j] });
    }
    let mut x = tape.gather_rows(src, &perm)?;
    let mut k = enc.anchors;

    // full-length position matrices (the decoder restarts from the
    // geometric polar frame; the encoder's reoriented frames are sliced to
    // visible columns and cannot index the full sequence)
    let dist = with_class_column(&bag.dist.select_rows(&enc.kept_anchors)?, hyper.d_max);
    let polar_base = with_class_column(&bag.polar.select_rows(&enc.kept_anchors)?, 0);
    let mut polar: Vec<IndexMatrix> = vec![polar_base; hyper.heads];

    for block in &bound.dec {
        let out = encoder_block(tape, x, k, &dist, &polar, block, hyper.kro_enabled)?;
        x = out.x;
        k = out.k;
        polar = out.polar_next;
    }
    let projected = tape.matmul(x, bound.recon_w)?;
    let projected = tape.add_bias(projected, bound.recon_b)?;
    // drop the class row: reconstruction targets are patches only
    let patch_rows: Vec<usize> = (1..=n_p).collect();
    Ok(tape.gather_rows(projected, &patch_rows)?)
}

/// Mean squared error over masked rows only.
pub fn masked_mse(
    tape: &mut Tape,
    recon: Var,
    target: Var,
    plan: &MaskPlan,
) -> Result<Var, ModelError> {
    if plan.masked.is_empty() {
        return Err(ModelError::EmptyMask);
    }
    let diff = tape.sub(recon, target)?;
    let sq = tape.mul(diff, diff)?;
    let masked_rows = tape.gather_rows(sq, &plan.masked)?;
    Ok(tape.mean_all(masked_rows)?)
}

/// Full pretraining forward: encode the visible set, decode, masked MSE.
pub fn pretrain_loss(
    tape: &mut Tape,
    bag: &SlideBag,
    plan: &MaskPlan,
    bound: &BoundModel,
    hyper: &ModelHyper,
    p_drop: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, EncodeOutput), ModelError> {
    let enc = encode(tape, bag, &plan.unmasked, bound, hyper, p_drop, training, rng)?;
    let recon = decode(tape, bag, plan, &enc, bound, hyper)?;
    let target = features_const(tape, bag, &all_visible(bag.n_patches()));
    let loss = masked_mse(tape, recon, target, plan)?;
    Ok((loss, enc))
}

pub struct ClassifyOutput {
    pub logits: Var,
    /// Final class-token state (`1 × d_f`), the probe/finetune embedding.
    pub class_state: Var,
    pub encode: EncodeOutput,
}

/// Classification forward: encode with every patch visible, read the class
/// token, apply the task head.
pub fn classify(
    tape: &mut Tape,
    bag: &SlideBag,
    bound: &BoundModel,
    hyper: &ModelHyper,
    p_drop: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ClassifyOutput, ModelError> {
    let head = bound.task_head.ok_or(ModelError::MissingTaskHead)?;
    let visible = all_visible(bag.n_patches());
    let enc = encode(tape, bag, &visible, bound, hyper, p_drop, training, rng)?;
    let class_state = tape.gather_rows(enc.tokens, &[0])?;
    let logits = tape.matmul(class_state, head)?;
    Ok(ClassifyOutput { logits, class_state, encode: enc })
}

/// Cross-entropy loss for a labeled bag on an existing classify output.
pub fn class_loss(
    tape: &mut Tape,
    bag: &SlideBag,
    logits: Var,
    n_classes: usize,
) -> Result<Var, ModelError> {
    let label = bag.label.ok_or(ModelError::UnlabeledBag)?;
    if label as usize >= n_classes {
        return Err(ModelError::LabelOutOfRange { label, n_classes });
    }
    Ok(tape.cross_entropy(logits, label as usize)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_bag, GeometryConfig};
    use crate::gradcheck::grad_check;
    use proptest::prelude::*;

    fn small_hyper() -> ModelHyper {
        ModelHyper {
            d_f: 8,
            heads: 2,
            enc_blocks: 2,
            dec_blocks: 1,
            mlp_expansion: 2,
            polar_bins: 8,
            d_max: 6,
            max_anchors: 4,
            n_classes: Some(3),
            kro_enabled: true,
        }
    }

    fn small_bag(n_p: usize, d_f: usize, label: Option<u32>) -> SlideBag {
        let coords: Vec<(i32, i32)> = (0..n_p as i32).map(|i| (i % 5, i / 5)).collect();
        let features: Vec<f32> = (0..n_p * d_f)
            .map(|i| ((i * 37 % 17) as f32 - 8.0) / 8.0)
            .collect();
        let cfg = GeometryConfig {
            patches_per_anchor: (n_p / 2).max(1) as u32,
            polar_bins: 8,
            d_max: 6,
            kmeans_iters: 20,
            seed: 5,
        };
        build_bag(coords, features, d_f, label, cfg).unwrap()
    }

    #[test]
    fn mask_plan_hits_exact_counts() {
        let mut rng = seed::rng(1, &[stream::MASK]);
        let plan = make_mask_plan(4, 0.75, &mut rng).unwrap();
        assert_eq!(plan.masked.len(), 3);
        assert_eq!(plan.unmasked.len(), 1);
        let plan = make_mask_plan(2, 0.75, &mut rng).unwrap();
        assert_eq!((plan.masked.len(), plan.unmasked.len()), (1, 1));
    }

    #[test]
    fn mask_plan_is_deterministic_under_seed() {
        let a = make_mask_plan(50, 0.6, &mut seed::rng(9, &[stream::MASK])).unwrap();
        let b = make_mask_plan(50, 0.6, &mut seed::rng(9, &[stream::MASK])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mask_plan_rejects_degenerate_input() {
        let mut rng = seed::rng(1, &[stream::MASK]);
        assert!(matches!(
            make_mask_plan(1, 0.5, &mut rng),
            Err(ModelError::DegenerateBag { n_p: 1 })
        ));
        assert!(matches!(
            make_mask_plan(8, 1.0, &mut rng),
            Err(ModelError::InvalidRatio(_))
        ));
    }

    #[test]
    fn named_traversals_agree() {
        let hyper = small_hyper();
        let mut params = ModelParams::init(&hyper, 7).unwrap();
        let mut names_a = Vec::new();
        params.for_each_named(&mut |n, t| names_a.push((n, t.rows, t.cols)));
        let mut names_b = Vec::new();
        params.for_each_named_mut(&mut |n, t| names_b.push((n, t.rows, t.cols)));
        assert_eq!(names_a, names_b);

        // binding puts the same names in the same order on the tape
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, &params, Trainability::All);
        let bound_names: Vec<&String> = bound.named.iter().map(|(n, _)| n).collect();
        let trav_names: Vec<&String> = names_a.iter().map(|(n, _, _)| n).collect();
        assert_eq!(bound_names.len(), trav_names.len());
        for (a, b) in bound_names.iter().zip(&trav_names) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn flatten_assign_round_trip() {
        let hyper = small_hyper();
        let params = ModelParams::init(&hyper, 7).unwrap();
        let flat = params.flatten();
        assert_eq!(flat.len(), params.param_count());
        let mut other = ModelParams::init(&hyper, 8).unwrap();
        other.assign_flat(&flat);
        assert_eq!(other.flatten(), flat);
    }

    #[test]
    fn decoder_stack_is_smaller_than_encoder_stack() {
        // asymmetry holds for the shipped default too, not just tiny configs
        for hyper in [small_hyper(), ModelHyper::default()] {
            let hyper = ModelHyper { n_classes: Some(2), ..hyper };
            let params = ModelParams::init(&hyper, 1).unwrap();
            let count = |blocks: &[BlockParams]| -> usize {
                let mut n = 0;
                for b in blocks {
                    b.for_each_named("", &mut |_, t| n += t.numel());
                }
                n
            };
            assert!(count(&params.dec_blocks) < count(&params.enc_blocks));
        }
    }

    #[test]
    fn hyper_validation_catches_bad_shapes() {
        let mut h = small_hyper();
        h.heads = 3; // does not divide d_f=8
        assert!(h.validate().is_err());
        let mut h = small_hyper();
        h.dec_blocks = 2; // not smaller than enc_blocks=2
        assert!(h.validate().is_err());
    }

    #[test]
    fn encode_token_count_is_visible_plus_class() {
        let hyper = small_hyper();
        let params = ModelParams::init(&hyper, 3).unwrap();
        let bag = small_bag(10, 8, None);
        let mut rng = seed::rng(0, &[stream::MASK]);
        let plan = make_mask_plan(10, 0.5, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, &params, Trainability::All);
        let mut drop_rng = seed::rng(0, &[stream::DROPOUT]);
        let out = encode(
            &mut tape, &bag, &plan.unmasked, &bound, &hyper, 0.0, false, &mut drop_rng,
        )
        .unwrap();
        assert_eq!(tape.value(out.tokens).rows, plan.unmasked.len() + 1);
        assert_eq!(tape.value(out.tokens).cols, 8);
    }

    #[test]
    fn masked_features_cannot_reach_the_encoder() {
        let hyper = small_hyper();
        let params = ModelParams::init(&hyper, 3).unwrap();
        let mut bag = small_bag(12, 8, None);
        let mut rng = seed::rng(4, &[stream::MASK]);
        let plan = make_mask_plan(12, 0.5, &mut rng).unwrap();

        let run = |bag: &SlideBag| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound = bind_model(&mut tape, &params, Trainability::All);
            let mut drop_rng = seed::rng(0, &[stream::DROPOUT]);
            let out = encode(
                &mut tape, bag, &plan.unmasked, &bound, &hyper, 0.0, false, &mut drop_rng,
            )
            .unwrap();
            let mut v = tape.value(out.tokens).data.clone();
            v.extend_from_slice(&tape.value(out.anchors).data);
            v
        };
        let before = run(&bag);
        // trash every masked patch's features
        for &m in &plan.masked {
            for d in 0..bag.d_f {
                bag.features[m * bag.d_f + d] += 1000.0;
            }
        }
        let after = run(&bag);
        assert_eq!(before, after, "masked features leaked into the encoder");
    }

    #[test]
    fn decode_returns_full_patch_grid() {
        let hyper = small_hyper();
        let params = ModelParams::init(&hyper, 3).unwrap();
        let bag = small_bag(9, 8, None);
        let mut rng = seed::rng(2, &[stream::MASK]);
        let plan = make_mask_plan(9, 0.75, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, &params, Trainability::All);
        let mut drop_rng = seed::rng(0, &[stream::DROPOUT]);
        let (loss, _) = pretrain_loss(
            &mut tape, &bag, &plan, &bound, &hyper, 0.0, false, &mut drop_rng,
        )
        .unwrap();
        assert!(tape.scalar_value(loss).is_finite());
    }

    #[test]
    fn masked_mse_ignores_unmasked_rows() {
        let plan = MaskPlan { masked: vec![1], unmasked: vec![0, 2] };
        let mut tape = Tape::new();
        let target = tape.constant(Tensor::zeros(3, 8));
        // reconstruction differs from target by 1.0 on the masked row
        let mut recon_t = Tensor::zeros(3, 8);
        for d in 0..8 {
            recon_t.data[8 + d] = 1.0;
        }
        let recon = tape.constant(recon_t);
        let loss = masked_mse(&mut tape, recon, target, &plan).unwrap();
        assert_eq!(tape.scalar_value(loss), 1.0);

        // perturbing an unmasked row changes nothing
        let mut tape = Tape::new();
        let target = tape.constant(Tensor::zeros(3, 8));
        let mut recon_t = Tensor::zeros(3, 8);
        for d in 0..8 {
            recon_t.data[8 + d] = 1.0;
            recon_t.data[d] = 123.0; // row 0 is unmasked
        }
        let recon = tape.constant(recon_t);
        let loss2 = masked_mse(&mut tape, recon, target, &plan).unwrap();
        assert_eq!(tape.scalar_value(loss2), 1.0);
    }

    #[test]
    fn classify_is_deterministic_in_eval_mode() {
        let hyper = small_hyper();
        let params = ModelParams::init(&hyper, 3).unwrap();
        let bag = small_bag(8, 8, Some(1));
        let run = |rng_seed: u64| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound = bind_model(&mut tape, &params, Trainability::All);
            let mut rng = seed::rng(rng_seed, &[stream::DROPOUT]);
            let out = classify(&mut tape, &bag, &bound, &hyper, 0.5, false, &mut rng).unwrap();
            tape.value(out.logits).data.clone()
        };
        // different rng streams, same eval output
        assert_eq!(run(1), run(999));
    }

    #[test]
    fn classify_requires_a_task_head() {
        let hyper = ModelHyper { n_classes: None, ..small_hyper() };
        let params = ModelParams::init(&hyper, 3).unwrap();
        let bag = small_bag(8, 8, Some(1));
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, &params, Trainability::All);
        let mut rng = seed::rng(0, &[stream::DROPOUT]);
        assert!(matches!(
            classify(&mut tape, &bag, &bound, &hyper, 0.0, false, &mut rng),
            Err(ModelError::MissingTaskHead)
        ));
    }

    #[test]
    fn head_only_binding_freezes_the_encoder() {
        let hyper = small_hyper();
        let params = ModelParams::init(&hyper, 3).unwrap();
        let bag = small_bag(8, 8, Some(1));
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, &params, Trainability::HeadOnly);
        let mut rng = seed::rng(0, &[stream::DROPOUT]);
        let out = classify(&mut tape, &bag, &bound, &hyper, 0.0, false, &mut rng).unwrap();
        let loss = class_loss(&mut tape, &bag, out.logits, 3).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (name, var) in &bound.named {
            if name == "head.w" {
                assert!(grads.get(*var).is_some(), "head must receive a gradient");
            } else {
                assert!(grads.get(*var).is_none(), "{name} must stay frozen");
            }
        }
    }

    #[test]
    fn full_pretrain_forward_passes_gradient_check() {
        // miniature shape: the acceptance suite runs the bigger pinned one
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
        let params = ModelParams::init(&hyper, 11).unwrap();
        let coords: Vec<(i32, i32)> = (0..6).map(|i| (i % 3, i / 3)).collect();
        let features: Vec<f32> = (0..24).map(|i| ((i % 5) as f32 - 2.0) / 2.0).collect();
        let cfg = GeometryConfig {
            patches_per_anchor: 3,
            polar_bins: 4,
            d_max: 4,
            kmeans_iters: 20,
            seed: 2,
        };
        let bag = build_bag(coords, features, 4, None, cfg).unwrap();
        let plan = make_mask_plan(6, 0.5, &mut seed::rng(3, &[stream::MASK])).unwrap();

        let theta0 = params.flatten();
        let run = |theta: &[f64]| -> Result<(f64, Vec<f64>), TensorError> {
            let mut p = params.clone();
            p.assign_flat(theta);
            let mut tape = Tape::new();
            let bound = bind_model(&mut tape, &p, Trainability::All);
            let mut rng = seed::rng(0, &[stream::DROPOUT]);
            let (loss, _) = pretrain_loss(
                &mut tape, &bag, &plan, &bound, &hyper, 0.0, false, &mut rng,
            )
            .map_err(|e| match e {
                ModelError::Tensor(t) => t,
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
        let (_, analytic) = run(&theta0).unwrap();
        let err = grad_check(|p| run(p).map(|(l, _)| l), &theta0, &analytic, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn task_head_gradient_matches_finite_differences() {
        let hyper = small_hyper();
        let params = ModelParams::init(&hyper, 5).unwrap();
        let bag = small_bag(8, 8, Some(2));
        let theta0 = params.task_head.as_ref().unwrap().data.clone();
        let run = |theta: &[f64]| -> Result<(f64, Vec<f64>), TensorError> {
            let mut p = params.clone();
            p.task_head.as_mut().unwrap().data = theta.to_vec();
            let mut tape = Tape::new();
            let bound = bind_model(&mut tape, &p, Trainability::All);
            let mut rng = seed::rng(0, &[stream::DROPOUT]);
            let out = classify(&mut tape, &bag, &bound, &hyper, 0.0, false, &mut rng)
                .map_err(|e| match e {
                    ModelError::Tensor(t) => t,
                    other => panic!("unexpected error: {other}"),
                })?;
            let loss = class_loss(&mut tape, &bag, out.logits, 3).map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => panic!("unexpected error: {other}"),
            })?;
            let grads = tape.backward(loss)?;
            let g = grads.get(bound.task_head.unwrap()).unwrap().to_vec();
            Ok((tape.scalar_value(loss), g))
        };
        let (_, analytic) = run(&theta0).unwrap();
        let err = grad_check(|p| run(p).map(|(l, _)| l), &theta0, &analytic, 1e-5).unwrap();
        assert!(err < 1e-5, "max relative error {err}");
    }

    proptest! {
        #[test]
        fn mask_plans_partition_the_index_set(
            n_p in 2usize..60,
            r_millis in 1u32..999,
            seed_v in 0u64..500,
        ) {
            let r = r_millis as f64 / 1000.0;
            let plan = make_mask_plan(n_p, r, &mut seed::rng(seed_v, &[stream::MASK])).unwrap();
            prop_assert!(!plan.masked.is_empty());
            prop_assert!(!plan.unmasked.is_empty());
            let mut all: Vec<usize> = plan.masked.iter().chain(&plan.unmasked).copied().collect();
            all.sort_unstable();
            let expect: Vec<usize> = (0..n_p).collect();
            prop_assert_eq!(all, expect);
            let want = ((r * n_p as f64).round() as usize).clamp(1, n_p - 1);
            prop_assert_eq!(plan.masked.len(), want);
        }
    }
}
