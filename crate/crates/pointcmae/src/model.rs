//! Transformer encoder/decoder over patch tokens, with patch embedding,
//! positional encoding and the reconstruction head.
//!
//! The pre-training forward pass runs the full pipeline on one cloud:
//! normalize, sample patches, tokenize, mask twice, encode each visible
//! set with a weight-shared encoder, decode each branch (mask tokens fill
//! the masked slots), and predict masked patch coordinates. Toggles select
//! the ablation variants: single vs. dual mask, shared vs. separate
//! encoders and decoders, contrastive term on or off.

use crate::error::{Error, Result};
use crate::geometry::{self, PatchSet, PointCloud};
use crate::masking::DualMask;
use crate::tensor::{Element, ParamStore, Tape, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Epsilon inside every layer-norm square root.
pub const LN_EPS: f64 = 1e-5;
/// Standard deviation for weight and mask-token initialization.
pub const INIT_STD: f64 = 0.02;

/// Architecture and objective settings. The default is the full-scale
/// configuration; [`ModelConfig::tiny`] is the desk-scale variant used by
/// fast experiments and most tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Token width C.
    pub dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    /// Hidden width of block MLPs as a multiple of `dim`.
    pub mlp_ratio: usize,
    /// Patches (tokens) per cloud.
    pub n_patches: usize,
    /// Points per patch.
    pub patch_size: usize,
    /// Fraction of tokens masked per branch.
    pub mask_ratio: f64,
    /// Weight of the contrastive term in the total loss.
    pub lambda: f64,
    /// Two independent masks (two branches) instead of one.
    pub dual_mask: bool,
    /// Branch 2 reuses branch 1's encoder weights.
    pub share_encoder: bool,
    /// Branch 2 reuses branch 1's decoder weights.
    pub share_decoder: bool,
    /// Align co-masked decoder tokens across branches.
    pub contrastive: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// Full-scale configuration: 384-dim tokens, 12 encoder and 4 decoder
    /// blocks, 64 patches of 32 points.
    pub fn full() -> Self {
        ModelConfig {
            dim: 384,
            encoder_depth: 12,
            decoder_depth: 4,
            heads: 6,
            mlp_ratio: 4,
            n_patches: 64,
            patch_size: 32,
            mask_ratio: 0.6,
            lambda: 1.0,
            dual_mask: true,
            share_encoder: true,
            share_decoder: false,
            contrastive: true,
        }
    }

    /// Desk-scale configuration that trains in minutes on a CPU.
    pub fn tiny() -> Self {
        ModelConfig {
            dim: 64,
            encoder_depth: 4,
            decoder_depth: 2,
            heads: 4,
            mlp_ratio: 4,
            n_patches: 32,
            patch_size: 16,
            ..Self::full()
        }
    }

    /// Minimal configuration for finite-difference gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            dim: 8,
            encoder_depth: 1,
            decoder_depth: 1,
            heads: 2,
            mlp_ratio: 2,
            n_patches: 8,
            patch_size: 4,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.dim % 2 != 0 {
            return Err(Error::config(format!("dim {} must be even and >= 2", self.dim)));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "heads {} must divide dim {}",
                self.heads, self.dim
            )));
        }
        if self.encoder_depth == 0 || self.decoder_depth == 0 {
            return Err(Error::config("depths must be at least 1".to_string()));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio must be at least 1".to_string()));
        }
        if self.n_patches == 0 || self.patch_size == 0 {
            return Err(Error::config("n_patches and patch_size must be positive".to_string()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::config(format!(
                "mask_ratio {} must lie strictly between 0 and 1",
                self.mask_ratio
            )));
        }
        if self.mask_count() == 0 {
            return Err(Error::config(format!(
                "mask_ratio {} masks no tokens at n_patches {}",
                self.mask_ratio, self.n_patches
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !self.dual_mask && (!self.share_encoder || self.share_decoder || self.contrastive) {
            return Err(Error::config(
                "single-mask mode runs one branch only; encoder/decoder sharing and the \
                 contrastive term require dual_mask"
                    .to_string(),
            ));
        }
        Ok(())
    }

    /// Masked tokens per branch: floor(mask_ratio * n_patches).
    pub fn mask_count(&self) -> usize {
        (self.mask_ratio * self.n_patches as f64).floor() as usize
    }

    pub fn visible_count(&self) -> usize {
        self.n_patches - self.mask_count()
    }

    fn encoder_prefix(&self, branch: usize) -> &'static str {
        if branch == 0 || self.share_encoder {
            "encoder"
        } else {
            "encoder2"
        }
    }

    fn decoder_prefix(&self, branch: usize) -> &'static str {
        if branch == 0 || self.share_decoder {
            "decoder1"
        } else {
            "decoder2"
        }
    }
}

pub(crate) fn add_linear<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    name: &str,
    input: usize,
    output: usize,
) -> Result<()> {
    let dist = Normal::new(0.0, INIT_STD).unwrap();
    let w: Vec<T> = (0..input * output)
        .map(|_| T::of_f64(dist.sample(rng)))
        .collect();
    store.add(format!("{name}.weight"), w, input, output, false)?;
    store.add(format!("{name}.bias"), vec![T::zero(); output], 1, output, true)?;
    Ok(())
}

fn add_norm<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<()> {
    store.add(format!("{name}.gain"), vec![T::one(); dim], 1, dim, true)?;
    store.add(format!("{name}.bias"), vec![T::zero(); dim], 1, dim, true)?;
    Ok(())
}

fn add_stack<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    prefix: &str,
    depth: usize,
    cfg: &ModelConfig,
) -> Result<()> {
    let d = cfg.dim;
    for i in 0..depth {
        let b = format!("{prefix}.block{i}");
        add_norm(store, &format!("{b}.ln1"), d)?;
        for proj in ["wq", "wk", "wv", "wo"] {
            add_linear(store, rng, &format!("{b}.attn.{proj}"), d, d)?;
        }
        add_norm(store, &format!("{b}.ln2"), d)?;
        add_linear(store, rng, &format!("{b}.mlp.fc1"), d, d * cfg.mlp_ratio)?;
        add_linear(store, rng, &format!("{b}.mlp.fc2"), d * cfg.mlp_ratio, d)?;
    }
    add_norm(store, &format!("{prefix}.norm"), d)
}

/// Create all model parameters. Weights draw from one seeded stream; the
/// second decoder (and second encoder, when separate) draw from a stream
/// seeded with `seed + 1` so the two branches start from independent
/// values.
pub fn init_params<T: Element>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng_a = ChaCha8Rng::seed_from_u64(seed);
    let mut rng_b = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let d = cfg.dim;

    add_linear(&mut store, &mut rng_a, "tokenizer.fc1", 3, d / 2)?;
    add_linear(&mut store, &mut rng_a, "tokenizer.fc2", d / 2, d)?;
    add_linear(&mut store, &mut rng_a, "pos.fc1", 3, 128)?;
    add_linear(&mut store, &mut rng_a, "pos.fc2", 128, d)?;
    add_stack(&mut store, &mut rng_a, "encoder", cfg.encoder_depth, cfg)?;
    if !cfg.share_encoder {
        add_stack(&mut store, &mut rng_b, "encoder2", cfg.encoder_depth, cfg)?;
    }
    add_stack(&mut store, &mut rng_a, "decoder1", cfg.decoder_depth, cfg)?;
    if !cfg.share_decoder && cfg.dual_mask {
        add_stack(&mut store, &mut rng_b, "decoder2", cfg.decoder_depth, cfg)?;
    }
    add_linear(&mut store, &mut rng_a, "rp", d, cfg.patch_size * 3)?;
    let dist = Normal::new(0.0, INIT_STD).unwrap();
    let tok: Vec<T> = (0..d).map(|_| T::of_f64(dist.sample(&mut rng_a))).collect();
    store.add("mask_token", tok, 1, d, true)?;
    Ok(store)
}

/// Scalar parameter count of the encoder side (tokenizer, positional MLP
/// and encoder stack), the figure usually quoted as model size.
pub fn encoder_side_param_count<T: Element>(store: &ParamStore<T>) -> usize {
    store.scalar_count_prefix("tokenizer.")
        + store.scalar_count_prefix("pos.")
        + store.scalar_count_prefix("encoder.")
}

fn param_id<T: Element>(tape: &mut Tape<T>, store: &ParamStore<T>, name: &str) -> Result<TensorId> {
    let idx = store
        .index_of(name)
        .ok_or_else(|| Error::arg(format!("unknown parameter {name}")))?;
    tape.param(store, idx)
}

pub(crate) fn linear_fwd<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    name: &str,
    x: TensorId,
) -> Result<TensorId> {
    let w = param_id(tape, store, &format!("{name}.weight"))?;
    let b = param_id(tape, store, &format!("{name}.bias"))?;
    let h = tape.matmul(x, w)?;
    tape.add_row(h, b)
}

fn norm_fwd<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    name: &str,
    x: TensorId,
) -> Result<TensorId> {
    let gain = param_id(tape, store, &format!("{name}.gain"))?;
    let bias = param_id(tape, store, &format!("{name}.bias"))?;
    tape.layer_norm(x, gain, bias, T::of_f64(LN_EPS))
}

fn attention_fwd<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    prefix: &str,
    x: TensorId,
) -> Result<TensorId> {
    let q = linear_fwd(tape, store, &format!("{prefix}.wq"), x)?;
    let k = linear_fwd(tape, store, &format!("{prefix}.wk"), x)?;
    let v = linear_fwd(tape, store, &format!("{prefix}.wv"), x)?;
    let dh = cfg.dim / cfg.heads;
    let scale = T::of_f64(1.0 / (dh as f64).sqrt());
    let mut merged: Option<TensorId> = None;
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale)?;
        let attn = tape.softmax_rows(scaled)?;
        let oh = tape.matmul(attn, vh)?;
        merged = Some(match merged {
            None => oh,
            Some(prev) => tape.concat_cols(prev, oh)?,
        });
    }
    linear_fwd(tape, store, &format!("{prefix}.wo"), merged.unwrap())
}

fn block_fwd<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    prefix: &str,
    x: TensorId,
) -> Result<TensorId> {
    // Pre-norm residual blocks.
    let n1 = norm_fwd(tape, store, &format!("{prefix}.ln1"), x)?;
    let att = attention_fwd(tape, store, cfg, &format!("{prefix}.attn"), n1)?;
    let x = tape.add(x, att)?;
    let n2 = norm_fwd(tape, store, &format!("{prefix}.ln2"), x)?;
    let h = linear_fwd(tape, store, &format!("{prefix}.mlp.fc1"), n2)?;
    let h = tape.gelu(h)?;
    let h = linear_fwd(tape, store, &format!("{prefix}.mlp.fc2"), h)?;
    tape.add(x, h)
}

/// `depth` pre-norm blocks under `prefix` followed by the stack's final
/// layer norm. Depth zero reduces to the final norm alone.
pub fn transformer_stack<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    prefix: &str,
    depth: usize,
    x: TensorId,
) -> Result<TensorId> {
    let mut h = x;
    for i in 0..depth {
        h = block_fwd(tape, store, cfg, &format!("{prefix}.block{i}"), h)?;
    }
    norm_fwd(tape, store, &format!("{prefix}.norm"), h)
}

/// Encoder stack over already-embedded tokens (positional encoding must be
/// added by the caller).
pub fn encode<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    prefix: &str,
    tokens: TensorId,
) -> Result<TensorId> {
    transformer_stack(tape, store, cfg, prefix, cfg.encoder_depth, tokens)
}

/// Decoder stack: append `mask_count` copies of the learned mask token to
/// the encoded visible tokens, add positional encodings (ordered visible
/// rows first, then masked rows), and run the blocks. With `mask_count`
/// zero the decoder sees only the visible rows.
pub fn decode<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    prefix: &str,
    z: TensorId,
    pos_ordered: TensorId,
    mask_count: usize,
) -> Result<TensorId> {
    let zr = tape.shape(z)?[0];
    let pr = tape.shape(pos_ordered)?[0];
    if zr + mask_count != pr {
        return Err(Error::dim(format!(
            "decode: {zr} visible + {mask_count} masked rows vs {pr} positions"
        )));
    }
    let x = if mask_count > 0 {
        let mt = param_id(tape, store, "mask_token")?;
        let rep = tape.repeat_row(mt, mask_count)?;
        tape.concat_rows(z, rep)?
    } else {
        z
    };
    let x = tape.add(x, pos_ordered)?;
    transformer_stack(tape, store, cfg, prefix, cfg.decoder_depth, x)
}

/// Map masked-token features to patch coordinates: `[m, C] -> [m*k, 3]`.
pub fn reconstruct<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    h_masked: TensorId,
) -> Result<TensorId> {
    let m = tape.shape(h_masked)?[0];
    let flat = linear_fwd(tape, store, "rp", h_masked)?;
    tape.reshape(flat, m * cfg.patch_size, 3)
}

/// Per-point MLP over center-relative patch points followed by a max-pool
/// over each patch: `[n*k, 3] -> [n, C]`. Max-pooling makes the token
/// invariant to point order within the patch.
pub fn embed_patches<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    patches: &PatchSet,
) -> Result<TensorId> {
    if patches.k != cfg.patch_size || patches.n != cfg.n_patches {
        return Err(Error::dim(format!(
            "embed_patches: patch set {}x{} vs config {}x{}",
            patches.n, patches.k, cfg.n_patches, cfg.patch_size
        )));
    }
    let flat: Vec<T> = patches
        .patches
        .iter()
        .flat_map(|p| p.iter().map(|&v| T::of_f64(v as f64)))
        .collect();
    let pts = tape.leaf(flat, patches.n * patches.k, 3)?;
    let h = linear_fwd(tape, store, "tokenizer.fc1", pts)?;
    let h = tape.gelu(h)?;
    let h = linear_fwd(tape, store, "tokenizer.fc2", h)?;
    tape.max_pool_rows(h, patches.k)
}

/// Two-layer MLP from absolute center coordinates to token width.
pub fn pos_embed<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    centers: &[[f32; 3]],
) -> Result<TensorId> {
    let flat: Vec<T> = centers
        .iter()
        .flat_map(|p| p.iter().map(|&v| T::of_f64(v as f64)))
        .collect();
    let c = tape.leaf(flat, centers.len(), 3)?;
    let h = linear_fwd(tape, store, "pos.fc1", c)?;
    let h = tape.gelu(h)?;
    linear_fwd(tape, store, "pos.fc2", h)
}

/// Outputs of one masked branch.
pub struct BranchOutput {
    /// Decoder tokens in [visible, masked] row order, `[n, C]`.
    pub decoder_tokens: TensorId,
    /// Decoder tokens restored to original token order, `[n, C]`.
    pub tokens_reordered: TensorId,
    /// Predicted masked patch points, `[m*k, 3]`.
    pub pred: TensorId,
    /// Ground-truth center-relative masked patch points, `[m*k, 3]` leaf.
    pub gt: TensorId,
}

/// Full pre-training forward pass over one cloud.
pub struct PretrainOutput {
    pub mask: DualMask,
    pub branch1: BranchOutput,
    /// Present only with dual masking.
    pub branch2: Option<BranchOutput>,
}

fn run_branch<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    branch: usize,
    tokens: TensorId,
    pos: TensorId,
    patches: &PatchSet,
    visible: &[usize],
    masked: &[usize],
    order: &[usize],
) -> Result<BranchOutput> {
    let vis_tok = tape.gather_rows(tokens, visible)?;
    let vis_pos = tape.gather_rows(pos, visible)?;
    let enc_in = tape.add(vis_tok, vis_pos)?;
    let z = encode(tape, store, cfg, cfg.encoder_prefix(branch), enc_in)?;

    let pos_ordered = tape.gather_rows(pos, order)?;
    let h = decode(
        tape,
        store,
        cfg,
        cfg.decoder_prefix(branch),
        z,
        pos_ordered,
        masked.len(),
    )?;
    let tokens_reordered = tape.scatter_rows(h, order)?;

    let masked_rows: Vec<usize> = (visible.len()..cfg.n_patches).collect();
    let h_masked = tape.gather_rows(h, &masked_rows)?;
    let pred = reconstruct(tape, store, cfg, h_masked)?;

    let mut gt_flat: Vec<T> = Vec::with_capacity(masked.len() * cfg.patch_size * 3);
    for &pi in masked {
        for j in 0..cfg.patch_size {
            let p = patches.patches[pi * cfg.patch_size + j];
            gt_flat.extend(p.iter().map(|&v| T::of_f64(v as f64)));
        }
    }
    let gt = tape.leaf(gt_flat, masked.len() * cfg.patch_size, 3)?;
    Ok(BranchOutput {
        decoder_tokens: h,
        tokens_reordered,
        pred,
        gt,
    })
}

/// Normalize, group, tokenize, mask and run both branches on one cloud.
/// `mask_rng` drives only the mask draw, so callers control mask
/// randomness independently of data.
pub fn forward_pretrain<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    cloud: &PointCloud,
    mask_rng: &mut impl Rng,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    if cloud.len() < cfg.n_patches || cloud.len() < cfg.patch_size {
        return Err(Error::arg(format!(
            "cloud of {} points cannot form {} patches of {}",
            cloud.len(),
            cfg.n_patches,
            cfg.patch_size
        )));
    }
    let normalized = geometry::normalize_cloud(cloud);
    let patches = geometry::group_and_center(
        &normalized.points,
        cfg.n_patches,
        cfg.patch_size,
        0,
    )?;
    let tokens = embed_patches(tape, store, cfg, &patches)?;
    let pos = pos_embed(tape, store, &patches.centers)?;

    let mask = if cfg.dual_mask {
        DualMask::generate(cfg.n_patches, cfg.mask_ratio, mask_rng)?
    } else {
        DualMask::single(cfg.n_patches, cfg.mask_ratio, mask_rng)?
    };

    let branch1 = run_branch(
        tape,
        store,
        cfg,
        0,
        tokens,
        pos,
        &patches,
        &mask.visible1,
        &mask.m1,
        &mask.order1(),
    )?;
    let branch2 = if cfg.dual_mask {
        Some(run_branch(
            tape,
            store,
            cfg,
            1,
            tokens,
            pos,
            &patches,
            &mask.visible2,
            &mask.m2,
            &mask.order2(),
        )?)
    } else {
        None
    };
    Ok(PretrainOutput {
        mask,
        branch1,
        branch2,
    })
}
