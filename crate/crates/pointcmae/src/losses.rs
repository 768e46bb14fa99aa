//! Training objectives: per-patch Chamfer reconstruction and the cosine
//! contrastive term over co-masked tokens.
//!
//! Chamfer correspondences are recomputed from current values on every call
//! and enter the graph as fixed gather indices, so gradients flow through
//! point coordinates but not through the nearest-neighbour assignment.

use crate::error::{Error, Result};
use crate::geometry::chamfer_correspondences;
use crate::model::{ModelConfig, PretrainOutput};
use crate::tensor::{Element, Tape, TensorId};

/// Guards the cosine denominator against zero-norm rows.
pub const COS_EPS: f64 = 1e-8;

/// Squared-distance Chamfer between predicted and ground-truth patches.
/// Rows hold `m` patches of `k` points each; correspondences are found
/// within each patch. Both directions are normalized by the point count,
/// then averaged over patches:
/// mean_i [ (1/k) sum ||p - nn(p)||^2 + (1/k) sum ||g - nn(g)||^2 ].
pub fn chamfer_l2<T: Element>(
    tape: &mut Tape<T>,
    pred: TensorId,
    gt: TensorId,
    m: usize,
    k: usize,
) -> Result<TensorId> {
    let ps = tape.shape(pred)?;
    let gs = tape.shape(gt)?;
    if ps != gs || ps[1] != 3 || ps[0] != m * k {
        return Err(Error::dim(format!(
            "chamfer_l2: pred {ps:?} vs gt {gs:?} for {m} patches of {k}"
        )));
    }
    if m == 0 || k == 0 {
        return Err(Error::arg("chamfer_l2 needs at least one patch and point"));
    }
    let to_points = |flat: &[T]| -> Vec<[T; 3]> {
        flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
    };
    let pred_pts = to_points(tape.value(pred)?);
    let gt_pts = to_points(tape.value(gt)?);

    // Global row index in the opposite tensor of each point's nearest
    // neighbour, patch by patch.
    let mut nn_pred_to_gt = Vec::with_capacity(m * k);
    let mut nn_gt_to_pred = Vec::with_capacity(m * k);
    for i in 0..m {
        let s = i * k;
        let (ab, ba) = chamfer_correspondences(&pred_pts[s..s + k], &gt_pts[s..s + k])?;
        nn_pred_to_gt.extend(ab.into_iter().map(|j| s + j));
        nn_gt_to_pred.extend(ba.into_iter().map(|j| s + j));
    }

    let norm = T::of_f64(1.0 / (m * k) as f64);
    let g1 = tape.gather_rows(gt, &nn_pred_to_gt)?;
    let d1 = tape.sub(pred, g1)?;
    let sq1 = tape.mul(d1, d1)?;
    let s1 = tape.sum_all(sq1)?;
    let term1 = tape.scale(s1, norm)?;

    let g2 = tape.gather_rows(pred, &nn_gt_to_pred)?;
    let d2 = tape.sub(g2, gt)?;
    let sq2 = tape.mul(d2, d2)?;
    let s2 = tape.sum_all(sq2)?;
    let term2 = tape.scale(s2, norm)?;

    tape.add(term1, term2)
}

/// Mean over co-masked tokens of `1 - cos(h1[i], h2[i])`, where `h1` and
/// `h2` are decoder outputs restored to original token order. Gradients
/// flow into both branches (no stop-gradient). An empty co-mask yields a
/// constant zero.
pub fn contrastive_loss<T: Element>(
    tape: &mut Tape<T>,
    h1: TensorId,
    h2: TensorId,
    comask: &[usize],
) -> Result<TensorId> {
    let s1 = tape.shape(h1)?;
    let s2 = tape.shape(h2)?;
    if s1 != s2 {
        return Err(Error::dim(format!("contrastive_loss: {s1:?} vs {s2:?}")));
    }
    if comask.is_empty() {
        return tape.leaf(vec![T::zero()], 1, 1);
    }
    let a = tape.gather_rows(h1, comask)?;
    let b = tape.gather_rows(h2, comask)?;
    let ab = tape.mul(a, b)?;
    let dot = tape.row_sum(ab)?;
    let aa = tape.mul(a, a)?;
    let na2 = tape.row_sum(aa)?;
    let na = tape.sqrt(na2)?;
    let bb = tape.mul(b, b)?;
    let nb2 = tape.row_sum(bb)?;
    let nb = tape.sqrt(nb2)?;
    let prod = tape.mul(na, nb)?;
    let denom = tape.add_scalar(prod, T::of_f64(COS_EPS))?;
    let cos = tape.div(dot, denom)?;
    let neg = tape.scale(cos, -T::one())?;
    let one_minus = tape.add_scalar(neg, T::one())?;
    let sum = tape.sum_all(one_minus)?;
    tape.scale(sum, T::of_f64(1.0 / comask.len() as f64))
}

/// Scalar loss terms of one pre-training forward pass, plus the tape node
/// of the total used for backward.
pub struct PretrainLoss<T: Element> {
    pub total: TensorId,
    pub total_value: T,
    pub recon1: T,
    /// Present with dual masking.
    pub recon2: Option<T>,
    /// Present when the contrastive toggle is on.
    pub contras: Option<T>,
    /// Present with dual masking.
    pub comask_count: Option<usize>,
}

/// Assemble the total objective for one forward pass:
/// `recon1 (+ recon2) (+ lambda * contras)`.
pub fn pretrain_loss<T: Element>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    out: &PretrainOutput,
) -> Result<PretrainLoss<T>> {
    let m = out.mask.mask_count();
    let k = cfg.patch_size;
    let r1 = chamfer_l2(tape, out.branch1.pred, out.branch1.gt, m, k)?;
    let recon1 = tape.scalar(r1)?;
    let mut total = r1;
    let mut recon2 = None;
    let mut contras = None;
    let mut comask_count = None;

    if let Some(b2) = &out.branch2 {
        let r2 = chamfer_l2(tape, b2.pred, b2.gt, m, k)?;
        recon2 = Some(tape.scalar(r2)?);
        total = tape.add(total, r2)?;
        comask_count = Some(out.mask.comask.len());
        if cfg.contrastive {
            let c = contrastive_loss(
                tape,
                out.branch1.tokens_reordered,
                b2.tokens_reordered,
                &out.mask.comask,
            )?;
            contras = Some(tape.scalar(c)?);
            let weighted = tape.scale(c, T::of_f64(cfg.lambda))?;
            total = tape.add(total, weighted)?;
        }
    }
    let total_value = tape.scalar(total)?;
    if !total_value.is_finite() {
        return Err(Error::NonFinite(format!(
            "total loss {total_value} (recon1 {recon1}, recon2 {recon2:?}, contras {contras:?})"
        )));
    }
    Ok(PretrainLoss {
        total,
        total_value,
        recon1,
        recon2,
        contras,
        comask_count,
    })
}
