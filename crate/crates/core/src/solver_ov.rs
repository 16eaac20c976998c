//! Value/output head-dimension reduction.
//!
//! Head `i` contributes `o_i = p_i W_vo,i` with `p_i = a'_i X_kv`, a linear
//! layer on the attention-weighted values, so each fused `W_vo,i` gets the
//! whitened truncated SVD under `R_p,i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{attention_head_outputs, ActivationBatch, LayerWeights, ModelConfig};
use crate::tensor::{psd_roots, psd_sqrt, svd, Matrix};

/// Default ceiling on `h_q * d_model` for the stacked solver.
pub const DEFAULT_OVERALL_LIMIT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OvVariant {
    #[default]
    PerHead,
    GqaJoint,
    Overall,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OvSolution {
    /// Value projections: one shared matrix for `PerHead`/`GqaJoint`, one per
    /// query head for `Overall`. Each `d_model x r`.
    pub wv: Vec<Matrix>,
    /// One per query head, `r x d_model`.
    pub wo: Vec<Matrix>,
    pub objective: f64,
    pub variant: OvVariant,
    /// Cached value scalars per token for this solution.
    pub kv_dim: usize,
}

impl OvSolution {
    pub fn rank(&self) -> usize {
        self.wo[0].rows()
    }

    pub fn fused(&self, head: usize) -> Result<Matrix> {
        let wo = self.wo.get(head).ok_or(Error::HeadOutOfRange {
            index: head,
            count: self.wo.len(),
        })?;
        let wv = if self.wv.len() == 1 { &self.wv[0] } else { &self.wv[head] };
        wv.matmul(wo)
    }
}

/// `||R^1/2 D||_F^2` with the undamped root.
pub fn ov_objective(r_p: &Matrix, delta: &Matrix) -> Result<f64> {
    Ok(psd_sqrt(r_p, 0.0)?.matmul(delta)?.frobenius_sq())
}

fn check_rank(r: usize, max: usize) -> Result<()> {
    if r < 1 || r > max {
        return Err(Error::InvalidRank { rank: r, min: 1, max });
    }
    Ok(())
}

fn check_pair(wv: &Matrix, wo: &Matrix, op: &'static str) -> Result<()> {
    if wv.cols() != wo.rows() || wv.rows() != wo.cols() {
        return Err(Error::ShapeMismatch {
            op,
            left: wv.shape(),
            right: wo.shape(),
        });
    }
    Ok(())
}

fn check_stats(r: &Matrix, dim: usize, op: &'static str) -> Result<()> {
    if r.shape() != (dim, dim) {
        return Err(Error::ShapeMismatch {
            op,
            left: r.shape(),
            right: (dim, dim),
        });
    }
    Ok(())
}

/// `Wv~ = S^-1 U_r`, `Wo~ = Sigma_r V_r^T` for `S = R_p^1/2`.
pub fn solve_ov_mha(wv: &Matrix, wo: &Matrix, r_p: &Matrix, r: usize, damping: f64) -> Result<OvSolution> {
    check_pair(wv, wo, "solve_ov_mha")?;
    check_stats(r_p, wv.rows(), "solve_ov_mha")?;
    check_rank(r, wv.cols())?;
    let roots = psd_roots(r_p, damping)?;
    let w_vo = wv.matmul(wo)?;
    let f = svd(&roots.sqrt.matmul(&w_vo)?)?;
    let wv_t = roots.inv_sqrt.matmul(&f.u.col_block(0, r))?;
    let wo_t = f.vt.row_block(0, r).scale_rows(&f.s[..r]);
    let objective = ov_objective(r_p, &w_vo.sub(&wv_t.matmul(&wo_t)?)?)?;
    Ok(OvSolution {
        wv: vec![wv_t],
        wo: vec![wo_t],
        objective,
        variant: OvVariant::PerHead,
        kv_dim: r,
    })
}

/// Joint SVD of `[S W_vo,1, ..., S W_vo,g]` under the shared `R_kv`:
/// `Wv~ = S^-1 U_r Sigma_r`, `Wo~_i = V_r^T[:, block i]`.
pub fn solve_ov_gqa(wv: &Matrix, wo_group: &[Matrix], r_kv: &Matrix, r: usize, damping: f64) -> Result<OvSolution> {
    if wo_group.is_empty() {
        return Err(Error::InvalidArgument("solve_ov_gqa: empty output group".into()));
    }
    for wo in wo_group {
        check_pair(wv, wo, "solve_ov_gqa")?;
    }
    let d_m = wv.rows();
    check_stats(r_kv, d_m, "solve_ov_gqa")?;
    check_rank(r, wv.cols())?;
    let roots = psd_roots(r_kv, damping)?;
    let fused = wo_group.iter().map(|wo| wv.matmul(wo)).collect::<Result<Vec<_>>>()?;
    let blocks = fused
        .iter()
        .map(|w| roots.sqrt.matmul(w))
        .collect::<Result<Vec<_>>>()?;
    let f = svd(&Matrix::hstack(&blocks)?)?;
    let wv_t = roots.inv_sqrt.matmul(&f.u.col_block(0, r).scale_columns(&f.s[..r]))?;
    let vt_r = f.vt.row_block(0, r);
    let wo_t: Vec<Matrix> = (0..wo_group.len())
        .map(|i| vt_r.col_block(i * d_m, (i + 1) * d_m))
        .collect();
    let s = psd_sqrt(r_kv, 0.0)?;
    let mut objective = 0.0;
    for (w, o) in fused.iter().zip(&wo_t) {
        objective += s.matmul(&w.sub(&wv_t.matmul(o)?)?)?.frobenius_sq();
    }
    Ok(OvSolution {
        wv: vec![wv_t],
        wo: wo_t,
        objective,
        variant: OvVariant::GqaJoint,
        kv_dim: r,
    })
}

/// Rank-`r` approximation of the vertically stacked `[W_vo,1; ...; W_vo,h]`
/// under the autocorrelation of the concatenated `p` vectors. Every head
/// caches its own `r` values, so the value cache grows to `h * r` per token.
pub fn solve_ov_overall(
    wv_all: &[Matrix],
    wo_all: &[Matrix],
    r_p_cat: &Matrix,
    r: usize,
    damping: f64,
    size_limit: usize,
) -> Result<OvSolution> {
    if wv_all.is_empty() || wv_all.len() != wo_all.len() {
        return Err(Error::InvalidArgument(format!(
            "overall solver needs one value and one output matrix per head, got {} and {}",
            wv_all.len(),
            wo_all.len()
        )));
    }
    for (wv, wo) in wv_all.iter().zip(wo_all) {
        check_pair(wv, wo, "solve_ov_overall")?;
        check_pair(&wv_all[0], wo, "solve_ov_overall")?;
    }
    let h = wv_all.len();
    let d_m = wv_all[0].rows();
    if h * d_m > size_limit {
        return Err(Error::InvalidArgument(format!(
            "stacked dimension {} exceeds the limit {size_limit}",
            h * d_m
        )));
    }
    check_stats(r_p_cat, h * d_m, "solve_ov_overall")?;
    check_rank(r, (h * wv_all[0].cols()).min(d_m))?;
    let roots = psd_roots(r_p_cat, damping)?;
    let stacked = Matrix::vstack(
        &wv_all
            .iter()
            .zip(wo_all)
            .map(|(v, o)| v.matmul(o))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let f = svd(&roots.sqrt.matmul(&stacked)?)?;
    let left = roots.inv_sqrt.matmul(&f.u.col_block(0, r))?;
    let right = f.vt.row_block(0, r).scale_rows(&f.s[..r]);
    let objective = ov_objective(r_p_cat, &stacked.sub(&left.matmul(&right)?)?)?;
    Ok(OvSolution {
        wv: (0..h).map(|i| left.row_block(i * d_m, (i + 1) * d_m)).collect(),
        wo: vec![right; h],
        objective,
        variant: OvVariant::Overall,
        kv_dim: h * r,
    })
}

/// Measured attention-output errors over evaluation batches.
#[derive(Debug, Clone, PartialEq)]
pub struct OvErrorReport {
    /// Mean over tokens of `||o - o~||^2`.
    pub total: f64,
    /// Mean over tokens of `sum_i ||o_i - o~_i||^2`.
    pub per_head_sum: f64,
    /// `(total, per_head_sum)` of every batch.
    pub per_batch: Vec<(f64, f64)>,
}

impl OvErrorReport {
    /// Batches whose total error exceeds the per-head sum.
    pub fn violations(&self) -> usize {
        self.per_batch.iter().filter(|(t, s)| t > s).count()
    }
}

/// Runs both forward passes and compares attention outputs head by head.
pub fn ov_objective_mc(
    original: &LayerWeights,
    compressed: &LayerWeights,
    cfg: &ModelConfig,
    batches: &[ActivationBatch],
) -> Result<OvErrorReport> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument("no evaluation batches".into()));
    }
    let mut per_batch = Vec::with_capacity(batches.len());
    let (mut total, mut sum, mut tokens) = (0.0, 0.0, 0usize);
    for batch in batches {
        let a = attention_head_outputs(original, cfg, batch)?;
        let b = attention_head_outputs(compressed, cfg, batch)?;
        let mut diff_total = Matrix::zeros(batch.len(), cfg.d_model);
        let mut head_sum = 0.0;
        for (x, y) in a.iter().zip(&b) {
            let d = x.sub(y)?;
            head_sum += d.frobenius_sq();
            diff_total.add_assign(&d)?;
        }
        let t = batch.len() as f64;
        let bt = diff_total.frobenius_sq();
        per_batch.push((bt / t, head_sum / t));
        total += bt;
        sum += head_sum;
        tokens += batch.len();
    }
    Ok(OvErrorReport {
        total: total / tokens as f64,
        per_head_sum: sum / tokens as f64,
        per_batch,
    })
}
