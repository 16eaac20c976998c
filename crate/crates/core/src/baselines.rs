//! Reference compressors: plain and activation-whitened SVD of single
//! weights, identity-statistics versions of the attention solvers, and
//! magnitude / diagonal-activation pruning.

use serde::{Deserialize, Serialize};

use crate::cur::{expand_pairs, pair_sums, top_k};
use crate::error::{Error, Result};
use crate::solver_ov::{solve_ov_gqa, solve_ov_mha, OvSolution, OvVariant};
use crate::solver_qk::{solve_qk_gqa, solve_qk_mha, QkObjective, QkSolution};
use crate::tensor::{psd_roots, psd_sqrt, svd, truncated_svd, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    PlainSvd,
    WhitenedSvd,
    CloverQk,
    CloverOv,
    AbsW,
    Wanda,
}

impl BaselineKind {
    pub fn needs_stats(self) -> bool {
        matches!(self, Self::WhitenedSvd | Self::Wanda)
    }
}

/// Best rank-`r` factors of `w` in Frobenius norm.
pub fn plain_svd_layer(w: &Matrix, r: usize) -> Result<(Matrix, Matrix)> {
    truncated_svd(w, r)
}

/// Squared singular values beyond rank `r`.
pub fn discarded_energy(w: &Matrix, r: usize) -> Result<f64> {
    let f = svd(w)?;
    Ok(f.s.iter().skip(r).map(|s| s * s).sum())
}

/// `Ar = S^-1 U_r`, `Br = Sigma_r V_r^T` from the SVD of `S W`, `S = R^1/2`.
pub fn whitened_svd_layer(w: &Matrix, r_xx: &Matrix, r: usize, damping: f64) -> Result<(Matrix, Matrix)> {
    if r_xx.shape() != (w.rows(), w.rows()) {
        return Err(Error::ShapeMismatch {
            op: "whitened_svd_layer",
            left: r_xx.shape(),
            right: w.shape(),
        });
    }
    let max = w.rows().min(w.cols());
    if r < 1 || r > max {
        return Err(Error::InvalidRank { rank: r, min: 1, max });
    }
    let roots = psd_roots(r_xx, damping)?;
    let f = svd(&roots.sqrt.matmul(w)?)?;
    Ok((
        roots.inv_sqrt.matmul(&f.u.col_block(0, r))?,
        f.vt.row_block(0, r).scale_rows(&f.s[..r]),
    ))
}

/// `E{||x D||^2} = ||R^1/2 D||_F^2` for a layer-output error `D`.
pub fn linear_output_objective(r_xx: &Matrix, delta: &Matrix) -> Result<f64> {
    Ok(psd_sqrt(r_xx, 0.0)?.matmul(delta)?.frobenius_sq())
}

pub fn clover_qk(wq: &Matrix, wk: &Matrix, r: usize) -> Result<QkSolution> {
    let i = Matrix::identity(wq.rows());
    solve_qk_mha(wq, wk, &i, &i, r, 0.0)
}

pub fn clover_qk_group(wq_group: &[Matrix], wk: &Matrix, r: usize) -> Result<QkSolution> {
    let i = Matrix::identity(wk.rows());
    solve_qk_gqa(wq_group, wk, &i, &i, r, 0.0)
}

pub fn clover_ov(wv: &Matrix, wo: &Matrix, r: usize) -> Result<OvSolution> {
    solve_ov_mha(wv, wo, &Matrix::identity(wv.rows()), r, 0.0)
}

pub fn clover_ov_group(wv: &Matrix, wo_group: &[Matrix], r: usize) -> Result<OvSolution> {
    solve_ov_gqa(wv, wo_group, &Matrix::identity(wv.rows()), r, 0.0)
}

/// Factorises the key projection alone, `Wk ~ A B`, and absorbs `B` into
/// the queries: `Wk~ = A`, `Wq~_i = Wq_i B^T`. `r_kv = None` is the plain
/// SVD, otherwise the whitened one. The objective is evaluated on
/// `(r_qq_eval, r_kv_eval)`.
pub fn key_factor_qk(
    wq_group: &[Matrix],
    wk: &Matrix,
    r_kv: Option<&Matrix>,
    r: usize,
    damping: f64,
    r_qq_eval: &Matrix,
    r_kv_eval: &Matrix,
) -> Result<QkSolution> {
    let (a, b) = match r_kv {
        Some(stats) => whitened_svd_layer(wk, stats, r, damping)?,
        None => plain_svd_layer(wk, r)?,
    };
    let wq_t = wq_group
        .iter()
        .map(|q| q.matmul_t(&b))
        .collect::<Result<Vec<_>>>()?;
    let objective = QkObjective::new(r_qq_eval, r_kv_eval)?.eval_factors(wq_group, wk, &wq_t, &a)?;
    Ok(QkSolution {
        wq: wq_t,
        wk: a,
        freq_indices: None,
        objective,
    })
}

/// Factorises the value projection alone, `Wv ~ A B`: `Wv~ = A`,
/// `Wo~_i = B Wo_i`. The objective is the summed `||R_kv^1/2 D_i||^2`.
pub fn value_factor_ov(
    wv: &Matrix,
    wo_group: &[Matrix],
    r_kv: Option<&Matrix>,
    r: usize,
    damping: f64,
    r_kv_eval: &Matrix,
) -> Result<OvSolution> {
    let (a, b) = match r_kv {
        Some(stats) => whitened_svd_layer(wv, stats, r, damping)?,
        None => plain_svd_layer(wv, r)?,
    };
    let wo_t = wo_group.iter().map(|o| b.matmul(o)).collect::<Result<Vec<_>>>()?;
    let mut objective = 0.0;
    for (o, o_t) in wo_group.iter().zip(&wo_t) {
        objective += linear_output_objective(r_kv_eval, &wv.matmul(o)?.sub(&a.matmul(o_t)?)?)?;
    }
    Ok(OvSolution {
        wv: vec![a],
        wo: wo_t,
        objective,
        variant: if wo_group.len() == 1 {
            OvVariant::PerHead
        } else {
            OvVariant::GqaJoint
        },
        kv_dim: r,
    })
}

fn select(scores: Vec<f64>, r: usize, paired: bool) -> Result<Vec<usize>> {
    if paired {
        if !r.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "paired selection needs an even rank, got {r}"
            )));
        }
        let pairs = pair_sums(&scores)?;
        if r == 0 || r / 2 > pairs.len() {
            return Err(Error::InvalidRank {
                rank: r,
                min: 2,
                max: 2 * pairs.len(),
            });
        }
        Ok(expand_pairs(&top_k(&pairs, r / 2)?))
    } else {
        top_k(&scores, r)
    }
}

fn check_inner(l: &Matrix, r: &Matrix, op: &'static str) -> Result<()> {
    if l.cols() != r.rows() {
        return Err(Error::ShapeMismatch {
            op,
            left: l.shape(),
            right: r.shape(),
        });
    }
    Ok(())
}

/// Keeps the `r` inner dimensions with the largest
/// `sum |L[:, i]| + sum |R[i, :]|`, pair-summed when `paired`.
pub fn prune_abs_w(l: &Matrix, r_mat: &Matrix, r: usize, paired: bool) -> Result<Vec<usize>> {
    check_inner(l, r_mat, "prune_abs_w")?;
    let scores = (0..l.cols())
        .map(|i| {
            let c: f64 = (0..l.rows()).map(|k| l[(k, i)].abs()).sum();
            let w: f64 = r_mat.row(i).iter().map(|v| v.abs()).sum();
            c + w
        })
        .collect();
    select(scores, r, paired)
}

/// Scores of the outer-product rule with only the diagonals of the two
/// autocorrelations, damped the same way as the full solvers.
pub fn wanda_scores(l: &Matrix, r_mat: &Matrix, diag_l: &[f64], diag_r: &[f64], damping: f64) -> Result<Vec<f64>> {
    check_inner(l, r_mat, "prune_wanda")?;
    if diag_l.len() != l.rows() || diag_r.len() != r_mat.cols() {
        return Err(Error::InvalidArgument(format!(
            "diagonal lengths {}/{} do not match {}/{}",
            diag_l.len(),
            diag_r.len(),
            l.rows(),
            r_mat.cols()
        )));
    }
    let damp = |d: &[f64]| -> Vec<f64> {
        let shift = damping * d.iter().sum::<f64>() / d.len() as f64;
        d.iter().map(|v| (v + shift).max(0.0)).collect()
    };
    let (dl, dr) = (damp(diag_l), damp(diag_r));
    Ok((0..l.cols())
        .map(|i| {
            let a: f64 = (0..l.rows()).map(|k| dl[k] * l[(k, i)] * l[(k, i)]).sum();
            let b: f64 = r_mat.row(i).iter().zip(&dr).map(|(w, s)| s * w * w).sum();
            a * b
        })
        .collect())
}

pub fn prune_wanda(
    l: &Matrix,
    r_mat: &Matrix,
    diag_l: &[f64],
    diag_r: &[f64],
    r: usize,
    paired: bool,
    damping: f64,
) -> Result<Vec<usize>> {
    select(wanda_scores(l, r_mat, diag_l, diag_r, damping)?, r, paired)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_matrix, seeded};
    use crate::solver_qk::{qk_cur_scores, solve_qk_rope};

    #[test]
    fn plain_svd_examples() {
        let u = Matrix::from_vec(3, 1, vec![1.0, 2.0, -1.0]).unwrap();
        let v = Matrix::from_vec(1, 2, vec![3.0, 1.0]).unwrap();
        let w = u.matmul(&v).unwrap();
        let (a, b) = plain_svd_layer(&w, 1).unwrap();
        assert!(a.matmul(&b).unwrap().max_abs_diff(&w) < 1e-12);
        let i = Matrix::identity(4);
        let (a, b) = plain_svd_layer(&i, 2).unwrap();
        assert!((i.sub(&a.matmul(&b).unwrap()).unwrap().frobenius_sq() - 2.0).abs() < 1e-12);
        assert!((discarded_energy(&i, 2).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn plain_svd_delegates_bitwise() {
        let w = gaussian_matrix(&mut seeded(1), 6, 5);
        assert_eq!(plain_svd_layer(&w, 3).unwrap(), truncated_svd(&w, 3).unwrap());
    }

    #[test]
    fn whitened_with_identity_matches_plain() {
        let w = gaussian_matrix(&mut seeded(2), 6, 5);
        let (a, b) = whitened_svd_layer(&w, &Matrix::identity(6), 3, 0.0).unwrap();
        let (c, d) = plain_svd_layer(&w, 3).unwrap();
        assert!(a.matmul(&b).unwrap().max_abs_diff(&c.matmul(&d).unwrap()) < 1e-12);
        let x = gaussian_matrix(&mut seeded(3), 9, 6);
        let r = x.t_matmul(&x).unwrap();
        let (a, b) = whitened_svd_layer(&w, &r, 5, 1e-6).unwrap();
        assert!(a.matmul(&b).unwrap().max_abs_diff(&w) < 1e-8);
    }

    #[test]
    fn clover_is_identity_solver() {
        let mut rng = seeded(4);
        let wq = gaussian_matrix(&mut rng, 6, 4);
        let wk = gaussian_matrix(&mut rng, 6, 4);
        let i = Matrix::identity(6);
        assert_eq!(clover_qk(&wq, &wk, 2).unwrap(), solve_qk_mha(&wq, &wk, &i, &i, 2, 0.0).unwrap());
    }

    #[test]
    fn abs_w_examples() {
        let mut l = Matrix::zeros(3, 4);
        let mut r = Matrix::zeros(4, 3);
        for c in 0..4 {
            l[(0, c)] = 1.0;
            r[(c, 0)] = 1.0;
        }
        l[(1, 2)] = 10.0;
        assert_eq!(prune_abs_w(&l, &r, 1, false).unwrap(), vec![2]);
        assert_eq!(prune_abs_w(&l, &r, 2, true).unwrap(), vec![2, 3]);
        assert_eq!(prune_abs_w(&l, &r, 4, false).unwrap(), vec![0, 1, 2, 3]);
        assert!(prune_abs_w(&l, &r, 3, true).is_err());
    }

    #[test]
    fn wanda_matches_cur_on_diagonal_stats() {
        let mut rng = seeded(5);
        let wq = gaussian_matrix(&mut rng, 6, 4);
        let wk = gaussian_matrix(&mut rng, 6, 4);
        let dq: Vec<f64> = (0..6).map(|i| 1.0 + i as f64).collect();
        let dk: Vec<f64> = (0..6).map(|i| 6.0 - i as f64).collect();
        let (rq, rk) = (Matrix::from_diag(&dq), Matrix::from_diag(&dk));
        let full = qk_cur_scores(std::slice::from_ref(&wq), &wk, &rq, &rk, 1e-6).unwrap();
        let diag = wanda_scores(&wq, &wk.transpose(), &dq, &dk, 1e-6).unwrap();
        for (a, b) in full.iter().zip(&diag) {
            assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
        }
        let sel = prune_wanda(&wq, &wk.transpose(), &dq, &dk, 2, true, 1e-6).unwrap();
        let cur = solve_qk_rope(&wq, &wk, &rq, &rk, 2, 1e-6).unwrap();
        assert_eq!(Some(sel), cur.freq_indices);
    }

    #[test]
    fn wanda_isotropic_is_weight_norm() {
        let mut rng = seeded(6);
        let l = gaussian_matrix(&mut rng, 5, 6);
        let r = gaussian_matrix(&mut rng, 6, 5);
        let s = wanda_scores(&l, &r, &[1.0; 5], &[1.0; 5], 0.0).unwrap();
        let norms = crate::cur::outer_scores(&l, &r).unwrap();
        for (a, b) in s.iter().zip(&norms) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn key_factor_full_rank_is_exact() {
        let mut rng = seeded(7);
        let wq = gaussian_matrix(&mut rng, 6, 4);
        let wk = gaussian_matrix(&mut rng, 6, 4);
        let i = Matrix::identity(6);
        let sol = key_factor_qk(std::slice::from_ref(&wq), &wk, None, 4, 0.0, &i, &i).unwrap();
        assert!(sol.fused(0).unwrap().max_abs_diff(&wq.matmul_t(&wk).unwrap()) < 1e-10);
        assert!(sol.objective < 1e-18);
    }
}
