//! Score-preserving reduction of the query/key head dimension.
//!
//! The pre-softmax score of head `i` is `x_q Wq_i Wk_i^T x_kv^T`. For
//! independent query and key/value inputs with autocorrelations `R_qq` and
//! `R_kv` the expected squared score error of a replacement `W~_qk` is
//! `||R_qq^1/2 (W_qk - W~_qk) R_kv^1/2||_F^2`, minimised over rank `r` by a
//! truncated SVD between the two whitening roots. Rotary layers cannot
//! absorb an arbitrary mixing of the head dimensions, so there the solver
//! keeps whole rotation pairs of the original weights instead.

use serde::{Deserialize, Serialize};

use crate::cur::{expand_pairs, outer_scores, pair_sums, top_k};
use crate::error::{Error, Result};
use crate::montecarlo::{check_samples, CorrelatedGaussian, McEstimate, RunningMoments};
use crate::rng::seeded;
use crate::tensor::{psd_roots, psd_sqrt, svd, Matrix, SvdFactors};

/// Where the singular values go when splitting the truncated factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorSplit {
    /// `Wq~ = S_q^-1 U_r`, `Wk~^T = Sigma_r V_r^T S_kv^-1`.
    #[default]
    SigmaRight,
    /// `sqrt(Sigma_r)` on each side.
    Balanced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QkSolution {
    /// One per query head of the group, `d_model x r`.
    pub wq: Vec<Matrix>,
    /// Shared key projection, `d_model x r`.
    pub wk: Matrix,
    /// Retained original dimensions (whole pairs, ascending) on rotary layers.
    pub freq_indices: Option<Vec<usize>>,
    /// Expected squared score error summed over the group.
    pub objective: f64,
}

impl QkSolution {
    pub fn rank(&self) -> usize {
        self.wk.cols()
    }

    /// `Wq~_i Wk~^T`.
    pub fn fused(&self, head: usize) -> Result<Matrix> {
        let wq = self.wq.get(head).ok_or(Error::HeadOutOfRange {
            index: head,
            count: self.wq.len(),
        })?;
        wq.matmul_t(&self.wk)
    }
}

/// Score-error functional `||S_q D S_kv||_F^2` with the undamped roots of
/// the supplied statistics.
#[derive(Debug, Clone)]
pub struct QkObjective {
    s_q: Matrix,
    s_kv: Matrix,
}

impl QkObjective {
    pub fn new(r_qq: &Matrix, r_kv: &Matrix) -> Result<Self> {
        Ok(Self {
            s_q: psd_sqrt(r_qq, 0.0)?,
            s_kv: psd_sqrt(r_kv, 0.0)?,
        })
    }

    pub fn eval(&self, delta: &Matrix) -> Result<f64> {
        Ok(self.s_q.matmul(delta)?.matmul(&self.s_kv)?.frobenius_sq())
    }

    /// Error of replacing each `Wq_i Wk^T` by `Wq~_i Wk~^T`, summed over heads.
    pub fn eval_factors(&self, wq: &[Matrix], wk: &Matrix, wq_t: &[Matrix], wk_t: &Matrix) -> Result<f64> {
        if wq.len() != wq_t.len() {
            return Err(Error::InvalidArgument(format!(
                "{} original heads vs {} replacement heads",
                wq.len(),
                wq_t.len()
            )));
        }
        let mut total = 0.0;
        for (a, b) in wq.iter().zip(wq_t) {
            total += self.eval(&a.matmul_t(wk)?.sub(&b.matmul_t(wk_t)?)?)?;
        }
        Ok(total)
    }
}

/// `tr(R_qq D R_kv D^T)`.
pub fn qk_objective(r_qq: &Matrix, r_kv: &Matrix, delta: &Matrix) -> Result<f64> {
    QkObjective::new(r_qq, r_kv)?.eval(delta)
}

fn check_square(m: &Matrix, dim: usize, op: &'static str) -> Result<()> {
    if m.shape() != (dim, dim) {
        return Err(Error::ShapeMismatch {
            op,
            left: m.shape(),
            right: (dim, dim),
        });
    }
    Ok(())
}

fn check_group(wq: &[Matrix], wk: &Matrix, r_qq: &Matrix, r_kv: &Matrix, op: &'static str) -> Result<()> {
    if wq.is_empty() {
        return Err(Error::InvalidArgument(format!("{op}: empty query group")));
    }
    for q in wq {
        if q.shape() != wk.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: q.shape(),
                right: wk.shape(),
            });
        }
    }
    check_square(r_qq, wk.rows(), op)?;
    check_square(r_kv, wk.rows(), op)
}

fn check_rank(r: usize, max: usize) -> Result<()> {
    if r < 1 || r > max {
        return Err(Error::InvalidRank { rank: r, min: 1, max });
    }
    Ok(())
}

/// Splits `U_r`, `Sigma_r V_r^T` according to `split`, returning
/// `(left, right^T)` with `left` in `U` coordinates.
fn split(f: &SvdFactors, r: usize, split: FactorSplit) -> (Vec<f64>, Vec<f64>) {
    match split {
        FactorSplit::SigmaRight => (vec![1.0; r], f.s[..r].to_vec()),
        FactorSplit::Balanced => {
            let h: Vec<f64> = f.s[..r].iter().map(|v| v.sqrt()).collect();
            (h.clone(), h)
        }
    }
}

pub fn solve_qk_mha(
    wq: &Matrix,
    wk: &Matrix,
    r_qq: &Matrix,
    r_kv: &Matrix,
    r: usize,
    damping: f64,
) -> Result<QkSolution> {
    solve_qk_mha_with(wq, wk, r_qq, r_kv, r, damping, FactorSplit::SigmaRight)
}

pub fn solve_qk_mha_with(
    wq: &Matrix,
    wk: &Matrix,
    r_qq: &Matrix,
    r_kv: &Matrix,
    r: usize,
    damping: f64,
    factor_split: FactorSplit,
) -> Result<QkSolution> {
    check_group(std::slice::from_ref(wq), wk, r_qq, r_kv, "solve_qk_mha")?;
    check_rank(r, wq.cols())?;
    let rq = psd_roots(r_qq, damping)?;
    let rk = psd_roots(r_kv, damping)?;
    let w_qk = wq.matmul_t(wk)?;
    let f = svd(&rq.sqrt.matmul(&w_qk)?.matmul(&rk.sqrt)?)?;
    let (ls, rs) = split(&f, r, factor_split);
    let wq_t = rq.inv_sqrt.matmul(&f.u.col_block(0, r).scale_columns(&ls))?;
    // Wk~ = S_kv^-1 V_r Sigma_r
    let wk_t = rk.inv_sqrt.matmul(&f.vt.row_block(0, r).transpose().scale_columns(&rs))?;
    let objective = QkObjective::new(r_qq, r_kv)?.eval(&w_qk.sub(&wq_t.matmul_t(&wk_t)?)?)?;
    Ok(QkSolution {
        wq: vec![wq_t],
        wk: wk_t,
        freq_indices: None,
        objective,
    })
}

pub fn solve_qk_gqa(
    wq_group: &[Matrix],
    wk: &Matrix,
    r_qq: &Matrix,
    r_kv: &Matrix,
    r: usize,
    damping: f64,
) -> Result<QkSolution> {
    solve_qk_gqa_with(wq_group, wk, r_qq, r_kv, r, damping, FactorSplit::SigmaRight)
}

/// Joint SVD of the vertically stacked whitened fused weights of a group
/// sharing one key head.
pub fn solve_qk_gqa_with(
    wq_group: &[Matrix],
    wk: &Matrix,
    r_qq: &Matrix,
    r_kv: &Matrix,
    r: usize,
    damping: f64,
    factor_split: FactorSplit,
) -> Result<QkSolution> {
    check_group(wq_group, wk, r_qq, r_kv, "solve_qk_gqa")?;
    check_rank(r, wk.cols())?;
    let d_m = wk.rows();
    let rq = psd_roots(r_qq, damping)?;
    let rk = psd_roots(r_kv, damping)?;
    let blocks = wq_group
        .iter()
        .map(|q| rq.sqrt.matmul(&q.matmul_t(wk)?)?.matmul(&rk.sqrt))
        .collect::<Result<Vec<_>>>()?;
    let f = svd(&Matrix::vstack(&blocks)?)?;
    let (ls, rs) = split(&f, r, factor_split);
    let u_r = f.u.col_block(0, r).scale_columns(&ls);
    let wq_t = (0..wq_group.len())
        .map(|i| rq.inv_sqrt.matmul(&u_r.row_block(i * d_m, (i + 1) * d_m)))
        .collect::<Result<Vec<_>>>()?;
    let wk_t = rk.inv_sqrt.matmul(&f.vt.row_block(0, r).transpose().scale_columns(&rs))?;
    let objective = QkObjective::new(r_qq, r_kv)?.eval_factors(wq_group, wk, &wq_t, &wk_t)?;
    Ok(QkSolution {
        wq: wq_t,
        wk: wk_t,
        freq_indices: None,
        objective,
    })
}

pub fn solve_qk_rope(
    wq: &Matrix,
    wk: &Matrix,
    r_qq: &Matrix,
    r_kv: &Matrix,
    r: usize,
    damping: f64,
) -> Result<QkSolution> {
    solve_qk_rope_group(std::slice::from_ref(wq), wk, r_qq, r_kv, r, damping)
}

/// Per-dimension scores `||L[:, c]||^2 ||R[c, :]||^2` with `L` the stacked
/// `S_q Wq_i` and `R = Wk^T S_kv`.
pub fn qk_cur_scores(
    wq_group: &[Matrix],
    wk: &Matrix,
    r_qq: &Matrix,
    r_kv: &Matrix,
    damping: f64,
) -> Result<Vec<f64>> {
    check_group(wq_group, wk, r_qq, r_kv, "qk_cur_scores")?;
    let s_q = psd_sqrt(r_qq, damping)?;
    let s_kv = psd_sqrt(r_kv, damping)?;
    let l = Matrix::vstack(
        &wq_group
            .iter()
            .map(|q| s_q.matmul(q))
            .collect::<Result<Vec<_>>>()?,
    )?;
    outer_scores(&l, &wk.t_matmul(&s_kv)?)
}

/// Keeps the `r / 2` rotation pairs with the largest summed scores.
pub fn solve_qk_rope_group(
    wq_group: &[Matrix],
    wk: &Matrix,
    r_qq: &Matrix,
    r_kv: &Matrix,
    r: usize,
    damping: f64,
) -> Result<QkSolution> {
    check_group(wq_group, wk, r_qq, r_kv, "solve_qk_rope")?;
    let d = wk.cols();
    if !d.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "rotary head dimension must be even, got {d}"
        )));
    }
    check_rank(r, d)?;
    if !r.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "rotary rank must be even so pairs stay whole, got {r}"
        )));
    }
    let scores = pair_sums(&qk_cur_scores(wq_group, wk, r_qq, r_kv, damping)?)?;
    let dims = expand_pairs(&top_k(&scores, r / 2)?);
    qk_from_selection(wq_group, wk, &dims, r_qq, r_kv, true)
}

/// Builds a solution keeping original columns `dims` of every `Wq_i` and of
/// `Wk`. `rotary` records `dims` as the retained frequencies.
pub fn qk_from_selection(
    wq_group: &[Matrix],
    wk: &Matrix,
    dims: &[usize],
    r_qq: &Matrix,
    r_kv: &Matrix,
    rotary: bool,
) -> Result<QkSolution> {
    check_group(wq_group, wk, r_qq, r_kv, "qk_from_selection")?;
    crate::cur::check_selection(dims, wk.cols())?;
    check_rank(dims.len(), wk.cols())?;
    let wq_t = wq_group
        .iter()
        .map(|q| q.select_columns(dims))
        .collect::<Result<Vec<_>>>()?;
    let wk_t = wk.select_columns(dims)?;
    let objective = QkObjective::new(r_qq, r_kv)?.eval_factors(wq_group, wk, &wq_t, &wk_t)?;
    Ok(QkSolution {
        wq: wq_t,
        wk: wk_t,
        freq_indices: rotary.then(|| dims.to_vec()),
        objective,
    })
}

/// `E{(x_q D x_kv^T)^2}` for independent `x_q ~ N(0, R_qq)` and
/// `x_kv ~ N(0, R_kv)`, by direct sampling.
pub fn qk_objective_mc(
    delta: &Matrix,
    r_qq: &Matrix,
    r_kv: &Matrix,
    samples: u64,
    seed: u64,
) -> Result<McEstimate> {
    check_samples(samples)?;
    let d = delta.rows();
    check_square(delta, d, "qk_objective_mc")?;
    check_square(r_qq, d, "qk_objective_mc")?;
    check_square(r_kv, d, "qk_objective_mc")?;
    let gq = CorrelatedGaussian::new(r_qq)?;
    let gk = CorrelatedGaussian::new(r_kv)?;
    let mut rng = seeded(seed);
    let (mut z, mut xq, mut xk) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut acc = RunningMoments::default();
    for _ in 0..samples {
        gq.sample_into(&mut rng, &mut z, &mut xq);
        gk.sample_into(&mut rng, &mut z, &mut xk);
        let mut s = 0.0;
        for (i, &a) in xq.iter().enumerate() {
            if a != 0.0 {
                s += a * delta.row(i).iter().zip(&xk).map(|(w, b)| w * b).sum::<f64>();
            }
        }
        acc.push(s * s);
    }
    Ok(acc.estimate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_matrix, seeded};
    use crate::tensor::truncated_svd;

    fn spd(seed: u64, d: usize) -> Matrix {
        let g = gaussian_matrix(&mut seeded(seed), d + 3, d);
        g.t_matmul(&g).unwrap().scale(1.0 / (d + 3) as f64)
    }

    #[test]
    fn identity_stats_reduce_to_truncated_svd() {
        let mut rng = seeded(1);
        let wq = gaussian_matrix(&mut rng, 6, 4);
        let wk = gaussian_matrix(&mut rng, 6, 4);
        let i = Matrix::identity(6);
        let sol = solve_qk_mha(&wq, &wk, &i, &i, 2, 0.0).unwrap();
        let (a, b) = truncated_svd(&wq.matmul_t(&wk).unwrap(), 2).unwrap();
        assert!(sol.fused(0).unwrap().max_abs_diff(&a.matmul(&b).unwrap()) < 1e-10);
    }

    #[test]
    fn full_rank_is_exact() {
        let mut rng = seeded(2);
        let wq = gaussian_matrix(&mut rng, 6, 4);
        let wk = gaussian_matrix(&mut rng, 6, 4);
        let sol = solve_qk_mha(&wq, &wk, &spd(3, 6), &spd(4, 6), 4, 1e-6).unwrap();
        assert!(sol.fused(0).unwrap().max_abs_diff(&wq.matmul_t(&wk).unwrap()) < 1e-8);
        assert!(sol.objective < 1e-16);
        assert!(sol.freq_indices.is_none());
    }

    #[test]
    fn balanced_split_has_same_product() {
        let mut rng = seeded(5);
        let wq = gaussian_matrix(&mut rng, 6, 4);
        let wk = gaussian_matrix(&mut rng, 6, 4);
        let (rq, rk) = (spd(6, 6), spd(7, 6));
        let a = solve_qk_mha(&wq, &wk, &rq, &rk, 3, 1e-6).unwrap();
        let b = solve_qk_mha_with(&wq, &wk, &rq, &rk, 3, 1e-6, FactorSplit::Balanced).unwrap();
        assert!(a.fused(0).unwrap().max_abs_diff(&b.fused(0).unwrap()) < 1e-10);
    }

    #[test]
    fn rank_is_checked() {
        let wq = Matrix::identity(4);
        let i = Matrix::identity(4);
        assert!(matches!(solve_qk_mha(&wq, &wq, &i, &i, 0, 0.0), Err(Error::InvalidRank { .. })));
        assert!(solve_qk_mha(&wq, &wq, &i, &i, 5, 0.0).is_err());
        assert!(solve_qk_mha(&wq, &wq, &Matrix::identity(3), &i, 2, 0.0).is_err());
    }

    #[test]
    fn single_head_group_matches_mha() {
        let mut rng = seeded(8);
        let wq = gaussian_matrix(&mut rng, 6, 4);
        let wk = gaussian_matrix(&mut rng, 6, 4);
        let (rq, rk) = (spd(9, 6), spd(10, 6));
        let a = solve_qk_mha(&wq, &wk, &rq, &rk, 2, 1e-6).unwrap();
        let b = solve_qk_gqa(&[wq], &wk, &rq, &rk, 2, 1e-6).unwrap();
        assert!(a.fused(0).unwrap().max_abs_diff(&b.fused(0).unwrap()) < 1e-10);
        assert!((a.objective - b.objective).abs() < 1e-10);
    }

    #[test]
    fn duplicated_queries_match_single_head() {
        // stacking g copies scales the singular values by sqrt(g), leaving
        // the subspace and therefore each head's approximation unchanged
        let mut rng = seeded(11);
        let wq = gaussian_matrix(&mut rng, 6, 4);
        let wk = gaussian_matrix(&mut rng, 6, 4);
        let (rq, rk) = (spd(12, 6), spd(13, 6));
        let single = solve_qk_mha(&wq, &wk, &rq, &rk, 2, 1e-6).unwrap();
        let joint = solve_qk_gqa(&[wq.clone(), wq.clone(), wq], &wk, &rq, &rk, 2, 1e-6).unwrap();
        for h in 0..3 {
            assert!(joint.fused(h).unwrap().max_abs_diff(&single.fused(0).unwrap()) < 1e-9);
        }
        assert!((joint.objective - 3.0 * single.objective).abs() < 1e-9 * joint.objective.max(1.0));
    }

    #[test]
    fn dominant_pair_is_kept() {
        let mut wq = Matrix::zeros(4, 4);
        let mut wk = Matrix::zeros(4, 4);
        for c in 0..4 {
            let v = if c < 2 { 10.0 } else { 1.0 };
            wq[(c, c)] = v;
            wk[(c, c)] = v;
        }
        let i = Matrix::identity(4);
        let sol = solve_qk_rope(&wq, &wk, &i, &i, 2, 0.0).unwrap();
        assert_eq!(sol.freq_indices.as_deref(), Some(&[0, 1][..]));
        assert_eq!(sol.wq[0], wq.select_columns(&[0, 1]).unwrap());
    }

    #[test]
    fn rope_full_selection_and_errors() {
        let mut rng = seeded(14);
        let wq = gaussian_matrix(&mut rng, 6, 4);
        let wk = gaussian_matrix(&mut rng, 6, 4);
        let (rq, rk) = (spd(15, 6), spd(16, 6));
        let sol = solve_qk_rope(&wq, &wk, &rq, &rk, 4, 1e-6).unwrap();
        assert_eq!(sol.freq_indices.as_deref(), Some(&[0, 1, 2, 3][..]));
        assert!(sol.objective.abs() < 1e-20);
        assert!(solve_qk_rope(&wq, &wk, &rq, &rk, 3, 1e-6).is_err());
        let odd = gaussian_matrix(&mut rng, 6, 3);
        assert!(solve_qk_rope(&odd, &odd, &rq, &rk, 2, 1e-6).is_err());
    }

    #[test]
    fn mc_zero_delta() {
        let i = Matrix::identity(3);
        let e = qk_objective_mc(&Matrix::zeros(3, 3), &i, &i, 1000, 1).unwrap();
        assert_eq!(e.mean, 0.0);
        assert!(qk_objective_mc(&Matrix::zeros(3, 3), &i, &i, 0, 1).is_err());
    }

    #[test]
    fn mc_single_entry_moment() {
        // isotropic inputs, D = e1 e1^T: E{x1^2 y1^2} = 1
        let i = Matrix::identity(3);
        let mut d = Matrix::zeros(3, 3);
        d[(0, 0)] = 1.0;
        let e = qk_objective_mc(&d, &i, &i, 200_000, 2).unwrap();
        assert!(e.z_score(1.0) < 4.0, "{e:?}");
        assert!((e.mean - 1.0).abs() < 0.05);
    }
}
