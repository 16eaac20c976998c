//! Column/row selection shared by the CUR solvers, the pruning baselines
//! and the exhaustive oracle.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// `lambda_i = ||L[:, i]||^2 * ||R[i, :]||^2`.
pub fn outer_scores(l: &Matrix, r: &Matrix) -> Result<Vec<f64>> {
    if l.cols() != r.rows() {
        return Err(Error::ShapeMismatch {
            op: "outer_scores",
            left: l.shape(),
            right: r.shape(),
        });
    }
    Ok(l
        .column_norms_sq()
        .iter()
        .zip(r.row_norms_sq())
        .map(|(a, b)| a * b)
        .collect())
}

/// Sums adjacent entries: `out[j] = s[2j] + s[2j + 1]`.
pub fn pair_sums(scores: &[f64]) -> Result<Vec<f64>> {
    if !scores.len().is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "pair scoring needs an even dimension, got {}",
            scores.len()
        )));
    }
    Ok(scores.chunks(2).map(|p| p[0] + p[1]).collect())
}

/// Indices of the `k` largest scores, ascending. Equal scores prefer the
/// lower index.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k < 1 || k > scores.len() {
        return Err(Error::InvalidRank {
            rank: k,
            min: 1,
            max: scores.len(),
        });
    }
    if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { row: i, col: 0 });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Pair indices `j` to dimensions `2j, 2j + 1`.
pub fn expand_pairs(pairs: &[usize]) -> Vec<usize> {
    pairs.iter().flat_map(|&j| [2 * j, 2 * j + 1]).collect()
}

/// `||L U R - L R||_F^2` where `U` is diagonal with `u[k]` at `selected[k]`
/// and zero elsewhere (`u = None` means ones).
pub fn selection_objective(
    l: &Matrix,
    r: &Matrix,
    selected: &[usize],
    u: Option<&[f64]>,
) -> Result<f64> {
    let d = l.cols();
    if r.rows() != d {
        return Err(Error::ShapeMismatch {
            op: "selection_objective",
            left: l.shape(),
            right: r.shape(),
        });
    }
    if let Some(u) = u {
        if u.len() != selected.len() {
            return Err(Error::InvalidArgument(format!(
                "{} scale values for {} selected indices",
                u.len(),
                selected.len()
            )));
        }
    }
    let mut diag = vec![-1.0; d];
    for (k, &i) in selected.iter().enumerate() {
        if i >= d {
            return Err(Error::InvalidArgument(format!(
                "selected index {i} out of range for dimension {d}"
            )));
        }
        diag[i] += u.map_or(1.0, |u| u[k]);
    }
    Ok(l.scale_columns(&diag).matmul(r)?.frobenius_sq())
}

/// Strictly increasing, unique, in range.
pub fn check_selection(selected: &[usize], dim: usize) -> Result<()> {
    if selected.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "selection must be strictly increasing".into(),
        ));
    }
    if let Some(&last) = selected.last() {
        if last >= dim {
            return Err(Error::InvalidArgument(format!(
                "selected index {last} out of range for dimension {dim}"
            )));
        }
    }
    Ok(())
}
