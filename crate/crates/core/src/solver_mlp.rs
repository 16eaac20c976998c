//! Intermediate-dimension reduction of the MLP by keeping rows of the down
//! projection (and the matching up/gate columns).

use serde::{Deserialize, Serialize};

use crate::cur::{outer_scores, selection_objective, top_k};
use crate::error::{Error, Result};
use crate::model::{mlp_forward, ActivationBatch, LayerWeights, ModelConfig};
use crate::montecarlo::{McEstimate, RunningMoments};
use crate::tensor::{psd_sqrt, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Kept rows are copied unchanged.
    #[default]
    None,
    /// Kept row `i` is scaled by `1 / (r lambda_i)`.
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSolution {
    /// Kept intermediate channels, ascending.
    pub selected: Vec<usize>,
    pub scale_mode: ScaleMode,
    pub u_values: Vec<f64>,
    pub objective: f64,
}

/// `lambda_i = ||S[:, i]||^2 ||Wd[i, :]||^2` with `S` the damped root of `R_d`.
pub fn mlp_scores(r_d: &Matrix, wd: &Matrix, damping: f64) -> Result<Vec<f64>> {
    if r_d.shape() != (wd.rows(), wd.rows()) {
        return Err(Error::ShapeMismatch {
            op: "mlp_scores",
            left: r_d.shape(),
            right: wd.shape(),
        });
    }
    outer_scores(&psd_sqrt(r_d, damping)?, wd)
}

pub fn mlp_cur_select(
    r_d: &Matrix,
    wd: &Matrix,
    r: usize,
    scale_mode: ScaleMode,
    damping: f64,
) -> Result<MlpSolution> {
    let scores = mlp_scores(r_d, wd, damping)?;
    let selected = top_k(&scores, r)?;
    mlp_from_selection(r_d, wd, selected, &scores, scale_mode)
}

/// Solution for an externally chosen index set; `scores` feeds the
/// Monte-Carlo scaling.
pub fn mlp_from_selection(
    r_d: &Matrix,
    wd: &Matrix,
    selected: Vec<usize>,
    scores: &[f64],
    scale_mode: ScaleMode,
) -> Result<MlpSolution> {
    crate::cur::check_selection(&selected, wd.rows())?;
    if selected.is_empty() {
        return Err(Error::InvalidRank {
            rank: 0,
            min: 1,
            max: wd.rows(),
        });
    }
    let r = selected.len() as f64;
    let u_values: Vec<f64> = match scale_mode {
        ScaleMode::None => vec![1.0; selected.len()],
        ScaleMode::MonteCarlo => selected
            .iter()
            .map(|&i| if scores[i] > 0.0 { 1.0 / (r * scores[i]) } else { 0.0 })
            .collect(),
    };
    let objective = selection_objective(&psd_sqrt(r_d, 0.0)?, wd, &selected, Some(&u_values))?;
    Ok(MlpSolution {
        selected,
        scale_mode,
        u_values,
        objective,
    })
}

/// Reduced `(Wu, Wg, Wd)`: kept columns of the up/gate projections, kept
/// (scaled) rows of the down projection.
pub fn compress_mlp(
    wu: &Matrix,
    wg: Option<&Matrix>,
    wd: &Matrix,
    solution: &MlpSolution,
) -> Result<(Matrix, Option<Matrix>, Matrix)> {
    if wu.cols() != wd.rows() || wg.is_some_and(|g| g.shape() != wu.shape()) {
        return Err(Error::ShapeMismatch {
            op: "compress_mlp",
            left: wu.shape(),
            right: wd.shape(),
        });
    }
    let idx = &solution.selected;
    let wu_t = wu.select_columns(idx)?;
    let wg_t = wg.map(|g| g.select_columns(idx)).transpose()?;
    let wd_t = wd.select_rows(idx)?.scale_rows(&solution.u_values);
    Ok((wu_t, wg_t, wd_t))
}

/// Mean over tokens of `||y - y~||^2` from the two MLP forward passes.
pub fn mlp_objective_mc(
    original: &LayerWeights,
    compressed: &LayerWeights,
    cfg: &ModelConfig,
    batches: &[ActivationBatch],
) -> Result<McEstimate> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument("no evaluation batches".into()));
    }
    let mut acc = RunningMoments::default();
    for b in batches {
        let (_, y) = mlp_forward(original, cfg, &b.x)?;
        let (_, y_t) = mlp_forward(compressed, cfg, &b.x)?;
        let d = y.sub(&y_t)?;
        for t in 0..d.rows() {
            acc.push(d.row(t).iter().map(|v| v * v).sum());
        }
    }
    Ok(acc.estimate())
}
