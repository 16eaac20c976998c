//! Desk-scale transformer layer: configuration, per-head weights and the
//! forward computations of the attention and MLP blocks.
//!
//! Attention is always causal. Head `i` reads key/value head `i / g` where
//! `g = n_query_heads / n_kv_heads`. RoPE rotates contiguous adjacent pairs
//! `(2j, 2j+1)`; after pair selection a head carries the list of retained
//! original dimensions so the right frequencies are applied.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::gaussian_matrix;
use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpVariant {
    TwoLayerRelu,
    GatedSilu,
}

impl MlpVariant {
    /// Number of `d_model x d_inter` sized matrices in the block.
    pub fn matrix_count(self) -> usize {
        match self {
            MlpVariant::TwoLayerRelu => 2,
            MlpVariant::GatedSilu => 3,
        }
    }
}

fn default_theta() -> f64 {
    10_000.0
}

/// Shape of one transformer layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_query_heads: usize,
    pub n_kv_heads: usize,
    pub qk_head_dim: usize,
    pub vo_head_dim: usize,
    pub d_inter: usize,
    #[serde(default)]
    pub rope: bool,
    #[serde(default = "default_theta")]
    pub rope_theta: f64,
    pub mlp: MlpVariant,
    /// Softmax scale follows the reduced head dimension instead of the
    /// original `qk_head_dim`. Off by default.
    #[serde(default)]
    pub scale_with_reduced_dim: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_query_heads", self.n_query_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("qk_head_dim", self.qk_head_dim),
            ("vo_head_dim", self.vo_head_dim),
            ("d_inter", self.d_inter),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !self.n_query_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::InvalidConfig(format!(
                "n_query_heads ({}) must be a multiple of n_kv_heads ({})",
                self.n_query_heads, self.n_kv_heads
            )));
        }
        if self.rope && !self.qk_head_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "qk_head_dim ({}) must be even when rope is enabled",
                self.qk_head_dim
            )));
        }
        if self.rope && !(self.rope_theta.is_finite() && self.rope_theta > 1.0) {
            return Err(Error::InvalidConfig(format!(
                "rope_theta must be finite and > 1, got {}",
                self.rope_theta
            )));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.n_query_heads / self.n_kv_heads
    }

    #[inline]
    pub fn kv_head_of(&self, query_head: usize) -> usize {
        query_head / self.group_size()
    }

    /// Query heads sharing kv head `kv`.
    pub fn group_heads(&self, kv: usize) -> std::ops::Range<usize> {
        let g = self.group_size();
        kv * g..(kv + 1) * g
    }

    pub fn is_gqa(&self) -> bool {
        self.n_kv_heads < self.n_query_heads
    }
}

/// Per-head weights of one layer. Head dimensions may be smaller than the
/// configured ones after compression.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// Per query head, `d_model x d_qk`.
    pub wq: Vec<Matrix>,
    /// Per kv head, `d_model x d_qk`.
    pub wk: Vec<Matrix>,
    /// Per kv head, `d_model x d_vo`.
    pub wv: Vec<Matrix>,
    /// Per query head, `d_vo x d_model`.
    pub wo: Vec<Matrix>,
    /// `d_model x d_inter`.
    pub wu: Matrix,
    /// `d_model x d_inter`, gated variant only.
    pub wg: Option<Matrix>,
    /// `d_inter x d_model`.
    pub wd: Matrix,
    /// Per query head: retained original QK dimensions (RoPE only).
    pub qk_freq_indices: Vec<Option<Vec<usize>>>,
}

impl LayerWeights {
    /// Gaussian weights with standard deviation `1 / sqrt(fan_in)`.
    pub fn random(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let scaled = |rng: &mut _, rows: usize, cols: usize| {
            gaussian_matrix(rng, rows, cols).scale(1.0 / (rows as f64).sqrt())
        };
        let wq = (0..cfg.n_query_heads)
            .map(|_| scaled(rng, d, cfg.qk_head_dim))
            .collect();
        let wk = (0..cfg.n_kv_heads)
            .map(|_| scaled(rng, d, cfg.qk_head_dim))
            .collect();
        let wv = (0..cfg.n_kv_heads)
            .map(|_| scaled(rng, d, cfg.vo_head_dim))
            .collect();
        let wo = (0..cfg.n_query_heads)
            .map(|_| scaled(rng, cfg.vo_head_dim, d))
            .collect();
        let wu = scaled(rng, d, cfg.d_inter);
        let wg = match cfg.mlp {
            MlpVariant::GatedSilu => Some(scaled(rng, d, cfg.d_inter)),
            MlpVariant::TwoLayerRelu => None,
        };
        let wd = scaled(rng, cfg.d_inter, d);
        Ok(Self {
            wq,
            wk,
            wv,
            wo,
            wu,
            wg,
            wd,
            qk_freq_indices: vec![None; cfg.n_query_heads],
        })
    }

    pub fn qk_dim(&self, head: usize) -> usize {
        self.wq[head].cols()
    }

    pub fn vo_dim(&self, kv_head: usize) -> usize {
        self.wv[kv_head].cols()
    }

    pub fn mlp_dim(&self) -> usize {
        self.wu.cols()
    }

    /// Checks shapes against `cfg`, allowing reduced head dims.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let d = cfg.d_model;
        let bad = |what: String| Err(Error::InvalidConfig(what));
        if self.wq.len() != cfg.n_query_heads
            || self.wo.len() != cfg.n_query_heads
            || self.qk_freq_indices.len() != cfg.n_query_heads
        {
            return bad(format!("expected {} query heads", cfg.n_query_heads));
        }
        if self.wk.len() != cfg.n_kv_heads || self.wv.len() != cfg.n_kv_heads {
            return bad(format!("expected {} kv heads", cfg.n_kv_heads));
        }
        for (j, (k, v)) in self.wk.iter().zip(&self.wv).enumerate() {
            if k.rows() != d || v.rows() != d || k.cols() == 0 || v.cols() == 0 {
                return bad(format!("kv head {j}: wk {:?}, wv {:?}", k.shape(), v.shape()));
            }
        }
        for i in 0..cfg.n_query_heads {
            let j = cfg.kv_head_of(i);
            let (q, o) = (&self.wq[i], &self.wo[i]);
            if q.rows() != d || q.cols() != self.wk[j].cols() {
                return bad(format!("query head {i}: wq {:?} vs wk {:?}", q.shape(), self.wk[j].shape()));
            }
            if o.cols() != d || o.rows() != self.wv[j].cols() {
                return bad(format!("query head {i}: wo {:?} vs wv {:?}", o.shape(), self.wv[j].shape()));
            }
            if let Some(idx) = &self.qk_freq_indices[i] {
                if !cfg.rope {
                    return bad(format!("query head {i}: frequency indices without rope"));
                }
                if idx.len() != q.cols() {
                    return bad(format!(
                        "query head {i}: {} frequency indices for head dim {}",
                        idx.len(),
                        q.cols()
                    ));
                }
                check_freq_indices(idx, cfg.qk_head_dim)?;
            } else if cfg.rope && q.cols() != cfg.qk_head_dim {
                return bad(format!("query head {i}: reduced rope head needs frequency indices"));
            }
        }
        for j in 0..cfg.n_kv_heads {
            let mut heads = cfg.group_heads(j);
            let first = heads.next().expect("group is non-empty");
            if heads.any(|i| self.qk_freq_indices[i] != self.qk_freq_indices[first]) {
                return bad(format!("kv group {j}: query heads disagree on frequency indices"));
            }
        }
        let r = self.wu.cols();
        if self.wu.rows() != d || self.wd.shape() != (r, d) || r == 0 {
            return bad(format!("mlp: wu {:?}, wd {:?}", self.wu.shape(), self.wd.shape()));
        }
        match (cfg.mlp, &self.wg) {
            (MlpVariant::GatedSilu, Some(g)) if g.shape() == (d, r) => {}
            (MlpVariant::GatedSilu, _) => return bad("gated mlp needs wg with the shape of wu".into()),
            (MlpVariant::TwoLayerRelu, None) => {}
            (MlpVariant::TwoLayerRelu, Some(_)) => return bad("two-layer mlp must not carry wg".into()),
        }
        Ok(())
    }
}

/// Retained dimensions must be ascending whole pairs `(2f, 2f+1)` below
/// `full_dim`.
pub fn check_freq_indices(idx: &[usize], full_dim: usize) -> Result<()> {
    if !idx.len().is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "frequency index array has odd length {}",
            idx.len()
        )));
    }
    for (p, pair) in idx.chunks(2).enumerate() {
        let ok = pair[0] % 2 == 0
            && pair[1] == pair[0] + 1
            && pair[1] < full_dim
            && (p == 0 || pair[0] > idx[2 * p - 1]);
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "frequency indices {idx:?} are not ascending adjacent pairs below {full_dim}"
            )));
        }
    }
    Ok(())
}

/// Hidden states feeding a layer, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    pub x: Matrix,
    pub positions: Vec<usize>,
}

impl ActivationBatch {
    pub fn new(x: Matrix, positions: Vec<usize>) -> Result<Self> {
        if positions.len() != x.rows() {
            return Err(Error::InvalidArgument(format!(
                "{} positions for {} tokens",
                positions.len(),
                x.rows()
            )));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "positions must be strictly increasing".into(),
            ));
        }
        Ok(Self { x, positions })
    }

    /// Positions `0..T`.
    pub fn sequential(x: Matrix) -> Self {
        let positions = (0..x.rows()).collect();
        Self { x, positions }
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

/// Rotation frequency of original pair `f` in a head of `full_dim`.
#[inline]
pub fn rope_frequency(theta: f64, pair: usize, full_dim: usize) -> f64 {
    theta.powf(-2.0 * pair as f64 / full_dim as f64)
}

/// Rotates adjacent pairs of `v` by `pos * omega`. With `freq_indices`, pair
/// `j` of `v` uses the frequency of original pair `freq_indices[2j] / 2`.
pub fn rope_rotate(
    v: &[f64],
    pos: usize,
    theta: f64,
    full_dim: usize,
    freq_indices: Option<&[usize]>,
) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    rope_rotate_in_place(&mut out, pos, theta, full_dim, freq_indices)?;
    Ok(out)
}

fn rope_rotate_in_place(
    v: &mut [f64],
    pos: usize,
    theta: f64,
    full_dim: usize,
    freq_indices: Option<&[usize]>,
) -> Result<()> {
    if !v.len().is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "rope needs an even dimension, got {}",
            v.len()
        )));
    }
    if let Some(idx) = freq_indices {
        if idx.len() != v.len() {
            return Err(Error::InvalidArgument(format!(
                "{} frequency indices for a vector of length {}",
                idx.len(),
                v.len()
            )));
        }
    }
    for j in 0..v.len() / 2 {
        let pair = freq_indices.map_or(j, |idx| idx[2 * j] / 2);
        let angle = pos as f64 * rope_frequency(theta, pair, full_dim);
        let (sin, cos) = angle.sin_cos();
        let (a, b) = (v[2 * j], v[2 * j + 1]);
        v[2 * j] = a * cos - b * sin;
        v[2 * j + 1] = a * sin + b * cos;
    }
    Ok(())
}

fn check_head(cfg: &ModelConfig, head: usize) -> Result<()> {
    if head >= cfg.n_query_heads {
        return Err(Error::HeadOutOfRange {
            index: head,
            count: cfg.n_query_heads,
        });
    }
    Ok(())
}

fn check_batch(cfg: &ModelConfig, batch: &ActivationBatch) -> Result<()> {
    if batch.x.cols() != cfg.d_model {
        return Err(Error::ShapeMismatch {
            op: "layer input",
            left: batch.x.shape(),
            right: (batch.x.rows(), cfg.d_model),
        });
    }
    Ok(())
}

fn project_rotated(
    cfg: &ModelConfig,
    batch: &ActivationBatch,
    w: &Matrix,
    freq: Option<&[usize]>,
) -> Result<Matrix> {
    let mut p = batch.x.matmul(w)?;
    if cfg.rope {
        for (t, &pos) in batch.positions.iter().enumerate() {
            rope_rotate_in_place(p.row_mut(t), pos, cfg.rope_theta, cfg.qk_head_dim, freq)?;
        }
    }
    Ok(p)
}

/// Rotated queries of `head`, `T x d_qk`.
pub fn query_states(
    weights: &LayerWeights,
    cfg: &ModelConfig,
    batch: &ActivationBatch,
    head: usize,
) -> Result<Matrix> {
    check_head(cfg, head)?;
    check_batch(cfg, batch)?;
    let freq = weights.qk_freq_indices[head].as_deref();
    project_rotated(cfg, batch, &weights.wq[head], freq)
}

/// Rotated keys of kv head `kv`, `T x d_qk`. Uses the frequency indices of
/// the first query head of the group (validated to be shared).
pub fn key_states(
    weights: &LayerWeights,
    cfg: &ModelConfig,
    batch: &ActivationBatch,
    kv: usize,
) -> Result<Matrix> {
    check_batch(cfg, batch)?;
    if kv >= cfg.n_kv_heads {
        return Err(Error::HeadOutOfRange {
            index: kv,
            count: cfg.n_kv_heads,
        });
    }
    let first = cfg.group_heads(kv).start;
    let freq = weights.qk_freq_indices[first].as_deref();
    project_rotated(cfg, batch, &weights.wk[kv], freq)
}

/// Causal row softmax of `scores * scale`; entries above the diagonal are 0.
pub fn causal_softmax(scores: &Matrix, scale: f64) -> Matrix {
    let t = scores.rows();
    let mut out = Matrix::zeros(t, scores.cols());
    for r in 0..t {
        let visible = &scores.row(r)[..=r.min(scores.cols() - 1)];
        let max = visible.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
        let exps: Vec<f64> = visible.iter().map(|&v| (v * scale - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (c, e) in exps.iter().enumerate() {
            out[(r, c)] = e / total;
        }
    }
    out
}

fn softmax_scale(weights: &LayerWeights, cfg: &ModelConfig, head: usize) -> f64 {
    let dim = if cfg.scale_with_reduced_dim {
        weights.qk_dim(head)
    } else {
        cfg.qk_head_dim
    };
    1.0 / (dim as f64).sqrt()
}

/// Pre-softmax (`Q K^T`, unscaled, unmasked) and post-softmax (scaled,
/// causal) attention scores of one query head.
pub fn attention_scores(
    weights: &LayerWeights,
    cfg: &ModelConfig,
    batch: &ActivationBatch,
    head: usize,
) -> Result<(Matrix, Matrix)> {
    attention_scores_two_stream(weights, cfg, batch, batch, head)
}

/// As [`attention_scores`] with queries read from `q_batch` and keys from
/// `kv_batch`. Both streams must share token positions.
pub fn attention_scores_two_stream(
    weights: &LayerWeights,
    cfg: &ModelConfig,
    q_batch: &ActivationBatch,
    kv_batch: &ActivationBatch,
    head: usize,
) -> Result<(Matrix, Matrix)> {
    if q_batch.positions != kv_batch.positions {
        return Err(Error::InvalidArgument(
            "query and key/value streams must share positions".into(),
        ));
    }
    let q = query_states(weights, cfg, q_batch, head)?;
    let k = key_states(weights, cfg, kv_batch, cfg.kv_head_of(head))?;
    let pre = q.matmul_t(&k)?;
    let post = causal_softmax(&pre, softmax_scale(weights, cfg, head));
    Ok((pre, post))
}

/// Per-token key/value tensors produced by one forward pass.
#[derive(Debug, Clone)]
pub struct KvCache {
    /// Per kv head, `T x d_qk` (rotated).
    pub keys: Vec<Matrix>,
    /// Per kv head, `T x d_vo`.
    pub values: Vec<Matrix>,
}

impl KvCache {
    pub fn tokens(&self) -> usize {
        self.keys.first().map_or(0, Matrix::rows)
    }

    /// Cached scalars per token summed over kv heads.
    pub fn elements_per_token(&self) -> usize {
        let total: usize = self
            .keys
            .iter()
            .chain(&self.values)
            .map(|m| m.rows() * m.cols())
            .sum();
        total / self.tokens().max(1)
    }
}

/// Per-head attention outputs `o_i = A'_i (X Wv) Wo_i`, each `T x d_model`,
/// together with the cache filled on the way.
pub fn attention_forward(
    weights: &LayerWeights,
    cfg: &ModelConfig,
    batch: &ActivationBatch,
) -> Result<(Vec<Matrix>, KvCache)> {
    weights.validate(cfg)?;
    check_batch(cfg, batch)?;
    let mut keys = Vec::with_capacity(cfg.n_kv_heads);
    let mut values = Vec::with_capacity(cfg.n_kv_heads);
    for j in 0..cfg.n_kv_heads {
        keys.push(key_states(weights, cfg, batch, j)?);
        values.push(batch.x.matmul(&weights.wv[j])?);
    }
    let mut outputs = Vec::with_capacity(cfg.n_query_heads);
    for i in 0..cfg.n_query_heads {
        let j = cfg.kv_head_of(i);
        let q = query_states(weights, cfg, batch, i)?;
        let post = causal_softmax(&q.matmul_t(&keys[j])?, softmax_scale(weights, cfg, i));
        outputs.push(post.matmul(&values[j])?.matmul(&weights.wo[i])?);
    }
    Ok((outputs, KvCache { keys, values }))
}

pub fn attention_head_outputs(
    weights: &LayerWeights,
    cfg: &ModelConfig,
    batch: &ActivationBatch,
) -> Result<Vec<Matrix>> {
    attention_forward(weights, cfg, batch).map(|(o, _)| o)
}

/// `sum_i A'_i (X Wv[group(i)]) Wo_i`, `T x d_model`.
pub fn attention_output(
    weights: &LayerWeights,
    cfg: &ModelConfig,
    batch: &ActivationBatch,
) -> Result<Matrix> {
    let heads = attention_head_outputs(weights, cfg, batch)?;
    let mut total = Matrix::zeros(batch.len(), cfg.d_model);
    for h in &heads {
        total.add_assign(h)?;
    }
    Ok(total)
}

#[inline]
pub fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// Returns the intermediate activation `X_d` and the block output `X_d Wd`.
pub fn mlp_forward(weights: &LayerWeights, cfg: &ModelConfig, x: &Matrix) -> Result<(Matrix, Matrix)> {
    let up = x.matmul(&weights.wu)?;
    let hidden = match cfg.mlp {
        MlpVariant::TwoLayerRelu => up.map(|v| v.max(0.0)),
        MlpVariant::GatedSilu => {
            let wg = weights
                .wg
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("gated mlp is missing wg".into()))?;
            x.matmul(wg)?.map(silu).hadamard(&up)?
        }
    };
    let y = hidden.matmul(&weights.wd)?;
    Ok((hidden, y))
}

/// Single pre-softmax score between a query and key vector at positions
/// `m` and `n`, used by tests that check the relative-rotation identity.
pub fn rotated_score(
    q: &[f64],
    k: &[f64],
    m: usize,
    n: usize,
    theta: f64,
    full_dim: usize,
) -> Result<f64> {
    let qr = rope_rotate(q, m, theta, full_dim, None)?;
    let kr = rope_rotate(k, n, theta, full_dim, None)?;
    Ok(dot(&qr, &kr))
}
