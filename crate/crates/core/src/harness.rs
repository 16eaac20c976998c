//! Layer compression driver, functional-error measurement, size/FLOP/KV
//! accounting, rank planning and brute-force reference oracles.

use itertools::Itertools;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    clover_ov_group, clover_qk_group, key_factor_qk, prune_abs_w, prune_wanda, value_factor_ov, wanda_scores,
};
use crate::calibration::{collect_concat_stats, collect_layer_stats, FinalStats};
use crate::cur::{expand_pairs, selection_objective};
use crate::error::{Error, Result};
use crate::model::{
    attention_forward, attention_output, attention_scores, mlp_forward, ActivationBatch, LayerWeights, MlpVariant,
    ModelConfig,
};
use crate::rng::{gaussian_matrix, seeded};
use crate::solver_mlp::{compress_mlp, mlp_cur_select, mlp_from_selection, MlpSolution, ScaleMode};
use crate::solver_ov::{
    solve_ov_gqa, solve_ov_mha, solve_ov_overall, OvSolution, OvVariant, DEFAULT_OVERALL_LIMIT,
};
use crate::solver_qk::{
    qk_from_selection, solve_qk_gqa_with, solve_qk_mha_with, solve_qk_rope_group, FactorSplit, QkSolution,
};
use crate::tensor::{psd_sqrt, Matrix, DEFAULT_DAMPING};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    A3,
    PlainSvd,
    WhitenedSvd,
    CloverQk,
    CloverOv,
    AbsW,
    Wanda,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Qk,
    Ov,
    Mlp,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Qk, Component::Ov, Component::Mlp];

    pub fn name(self) -> &'static str {
        match self {
            Component::Qk => "qk",
            Component::Ov => "ov",
            Component::Mlp => "mlp",
        }
    }
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::A3 => "a3",
            Method::PlainSvd => "plain_svd",
            Method::WhitenedSvd => "whitened_svd",
            Method::CloverQk => "clover_qk",
            Method::CloverOv => "clover_ov",
            Method::AbsW => "abs_w",
            Method::Wanda => "wanda",
        }
    }

    pub fn check(self, component: Component, rope: bool) -> Result<()> {
        use Method::*;
        let ok = match component {
            Component::Qk if rope => matches!(self, A3 | AbsW | Wanda),
            Component::Qk => matches!(self, A3 | PlainSvd | WhitenedSvd | CloverQk | AbsW | Wanda),
            Component::Ov => matches!(self, A3 | PlainSvd | WhitenedSvd | CloverOv | AbsW | Wanda),
            Component::Mlp => matches!(self, A3 | AbsW | Wanda),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "method {} is not available for the {:?} component{}",
                self.name(),
                component,
                if rope && component == Component::Qk { " of a rotary layer" } else { "" }
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerPlan {
    pub r_qk: usize,
    pub r_vo: usize,
    pub r_mlp: usize,
    #[serde(default)]
    pub qk_method: Method,
    #[serde(default)]
    pub ov_method: Method,
    #[serde(default)]
    pub mlp_method: Method,
}

impl LayerPlan {
    pub fn full(cfg: &ModelConfig) -> Self {
        Self {
            r_qk: cfg.qk_head_dim,
            r_vo: cfg.vo_head_dim,
            r_mlp: cfg.d_inter,
            qk_method: Method::A3,
            ov_method: Method::A3,
            mlp_method: Method::A3,
        }
    }

    pub fn rank(&self, c: Component) -> usize {
        match c {
            Component::Qk => self.r_qk,
            Component::Ov => self.r_vo,
            Component::Mlp => self.r_mlp,
        }
    }

    fn rank_mut(&mut self, c: Component) -> &mut usize {
        match c {
            Component::Qk => &mut self.r_qk,
            Component::Ov => &mut self.r_vo,
            Component::Mlp => &mut self.r_mlp,
        }
    }

    pub fn validate(&self, cfg: &ModelConfig, ov_variant: OvVariant) -> Result<()> {
        let vo_max = match ov_variant {
            OvVariant::Overall => (cfg.n_query_heads * cfg.vo_head_dim).min(cfg.d_model),
            _ => cfg.vo_head_dim,
        };
        for (name, r, max) in [
            ("r_qk", self.r_qk, cfg.qk_head_dim),
            ("r_vo", self.r_vo, vo_max),
            ("r_mlp", self.r_mlp, cfg.d_inter),
        ] {
            if r < 1 || r > max {
                return Err(Error::InvalidConfig(format!("{name} = {r} outside 1..={max}")));
            }
        }
        if cfg.rope && !self.r_qk.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "rotary layers need an even r_qk, got {}",
                self.r_qk
            )));
        }
        self.qk_method.check(Component::Qk, cfg.rope)?;
        self.ov_method.check(Component::Ov, cfg.rope)?;
        self.mlp_method.check(Component::Mlp, cfg.rope)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionPlan {
    pub layers: Vec<LayerPlan>,
}

impl CompressionPlan {
    pub fn full(cfg: &ModelConfig, n_layers: usize) -> Self {
        Self {
            layers: vec![LayerPlan::full(cfg); n_layers],
        }
    }

    pub fn validate(&self, cfg: &ModelConfig, ov_variant: OvVariant) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.validate(cfg, ov_variant))
    }

    pub fn with_methods(mut self, qk: Method, ov: Method, mlp: Method) -> Self {
        for l in &mut self.layers {
            l.qk_method = qk;
            l.ov_method = ov;
            l.mlp_method = mlp;
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressOptions {
    pub damping: f64,
    pub scale_mode: ScaleMode,
    pub factor_split: FactorSplit,
    pub ov_variant: OvVariant,
    pub overall_limit: usize,
    /// Re-collect the value-side statistics after the QK component is
    /// replaced (only used by [`compress_layer_calibrated`]).
    pub recalibrate_after_qk: bool,
}

impl Default for CompressOptions {
    fn default() -> Self {
        Self {
            damping: DEFAULT_DAMPING,
            scale_mode: ScaleMode::None,
            factor_split: FactorSplit::SigmaRight,
            ov_variant: OvVariant::PerHead,
            overall_limit: DEFAULT_OVERALL_LIMIT,
            recalibrate_after_qk: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ComponentObjectives {
    pub qk: f64,
    pub ov: f64,
    pub mlp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayer {
    pub weights: LayerWeights,
    pub objectives: ComponentObjectives,
}

fn repeat(v: &[f64], times: usize) -> Vec<f64> {
    (0..times).flat_map(|_| v.iter().copied()).collect()
}

/// Replaces the query/key projections of every kv group.
pub fn compress_qk(
    weights: &LayerWeights,
    cfg: &ModelConfig,
    stats: &FinalStats,
    plan: &LayerPlan,
    opts: &CompressOptions,
) -> Result<(LayerWeights, f64)> {
    plan.qk_method.check(Component::Qk, cfg.rope)?;
    let mut out = weights.clone();
    let mut objective = 0.0;
    let (rq, rk, r) = (&stats.r_qq, &stats.r_kv, plan.r_qk);
    for j in 0..cfg.n_kv_heads {
        let heads = cfg.group_heads(j);
        let wq = &weights.wq[heads.clone()];
        let wk = &weights.wk[j];
        let g = wq.len();
        let stacked = || Matrix::vstack(wq);
        let sol: QkSolution = match (plan.qk_method, cfg.rope) {
            (Method::A3, true) => solve_qk_rope_group(wq, wk, rq, rk, r, opts.damping)?,
            (Method::A3, false) if g == 1 => {
                solve_qk_mha_with(&wq[0], wk, rq, rk, r, opts.damping, opts.factor_split)?
            }
            (Method::A3, false) => solve_qk_gqa_with(wq, wk, rq, rk, r, opts.damping, opts.factor_split)?,
            (Method::CloverQk, _) => {
                let mut s = clover_qk_group(wq, wk, r)?;
                s.objective = crate::solver_qk::QkObjective::new(rq, rk)?.eval_factors(wq, wk, &s.wq, &s.wk)?;
                s
            }
            (Method::PlainSvd, _) => key_factor_qk(wq, wk, None, r, opts.damping, rq, rk)?,
            (Method::WhitenedSvd, _) => key_factor_qk(wq, wk, Some(rk), r, opts.damping, rq, rk)?,
            (Method::AbsW, rope) => {
                let dims = prune_abs_w(&stacked()?, &wk.transpose(), r, rope)?;
                qk_from_selection(wq, wk, &dims, rq, rk, rope)?
            }
            (Method::Wanda, rope) => {
                let dims = prune_wanda(&stacked()?, &wk.transpose(), &repeat(&rq.diag(), g), &rk.diag(), r, rope, opts.damping)?;
                qk_from_selection(wq, wk, &dims, rq, rk, rope)?
            }
            (m, _) => return Err(Error::InvalidConfig(format!("method {} cannot compress QK", m.name()))),
        };
        objective += sol.objective;
        for (k, i) in heads.enumerate() {
            out.wq[i] = sol.wq[k].clone();
            out.qk_freq_indices[i] = sol.freq_indices.clone();
        }
        out.wk[j] = sol.wk;
    }
    Ok((out, objective))
}

fn ov_from_selection(wv: &Matrix, wo_group: &[Matrix], dims: &[usize], r_kv: &Matrix) -> Result<OvSolution> {
    let wv_t = wv.select_columns(dims)?;
    let wo_t = wo_group.iter().map(|o| o.select_rows(dims)).collect::<Result<Vec<_>>>()?;
    let s = psd_sqrt(r_kv, 0.0)?;
    let mut objective = 0.0;
    for (o, o_t) in wo_group.iter().zip(&wo_t) {
        objective += s.matmul(&wv.matmul(o)?.sub(&wv_t.matmul(o_t)?)?)?.frobenius_sq();
    }
    Ok(OvSolution {
        wv: vec![wv_t],
        wo: wo_t,
        objective,
        variant: if wo_group.len() == 1 { OvVariant::PerHead } else { OvVariant::GqaJoint },
        kv_dim: dims.len(),
    })
}

/// Replaces the value/output projections. `p_cat` is the concatenated
/// statistic required by the overall variant.
pub fn compress_ov(
    weights: &LayerWeights,
    cfg: &ModelConfig,
    stats: &FinalStats,
    p_cat: Option<&Matrix>,
    plan: &LayerPlan,
    opts: &CompressOptions,
) -> Result<(LayerWeights, f64)> {
    plan.ov_method.check(Component::Ov, cfg.rope)?;
    let mut out = weights.clone();
    let r = plan.r_vo;
    if opts.ov_variant == OvVariant::Overall {
        if plan.ov_method != Method::A3 || cfg.is_gqa() {
            return Err(Error::InvalidConfig(
                "the overall value/output variant needs method a3 and one kv head per query head".into(),
            ));
        }
        let p_cat = p_cat.ok_or_else(|| Error::InvalidArgument("overall variant needs concatenated statistics".into()))?;
        let sol = solve_ov_overall(&weights.wv, &weights.wo, p_cat, r, opts.damping, opts.overall_limit)?;
        out.wv = sol.wv;
        out.wo = sol.wo;
        return Ok((out, sol.objective));
    }
    let mut objective = 0.0;
    for j in 0..cfg.n_kv_heads {
        let heads = cfg.group_heads(j);
        let wo = &weights.wo[heads.clone()];
        let wv = &weights.wv[j];
        let joint = wo.len() > 1 || opts.ov_variant == OvVariant::GqaJoint;
        let sol = match plan.ov_method {
            Method::A3 if joint => solve_ov_gqa(wv, wo, &stats.r_kv, r, opts.damping)?,
            Method::A3 => solve_ov_mha(wv, &wo[0], &stats.r_p[heads.start], r, opts.damping)?,
            Method::CloverOv => {
                let mut s = clover_ov_group(wv, wo, r)?;
                s.objective = ov_group_objective(wv, wo, &s, &stats.r_kv)?;
                s
            }
            Method::PlainSvd => value_factor_ov(wv, wo, None, r, opts.damping, &stats.r_kv)?,
            Method::WhitenedSvd => value_factor_ov(wv, wo, Some(&stats.r_kv), r, opts.damping, &stats.r_kv)?,
            Method::AbsW => {
                let dims = prune_abs_w(wv, &Matrix::hstack(wo)?, r, false)?;
                ov_from_selection(wv, wo, &dims, &stats.r_kv)?
            }
            Method::Wanda => {
                let dims = prune_wanda(wv, &Matrix::hstack(wo)?, &stats.r_kv.diag(), &vec![1.0; wo.len() * cfg.d_model], r, false, opts.damping)?;
                ov_from_selection(wv, wo, &dims, &stats.r_kv)?
            }
            m => return Err(Error::InvalidConfig(format!("method {} cannot compress OV", m.name()))),
        };
        objective += sol.objective;
        out.wv[j] = sol.wv[0].clone();
        for (k, i) in heads.enumerate() {
            out.wo[i] = sol.wo[k].clone();
        }
    }
    Ok((out, objective))
}

fn ov_group_objective(wv: &Matrix, wo: &[Matrix], sol: &OvSolution, r: &Matrix) -> Result<f64> {
    let s = psd_sqrt(r, 0.0)?;
    let mut total = 0.0;
    for (k, o) in wo.iter().enumerate() {
        total += s.matmul(&wv.matmul(o)?.sub(&sol.fused(k)?)?)?.frobenius_sq();
    }
    Ok(total)
}

/// Replaces the up/gate/down projections.
pub fn compress_mlp_component(
    weights: &LayerWeights,
    cfg: &ModelConfig,
    stats: &FinalStats,
    plan: &LayerPlan,
    opts: &CompressOptions,
) -> Result<(LayerWeights, f64)> {
    plan.mlp_method.check(Component::Mlp, cfg.rope)?;
    let (r_d, wd, r) = (&stats.r_d, &weights.wd, plan.r_mlp);
    let d = wd.rows();
    let sol: MlpSolution = match plan.mlp_method {
        Method::A3 => mlp_cur_select(r_d, wd, r, opts.scale_mode, opts.damping)?,
        Method::AbsW => {
            let l = match &weights.wg {
                Some(g) => Matrix::vstack(&[weights.wu.clone(), g.clone()])?,
                None => weights.wu.clone(),
            };
            let sel = prune_abs_w(&l, wd, r, false)?;
            mlp_from_selection(r_d, wd, sel, &vec![0.0; d], ScaleMode::None)?
        }
        Method::Wanda => {
            let ident = Matrix::identity(d);
            let ones = vec![1.0; wd.cols()];
            let scores = wanda_scores(&ident, wd, &r_d.diag(), &ones, opts.damping)?;
            let sel = prune_wanda(&ident, wd, &r_d.diag(), &ones, r, false, opts.damping)?;
            mlp_from_selection(r_d, wd, sel, &scores, ScaleMode::None)?
        }
        m => return Err(Error::InvalidConfig(format!("method {} cannot compress the MLP", m.name()))),
    };
    let (wu, wg, wd_t) = compress_mlp(&weights.wu, weights.wg.as_ref(), wd, &sol)?;
    let mut out = weights.clone();
    out.wu = wu;
    out.wg = wg;
    out.wd = wd_t;
    if cfg.mlp == MlpVariant::TwoLayerRelu {
        out.wg = None;
    }
    Ok((out, sol.objective))
}

/// Compresses all three components from one set of statistics.
pub fn compress_layer(
    weights: &LayerWeights,
    cfg: &ModelConfig,
    stats: &FinalStats,
    p_cat: Option<&Matrix>,
    plan: &LayerPlan,
    opts: &CompressOptions,
) -> Result<CompressedLayer> {
    plan.validate(cfg, opts.ov_variant)?;
    weights.validate(cfg)?;
    let (w, qk) = compress_qk(weights, cfg, stats, plan, opts)?;
    let (w, ov) = compress_ov(&w, cfg, stats, p_cat, plan, opts)?;
    let (w, mlp) = compress_mlp_component(&w, cfg, stats, plan, opts)?;
    Ok(CompressedLayer {
        weights: w,
        objectives: ComponentObjectives { qk, ov, mlp },
    })
}

/// Like [`compress_layer`] but calibrates on `batches` itself, honouring
/// `recalibrate_after_qk` for the value-side statistics.
pub fn compress_layer_calibrated(
    weights: &LayerWeights,
    cfg: &ModelConfig,
    batches: &[ActivationBatch],
    plan: &LayerPlan,
    opts: &CompressOptions,
) -> Result<CompressedLayer> {
    plan.validate(cfg, opts.ov_variant)?;
    let overall = opts.ov_variant == OvVariant::Overall;
    let stats = collect_layer_stats(weights, cfg, batches, None)?.finalize()?;
    let (after_qk, qk) = compress_qk(weights, cfg, &stats, plan, opts)?;
    let source = if opts.recalibrate_after_qk { &after_qk } else { weights };
    let ov_stats = if opts.recalibrate_after_qk {
        collect_layer_stats(source, cfg, batches, None)?.finalize()?
    } else {
        stats.clone()
    };
    let p_cat = if overall {
        Some(collect_concat_stats(source, cfg, batches)?.finalize()?)
    } else {
        None
    };
    let (w, ov) = compress_ov(&after_qk, cfg, &ov_stats, p_cat.as_ref(), plan, opts)?;
    let (w, mlp) = compress_mlp_component(&w, cfg, &stats, plan, opts)?;
    Ok(CompressedLayer {
        weights: w,
        objectives: ComponentObjectives { qk, ov, mlp },
    })
}

/// Functional errors of one layer on held-out batches.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerErrors {
    /// Mean over query heads and causal `(t, s)` pairs of the squared
    /// pre-softmax score difference.
    pub score_mse: f64,
    /// Mean over tokens of `||o - o~||^2`.
    pub output_mse: f64,
    /// Mean over tokens of `||y - y~||^2`.
    pub mlp_mse: f64,
    pub score_rel: f64,
    pub output_rel: f64,
    pub mlp_rel: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

pub fn functional_errors(
    original: &LayerWeights,
    compressed: &LayerWeights,
    cfg: &ModelConfig,
    batches: &[ActivationBatch],
) -> Result<LayerErrors> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument("no evaluation batches".into()));
    }
    original.validate(cfg)?;
    compressed.validate(cfg)?;
    let (mut s_err, mut s_sig, mut pairs) = (0.0, 0.0, 0usize);
    let (mut o_err, mut o_sig, mut m_err, mut m_sig, mut tokens) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for b in batches {
        let t = b.len();
        for h in 0..cfg.n_query_heads {
            let (a, _) = attention_scores(original, cfg, b, h)?;
            let (c, _) = attention_scores(compressed, cfg, b, h)?;
            for i in 0..t {
                for j in 0..=i {
                    let d = a[(i, j)] - c[(i, j)];
                    s_err += d * d;
                    s_sig += a[(i, j)] * a[(i, j)];
                }
            }
            pairs += t * (t + 1) / 2;
        }
        let o = attention_output(original, cfg, b)?;
        let o_t = attention_output(compressed, cfg, b)?;
        o_err += o.sub(&o_t)?.frobenius_sq();
        o_sig += o.frobenius_sq();
        let (_, y) = mlp_forward(original, cfg, &b.x)?;
        let (_, y_t) = mlp_forward(compressed, cfg, &b.x)?;
        m_err += y.sub(&y_t)?.frobenius_sq();
        m_sig += y.frobenius_sq();
        tokens += t;
    }
    let (p, n) = (pairs as f64, tokens as f64);
    Ok(LayerErrors {
        score_mse: s_err / p,
        output_mse: o_err / n,
        mlp_mse: m_err / n,
        score_rel: ratio(s_err, s_sig),
        output_rel: ratio(o_err, o_sig),
        mlp_rel: ratio(m_err, m_sig),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccountingOptions {
    /// Bytes per cached scalar.
    pub element_size: u64,
    /// Context length used for the per-token attention FLOPs.
    pub context_len: u64,
    /// Embedding rows (and tied head); 0 to omit.
    pub vocab_size: u64,
    pub ov_variant: OvVariant,
}

impl Default for AccountingOptions {
    fn default() -> Self {
        Self {
            element_size: 2,
            context_len: 2048,
            vocab_size: 0,
            ov_variant: OvVariant::PerHead,
        }
    }
}

/// Sizes of one layer or a whole model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub attention_params: u64,
    pub mlp_params: u64,
    pub flops_per_token: u64,
    pub kv_bytes_per_token: u64,
}

impl Counts {
    pub fn params(&self) -> u64 {
        self.attention_params + self.mlp_params
    }

    fn add(&mut self, o: &Counts) {
        self.attention_params += o.attention_params;
        self.mlp_params += o.mlp_params;
        self.flops_per_token += o.flops_per_token;
        self.kv_bytes_per_token += o.kv_bytes_per_token;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub before: Counts,
    pub after: Counts,
    pub embedding_params: u64,
}

impl Accounting {
    /// Fraction of attention+MLP parameters removed.
    pub fn removed_fraction(&self) -> f64 {
        1.0 - self.after.params() as f64 / self.before.params() as f64
    }

    /// Same, with the embedding parameters in both totals.
    pub fn removed_fraction_with_embeddings(&self) -> f64 {
        let e = self.embedding_params as f64;
        1.0 - (self.after.params() as f64 + e) / (self.before.params() as f64 + e)
    }
}

/// Parameters of one rank-`r` factor pair replacing an `m x n` matrix.
pub fn factored_params(m: u64, n: u64, r: u64) -> u64 {
    r * (m + n)
}

pub fn layer_counts(cfg: &ModelConfig, plan: &LayerPlan, opts: &AccountingOptions) -> Counts {
    let (hq, hkv, dm) = (cfg.n_query_heads as u64, cfg.n_kv_heads as u64, cfg.d_model as u64);
    let (rqk, rvo, rmlp) = (plan.r_qk as u64, plan.r_vo as u64, plan.r_mlp as u64);
    let l = opts.context_len;
    let qk = hq * dm * rqk + hkv * dm * rqk;
    // overall variant: per-head value factors, one shared output factor
    let (ov, value_heads) = match opts.ov_variant {
        OvVariant::Overall => (hq * dm * rvo + rvo * dm, hq),
        _ => (hkv * dm * rvo + hq * rvo * dm, hkv),
    };
    let mlp = cfg.mlp.matrix_count() as u64 * dm * rmlp;
    let attention_params = qk + ov;
    let flops = 2 * (attention_params + mlp) + 2 * hq * l * rqk + 2 * hq * l * rvo;
    Counts {
        attention_params,
        mlp_params: mlp,
        flops_per_token: flops,
        kv_bytes_per_token: opts.element_size * (hkv * rqk + value_heads * rvo),
    }
}

pub fn accounting(cfg: &ModelConfig, plan: &CompressionPlan, opts: &AccountingOptions) -> Accounting {
    let full = LayerPlan::full(cfg);
    let base = AccountingOptions {
        ov_variant: OvVariant::PerHead,
        ..*opts
    };
    let mut before = Counts::default();
    let mut after = Counts::default();
    for l in &plan.layers {
        before.add(&layer_counts(cfg, &full, &base));
        after.add(&layer_counts(cfg, l, opts));
    }
    Accounting {
        before,
        after,
        embedding_params: 2 * opts.vocab_size * cfg.d_model as u64,
    }
}

/// Stored scalars of an actual layer, for cross-checking [`layer_counts`].
pub fn count_layer_params(w: &LayerWeights) -> (u64, u64) {
    let n = |m: &Matrix| (m.rows() * m.cols()) as u64;
    let attention = w.wq.iter().chain(&w.wk).chain(&w.wv).chain(&w.wo).map(n).sum();
    let mlp = n(&w.wu) + w.wg.as_ref().map_or(0, n) + n(&w.wd);
    (attention, mlp)
}

/// Cached scalars per token of a forward pass over `batch`.
pub fn measured_kv_elements(w: &LayerWeights, cfg: &ModelConfig, batch: &ActivationBatch) -> Result<usize> {
    Ok(attention_forward(w, cfg, batch)?.1.elements_per_token())
}

fn ratio_rank(d: usize, ratio: f64, even: bool) -> Result<usize> {
    let keep = 1.0 - ratio;
    let r = if even {
        ((keep * d as f64 / 2.0).round() as usize) * 2
    } else {
        (keep * d as f64).round() as usize
    };
    if r == 0 {
        return Err(Error::InvalidConfig(format!(
            "ratio {ratio} leaves rank 0 for dimension {d}"
        )));
    }
    Ok(r.min(d))
}

/// Uniform plan removing `ratio` of every component's rank.
pub fn ratio_to_ranks(cfg: &ModelConfig, n_layers: usize, ratio: f64) -> Result<CompressionPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidConfig(format!("ratio must lie in [0, 1), got {ratio}")));
    }
    let layer = LayerPlan {
        r_qk: ratio_rank(cfg.qk_head_dim, ratio, cfg.rope)?,
        r_vo: ratio_rank(cfg.vo_head_dim, ratio, false)?,
        r_mlp: ratio_rank(cfg.d_inter, ratio, false)?,
        ..LayerPlan::full(cfg)
    };
    Ok(CompressionPlan {
        layers: vec![layer; n_layers],
    })
}

/// Closed-form objective of each component at every rank `1..=full`
/// (index `r - 1`; unreachable odd rotary ranks are `NaN`).
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveCurves {
    pub qk: Vec<f64>,
    pub ov: Vec<f64>,
    pub mlp: Vec<f64>,
}

impl ObjectiveCurves {
    fn get(&self, c: Component) -> &[f64] {
        match c {
            Component::Qk => &self.qk,
            Component::Ov => &self.ov,
            Component::Mlp => &self.mlp,
        }
    }
}

/// A3 objectives of one layer across all ranks; the QK curve is averaged
/// over query heads.
pub fn objective_curves(
    weights: &LayerWeights,
    cfg: &ModelConfig,
    stats: &FinalStats,
    opts: &CompressOptions,
) -> Result<ObjectiveCurves> {
    let mut plan = LayerPlan::full(cfg);
    let mut qk = Vec::with_capacity(cfg.qk_head_dim);
    for r in 1..=cfg.qk_head_dim {
        if cfg.rope && r % 2 != 0 {
            qk.push(f64::NAN);
            continue;
        }
        plan.r_qk = r;
        qk.push(compress_qk(weights, cfg, stats, &plan, opts)?.1 / cfg.n_query_heads as f64);
    }
    let ov = (1..=cfg.vo_head_dim)
        .map(|r| {
            plan.r_vo = r;
            compress_ov(weights, cfg, stats, None, &plan, opts).map(|x| x.1)
        })
        .collect::<Result<_>>()?;
    let mlp = (1..=cfg.d_inter)
        .map(|r| mlp_cur_select(&stats.r_d, &weights.wd, r, opts.scale_mode, opts.damping).map(|s| s.objective))
        .collect::<Result<_>>()?;
    Ok(ObjectiveCurves { qk, ov, mlp })
}

fn params_per_rank(cfg: &ModelConfig, c: Component) -> u64 {
    let dm = cfg.d_model as u64;
    let (hq, hkv) = (cfg.n_query_heads as u64, cfg.n_kv_heads as u64);
    match c {
        Component::Qk | Component::Ov => (hq + hkv) * dm,
        Component::Mlp => cfg.mlp.matrix_count() as u64 * dm,
    }
}

/// Greedy mixed-rank allocation: from full ranks, repeatedly take the
/// single rank decrement with the smallest objective increase per parameter
/// saved until the attention+MLP parameter count is at most `budget`.
/// Equal costs prefer the lower layer, then QK, OV, MLP.
pub fn mixed_rank_allocate(
    cfg: &ModelConfig,
    curves: &[ObjectiveCurves],
    budget: u64,
    granularity: usize,
    components: &[Component],
) -> Result<CompressionPlan> {
    if granularity == 0 {
        return Err(Error::InvalidArgument("granularity must be positive".into()));
    }
    let step = |c: Component| {
        if c == Component::Qk && cfg.rope {
            granularity + granularity % 2
        } else {
            granularity
        }
    };
    let mut plan = CompressionPlan::full(cfg, curves.len());
    let acc = AccountingOptions::default();
    let total = |p: &CompressionPlan| accounting(cfg, p, &acc).after.params();
    let mut minimal = plan.clone();
    for l in &mut minimal.layers {
        for &c in components {
            let s = step(c);
            let r = l.rank_mut(c);
            while *r > s {
                *r -= s;
            }
        }
    }
    let floor = total(&minimal);
    if floor > budget {
        return Err(Error::InfeasibleBudget { budget, minimum: floor });
    }
    let mut current = total(&plan);
    while current > budget {
        let mut best: Option<(f64, usize, Component)> = None;
        for (li, (layer, curve)) in plan.layers.iter().zip(curves).enumerate() {
            for &c in Component::ALL.iter().filter(|c| components.contains(c)) {
                let (s, r) = (step(c), layer.rank(c));
                if r <= s {
                    continue;
                }
                let values = curve.get(c);
                let increase = (values[r - s - 1] - values[r - 1]).max(0.0);
                let cost = increase / (params_per_rank(cfg, c) * s as u64) as f64;
                if best.is_none_or(|(b, _, _)| cost < b) {
                    best = Some((cost, li, c));
                }
            }
        }
        let (_, li, c) = best.expect("budget above the feasible floor");
        *plan.layers[li].rank_mut(c) -= step(c);
        current = total(&plan);
    }
    Ok(plan)
}

/// Where the random-search oracle draws rank-`r` candidates `(A, B)` with
/// `A: rows x r`, `B: r x cols`.
#[derive(Debug, Clone, Default)]
pub struct CandidateSpace {
    pub rows: usize,
    pub cols: usize,
    /// Whitened-space draws use `(left_map G_a, G_b right_map)`.
    pub left_map: Option<Matrix>,
    pub right_map: Option<Matrix>,
    /// Reference factors whose perturbations are also drawn; scales the
    /// raw draws to the same entry magnitude.
    pub anchor: Option<(Matrix, Matrix)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleResult {
    pub best: f64,
    pub evaluated: usize,
}

fn rms(m: &Matrix) -> f64 {
    (m.frobenius_sq() / (m.rows() * m.cols()) as f64).sqrt()
}

/// Best objective over `n_samples` random rank-`r` candidates. Candidates
/// are a fixed sequence for a given seed, so the result is
/// non-increasing in `n_samples`.
pub fn oracle_random_rank_r(
    mut objective: impl FnMut(&Matrix, &Matrix) -> Result<f64>,
    space: &CandidateSpace,
    r: usize,
    n_samples: usize,
    seed: u64,
) -> Result<OracleResult> {
    let mut rng = seeded(seed);
    let mut kinds = vec![0u8];
    if space.left_map.is_some() || space.right_map.is_some() {
        kinds.push(1);
    }
    if space.anchor.is_some() {
        kinds.push(2);
    }
    let (sa, sb) = space.anchor.as_ref().map_or((1.0, 1.0), |(a, b)| (rms(a), rms(b)));
    let mut best = f64::INFINITY;
    for i in 0..n_samples {
        let (a, b) = match kinds[i % kinds.len()] {
            0 => (
                gaussian_matrix(&mut rng, space.rows, r).scale(sa),
                gaussian_matrix(&mut rng, r, space.cols).scale(sb),
            ),
            1 => {
                let mut a = gaussian_matrix(&mut rng, space.rows, r);
                let mut b = gaussian_matrix(&mut rng, r, space.cols);
                if let Some(m) = &space.left_map {
                    a = m.matmul(&a)?;
                }
                if let Some(m) = &space.right_map {
                    b = b.matmul(m)?;
                }
                (a, b)
            }
            _ => {
                let (a0, b0) = space.anchor.as_ref().expect("anchor present");
                let level = [1.0, 0.3, 0.1, 0.03, 0.01, 0.003][rng.random_range(0..6)];
                (
                    a0.add(&gaussian_matrix(&mut rng, space.rows, r).scale(level * sa))?,
                    b0.add(&gaussian_matrix(&mut rng, r, space.cols).scale(level * sb))?,
                )
            }
        };
        best = best.min(objective(&a, &b)?);
    }
    Ok(OracleResult {
        best,
        evaluated: n_samples,
    })
}

/// Combinatorial ceiling of the exhaustive oracle.
pub const EXHAUSTIVE_LIMIT: u64 = 1_000_000;

fn binomial(n: usize, k: usize) -> u64 {
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc.saturating_mul((n - i) as u64) / (i as u64 + 1))
}

/// Exact minimum of `||L U R - L R||_F^2` over all size-`r` selections
/// (whole adjacent pairs when `paired`). Returns the selected dimensions.
pub fn oracle_exhaustive_cur(l: &Matrix, r_mat: &Matrix, r: usize, paired: bool) -> Result<(Vec<usize>, f64)> {
    let d = l.cols();
    let (n, k) = if paired {
        if !d.is_multiple_of(2) || !r.is_multiple_of(2) {
            return Err(Error::InvalidArgument("paired search needs even dimension and rank".into()));
        }
        (d / 2, r / 2)
    } else {
        (d, r)
    };
    if k < 1 || k > n {
        return Err(Error::InvalidRank { rank: r, min: 1, max: d });
    }
    let count = binomial(n, k);
    if count > EXHAUSTIVE_LIMIT {
        return Err(Error::SearchTooLarge {
            n,
            k,
            limit: EXHAUSTIVE_LIMIT,
        });
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for subset in (0..n).combinations(k) {
        let dims = if paired { expand_pairs(&subset) } else { subset };
        let v = selection_objective(l, r_mat, &dims, None)?;
        if best.as_ref().is_none_or(|(_, b)| v < *b) {
            best = Some((dims, v));
        }
    }
    Ok(best.expect("at least one subset"))
}

/// Objectives of uniformly random size-`r` selections.
pub fn random_subset_objectives(
    l: &Matrix,
    r_mat: &Matrix,
    r: usize,
    paired: bool,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let d = l.cols();
    let (n, k) = if paired { (d / 2, r / 2) } else { (d, r) };
    if k < 1 || k > n {
        return Err(Error::InvalidRank { rank: r, min: 1, max: d });
    }
    let mut rng = seeded(seed);
    (0..n_samples)
        .map(|_| {
            let mut chosen = rand::seq::index::sample(&mut rng, n, k).into_vec();
            chosen.sort_unstable();
            let dims = if paired { expand_pairs(&chosen) } else { chosen };
            selection_objective(l, r_mat, &dims, None)
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::GaussianSource;
    use crate::rng::seeded;

    fn cfg(rope: bool, h_q: usize, h_kv: usize) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_query_heads: h_q,
            n_kv_heads: h_kv,
            qk_head_dim: 4,
            vo_head_dim: 4,
            d_inter: 12,
            rope,
            rope_theta: 10_000.0,
            mlp: MlpVariant::GatedSilu,
            scale_with_reduced_dim: false,
        }
    }

    fn setup(c: &ModelConfig, seed: u64) -> (LayerWeights, Vec<ActivationBatch>) {
        let w = LayerWeights::random(c, &mut seeded(seed)).unwrap();
        let src = GaussianSource::new(&mut seeded(seed + 1), c.d_model, 50.0).unwrap();
        let mut rng = seeded(seed + 2);
        (w, (0..4).map(|_| src.sample_batch(&mut rng, 6)).collect())
    }

    #[test]
    fn method_availability() {
        assert!(Method::CloverQk.check(Component::Qk, true).is_err());
        assert!(Method::PlainSvd.check(Component::Qk, true).is_err());
        assert!(Method::AbsW.check(Component::Qk, true).is_ok());
        assert!(Method::CloverQk.check(Component::Ov, false).is_err());
        assert!(Method::PlainSvd.check(Component::Mlp, false).is_err());
    }

    #[test]
    fn plan_validation() {
        let c = cfg(true, 2, 1);
        let mut p = LayerPlan::full(&c);
        assert!(p.validate(&c, OvVariant::PerHead).is_ok());
        p.r_qk = 3;
        assert!(p.validate(&c, OvVariant::PerHead).is_err());
        p.r_qk = 2;
        p.r_mlp = 0;
        assert!(p.validate(&c, OvVariant::PerHead).is_err());
    }

    #[test]
    fn identical_weights_have_zero_error() {
        let c = cfg(true, 2, 1);
        let (w, b) = setup(&c, 1);
        assert_eq!(functional_errors(&w, &w, &c, &b).unwrap(), LayerErrors::default());
    }

    #[test]
    fn mlp_only_leaves_scores_untouched() {
        let c = cfg(false, 2, 2);
        let (w, b) = setup(&c, 4);
        let stats = collect_layer_stats(&w, &c, &b, None).unwrap().finalize().unwrap();
        let plan = LayerPlan { r_mlp: 5, ..LayerPlan::full(&c) };
        let (m, _) = compress_mlp_component(&w, &c, &stats, &plan, &CompressOptions::default()).unwrap();
        let e = functional_errors(&w, &m, &c, &b).unwrap();
        assert_eq!(e.score_mse, 0.0);
        assert_eq!(e.output_mse, 0.0);
        assert!(e.mlp_mse > 0.0);
    }

    #[test]
    fn full_plan_accounting_is_unchanged() {
        let c = cfg(false, 4, 2);
        let a = accounting(&c, &CompressionPlan::full(&c, 3), &AccountingOptions::default());
        assert_eq!(a.before, a.after);
        assert_eq!(a.removed_fraction(), 0.0);
    }

    #[test]
    fn kv_bytes_halve() {
        let c = ModelConfig {
            qk_head_dim: 8,
            vo_head_dim: 8,
            ..cfg(false, 4, 2)
        };
        let plan = CompressionPlan {
            layers: vec![LayerPlan { r_qk: 4, r_vo: 4, ..LayerPlan::full(&c) }],
        };
        let a = accounting(&c, &plan, &AccountingOptions::default());
        assert_eq!(a.before.kv_bytes_per_token, 2 * 2 * (8 + 8));
        assert_eq!(a.after.kv_bytes_per_token, 2 * 2 * (4 + 4));
    }

    #[test]
    fn ratio_examples() {
        let c = ModelConfig { d_inter: 64, ..cfg(true, 2, 1) };
        let p = ratio_to_ranks(&c, 1, 0.5).unwrap();
        assert_eq!(p.layers[0].r_mlp, 32);
        assert_eq!(p.layers[0].r_qk % 2, 0);
        assert_eq!(ratio_to_ranks(&c, 2, 0.0).unwrap(), CompressionPlan::full(&c, 2));
        assert!(ratio_to_ranks(&c, 1, 0.99).is_err());
        assert!(ratio_to_ranks(&c, 1, 1.0).is_err());
    }

    #[test]
    fn full_budget_allocation_is_noop() {
        let c = cfg(false, 2, 2);
        let (w, b) = setup(&c, 7);
        let stats = collect_layer_stats(&w, &c, &b, None).unwrap().finalize().unwrap();
        let curve = objective_curves(&w, &c, &stats, &CompressOptions::default()).unwrap();
        let full = accounting(&c, &CompressionPlan::full(&c, 2), &AccountingOptions::default());
        let plan = mixed_rank_allocate(&c, &[curve.clone(), curve.clone()], full.before.params(), 1, &Component::ALL).unwrap();
        assert_eq!(plan, CompressionPlan::full(&c, 2));
        assert!(matches!(
            mixed_rank_allocate(&c, &[curve], 10, 1, &Component::ALL),
            Err(Error::InfeasibleBudget { .. })
        ));
    }

    #[test]
    fn identical_layers_split_evenly() {
        let c = cfg(false, 2, 2);
        let (w, b) = setup(&c, 9);
        let stats = collect_layer_stats(&w, &c, &b, None).unwrap().finalize().unwrap();
        let curve = objective_curves(&w, &c, &stats, &CompressOptions::default()).unwrap();
        let full = accounting(&c, &CompressionPlan::full(&c, 2), &AccountingOptions::default()).before.params();
        let plan = mixed_rank_allocate(&c, &[curve.clone(), curve], full * 6 / 10, 1, &Component::ALL).unwrap();
        let (a, b) = (plan.layers[0], plan.layers[1]);
        for comp in Component::ALL {
            let diff = a.rank(comp) as i64 - b.rank(comp) as i64;
            // layer 0 is always decremented first on ties
            assert!(diff == 0 || diff == -1, "{comp:?}: {a:?} vs {b:?}");
        }
    }

    #[test]
    fn oracle_single_sample_and_monotone() {
        let target = Matrix::identity(3);
        let obj = |a: &Matrix, b: &Matrix| Ok(target.sub(&a.matmul(b)?)?.frobenius_sq());
        let space = CandidateSpace { rows: 3, cols: 3, ..Default::default() };
        let one = oracle_random_rank_r(obj, &space, 1, 1, 5).unwrap();
        let mut rng = seeded(5);
        let a = gaussian_matrix(&mut rng, 3, 1);
        let b = gaussian_matrix(&mut rng, 1, 3);
        assert_eq!(one.best, obj(&a, &b).unwrap());
        let mut last = f64::INFINITY;
        for n in [1, 10, 100, 1000] {
            let v = oracle_random_rank_r(obj, &space, 1, n, 5).unwrap().best;
            assert!(v <= last);
            last = v;
        }
    }

    #[test]
    fn exhaustive_examples() {
        let l = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let r = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let (sel, v) = oracle_exhaustive_cur(&l, &r, 2, false).unwrap();
        assert_eq!((sel, v), (vec![0, 1], 0.0));
        // dropping column 0 costs 1, dropping column 1 costs 4
        let (sel, v) = oracle_exhaustive_cur(&l, &r, 1, false).unwrap();
        assert_eq!((sel, v), (vec![1], 1.0));
        let big = Matrix::zeros(1, 40);
        assert!(matches!(
            oracle_exhaustive_cur(&big, &Matrix::zeros(40, 1), 20, false),
            Err(Error::SearchTooLarge { .. })
        ));
        assert_eq!(binomial(10, 3), 120);
    }

    #[test]
    fn median_values() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
