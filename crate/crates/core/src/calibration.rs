//! Streaming autocorrelation estimates `E{x^T x}` for the inputs of every
//! component: query stream, key/value stream, per-head attention-weighted
//! values `p_i = a'_i X_kv`, and the MLP intermediate activation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{attention_scores_two_stream, mlp_forward, ActivationBatch, LayerWeights, ModelConfig};
use crate::rng::{gaussian_matrix, random_orthogonal};
use crate::tensor::Matrix;

/// Mergeable `sum x^T x` accumulator over `dim`-dimensional samples.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrAccumulator {
    dim: usize,
    sum_outer: Matrix,
    n: u64,
}

impl CorrAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            sum_outer: Matrix::zeros(dim, dim),
            n: 0,
        }
    }

    /// Rebuilds an accumulator from persisted parts.
    pub fn from_parts(sum_outer: Matrix, n: u64) -> Result<Self> {
        if !sum_outer.is_square() {
            return Err(Error::ShapeMismatch {
                op: "CorrAccumulator::from_parts",
                left: sum_outer.shape(),
                right: sum_outer.shape(),
            });
        }
        Ok(Self {
            dim: sum_outer.rows(),
            sum_outer,
            n,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn sum_outer(&self) -> &Matrix {
        &self.sum_outer
    }

    /// `sum_outer += X^T X`, `n += T`.
    pub fn accumulate(&mut self, x: &Matrix) -> Result<()> {
        if x.cols() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "accumulate",
                left: x.shape(),
                right: (x.rows(), self.dim),
            });
        }
        // upper triangle only, mirrored, so the sum stays exactly symmetric
        let d = self.dim;
        for t in 0..x.rows() {
            let row = x.row(t);
            for i in 0..d {
                let xi = row[i];
                if xi == 0.0 {
                    continue;
                }
                for j in i..d {
                    self.sum_outer[(i, j)] += xi * row[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                self.sum_outer[(i, j)] = self.sum_outer[(j, i)];
            }
        }
        self.n += x.rows() as u64;
        Ok(())
    }

    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::ShapeMismatch {
                op: "merge",
                left: (self.dim, self.dim),
                right: (other.dim, other.dim),
            });
        }
        Ok(Self {
            dim: self.dim,
            sum_outer: self.sum_outer.add(&other.sum_outer)?,
            n: self.n + other.n,
        })
    }

    /// `sum_outer / n`.
    pub fn finalize(&self) -> Result<Matrix> {
        if self.n == 0 {
            return Err(Error::EmptyCalibration);
        }
        Ok(self.sum_outer.scale(1.0 / self.n as f64))
    }
}

/// Calibrated statistics of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub r_qq: CorrAccumulator,
    pub r_kv: CorrAccumulator,
    /// One per query head.
    pub r_p: Vec<CorrAccumulator>,
    pub r_d: CorrAccumulator,
}

impl LayerStats {
    pub fn new(cfg: &ModelConfig, d_inter: usize) -> Self {
        Self {
            r_qq: CorrAccumulator::new(cfg.d_model),
            r_kv: CorrAccumulator::new(cfg.d_model),
            r_p: vec![CorrAccumulator::new(cfg.d_model); cfg.n_query_heads],
            r_d: CorrAccumulator::new(d_inter),
        }
    }

    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.r_p.len() != other.r_p.len() {
            return Err(Error::InvalidArgument("head count differs between stats".into()));
        }
        Ok(Self {
            r_qq: self.r_qq.merge(&other.r_qq)?,
            r_kv: self.r_kv.merge(&other.r_kv)?,
            r_p: self
                .r_p
                .iter()
                .zip(&other.r_p)
                .map(|(a, b)| a.merge(b))
                .collect::<Result<_>>()?,
            r_d: self.r_d.merge(&other.r_d)?,
        })
    }

    /// Finalized matrices in the order `(r_qq, r_kv, r_p, r_d)`.
    pub fn finalize(&self) -> Result<FinalStats> {
        Ok(FinalStats {
            r_qq: self.r_qq.finalize()?,
            r_kv: self.r_kv.finalize()?,
            r_p: self.r_p.iter().map(CorrAccumulator::finalize).collect::<Result<_>>()?,
            r_d: self.r_d.finalize()?,
        })
    }
}

/// Finalized autocorrelation matrices of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalStats {
    pub r_qq: Matrix,
    pub r_kv: Matrix,
    pub r_p: Vec<Matrix>,
    pub r_d: Matrix,
}

/// `P_i = A'_i X_kv` for every query head.
pub fn weighted_values(
    weights: &LayerWeights,
    cfg: &ModelConfig,
    q_batch: &ActivationBatch,
    kv_batch: &ActivationBatch,
) -> Result<Vec<Matrix>> {
    (0..cfg.n_query_heads)
        .map(|i| {
            let (_, post) = attention_scores_two_stream(weights, cfg, q_batch, kv_batch, i)?;
            post.matmul(&kv_batch.x)
        })
        .collect()
}

/// Accumulates one batch into `stats`. `kv_batch` defaults to `batch`.
pub fn accumulate_layer_stats(
    stats: &mut LayerStats,
    weights: &LayerWeights,
    cfg: &ModelConfig,
    batch: &ActivationBatch,
    kv_batch: Option<&ActivationBatch>,
) -> Result<()> {
    let kv = kv_batch.unwrap_or(batch);
    stats.r_qq.accumulate(&batch.x)?;
    stats.r_kv.accumulate(&kv.x)?;
    for (acc, p) in stats
        .r_p
        .iter_mut()
        .zip(weighted_values(weights, cfg, batch, kv)?)
    {
        acc.accumulate(&p)?;
    }
    // the MLP reads the same hidden stream as the attention block
    let (hidden, _) = mlp_forward(weights, cfg, &batch.x)?;
    stats.r_d.accumulate(&hidden)
}

/// Collects all four statistic families over `batches`, optionally with a
/// distinct key/value stream (same length and positions as `batches`).
pub fn collect_layer_stats(
    weights: &LayerWeights,
    cfg: &ModelConfig,
    batches: &[ActivationBatch],
    kv_batches: Option<&[ActivationBatch]>,
) -> Result<LayerStats> {
    if batches.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if let Some(kv) = kv_batches {
        if kv.len() != batches.len() {
            return Err(Error::InvalidArgument(format!(
                "{} key/value batches for {} query batches",
                kv.len(),
                batches.len()
            )));
        }
    }
    weights.validate(cfg)?;
    let mut stats = LayerStats::new(cfg, weights.mlp_dim());
    for (b, batch) in batches.iter().enumerate() {
        let kv = kv_batches.map(|k| &k[b]);
        accumulate_layer_stats(&mut stats, weights, cfg, batch, kv)?;
    }
    Ok(stats)
}

/// Autocorrelation of `p_cat = [p_1, ..., p_hq]`, dimension `h_q * d_model`.
pub fn collect_concat_stats(
    weights: &LayerWeights,
    cfg: &ModelConfig,
    batches: &[ActivationBatch],
) -> Result<CorrAccumulator> {
    if batches.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let mut acc = CorrAccumulator::new(cfg.n_query_heads * cfg.d_model);
    for batch in batches {
        let p = weighted_values(weights, cfg, batch, batch)?;
        acc.accumulate(&Matrix::hstack(&p)?)?;
    }
    Ok(acc)
}

/// Zero-mean Gaussian hidden-state source with covariance
/// `Q diag(lambda) Q^T`, `Q` random orthogonal and `lambda` decaying
/// geometrically from 1 to `1 / decay_ratio`.
#[derive(Debug, Clone)]
pub struct GaussianSource {
    /// `x = z * mixing` for standard normal `z`.
    mixing: Matrix,
    covariance: Matrix,
}

impl GaussianSource {
    pub fn new(rng: &mut impl Rng, dim: usize, decay_ratio: f64) -> Result<Self> {
        if dim == 0 || !(decay_ratio >= 1.0 && decay_ratio.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gaussian source needs dim >= 1 and decay ratio >= 1, got {dim}, {decay_ratio}"
            )));
        }
        let q = random_orthogonal(rng, dim);
        let spectrum: Vec<f64> = (0..dim)
            .map(|k| {
                if dim == 1 {
                    1.0
                } else {
                    decay_ratio.powf(-(k as f64) / (dim - 1) as f64)
                }
            })
            .collect();
        let sqrt: Vec<f64> = spectrum.iter().map(|v| v.sqrt()).collect();
        let mixing = q.scale_columns(&sqrt).transpose();
        let covariance = q.scale_columns(&spectrum).matmul_t(&q)?.symmetrized();
        Ok(Self { mixing, covariance })
    }

    /// Population autocorrelation `E{x^T x}`.
    pub fn covariance(&self) -> &Matrix {
        &self.covariance
    }

    pub fn dim(&self) -> usize {
        self.mixing.rows()
    }

    pub fn sample(&self, rng: &mut impl Rng, tokens: usize) -> Matrix {
        gaussian_matrix(rng, tokens, self.dim())
            .matmul(&self.mixing)
            .expect("mixing is dim x dim")
    }

    pub fn sample_batch(&self, rng: &mut impl Rng, tokens: usize) -> ActivationBatch {
        ActivationBatch::sequential(self.sample(rng, tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MlpVariant;
    use crate::rng::seeded;
    use crate::tensor::symmetric_eigen;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 5,
            n_query_heads: 2,
            n_kv_heads: 1,
            qk_head_dim: 4,
            vo_head_dim: 3,
            d_inter: 7,
            rope: true,
            rope_theta: 10_000.0,
            mlp: MlpVariant::GatedSilu,
            scale_with_reduced_dim: false,
        }
    }

    #[test]
    fn single_row_outer_product() {
        let mut acc = CorrAccumulator::new(2);
        acc.accumulate(&Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(acc.count(), 1);
        assert_eq!(acc.finalize().unwrap(), Matrix::from_diag(&[1.0, 0.0]));
        assert!(acc.accumulate(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn empty_accumulator_cannot_finalize() {
        assert_eq!(CorrAccumulator::new(3).finalize(), Err(Error::EmptyCalibration));
    }

    #[test]
    fn accumulation_is_additive() {
        let mut rng = seeded(1);
        let x1 = gaussian_matrix(&mut rng, 4, 3);
        let x2 = gaussian_matrix(&mut rng, 6, 3);
        let mut a = CorrAccumulator::new(3);
        a.accumulate(&x1).unwrap();
        a.accumulate(&x2).unwrap();
        let mut b = CorrAccumulator::new(3);
        b.accumulate(&Matrix::vstack(&[x1, x2]).unwrap()).unwrap();
        assert_eq!(a.count(), b.count());
        assert!(a.sum_outer().max_abs_diff(b.sum_outer()) < 1e-12);
    }

    #[test]
    fn finalize_matches_double_loop() {
        let x = gaussian_matrix(&mut seeded(2), 9, 4);
        let mut acc = CorrAccumulator::new(4);
        acc.accumulate(&x).unwrap();
        let r = acc.finalize().unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let naive: f64 = (0..9).map(|t| x[(t, i)] * x[(t, j)]).sum::<f64>() / 9.0;
                assert!((r[(i, j)] - naive).abs() < 1e-12);
            }
        }
        assert_eq!(r.max_asymmetry(), 0.0);
    }

    #[test]
    fn orthonormal_rows_give_scaled_identity() {
        let x = Matrix::identity(3);
        let mut acc = CorrAccumulator::new(3);
        acc.accumulate(&x).unwrap();
        assert!(acc.finalize().unwrap().max_abs_diff(&Matrix::identity(3).scale(1.0 / 3.0)) < 1e-15);
    }

    #[test]
    fn merge_counts_and_commutes() {
        let mut rng = seeded(3);
        let mut parts = Vec::new();
        for _ in 0..3 {
            let mut a = CorrAccumulator::new(3);
            a.accumulate(&gaussian_matrix(&mut rng, 5, 3)).unwrap();
            parts.push(a);
        }
        let ab_c = parts[0].merge(&parts[1]).unwrap().merge(&parts[2]).unwrap();
        let a_bc = parts[0].merge(&parts[1].merge(&parts[2]).unwrap()).unwrap();
        let ba = parts[1].merge(&parts[0]).unwrap();
        assert_eq!(ab_c.count(), 15);
        assert!(ab_c.sum_outer().max_abs_diff(a_bc.sum_outer()) < 1e-12);
        assert_eq!(ba.sum_outer(), parts[0].merge(&parts[1]).unwrap().sum_outer());
        assert!(parts[0].merge(&CorrAccumulator::new(4)).is_err());
    }

    #[test]
    fn source_covariance_has_requested_spectrum() {
        let src = GaussianSource::new(&mut seeded(4), 6, 100.0).unwrap();
        let eig = symmetric_eigen(src.covariance()).unwrap();
        assert!((eig.values[0] - 1.0).abs() < 1e-12);
        assert!((eig.values[5] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn single_token_weighted_values_equal_inputs() {
        let c = cfg();
        let w = LayerWeights::random(&c, &mut seeded(5)).unwrap();
        let src = GaussianSource::new(&mut seeded(6), 5, 10.0).unwrap();
        let mut rng = seeded(7);
        let batches: Vec<_> = (0..4).map(|_| src.sample_batch(&mut rng, 1)).collect();
        let stats = collect_layer_stats(&w, &c, &batches, None).unwrap();
        for rp in &stats.r_p {
            assert!(rp.sum_outer().max_abs_diff(stats.r_kv.sum_outer()) < 1e-12);
        }
    }

    #[test]
    fn zero_activations_give_zero_stats() {
        let c = cfg();
        let w = LayerWeights::random(&c, &mut seeded(8)).unwrap();
        let b = ActivationBatch::sequential(Matrix::zeros(3, 5));
        let s = collect_layer_stats(&w, &c, &[b], None).unwrap().finalize().unwrap();
        assert_eq!(s.r_qq.max_abs(), 0.0);
        assert_eq!(s.r_d.max_abs(), 0.0);
        assert!(s.r_p.iter().all(|m| m.max_abs() == 0.0));
        assert!(collect_layer_stats(&w, &c, &[], None).is_err());
    }

    #[test]
    fn sharded_collection_matches_sequential() {
        let c = cfg();
        let w = LayerWeights::random(&c, &mut seeded(9)).unwrap();
        let src = GaussianSource::new(&mut seeded(10), 5, 50.0).unwrap();
        let mut rng = seeded(11);
        let batches: Vec<_> = (0..4).map(|_| src.sample_batch(&mut rng, 6)).collect();
        let all = collect_layer_stats(&w, &c, &batches, None).unwrap();
        let a = collect_layer_stats(&w, &c, &batches[..2], None).unwrap();
        let b = collect_layer_stats(&w, &c, &batches[2..], None).unwrap();
        let merged = a.merge(&b).unwrap();
        assert_eq!(merged.r_qq.count(), all.r_qq.count());
        assert!(merged.r_p[1].sum_outer().max_abs_diff(all.r_p[1].sum_outer()) < 1e-12);
        assert!(merged.r_d.sum_outer().max_abs_diff(all.r_d.sum_outer()) < 1e-12);
    }

    #[test]
    fn uniform_attention_gives_running_mean_stats() {
        // zero query weights -> all logits equal -> row t averages tokens 0..=t
        let c = cfg();
        let mut w = LayerWeights::random(&c, &mut seeded(12)).unwrap();
        for q in &mut w.wq {
            *q = Matrix::zeros(q.rows(), q.cols());
        }
        let x = gaussian_matrix(&mut seeded(13), 5, 5);
        let b = ActivationBatch::sequential(x.clone());
        let stats = collect_layer_stats(&w, &c, &[b], None).unwrap();
        let means = Matrix::from_fn(5, 5, |t, d| (0..=t).map(|s| x[(s, d)]).sum::<f64>() / (t + 1) as f64);
        let mut expected = CorrAccumulator::new(5);
        expected.accumulate(&means).unwrap();
        assert!(stats.r_p[0].sum_outer().max_abs_diff(expected.sum_outer()) < 1e-12);
    }

    #[test]
    fn distinct_kv_stream_is_used() {
        let c = cfg();
        let w = LayerWeights::random(&c, &mut seeded(14)).unwrap();
        let q = ActivationBatch::sequential(gaussian_matrix(&mut seeded(15), 4, 5));
        let kv = ActivationBatch::sequential(gaussian_matrix(&mut seeded(16), 4, 5));
        let s = collect_layer_stats(&w, &c, std::slice::from_ref(&q), Some(std::slice::from_ref(&kv))).unwrap();
        let mut expected = CorrAccumulator::new(5);
        expected.accumulate(&kv.x).unwrap();
        assert_eq!(s.r_kv.sum_outer(), expected.sum_outer());
        assert_ne!(s.r_qq.sum_outer(), s.r_kv.sum_outer());
    }
}
