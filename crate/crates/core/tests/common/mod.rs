#![allow(dead_code)]

use lowrank_core::calibration::GaussianSource;
use lowrank_core::harness::CandidateSpace;
use lowrank_core::model::{ActivationBatch, MlpVariant, ModelConfig};
use lowrank_core::rng::{gaussian_matrix, seeded, SeededRng};
use lowrank_core::tensor::{psd_inv_sqrt, truncated_svd};
use lowrank_core::Matrix;

/// Population autocorrelation with a random eigenbasis and geometric decay.
pub fn nonwhite(rng: &mut SeededRng, d: usize, decay: f64) -> Matrix {
    GaussianSource::new(rng, d, decay).unwrap().covariance().clone()
}

pub fn weights(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
    gaussian_matrix(rng, rows, cols).scale(1.0 / (rows as f64).sqrt())
}

/// Raw, whitened-space and plain-SVD-perturbation candidates for a fused
/// `d x d` target.
pub fn fused_space(target: &Matrix, left: &Matrix, right: &Matrix, r: usize) -> CandidateSpace {
    CandidateSpace {
        rows: target.rows(),
        cols: target.cols(),
        left_map: Some(psd_inv_sqrt(left, 0.0).unwrap()),
        right_map: Some(psd_inv_sqrt(right, 0.0).unwrap()),
        anchor: Some(truncated_svd(target, r).unwrap()),
    }
}

pub fn config(rope: bool, h_q: usize, h_kv: usize) -> ModelConfig {
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

pub fn batches(seed: u64, d: usize, count: usize, tokens: usize) -> Vec<ActivationBatch> {
    let src = GaussianSource::new(&mut seeded(seed), d, 50.0).unwrap();
    let mut rng = seeded(seed ^ 0xABCD);
    (0..count).map(|_| src.sample_batch(&mut rng, tokens)).collect()
}
