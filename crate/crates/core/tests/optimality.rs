mod common;

use common::{fused_space, nonwhite, weights};
use lowrank_core::baselines::{linear_output_objective, plain_svd_layer, whitened_svd_layer};
use lowrank_core::harness::{oracle_random_rank_r, CandidateSpace};
use lowrank_core::montecarlo::linear_output_error_mc;
use lowrank_core::rng::seeded;
use lowrank_core::solver_ov::{solve_ov_gqa, solve_ov_mha};
use lowrank_core::solver_qk::{solve_qk_gqa, solve_qk_mha, QkObjective};
use lowrank_core::tensor::{psd_inv_sqrt, psd_sqrt, truncated_svd, DEFAULT_DAMPING};
use lowrank_core::Matrix;

const CANDIDATES: usize = 10_000;

#[test]
fn qk_beats_random_rank_two_candidates() {
    for seed in 0..5 {
        let mut rng = seeded(100 + seed);
        let (wq, wk) = (weights(&mut rng, 8, 4), weights(&mut rng, 8, 4));
        let (rq, rk) = (nonwhite(&mut rng, 8, 100.0), nonwhite(&mut rng, 8, 100.0));
        let sol = solve_qk_mha(&wq, &wk, &rq, &rk, 2, DEFAULT_DAMPING).unwrap();
        let w = wq.matmul_t(&wk).unwrap();
        let eval = QkObjective::new(&rq, &rk).unwrap();
        let best = oracle_random_rank_r(
            |a, b| eval.eval(&w.sub(&a.matmul(b)?)?),
            &fused_space(&w, &rq, &rk, 2),
            2,
            CANDIDATES,
            seed,
        )
        .unwrap();
        assert!(sol.objective <= best.best, "seed {seed}: {} > {}", sol.objective, best.best);
    }
}

#[test]
fn ov_beats_random_candidates() {
    for seed in 0..5 {
        let mut rng = seeded(200 + seed);
        let (wv, wo) = (weights(&mut rng, 8, 4), weights(&mut rng, 4, 8));
        let rp = nonwhite(&mut rng, 8, 100.0);
        let sol = solve_ov_mha(&wv, &wo, &rp, 2, DEFAULT_DAMPING).unwrap();
        let w = wv.matmul(&wo).unwrap();
        let space = CandidateSpace {
            rows: 8,
            cols: 8,
            left_map: Some(psd_inv_sqrt(&rp, 0.0).unwrap()),
            right_map: None,
            anchor: Some(truncated_svd(&w, 2).unwrap()),
        };
        let best = oracle_random_rank_r(
            |a, b| linear_output_objective(&rp, &w.sub(&a.matmul(b)?)?),
            &space,
            2,
            CANDIDATES,
            seed,
        )
        .unwrap();
        assert!(sol.objective <= best.best);
    }
}

#[test]
fn gqa_qk_beats_shared_key_candidates() {
    for seed in 0..3 {
        let mut rng = seeded(300 + seed);
        let wq = vec![weights(&mut rng, 8, 4), weights(&mut rng, 8, 4)];
        let wk = weights(&mut rng, 8, 4);
        let (rq, rk) = (nonwhite(&mut rng, 8, 100.0), nonwhite(&mut rng, 8, 100.0));
        let sol = solve_qk_gqa(&wq, &wk, &rq, &rk, 2, DEFAULT_DAMPING).unwrap();
        let eval = QkObjective::new(&rq, &rk).unwrap();
        let fused: Vec<Matrix> = wq.iter().map(|q| q.matmul_t(&wk).unwrap()).collect();
        let stacked = Matrix::vstack(&fused).unwrap();
        let inv_q = psd_inv_sqrt(&rq, 0.0).unwrap();
        let block_inv = Matrix::from_fn(16, 16, |i, j| if i / 8 == j / 8 { inv_q[(i % 8, j % 8)] } else { 0.0 });
        let space = CandidateSpace {
            rows: 16,
            cols: 8,
            left_map: Some(block_inv),
            right_map: Some(psd_inv_sqrt(&rk, 0.0).unwrap()),
            anchor: Some(truncated_svd(&stacked, 2).unwrap()),
        };
        let best = oracle_random_rank_r(
            |a, b| {
                let approx = a.matmul(b)?;
                let mut total = 0.0;
                for (i, f) in fused.iter().enumerate() {
                    total += eval.eval(&f.sub(&approx.row_block(8 * i, 8 * i + 8))?)?;
                }
                Ok(total)
            },
            &space,
            2,
            CANDIDATES,
            seed,
        )
        .unwrap();
        assert!(sol.objective <= best.best);
    }
}

#[test]
fn gqa_ov_beats_shared_value_candidates() {
    for seed in 0..3 {
        let mut rng = seeded(400 + seed);
        let wv = weights(&mut rng, 8, 4);
        let wo = vec![weights(&mut rng, 4, 8), weights(&mut rng, 4, 8)];
        let rkv = nonwhite(&mut rng, 8, 100.0);
        let sol = solve_ov_gqa(&wv, &wo, &rkv, 2, DEFAULT_DAMPING).unwrap();
        let fused: Vec<Matrix> = wo.iter().map(|o| wv.matmul(o).unwrap()).collect();
        let wide = Matrix::hstack(&fused).unwrap();
        let space = CandidateSpace {
            rows: 8,
            cols: 16,
            left_map: Some(psd_inv_sqrt(&rkv, 0.0).unwrap()),
            right_map: None,
            anchor: Some(truncated_svd(&wide, 2).unwrap()),
        };
        let best = oracle_random_rank_r(
            |a, b| linear_output_objective(&rkv, &wide.sub(&a.matmul(b)?)?),
            &space,
            2,
            CANDIDATES,
            seed,
        )
        .unwrap();
        assert!(sol.objective <= best.best);
    }
}

#[test]
fn clover_loses_to_whitened_solver_on_nonwhite_inputs() {
    for seed in 0..10 {
        let mut rng = seeded(500 + seed);
        let (wq, wk) = (weights(&mut rng, 8, 4), weights(&mut rng, 8, 4));
        let (rq, rk) = (nonwhite(&mut rng, 8, 100.0), nonwhite(&mut rng, 8, 100.0));
        let a3 = solve_qk_mha(&wq, &wk, &rq, &rk, 2, DEFAULT_DAMPING).unwrap();
        let clover = lowrank_core::baselines::clover_qk(&wq, &wk, 2).unwrap();
        let eval = QkObjective::new(&rq, &rk).unwrap();
        let c = eval.eval_factors(std::slice::from_ref(&wq), &wk, &clover.wq, &clover.wk).unwrap();
        assert!(a3.objective <= c);
    }
}

#[test]
fn clover_ties_on_white_inputs() {
    let mut rng = seeded(600);
    let (wq, wk) = (weights(&mut rng, 8, 4), weights(&mut rng, 8, 4));
    let i = Matrix::identity(8);
    let a3 = solve_qk_mha(&wq, &wk, &i, &i, 2, DEFAULT_DAMPING).unwrap();
    let clover = lowrank_core::baselines::clover_qk(&wq, &wk, 2).unwrap();
    assert!((a3.objective - clover.objective).abs() < 1e-9 * clover.objective);
}

#[test]
fn whitened_layer_beats_plain_svd_on_output_error() {
    for seed in 0..5 {
        let mut rng = seeded(700 + seed);
        let w = weights(&mut rng, 8, 6);
        let r = nonwhite(&mut rng, 8, 200.0);
        let (a, b) = whitened_svd_layer(&w, &r, 2, DEFAULT_DAMPING).unwrap();
        let (c, d) = plain_svd_layer(&w, 2).unwrap();
        let dw = w.sub(&a.matmul(&b).unwrap()).unwrap();
        let dp = w.sub(&c.matmul(&d).unwrap()).unwrap();
        let mw = linear_output_error_mc(&dw, &r, 50_000, seed).unwrap();
        let mp = linear_output_error_mc(&dp, &r, 50_000, seed).unwrap();
        // paired comparison on the same draws
        assert!(mw.mean <= mp.mean, "seed {seed}: {} > {}", mw.mean, mp.mean);
        assert!(linear_output_objective(&r, &dw).unwrap() <= linear_output_objective(&r, &dp).unwrap());
    }
}

#[test]
fn whitening_recoding_leaves_optimum_unchanged() {
    // x -> x T changes R to T^T R T; the weights absorb T^-1
    for seed in 0..5 {
        let mut rng = seeded(800 + seed);
        let (wq, wk) = (weights(&mut rng, 6, 4), weights(&mut rng, 6, 4));
        let (rq, rk) = (nonwhite(&mut rng, 6, 50.0), nonwhite(&mut rng, 6, 50.0));
        let t = weights(&mut rng, 6, 6).add(&Matrix::identity(6)).unwrap();
        let u = weights(&mut rng, 6, 6).add(&Matrix::identity(6)).unwrap();
        let t_inv = inverse(&t);
        let u_inv = inverse(&u);
        let base = solve_qk_mha(&wq, &wk, &rq, &rk, 2, 0.0).unwrap();
        let rq2 = t.t_matmul(&rq.matmul(&t).unwrap()).unwrap().symmetrized();
        let rk2 = u.t_matmul(&rk.matmul(&u).unwrap()).unwrap().symmetrized();
        let wq2 = t_inv.matmul(&wq).unwrap();
        let wk2 = u_inv.matmul(&wk).unwrap();
        let moved = solve_qk_mha(&wq2, &wk2, &rq2, &rk2, 2, 0.0).unwrap();
        let rel = (base.objective - moved.objective).abs() / base.objective;
        assert!(rel < 1e-8, "seed {seed}: relative change {rel}");
    }
}

fn inverse(m: &Matrix) -> Matrix {
    let f = lowrank_core::tensor::svd(m).unwrap();
    let inv_s: Vec<f64> = f.s.iter().map(|s| 1.0 / s).collect();
    f.vt.transpose().scale_columns(&inv_s).matmul(&f.u.transpose()).unwrap()
}

#[test]
fn root_products_match_trace_form() {
    let mut rng = seeded(900);
    let (rq, rk) = (nonwhite(&mut rng, 5, 10.0), nonwhite(&mut rng, 5, 10.0));
    let d = weights(&mut rng, 5, 5);
    let sq = psd_sqrt(&rq, 0.0).unwrap();
    let sk = psd_sqrt(&rk, 0.0).unwrap();
    let a = sq.matmul(&d).unwrap().matmul(&sk).unwrap().frobenius_sq();
    let trace = rq.matmul(&d).unwrap().matmul(&rk).unwrap().matmul_t(&d).unwrap().trace();
    assert!((a - trace).abs() < 1e-12 * trace);
}
