//! In-process pipeline: every command is a pure function of the run config
//! and its input artifacts.

use lowrank_core::calibration::{collect_concat_stats, collect_layer_stats, FinalStats, GaussianSource};
use lowrank_core::harness::{
    accounting, compress_layer, compress_layer_calibrated, count_layer_params, functional_errors,
    measured_kv_elements, mixed_rank_allocate, objective_curves, Accounting, AccountingOptions, Component,
    ComponentObjectives, CompressionPlan, Counts, LayerErrors, LayerPlan, Method,
};
use lowrank_core::model::{ActivationBatch, LayerWeights, ModelConfig};
use lowrank_core::rng::{derive_seed, seeded};
use lowrank_core::solver_ov::OvVariant;
use lowrank_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::store::{Dtype, TensorStore};

const TAG_WEIGHTS: u64 = 1_000;
const TAG_SOURCE: u64 = 2_000;
const TAG_CALIBRATION: u64 = 3_000;
const TAG_HELD_OUT: u64 = 4_000;

/// A stack of independent layers sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<LayerWeights>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stats {
    pub layers: Vec<FinalStats>,
    /// Concatenated-head statistic, present for the overall value variant.
    pub p_cat: Vec<Option<Matrix>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compressed {
    pub model: Model,
    pub plan: CompressionPlan,
    pub objectives: Vec<ComponentObjectives>,
}

fn matrices_mut(w: &mut LayerWeights) -> impl Iterator<Item = &mut Matrix> {
    w.wq.iter_mut()
        .chain(w.wk.iter_mut())
        .chain(w.wv.iter_mut())
        .chain(w.wo.iter_mut())
        .chain(std::iter::once(&mut w.wu))
        .chain(w.wg.iter_mut())
        .chain(std::iter::once(&mut w.wd))
}

pub fn generate(cfg: &RunConfig) -> Result<Model> {
    let config = cfg.model_config();
    let layers = (0..cfg.model.n_layers)
        .map(|l| {
            let mut w = LayerWeights::random(&config, &mut seeded(derive_seed(cfg.seed, TAG_WEIGHTS + l as u64)))?;
            if cfg.model.weight_dtype == Dtype::F32 {
                for m in matrices_mut(&mut w) {
                    *m = m.map(|v| v as f32 as f64);
                }
            }
            Ok(w)
        })
        .collect::<Result<_>>()?;
    Ok(Model { config, layers })
}

fn source(cfg: &RunConfig, layer: usize) -> Result<GaussianSource> {
    let mut rng = seeded(derive_seed(cfg.seed, TAG_SOURCE + layer as u64));
    Ok(GaussianSource::new(&mut rng, cfg.model.d_model, cfg.calibration.covariance_decay)?)
}

fn draw(cfg: &RunConfig, layer: usize, tag: u64, count: usize, tokens: usize) -> Result<Vec<ActivationBatch>> {
    let src = source(cfg, layer)?;
    let mut rng = seeded(derive_seed(cfg.seed, tag + layer as u64));
    Ok((0..count).map(|_| src.sample_batch(&mut rng, tokens)).collect())
}

/// Calibration hidden states of `layer`.
pub fn calibration_batches(cfg: &RunConfig, layer: usize) -> Result<Vec<ActivationBatch>> {
    let c = &cfg.calibration;
    draw(cfg, layer, TAG_CALIBRATION, c.batches, c.tokens_per_batch)
}

/// Evaluation hidden states of `layer`: same distribution, independent draws.
pub fn held_out_batches(cfg: &RunConfig, layer: usize) -> Result<Vec<ActivationBatch>> {
    let e = &cfg.evaluation;
    draw(cfg, layer, TAG_HELD_OUT, e.held_out_batches, e.tokens_per_batch)
}

fn check_model(cfg: &RunConfig, model: &Model) -> Result<()> {
    if model.config != cfg.model_config() || model.layers.len() != cfg.model.n_layers {
        return Err(CliError::Config("model store does not match the [model] section of the config".into()));
    }
    Ok(())
}

pub fn calibrate(cfg: &RunConfig, model: &Model) -> Result<Stats> {
    check_model(cfg, model)?;
    let overall = cfg.compression.ov_variant == OvVariant::Overall;
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut p_cat = Vec::with_capacity(model.layers.len());
    for (l, w) in model.layers.iter().enumerate() {
        let batches = calibration_batches(cfg, l)?;
        layers.push(collect_layer_stats(w, &model.config, &batches, None)?.finalize()?);
        p_cat.push(if overall {
            Some(collect_concat_stats(w, &model.config, &batches)?.finalize()?)
        } else {
            None
        });
    }
    Ok(Stats { layers, p_cat })
}

/// With `recalibrate_after_qk` the calibration batches are regenerated from
/// the seed so the value-side statistics can follow the compressed QK.
pub fn compress(cfg: &RunConfig, model: &Model, stats: &Stats, plan: &CompressionPlan) -> Result<Compressed> {
    check_model(cfg, model)?;
    let opts = cfg.compress_options();
    plan.validate(&model.config, opts.ov_variant)?;
    if plan.layers.len() != model.layers.len() || stats.layers.len() != model.layers.len() {
        return Err(CliError::Config("plan, statistics and model disagree on the layer count".into()));
    }
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut objectives = Vec::with_capacity(model.layers.len());
    for (l, w) in model.layers.iter().enumerate() {
        let out = if opts.recalibrate_after_qk {
            compress_layer_calibrated(w, &model.config, &calibration_batches(cfg, l)?, &plan.layers[l], &opts)?
        } else {
            compress_layer(w, &model.config, &stats.layers[l], stats.p_cat[l].as_ref(), &plan.layers[l], &opts)?
        };
        layers.push(out.weights);
        objectives.push(out.objectives);
    }
    Ok(Compressed {
        model: Model {
            config: model.config.clone(),
            layers,
        },
        plan: plan.clone(),
        objectives,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub index: usize,
    pub plan: LayerPlan,
    pub objectives: ComponentObjectives,
    pub errors: LayerErrors,
    /// Stored scalars of the compressed attention and MLP weights.
    pub stored_attention_params: u64,
    pub stored_mlp_params: u64,
    /// Cached scalars per token observed in a forward pass.
    pub measured_kv_elements: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub removed_fraction: f64,
    pub removed_fraction_with_embeddings: f64,
    pub mean_score_rel: f64,
    pub mean_output_rel: f64,
    pub mean_mlp_rel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountingReport {
    pub before: Counts,
    pub after: Counts,
    pub embedding_params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub summary: Summary,
    pub accounting: AccountingReport,
    pub layers: Vec<LayerReport>,
}

impl Report {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    /// One row per layer and metric.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| CliError::Io(e.to_string());
        w.write_record(["layer", "metric", "value"]).map_err(err)?;
        for l in &self.layers {
            let e = &l.errors;
            let o = &l.objectives;
            for (name, v) in [
                ("objective_qk", o.qk),
                ("objective_ov", o.ov),
                ("objective_mlp", o.mlp),
                ("score_mse", e.score_mse),
                ("output_mse", e.output_mse),
                ("mlp_mse", e.mlp_mse),
                ("score_rel", e.score_rel),
                ("output_rel", e.output_rel),
                ("mlp_rel", e.mlp_rel),
            ] {
                w.write_record([l.index.to_string(), name.to_string(), v.to_string()]).map_err(err)?;
            }
        }
        String::from_utf8(w.into_inner().map_err(|e| CliError::Io(e.to_string()))?).map_err(|e| CliError::Io(e.to_string()))
    }
}

fn accounting_options(cfg: &RunConfig) -> AccountingOptions {
    let e = &cfg.evaluation;
    AccountingOptions {
        element_size: e.element_size,
        context_len: e.context_len,
        vocab_size: e.vocab_size,
        ov_variant: cfg.compression.ov_variant,
    }
}

pub fn evaluate(cfg: &RunConfig, original: &Model, compressed: &Compressed) -> Result<Report> {
    check_model(cfg, original)?;
    if compressed.model.config != original.config || compressed.model.layers.len() != original.layers.len() {
        return Err(CliError::Numerical("compressed store does not match the model".into()));
    }
    let mut layers = Vec::with_capacity(original.layers.len());
    for (l, (w, c)) in original.layers.iter().zip(&compressed.model.layers).enumerate() {
        let batches = held_out_batches(cfg, l)?;
        let (attn, mlp) = count_layer_params(c);
        layers.push(LayerReport {
            index: l,
            plan: compressed.plan.layers[l],
            objectives: compressed.objectives[l],
            errors: functional_errors(w, c, &original.config, &batches)?,
            stored_attention_params: attn,
            stored_mlp_params: mlp,
            measured_kv_elements: measured_kv_elements(c, &original.config, &batches[0])? as u64,
        });
    }
    let acc: Accounting = accounting(&original.config, &compressed.plan, &accounting_options(cfg));
    let n = layers.len() as f64;
    let mean = |f: fn(&LayerErrors) -> f64| layers.iter().map(|l| f(&l.errors)).sum::<f64>() / n;
    Ok(Report {
        summary: Summary {
            removed_fraction: acc.removed_fraction(),
            removed_fraction_with_embeddings: acc.removed_fraction_with_embeddings(),
            mean_score_rel: mean(|e| e.score_rel),
            mean_output_rel: mean(|e| e.output_rel),
            mean_mlp_rel: mean(|e| e.mlp_rel),
        },
        accounting: AccountingReport {
            before: acc.before,
            after: acc.after,
            embedding_params: acc.embedding_params,
        },
        layers,
    })
}

/// Greedy mixed-rank plan removing `allocation.ratio` of the parameters.
pub fn allocate(cfg: &RunConfig, model: &Model, stats: &Stats) -> Result<CompressionPlan> {
    check_model(cfg, model)?;
    let opts = cfg.compress_options();
    let curves = model
        .layers
        .iter()
        .zip(&stats.layers)
        .map(|(w, s)| objective_curves(w, &model.config, s, &opts))
        .collect::<lowrank_core::Result<Vec<_>>>()?;
    let full = CompressionPlan::full(&model.config, model.layers.len());
    let before = accounting(&model.config, &full, &AccountingOptions::default()).before.params();
    let budget = ((1.0 - cfg.allocation.ratio) * before as f64).floor() as u64;
    Ok(mixed_rank_allocate(
        &model.config,
        &curves,
        budget,
        cfg.allocation.granularity,
        &cfg.allocation.components,
    )?)
}

/// One row per layer and rank of `component`, other components at full
/// rank, with the closed-form objective and held-out errors.
pub fn sweep(cfg: &RunConfig, model: &Model, stats: &Stats, component: Component) -> Result<String> {
    check_model(cfg, model)?;
    let c = &model.config;
    let (full, step) = match component {
        Component::Qk => (c.qk_head_dim, if c.rope { 2 } else { 1 }),
        Component::Ov => (c.vo_head_dim, 1),
        Component::Mlp => (c.d_inter, 1),
    };
    let methods = (cfg.compression.qk_method, cfg.compression.ov_method, cfg.compression.mlp_method);
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record(["layer", "component", "rank", "objective", "score_mse", "output_mse", "mlp_mse"])
        .map_err(err)?;
    let held_out = (0..model.layers.len()).map(|l| held_out_batches(cfg, l)).collect::<Result<Vec<_>>>()?;
    for r in (step..=full).step_by(step) {
        let mut plan = CompressionPlan::full(c, model.layers.len()).with_methods(
            if component == Component::Qk { methods.0 } else { Method::A3 },
            if component == Component::Ov { methods.1 } else { Method::A3 },
            if component == Component::Mlp { methods.2 } else { Method::A3 },
        );
        for l in &mut plan.layers {
            match component {
                Component::Qk => l.r_qk = r,
                Component::Ov => l.r_vo = r,
                Component::Mlp => l.r_mlp = r,
            }
        }
        let out = compress(cfg, model, stats, &plan)?;
        for (l, layer) in out.model.layers.iter().enumerate() {
            let e = functional_errors(&model.layers[l], layer, c, &held_out[l])?;
            let o = out.objectives[l];
            let objective = match component {
                Component::Qk => o.qk,
                Component::Ov => o.ov,
                Component::Mlp => o.mlp,
            };
            w.write_record([
                l.to_string(),
                component.name().to_string(),
                r.to_string(),
                objective.to_string(),
                e.score_mse.to_string(),
                e.output_mse.to_string(),
                e.mlp_mse.to_string(),
            ])
            .map_err(err)?;
        }
    }
    String::from_utf8(w.into_inner().map_err(|e| CliError::Io(e.to_string()))?).map_err(|e| CliError::Io(e.to_string()))
}

// ---- store conversions ----

fn layer_key(l: usize, name: &str) -> String {
    format!("layer{l}.{name}")
}

fn put_weights(store: &mut TensorStore, model: &Model, dtype: Dtype) -> Result<()> {
    store.set_attr("config", &model.config)?;
    store.set_attr("n_layers", model.layers.len())?;
    for (l, w) in model.layers.iter().enumerate() {
        for (name, list) in [("wq", &w.wq), ("wk", &w.wk), ("wv", &w.wv), ("wo", &w.wo)] {
            for (h, m) in list.iter().enumerate() {
                store.insert(layer_key(l, &format!("{name}.{h}")), dtype, m)?;
            }
        }
        store.insert(layer_key(l, "wu"), dtype, &w.wu)?;
        if let Some(g) = &w.wg {
            store.insert(layer_key(l, "wg"), dtype, g)?;
        }
        store.insert(layer_key(l, "wd"), dtype, &w.wd)?;
        store.set_attr(&layer_key(l, "qk_freq_indices"), &w.qk_freq_indices)?;
    }
    Ok(())
}

fn take_weights(store: &TensorStore) -> Result<Model> {
    let config: ModelConfig = store.attr("config")?;
    let n: usize = store.attr("n_layers")?;
    let mut layers = Vec::with_capacity(n);
    for l in 0..n {
        let list = |name: &str, count: usize| {
            (0..count)
                .map(|h| store.get(&layer_key(l, &format!("{name}.{h}"))).cloned())
                .collect::<Result<Vec<_>>>()
        };
        let wg_key = layer_key(l, "wg");
        let w = LayerWeights {
            wq: list("wq", config.n_query_heads)?,
            wk: list("wk", config.n_kv_heads)?,
            wv: list("wv", config.n_kv_heads)?,
            wo: list("wo", config.n_query_heads)?,
            wu: store.get(&layer_key(l, "wu"))?.clone(),
            wg: store.dtype(&wg_key).map(|_| store.get(&wg_key).cloned()).transpose()?,
            wd: store.get(&layer_key(l, "wd"))?.clone(),
            qk_freq_indices: store.attr(&layer_key(l, "qk_freq_indices"))?,
        };
        w.validate(&config).map_err(|e| CliError::Io(format!("layer {l}: {e}")))?;
        layers.push(w);
    }
    Ok(Model { config, layers })
}

pub fn model_to_store(model: &Model, dtype: Dtype) -> Result<TensorStore> {
    let mut s = TensorStore::new("model");
    put_weights(&mut s, model, dtype)?;
    Ok(s)
}

pub fn model_from_store(store: &TensorStore) -> Result<Model> {
    take_weights(&store.clone().expect_kind("model")?)
}

pub fn stats_to_store(stats: &Stats) -> Result<TensorStore> {
    let mut s = TensorStore::new("stats");
    s.set_attr("n_layers", stats.layers.len())?;
    for (l, st) in stats.layers.iter().enumerate() {
        s.insert(layer_key(l, "r_qq"), Dtype::F64, &st.r_qq)?;
        s.insert(layer_key(l, "r_kv"), Dtype::F64, &st.r_kv)?;
        for (i, p) in st.r_p.iter().enumerate() {
            s.insert(layer_key(l, &format!("r_p.{i}")), Dtype::F64, p)?;
        }
        s.insert(layer_key(l, "r_d"), Dtype::F64, &st.r_d)?;
        if let Some(p) = &stats.p_cat[l] {
            s.insert(layer_key(l, "r_p_cat"), Dtype::F64, p)?;
        }
    }
    s.set_attr("heads", stats.layers.first().map_or(0, |s| s.r_p.len()))?;
    Ok(s)
}

pub fn stats_from_store(store: &TensorStore) -> Result<Stats> {
    let store = store.clone().expect_kind("stats")?;
    let n: usize = store.attr("n_layers")?;
    let heads: usize = store.attr("heads")?;
    let mut layers = Vec::with_capacity(n);
    let mut p_cat = Vec::with_capacity(n);
    for l in 0..n {
        layers.push(FinalStats {
            r_qq: store.get(&layer_key(l, "r_qq"))?.clone(),
            r_kv: store.get(&layer_key(l, "r_kv"))?.clone(),
            r_p: (0..heads)
                .map(|i| store.get(&layer_key(l, &format!("r_p.{i}"))).cloned())
                .collect::<Result<_>>()?,
            r_d: store.get(&layer_key(l, "r_d"))?.clone(),
        });
        let key = layer_key(l, "r_p_cat");
        p_cat.push(store.dtype(&key).map(|_| store.get(&key).cloned()).transpose()?);
    }
    Ok(Stats { layers, p_cat })
}

pub fn compressed_to_store(c: &Compressed) -> Result<TensorStore> {
    let mut s = TensorStore::new("compressed");
    put_weights(&mut s, &c.model, Dtype::F64)?;
    s.set_attr("plan", &c.plan)?;
    s.set_attr("objectives", &c.objectives)?;
    Ok(s)
}

pub fn compressed_from_store(store: &TensorStore) -> Result<Compressed> {
    let store = store.clone().expect_kind("compressed")?;
    Ok(Compressed {
        model: take_weights(&store)?,
        plan: store.attr("plan")?,
        objectives: store.attr("objectives")?,
    })
}

/// Everything from generation to the evaluation report, without touching
/// the file system.
pub fn run_in_process(cfg: &RunConfig) -> Result<(Compressed, Report)> {
    let model = generate(cfg)?;
    let stats = calibrate(cfg, &model)?;
    let compressed = compress(cfg, &model, &stats, &cfg.plan()?)?;
    let report = evaluate(cfg, &model, &compressed)?;
    Ok((compressed, report))
}
