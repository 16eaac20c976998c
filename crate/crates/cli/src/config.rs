//! Run configuration. Values come from the built-in defaults, then an
//! optional TOML file, then `key.path=value` overrides from the command line.

use std::path::Path;

use lowrank_core::harness::{Component, CompressOptions, CompressionPlan, LayerPlan, Method};
use lowrank_core::model::{MlpVariant, ModelConfig};
use lowrank_core::solver_mlp::ScaleMode;
use lowrank_core::solver_ov::{OvVariant, DEFAULT_OVERALL_LIMIT};
use lowrank_core::solver_qk::FactorSplit;
use lowrank_core::tensor::DEFAULT_DAMPING;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, Result};
use crate::store::Dtype;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub calibration: CalibrationSection,
    pub compression: CompressionSection,
    pub evaluation: EvaluationSection,
    pub allocation: AllocationSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_query_heads: usize,
    pub n_kv_heads: usize,
    pub qk_head_dim: usize,
    pub vo_head_dim: usize,
    pub d_inter: usize,
    pub rope: bool,
    pub rope_theta: f64,
    pub mlp: MlpVariant,
    pub scale_with_reduced_dim: bool,
    /// On-disk precision of generated weights.
    pub weight_dtype: Dtype,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub batches: usize,
    pub tokens_per_batch: usize,
    /// Largest-to-smallest eigenvalue ratio of the hidden-state covariance.
    pub covariance_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressionSection {
    /// Fraction of every component's rank removed; ignored when `plan` is set.
    pub ratio: f64,
    pub plan: Option<Vec<LayerPlan>>,
    pub qk_method: Method,
    pub ov_method: Method,
    pub mlp_method: Method,
    pub damping: f64,
    pub scale_mode: ScaleMode,
    pub factor_split: FactorSplit,
    pub ov_variant: OvVariant,
    pub overall_limit: usize,
    pub recalibrate_after_qk: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub held_out_batches: usize,
    pub tokens_per_batch: usize,
    pub element_size: u64,
    pub context_len: u64,
    pub vocab_size: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AllocationSection {
    /// Fraction of attention+MLP parameters to remove.
    pub ratio: f64,
    pub granularity: usize,
    pub components: Vec<Component>,
}


impl Default for ModelSection {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            n_query_heads: 4,
            n_kv_heads: 2,
            qk_head_dim: 8,
            vo_head_dim: 8,
            d_inter: 64,
            rope: true,
            rope_theta: 10_000.0,
            mlp: MlpVariant::GatedSilu,
            scale_with_reduced_dim: false,
            weight_dtype: Dtype::F64,
        }
    }
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            batches: 8,
            tokens_per_batch: 64,
            covariance_decay: 100.0,
        }
    }
}

impl Default for CompressionSection {
    fn default() -> Self {
        Self {
            ratio: 0.2,
            plan: None,
            qk_method: Method::A3,
            ov_method: Method::A3,
            mlp_method: Method::A3,
            damping: DEFAULT_DAMPING,
            scale_mode: ScaleMode::None,
            factor_split: FactorSplit::SigmaRight,
            ov_variant: OvVariant::PerHead,
            overall_limit: DEFAULT_OVERALL_LIMIT,
            recalibrate_after_qk: false,
        }
    }
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            held_out_batches: 4,
            tokens_per_batch: 64,
            element_size: 2,
            context_len: 2048,
            vocab_size: 0,
        }
    }
}

impl Default for AllocationSection {
    fn default() -> Self {
        Self {
            ratio: 0.2,
            granularity: 1,
            components: Component::ALL.to_vec(),
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid with `file` (if any), overlaid with `overrides`.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| crate::store::io_at(p, e))?;
                text.parse::<Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            d_model: m.d_model,
            n_query_heads: m.n_query_heads,
            n_kv_heads: m.n_kv_heads,
            qk_head_dim: m.qk_head_dim,
            vo_head_dim: m.vo_head_dim,
            d_inter: m.d_inter,
            rope: m.rope,
            rope_theta: m.rope_theta,
            mlp: m.mlp,
            scale_with_reduced_dim: m.scale_with_reduced_dim,
        }
    }

    pub fn compress_options(&self) -> CompressOptions {
        let c = &self.compression;
        CompressOptions {
            damping: c.damping,
            scale_mode: c.scale_mode,
            factor_split: c.factor_split,
            ov_variant: c.ov_variant,
            overall_limit: c.overall_limit,
            recalibrate_after_qk: c.recalibrate_after_qk,
        }
    }

    /// Explicit plan if given, otherwise the uniform plan for `ratio`.
    pub fn plan(&self) -> Result<CompressionPlan> {
        let cfg = self.model_config();
        let c = &self.compression;
        let plan = match &c.plan {
            Some(layers) => CompressionPlan { layers: layers.clone() },
            None => lowrank_core::harness::ratio_to_ranks(&cfg, self.model.n_layers, c.ratio)?
                .with_methods(c.qk_method, c.ov_method, c.mlp_method),
        };
        if plan.layers.len() != self.model.n_layers {
            return Err(CliError::Config(format!(
                "plan has {} layers, model has {}",
                plan.layers.len(),
                self.model.n_layers
            )));
        }
        plan.validate(&cfg, c.ov_variant)?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let positive = [
            ("model.n_layers", self.model.n_layers),
            ("calibration.batches", self.calibration.batches),
            ("calibration.tokens_per_batch", self.calibration.tokens_per_batch),
            ("evaluation.held_out_batches", self.evaluation.held_out_batches),
            ("evaluation.tokens_per_batch", self.evaluation.tokens_per_batch),
            ("allocation.granularity", self.allocation.granularity),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CliError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.calibration.covariance_decay >= 1.0) {
            return Err(CliError::Config("calibration.covariance_decay must be at least 1".into()));
        }
        if !(self.compression.damping >= 0.0) {
            return Err(CliError::Config("compression.damping must be non-negative".into()));
        }
        for (name, r) in [("compression.ratio", self.compression.ratio), ("allocation.ratio", self.allocation.ratio)] {
            if !(0.0..1.0).contains(&r) {
                return Err(CliError::Config(format!("{name} must lie in [0, 1), got {r}")));
            }
        }
        if self.compression.ov_variant == OvVariant::Overall && self.model.n_kv_heads != self.model.n_query_heads {
            return Err(CliError::Config("the overall value variant needs n_kv_heads == n_query_heads".into()));
        }
        Ok(())
    }
}

/// `a.b.c=value`; the value is read as a TOML literal and falls back to a
/// bare string.
fn apply_override(table: &mut Table, text: &str) -> Result<()> {
    let (path, raw) = text
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{text}` is not key=value")))?;
    let value = format!("v = {}", raw.trim())
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields one item");
    let mut cur = table;
    for k in parents {
        cur = cur
            .entry(k.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{k}` in `{path}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 1").is_err());
        assert!(RunConfig::from_toml("[model]\nheads = 2").is_err());
    }

    #[test]
    fn odd_rotary_head_dim_is_rejected() {
        let e = RunConfig::from_toml("[model]\nqk_head_dim = 7").unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn overrides_beat_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "seed = 5\n[compression]\nratio = 0.5\nqk_method = \"abs_w\"\n").unwrap();
        let c = RunConfig::load(Some(&p), &["compression.ratio=0.25".into(), "compression.ov_method=wanda".into()]).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.compression.ratio, 0.25);
        assert_eq!(c.compression.qk_method, Method::AbsW);
        assert_eq!(c.compression.ov_method, Method::Wanda);
        assert_eq!(c.calibration, CalibrationSection::default());
    }

    #[test]
    fn malformed_override_is_a_config_error() {
        assert_eq!(RunConfig::load(None, &["seed".into()]).unwrap_err().exit_code(), 2);
        assert_eq!(RunConfig::load(None, &["seed.x=1".into()]).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn plan_follows_ratio_or_explicit_layers() {
        let c = RunConfig::default();
        let p = c.plan().unwrap();
        assert_eq!((p.layers[0].r_qk, p.layers[0].r_vo, p.layers[0].r_mlp), (6, 6, 51));
        let explicit = RunConfig::from_toml(
            "[model]\nn_layers = 1\n[[compression.plan]]\nr_qk = 4\nr_vo = 2\nr_mlp = 10\n",
        )
        .unwrap();
        assert_eq!(explicit.plan().unwrap().layers[0].r_vo, 2);
        let bad = RunConfig::from_toml("[[compression.plan]]\nr_qk = 4\nr_vo = 2\nr_mlp = 10\n").unwrap();
        assert!(bad.plan().is_err());
    }
}
