//! Run configuration: defaults, a TOML document merged over them, then flag
//! overrides.

use std::path::Path;

use cir2_core::data::Vocab;
use cir2_core::pipeline::PipelineConfig;
use cir2_core::rerank::AblationVariant;
use cir2_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    /// Cutoffs for `sweep-k` and `eval --sweep-k`.
    pub sweep_ks: Vec<usize>,
    /// Re-ranker seeds for `ablate`.
    pub ablation_seeds: Vec<u64>,
    /// Variants for `ablate`.
    pub ablation_variants: Vec<AblationVariant>,
    /// Queries measured in timing mode (one extra warm-up query runs first).
    pub timing_queries: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            pipeline: PipelineConfig::default(),
            sweep_ks: vec![10, 25, 50, 100],
            ablation_seeds: vec![0, 1, 2],
            ablation_variants: AblationVariant::ALL.to_vec(),
            timing_queries: 64,
        }
    }
}

/// Recursively overlays `over` onto `base`.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Flag overrides applied after the document.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub variant: Option<AblationVariant>,
    pub corpus_size: Option<usize>,
}

impl RunConfig {
    /// Defaults, then the document at `path` (any subset of keys), then
    /// `overrides`.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text)?
            }
        };
        if let Some(seed) = overrides.seed {
            cfg.pipeline = cfg.pipeline.with_seed(seed);
        }
        if let Some(k) = overrides.k {
            cfg.pipeline.k = k;
        }
        if let Some(v) = overrides.variant {
            cfg.pipeline.rerank_model.variant = v;
        }
        if let Some(m) = overrides.corpus_size {
            cfg.pipeline.benchmark.corpus.num_items = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let over: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base = toml::Value::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, over);
        base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.pipeline.benchmark.corpus;
        let capacity = (c.values_per_slot as f64).powi(c.num_slots as i32);
        if 2.0 * c.num_items as f64 > capacity {
            return Err(Error::Config(format!(
                "corpus size {} is infeasible: train and validation need {} distinct bundles but only {} exist",
                c.num_items,
                2 * c.num_items,
                capacity
            )));
        }
        let vocab = Vocab::new(c.num_slots, c.values_per_slot);
        if self.pipeline.filter_model.vocab < vocab.size() {
            return Err(Error::Config("model vocabulary smaller than the corpus vocabulary".into()));
        }
        if self.sweep_ks.is_empty() || self.sweep_ks.contains(&0) {
            return Err(Error::Config("sweep_ks must be non-empty positive cutoffs".into()));
        }
        if self.timing_queries == 0 {
            return Err(Error::Config("timing_queries must be positive".into()));
        }
        self.pipeline.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_document_overlays_defaults() {
        let cfg = RunConfig::from_toml("[pipeline]\nk = 7\n[pipeline.rerank_train]\nepochs = 2\n").unwrap();
        assert_eq!(cfg.pipeline.k, 7);
        assert_eq!(cfg.pipeline.rerank_train.epochs, 2);
        assert_eq!(cfg.pipeline.rerank_train.batch_size, RunConfig::default().pipeline.rerank_train.batch_size);
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_documents_are_config_errors() {
        assert!(matches!(RunConfig::from_toml("[pipeline\n"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_toml("[pipeline]\nk = \"many\"\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn overrides_apply_last() {
        let o = Overrides {
            seed: Some(9),
            k: Some(20),
            variant: Some(AblationVariant::WithoutZt),
            corpus_size: None,
        };
        let cfg = RunConfig::resolve(None, &o).unwrap();
        assert_eq!(cfg.pipeline.benchmark.seed, 9);
        assert_eq!(cfg.pipeline.filter_train.seed, 9);
        assert_eq!(cfg.pipeline.k, 20);
        assert_eq!(cfg.pipeline.rerank_model.variant, AblationVariant::WithoutZt);
        let o = Overrides {
            corpus_size: Some(200_000),
            ..Overrides::default()
        };
        assert!(matches!(RunConfig::resolve(None, &o), Err(Error::Config(_))));
    }
}
