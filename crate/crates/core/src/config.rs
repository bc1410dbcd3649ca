//! Declarative experiment configuration (TOML).
//!
//! Relative paths resolve against the directory holding the config file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::pipeline::PipelineError;
use crate::probe::{Centering, ProbeParams};
use crate::selection::SelectionConfig;
use crate::stats::{Comparison, ControlPool};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub name: String,
    pub aggregate: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossPair {
    pub a: String,
    pub lang_a: String,
    pub b: String,
    pub lang_b: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlapConfig {
    #[serde(default)]
    pub pairs: Vec<(String, String)>,
    /// Two or three conditions for the Euler region table.
    #[serde(default)]
    pub regions: Vec<String>,
    #[serde(default = "default_degree")]
    pub max_degree: usize,
    #[serde(default)]
    pub skip_empty: bool,
    #[serde(default)]
    pub cross: Vec<CrossPair>,
    /// When set, a matched random control is written next to every partition set.
    pub controls_seed: Option<u64>,
    #[serde(default)]
    pub control_pool: ControlPool,
}

fn default_degree() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub typology: PathBuf,
    /// Condition whose aggregate provides mean activations.
    pub condition: String,
    /// Conditions whose partition defines the probed subsets.
    pub partition: Option<(String, String)>,
    /// Layers to probe; all when absent.
    pub layers: Option<Vec<u32>>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    pub seed: Option<u64>,
    #[serde(default)]
    pub centering: Centering,
    #[serde(default = "default_block")]
    pub block_size: usize,
}

fn default_lambda() -> f64 {
    1.0
}

fn default_folds() -> usize {
    5
}

fn default_block() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionConfig {
    pub records: PathBuf,
    #[serde(default)]
    pub comparisons: Vec<Comparison>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub experiment: String,
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses the rayon default.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub conditions: Vec<Condition>,
    pub overlap: Option<OverlapConfig>,
    pub probe: Option<ProbeConfig>,
    pub intervention: Option<InterventionConfig>,
    #[serde(skip)]
    pub base_dir: PathBuf,
    #[serde(skip)]
    pub source_bytes: Vec<u8>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| PipelineError::Validation(format!("config: {e}")))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.source_bytes = text.as_bytes().to_vec();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn condition(&self, name: &str) -> Result<&Condition, PipelineError> {
        self.conditions
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| PipelineError::Validation(format!("unknown condition {name:?}")))
    }

    pub fn probe_params(&self) -> Result<ProbeParams, PipelineError> {
        let p = self
            .probe
            .as_ref()
            .ok_or_else(|| PipelineError::Validation("config has no [probe] section".into()))?;
        let seed = p
            .seed
            .ok_or_else(|| PipelineError::Validation("probe.seed must be set explicitly".into()))?;
        Ok(ProbeParams {
            lambda: p.lambda,
            folds: p.folds,
            seed,
            centering: p.centering,
            block_size: p.block_size,
        })
    }

    fn require_path(&self, what: &str, p: &Path) -> Result<(), PipelineError> {
        let full = self.resolve(p);
        if full.exists() {
            Ok(())
        } else {
            Err(PipelineError::Validation(format!("{what} path {} does not exist", full.display())))
        }
    }

    /// Checks names, referenced paths and explicit seeds.
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.selection
            .validate()
            .map_err(|e| PipelineError::Validation(e.to_string()))?;
        let mut names = BTreeSet::new();
        for c in &self.conditions {
            if !names.insert(c.name.as_str()) {
                return Err(PipelineError::Validation(format!("duplicate condition {:?}", c.name)));
            }
            if c.name.is_empty() || c.name.contains(['/', '\\']) {
                return Err(PipelineError::Validation(format!("bad condition name {:?}", c.name)));
            }
            self.require_path(&format!("condition {:?} aggregate", c.name), &c.aggregate)?;
        }
        if let Some(o) = &self.overlap {
            for (a, b) in &o.pairs {
                self.condition(a)?;
                self.condition(b)?;
            }
            if !o.regions.is_empty() && !(2..=3).contains(&o.regions.len()) {
                return Err(PipelineError::Validation("overlap.regions needs 2 or 3 conditions".into()));
            }
            for r in &o.regions {
                self.condition(r)?;
            }
            for c in &o.cross {
                self.condition(&c.a)?;
                self.condition(&c.b)?;
            }
            if o.max_degree == 0 {
                return Err(PipelineError::Validation("overlap.max_degree must be >= 1".into()));
            }
        }
        if let Some(p) = &self.probe {
            self.require_path("probe typology", &p.typology)?;
            self.condition(&p.condition)?;
            if let Some((a, b)) = &p.partition {
                self.condition(a)?;
                self.condition(b)?;
            }
            self.probe_params()?;
        }
        if let Some(i) = &self.intervention {
            self.require_path("intervention records", &i.records)?;
        }
        Ok(())
    }
}
