//! Identification of language-associated units from activation counts.
//!
//! Both modes start from the per-language activation probability of every
//! unit and the entropy of that vector after ℓ1 normalisation. Raw neurons go
//! through a global percentile filter followed by a lowest-entropy cut. SAE
//! latents go through example-rate and token-rate gates and a relative
//! membership rule.

use std::collections::BTreeSet;
use std::io::Write;

use indexmap::IndexMap;
use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{ActivationAggregate, UnitId, UnitKind};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("invalid selection config: {0}")]
    Config(String),
    #[error("expected a {expected} aggregate, got {found}")]
    WrongKind { expected: UnitKind, found: UnitKind },
    #[error("no unit survives the {threshold} activation-probability filter")]
    NoSurvivors { threshold: f64 },
    #[error("profiles and aggregate disagree: {0}")]
    Mismatch(String),
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageActivationProfile {
    pub unit: UnitId,
    /// Activation probability per language, in manifest order.
    pub probs: Vec<f64>,
    /// ℓ1-normalised `probs`; `None` when every probability is zero.
    pub normalized: Option<Vec<f64>>,
    /// Entropy in nats; `+inf` for invalid units.
    pub entropy: f64,
}

impl LanguageActivationProfile {
    pub fn from_probs(unit: UnitId, probs: Vec<f64>) -> Self {
        let total: f64 = probs.iter().sum();
        if total <= 0.0 {
            return Self {
                unit,
                probs,
                normalized: None,
                entropy: f64::INFINITY,
            };
        }
        let normalized: Vec<f64> = probs.iter().map(|p| p / total).collect();
        let entropy = entropy_of(&probs, &normalized);
        Self {
            unit,
            probs,
            normalized: Some(normalized),
            entropy,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.normalized.is_some() && self.entropy.is_finite()
    }

    pub fn max_prob(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }
}

/// Shannon entropy (nats) of a normalised vector, `0 ln 0 = 0`.
///
/// When every non-zero probability is equal the distribution is uniform over
/// its support and the result is `ln(support)` exactly.
fn entropy_of(probs: &[f64], normalized: &[f64]) -> f64 {
    let mut support = probs.iter().filter(|&&p| p > 0.0);
    let first = *support.next().expect("at least one positive probability");
    let mut count = 1usize;
    let mut uniform = true;
    for &p in support {
        count += 1;
        uniform &= p == first;
    }
    if uniform {
        return (count as f64).ln();
    }
    let h: f64 = normalized
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    h.max(0.0)
}

/// Entropy of an arbitrary non-negative vector after ℓ1 normalisation.
pub fn lape_entropy(probs: &[f64]) -> f64 {
    LanguageActivationProfile::from_probs(UnitId::new(0, 0, UnitKind::Raw), probs.to_vec()).entropy
}

/// One profile per `(layer, unit)`, ordered layer-major.
pub fn compute_profiles(agg: &ActivationAggregate) -> Vec<LanguageActivationProfile> {
    let m = &agg.manifest;
    let kind = m.kind;
    let totals: Vec<f64> = m.tokens_per_language.iter().map(|&t| t as f64).collect();
    (0..m.num_layers)
        .into_par_iter()
        .flat_map_iter(|layer| {
            let stats = &agg.layers[layer];
            let totals = &totals;
            (0..m.units_per_layer).map(move |u| {
                let probs = (0..totals.len())
                    .map(|k| stats.token_active_count[agg.cell(k, u)] as f64 / totals[k])
                    .collect();
                LanguageActivationProfile::from_probs(UnitId::new(layer as u32, u as u32, kind), probs)
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    RawLape,
    SaeLape,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "n")]
pub enum SaeSharing {
    LangSpecific,
    LangShared(usize),
}

/// Population the lowest-entropy fraction is taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FractionBase {
    AllUnits,
    Survivors,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub raw_filter_percentile: f64,
    pub raw_entropy_fraction: f64,
    pub raw_fraction_base: FractionBase,
    /// Leave never-active units out of the percentile pool.
    pub raw_exclude_inactive_from_percentile: bool,
    pub sae_example_rate: f64,
    pub sae_hfl_rate: f64,
    pub sae_threshold_ratio: f64,
    pub sae_sharing: SaeSharing,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            raw_filter_percentile: 95.0,
            raw_entropy_fraction: 0.01,
            raw_fraction_base: FractionBase::AllUnits,
            raw_exclude_inactive_from_percentile: false,
            sae_example_rate: 0.98,
            sae_hfl_rate: 0.10,
            sae_threshold_ratio: 0.8,
            sae_sharing: SaeSharing::LangSpecific,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectionError> {
        let in_unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(SelectionError::Config(format!("{name} = {v} is outside (0, 1]")))
            }
        };
        if !(self.raw_filter_percentile > 0.0 && self.raw_filter_percentile < 100.0) {
            return Err(SelectionError::Config(format!(
                "raw_filter_percentile = {} is outside (0, 100)",
                self.raw_filter_percentile
            )));
        }
        in_unit("raw_entropy_fraction", self.raw_entropy_fraction)?;
        in_unit("sae_example_rate", self.sae_example_rate)?;
        in_unit("sae_hfl_rate", self.sae_hfl_rate)?;
        in_unit("sae_threshold_ratio", self.sae_threshold_ratio)?;
        if self.sae_sharing == SaeSharing::LangShared(0) {
            return Err(SelectionError::Config("lang_shared needs n >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedUnit {
    pub layer: u32,
    pub index: u32,
    pub entropy: f64,
    pub probs: Vec<f64>,
}

/// Language-associated unit sets for one run, in manifest language order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub mode: SelectionMode,
    pub model_name: String,
    pub kind: UnitKind,
    pub condition: String,
    pub num_layers: usize,
    pub units_per_layer: usize,
    pub languages: Vec<String>,
    pub config_echo: SelectionConfig,
    /// Global activation-probability threshold (raw mode only).
    pub threshold: Option<f64>,
    /// Units kept by entropy but assigned to no language.
    pub dropped_unassigned: usize,
    pub per_language: IndexMap<String, Vec<SelectedUnit>>,
}

impl SelectionResult {
    pub fn unit_id(&self, u: &SelectedUnit) -> UnitId {
        UnitId::new(u.layer, u.index, self.kind)
    }

    /// `N_L`: the units selected for `language`, pooled across layers.
    pub fn set_for(&self, language: &str) -> BTreeSet<UnitId> {
        self.per_language
            .get(language)
            .map(|units| units.iter().map(|u| self.unit_id(u)).collect())
            .unwrap_or_default()
    }

    /// `N_{l,L}`: units of `language` at one layer.
    pub fn set_for_layer(&self, language: &str, layer: u32) -> BTreeSet<UnitId> {
        self.per_language
            .get(language)
            .map(|units| {
                units
                    .iter()
                    .filter(|u| u.layer == layer)
                    .map(|u| self.unit_id(u))
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Union over all languages.
    pub fn all_units(&self) -> BTreeSet<UnitId> {
        self.per_language
            .values()
            .flatten()
            .map(|u| self.unit_id(u))
            .collect()
    }

    /// Number of languages each selected unit is assigned to.
    pub fn degrees(&self) -> std::collections::BTreeMap<UnitId, usize> {
        let mut out = std::collections::BTreeMap::new();
        for u in self.per_language.values().flatten() {
            *out.entry(self.unit_id(u)).or_insert(0) += 1;
        }
        out
    }

    pub fn selected_count(&self) -> usize {
        self.all_units().len()
    }

    pub fn to_json(&self) -> Result<String, serde_json::Error> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Linear-interpolation percentile (`p` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty pool");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

fn check_profiles(profiles: &[LanguageActivationProfile], agg: &ActivationAggregate) -> Result<(), SelectionError> {
    let m = &agg.manifest;
    if profiles.len() != agg.unit_count() {
        return Err(SelectionError::Mismatch(format!(
            "{} profiles for {} units",
            profiles.len(),
            agg.unit_count()
        )));
    }
    if let Some(p) = profiles.iter().find(|p| p.probs.len() != m.num_languages()) {
        return Err(SelectionError::Mismatch(format!(
            "profile {} has {} probabilities for {} languages",
            p.unit,
            p.probs.len(),
            m.num_languages()
        )));
    }
    Ok(())
}

fn empty_result(agg: &ActivationAggregate, mode: SelectionMode, config: &SelectionConfig) -> SelectionResult {
    let m = &agg.manifest;
    SelectionResult {
        mode,
        model_name: m.model_name.clone(),
        kind: m.kind,
        condition: m.condition.clone(),
        num_layers: m.num_layers,
        units_per_layer: m.units_per_layer,
        languages: m.languages.clone(),
        config_echo: config.clone(),
        threshold: None,
        dropped_unassigned: 0,
        per_language: m.languages.iter().map(|l| (l.clone(), Vec::new())).collect(),
    }
}

fn push_unit(result: &mut SelectionResult, languages: &[usize], p: &LanguageActivationProfile) {
    for &k in languages {
        let lang = &result.languages[k];
        let entry = result.per_language.get_mut(lang).expect("language initialised");
        entry.push(SelectedUnit {
            layer: p.unit.layer,
            index: p.unit.index,
            entropy: p.entropy,
            probs: p.probs.clone(),
        });
    }
}

fn sort_sets(result: &mut SelectionResult) {
    for units in result.per_language.values_mut() {
        units.sort_by_key(|u| (u.layer, u.index));
    }
}

/// LAPE selection over raw neurons.
pub fn select_raw(
    profiles: &[LanguageActivationProfile],
    agg: &ActivationAggregate,
    config: &SelectionConfig,
) -> Result<SelectionResult, SelectionError> {
    config.validate()?;
    if agg.kind() != UnitKind::Raw {
        return Err(SelectionError::WrongKind {
            expected: UnitKind::Raw,
            found: agg.kind(),
        });
    }
    check_profiles(profiles, agg)?;

    let pool: Vec<f64> = profiles
        .iter()
        .filter(|p| !config.raw_exclude_inactive_from_percentile || p.is_valid())
        .flat_map(|p| p.probs.iter().copied())
        .collect();
    if pool.is_empty() {
        return Err(SelectionError::NoSurvivors { threshold: f64::NAN });
    }
    let threshold = percentile(&pool, config.raw_filter_percentile);

    let mut survivors: Vec<&LanguageActivationProfile> = profiles
        .iter()
        .filter(|p| p.is_valid() && p.max_prob() > threshold)
        .collect();
    if survivors.is_empty() {
        return Err(SelectionError::NoSurvivors { threshold });
    }

    let base = match config.raw_fraction_base {
        FractionBase::AllUnits => profiles.len(),
        FractionBase::Survivors => survivors.len(),
    };
    let keep = ((config.raw_entropy_fraction * base as f64).floor() as usize).min(survivors.len());
    survivors.sort_by(|a, b| {
        a.entropy
            .total_cmp(&b.entropy)
            .then(a.unit.layer.cmp(&b.unit.layer))
            .then(a.unit.index.cmp(&b.unit.index))
    });

    let mut result = empty_result(agg, SelectionMode::RawLape, config);
    result.threshold = Some(threshold);
    for p in survivors.into_iter().take(keep) {
        let langs: Vec<usize> = (0..p.probs.len()).filter(|&k| p.probs[k] > threshold).collect();
        if langs.is_empty() {
            result.dropped_unassigned += 1;
            continue;
        }
        push_unit(&mut result, &langs, p);
    }
    if result.dropped_unassigned > 0 {
        warn!(
            "{} entropy-selected units exceed no language threshold and were dropped",
            result.dropped_unassigned
        );
    }
    sort_sets(&mut result);
    Ok(result)
}

/// Whether a latent passes both gates in at least one language.
pub fn sae_gates_pass(example_rates: &[f64], token_rates: &[f64], config: &SelectionConfig) -> bool {
    example_rates
        .iter()
        .zip(token_rates)
        .any(|(&er, &tr)| er >= config.sae_example_rate && tr >= config.sae_hfl_rate)
}

/// Member languages under `P(f|l) >= ratio * max_l' P(f|l')`.
pub fn sae_members(probs: &[f64], ratio: f64) -> Vec<usize> {
    let max = probs.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let cut = ratio * max;
    (0..probs.len()).filter(|&k| probs[k] >= cut).collect()
}

/// SAE-LAPE selection over sparse latents.
pub fn select_sae(
    profiles: &[LanguageActivationProfile],
    agg: &ActivationAggregate,
    config: &SelectionConfig,
) -> Result<SelectionResult, SelectionError> {
    config.validate()?;
    if agg.kind() != UnitKind::Sae {
        return Err(SelectionError::WrongKind {
            expected: UnitKind::Sae,
            found: agg.kind(),
        });
    }
    check_profiles(profiles, agg)?;
    let m = &agg.manifest;
    let examples: Vec<f64> = m.examples_per_language.iter().map(|&e| e as f64).collect();
    let wanted = match config.sae_sharing {
        SaeSharing::LangSpecific => 1,
        SaeSharing::LangShared(n) => n,
    };

    let mut result = empty_result(agg, SelectionMode::SaeLape, config);
    for p in profiles {
        let layer = &agg.layers[p.unit.layer as usize];
        let u = p.unit.index as usize;
        let example_rates: Vec<f64> = (0..examples.len())
            .map(|k| layer.example_active_count[agg.cell(k, u)] as f64 / examples[k])
            .collect();
        // Failing latents carry infinite entropy and are never selected.
        if !p.is_valid() || !sae_gates_pass(&example_rates, &p.probs, config) {
            continue;
        }
        let members = sae_members(&p.probs, config.sae_threshold_ratio);
        if members.len() == wanted {
            push_unit(&mut result, &members, p);
        }
    }
    sort_sets(&mut result);
    Ok(result)
}

/// Dispatches on the aggregate's unit kind.
pub fn select(agg: &ActivationAggregate, config: &SelectionConfig) -> Result<SelectionResult, SelectionError> {
    let profiles = compute_profiles(agg);
    match agg.kind() {
        UnitKind::Raw => select_raw(&profiles, agg, config),
        UnitKind::Sae => select_sae(&profiles, agg, config),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistributionRow {
    pub language: String,
    pub layer: u32,
    pub index: u32,
    pub entropy: f64,
    pub max_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageMeans {
    pub language: String,
    pub units: usize,
    pub mean_entropy: f64,
    pub mean_max_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SelectionDistributions {
    pub rows: Vec<DistributionRow>,
    pub means: Vec<LanguageMeans>,
}

/// Per-unit entropy and peak probability, plus per-language means.
pub fn selection_distributions(result: &SelectionResult) -> SelectionDistributions {
    let mut out = SelectionDistributions::default();
    for (lang, units) in &result.per_language {
        for u in units {
            out.rows.push(DistributionRow {
                language: lang.clone(),
                layer: u.layer,
                index: u.index,
                entropy: u.entropy,
                max_prob: u.probs.iter().copied().fold(0.0, f64::max),
            });
        }
        let n = units.len();
        let (mean_entropy, mean_max_prob) = if n == 0 {
            (f64::NAN, f64::NAN)
        } else {
            let e: f64 = units.iter().map(|u| u.entropy).sum();
            let p: f64 = units.iter().map(|u| u.probs.iter().copied().fold(0.0, f64::max)).sum();
            (e / n as f64, p / n as f64)
        };
        out.means.push(LanguageMeans {
            language: lang.clone(),
            units: n,
            mean_entropy,
            mean_max_prob,
        });
    }
    out
}

impl SelectionDistributions {
    pub fn write_rows_csv<W: Write>(&self, w: W) -> Result<(), SelectionError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["language", "layer", "index", "entropy", "max_prob"])?;
        for r in &self.rows {
            wr.write_record([
                r.language.clone(),
                r.layer.to_string(),
                r.index.to_string(),
                r.entropy.to_string(),
                r.max_prob.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_means_csv<W: Write>(&self, w: W) -> Result<(), SelectionError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["language", "units", "mean_entropy", "mean_max_prob"])?;
        for r in &self.means {
            wr.write_record([
                r.language.clone(),
                r.units.to_string(),
                r.mean_entropy.to_string(),
                r.mean_max_prob.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}
