//! Set-overlap analytics over selection results.

use std::collections::BTreeSet;
use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::selection::SelectionResult;
use crate::store::{UnitId, UnitKind};

#[derive(Debug, Error)]
pub enum SetError {
    #[error("unit universes differ: {0}")]
    UniverseMismatch(String),
    #[error("degree regions support 2 or 3 conditions, got {0}")]
    UnsupportedConditionCount(usize),
    #[error("max_degree must be at least 1")]
    ZeroDegree,
    #[error("language inventories differ: {0:?} vs {1:?}")]
    LanguageMismatch(Vec<String>, Vec<String>),
    #[error("results share no layers")]
    NoCommonLayers,
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type UnitSet = BTreeSet<UnitId>;

/// `|a ∩ b| / |a ∪ b|`, and 0 when both sets are empty.
pub fn jaccard(a: &UnitSet, b: &UnitSet) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        warn!("jaccard of two empty sets taken as 0");
        return 0.0;
    }
    inter as f64 / union as f64
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionPartition {
    pub labels: (String, String),
    pub only_a: UnitSet,
    pub only_b: UnitSet,
    pub overlap: UnitSet,
}

impl ConditionPartition {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.only_a.len(), self.only_b.len(), self.overlap.len())
    }
}

fn set_kind(set: &UnitSet) -> Result<Option<UnitKind>, SetError> {
    let mut kinds = set.iter().map(|u| u.kind);
    let Some(first) = kinds.next() else {
        return Ok(None);
    };
    if kinds.any(|k| k != first) {
        return Err(SetError::UniverseMismatch("set mixes raw and sae units".into()));
    }
    Ok(Some(first))
}

/// Three-way split of two unit sets.
pub fn partition(a: &UnitSet, b: &UnitSet, labels: (&str, &str)) -> Result<ConditionPartition, SetError> {
    if let (Some(ka), Some(kb)) = (set_kind(a)?, set_kind(b)?) {
        if ka != kb {
            return Err(SetError::UniverseMismatch(format!("{ka} units vs {kb} units")));
        }
    }
    Ok(ConditionPartition {
        labels: (labels.0.to_string(), labels.1.to_string()),
        only_a: a.difference(b).copied().collect(),
        only_b: b.difference(a).copied().collect(),
        overlap: a.intersection(b).copied().collect(),
    })
}

/// Checks that two results come from the same model and unit kind.
pub fn check_same_universe(a: &SelectionResult, b: &SelectionResult) -> Result<(), SetError> {
    if a.model_name != b.model_name {
        return Err(SetError::UniverseMismatch(format!(
            "models {:?} and {:?}",
            a.model_name, b.model_name
        )));
    }
    if a.kind != b.kind {
        return Err(SetError::UniverseMismatch(format!("{} units vs {} units", a.kind, b.kind)));
    }
    Ok(())
}

/// Partition of one language's units across two conditions.
pub fn partition_results(
    a: &SelectionResult,
    b: &SelectionResult,
    language: Option<&str>,
) -> Result<ConditionPartition, SetError> {
    check_same_universe(a, b)?;
    let (sa, sb) = match language {
        Some(l) => (a.set_for(l), b.set_for(l)),
        None => (a.all_units(), b.all_units()),
    };
    partition(&sa, &sb, (&a.condition, &b.condition))
}

/// Exclusive Euler regions of 2 or 3 sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionTable {
    pub conditions: Vec<String>,
    pub max_degree: usize,
    /// `(membership mask, size)`; bit `i` set means "in condition `i`".
    pub regions: Vec<(u8, usize)>,
}

impl RegionTable {
    pub fn region_name(&self, mask: u8) -> String {
        self.conditions
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, c)| c.as_str())
            .collect::<Vec<_>>()
            .join("&")
    }

    pub fn total(&self) -> usize {
        self.regions.iter().map(|(_, n)| n).sum()
    }

    pub fn size(&self, mask: u8) -> usize {
        self.regions
            .iter()
            .find(|(m, _)| *m == mask)
            .map(|(_, n)| *n)
            .unwrap_or(0)
    }
}

/// Degree-filtered set of one condition: units assigned to at most `max_degree` languages.
pub fn degree_filtered(result: &SelectionResult, language: Option<&str>, max_degree: usize) -> UnitSet {
    let degrees = result.degrees();
    let base = match language {
        Some(l) => result.set_for(l),
        None => result.all_units(),
    };
    base.into_iter()
        .filter(|u| degrees.get(u).copied().unwrap_or(0) <= max_degree)
        .collect()
}

/// Region sizes of the degree-filtered sets, for one language or pooled over all.
pub fn degree_regions(
    selections: &[&SelectionResult],
    language: Option<&str>,
    max_degree: usize,
) -> Result<RegionTable, SetError> {
    if !(2..=3).contains(&selections.len()) {
        return Err(SetError::UnsupportedConditionCount(selections.len()));
    }
    if max_degree == 0 {
        return Err(SetError::ZeroDegree);
    }
    for s in &selections[1..] {
        check_same_universe(selections[0], s)?;
    }
    let sets: Vec<UnitSet> = selections
        .iter()
        .map(|s| degree_filtered(s, language, max_degree))
        .collect();
    let union: UnitSet = sets.iter().flatten().copied().collect();
    let n_masks = 1u8 << sets.len();
    let mut counts = vec![0usize; n_masks as usize];
    for u in &union {
        let mask = sets
            .iter()
            .enumerate()
            .filter(|(_, s)| s.contains(u))
            .fold(0u8, |m, (i, _)| m | (1 << i));
        counts[mask as usize] += 1;
    }
    Ok(RegionTable {
        conditions: selections.iter().map(|s| s.condition.clone()).collect(),
        max_degree,
        regions: (1..n_masks).map(|m| (m, counts[m as usize])).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPoint {
    pub layer: u32,
    pub mean_jaccard: f64,
    pub std_jaccard: f64,
    pub languages: usize,
    /// Languages whose union was empty at this layer.
    pub empty_languages: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentCurve {
    pub labels: (String, String),
    pub per_layer: Vec<AlignmentPoint>,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-layer Jaccard between the two results, averaged over languages.
///
/// With `skip_empty`, languages whose union is empty at a layer are left out
/// of that layer's mean instead of contributing 0.
pub fn layerwise_alignment(
    a: &SelectionResult,
    b: &SelectionResult,
    skip_empty: bool,
) -> Result<AlignmentCurve, SetError> {
    check_same_universe(a, b)?;
    if a.languages != b.languages {
        return Err(SetError::LanguageMismatch(a.languages.clone(), b.languages.clone()));
    }
    let layers = a.num_layers.min(b.num_layers);
    if layers == 0 {
        return Err(SetError::NoCommonLayers);
    }
    let mut per_layer = Vec::with_capacity(layers);
    for layer in 0..layers as u32 {
        let mut values = Vec::with_capacity(a.languages.len());
        let mut empty = 0;
        for lang in &a.languages {
            let sa = a.set_for_layer(lang, layer);
            let sb = b.set_for_layer(lang, layer);
            if sa.is_empty() && sb.is_empty() {
                empty += 1;
                if skip_empty {
                    continue;
                }
                values.push(0.0);
            } else {
                values.push(jaccard(&sa, &sb));
            }
        }
        let (mean_jaccard, std_jaccard) = mean_std(&values);
        per_layer.push(AlignmentPoint {
            layer,
            mean_jaccard,
            std_jaccard,
            languages: values.len(),
            empty_languages: empty,
        });
    }
    Ok(AlignmentCurve {
        labels: (a.condition.clone(), b.condition.clone()),
        per_layer,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JaccardRow {
    pub language: String,
    pub condition_a: String,
    pub condition_b: String,
    /// `None` for the pooled (all-layer) value.
    pub layer: Option<u32>,
    pub jaccard: f64,
    pub size_a: usize,
    pub size_b: usize,
    pub overlap: usize,
}

fn languages_union(a: &SelectionResult, b: &SelectionResult) -> Vec<String> {
    let mut langs = a.languages.clone();
    for l in &b.languages {
        if !langs.contains(l) {
            langs.push(l.clone());
        }
    }
    langs
}

/// Same-language Jaccard between two conditions, pooled across layers and
/// per layer. Languages missing from a condition count as empty sets unless
/// `skip_empty` is set.
pub fn language_jaccard(
    a: &SelectionResult,
    b: &SelectionResult,
    skip_empty: bool,
) -> Result<Vec<JaccardRow>, SetError> {
    check_same_universe(a, b)?;
    let mut rows = Vec::new();
    let layers = a.num_layers.max(b.num_layers) as u32;
    for lang in languages_union(a, b) {
        let pooled_a = a.set_for(&lang);
        let pooled_b = b.set_for(&lang);
        if skip_empty && (pooled_a.is_empty() || pooled_b.is_empty()) {
            continue;
        }
        let mut push = |layer: Option<u32>, sa: &UnitSet, sb: &UnitSet| {
            rows.push(JaccardRow {
                language: lang.clone(),
                condition_a: a.condition.clone(),
                condition_b: b.condition.clone(),
                layer,
                jaccard: jaccard(sa, sb),
                size_a: sa.len(),
                size_b: sb.len(),
                overlap: sa.intersection(sb).count(),
            });
        };
        push(None, &pooled_a, &pooled_b);
        for layer in 0..layers {
            let sa: UnitSet = pooled_a.iter().filter(|u| u.layer == layer).copied().collect();
            let sb: UnitSet = pooled_b.iter().filter(|u| u.layer == layer).copied().collect();
            push(Some(layer), &sa, &sb);
        }
    }
    Ok(rows)
}

/// Jaccard between language `lang_a` under `a` and language `lang_b` under `b`,
/// e.g. romanized Hindi against native English.
pub fn cross_jaccard(
    a: &SelectionResult,
    lang_a: &str,
    b: &SelectionResult,
    lang_b: &str,
) -> Result<f64, SetError> {
    check_same_universe(a, b)?;
    Ok(jaccard(&a.set_for(lang_a), &b.set_for(lang_b)))
}

fn opt(v: Option<u32>) -> String {
    v.map(|l| l.to_string()).unwrap_or_else(|| "all".into())
}

pub fn write_jaccard_csv<W: Write>(rows: &[JaccardRow], w: W) -> Result<(), SetError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "language",
        "condition_a",
        "condition_b",
        "layer",
        "jaccard",
        "size_a",
        "size_b",
        "overlap",
    ])?;
    for r in rows {
        wr.write_record([
            r.language.clone(),
            r.condition_a.clone(),
            r.condition_b.clone(),
            opt(r.layer),
            r.jaccard.to_string(),
            r.size_a.to_string(),
            r.size_b.to_string(),
            r.overlap.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_alignment_csv<W: Write>(curve: &AlignmentCurve, w: W) -> Result<(), SetError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "condition_a",
        "condition_b",
        "layer",
        "mean_jaccard",
        "std_jaccard",
        "languages",
        "empty_languages",
    ])?;
    for p in &curve.per_layer {
        wr.write_record([
            curve.labels.0.clone(),
            curve.labels.1.clone(),
            p.layer.to_string(),
            p.mean_jaccard.to_string(),
            p.std_jaccard.to_string(),
            p.languages.to_string(),
            p.empty_languages.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Rows: `scope, max_degree, region, size`.
pub fn write_regions_csv<W: Write>(tables: &[(String, RegionTable)], w: W) -> Result<(), SetError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["scope", "max_degree", "region", "size"])?;
    for (scope, t) in tables {
        for &(mask, size) in &t.regions {
            wr.write_record([
                scope.clone(),
                t.max_degree.to_string(),
                t.region_name(mask),
                size.to_string(),
            ])?;
        }
    }
    wr.flush()?;
    Ok(())
}
