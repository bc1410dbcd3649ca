//! Univariate ridge probing of per-language mean activations against
//! typological feature vectors.
//!
//! Every `(unit, feature)` pair is an independent single-predictor ridge
//! regression across languages, scored by K-fold cross-validated R² over
//! languages. Fits centre `x` and `y` on the training fold, which amounts to
//! an unpenalised intercept:
//!
//! ```text
//! beta  = Σ (x - x̄)(y - ȳ) / (Σ (x - x̄)² + λ)
//! y_hat = ȳ + beta (x - x̄)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::store::{ActivationAggregate, DenseMatrix, UnitId};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("typology csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("typology header must start with `lang`")]
    MissingLangColumn,
    #[error("feature {0:?} lacks a known family prefix (fam, syntax, phonology, geo, inventory)")]
    UnknownFamily(String),
    #[error("language {0:?} is not in the typology table")]
    UnknownLanguage(String),
    #[error("typology row {row}, column {column:?}: cannot parse {value:?} as a number")]
    BadValue { row: usize, column: String, value: String },
    #[error("no typology feature has non-zero variance across the selected languages")]
    EmptyAfterPruning,
    #[error("{languages} languages cannot be split into {folds} folds")]
    TooFewLanguages { languages: usize, folds: usize },
    #[error("invalid probing design: {0}")]
    Design(String),
    #[error("language order differs between design {0:?} and typology {1:?}")]
    LanguageOrder(Vec<String>, Vec<String>),
    #[error("subset shares no unit with the probed units")]
    DisjointSubset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Fam,
    Syntax,
    Phonology,
    Geo,
    Inventory,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::Fam, Family::Syntax, Family::Phonology, Family::Geo, Family::Inventory];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Fam => "fam",
            Family::Syntax => "syntax",
            Family::Phonology => "phonology",
            Family::Geo => "geo",
            Family::Inventory => "inventory",
        }
    }

    /// Family of a `<family>_<feature>` column name.
    pub fn of_feature(name: &str) -> Option<Family> {
        let (prefix, rest) = name.split_once('_')?;
        if rest.is_empty() {
            return None;
        }
        prefix.parse().ok()
    }
}

impl FromStr for Family {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Family::ALL.into_iter().find(|f| f.as_str() == s).ok_or(())
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `L x F` typology targets, row-major by language.
#[derive(Clone, Debug, PartialEq)]
pub struct TypologyMatrix {
    pub languages: Vec<String>,
    pub features: Vec<String>,
    pub families: Vec<Family>,
    pub values: Vec<f64>,
}

impl TypologyMatrix {
    pub fn num_features(&self) -> usize {
        self.features.len()
    }

    pub fn get(&self, language: usize, feature: usize) -> f64 {
        self.values[language * self.features.len() + feature]
    }

    pub fn column(&self, feature: usize) -> Vec<f64> {
        (0..self.languages.len()).map(|k| self.get(k, feature)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedTypology {
    pub matrix: TypologyMatrix,
    /// Zero-variance columns removed for this language inventory.
    pub dropped: Vec<String>,
}

/// Reads a `lang,<family>_<feature>,...` table, keeps the `inventory`
/// languages in that order, and drops constant columns.
pub fn load_typology<R: Read>(reader: R, inventory: &[String]) -> Result<LoadedTypology, ProbeError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("lang") {
        return Err(ProbeError::MissingLangColumn);
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
    let families = names
        .iter()
        .map(|n| Family::of_feature(n).ok_or_else(|| ProbeError::UnknownFamily(n.clone())))
        .collect::<Result<Vec<_>, _>>()?;

    let mut rows: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let lang = record.get(0).unwrap_or_default().to_owned();
        if !inventory.contains(&lang) {
            continue;
        }
        let values = names
            .iter()
            .enumerate()
            .map(|(j, col)| {
                let raw = record.get(j + 1).unwrap_or_default();
                raw.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| ProbeError::BadValue {
                        row: i + 1,
                        column: col.clone(),
                        value: raw.to_owned(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.insert(lang, values);
    }
    let selected: Vec<&Vec<f64>> = inventory
        .iter()
        .map(|l| rows.get(l).ok_or_else(|| ProbeError::UnknownLanguage(l.clone())))
        .collect::<Result<_, _>>()?;

    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    for (j, name) in names.iter().enumerate() {
        let first = selected.first().map(|r| r[j]);
        if selected.iter().all(|r| Some(r[j]) == first) {
            dropped.push(name.clone());
        } else {
            keep.push(j);
        }
    }
    if keep.is_empty() {
        return Err(ProbeError::EmptyAfterPruning);
    }
    let values = selected
        .iter()
        .flat_map(|r| keep.iter().map(move |&j| r[j]))
        .collect();
    Ok(LoadedTypology {
        matrix: TypologyMatrix {
            languages: inventory.to_vec(),
            features: keep.iter().map(|&j| names[j].clone()).collect(),
            families: keep.iter().map(|&j| families[j]).collect(),
            values,
        },
        dropped,
    })
}

pub fn load_typology_file(path: &Path, inventory: &[String]) -> Result<LoadedTypology, ProbeError> {
    let file = std::fs::File::open(path).map_err(|source| ProbeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_typology(file, inventory)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    /// Centre on the training fold (unpenalised intercept).
    #[default]
    TrainFold,
    /// Regress through the origin.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RidgeFit {
    pub beta: f64,
    pub x_mean: f64,
    pub y_mean: f64,
}

impl RidgeFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.y_mean + self.beta * (x - self.x_mean)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Single-predictor ridge fit. `None` when `Σx̃² + λ` is zero.
pub fn fit_ridge_univariate(x: &[f64], y: &[f64], lambda: f64, centering: Centering) -> Option<RidgeFit> {
    assert_eq!(x.len(), y.len(), "x and y lengths differ");
    if x.is_empty() {
        return None;
    }
    let (x_mean, y_mean) = match centering {
        Centering::TrainFold => (mean(x), mean(y)),
        Centering::None => (0.0, 0.0),
    };
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        let dx = xi - x_mean;
        sxx += dx * dx;
        sxy += dx * (yi - y_mean);
    }
    let den = sxx + lambda;
    if den == 0.0 {
        return None;
    }
    Some(RidgeFit {
        beta: sxy / den,
        x_mean,
        y_mean,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    pub lambda: f64,
    pub folds: usize,
    pub seed: u64,
    #[serde(default)]
    pub centering: Centering,
    #[serde(default = "default_block")]
    pub block_size: usize,
}

fn default_block() -> usize {
    256
}

impl ProbeParams {
    pub fn new(lambda: f64, folds: usize, seed: u64) -> Self {
        Self {
            lambda,
            folds,
            seed,
            centering: Centering::TrainFold,
            block_size: default_block(),
        }
    }
}

/// Mean activations `[L x units]` plus fitting parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbingDesign {
    pub languages: Vec<String>,
    pub unit_ids: Vec<UnitId>,
    /// Row-major by language.
    pub mean_activations: Vec<f64>,
    pub params: ProbeParams,
}

impl ProbingDesign {
    pub fn new(
        languages: Vec<String>,
        unit_ids: Vec<UnitId>,
        mean_activations: Vec<f64>,
        params: ProbeParams,
    ) -> Result<Self, ProbeError> {
        let d = Self {
            languages,
            unit_ids,
            mean_activations,
            params,
        };
        d.validate()?;
        Ok(d)
    }

    /// Mean activation per language is `activation_sum / tokens` of that language.
    pub fn from_aggregate(agg: &ActivationAggregate, units: &[UnitId], params: ProbeParams) -> Result<Self, ProbeError> {
        let m = &agg.manifest;
        for u in units {
            if u.kind != m.kind || u.layer as usize >= m.num_layers || u.index as usize >= m.units_per_layer {
                return Err(ProbeError::Design(format!("unit {u} is outside the aggregate")));
            }
        }
        let mut means = Vec::with_capacity(m.num_languages() * units.len());
        for k in 0..m.num_languages() {
            for u in units {
                means.push(agg.mean_activation(u.layer as usize, k, u.index as usize));
            }
        }
        Self::new(m.languages.clone(), units.to_vec(), means, params)
    }

    pub fn num_languages(&self) -> usize {
        self.languages.len()
    }

    pub fn validate(&self) -> Result<(), ProbeError> {
        let l = self.languages.len();
        if self.params.folds < 2 || l < self.params.folds {
            return Err(ProbeError::TooFewLanguages {
                languages: l,
                folds: self.params.folds,
            });
        }
        if !self.params.lambda.is_finite() || self.params.lambda < 0.0 {
            return Err(ProbeError::Design(format!("lambda = {} must be finite and >= 0", self.params.lambda)));
        }
        if self.params.block_size == 0 {
            return Err(ProbeError::Design("block_size must be positive".into()));
        }
        if self.mean_activations.len() != l * self.unit_ids.len() {
            return Err(ProbeError::Design(format!(
                "{} activations for {l} languages x {} units",
                self.mean_activations.len(),
                self.unit_ids.len()
            )));
        }
        if self.mean_activations.iter().any(|v| !v.is_finite()) {
            return Err(ProbeError::Design("non-finite mean activation".into()));
        }
        Ok(())
    }

    fn unit_column(&self, unit: usize) -> Vec<f64> {
        let n = self.unit_ids.len();
        (0..self.languages.len()).map(|k| self.mean_activations[k * n + unit]).collect()
    }
}

/// Seeded near-equal split of `languages` indices into `folds` folds.
pub fn fold_assignment(languages: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..languages).collect();
    rng::shuffle(&mut order, &mut rng::seeded(seed));
    let mut out = vec![0; languages];
    for (pos, &lang) in order.iter().enumerate() {
        out[lang] = pos % folds;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub unit_ids: Vec<UnitId>,
    pub features: Vec<String>,
    pub families: Vec<Family>,
    /// `units x features`; NaN where undefined.
    pub r2: DenseMatrix,
    /// Folds contributing to each entry, same layout as `r2`.
    pub defined_folds: Vec<u8>,
    pub folds: usize,
    pub fold_assignment: IndexMap<String, usize>,
}

impl ProbeResult {
    pub fn get(&self, unit: usize, feature: usize) -> Option<f64> {
        let v = self.r2.get(unit, feature);
        (!v.is_nan()).then_some(v)
    }

    /// Entries averaged over fewer than all folds.
    pub fn partially_defined(&self) -> usize {
        self.defined_folds
            .iter()
            .filter(|&&d| d > 0 && (d as usize) < self.folds)
            .count()
    }
}

struct FoldSplit {
    train: Vec<usize>,
    test: Vec<usize>,
}

struct TargetFoldStats {
    train_mean: f64,
    ss_tot: f64,
}

/// Cross-validated R² for every `(unit, feature)` pair.
pub fn cv_r2(design: &ProbingDesign, typ: &TypologyMatrix) -> Result<ProbeResult, ProbeError> {
    design.validate()?;
    if design.languages != typ.languages {
        return Err(ProbeError::LanguageOrder(design.languages.clone(), typ.languages.clone()));
    }
    let p = &design.params;
    let k = p.folds;
    let assignment = fold_assignment(design.num_languages(), k, p.seed);
    let splits: Vec<FoldSplit> = (0..k)
        .map(|f| FoldSplit {
            train: (0..assignment.len()).filter(|&i| assignment[i] != f).collect(),
            test: (0..assignment.len()).filter(|&i| assignment[i] == f).collect(),
        })
        .collect();

    let nf = typ.num_features();
    let targets: Vec<Vec<f64>> = (0..nf).map(|j| typ.column(j)).collect();
    let target_stats: Vec<Vec<TargetFoldStats>> = targets
        .iter()
        .map(|y| {
            splits
                .iter()
                .map(|s| {
                    let train_mean = match p.centering {
                        Centering::TrainFold => s.train.iter().map(|&i| y[i]).sum::<f64>() / s.train.len() as f64,
                        Centering::None => 0.0,
                    };
                    let test_mean = s.test.iter().map(|&i| y[i]).sum::<f64>() / s.test.len() as f64;
                    let ss_tot = s.test.iter().map(|&i| (y[i] - test_mean).powi(2)).sum();
                    TargetFoldStats {
                        train_mean,
                        ss_tot,
                    }
                })
                .collect()
        })
        .collect();

    let nu = design.unit_ids.len();
    let mut r2 = vec![f64::NAN; nu * nf];
    let mut defined = vec![0u8; nu * nf];
    let block = p.block_size;

    r2.par_chunks_mut(block * nf)
        .zip(defined.par_chunks_mut(block * nf))
        .enumerate()
        .for_each(|(b, (r2_block, def_block))| {
            let first = b * block;
            for (local, unit) in (first..(first + block).min(nu)).enumerate() {
                let x = design.unit_column(unit);
                // (x̄, Σx̃²) per fold for this unit
                let unit_stats: Vec<(f64, f64)> = splits
                    .iter()
                    .map(|s| {
                        let xm = match p.centering {
                            Centering::TrainFold => s.train.iter().map(|&i| x[i]).sum::<f64>() / s.train.len() as f64,
                            Centering::None => 0.0,
                        };
                        let sxx = s.train.iter().map(|&i| (x[i] - xm).powi(2)).sum::<f64>();
                        (xm, sxx)
                    })
                    .collect();
                for feat_block in (0..nf).step_by(block) {
                    for j in feat_block..(feat_block + block).min(nf) {
                        let y = &targets[j];
                        let mut acc = 0.0;
                        let mut count = 0u8;
                        for (f, s) in splits.iter().enumerate() {
                            let (xm, sxx) = unit_stats[f];
                            let ts = &target_stats[j][f];
                            let den = sxx + p.lambda;
                            if den == 0.0 || ts.ss_tot == 0.0 {
                                continue;
                            }
                            let sxy: f64 = s.train.iter().map(|&i| (x[i] - xm) * (y[i] - ts.train_mean)).sum();
                            let beta = sxy / den;
                            let ss_res: f64 = s
                                .test
                                .iter()
                                .map(|&i| {
                                    let pred = ts.train_mean + beta * (x[i] - xm);
                                    (y[i] - pred).powi(2)
                                })
                                .sum();
                            acc += 1.0 - ss_res / ts.ss_tot;
                            count += 1;
                        }
                        let cell = local * nf + j;
                        def_block[cell] = count;
                        if count > 0 {
                            r2_block[cell] = acc / count as f64;
                        }
                    }
                }
            }
        });

    Ok(ProbeResult {
        unit_ids: design.unit_ids.clone(),
        features: typ.features.clone(),
        families: typ.families.clone(),
        r2: DenseMatrix::new(nu, nf, r2),
        defined_folds: defined,
        folds: k,
        fold_assignment: design
            .languages
            .iter()
            .cloned()
            .zip(assignment.iter().copied())
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilySummary {
    pub family: Family,
    /// Mean over units of the per-unit maximum R² within the family.
    pub mean_max_r2: f64,
    /// Units with at least one defined score in the family.
    pub units: usize,
}

/// Average over `subset` of each unit's best R² within every feature family.
pub fn familywise_summary(result: &ProbeResult, subset: &BTreeSet<UnitId>) -> Result<Vec<FamilySummary>, ProbeError> {
    let rows: Vec<usize> = result
        .unit_ids
        .iter()
        .enumerate()
        .filter(|(_, u)| subset.contains(u))
        .map(|(i, _)| i)
        .collect();
    if rows.is_empty() {
        return Err(ProbeError::DisjointSubset);
    }
    let mut out = Vec::new();
    for family in Family::ALL {
        let cols: Vec<usize> = (0..result.features.len()).filter(|&j| result.families[j] == family).collect();
        if cols.is_empty() {
            continue;
        }
        let maxima: Vec<f64> = rows
            .iter()
            .filter_map(|&i| {
                cols.iter()
                    .filter_map(|&j| result.get(i, j))
                    .fold(None, |best: Option<f64>, v| Some(best.map_or(v, |b| b.max(v))))
            })
            .collect();
        let mean_max_r2 = if maxima.is_empty() {
            f64::NAN
        } else {
            maxima.iter().sum::<f64>() / maxima.len() as f64
        };
        out.push(FamilySummary {
            family,
            mean_max_r2,
            units: maxima.len(),
        });
    }
    Ok(out)
}
