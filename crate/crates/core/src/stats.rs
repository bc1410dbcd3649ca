//! Intervention statistics: matched random controls, perplexity ratio and
//! delta aggregation, and paired t-tests with two-sided Student-t p-values.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::store::UnitId;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("pool has {available} candidates but {needed} are required")]
    InsufficientPool { available: usize, needed: usize },
    #[error("paired samples need equal lengths (got {0} and {1})")]
    LengthMismatch(usize, usize),
    #[error("paired t-test needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("duplicate record for example {example_id} ({language}, {set_id})")]
    Duplicate {
        example_id: u64,
        language: String,
        set_id: String,
    },
    #[error("{language}: set {set_id:?} lacks example {example_id} present in other sets")]
    MissingCounterpart {
        language: String,
        set_id: String,
        example_id: u64,
    },
    #[error("no records for ({language}, {set_id})")]
    UnknownSet { language: String, set_id: String },
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
}

// ---------------------------------------------------------------------------
// Special functions

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 10_000;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "shape parameters must be positive");
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// Two-sided p-value of a Student-t statistic with `dof` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, dof: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let x = dof / (dof + t * t);
    regularized_incomplete_beta(dof / 2.0, 0.5, x).min(1.0)
}

// ---------------------------------------------------------------------------
// Paired t-test

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degeneracy {
    /// Every difference is zero.
    AllZero,
    /// Differences are constant and non-zero.
    ZeroVariance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t_stat: f64,
    pub p_value: f64,
    pub dof: usize,
    pub mean_diff: f64,
    pub degenerate: Option<Degeneracy>,
}

/// Paired-sample t-test on `a - b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTestResult, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(StatsError::TooFewPairs(n));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let nf = n as f64;
    let mean = diffs.iter().sum::<f64>() / nf;
    let ss: f64 = diffs.iter().map(|d| (d - mean).powi(2)).sum();
    let sd = (ss / (nf - 1.0)).sqrt();
    let dof = n - 1;

    if diffs.iter().all(|&d| d == 0.0) {
        return Ok(TTestResult {
            t_stat: 0.0,
            p_value: 1.0,
            dof,
            mean_diff: 0.0,
            degenerate: Some(Degeneracy::AllZero),
        });
    }
    if sd == 0.0 {
        return Ok(TTestResult {
            t_stat: f64::INFINITY.copysign(mean),
            p_value: 0.0,
            dof,
            mean_diff: mean,
            degenerate: Some(Degeneracy::ZeroVariance),
        });
    }
    let t = mean / (sd / nf.sqrt());
    Ok(TTestResult {
        t_stat: t,
        p_value: student_t_two_sided_p(t, dof as f64),
        dof,
        mean_diff: mean,
        degenerate: None,
    })
}

// ---------------------------------------------------------------------------
// Controls

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlPool {
    /// Sample from the pool with the target removed.
    #[default]
    ExcludeTarget,
    /// Sample from the whole pool, target included.
    Literal,
}

/// Seeded uniform sample, without replacement, of `|target|` units.
pub fn sample_control(
    pool: &BTreeSet<UnitId>,
    target: &BTreeSet<UnitId>,
    seed: u64,
    mode: ControlPool,
) -> Result<BTreeSet<UnitId>, StatsError> {
    let mut candidates: Vec<UnitId> = match mode {
        ControlPool::ExcludeTarget => pool.difference(target).copied().collect(),
        ControlPool::Literal => pool.iter().copied().collect(),
    };
    if target.is_empty() {
        return Ok(BTreeSet::new());
    }
    if candidates.len() < target.len() {
        return Err(StatsError::InsufficientPool {
            available: candidates.len(),
            needed: target.len(),
        });
    }
    rng::partial_shuffle(&mut candidates, target.len(), &mut rng::seeded(seed));
    Ok(candidates[..target.len()].iter().copied().collect())
}

// ---------------------------------------------------------------------------
// Perplexity records

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Zero,
    CrossLanguageMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PplRecord {
    pub example_id: u64,
    pub language: String,
    pub ppl_clean: f64,
    pub ppl_patched: f64,
    pub set_id: String,
    pub ablation: Ablation,
}

impl PplRecord {
    pub fn validate(&self) -> Result<(), StatsError> {
        for (name, v) in [("ppl_clean", self.ppl_clean), ("ppl_patched", self.ppl_patched)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(StatsError::InvalidRecord(format!(
                    "example {} ({}, {}): {name} = {v} is not a finite positive perplexity",
                    self.example_id, self.language, self.set_id
                )));
            }
        }
        Ok(())
    }

    pub fn ratio(&self) -> f64 {
        self.ppl_patched / self.ppl_clean
    }

    pub fn delta(&self) -> f64 {
        self.ppl_patched - self.ppl_clean
    }
}

/// Parses JSON lines; blank lines are skipped.
pub fn read_ppl_jsonl<R: BufRead>(reader: R) -> Result<Vec<PplRecord>, StatsError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PplRecord = serde_json::from_str(&line).map_err(|source| StatsError::Json { line: i + 1, source })?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_ppl_jsonl<W: Write>(records: &[PplRecord], mut w: W) -> Result<(), StatsError> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|source| StatsError::Json { line: 0, source })?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Records indexed by `(language, set_id)` then example id.
#[derive(Clone, Debug, Default)]
pub struct PplTable {
    groups: BTreeMap<(String, String), BTreeMap<u64, PplRecord>>,
}

impl PplTable {
    pub fn new(records: &[PplRecord]) -> Result<Self, StatsError> {
        let mut groups: BTreeMap<(String, String), BTreeMap<u64, PplRecord>> = BTreeMap::new();
        for r in records {
            r.validate()?;
            let group = groups.entry((r.language.clone(), r.set_id.clone())).or_default();
            if group.insert(r.example_id, r.clone()).is_some() {
                return Err(StatsError::Duplicate {
                    example_id: r.example_id,
                    language: r.language.clone(),
                    set_id: r.set_id.clone(),
                });
            }
        }
        // Every set of a language must cover the same examples.
        let mut by_language: BTreeMap<&str, BTreeSet<u64>> = BTreeMap::new();
        for ((lang, _), group) in &groups {
            by_language.entry(lang).or_default().extend(group.keys().copied());
        }
        for ((lang, set_id), group) in &groups {
            if let Some(missing) = by_language[lang.as_str()].iter().find(|id| !group.contains_key(id)) {
                return Err(StatsError::MissingCounterpart {
                    language: lang.clone(),
                    set_id: set_id.clone(),
                    example_id: *missing,
                });
            }
        }
        Ok(Self { groups })
    }

    pub fn group(&self, language: &str, set_id: &str) -> Result<&BTreeMap<u64, PplRecord>, StatsError> {
        self.groups
            .get(&(language.to_string(), set_id.to_string()))
            .ok_or_else(|| StatsError::UnknownSet {
                language: language.into(),
                set_id: set_id.into(),
            })
    }

    pub fn keys(&self) -> impl Iterator<Item = (&str, &str)> {
        self.groups.keys().map(|(l, s)| (l.as_str(), s.as_str()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PplSummary {
    pub language: String,
    pub set_id: String,
    pub ablation: Ablation,
    pub examples: usize,
    pub mean_ratio: f64,
    pub mean_delta: f64,
}

/// Mean of per-example ratios and deltas for every `(language, set_id)`.
pub fn aggregate_ppl(records: &[PplRecord]) -> Result<Vec<PplSummary>, StatsError> {
    let table = PplTable::new(records)?;
    Ok(table
        .groups
        .iter()
        .map(|((language, set_id), group)| summarize(language, set_id, group))
        .collect())
}

fn summarize(language: &str, set_id: &str, group: &BTreeMap<u64, PplRecord>) -> PplSummary {
    let n = group.len() as f64;
    PplSummary {
        language: language.into(),
        set_id: set_id.into(),
        ablation: group.values().next().map(|r| r.ablation).unwrap_or(Ablation::Zero),
        examples: group.len(),
        mean_ratio: group.values().map(PplRecord::ratio).sum::<f64>() / n,
        mean_delta: group.values().map(PplRecord::delta).sum::<f64>() / n,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comparison {
    pub language: String,
    pub target: String,
    pub control: String,
}

/// One report row: target effect, matched control effect, and paired tests
/// on per-example ratios and deltas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub language: String,
    pub target: String,
    pub control: String,
    pub ablation: Ablation,
    pub examples: usize,
    pub ratio_target: f64,
    pub ratio_control: f64,
    pub delta_target: f64,
    pub delta_control: f64,
    pub ratio_test: TTestResult,
    pub delta_test: TTestResult,
}

pub fn compare(table: &PplTable, cmp: &Comparison) -> Result<ComparisonRow, StatsError> {
    let target = table.group(&cmp.language, &cmp.target)?;
    let control = table.group(&cmp.language, &cmp.control)?;
    // Coverage equality is guaranteed by PplTable::new.
    let ids: Vec<u64> = target.keys().copied().collect();
    let tr: Vec<f64> = ids.iter().map(|i| target[i].ratio()).collect();
    let cr: Vec<f64> = ids.iter().map(|i| control[i].ratio()).collect();
    let td: Vec<f64> = ids.iter().map(|i| target[i].delta()).collect();
    let cd: Vec<f64> = ids.iter().map(|i| control[i].delta()).collect();
    let ts = summarize(&cmp.language, &cmp.target, target);
    let cs = summarize(&cmp.language, &cmp.control, control);
    Ok(ComparisonRow {
        language: cmp.language.clone(),
        target: cmp.target.clone(),
        control: cmp.control.clone(),
        ablation: ts.ablation,
        examples: ids.len(),
        ratio_target: ts.mean_ratio,
        ratio_control: cs.mean_ratio,
        delta_target: ts.mean_delta,
        delta_control: cs.mean_delta,
        ratio_test: paired_ttest(&tr, &cr)?,
        delta_test: paired_ttest(&td, &cd)?,
    })
}

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

/// Table-shaped CSV: means rounded as printed in reports plus full-precision test columns.
pub fn write_comparisons_csv<W: Write>(rows: &[ComparisonRow], w: W) -> Result<(), StatsError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "language",
        "set",
        "control",
        "ablation",
        "n",
        "ppl_ratio_target",
        "ppl_ratio_random",
        "delta_ppl_target",
        "delta_ppl_random",
        "t_ratio",
        "p_ratio",
        "t_delta",
        "p_delta",
    ])?;
    for r in rows {
        let ablation = match r.ablation {
            Ablation::Zero => "zero",
            Ablation::CrossLanguageMean => "cross_language_mean",
        };
        wr.write_record([
            r.language.clone(),
            r.target.clone(),
            r.control.clone(),
            ablation.to_string(),
            r.examples.to_string(),
            fmt2(r.ratio_target),
            fmt2(r.ratio_control),
            fmt2(r.delta_target),
            fmt2(r.delta_control),
            r.ratio_test.t_stat.to_string(),
            r.ratio_test.p_value.to_string(),
            r.delta_test.t_stat.to_string(),
            r.delta_test.p_value.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
