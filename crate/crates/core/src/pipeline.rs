//! Pipeline stages behind the CLI: select, overlap, probe, intervention
//! statistics and the report bundle.
//!
//! Every stage writes into the configured output directory. Outputs depend
//! only on the config and input bytes, never on timestamps or thread count.

use std::collections::BTreeSet;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use log::{info, warn};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::probe::{self, familywise_summary, ProbeResult, ProbingDesign};
use crate::selection::{self, selection_distributions, SelectionResult};
use crate::setlab::{self, partition_results, RegionTable};
use crate::stats::{self, PplTable};
use crate::store::{self, UnitId, UnitKind};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("upstream data: {0}")]
    Upstream(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// 2 for validation failures, 3 for bad or missing upstream data.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) => 2,
            PipelineError::Upstream(_) | PipelineError::Io { .. } => 3,
        }
    }
}

fn upstream(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Upstream(e.to_string())
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(path: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(path).map_err(io_at(path))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, bytes).map_err(io_at(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).map_err(upstream)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Renders a CSV through `f` into memory, then writes it.
fn write_csv_with<E: std::fmt::Display>(
    path: &Path,
    f: impl FnOnce(&mut Vec<u8>) -> Result<(), E>,
) -> Result<(), PipelineError> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(upstream)?;
    write_file(path, &buf)
}

/// One table of a report bundle.
#[derive(Clone, Debug, Serialize)]
pub struct TableEntry {
    pub path: String,
    pub mirrors: String,
    pub rows: usize,
}

/// Tables written by one or more stages.
#[derive(Clone, Debug, Default, Serialize)]
pub struct TableLog {
    pub tables: Vec<TableEntry>,
}

impl TableLog {
    fn add(&mut self, out: &Path, path: &Path, mirrors: &str, rows: usize) {
        let rel = path.strip_prefix(out).unwrap_or(path);
        let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        self.tables.push(TableEntry {
            path: rel,
            mirrors: mirrors.into(),
            rows,
        });
    }
}

fn selection_path(out: &Path, condition: &str) -> PathBuf {
    out.join("selection").join(format!("{condition}.json"))
}

// ---------------------------------------------------------------------------
// select

/// Runs LAPE / SAE-LAPE for every condition and writes `selection/<name>.json`.
pub fn run_select(cfg: &PipelineConfig, log: &mut TableLog) -> Result<IndexMap<String, SelectionResult>, PipelineError> {
    let out = cfg.out_dir();
    let mut results = IndexMap::new();
    for cond in &cfg.conditions {
        let agg = store::read_aggregate(&cfg.resolve(&cond.aggregate)).map_err(upstream)?;
        let mut result = selection::select(&agg, &cfg.selection).map_err(upstream)?;
        // The config's condition label names the run in every downstream table.
        result.condition = cond.name.clone();
        info!(
            "{}: {} units selected across {} languages",
            cond.name,
            result.selected_count(),
            result.languages.len()
        );
        if result.selected_count() == 0 {
            warn!("{}: selection is empty", cond.name);
        }
        let path = selection_path(&out, &cond.name);
        write_file(&path, result.to_json().map_err(upstream)?.as_bytes())?;

        let dist = selection_distributions(&result);
        let units = out.join("tables").join(format!("selection_{}_units.csv", cond.name));
        write_csv_with(&units, |b| dist.write_rows_csv(b))?;
        log.add(&out, &units, "App D/E entropy and activation-probability distributions", dist.rows.len());
        let means = out.join("tables").join(format!("selection_{}_language_means.csv", cond.name));
        write_csv_with(&means, |b| dist.write_means_csv(b))?;
        log.add(&out, &means, "App E language-level means", dist.means.len());
        results.insert(cond.name.clone(), result);
    }
    Ok(results)
}

/// Reads selection results written by an earlier `select` run.
pub fn load_selections(cfg: &PipelineConfig) -> Result<IndexMap<String, SelectionResult>, PipelineError> {
    let out = cfg.out_dir();
    let mut results = IndexMap::new();
    for cond in &cfg.conditions {
        let path = selection_path(&out, &cond.name);
        let text = fs::read_to_string(&path)
            .map_err(|e| PipelineError::Upstream(format!("missing selection {}: {e}", path.display())))?;
        let result = SelectionResult::from_json(&text).map_err(upstream)?;
        results.insert(cond.name.clone(), result);
    }
    Ok(results)
}

// ---------------------------------------------------------------------------
// overlap

/// Unit list exchanged with the harness for interventions.
#[derive(Clone, Debug, Serialize, serde::Deserialize, PartialEq)]
pub struct NeuronSetFile {
    pub name: String,
    pub model_name: String,
    pub kind: UnitKind,
    pub language: String,
    pub units: Vec<UnitRef>,
}

#[derive(Clone, Copy, Debug, Serialize, serde::Deserialize, PartialEq, Eq)]
pub struct UnitRef {
    pub layer: u32,
    pub index: u32,
}

fn neuron_set(name: &str, result: &SelectionResult, language: &str, units: &BTreeSet<UnitId>) -> NeuronSetFile {
    NeuronSetFile {
        name: name.into(),
        model_name: result.model_name.clone(),
        kind: result.kind,
        language: language.into(),
        units: units
            .iter()
            .map(|u| UnitRef {
                layer: u.layer,
                index: u.index,
            })
            .collect(),
    }
}

fn get<'a>(sel: &'a IndexMap<String, SelectionResult>, name: &str) -> Result<&'a SelectionResult, PipelineError> {
    sel.get(name)
        .ok_or_else(|| PipelineError::Validation(format!("unknown condition {name:?}")))
}

fn all_units_of(result: &SelectionResult) -> BTreeSet<UnitId> {
    (0..result.num_layers as u32)
        .flat_map(|l| (0..result.units_per_layer as u32).map(move |i| UnitId::new(l, i, result.kind)))
        .collect()
}

#[derive(Serialize)]
struct PartitionRow<'a> {
    language: &'a str,
    only_a: usize,
    only_b: usize,
    overlap: usize,
}

pub fn run_overlap(
    cfg: &PipelineConfig,
    sel: &IndexMap<String, SelectionResult>,
    log: &mut TableLog,
) -> Result<(), PipelineError> {
    let Some(ocfg) = &cfg.overlap else {
        return Ok(());
    };
    let out = cfg.out_dir();
    let tables = out.join("tables");

    for (a_name, b_name) in &ocfg.pairs {
        let a = get(sel, a_name)?;
        let b = get(sel, b_name)?;
        let stem = format!("{a_name}_vs_{b_name}");

        let rows = setlab::language_jaccard(a, b, ocfg.skip_empty).map_err(upstream)?;
        let path = tables.join(format!("jaccard_{stem}.csv"));
        write_csv_with(&path, |buf| setlab::write_jaccard_csv(&rows, buf))?;
        log.add(&out, &path, "Fig. 2 / Fig. 4 per-language Jaccard (pooled and per layer)", rows.len());

        let curve = setlab::layerwise_alignment(a, b, ocfg.skip_empty).map_err(upstream)?;
        let path = tables.join(format!("alignment_{stem}.csv"));
        write_csv_with(&path, |buf| setlab::write_alignment_csv(&curve, buf))?;
        log.add(&out, &path, "Fig. 3 layer-wise alignment", curve.per_layer.len());

        // Partition sizes and per-language unit sets for interventions.
        let mut wr = csv::Writer::from_writer(Vec::new());
        let mut n = 0;
        let pool = all_units_of(a);
        for lang in &a.languages {
            let part = partition_results(a, b, Some(lang)).map_err(upstream)?;
            wr.serialize(PartitionRow {
                language: lang,
                only_a: part.only_a.len(),
                only_b: part.only_b.len(),
                overlap: part.overlap.len(),
            })
            .map_err(upstream)?;
            n += 1;
            let set_dir = out.join("sets").join(&stem).join(lang);
            for (name, units) in [
                (format!("only_{a_name}"), &part.only_a),
                (format!("only_{b_name}"), &part.only_b),
                ("overlap".to_string(), &part.overlap),
            ] {
                write_json(&set_dir.join(format!("{name}.json")), &neuron_set(&name, a, lang, units))?;
                if let Some(seed) = ocfg.controls_seed {
                    let control_seed = crate::rng::derive_seed(seed, fnv1a(&format!("{stem}/{lang}/{name}")));
                    let control = stats::sample_control(&pool, units, control_seed, ocfg.control_pool).map_err(upstream)?;
                    let cname = format!("{name}_random");
                    write_json(&set_dir.join(format!("{cname}.json")), &neuron_set(&cname, a, lang, &control))?;
                }
            }
        }
        let bytes = wr.into_inner().map_err(|e| upstream(e.to_string()))?;
        let path = tables.join(format!("partition_{stem}.csv"));
        write_file(&path, &bytes)?;
        log.add(&out, &path, "App F/G subset sizes (only-a / only-b / overlap)", n);
    }

    if !ocfg.cross.is_empty() {
        let mut wr = csv::Writer::from_writer(Vec::new());
        wr.write_record(["condition_a", "language_a", "condition_b", "language_b", "jaccard"])
            .map_err(upstream)?;
        for c in &ocfg.cross {
            let j = setlab::cross_jaccard(get(sel, &c.a)?, &c.lang_a, get(sel, &c.b)?, &c.lang_b).map_err(upstream)?;
            wr.write_record([c.a.as_str(), &c.lang_a, &c.b, &c.lang_b, &j.to_string()])
                .map_err(upstream)?;
        }
        let path = tables.join("cross_jaccard.csv");
        write_file(&path, &wr.into_inner().map_err(|e| upstream(e.to_string()))?)?;
        log.add(&out, &path, "Fig. 2 romanized-vs-English comparison", ocfg.cross.len());
    }

    if !ocfg.regions.is_empty() {
        let results: Vec<&SelectionResult> = ocfg.regions.iter().map(|r| get(sel, r)).collect::<Result<_, _>>()?;
        let mut tables_out: Vec<(String, RegionTable)> = Vec::new();
        tables_out.push((
            "all".into(),
            setlab::degree_regions(&results, None, ocfg.max_degree).map_err(upstream)?,
        ));
        for lang in &results[0].languages {
            tables_out.push((
                lang.clone(),
                setlab::degree_regions(&results, Some(lang), ocfg.max_degree).map_err(upstream)?,
            ));
        }
        let rows = tables_out.iter().map(|(_, t)| t.regions.len()).sum();
        let path = tables.join("degree_regions.csv");
        write_csv_with(&path, |buf| setlab::write_regions_csv(&tables_out, buf))?;
        log.add(&out, &path, "Fig. 1 / App D Euler regions (degree-k)", rows);
    }
    Ok(())
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

// ---------------------------------------------------------------------------
// probe

#[derive(Clone, Debug, Serialize)]
pub struct SubsetSummary {
    pub layer: u32,
    pub subset: String,
    pub units: usize,
    pub families: Vec<probe::FamilySummary>,
}

#[derive(Serialize)]
struct ProbeMeta<'a> {
    units: Vec<UnitRef>,
    features: &'a [String],
    families: Vec<&'static str>,
    dropped_features: &'a [String],
    fold_assignment: &'a IndexMap<String, usize>,
    partially_defined_pairs: usize,
    lambda: f64,
    folds: usize,
    seed: u64,
}

pub fn run_probe(
    cfg: &PipelineConfig,
    sel: &IndexMap<String, SelectionResult>,
    log: &mut TableLog,
) -> Result<Option<ProbeResult>, PipelineError> {
    let Some(pcfg) = &cfg.probe else {
        return Ok(None);
    };
    let params = cfg.probe_params()?;
    let out = cfg.out_dir();
    let cond = cfg.condition(&pcfg.condition)?;
    let agg = store::read_aggregate(&cfg.resolve(&cond.aggregate)).map_err(upstream)?;
    let layers: Vec<u32> = match &pcfg.layers {
        Some(l) => l.clone(),
        None => (0..agg.manifest.num_layers as u32).collect(),
    };
    if let Some(bad) = layers.iter().find(|&&l| l as usize >= agg.manifest.num_layers) {
        return Err(PipelineError::Validation(format!("probe layer {bad} is outside the aggregate")));
    }
    let units: Vec<UnitId> = agg.unit_ids().filter(|u| layers.contains(&u.layer)).collect();
    let typ = probe::load_typology_file(&cfg.resolve(&pcfg.typology), &agg.manifest.languages).map_err(upstream)?;
    if !typ.dropped.is_empty() {
        info!("dropped {} zero-variance typology features", typ.dropped.len());
    }
    let design = ProbingDesign::from_aggregate(&agg, &units, params.clone()).map_err(upstream)?;
    let result = probe::cv_r2(&design, &typ.matrix).map_err(upstream)?;

    let pdir = out.join("probe");
    create_dir(&pdir)?;
    store::write_matrix(&result.r2, &pdir.join("r2.lapm")).map_err(upstream)?;
    write_json(
        &pdir.join("r2_meta.json"),
        &ProbeMeta {
            units: units.iter().map(|u| UnitRef { layer: u.layer, index: u.index }).collect(),
            features: &result.features,
            families: result.families.iter().map(|f| f.as_str()).collect(),
            dropped_features: &typ.dropped,
            fold_assignment: &result.fold_assignment,
            partially_defined_pairs: result.partially_defined(),
            lambda: params.lambda,
            folds: params.folds,
            seed: params.seed,
        },
    )?;

    // Subsets per layer: condition-specific, overlap, and the whole layer.
    let mut subsets: Vec<(String, BTreeSet<UnitId>)> = Vec::new();
    if let Some((a, b)) = &pcfg.partition {
        let part = partition_results(get(sel, a)?, get(sel, b)?, None).map_err(upstream)?;
        subsets.push((format!("only_{a}"), part.only_a));
        subsets.push((format!("only_{b}"), part.only_b));
        subsets.push(("overlap".into(), part.overlap));
    } else if let Some(s) = sel.get(&pcfg.condition) {
        subsets.push(("selected".into(), s.all_units()));
    }
    subsets.push(("baseline".into(), units.iter().copied().collect()));

    let mut summaries = Vec::new();
    for &layer in &layers {
        for (name, set) in &subsets {
            let at_layer: BTreeSet<UnitId> = set.iter().filter(|u| u.layer == layer).copied().collect();
            match familywise_summary(&result, &at_layer) {
                Ok(families) => summaries.push(SubsetSummary {
                    layer,
                    subset: name.clone(),
                    units: at_layer.len(),
                    families,
                }),
                Err(probe::ProbeError::DisjointSubset) => {}
                Err(e) => return Err(upstream(e)),
            }
        }
    }
    write_json(&pdir.join("summaries.json"), &summaries)?;

    let mut wr = csv::Writer::from_writer(Vec::new());
    wr.write_record(["layer", "subset", "family", "mean_max_r2", "units"]).map_err(upstream)?;
    let mut rows = 0;
    for s in &summaries {
        for f in &s.families {
            wr.write_record([
                s.layer.to_string(),
                s.subset.clone(),
                f.family.to_string(),
                f.mean_max_r2.to_string(),
                f.units.to_string(),
            ])
            .map_err(upstream)?;
            rows += 1;
        }
    }
    let path = out.join("tables").join("probe_familywise.csv");
    write_file(&path, &wr.into_inner().map_err(|e| upstream(e.to_string()))?)?;
    log.add(&out, &path, "Fig. 5 / App F family-wise maximum R² per layer and subset", rows);
    log.add(&out, &pdir.join("r2.lapm"), "App F probe score matrix (units x features)", result.r2.rows);
    Ok(Some(result))
}

// ---------------------------------------------------------------------------
// intervention statistics

pub fn run_intervene_stats(cfg: &PipelineConfig, log: &mut TableLog) -> Result<(), PipelineError> {
    let Some(icfg) = &cfg.intervention else {
        return Ok(());
    };
    let out = cfg.out_dir();
    let path = cfg.resolve(&icfg.records);
    let file = fs::File::open(&path).map_err(|e| PipelineError::Upstream(format!("{}: {e}", path.display())))?;
    let records = stats::read_ppl_jsonl(BufReader::new(file)).map_err(upstream)?;
    let summaries = stats::aggregate_ppl(&records).map_err(upstream)?;
    let table = PplTable::new(&records).map_err(upstream)?;
    let rows = icfg
        .comparisons
        .iter()
        .map(|c| stats::compare(&table, c))
        .collect::<Result<Vec<_>, _>>()
        .map_err(upstream)?;

    let mut wr = csv::Writer::from_writer(Vec::new());
    for s in &summaries {
        wr.serialize(s).map_err(upstream)?;
    }
    let p = out.join("tables").join("ppl_summary.csv");
    write_file(&p, &wr.into_inner().map_err(|e| upstream(e.to_string()))?)?;
    log.add(&out, &p, "App G mean perplexity ratios and deltas per set", summaries.len());

    let p = out.join("tables").join("intervention.csv");
    write_csv_with(&p, |buf| stats::write_comparisons_csv(&rows, buf))?;
    log.add(&out, &p, "Tables 1-2 target vs matched random control with paired t-tests", rows.len());
    write_json(&out.join("intervention.json"), &rows)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// report

#[derive(Serialize)]
struct Provenance {
    tool: &'static str,
    version: &'static str,
    experiment: String,
    config_sha256: String,
    inputs: Vec<(String, String)>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn digest_path(path: &Path) -> Result<String, PipelineError> {
    let mut hasher = Sha256::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(io_at(path))?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(io_at(path))?;
        entries.sort();
        for e in entries.iter().filter(|e| e.is_file()) {
            hasher.update(e.file_name().unwrap_or_default().to_string_lossy().as_bytes());
            hasher.update(fs::read(e).map_err(io_at(e))?);
        }
    } else {
        hasher.update(fs::read(path).map_err(io_at(path))?);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Writes `provenance.json`: config hash, input digests and tool version.
pub fn write_provenance(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let mut inputs: Vec<(String, PathBuf)> = cfg
        .conditions
        .iter()
        .map(|c| (c.aggregate.display().to_string(), c.aggregate.clone()))
        .collect();
    if let Some(p) = &cfg.probe {
        inputs.push((p.typology.display().to_string(), p.typology.clone()));
    }
    if let Some(i) = &cfg.intervention {
        inputs.push((i.records.display().to_string(), i.records.clone()));
    }
    let inputs = inputs
        .into_iter()
        .map(|(label, p)| Ok((label, digest_path(&cfg.resolve(&p))?)))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    write_json(
        &cfg.out_dir().join("provenance.json"),
        &Provenance {
            tool: "langunits",
            version: TOOL_VERSION,
            experiment: cfg.experiment.clone(),
            config_sha256: sha256_hex(&cfg.source_bytes),
            inputs,
        },
    )
}

#[derive(Serialize)]
struct BundleManifest<'a> {
    experiment: &'a str,
    tables: &'a [TableEntry],
}

/// Runs every configured stage and writes the bundle manifest.
pub fn run_report(cfg: &PipelineConfig) -> Result<TableLog, PipelineError> {
    cfg.validate()?;
    let mut log = TableLog::default();
    let sel = run_select(cfg, &mut log)?;
    run_overlap(cfg, &sel, &mut log)?;
    run_probe(cfg, &sel, &mut log)?;
    run_intervene_stats(cfg, &mut log)?;
    finish(cfg, &log)?;
    Ok(log)
}

/// Writes provenance plus the table manifest for whatever stages ran.
pub fn finish(cfg: &PipelineConfig, log: &TableLog) -> Result<(), PipelineError> {
    write_provenance(cfg)?;
    write_json(
        &cfg.out_dir().join("manifest.json"),
        &BundleManifest {
            experiment: &cfg.experiment,
            tables: &log.tables,
        },
    )
}

/// Runs `f` on a pool with `threads` workers (0 = rayon default).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| PipelineError::Validation(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
