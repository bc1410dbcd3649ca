//! Seeded synthetic aggregates and pipeline fixtures shared by the test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use langunits::rng::{self, EngineRng};
use langunits::stats::{write_ppl_jsonl, Ablation, PplRecord};
use langunits::store::{self, ActivationAggregate, LayerStats, RunManifest, UnitId, UnitKind};
use rand_core::RngCore;

pub struct Gen(EngineRng);

impl Gen {
    pub fn new(seed: u64) -> Self {
        Gen(rng::seeded(seed))
    }

    /// Uniform in [0, 1).
    pub fn f64(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.f64()
    }

    pub fn below(&mut self, n: u64) -> u64 {
        rng::below(&mut self.0, n)
    }

    pub fn usize_in(&mut self, lo: usize, hi_inclusive: usize) -> usize {
        lo + self.below((hi_inclusive - lo + 1) as u64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.f64();
        let u2 = self.f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn bool(&mut self, p: f64) -> bool {
        self.f64() < p
    }

    pub fn rng(&mut self) -> &mut EngineRng {
        &mut self.0
    }
}

pub fn langs(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("l{i:02}")).collect()
}

pub fn manifest(kind: UnitKind, layers: usize, units: usize, languages: Vec<String>, tokens: u64, examples: u64) -> RunManifest {
    let k = languages.len();
    RunManifest {
        model_name: "synthetic".into(),
        kind,
        num_layers: layers,
        units_per_layer: units,
        languages,
        tokens_per_language: vec![tokens; k],
        examples_per_language: vec![examples; k],
        condition: "synthetic".into(),
    }
}

/// Fills counts from activation probabilities `prob(layer, unit, language)`.
pub fn aggregate_from_probs(
    manifest: RunManifest,
    g: &mut Gen,
    mut prob: impl FnMut(usize, usize, usize, &mut Gen) -> f64,
) -> ActivationAggregate {
    let mut agg = ActivationAggregate::zeros(manifest).unwrap();
    let m = agg.manifest.clone();
    for l in 0..m.num_layers {
        for k in 0..m.languages.len() {
            for u in 0..m.units_per_layer {
                let p = prob(l, u, k, g).clamp(0.0, 1.0);
                let c = agg.cell(k, u);
                let tokens = (p * m.tokens_per_language[k] as f64).round() as u64;
                let examples = ((3.0 * p).min(1.0) * m.examples_per_language[k] as f64).round() as u64;
                let layer = &mut agg.layers[l];
                layer.token_active_count[c] = tokens;
                layer.example_active_count[c] = examples;
                layer.activation_sum[c] = tokens as f64 * g.range(0.1, 2.0);
            }
        }
    }
    agg
}

/// Random shape and contents, including zero rows and extreme counts.
pub fn random_aggregate(seed: u64) -> ActivationAggregate {
    let mut g = Gen::new(seed);
    let kind = if g.bool(0.5) { UnitKind::Raw } else { UnitKind::Sae };
    let layers = g.usize_in(1, 4);
    let units = g.usize_in(1, 40);
    let k = g.usize_in(1, 6);
    let mut m = manifest(kind, layers, units, langs(k), 0, 0);
    m.tokens_per_language = (0..k).map(|_| 1 + g.below(1 << 40)).collect();
    m.examples_per_language = (0..k).map(|_| 1 + g.below(5000)).collect();
    m.condition = format!("c{seed}");
    let mut agg = ActivationAggregate::zeros(m).unwrap();
    let m = agg.manifest.clone();
    for layer in agg.layers.iter_mut() {
        let LayerStats {
            token_active_count,
            example_active_count,
            activation_sum,
        } = layer;
        for c in 0..token_active_count.len() {
            let kk = c / m.units_per_layer;
            token_active_count[c] = g.below(m.tokens_per_language[kk] + 1);
            example_active_count[c] = g.below(m.examples_per_language[kk] + 1);
            activation_sum[c] = match g.below(4) {
                0 => 0.0,
                1 => -0.0,
                2 => f64::from_bits(g.rng().next_u64() & !(0x7ff << 52)), // subnormal or tiny
                _ => g.normal() * 1e6,
            };
        }
    }
    agg
}

pub struct Planted {
    pub agg: ActivationAggregate,
    /// Planted unit → the language it is specific to.
    pub planted: BTreeMap<UnitId, usize>,
}

/// Raw aggregate with `n_planted` units at 0.9 in one language and ≤ 0.02
/// elsewhere over a uniform [0, 0.3] background.
pub fn planted_raw(seed: u64, layers: usize, units: usize, k: usize, n_planted: usize) -> Planted {
    let mut g = Gen::new(seed);
    let total = layers * units;
    let mut order: Vec<usize> = (0..total).collect();
    rng::partial_shuffle(&mut order, n_planted, g.rng());
    let chosen: BTreeMap<usize, usize> = order[..n_planted]
        .iter()
        .enumerate()
        .map(|(i, &flat)| (flat, i % k))
        .collect();
    let m = manifest(UnitKind::Raw, layers, units, langs(k), 1_000_000, 1000);
    let agg = aggregate_from_probs(m, &mut g, |l, u, lang, g| match chosen.get(&(l * units + u)) {
        Some(&target) if target == lang => 0.9,
        Some(_) => g.range(0.0, 0.02),
        None => g.range(0.0, 0.3),
    });
    let planted = chosen
        .iter()
        .map(|(&flat, &lang)| (UnitId::new((flat / units) as u32, (flat % units) as u32, UnitKind::Raw), lang))
        .collect();
    Planted { agg, planted }
}

/// Two raw conditions whose planted sets partially overlap, with per-language
/// typology signal in the mean activations.
pub fn pipeline_conditions(seed: u64, layers: usize, units: usize, k: usize) -> (ActivationAggregate, ActivationAggregate) {
    let mut g = Gen::new(seed);
    let per_lang = (layers * units / 100).max(1) / k + 1;
    let mut native: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut roman: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for lang in 0..k {
        for j in 0..per_lang {
            let key = (g.usize_in(0, layers - 1), g.usize_in(0, units - 1));
            native.insert(key, lang);
            if j % 2 == 0 {
                roman.insert(key, lang);
            } else {
                roman.insert((g.usize_in(0, layers - 1), g.usize_in(0, units - 1)), lang);
            }
        }
    }
    let build = |planted: &BTreeMap<(usize, usize), usize>, g: &mut Gen, name: &str| {
        let mut m = manifest(UnitKind::Raw, layers, units, langs(k), 50_000, 200);
        m.condition = name.into();
        let mut agg = aggregate_from_probs(m, g, |l, u, lang, g| match planted.get(&(l, u)) {
            Some(&t) if t == lang => 0.85,
            Some(_) => g.range(0.0, 0.01),
            None => g.range(0.0, 0.25),
        });
        // Tie mean activation to a language-level signal so probes have structure.
        for l in 0..layers {
            for lang in 0..k {
                for u in 0..units {
                    let c = agg.cell(lang, u);
                    let t = agg.layers[l].token_active_count[c] as f64;
                    let signal = 1.0 + (lang as f64 * 0.3) * ((u % 7) as f64 / 7.0);
                    agg.layers[l].activation_sum[c] = t * signal;
                }
            }
        }
        agg
    };
    let a = build(&native, &mut g, "native");
    let b = build(&roman, &mut g, "romanized");
    (a, b)
}

pub fn typology_csv(k: usize, seed: u64) -> String {
    let mut g = Gen::new(seed);
    let cols = [
        "fam_indo_european",
        "fam_dravidian",
        "syntax_sov",
        "syntax_svo",
        "syntax_adj_noun",
        "phonology_tone",
        "phonology_vowels",
        "geo_lat",
        "geo_lon",
        "inventory_clicks",
        "syntax_constant",
    ];
    let mut s = format!("lang,{}\n", cols.join(","));
    for (lang, code) in langs(k).iter().enumerate() {
        let row: Vec<String> = cols
            .iter()
            .map(|c| match *c {
                "syntax_constant" => "1".into(),
                "geo_lat" | "geo_lon" => format!("{:.3}", lang as f64 * 0.1 + g.normal() * 0.05),
                _ => (g.below(2)).to_string(),
            })
            .collect();
        s.push_str(&format!("{code},{}\n", row.join(",")));
    }
    s
}

/// Per-example ratios averaging to `mean_ratio`, paired with a flatter control.
pub fn ppl_records(language: &str, target: &str, control: &str, mean_ratio: f64, n: u64, g: &mut Gen) -> Vec<PplRecord> {
    let mut out = Vec::new();
    for i in 0..n {
        let clean = 5.0 + (i % 13) as f64;
        let wiggle = if i % 2 == 0 { 0.05 } else { -0.05 };
        out.push(PplRecord {
            example_id: i,
            language: language.into(),
            ppl_clean: clean,
            ppl_patched: clean * (mean_ratio + wiggle),
            set_id: target.into(),
            ablation: Ablation::Zero,
        });
        out.push(PplRecord {
            example_id: i,
            language: language.into(),
            ppl_clean: clean,
            ppl_patched: clean * (1.0 + g.range(-0.02, 0.02)),
            set_id: control.into(),
            ablation: Ablation::Zero,
        });
    }
    out
}

/// Writes aggregates, typology, PPL records and a full config into `dir`.
pub fn write_pipeline_fixture(dir: &Path, seed: u64) -> PathBuf {
    let k = 10;
    let (native, roman) = pipeline_conditions(seed, 6, 400, k);
    store::write_aggregate(&native, &dir.join("runs/native")).unwrap();
    store::write_aggregate(&roman, &dir.join("runs/romanized")).unwrap();
    fs::write(dir.join("typology.csv"), typology_csv(k, seed ^ 0x55)).unwrap();

    let mut g = Gen::new(seed ^ 0xaa);
    let mut records = ppl_records("en", "overlap", "overlap_random", 0.95, 100, &mut g);
    records.extend(ppl_records("hi", "only_native", "only_native_random", 0.31, 100, &mut g));
    let mut buf = Vec::new();
    write_ppl_jsonl(&records, &mut buf).unwrap();
    fs::write(dir.join("ppl.jsonl"), buf).unwrap();

    let config = r#"experiment = "synthetic"
output_dir = "out"

[[conditions]]
name = "native"
aggregate = "runs/native"

[[conditions]]
name = "romanized"
aggregate = "runs/romanized"

[overlap]
pairs = [["native", "romanized"]]
regions = ["native", "romanized"]
controls_seed = 11

[[overlap.cross]]
a = "romanized"
lang_a = "l01"
b = "native"
lang_b = "l00"

[probe]
typology = "typology.csv"
condition = "native"
partition = ["native", "romanized"]
layers = [0, 3, 5]
folds = 5
seed = 7
block_size = 64

[intervention]
records = "ppl.jsonl"

[[intervention.comparisons]]
language = "en"
target = "overlap"
control = "overlap_random"

[[intervention.comparisons]]
language = "hi"
target = "only_native"
control = "only_native_random"
"#;
    let path = dir.join("config.toml");
    fs::write(&path, config).unwrap();
    path
}

/// All files under `dir` with their bytes, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Raw selection result with the given per-language `(layer, index)` lists.
pub fn selection(condition: &str, layers: usize, units: usize, sets: &[(String, Vec<(u32, u32)>)]) -> langunits::SelectionResult {
    use langunits::selection::{SelectedUnit, SelectionMode};
    langunits::SelectionResult {
        mode: SelectionMode::RawLape,
        model_name: "synthetic".into(),
        kind: UnitKind::Raw,
        condition: condition.into(),
        num_layers: layers,
        units_per_layer: units,
        languages: sets.iter().map(|(l, _)| l.clone()).collect(),
        config_echo: Default::default(),
        threshold: Some(0.5),
        dropped_unassigned: 0,
        per_language: sets
            .iter()
            .map(|(l, units)| {
                let mut units = units.clone();
                units.sort_unstable();
                units.dedup();
                let units = units
                    .into_iter()
                    .map(|(layer, index)| SelectedUnit {
                        layer,
                        index,
                        entropy: 0.1,
                        probs: vec![],
                    })
                    .collect();
                (l.clone(), units)
            })
            .collect(),
    }
}

/// Random selection over `langs` languages in a `layers x units` universe.
pub fn random_selection(g: &mut Gen, condition: &str, k: usize, layers: usize, units: usize, density: f64) -> langunits::SelectionResult {
    let sets: Vec<(String, Vec<(u32, u32)>)> = langs(k)
        .into_iter()
        .map(|l| {
            let mut v = Vec::new();
            for layer in 0..layers as u32 {
                for index in 0..units as u32 {
                    if g.bool(density) {
                        v.push((layer, index));
                    }
                }
            }
            (l, v)
        })
        .collect();
    selection(condition, layers, units, &sets)
}
