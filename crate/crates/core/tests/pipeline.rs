mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use langunits::config::PipelineConfig;
use langunits::pipeline::{self, TableLog};
use langunits::store;
use langunits::SelectionResult;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_langunits"));
    c.env("RUST_LOG", "warn");
    c
}

fn minimal_config(dir: &Path) -> std::path::PathBuf {
    let (a, b) = common::pipeline_conditions(3, 2, 300, 4);
    store::write_aggregate(&a, &dir.join("runs/native")).unwrap();
    store::write_aggregate(&b, &dir.join("runs/romanized")).unwrap();
    let path = dir.join("min.toml");
    fs::write(
        &path,
        "experiment = \"min\"\noutput_dir = \"out\"\n\n[[conditions]]\nname = \"native\"\naggregate = \"runs/native\"\n\n[[conditions]]\nname = \"romanized\"\naggregate = \"runs/romanized\"\n",
    )
    .unwrap();
    path
}

#[test]
fn minimal_config_writes_two_selection_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = minimal_config(dir.path());
    let status = bin().args(["select", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(0));
    let mut files: Vec<String> = fs::read_dir(dir.path().join("out/selection"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    assert_eq!(files, ["native.json", "romanized.json"]);
    let text = fs::read_to_string(dir.path().join("out/selection/native.json")).unwrap();
    let r = SelectionResult::from_json(&text).unwrap();
    assert_eq!(r.condition, "native");
    assert!(dir.path().join("out/provenance.json").exists());
}

#[test]
fn missing_aggregate_is_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = minimal_config(dir.path());
    fs::remove_dir_all(dir.path().join("runs/romanized")).unwrap();
    let out = bin().args(["select", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out/selection/native.json").exists());
}

#[test]
fn corrupt_aggregate_is_upstream_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = minimal_config(dir.path());
    let layer = dir.path().join("runs/native").join(store::layer_file_name(1));
    let mut bytes = fs::read(&layer).unwrap();
    bytes.truncate(bytes.len() - 3);
    fs::write(&layer, bytes).unwrap();
    let out = bin().args(["select", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bad_config_and_usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "experiment = 1\n").unwrap();
    assert_eq!(bin().args(["report", "--config"]).arg(&cfg).status().unwrap().code(), Some(2));
    // shuffle without --seed is a usage error
    assert_eq!(
        bin().args(["perturb", "shuffle", "--in", "a", "--out", "b"]).output().unwrap().status.code(),
        Some(2)
    );
}

#[test]
fn overlap_without_select_is_upstream_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_pipeline_fixture(dir.path(), 5);
    let out = bin().args(["overlap", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn perturb_commands_write_corpus_and_meta() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.txt");
    fs::write(&input, "héllo wörld again\nsingle\n").unwrap();
    let shuffled = dir.path().join("shuf.txt");
    let status = bin()
        .args(["perturb", "shuffle", "--seed", "9", "--in"])
        .arg(&input)
        .arg("--out")
        .arg(&shuffled)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let text = fs::read_to_string(&shuffled).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let mut w: Vec<&str> = lines[0].split(' ').collect();
    w.sort();
    assert_eq!(w, ["again", "héllo", "wörld"]);
    assert_eq!(lines[1], "single");
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("shuf.txt.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 9);

    let ascii = dir.path().join("ascii.txt");
    let status = bin()
        .args(["perturb", "ascii", "--in"])
        .arg(&input)
        .arg("--out")
        .arg(&ascii)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert_eq!(fs::read_to_string(&ascii).unwrap(), "hello world again\nsingle\n");
}

#[test]
fn report_lists_tables_and_replays_intervention_means() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_pipeline_fixture(dir.path(), 5);
    let status = bin().args(["report", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(0));
    let out = dir.path().join("out");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let tables = manifest["tables"].as_array().unwrap();
    assert!(tables.len() >= 8, "{} tables", tables.len());
    for t in tables {
        assert!(out.join(t["path"].as_str().unwrap()).exists(), "{t}");
        assert!(!t["mirrors"].as_str().unwrap().is_empty());
    }

    let mut rdr = csv::Reader::from_path(out.join("tables/intervention.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let row = |lang: &str, set: &str| rows.iter().find(|r| &r[0] == lang && &r[1] == set).unwrap().clone();
    assert_eq!(&row("en", "overlap")[5], "0.95");
    assert_eq!(&row("hi", "only_native")[5], "0.31");
    let p: f64 = row("hi", "only_native")[10].parse().unwrap();
    assert!(p < 0.05);

    let prov: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(prov["inputs"].as_array().unwrap().len(), 4);
}

#[test]
fn report_is_byte_identical_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_pipeline_fixture(dir.path(), 8);
    let run = |threads: &str, out: &str| {
        let status = bin()
            .args(["--threads", threads, "report", "--config"])
            .arg(&cfg)
            .args(["--out"])
            .arg(dir.path().join(out))
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
        common::snapshot(&dir.path().join(out))
    };
    let a = run("1", "o1");
    let b = run("1", "o2");
    let c = run("4", "o3");
    assert!(a.len() > 10);
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn empty_selection_emits_zero_row_tables() {
    let dir = tempfile::tempdir().unwrap();
    // 2 x 40 units: floor(0.01 * 80) = 0 units kept.
    let (a, b) = common::pipeline_conditions(1, 2, 40, 4);
    store::write_aggregate(&a, &dir.path().join("a")).unwrap();
    store::write_aggregate(&b, &dir.path().join("b")).unwrap();
    let text = "experiment = \"e\"\noutput_dir = \"out\"\n[[conditions]]\nname = \"a\"\naggregate = \"a\"\n[[conditions]]\nname = \"b\"\naggregate = \"b\"\n[overlap]\npairs = [[\"a\", \"b\"]]\nregions = [\"a\", \"b\"]\n";
    let cfg = PipelineConfig::from_toml(text, dir.path()).unwrap();
    let log = pipeline::run_report(&cfg).unwrap();
    let units = log.tables.iter().find(|t| t.path == "tables/selection_a_units.csv").unwrap();
    assert_eq!(units.rows, 0);
    let text = fs::read_to_string(dir.path().join("out/tables/selection_a_units.csv")).unwrap();
    assert_eq!(text.lines().count(), 1, "header only");
    let jac = fs::read_to_string(dir.path().join("out/tables/jaccard_a_vs_b.csv")).unwrap();
    assert!(jac.lines().skip(1).all(|l| l.contains(",0,")), "{jac}");
}

#[test]
fn planted_fixture_selection_matches_construction() {
    let dir = tempfile::tempdir().unwrap();
    let p = common::planted_raw(21, 4, 500, 5, 20);
    store::write_aggregate(&p.agg, &dir.path().join("planted")).unwrap();
    let text = "experiment = \"p\"\noutput_dir = \"out\"\n[[conditions]]\nname = \"planted\"\naggregate = \"planted\"\n";
    let cfg = PipelineConfig::from_toml(text, dir.path()).unwrap();
    cfg.validate().unwrap();
    let sel = pipeline::run_select(&cfg, &mut TableLog::default()).unwrap();
    let r = &sel["planted"];
    let got: std::collections::BTreeMap<_, _> = r
        .per_language
        .iter()
        .flat_map(|(lang, units)| {
            let k = r.languages.iter().position(|l| l == lang).unwrap();
            units.iter().map(move |u| (r.unit_id(u), k))
        })
        .collect();
    assert_eq!(got, p.planted);
}

#[test]
fn shipped_templates_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in fs::read_dir(&root).unwrap() {
        let path = e.unwrap().path();
        if path.extension().is_some_and(|x| x == "toml") {
            PipelineConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert_eq!(n, 4);
}
