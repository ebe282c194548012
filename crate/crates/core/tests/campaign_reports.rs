use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use patchsearch::campaign::{
    analyze_outputs, emit_reports, read_archive_genomes, run_campaign, synthetic_items, write_synthetic_dataset,
    CampaignConfig, CampaignReport, NamedDetector, REPORT_FILES,
};
use patchsearch::detector::{generate_scene_suite, DetectorSpec, SceneSuiteParams};
use patchsearch::search::Algorithm;
use serde_json::Value;

fn config(classify_all_random: bool) -> CampaignConfig {
    let mut c = CampaignConfig {
        detectors: ["synthetic", "synthetic:30"]
            .iter()
            .map(|s| NamedDetector {
                name: s.to_string(),
                spec: DetectorSpec::parse(s).unwrap(),
            })
            .collect(),
        workers: 2,
        classify_all_random,
        ..CampaignConfig::default()
    };
    c.search.population_size = 6;
    c.search.generations = 3;
    c.search.runs = 2;
    c.search.seed = 11;
    c
}

fn campaign(classify_all_random: bool) -> CampaignReport {
    let scenes = generate_scene_suite(2, 5, &SceneSuiteParams::default()).unwrap();
    let items = synthetic_items(&scenes).unwrap();
    let c = config(classify_all_random);
    let detectors = c.build_detectors().unwrap();
    run_campaign(&c, &items, &detectors).unwrap()
}

fn read_all(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    REPORT_FILES
        .iter()
        .map(|f| (f.to_string(), fs::read(dir.join(f)).unwrap()))
        .collect()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn col(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap()
}

#[test]
fn rerun_and_reemission_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = campaign(false);
    emit_reports(&first, a.path()).unwrap();
    emit_reports(&campaign(false), b.path()).unwrap();
    assert_eq!(read_all(a.path()), read_all(b.path()));
    emit_reports(&first, b.path()).unwrap();
    assert_eq!(read_all(a.path()), read_all(b.path()));
    let leftovers: Vec<_> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".tmp"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn failure_rates_recomputed_from_csv_match_summary() {
    let dir = tempfile::tempdir().unwrap();
    let report = campaign(false);
    emit_reports(&report, dir.path()).unwrap();
    let (h, rows) = csv_rows(&dir.path().join("failures.csv"));
    assert_eq!(rows.len(), report.rows.len());
    let mut tally: BTreeMap<(String, String), (usize, usize)> = BTreeMap::new();
    for r in &rows {
        let e = tally
            .entry((r[col(&h, "detector")].clone(), r[col(&h, "algorithm")].clone()))
            .or_default();
        e.0 += (r[col(&h, "y_i")] == "1") as usize;
        e.1 += 1;
    }
    let summary: Value = serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    let comparisons = summary["comparisons"].as_array().unwrap();
    assert_eq!(comparisons.len(), 2);
    for c in comparisons {
        for alg in ["nsga2", "random"] {
            let (failing, total) = tally[&(c["detector"].as_str().unwrap().to_string(), alg.to_string())];
            let fr = c[alg]["failure_rate"].as_f64().unwrap();
            assert_eq!(fr, failing as f64 / total as f64, "{alg}");
            assert_eq!(c[alg]["failing"].as_u64().unwrap() as usize, failing);
        }
    }
}

#[test]
fn rows_reconcile_with_archives() {
    let report = campaign(false);
    assert_eq!(report.runs.len(), 2 * 2 * 2 * 2);
    for run in &report.runs {
        assert_eq!(run.evaluations, 18);
        let rows: Vec<_> = report
            .rows
            .iter()
            .filter(|r| {
                r.detector == run.detector
                    && r.image_id == run.image_id
                    && r.run_id == run.run_id
                    && r.algorithm == run.algorithm
            })
            .collect();
        assert_eq!(rows.len(), run.archive_size);
        let failing = rows.iter().filter(|r| r.failure.failed).count();
        let stable = rows.iter().filter(|r| r.stability.is_some()).count();
        assert_eq!(failing + stable, run.archive_size);
        assert_eq!(failing, run.failing);
    }
    for c in &report.comparisons {
        for s in [&c.nsga2, &c.random] {
            let non_failing = s.classified - s.failing;
            assert_eq!(s.stability.confidence.total(), non_failing);
            assert_eq!(s.stability.localization.total(), non_failing);
        }
    }
}

#[test]
fn manifest_records_equal_budgets() {
    let dir = tempfile::tempdir().unwrap();
    let report = campaign(false);
    emit_reports(&report, dir.path()).unwrap();
    let manifest: Value = serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["master_seed"], 11);
    assert_eq!(manifest["run_seeds"], serde_json::json!([11, 12]));
    assert_eq!(manifest["config_hash"].as_str().unwrap(), report.config.hash());
    for (_, calls) in manifest["detector_calls"].as_object().unwrap() {
        assert_eq!(calls["nsga2"], calls["random"]);
        assert_eq!(calls["nsga2"], 2 * 2 * 18);
        assert_eq!(calls["clean"], 2);
    }
}

#[test]
fn classify_all_random_covers_every_evaluation() {
    let report = campaign(true);
    for run in report.runs.iter().filter(|r| r.algorithm == Algorithm::Random) {
        assert_eq!(run.classified, run.evaluations - run.evaluation_failures);
        let archived = report
            .rows
            .iter()
            .filter(|r| r.algorithm == Algorithm::Random && r.image_id == run.image_id && r.run_id == run.run_id)
            .filter(|r| r.detector == run.detector && r.archived)
            .count();
        assert_eq!(archived, run.archive_size);
    }
}

#[test]
fn empty_report_writes_headers_only() {
    let report = CampaignReport {
        config: CampaignConfig::default(),
        config_hash: CampaignConfig::default().hash(),
        run_seeds: vec![],
        images: vec![],
        rows: vec![],
        runs: vec![],
        comparisons: vec![],
        transferability: vec![],
        errors: vec![],
        detector_calls: BTreeMap::new(),
    };
    let dir = tempfile::tempdir().unwrap();
    let files = emit_reports(&report, dir.path()).unwrap();
    assert_eq!(files.len(), REPORT_FILES.len());
    for name in ["candidates.csv", "archives.csv", "failures.csv", "stability.csv"] {
        let text = fs::read_to_string(dir.path().join(name)).unwrap();
        assert_eq!(text.lines().count(), 1, "{name}");
    }
    let manifest: Value = serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["files"].as_array().unwrap().len(), REPORT_FILES.len());
}

#[test]
fn unwritable_outdir_leaves_nothing_behind() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("out");
    fs::write(&blocker, "file, not a directory").unwrap();
    assert!(emit_reports(&campaign(false), &blocker).is_err());
    assert_eq!(fs::read_to_string(&blocker).unwrap(), "file, not a directory");

    // a directory squatting on one report name makes the rename fail midway
    let out = dir.path().join("partial");
    fs::create_dir_all(out.join("summary.json")).unwrap();
    assert!(emit_reports(&campaign(false), &out).is_err());
    let names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names, ["summary.json"]);
}

#[test]
fn analyze_matches_in_memory_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let report = campaign(false);
    emit_reports(&report, dir.path()).unwrap();
    let analysis = analyze_outputs(dir.path(), report.config.hv_ref).unwrap();
    assert_eq!(analysis.comparisons.len(), report.comparisons.len());
    for (a, m) in analysis.comparisons.iter().zip(&report.comparisons) {
        assert_eq!(a.detector, m.detector);
        for (x, y) in [(&a.nsga2, &m.nsga2), (&a.random, &m.random)] {
            assert_eq!(x.failure_rate, y.failure_rate);
            assert_eq!(x.occurrences, y.occurrences);
            assert_eq!(x.stability, y.stability);
            let (hx, hy) = (x.mean_hypervolume.unwrap(), y.mean_hypervolume.unwrap());
            assert!((hx - hy).abs() < 1e-4, "{hx} vs {hy}");
        }
    }
}

#[test]
fn archives_csv_replays_to_the_in_memory_genomes() {
    let dir = tempfile::tempdir().unwrap();
    let report = campaign(false);
    emit_reports(&report, dir.path()).unwrap();
    let genomes = read_archive_genomes(&dir.path().join("archives.csv")).unwrap();
    let archived = report.rows.iter().filter(|r| r.archived).count();
    assert_eq!(genomes.values().map(Vec::len).sum::<usize>(), archived);
    for ((det, alg), list) in &genomes {
        let mem: Vec<_> = report
            .rows
            .iter()
            .filter(|r| r.archived && &r.detector == det && r.algorithm == *alg)
            .collect();
        assert_eq!(mem.len(), list.len());
        for (m, g) in mem.iter().zip(list) {
            assert_eq!(m.image_id, g.image_id);
            let (a, b) = (m.genome.to_array(), g.genome.to_array());
            assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 5e-7), "{a:?} vs {b:?}");
        }
    }
}

#[test]
fn dataset_on_disk_loads_back_for_a_campaign() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = generate_scene_suite(2, 5, &SceneSuiteParams::default()).unwrap();
    let written = write_synthetic_dataset(&scenes, dir.path()).unwrap();
    let mut c = config(false);
    c.images = Some(dir.path().join("images"));
    c.labels = Some(dir.path().join("labels"));
    let (items, warnings) = c.load_items().unwrap();
    assert!(warnings.is_empty());
    assert_eq!(items.len(), written.len());
    for (a, b) in items.iter().zip(&written) {
        assert_eq!(a.image_id, b.image_id);
        assert_eq!(a.image, b.image);
        assert_eq!(a.annotations.len(), b.annotations.len());
        for (x, y) in a.annotations.iter().zip(&b.annotations) {
            assert_eq!(x.class_id, y.class_id);
            assert!((x.bbox.x_min - y.bbox.x_min).abs() < 1e-3 && (x.bbox.y_max - y.bbox.y_max).abs() < 1e-3);
        }
    }
    let detectors = c.build_detectors().unwrap();
    let report = run_campaign(&c, &items, &detectors).unwrap();
    assert_eq!(report.images, ["scene_000", "scene_001"]);
}
