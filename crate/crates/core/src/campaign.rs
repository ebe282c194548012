//! Campaign orchestration: every annotated image is searched by both
//! algorithms under every configured detector, archived candidates are
//! classified, and the results are aggregated, replayed across detectors and
//! written out as CSV and JSON.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detection::{apply_conf_floor, load_dataset, DatasetItem, Detection, LabelLine, LoadWarning};
use crate::detector::{render_synthetic_scene, DetectorHandle, DetectorSpec, SyntheticSceneSpec, SYNTHETIC_CLASSES};
use crate::error::{Error, Result};
use crate::failure_oracle::{
    categorize_stability, classify_failures, perturbation_deviation, stability_deviation, FailureCounts,
    FailureRecord, FailureThresholds, StabilityCategory, StabilityDeviation, StabilityThresholds,
};
use crate::geometry::build_roi;
use crate::objectives::{EvaluatedCandidate, ObjectiveVector};
use crate::perturbation::{apply_perturbation, BoundsConfig, GenomeBounds, PerturbationGenome, GENOME_COLUMNS};
use crate::search::{
    nsga2_run, random_search_run_with, Algorithm, EvaluationFailure, ParetoArchive, Problem, SearchConfig,
};
use crate::stats::{hypervolume, mann_whitney_u, wilcoxon_signed_rank, TestResult, DEFAULT_HV_REF};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedDetector {
    pub name: String,
    #[serde(flatten)]
    pub spec: DetectorSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignConfig {
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub classes: Vec<String>,
    pub detectors: Vec<NamedDetector>,
    pub bounds: BoundsConfig,
    /// `search.seed` is the master seed; run `k` uses `seed + k`.
    pub search: SearchConfig,
    pub failure: FailureThresholds,
    pub stability: StabilityThresholds,
    pub hv_ref: [f64; 3],
    /// Worker threads for (detector, image, run, algorithm) tasks; 0 picks the core count.
    pub workers: usize,
    /// Classify every random-search evaluation instead of only the archive.
    pub classify_all_random: bool,
    pub out: PathBuf,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            images: None,
            labels: None,
            classes: SYNTHETIC_CLASSES.iter().map(|s| s.to_string()).collect(),
            detectors: vec![NamedDetector {
                name: "synthetic".into(),
                spec: DetectorSpec::parse("synthetic").expect("builtin detector spec"),
            }],
            bounds: BoundsConfig::default(),
            search: SearchConfig::default(),
            failure: FailureThresholds::default(),
            stability: StabilityThresholds::default(),
            hv_ref: DEFAULT_HV_REF,
            workers: 0,
            classify_all_random: false,
            out: PathBuf::from("out"),
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        self.search.validate()?;
        self.failure.validate()?;
        self.stability.validate()?;
        if self.detectors.is_empty() {
            return Err(Error::Config("at least one detector is required".into()));
        }
        let names: BTreeSet<&str> = self.detectors.iter().map(|d| d.name.as_str()).collect();
        if names.len() != self.detectors.len() {
            return Err(Error::Config("detector names must be unique".into()));
        }
        if self.hv_ref.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Config(format!("bad hypervolume reference {:?}", self.hv_ref)));
        }
        for p in [&self.images, &self.labels].into_iter().flatten() {
            if !p.is_dir() {
                return Err(Error::Config(format!("directory {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        (0..self.search.runs).map(|k| self.search.run_seed(k)).collect()
    }

    pub fn build_detectors(&self) -> Result<Vec<DetectorHandle>> {
        self.detectors.iter().map(|d| d.spec.build(&d.name)).collect()
    }

    pub fn load_items(&self) -> Result<(Vec<DatasetItem>, Vec<LoadWarning>)> {
        let images = self
            .images
            .as_ref()
            .ok_or_else(|| Error::Config("no image directory configured".into()))?;
        let labels = self.labels.as_ref().unwrap_or(images);
        load_dataset(images, labels, &self.classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityEntry {
    pub deviation: StabilityDeviation,
    pub confidence: StabilityCategory,
    pub localization: StabilityCategory,
}

impl StabilityEntry {
    pub fn is_violation(&self) -> bool {
        self.confidence.is_violation() || self.localization.is_violation()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub detector: String,
    pub image_id: String,
    pub run_id: usize,
    pub algorithm: Algorithm,
    pub evaluation_index: usize,
    /// Whether the candidate belongs to the run's nondominated archive.
    pub archived: bool,
    pub genome: PerturbationGenome,
    pub objectives: ObjectiveVector,
    pub failure: FailureRecord,
    /// Present for non-failing candidates only.
    pub stability: Option<StabilityEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub detector: String,
    pub image_id: String,
    pub run_id: usize,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub evaluations: usize,
    pub archive_size: usize,
    pub classified: usize,
    pub failing: usize,
    pub failure_rate: Option<f64>,
    pub hypervolume: f64,
    pub occurrences: FailureCounts,
    pub evaluation_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub detector: String,
    pub image_id: String,
    pub run_id: Option<usize>,
    pub algorithm: Option<Algorithm>,
    pub evaluation_index: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub minor: usize,
    pub small: usize,
    pub moderate: usize,
    pub large: usize,
}

impl CategoryCounts {
    fn add(&mut self, c: StabilityCategory) {
        match c {
            StabilityCategory::Minor => self.minor += 1,
            StabilityCategory::Small => self.small += 1,
            StabilityCategory::Moderate => self.moderate += 1,
            StabilityCategory::Large => self.large += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.minor + self.small + self.moderate + self.large
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StabilityHistogram {
    pub confidence: CategoryCounts,
    pub localization: CategoryCounts,
    /// Perturbations with a moderate or large deviation on either measure.
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSummary {
    pub algorithm: Algorithm,
    pub runs: usize,
    pub mean_hypervolume: Option<f64>,
    pub classified: usize,
    pub failing: usize,
    /// Failing share of all classified candidates.
    pub failure_rate: Option<f64>,
    /// Mean budget objective of failure-inducing candidates.
    pub mean_failing_f3: Option<f64>,
    pub occurrences: FailureCounts,
    pub stability: StabilityHistogram,
}

/// Head-to-head comparison under one detector. Paired tests use
/// `(nsga2, random)` per (image, run); the magnitude test compares
/// `(random, nsga2)` budget values of failure-inducing candidates, so an
/// effect above 0.5 means NSGA-II finds smaller failing perturbations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub detector: String,
    pub nsga2: AlgorithmSummary,
    pub random: AlgorithmSummary,
    pub hypervolume_test: Option<TestResult>,
    pub failure_rate_test: Option<TestResult>,
    pub magnitude_test: Option<TestResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub algorithm: Algorithm,
    pub detectors: Vec<String>,
    /// `cells[target][source]`: failure rate of the source archives replayed under the target.
    pub cells: Vec<Vec<Option<f64>>>,
    pub genomes_per_source: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorCalls {
    pub nsga2: u64,
    pub random: u64,
    pub clean: u64,
    pub replay: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub config: CampaignConfig,
    pub config_hash: String,
    pub run_seeds: Vec<u64>,
    pub images: Vec<String>,
    pub rows: Vec<CandidateRow>,
    pub runs: Vec<RunSummary>,
    pub comparisons: Vec<Comparison>,
    pub transferability: Vec<TransferMatrix>,
    pub errors: Vec<ErrorRecord>,
    pub detector_calls: BTreeMap<String, DetectorCalls>,
}

/// A genome to be replayed on the image it was found on.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayGenome {
    pub image_id: String,
    pub genome: PerturbationGenome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferSource {
    pub name: String,
    pub genomes: Vec<ReplayGenome>,
}

/// Failure record of `genome` applied to `item` and judged under `detector`.
pub fn replay_failure(
    item: &DatasetItem,
    genome: &PerturbationGenome,
    detector: &DetectorHandle,
    th: &FailureThresholds,
) -> Result<FailureRecord> {
    let perturbed = apply_perturbation(&item.image, genome);
    let preds = apply_conf_floor(&detector.detect(&perturbed)?, th.conf_floor);
    classify_failures(&item.annotations, &preds, th)
}

/// Failure rates of every source's genomes replayed under every target.
pub fn transferability_matrix(
    algorithm: Algorithm,
    sources: &[TransferSource],
    targets: &[&DetectorHandle],
    items: &[DatasetItem],
    th: &FailureThresholds,
) -> Result<TransferMatrix> {
    let by_id: HashMap<&str, &DatasetItem> = items.iter().map(|i| (i.image_id.as_str(), i)).collect();
    for s in sources {
        if let Some(g) = s.genomes.iter().find(|g| !by_id.contains_key(g.image_id.as_str())) {
            return Err(Error::UnknownImage(g.image_id.clone()));
        }
    }
    let mut cells = Vec::with_capacity(targets.len());
    for target in targets {
        let mut row = Vec::with_capacity(sources.len());
        for s in sources {
            if s.genomes.is_empty() {
                row.push(None);
                continue;
            }
            let failed: Vec<bool> = s
                .genomes
                .par_iter()
                .map(|g| replay_failure(by_id[g.image_id.as_str()], &g.genome, target, th).map(|r| r.failed))
                .collect::<Result<_>>()?;
            row.push(Some(failed.iter().filter(|f| **f).count() as f64 / failed.len() as f64));
        }
        cells.push(row);
    }
    Ok(TransferMatrix {
        algorithm,
        detectors: sources.iter().map(|s| s.name.clone()).collect(),
        cells,
        genomes_per_source: sources.iter().map(|s| s.genomes.len()).collect(),
    })
}

/// Row-level facts needed for aggregation, available both in memory and from `candidates.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowStat {
    pub detector: String,
    pub image_id: String,
    pub run_id: usize,
    pub algorithm: Algorithm,
    pub archived: bool,
    pub objectives: ObjectiveVector,
    pub failed: bool,
    pub counts: FailureCounts,
    pub stability: Option<(StabilityCategory, StabilityCategory)>,
}

impl From<&CandidateRow> for RowStat {
    fn from(r: &CandidateRow) -> Self {
        RowStat {
            detector: r.detector.clone(),
            image_id: r.image_id.clone(),
            run_id: r.run_id,
            algorithm: r.algorithm,
            archived: r.archived,
            objectives: r.objectives,
            failed: r.failure.failed,
            counts: r.failure.counts,
            stability: r.stability.map(|s| (s.confidence, s.localization)),
        }
    }
}

/// Per-(detector, image, run, algorithm) hypervolume and failure rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStat {
    pub detector: String,
    pub image_id: String,
    pub run_id: usize,
    pub algorithm: Algorithm,
    pub hypervolume: f64,
    pub failure_rate: Option<f64>,
}

type RunKey = (String, String, usize, Algorithm);

/// Per-run statistics from row facts. Runs are keyed by their rows, so a
/// run without any row is absent.
pub fn run_stats(rows: &[RowStat], hv_ref: [f64; 3]) -> Vec<RunStat> {
    let mut groups: BTreeMap<RunKey, Vec<&RowStat>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.detector.clone(), r.image_id.clone(), r.run_id, r.algorithm))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((detector, image_id, run_id, algorithm), rs)| {
            let archived: Vec<ObjectiveVector> = rs.iter().filter(|r| r.archived).map(|r| r.objectives).collect();
            let failing = rs.iter().filter(|r| r.failed).count();
            RunStat {
                detector,
                image_id,
                run_id,
                algorithm,
                hypervolume: hypervolume(&archived, hv_ref),
                failure_rate: (!rs.is_empty()).then(|| failing as f64 / rs.len() as f64),
            }
        })
        .collect()
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn algorithm_summary(algorithm: Algorithm, rows: &[&RowStat], runs: &[&RunStat]) -> AlgorithmSummary {
    let failing: Vec<&&RowStat> = rows.iter().filter(|r| r.failed).collect();
    let mut occurrences = FailureCounts::default();
    let mut stability = StabilityHistogram::default();
    for r in rows {
        occurrences.add(&r.counts);
        if let (false, Some((c, l))) = (r.failed, r.stability) {
            stability.confidence.add(c);
            stability.localization.add(l);
            if c.is_violation() || l.is_violation() {
                stability.violations += 1;
            }
        }
    }
    let hvs: Vec<f64> = runs.iter().map(|r| r.hypervolume).collect();
    let f3: Vec<f64> = failing.iter().map(|r| r.objectives.f3).collect();
    AlgorithmSummary {
        algorithm,
        runs: runs.len(),
        mean_hypervolume: mean(&hvs),
        classified: rows.len(),
        failing: failing.len(),
        failure_rate: (!rows.is_empty()).then(|| failing.len() as f64 / rows.len() as f64),
        mean_failing_f3: mean(&f3),
        occurrences,
        stability,
    }
}

/// Comparison blocks, one per detector in first-seen order.
pub fn compare(rows: &[RowStat], runs: &[RunStat]) -> Result<Vec<Comparison>> {
    let mut detectors: Vec<&str> = Vec::new();
    for r in rows {
        if !detectors.contains(&r.detector.as_str()) {
            detectors.push(&r.detector);
        }
    }
    let mut out = Vec::new();
    for d in detectors {
        let of = |alg: Algorithm| -> (Vec<&RowStat>, Vec<&RunStat>) {
            (
                rows.iter().filter(|r| r.detector == d && r.algorithm == alg).collect(),
                runs.iter().filter(|r| r.detector == d && r.algorithm == alg).collect(),
            )
        };
        let (n_rows, n_runs) = of(Algorithm::Nsga2);
        let (r_rows, r_runs) = of(Algorithm::Random);

        let paired: BTreeMap<(&str, usize), (&RunStat, &RunStat)> = n_runs
            .iter()
            .filter_map(|a| {
                r_runs
                    .iter()
                    .find(|b| b.image_id == a.image_id && b.run_id == a.run_id)
                    .map(|b| ((a.image_id.as_str(), a.run_id), (*a, *b)))
            })
            .collect();
        let hv_pairs: Vec<(f64, f64)> = paired.values().map(|(a, b)| (a.hypervolume, b.hypervolume)).collect();
        let fr_pairs: Vec<(f64, f64)> = paired
            .values()
            .filter_map(|(a, b)| Some((a.failure_rate?, b.failure_rate?)))
            .collect();
        let n_f3: Vec<f64> = n_rows.iter().filter(|r| r.failed).map(|r| r.objectives.f3).collect();
        let r_f3: Vec<f64> = r_rows.iter().filter(|r| r.failed).map(|r| r.objectives.f3).collect();

        out.push(Comparison {
            detector: d.to_string(),
            nsga2: algorithm_summary(Algorithm::Nsga2, &n_rows, &n_runs),
            random: algorithm_summary(Algorithm::Random, &r_rows, &r_runs),
            hypervolume_test: (!hv_pairs.is_empty()).then(|| wilcoxon_signed_rank(&hv_pairs)).transpose()?,
            failure_rate_test: (!fr_pairs.is_empty()).then(|| wilcoxon_signed_rank(&fr_pairs)).transpose()?,
            magnitude_test: (!n_f3.is_empty() && !r_f3.is_empty())
                .then(|| mann_whitney_u(&r_f3, &n_f3))
                .transpose()?,
        });
    }
    Ok(out)
}

fn classify_candidate(
    c: &EvaluatedCandidate,
    item: &DatasetItem,
    clean: &[Detection],
    config: &CampaignConfig,
) -> Result<(FailureRecord, Option<StabilityEntry>)> {
    let failure = classify_failures(&item.annotations, &c.predictions, &config.failure)?;
    let stability = (!failure.failed).then(|| {
        let deviation = perturbation_deviation(&stability_deviation(clean, &c.predictions, &item.annotations));
        StabilityEntry {
            deviation,
            confidence: categorize_stability(deviation.delta_conf, &config.stability),
            localization: categorize_stability(deviation.delta_loc, &config.stability),
        }
    });
    Ok((failure, stability))
}

struct Task<'a> {
    detector: usize,
    item: &'a DatasetItem,
    bounds: &'a GenomeBounds,
    clean: &'a [Detection],
    run_id: usize,
    algorithm: Algorithm,
}

struct TaskOutput {
    archive: ParetoArchive,
    rows: Vec<CandidateRow>,
    summary: RunSummary,
}

fn run_task(task: &Task<'_>, detectors: &[DetectorHandle], config: &CampaignConfig) -> Result<TaskOutput> {
    let det = &detectors[task.detector];
    let problem = Problem {
        item: task.item,
        bounds: task.bounds,
        detector: det,
        conf_floor: config.failure.conf_floor,
        parallel: config.search.parallel_evaluation,
    };
    let seed = config.search.run_seed(task.run_id);
    let (archive, all) = match task.algorithm {
        Algorithm::Nsga2 => (nsga2_run(&problem, &config.search, task.run_id, seed)?, Vec::new()),
        Algorithm::Random => random_search_run_with(&problem, &config.search, task.run_id, seed, config.classify_all_random)?,
    };
    let archived: BTreeSet<usize> = archive.candidates.iter().map(|c| c.evaluation_index).collect();
    let classified = if task.algorithm == Algorithm::Random && config.classify_all_random {
        &all
    } else {
        &archive.candidates
    };
    let mut rows = Vec::with_capacity(classified.len());
    let mut occurrences = FailureCounts::default();
    for c in classified {
        let (failure, stability) = classify_candidate(c, task.item, task.clean, config)?;
        occurrences.add(&failure.counts);
        rows.push(CandidateRow {
            detector: det.name.clone(),
            image_id: task.item.image_id.clone(),
            run_id: task.run_id,
            algorithm: task.algorithm,
            evaluation_index: c.evaluation_index,
            archived: archived.contains(&c.evaluation_index),
            genome: c.genome,
            objectives: c.objectives,
            failure,
            stability,
        });
    }
    let failing = rows.iter().filter(|r| r.failure.failed).count();
    let objs: Vec<ObjectiveVector> = archive.candidates.iter().map(|c| c.objectives).collect();
    let summary = RunSummary {
        detector: det.name.clone(),
        image_id: task.item.image_id.clone(),
        run_id: task.run_id,
        algorithm: task.algorithm,
        seed,
        evaluations: archive.evaluations,
        archive_size: archive.candidates.len(),
        classified: rows.len(),
        failing,
        failure_rate: (!rows.is_empty()).then(|| failing as f64 / rows.len() as f64),
        hypervolume: hypervolume(&objs, config.hv_ref),
        occurrences,
        evaluation_failures: archive.failures.len(),
    };
    Ok(TaskOutput {
        archive,
        rows,
        summary,
    })
}

fn error_record(detector: &str, image_id: &str, run: Option<(usize, Algorithm)>, f: Option<&EvaluationFailure>, message: String) -> ErrorRecord {
    ErrorRecord {
        detector: detector.to_string(),
        image_id: image_id.to_string(),
        run_id: run.map(|r| r.0),
        algorithm: run.map(|r| r.1),
        evaluation_index: f.map(|f| f.evaluation_index),
        message,
    }
}

/// Runs the full campaign over `items` with the given detectors, whose order
/// and names must match `config.detectors`.
pub fn run_campaign(config: &CampaignConfig, items: &[DatasetItem], detectors: &[DetectorHandle]) -> Result<CampaignReport> {
    config.validate()?;
    if detectors.len() != config.detectors.len()
        || detectors.iter().zip(&config.detectors).any(|(h, d)| h.name != d.name)
    {
        return Err(Error::Config("detector handles do not match the configured detectors".into()));
    }
    let mut annotated: Vec<&DatasetItem> = items.iter().filter(|i| !i.annotations.is_empty()).collect();
    for skipped in items.iter().filter(|i| i.annotations.is_empty()) {
        log::warn!("{}: no annotations, skipped", skipped.image_id);
    }
    if annotated.is_empty() {
        return Err(Error::NoAnnotations);
    }
    annotated.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let bounds: Vec<GenomeBounds> = annotated
        .iter()
        .map(|i| config.bounds.with_roi(build_roi(&i.annotations, config.bounds.roi_margin, i.image_size())))
        .collect();

    let mut errors = Vec::new();
    let mut calls: BTreeMap<String, DetectorCalls> =
        detectors.iter().map(|d| (d.name.clone(), DetectorCalls::default())).collect();

    // clean predictions per (detector, image)
    let mut clean: Vec<Vec<Option<Vec<Detection>>>> = Vec::with_capacity(detectors.len());
    for det in detectors {
        let mut per_item = Vec::with_capacity(annotated.len());
        for item in &annotated {
            calls.get_mut(&det.name).expect("detector registered").clean += 1;
            match det.detect(&item.image) {
                Ok(d) => per_item.push(Some(apply_conf_floor(&d, config.failure.conf_floor))),
                Err(e) => {
                    log::error!("{} on {}: clean detection failed, image skipped: {e}", det.name, item.image_id);
                    errors.push(error_record(&det.name, &item.image_id, None, None, e.to_string()));
                    per_item.push(None);
                }
            }
        }
        clean.push(per_item);
    }

    let mut tasks = Vec::new();
    for (d, per_item) in clean.iter().enumerate() {
        for (k, item) in annotated.iter().enumerate() {
            let Some(c) = &per_item[k] else { continue };
            for run_id in 0..config.search.runs {
                for algorithm in Algorithm::ALL {
                    tasks.push(Task {
                        detector: d,
                        item,
                        bounds: &bounds[k],
                        clean: c,
                        run_id,
                        algorithm,
                    });
                }
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let outputs: Vec<Result<TaskOutput>> =
        pool.install(|| tasks.par_iter().map(|t| run_task(t, detectors, config)).collect());

    let mut rows = Vec::new();
    let mut runs = Vec::new();
    let mut sources: Vec<BTreeMap<Algorithm, Vec<ReplayGenome>>> = vec![BTreeMap::new(); detectors.len()];
    for (task, out) in tasks.iter().zip(outputs) {
        let det = &detectors[task.detector];
        let run = Some((task.run_id, task.algorithm));
        match out {
            Ok(o) => {
                let c = calls.get_mut(&det.name).expect("detector registered");
                match task.algorithm {
                    Algorithm::Nsga2 => c.nsga2 += o.archive.evaluations as u64,
                    Algorithm::Random => c.random += o.archive.evaluations as u64,
                }
                for f in &o.archive.failures {
                    errors.push(error_record(&det.name, &task.item.image_id, run, Some(f), f.message.clone()));
                }
                sources[task.detector]
                    .entry(task.algorithm)
                    .or_default()
                    .extend(o.archive.candidates.iter().map(|c| ReplayGenome {
                        image_id: task.item.image_id.clone(),
                        genome: c.genome,
                    }));
                rows.extend(o.rows);
                runs.push(o.summary);
            }
            Err(e) => {
                log::error!("{} on {} run {}: {e}", det.name, task.item.image_id, task.run_id);
                errors.push(error_record(&det.name, &task.item.image_id, run, None, e.to_string()));
            }
        }
    }

    let stats: Vec<RowStat> = rows.iter().map(RowStat::from).collect();
    let run_stat: Vec<RunStat> = runs
        .iter()
        .map(|r| RunStat {
            detector: r.detector.clone(),
            image_id: r.image_id.clone(),
            run_id: r.run_id,
            algorithm: r.algorithm,
            hypervolume: r.hypervolume,
            failure_rate: r.failure_rate,
        })
        .collect();
    let comparisons = compare(&stats, &run_stat)?;

    let owned: Vec<DatasetItem> = annotated.iter().map(|i| (*i).clone()).collect();
    let targets: Vec<&DetectorHandle> = detectors.iter().collect();
    let mut transferability = Vec::new();
    for algorithm in Algorithm::ALL {
        let src: Vec<TransferSource> = detectors
            .iter()
            .zip(&sources)
            .map(|(d, s)| TransferSource {
                name: d.name.clone(),
                genomes: s.get(&algorithm).cloned().unwrap_or_default(),
            })
            .collect();
        let before: Vec<u64> = detectors.iter().map(|d| d.calls()).collect();
        transferability.push(transferability_matrix(algorithm, &src, &targets, &owned, &config.failure)?);
        for (d, b) in detectors.iter().zip(before) {
            calls.get_mut(&d.name).expect("detector registered").replay += d.calls() - b;
        }
    }

    Ok(CampaignReport {
        config: config.clone(),
        config_hash: config.hash(),
        run_seeds: config.run_seeds(),
        images: annotated.iter().map(|i| i.image_id.clone()).collect(),
        rows,
        runs,
        comparisons,
        transferability,
        errors,
        detector_calls: calls,
    })
}

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

pub const CANDIDATES_HEADER: [&str; 26] = [
    "detector",
    "image_id",
    "run_id",
    "algorithm",
    "evaluation_index",
    "archived",
    "c_x",
    "c_y",
    "r",
    "alpha_ratio",
    "delta_b",
    "delta_g",
    "delta_r",
    "f1",
    "f2",
    "f3",
    "y_i",
    "missed",
    "mislocalized",
    "misclassified",
    "ambiguous",
    "spurious",
    "delta_conf",
    "delta_loc",
    "conf_category",
    "loc_category",
];

fn counts_fields(c: &FailureCounts) -> [String; 4] {
    [c.missed, c.mislocalized, c.misclassified, c.ambiguous].map(|v| v.to_string())
}

fn stability_fields(s: &Option<StabilityEntry>) -> [String; 4] {
    match s {
        Some(s) => [
            f6(s.deviation.delta_conf),
            f6(s.deviation.delta_loc),
            s.confidence.name().to_string(),
            s.localization.name().to_string(),
        ],
        None => Default::default(),
    }
}

fn candidate_record(r: &CandidateRow) -> Vec<String> {
    let mut rec = vec![
        r.detector.clone(),
        r.image_id.clone(),
        r.run_id.to_string(),
        r.algorithm.name().to_string(),
        r.evaluation_index.to_string(),
        (r.archived as u8).to_string(),
    ];
    rec.extend(r.genome.csv_fields());
    rec.extend(r.objectives.as_array().map(f6));
    rec.push((r.failure.failed as u8).to_string());
    rec.extend(counts_fields(&r.failure.counts));
    rec.push(r.failure.spurious.to_string());
    rec.extend(stability_fields(&r.stability));
    rec
}

fn archive_header() -> Vec<&'static str> {
    let mut h = vec!["image_id", "run_id", "algorithm", "evaluation_index"];
    h.extend(GENOME_COLUMNS);
    h.extend(["f1", "f2", "f3", "detector"]);
    h
}

fn archive_record(r: &CandidateRow) -> Vec<String> {
    let mut rec = vec![
        r.image_id.clone(),
        r.run_id.to_string(),
        r.algorithm.name().to_string(),
        r.evaluation_index.to_string(),
    ];
    rec.extend(r.genome.csv_fields());
    rec.extend(r.objectives.as_array().map(f6));
    rec.push(r.detector.clone());
    rec
}

const FAILURES_HEADER: [&str; 14] = [
    "image_id",
    "run_id",
    "algorithm",
    "evaluation_index",
    "y_i",
    "missed",
    "mislocalized",
    "misclassified",
    "ambiguous",
    "delta_conf",
    "delta_loc",
    "conf_category",
    "loc_category",
    "detector",
];

fn failure_record(r: &CandidateRow) -> Vec<String> {
    let mut rec = vec![
        r.image_id.clone(),
        r.run_id.to_string(),
        r.algorithm.name().to_string(),
        r.evaluation_index.to_string(),
        (r.failure.failed as u8).to_string(),
    ];
    rec.extend(counts_fields(&r.failure.counts));
    rec.extend(stability_fields(&r.stability));
    rec.push(r.detector.clone());
    rec
}

const STABILITY_HEADER: [&str; 10] = [
    "image_id",
    "run_id",
    "algorithm",
    "evaluation_index",
    "delta_conf",
    "delta_loc",
    "conf_category",
    "loc_category",
    "violation",
    "detector",
];

fn stability_record(r: &CandidateRow, s: &StabilityEntry) -> Vec<String> {
    vec![
        r.image_id.clone(),
        r.run_id.to_string(),
        r.algorithm.name().to_string(),
        r.evaluation_index.to_string(),
        f6(s.deviation.delta_conf),
        f6(s.deviation.delta_loc),
        s.confidence.name().to_string(),
        s.localization.name().to_string(),
        (s.is_violation() as u8).to_string(),
        r.detector.clone(),
    ]
}

fn csv_bytes<H: AsRef<[u8]>>(header: &[H], records: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in records {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::io("<csv buffer>", e.into_error()))
}

#[derive(Serialize)]
struct Summary<'a> {
    comparisons: &'a [Comparison],
    runs: &'a [RunSummary],
    errors: &'a [ErrorRecord],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub master_seed: u64,
    pub run_seeds: Vec<u64>,
    pub images: Vec<String>,
    pub detector_calls: BTreeMap<String, DetectorCalls>,
    pub files: Vec<String>,
    pub config: CampaignConfig,
}

pub const REPORT_FILES: [&str; 7] = [
    "candidates.csv",
    "archives.csv",
    "failures.csv",
    "stability.csv",
    "summary.json",
    "transferability.json",
    "manifest.json",
];

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

/// Writes the report file set into `outdir`. Files are staged under
/// temporary names and renamed; on failure every file of this emission is removed.
pub fn emit_reports(report: &CampaignReport, outdir: &Path) -> Result<Vec<PathBuf>> {
    let archived = || report.rows.iter().filter(|r| r.archived);
    let contents: Vec<(&str, Vec<u8>)> = vec![
        ("candidates.csv", csv_bytes(&CANDIDATES_HEADER, report.rows.iter().map(candidate_record))?),
        ("archives.csv", csv_bytes(&archive_header(), archived().map(archive_record))?),
        ("failures.csv", csv_bytes(&FAILURES_HEADER, report.rows.iter().map(failure_record))?),
        (
            "stability.csv",
            csv_bytes(
                &STABILITY_HEADER,
                report
                    .rows
                    .iter()
                    .filter_map(|r| r.stability.as_ref().map(|s| stability_record(r, s))),
            )?,
        ),
        (
            "summary.json",
            json_bytes(&Summary {
                comparisons: &report.comparisons,
                runs: &report.runs,
                errors: &report.errors,
            })?,
        ),
        ("transferability.json", json_bytes(&report.transferability)?),
        (
            "manifest.json",
            json_bytes(&Manifest {
                config_hash: report.config_hash.clone(),
                master_seed: report.config.search.seed,
                run_seeds: report.run_seeds.clone(),
                images: report.images.clone(),
                detector_calls: report.detector_calls.clone(),
                files: REPORT_FILES.iter().map(|s| s.to_string()).collect(),
                config: report.config.clone(),
            })?,
        ),
    ];
    write_atomically(outdir, &contents)
}

fn write_atomically(outdir: &Path, contents: &[(&str, Vec<u8>)]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let mut staged: Vec<PathBuf> = Vec::new();
    let mut done: Vec<PathBuf> = Vec::new();
    let result = (|| -> Result<()> {
        for (name, bytes) in contents {
            let tmp = outdir.join(format!(".{name}.tmp"));
            fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
            staged.push(tmp);
        }
        for ((name, _), tmp) in contents.iter().zip(&staged) {
            let dest = outdir.join(name);
            fs::rename(tmp, &dest).map_err(|e| Error::io(&dest, e))?;
            done.push(dest);
        }
        Ok(())
    })();
    match result {
        Ok(()) => Ok(done),
        Err(e) => {
            for p in staged.iter().chain(&done) {
                let _ = fs::remove_file(p);
            }
            Err(e)
        }
    }
}

/// Writes `transferability.json` for a standalone replay.
pub fn emit_transferability(matrices: &[TransferMatrix], outdir: &Path) -> Result<Vec<PathBuf>> {
    write_atomically(outdir, &[("transferability.json", json_bytes(&matrices)?)])
}

struct Columns {
    index: HashMap<String, usize>,
    path: PathBuf,
}

impl Columns {
    fn new(headers: &csv::StringRecord, path: &Path) -> Self {
        Columns {
            index: headers.iter().enumerate().map(|(i, h)| (h.to_string(), i)).collect(),
            path: path.to_path_buf(),
        }
    }

    fn get<'r>(&self, rec: &'r csv::StringRecord, name: &str) -> Result<&'r str> {
        self.index
            .get(name)
            .and_then(|&i| rec.get(i))
            .ok_or_else(|| Error::Config(format!("{}: missing column `{name}`", self.path.display())))
    }

    fn parse<T: std::str::FromStr>(&self, rec: &csv::StringRecord, name: &str) -> Result<T> {
        let s = self.get(rec, name)?;
        s.parse()
            .map_err(|_| Error::Config(format!("{}: bad `{name}` value `{s}`", self.path.display())))
    }
}

fn parse_category(s: &str) -> Option<StabilityCategory> {
    StabilityCategory::ALL.into_iter().find(|c| c.name() == s)
}

fn parse_algorithm(cols: &Columns, rec: &csv::StringRecord) -> Result<Algorithm> {
    let s = cols.get(rec, "algorithm")?;
    Algorithm::parse(s).ok_or_else(|| Error::Config(format!("unknown algorithm `{s}`")))
}

/// Row facts read back from `candidates.csv`.
pub fn read_candidate_rows(path: &Path) -> Result<Vec<RowStat>> {
    let mut r = csv::Reader::from_path(path)?;
    let cols = Columns::new(r.headers()?, path);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let conf = parse_category(cols.get(&rec, "conf_category")?);
        let loc = parse_category(cols.get(&rec, "loc_category")?);
        out.push(RowStat {
            detector: cols.get(&rec, "detector")?.to_string(),
            image_id: cols.get(&rec, "image_id")?.to_string(),
            run_id: cols.parse(&rec, "run_id")?,
            algorithm: parse_algorithm(&cols, &rec)?,
            archived: cols.parse::<u8>(&rec, "archived")? == 1,
            objectives: ObjectiveVector::new(cols.parse(&rec, "f1")?, cols.parse(&rec, "f2")?, cols.parse(&rec, "f3")?),
            failed: cols.parse::<u8>(&rec, "y_i")? == 1,
            counts: FailureCounts {
                missed: cols.parse(&rec, "missed")?,
                mislocalized: cols.parse(&rec, "mislocalized")?,
                misclassified: cols.parse(&rec, "misclassified")?,
                ambiguous: cols.parse(&rec, "ambiguous")?,
            },
            stability: conf.zip(loc),
        });
    }
    Ok(out)
}

/// Archived genomes from `archives.csv`, grouped by `(detector, algorithm)`.
pub fn read_archive_genomes(path: &Path) -> Result<BTreeMap<(String, Algorithm), Vec<ReplayGenome>>> {
    let mut r = csv::Reader::from_path(path)?;
    let cols = Columns::new(r.headers()?, path);
    let mut out: BTreeMap<(String, Algorithm), Vec<ReplayGenome>> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let fields: Vec<&str> = GENOME_COLUMNS
            .iter()
            .map(|c| cols.get(&rec, c))
            .collect::<Result<_>>()?;
        let key = (cols.get(&rec, "detector")?.to_string(), parse_algorithm(&cols, &rec)?);
        out.entry(key).or_default().push(ReplayGenome {
            image_id: cols.get(&rec, "image_id")?.to_string(),
            genome: PerturbationGenome::parse_fields(&fields)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Analysis {
    pub comparisons: Vec<Comparison>,
    pub runs: Vec<RunStat>,
}

/// Recomputes the comparison blocks from a report directory's `candidates.csv`.
pub fn analyze_outputs(dir: &Path, hv_ref: [f64; 3]) -> Result<Analysis> {
    let rows = read_candidate_rows(&dir.join("candidates.csv"))?;
    let runs = run_stats(&rows, hv_ref);
    Ok(Analysis {
        comparisons: compare(&rows, &runs)?,
        runs,
    })
}

/// Renders scenes into `<dir>/images`, `<dir>/labels` and `<dir>/classes.txt`.
pub fn write_synthetic_dataset(scenes: &[SyntheticSceneSpec], dir: &Path) -> Result<Vec<DatasetItem>> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    for d in [&images, &labels] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut items = Vec::with_capacity(scenes.len());
    for s in scenes {
        let (image, annotations) = render_synthetic_scene(s)?;
        image.save(images.join(format!("{}.png", s.id)))?;
        let text: String = annotations
            .iter()
            .map(|a| LabelLine::from_box(a.class_id, &a.bbox, (s.width, s.height)).format() + "\n")
            .collect();
        let lp = labels.join(format!("{}.txt", s.id));
        fs::write(&lp, text).map_err(|e| Error::io(&lp, e))?;
        items.push(DatasetItem {
            image_id: s.id.clone(),
            image,
            annotations,
        });
    }
    let classes = dir.join("classes.txt");
    fs::write(&classes, SYNTHETIC_CLASSES.join("\n") + "\n").map_err(|e| Error::io(&classes, e))?;
    Ok(items)
}

/// Rendered in-memory dataset items for synthetic scenes.
pub fn synthetic_items(scenes: &[SyntheticSceneSpec]) -> Result<Vec<DatasetItem>> {
    scenes
        .iter()
        .map(|s| {
            let (image, annotations) = render_synthetic_scene(s)?;
            Ok(DatasetItem {
                image_id: s.id.clone(),
                image,
                annotations,
            })
        })
        .collect()
}
