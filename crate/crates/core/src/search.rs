//! NSGA-II and the budget-matched random-search baseline.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::DatasetItem;
use crate::detector::DetectorHandle;
use crate::error::{Error, Result};
use crate::objectives::{evaluate_candidate, EvaluatedCandidate, ObjectiveVector};
use crate::perturbation::{repair_genome, sample_genome, seeded_rng, GenomeBounds, PerturbationGenome, GENOME_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Nsga2,
    Random,
}

impl Algorithm {
    pub const ALL: [Algorithm; 2] = [Algorithm::Nsga2, Algorithm::Random];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Nsga2 => "nsga2",
            Algorithm::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "nsga2" => Some(Algorithm::Nsga2),
            "random" => Some(Algorithm::Random),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariationConfig {
    pub crossover_prob: f64,
    pub crossover_eta: f64,
    /// Per-variable exchange probability inside a crossover.
    pub crossover_var_prob: f64,
    pub mutation_eta: f64,
    /// Per-variable mutation probability; `None` means `1 / genome length`.
    pub mutation_prob: Option<f64>,
}

impl Default for VariationConfig {
    fn default() -> Self {
        VariationConfig {
            crossover_prob: 0.9,
            crossover_eta: 15.0,
            crossover_var_prob: 0.5,
            mutation_eta: 20.0,
            mutation_prob: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub population_size: usize,
    pub generations: usize,
    pub runs: usize,
    pub seed: u64,
    pub variation: VariationConfig,
    /// Evaluate candidates of one batch on the rayon pool when the detector allows it.
    pub parallel_evaluation: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            population_size: 40,
            generations: 500,
            runs: 10,
            seed: 0,
            variation: VariationConfig::default(),
            parallel_evaluation: true,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size < 4 || !self.population_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "population size must be even and at least 4, got {}",
                self.population_size
            )));
        }
        if self.generations == 0 || self.runs == 0 {
            return Err(Error::Config("generations and runs must be at least 1".into()));
        }
        let v = &self.variation;
        let probs = [v.crossover_prob, v.crossover_var_prob, v.mutation_prob.unwrap_or(0.0)];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || v.crossover_eta < 0.0 || v.mutation_eta < 0.0 {
            return Err(Error::Config(format!("invalid variation settings {v:?}")));
        }
        Ok(())
    }

    pub fn total_evaluations(&self) -> usize {
        self.population_size * self.generations
    }

    /// Seed of run `run_index` for a campaign seeded with `self.seed`.
    pub fn run_seed(&self, run_index: usize) -> u64 {
        self.seed.wrapping_add(run_index as u64)
    }
}

/// An evaluation the detector could not answer. The candidate is excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationFailure {
    pub evaluation_index: usize,
    pub genome: PerturbationGenome,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParetoArchive {
    pub image_id: String,
    pub run_id: usize,
    pub algorithm: Algorithm,
    /// Nondominated candidates in ascending evaluation order.
    pub candidates: Vec<EvaluatedCandidate>,
    /// Detector queries spent by the run.
    pub evaluations: usize,
    pub failures: Vec<EvaluationFailure>,
}

/// Objective vector assigned to candidates whose evaluation failed. It is
/// dominated by every feasible vector, whose components all lie in `[0, 1]`.
const INVALID_OBJECTIVES: ObjectiveVector = ObjectiveVector {
    f1: 2.0,
    f2: 2.0,
    f3: 2.0,
};

/// Fast nondominated sort. Fronts hold indices in ascending order.
pub fn nondominated_sort(points: &[ObjectiveVector]) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut dominated_by: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut counts = vec![0usize; n];
    for i in 0..n {
        for j in (i + 1)..n {
            if points[i].dominates(&points[j]) {
                dominated_by[i].push(j);
                counts[j] += 1;
            } else if points[j].dominates(&points[i]) {
                dominated_by[j].push(i);
                counts[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| counts[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominated_by[i] {
                counts[j] -= 1;
                if counts[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// Crowding distance of each point of one front. Per objective the points are
/// ordered by that objective with full-vector lexicographic tie-breaks; the
/// two ends get infinity and interior points the normalized neighbor gap.
pub fn crowding_distance(front: &[ObjectiveVector]) -> Vec<f64> {
    let n = front.len();
    let mut dist = vec![0.0; n];
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    for m in 0..3 {
        let value = |i: usize| front[i].as_array()[m];
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            value(a)
                .total_cmp(&value(b))
                .then_with(|| front[a].lex_cmp(&front[b]))
                .then(a.cmp(&b))
        });
        let lo = value(order[0]);
        let hi = value(order[n - 1]);
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        let range = hi - lo;
        if range <= 0.0 {
            continue;
        }
        for k in 1..n - 1 {
            dist[order[k]] += (value(order[k + 1]) - value(order[k - 1])) / range;
        }
    }
    dist
}

/// Simulated binary crossover of two parents within `[lo, hi]`.
pub fn sbx_crossover<R: Rng + ?Sized>(
    rng: &mut R,
    p1: &[f64; GENOME_LEN],
    p2: &[f64; GENOME_LEN],
    lo: &[f64; GENOME_LEN],
    hi: &[f64; GENOME_LEN],
    cfg: &VariationConfig,
) -> ([f64; GENOME_LEN], [f64; GENOME_LEN]) {
    let mut c1 = *p1;
    let mut c2 = *p2;
    if rng.gen::<f64>() > cfg.crossover_prob {
        return (c1, c2);
    }
    let eta = cfg.crossover_eta;
    for i in 0..GENOME_LEN {
        if rng.gen::<f64>() > cfg.crossover_var_prob {
            continue;
        }
        if (p1[i] - p2[i]).abs() <= 1e-14 || hi[i] <= lo[i] {
            continue;
        }
        let (y1, y2) = if p1[i] < p2[i] { (p1[i], p2[i]) } else { (p2[i], p1[i]) };
        let u = rng.gen::<f64>();
        let spread = |beta: f64| {
            let alpha = 2.0 - beta.powf(-(eta + 1.0));
            if u <= 1.0 / alpha {
                (u * alpha).powf(1.0 / (eta + 1.0))
            } else {
                (1.0 / (2.0 - u * alpha)).powf(1.0 / (eta + 1.0))
            }
        };
        let span = y2 - y1;
        let bq1 = spread(1.0 + 2.0 * (y1 - lo[i]) / span);
        let bq2 = spread(1.0 + 2.0 * (hi[i] - y2) / span);
        let a = (0.5 * ((y1 + y2) - bq1 * span)).clamp(lo[i], hi[i]);
        let b = (0.5 * ((y1 + y2) + bq2 * span)).clamp(lo[i], hi[i]);
        if rng.gen::<f64>() < 0.5 {
            c1[i] = b;
            c2[i] = a;
        } else {
            c1[i] = a;
            c2[i] = b;
        }
    }
    (c1, c2)
}

/// Bounded polynomial mutation in place.
pub fn polynomial_mutation<R: Rng + ?Sized>(
    rng: &mut R,
    x: &mut [f64; GENOME_LEN],
    lo: &[f64; GENOME_LEN],
    hi: &[f64; GENOME_LEN],
    cfg: &VariationConfig,
) {
    let prob = cfg.mutation_prob.unwrap_or(1.0 / GENOME_LEN as f64);
    let pow = 1.0 / (cfg.mutation_eta + 1.0);
    for i in 0..GENOME_LEN {
        if rng.gen::<f64>() > prob {
            continue;
        }
        let span = hi[i] - lo[i];
        if span <= 0.0 {
            continue;
        }
        let y = x[i].clamp(lo[i], hi[i]);
        let d1 = (y - lo[i]) / span;
        let d2 = (hi[i] - y) / span;
        let u = rng.gen::<f64>();
        let dq = if u < 0.5 {
            let v = 2.0 * u + (1.0 - 2.0 * u) * (1.0 - d1).powf(cfg.mutation_eta + 1.0);
            v.powf(pow) - 1.0
        } else {
            let v = 2.0 * (1.0 - u) + 2.0 * (u - 0.5) * (1.0 - d2).powf(cfg.mutation_eta + 1.0);
            1.0 - v.powf(pow)
        };
        x[i] = (y + dq * span).clamp(lo[i], hi[i]);
    }
}

/// Detector access for one image.
pub struct Problem<'a> {
    pub item: &'a DatasetItem,
    pub bounds: &'a GenomeBounds,
    pub detector: &'a DetectorHandle,
    pub conf_floor: f64,
    pub parallel: bool,
}

impl Problem<'_> {
    /// Evaluates genomes in order, numbering them from `first_index`.
    fn evaluate(&self, genomes: &[PerturbationGenome], first_index: usize) -> Vec<Outcome> {
        let eval = |(k, g): (usize, &PerturbationGenome)| {
            let index = first_index + k;
            match evaluate_candidate(
                self.item,
                g,
                self.detector,
                self.conf_floor,
                self.bounds.delta_abs_max,
                index,
            ) {
                Ok(c) => Outcome::Valid(c),
                Err(e) => {
                    log::warn!("{}: evaluation {index} failed: {e}", self.item.image_id);
                    Outcome::Invalid(EvaluationFailure {
                        evaluation_index: index,
                        genome: *g,
                        message: e.to_string(),
                    })
                }
            }
        };
        if self.parallel && self.detector.concurrent {
            genomes.par_iter().enumerate().map(eval).collect()
        } else {
            genomes.iter().enumerate().map(eval).collect()
        }
    }
}

#[derive(Debug, Clone)]
enum Outcome {
    Valid(EvaluatedCandidate),
    Invalid(EvaluationFailure),
}

/// Population member. Failed evaluations stay in the population with the
/// invalid sentinel so the population size is preserved.
#[derive(Debug, Clone)]
struct Member {
    genome: PerturbationGenome,
    objectives: ObjectiveVector,
    candidate: Option<EvaluatedCandidate>,
    rank: usize,
    crowding: f64,
}

impl Member {
    fn from_outcome(o: Outcome, failures: &mut Vec<EvaluationFailure>) -> Self {
        match o {
            Outcome::Valid(c) => Member {
                genome: c.genome,
                objectives: c.objectives,
                candidate: Some(c),
                rank: 0,
                crowding: 0.0,
            },
            Outcome::Invalid(f) => {
                let genome = f.genome;
                failures.push(f);
                Member {
                    genome,
                    objectives: INVALID_OBJECTIVES,
                    candidate: None,
                    rank: 0,
                    crowding: 0.0,
                }
            }
        }
    }
}

/// Assigns rank and crowding to each member and returns the fronts.
fn rank_population(pop: &mut [Member]) -> Vec<Vec<usize>> {
    let objs: Vec<ObjectiveVector> = pop.iter().map(|m| m.objectives).collect();
    let fronts = nondominated_sort(&objs);
    for (rank, front) in fronts.iter().enumerate() {
        let pts: Vec<ObjectiveVector> = front.iter().map(|&i| objs[i]).collect();
        for (&i, d) in front.iter().zip(crowding_distance(&pts)) {
            pop[i].rank = rank;
            pop[i].crowding = d;
        }
    }
    fronts
}

fn better(a: &Member, b: &Member) -> bool {
    a.rank < b.rank || (a.rank == b.rank && a.crowding > b.crowding)
}

fn tournament<'m, R: Rng + ?Sized>(rng: &mut R, pop: &'m [Member]) -> &'m Member {
    let a = &pop[rng.gen_range(0..pop.len())];
    let b = &pop[rng.gen_range(0..pop.len())];
    if better(b, a) {
        b
    } else {
        a
    }
}

/// Keeps `size` members of the ranked `pool` by front, then by descending
/// crowding; ties prefer the lexicographically smaller objective vector.
fn environmental_selection(mut pool: Vec<Member>, size: usize) -> Vec<Member> {
    let fronts = rank_population(&mut pool);
    let mut keep: Vec<usize> = Vec::with_capacity(size);
    for front in fronts {
        if keep.len() + front.len() <= size {
            keep.extend(front);
            if keep.len() == size {
                break;
            }
            continue;
        }
        let mut last = front;
        last.sort_by(|&a, &b| {
            pool[b]
                .crowding
                .total_cmp(&pool[a].crowding)
                .then_with(|| pool[a].objectives.lex_cmp(&pool[b].objectives))
                .then(a.cmp(&b))
        });
        keep.extend(last.into_iter().take(size - keep.len()));
        break;
    }
    keep.sort_unstable();
    let mut slots: Vec<Option<Member>> = pool.into_iter().map(Some).collect();
    keep.into_iter().filter_map(|i| slots[i].take()).collect()
}

fn first_front_archive(pop: &[Member]) -> Vec<EvaluatedCandidate> {
    let valid: Vec<&EvaluatedCandidate> = pop.iter().filter_map(|m| m.candidate.as_ref()).collect();
    let objs: Vec<ObjectiveVector> = valid.iter().map(|c| c.objectives).collect();
    let mut archive: Vec<EvaluatedCandidate> = nondominated_sort(&objs)
        .into_iter()
        .next()
        .unwrap_or_default()
        .into_iter()
        .map(|i| valid[i].clone())
        .collect();
    archive.sort_by_key(|c| c.evaluation_index);
    archive
}

/// Population snapshot passed to an observer after every generation.
pub struct GenerationView<'a> {
    /// 1-based; the initial population is generation 1.
    pub generation: usize,
    pub objectives: Vec<ObjectiveVector>,
    pub candidates: Vec<&'a EvaluatedCandidate>,
}

pub fn nsga2_run(
    problem: &Problem<'_>,
    config: &SearchConfig,
    run_id: usize,
    run_seed: u64,
) -> Result<ParetoArchive> {
    nsga2_run_observed(problem, config, run_id, run_seed, |_| {})
}

pub fn nsga2_run_observed(
    problem: &Problem<'_>,
    config: &SearchConfig,
    run_id: usize,
    run_seed: u64,
    mut observer: impl FnMut(&GenerationView<'_>),
) -> Result<ParetoArchive> {
    config.validate()?;
    if problem.item.annotations.is_empty() {
        return Err(Error::NoAnnotations);
    }
    let (lo, hi) = problem.bounds.search_box()?;
    let n = config.population_size;
    let mut rng = seeded_rng(run_seed);
    let mut failures = Vec::new();
    let mut evaluations = 0usize;

    let initial: Vec<PerturbationGenome> = (0..n)
        .map(|_| sample_genome(&mut rng, problem.bounds))
        .collect::<Result<_>>()?;
    let mut pop: Vec<Member> = problem
        .evaluate(&initial, evaluations)
        .into_iter()
        .map(|o| Member::from_outcome(o, &mut failures))
        .collect();
    evaluations += n;
    rank_population(&mut pop);
    notify(&mut observer, 1, &pop);

    for generation in 2..=config.generations {
        let mut offspring = Vec::with_capacity(n);
        while offspring.len() < n {
            let a = tournament(&mut rng, &pop).genome.to_array();
            let b = tournament(&mut rng, &pop).genome.to_array();
            let (mut c1, mut c2) = sbx_crossover(&mut rng, &a, &b, &lo, &hi, &config.variation);
            polynomial_mutation(&mut rng, &mut c1, &lo, &hi, &config.variation);
            polynomial_mutation(&mut rng, &mut c2, &lo, &hi, &config.variation);
            offspring.push(repair_genome(c1, problem.bounds)?);
            offspring.push(repair_genome(c2, problem.bounds)?);
        }
        let children: Vec<Member> = problem
            .evaluate(&offspring, evaluations)
            .into_iter()
            .map(|o| Member::from_outcome(o, &mut failures))
            .collect();
        evaluations += n;
        pop.extend(children);
        pop = environmental_selection(pop, n);
        rank_population(&mut pop);
        notify(&mut observer, generation, &pop);
    }

    Ok(ParetoArchive {
        image_id: problem.item.image_id.clone(),
        run_id,
        algorithm: Algorithm::Nsga2,
        candidates: first_front_archive(&pop),
        evaluations,
        failures,
    })
}

fn notify(observer: &mut impl FnMut(&GenerationView<'_>), generation: usize, pop: &[Member]) {
    let view = GenerationView {
        generation,
        objectives: pop.iter().map(|m| m.objectives).collect(),
        candidates: pop.iter().filter_map(|m| m.candidate.as_ref()).collect(),
    };
    observer(&view);
}

/// Incrementally maintained nondominated set.
#[derive(Debug, Clone, Default)]
pub struct NondominatedSet {
    members: Vec<EvaluatedCandidate>,
}

impl NondominatedSet {
    /// Inserts `c` unless an existing member dominates it; evicts members it dominates.
    pub fn insert(&mut self, c: EvaluatedCandidate) -> bool {
        if self.members.iter().any(|m| m.objectives.dominates(&c.objectives)) {
            return false;
        }
        self.members.retain(|m| !c.objectives.dominates(&m.objectives));
        self.members.push(c);
        true
    }

    pub fn into_sorted(mut self) -> Vec<EvaluatedCandidate> {
        self.members.sort_by_key(|c| c.evaluation_index);
        self.members
    }
}

/// Uniform sampling with the same budget as NSGA-II.
pub fn random_search_run(
    problem: &Problem<'_>,
    config: &SearchConfig,
    run_id: usize,
    run_seed: u64,
) -> Result<ParetoArchive> {
    random_search_run_with(problem, config, run_id, run_seed, false).map(|(a, _)| a)
}

/// As [`random_search_run`]; with `keep_all` every valid evaluation is also returned.
pub fn random_search_run_with(
    problem: &Problem<'_>,
    config: &SearchConfig,
    run_id: usize,
    run_seed: u64,
    keep_all: bool,
) -> Result<(ParetoArchive, Vec<EvaluatedCandidate>)> {
    config.validate()?;
    random_search_budget(problem, config.total_evaluations(), config.population_size, run_id, run_seed, keep_all)
}

/// Random search over an explicit evaluation budget, evaluated in batches.
pub fn random_search_budget(
    problem: &Problem<'_>,
    budget: usize,
    batch: usize,
    run_id: usize,
    run_seed: u64,
    keep_all: bool,
) -> Result<(ParetoArchive, Vec<EvaluatedCandidate>)> {
    if problem.item.annotations.is_empty() {
        return Err(Error::NoAnnotations);
    }
    let mut rng = seeded_rng(run_seed);
    let mut archive = NondominatedSet::default();
    let mut all = Vec::new();
    let mut failures = Vec::new();
    let mut evaluations = 0usize;
    let batch = batch.max(1);
    while evaluations < budget {
        let k = batch.min(budget - evaluations);
        let genomes: Vec<PerturbationGenome> = (0..k)
            .map(|_| sample_genome(&mut rng, problem.bounds))
            .collect::<Result<_>>()?;
        for outcome in problem.evaluate(&genomes, evaluations) {
            match outcome {
                Outcome::Valid(c) => {
                    if keep_all {
                        all.push(c.clone());
                    }
                    archive.insert(c);
                }
                Outcome::Invalid(f) => failures.push(f),
            }
        }
        evaluations += k;
    }
    Ok((
        ParetoArchive {
            image_id: problem.item.image_id.clone(),
            run_id,
            algorithm: Algorithm::Random,
            candidates: archive.into_sorted(),
            evaluations,
            failures,
        },
        all,
    ))
}

pub fn run_algorithm(
    algorithm: Algorithm,
    problem: &Problem<'_>,
    config: &SearchConfig,
    run_id: usize,
    run_seed: u64,
) -> Result<ParetoArchive> {
    match algorithm {
        Algorithm::Nsga2 => nsga2_run(problem, config, run_id, run_seed),
        Algorithm::Random => random_search_run(problem, config, run_id, run_seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{render_synthetic_scene, DiskObject, SyntheticParams, SyntheticSceneSpec};
    use crate::geometry::build_roi;
    use crate::perturbation::BoundsConfig;
    use crate::stats::{hypervolume, DEFAULT_HV_REF};
    use proptest::prelude::*;

    fn ov(f1: f64, f2: f64, f3: f64) -> ObjectiveVector {
        ObjectiveVector::new(f1, f2, f3)
    }

    fn scene() -> (DatasetItem, GenomeBounds, DetectorHandle) {
        let spec = SyntheticSceneSpec {
            id: "scene".into(),
            width: 96,
            height: 72,
            detector: SyntheticParams::default(),
            objects: vec![
                DiskObject {
                    class_id: 0,
                    cx: 30,
                    cy: 30,
                    radius: 9,
                    fill: 75,
                },
                DiskObject {
                    class_id: 1,
                    cx: 66,
                    cy: 40,
                    radius: 8,
                    fill: 185,
                },
            ],
        };
        let (image, annotations) = render_synthetic_scene(&spec).unwrap();
        let roi = build_roi(&annotations, 5.0, (spec.width, spec.height));
        let item = DatasetItem {
            image_id: spec.id.clone(),
            image,
            annotations,
        };
        (item, BoundsConfig::default().with_roi(roi), DetectorHandle::synthetic("synthetic", spec.detector))
    }

    fn config(pop: usize, gens: usize) -> SearchConfig {
        SearchConfig {
            population_size: pop,
            generations: gens,
            runs: 1,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn sort_fixtures() {
        assert_eq!(nondominated_sort(&[ov(0.5, 0.5, 0.5)]), vec![vec![0]]);
        assert_eq!(nondominated_sort(&[ov(0.0, 0.0, 0.0), ov(1.0, 1.0, 1.0)]), vec![vec![0], vec![1]]);
        assert_eq!(
            nondominated_sort(&[ov(0.0, 1.0, 0.0), ov(1.0, 0.0, 0.0), ov(1.0, 1.0, 0.0)]),
            vec![vec![0, 1], vec![2]]
        );
        assert!(nondominated_sort(&[]).is_empty());
    }

    #[test]
    fn crowding_fixtures() {
        assert!(crowding_distance(&[ov(0.0, 1.0, 0.0), ov(1.0, 0.0, 0.0)]).iter().all(|d| d.is_infinite()));
        // the middle point's neighbours span the whole f1 range
        let d = crowding_distance(&[ov(0.0, 0.5, 0.5), ov(0.4, 0.5, 0.5), ov(1.0, 0.5, 0.5)]);
        assert!(d[0].is_infinite() && d[2].is_infinite());
        assert!((d[1] - 1.0).abs() < 1e-12);
        let d = crowding_distance(&[ov(0.0, 0.2, 0.5), ov(0.25, 0.2, 0.5), ov(0.5, 0.2, 0.5), ov(1.0, 0.2, 0.5)]);
        assert!((d[1] - 0.5).abs() < 1e-12);
        assert!((d[2] - 0.75).abs() < 1e-12);
        let same = crowding_distance(&[ov(0.3, 0.3, 0.3); 4]);
        assert_eq!(same.iter().filter(|d| **d == 0.0).count(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(config(4, 1).validate().is_ok());
        assert!(config(5, 1).validate().is_err());
        assert!(config(2, 1).validate().is_err());
        assert!(config(4, 0).validate().is_err());
        assert_eq!(SearchConfig::default().total_evaluations(), 20_000);
        assert_eq!(config(4, 1).run_seed(3), 10);
    }

    #[test]
    fn single_generation_keeps_initial_population() {
        let (item, bounds, det) = scene();
        let problem = Problem {
            item: &item,
            bounds: &bounds,
            detector: &det,
            conf_floor: 0.25,
            parallel: false,
        };
        let mut initial = Vec::new();
        let a = nsga2_run_observed(&problem, &config(4, 1), 0, 1, |v| {
            initial = v.candidates.iter().map(|c| c.genome).collect()
        })
        .unwrap();
        assert_eq!(a.evaluations, 4);
        assert_eq!(det.calls(), 4);
        assert!(a.candidates.iter().all(|c| initial.contains(&c.genome)));
        assert!(a.candidates.iter().all(|c| c.evaluation_index < 4));
    }

    #[test]
    fn single_random_evaluation() {
        let (item, bounds, det) = scene();
        let problem = Problem {
            item: &item,
            bounds: &bounds,
            detector: &det,
            conf_floor: 0.25,
            parallel: false,
        };
        let (a, _) = random_search_budget(&problem, 1, 4, 0, 3, false).unwrap();
        assert_eq!(a.candidates.len(), 1);
        assert_eq!(a.evaluations, 1);
    }

    #[test]
    fn runs_are_deterministic_and_budget_matched() {
        let (item, bounds, det) = scene();
        let cfg = config(8, 6);
        let serial = Problem {
            item: &item,
            bounds: &bounds,
            detector: &det,
            conf_floor: 0.25,
            parallel: false,
        };
        let parallel = Problem { parallel: true, ..serial };
        let a = nsga2_run(&serial, &cfg, 0, 11).unwrap();
        let b = nsga2_run(&parallel, &cfg, 0, 11).unwrap();
        assert_eq!(a, b);
        let calls_nsga = det.calls();
        let r1 = random_search_run(&serial, &cfg, 0, 11).unwrap();
        let r2 = random_search_run(&parallel, &cfg, 0, 11).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(det.calls() - calls_nsga, calls_nsga);
        assert_eq!(a.evaluations, r1.evaluations);
        assert_eq!(a.evaluations, 48);
    }

    #[test]
    fn random_archive_is_exactly_the_nondominated_subset() {
        let (item, bounds, det) = scene();
        let problem = Problem {
            item: &item,
            bounds: &bounds,
            detector: &det,
            conf_floor: 0.25,
            parallel: true,
        };
        let (a, all) = random_search_run_with(&problem, &config(10, 20), 0, 5, true).unwrap();
        assert_eq!(all.len(), 200);
        let oracle: Vec<usize> = all
            .iter()
            .filter(|c| !all.iter().any(|o| o.objectives.dominates(&c.objectives)))
            .map(|c| c.evaluation_index)
            .collect();
        let got: Vec<usize> = a.candidates.iter().map(|c| c.evaluation_index).collect();
        assert_eq!(got, oracle);
    }

    #[test]
    fn nsga2_is_elitist_and_improves_hypervolume() {
        let (item, bounds, det) = scene();
        let problem = Problem {
            item: &item,
            bounds: &bounds,
            detector: &det,
            conf_floor: 0.25,
            parallel: true,
        };
        let mut best: Vec<ObjectiveVector> = Vec::new();
        let mut hv: Vec<f64> = Vec::new();
        let archive = nsga2_run_observed(&problem, &config(20, 50), 0, 9, |v| {
            let lex = v.objectives.iter().copied().min_by(|a, b| a.lex_cmp(b)).unwrap();
            best.push(lex);
            let objs: Vec<ObjectiveVector> = v.candidates.iter().map(|c| c.objectives).collect();
            hv.push(hypervolume(&objs, DEFAULT_HV_REF));
        })
        .unwrap();
        assert_eq!(best.len(), 50);
        for w in best.windows(2) {
            assert!(w[1].lex_cmp(&w[0]).is_le(), "{:?} -> {:?}", w[0], w[1]);
        }
        assert!(hv[49] >= hv[0]);
        for (i, a) in archive.candidates.iter().enumerate() {
            for (j, b) in archive.candidates.iter().enumerate() {
                assert!(i == j || !a.objectives.dominates(&b.objectives));
            }
        }
    }

    fn small_box() -> ([f64; GENOME_LEN], [f64; GENOME_LEN]) {
        ([0.0, 0.0, 8.0, 0.15, -48.0, -48.0, -48.0], [100.0, 80.0, 80.0, 0.8, 48.0, 48.0, 48.0])
    }

    proptest! {
        #[test]
        fn variation_stays_in_box(seed in any::<u64>(), u in proptest::array::uniform7(0.0..1.0f64), v in proptest::array::uniform7(0.0..1.0f64)) {
            let (lo, hi) = small_box();
            let pick = |t: [f64; 7]| {
                let mut x = [0.0; GENOME_LEN];
                for i in 0..GENOME_LEN {
                    x[i] = lo[i] + t[i] * (hi[i] - lo[i]);
                }
                x
            };
            let mut rng = seeded_rng(seed);
            let cfg = VariationConfig::default();
            let (mut a, mut b) = sbx_crossover(&mut rng, &pick(u), &pick(v), &lo, &hi, &cfg);
            polynomial_mutation(&mut rng, &mut a, &lo, &hi, &cfg);
            polynomial_mutation(&mut rng, &mut b, &lo, &hi, &cfg);
            for i in 0..GENOME_LEN {
                prop_assert!(lo[i] <= a[i] && a[i] <= hi[i]);
                prop_assert!(lo[i] <= b[i] && b[i] <= hi[i]);
            }
        }

        #[test]
        fn sort_matches_dominance_oracle(pts in proptest::collection::vec((0u8..4, 0u8..4, 0u8..4), 1..30)) {
            let pts: Vec<ObjectiveVector> = pts.into_iter().map(|(a, b, c)| ov(a as f64, b as f64, c as f64)).collect();
            let fronts = nondominated_sort(&pts);
            let mut rank = vec![usize::MAX; pts.len()];
            for (r, f) in fronts.iter().enumerate() {
                for &i in f {
                    rank[i] = r;
                }
            }
            prop_assert!(rank.iter().all(|r| *r != usize::MAX));
            for i in 0..pts.len() {
                for j in 0..pts.len() {
                    if pts[i].dominates(&pts[j]) {
                        prop_assert!(rank[i] < rank[j]);
                    }
                }
                if rank[i] > 0 {
                    prop_assert!(fronts[rank[i] - 1].iter().any(|&k| pts[k].dominates(&pts[i])));
                }
            }
        }
    }
}
