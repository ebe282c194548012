use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use patchsearch::campaign::{
    emit_reports, emit_transferability, read_archive_genomes, run_campaign, transferability_matrix,
    write_synthetic_dataset, CampaignConfig, NamedDetector, TransferSource,
};
use patchsearch::detector::{generate_scene_suite, DetectorSpec, SceneSuiteParams, SyntheticSceneSpec};
use patchsearch::search::Algorithm;

#[derive(Parser)]
#[command(name = "patchsearch", version, about = "Search-based robustness testing of object detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full campaign and write the report files.
    Run(CampaignArgs),
    /// Replay archived genomes from a report directory under the configured detectors.
    Replay {
        #[command(flatten)]
        campaign: CampaignArgs,
        /// Report directory holding `archives.csv`.
        #[arg(long)]
        archives: PathBuf,
    },
    /// Render a synthetic dataset from a scene file.
    Synth {
        /// JSON or TOML file with either `scenes = [...]` or a `[suite]` table.
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute the comparison block from a report directory.
    Analyze {
        #[arg(long)]
        out: PathBuf,
        /// Reference point as `f1,f2,f3`.
        #[arg(long, value_parser = parse_triple)]
        hv_ref: Option<[f64; 3]>,
    },
}

#[derive(Args, Clone)]
struct CampaignArgs {
    /// JSON or TOML campaign file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Image directory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Label directory, defaults to the image directory.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Class list file (one name per line) or comma-separated names.
    #[arg(long)]
    classes: Option<String>,
    /// `synthetic`, `synthetic:<threshold>` or `external:<command>`, optionally prefixed by `name=`.
    #[arg(long = "detector")]
    detectors: Vec<String>,
    #[arg(long)]
    pop: Option<usize>,
    #[arg(long)]
    gens: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    conf_floor: Option<f64>,
    #[arg(long)]
    tau_loc: Option<f64>,
    #[arg(long)]
    tau_detect: Option<f64>,
    #[arg(long, value_parser = parse_triple)]
    hv_ref: Option<[f64; 3]>,
}

fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected three comma-separated numbers, got `{s}`"))
}

fn read_structured<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

fn parse_detector(s: &str) -> Result<NamedDetector> {
    if let Some((name, rest)) = s.split_once('=') {
        let plain = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if plain {
            if let Ok(spec) = DetectorSpec::parse(rest) {
                return Ok(NamedDetector { name: name.into(), spec });
            }
        }
    }
    let spec = DetectorSpec::parse(s)?;
    let name = match &spec {
        DetectorSpec::External { .. } => "external".to_string(),
        DetectorSpec::Synthetic { .. } => s.to_string(),
    };
    Ok(NamedDetector { name, spec })
}

fn parse_classes(s: &str) -> Result<Vec<String>> {
    let path = Path::new(s);
    let names: Vec<String> = if path.is_file() {
        fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect()
    } else {
        s.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect()
    };
    if names.is_empty() {
        bail!("empty class list `{s}`");
    }
    Ok(names)
}

impl CampaignArgs {
    fn resolve(&self) -> Result<CampaignConfig> {
        let mut c: CampaignConfig = match &self.config {
            Some(p) => read_structured(p)?,
            None => CampaignConfig::default(),
        };
        if let Some(d) = &self.dataset {
            c.images = Some(d.clone());
        }
        if let Some(l) = &self.labels {
            c.labels = Some(l.clone());
        }
        if let Some(cl) = &self.classes {
            c.classes = parse_classes(cl)?;
        }
        if !self.detectors.is_empty() {
            let mut named = self.detectors.iter().map(|s| parse_detector(s)).collect::<Result<Vec<_>>>()?;
            let externals = named.iter().filter(|d| d.name == "external").count();
            if externals > 1 {
                for (k, d) in named.iter_mut().filter(|d| d.name == "external").enumerate() {
                    d.name = format!("external{k}");
                }
            }
            c.detectors = named;
        }
        let s = &mut c.search;
        s.population_size = self.pop.unwrap_or(s.population_size);
        s.generations = self.gens.unwrap_or(s.generations);
        s.runs = self.runs.unwrap_or(s.runs);
        s.seed = self.seed.unwrap_or(s.seed);
        c.workers = self.workers.unwrap_or(c.workers);
        if let Some(o) = &self.out {
            c.out = o.clone();
        }
        let f = &mut c.failure;
        f.conf_floor = self.conf_floor.unwrap_or(f.conf_floor);
        f.tau_loc = self.tau_loc.unwrap_or(f.tau_loc);
        f.tau_detect = self.tau_detect.unwrap_or(f.tau_detect);
        c.hv_ref = self.hv_ref.unwrap_or(c.hv_ref);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    #[serde(default)]
    scenes: Vec<SyntheticSceneSpec>,
    suite: Option<SuiteSpec>,
}

#[derive(Deserialize)]
struct SuiteSpec {
    count: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    params: SceneSuiteParams,
}

fn run(args: &CampaignArgs) -> Result<()> {
    let config = args.resolve()?;
    let (items, warnings) = config.load_items()?;
    for w in &warnings {
        log::warn!("{}: {}", w.image_id, w.message);
    }
    let detectors = config.build_detectors()?;
    log::info!(
        "{} images, {} detectors, {} evaluations per run",
        items.len(),
        detectors.len(),
        config.search.total_evaluations()
    );
    let report = run_campaign(&config, &items, &detectors)?;
    let files = emit_reports(&report, &config.out)?;
    for c in &report.comparisons {
        println!(
            "{}: FR nsga2 {} random {}, mean HV nsga2 {} random {}",
            c.detector,
            fmt_opt(c.nsga2.failure_rate),
            fmt_opt(c.random.failure_rate),
            fmt_opt(c.nsga2.mean_hypervolume),
            fmt_opt(c.random.mean_hypervolume),
        );
    }
    if !report.errors.is_empty() {
        log::warn!("{} errors recorded in summary.json", report.errors.len());
    }
    log::info!("wrote {} files to {}", files.len(), config.out.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn replay(args: &CampaignArgs, archives: &Path) -> Result<()> {
    let config = args.resolve()?;
    let (items, _) = config.load_items()?;
    let detectors = config.build_detectors()?;
    let targets: Vec<_> = detectors.iter().collect();
    let genomes = read_archive_genomes(&archives.join("archives.csv"))?;
    let mut matrices = Vec::new();
    for algorithm in Algorithm::ALL {
        let sources: Vec<TransferSource> = genomes
            .iter()
            .filter(|((_, a), _)| *a == algorithm)
            .map(|((name, _), g)| TransferSource {
                name: name.clone(),
                genomes: g.clone(),
            })
            .collect();
        if sources.is_empty() {
            continue;
        }
        matrices.push(transferability_matrix(algorithm, &sources, &targets, &items, &config.failure)?);
    }
    emit_transferability(&matrices, &config.out)?;
    println!("{}", serde_json::to_string_pretty(&matrices)?);
    Ok(())
}

fn synth(scenes: &Path, out: &Path) -> Result<()> {
    let file: SceneFile = read_structured(scenes)?;
    let mut specs = file.scenes;
    if let Some(s) = file.suite {
        specs.extend(generate_scene_suite(s.count, s.seed, &s.params)?);
    }
    if specs.is_empty() {
        bail!("{} defines no scenes", scenes.display());
    }
    let items = write_synthetic_dataset(&specs, out)?;
    println!("wrote {} scenes to {}", items.len(), out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run(a) => run(&a),
        Command::Replay { campaign, archives } => replay(&campaign, &archives),
        Command::Synth { scenes, out } => synth(&scenes, &out),
        Command::Analyze { out, hv_ref } => {
            let analysis = patchsearch::campaign::analyze_outputs(&out, hv_ref.unwrap_or(patchsearch::stats::DEFAULT_HV_REF))?;
            println!("{}", serde_json::to_string_pretty(&analysis)?);
            Ok(())
        }
    }
}
