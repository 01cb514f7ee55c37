//! Command implementations. Each takes explicit paths and returns a summary;
//! `main` only parses flags and maps errors to exit codes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use morphdet::em_trainer::{metrics_csv, train, visual_init_vectors};
use morphdet::embedder::grad_evaluations;
use morphdet::evalkit::{evaluate, EvalReport, CSV_HEADER};
use morphdet::morph_inference::{exemplars_csv, parse_exemplars_csv, take_shots};
use morphdet::prototype_store::read_vector_sections;
use morphdet::toyworld::{read_dataset, write_dataset};
use morphdet::{morph, DetectConfig, DetectorState, Scene, Universe};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult, WithPath};
use crate::experiments;
use crate::world::World;

pub const UNIVERSE_FILE: &str = "universe.jsonl";
pub const SEMANTIC_FILE: &str = "semantic.txt";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const EXEMPLAR_FILE: &str = "exemplars.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";

pub fn checkpoint_name(iteration: usize) -> String {
    format!("checkpoint_iter{iteration}.json")
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).at(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).at(path)
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).at(path)
}

pub fn load_universe(path: &Path) -> CliResult<Universe> {
    let f = fs::File::open(path).at(path)?;
    Universe::read_from(BufReader::new(f)).at(path)
}

pub fn load_dataset(path: &Path) -> CliResult<Vec<Scene>> {
    let f = fs::File::open(path).at(path)?;
    read_dataset(BufReader::new(f)).at(path)
}

pub fn load_checkpoint(path: &Path) -> CliResult<DetectorState> {
    DetectorState::from_checkpoint(&read_text(path)?).at(path)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub files: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Generates the universe, both datasets, semantic vectors and novel-class
/// exemplars into `out`, plus a manifest with a hash of each file.
pub fn cmd_gen(config: &ExperimentConfig, out: &Path) -> CliResult<Manifest> {
    let config = config.with_seed(config.seed);
    create_dir(out)?;
    let world = World::generate(&config)?;

    let mut files: Vec<(&str, Vec<u8>)> = Vec::new();
    let mut buf = Vec::new();
    world.universe.write_to(&mut buf)?;
    files.push((UNIVERSE_FILE, buf));
    files.push((SEMANTIC_FILE, world.universe.semantic_text()?.into_bytes()));
    for (name, scenes) in [(TRAIN_FILE, &world.train), (TEST_FILE, &world.test)] {
        let mut buf = Vec::new();
        write_dataset(scenes, &mut buf)?;
        files.push((name, buf));
    }
    files.push((EXEMPLAR_FILE, exemplars_csv(&world.exemplars).into_bytes()));
    files.push((CONFIG_FILE, config.to_toml().into_bytes()));

    let mut entries = Vec::with_capacity(files.len());
    for (name, bytes) in &files {
        write(&out.join(name), bytes)?;
        entries.push(ManifestEntry {
            path: (*name).into(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
    }
    let manifest = Manifest { seed: config.seed, files: entries };
    let text = serde_json::to_string_pretty(&manifest).map_err(morphdet::Error::from)?;
    write(&out.join(MANIFEST_FILE), text + "\n")?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Semantic,
    Visual,
}

impl std::str::FromStr for Init {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "semantic" => Ok(Init::Semantic),
            "visual" => Ok(Init::Visual),
            other => Err(format!("unknown init `{other}` (expected semantic or visual)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoints: Vec<PathBuf>,
    pub metrics: PathBuf,
    pub final_loss: f64,
}

/// Trains on `<data>/train.jsonl` with prototypes initialized from
/// `<data>/semantic.txt` (or visual means). Writes one checkpoint per EM
/// iteration (the state right after its M-step) and the per-epoch metrics.
pub fn cmd_train(config: &ExperimentConfig, data: &Path, out: &Path, init: Init) -> CliResult<TrainSummary> {
    let config = config.with_seed(config.seed);
    let train_path = data.join(TRAIN_FILE);
    let dataset = load_dataset(&train_path)?;
    let sem_path = data.join(SEMANTIC_FILE);
    let (base, _novel) = read_vector_sections(&read_text(&sem_path)?).at(&sem_path)?;
    let init_vectors: BTreeMap<_, _> = match init {
        Init::Semantic => base,
        Init::Visual => {
            let d = base.values().next().map(Vec::len).ok_or_else(|| CliError::Data {
                path: sem_path.clone(),
                source: morphdet::Error::Empty("base semantic vectors"),
            })?;
            let ids: Vec<u32> = base.keys().copied().collect();
            visual_init_vectors(&dataset, &ids, d).at(&train_path)?
        }
    };
    let outcome = train(&dataset, &init_vectors, &config.train)?;
    create_dir(out)?;
    let mut checkpoints = Vec::new();
    for (i, snap) in outcome.snapshots.iter().enumerate() {
        let path = out.join(checkpoint_name(i + 1));
        write(&path, snap.to_checkpoint()?)?;
        checkpoints.push(path);
    }
    let metrics = out.join(METRICS_FILE);
    write(&metrics, metrics_csv(&outcome.metrics))?;
    Ok(TrainSummary {
        checkpoints,
        metrics,
        final_loss: outcome.metrics.last().map_or(f64::NAN, |m| m.loss.total),
    })
}

#[derive(Debug, Clone)]
pub struct MorphSummary {
    pub added: Vec<u32>,
    pub wall_time: Duration,
    /// Gradient evaluations performed while morphing; always zero.
    pub gradient_evaluations: u64,
}

/// Adds a novel prototype for every class in the exemplar file, using the
/// first `shots` exemplars of each.
pub fn cmd_morph(checkpoint: &Path, exemplars: &Path, shots: usize, out: &Path) -> CliResult<MorphSummary> {
    let state = load_checkpoint(checkpoint)?;
    let all = parse_exemplars_csv(&read_text(exemplars)?).at(exemplars)?;
    let chosen = take_shots(&all, shots).at(exemplars)?;
    let grads_before = grad_evaluations();
    let start = Instant::now();
    let morphed = morph(&state, &chosen).at(exemplars)?;
    let wall_time = start.elapsed();
    let gradient_evaluations = grad_evaluations() - grads_before;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write(out, morphed.to_checkpoint()?)?;
    Ok(MorphSummary {
        added: chosen.keys().copied().collect(),
        wall_time,
        gradient_evaluations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    All,
    Base,
    Novel,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all" => Ok(Split::All),
            "base" => Ok(Split::Base),
            "novel" => Ok(Split::Novel),
            other => Err(format!("unknown split `{other}` (expected all, base or novel)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub report: EvalReport,
    /// Report of the `before` checkpoint, when one was given.
    pub before: Option<EvalReport>,
}

fn report_for(
    state: &DetectorState,
    scenes: &[Scene],
    universe: &Universe,
    detect: &DetectConfig,
    path: &Path,
) -> CliResult<EvalReport> {
    let novel: Vec<u32> = universe
        .novel_ids
        .iter()
        .copied()
        .filter(|&c| state.prototypes.contains(c))
        .collect();
    evaluate(state, scenes, &universe.base_ids, &novel, detect).at(path)
}

/// Per-base-class AP50 and AP before and after morphing, side by side.
pub fn paired_base_csv(before: &EvalReport, after: &EvalReport) -> String {
    let mut out = String::from("class_id,AP50_before,AP50_after,AP_before,AP_after\n");
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    for c in &after.base.classes {
        let (Some(b), Some(a)) = (before.per_class.get(c), after.per_class.get(c)) else {
            continue;
        };
        let _ = writeln!(out, "{c},{:.6},{:.6},{:.6},{:.6}", b[0], a[0], mean(b), mean(a));
    }
    let _ = writeln!(
        out,
        "mean,{:.6},{:.6},{:.6},{:.6}",
        before.base.ap50, after.base.ap50, before.base.ap, after.base.ap
    );
    out
}

/// Evaluates `checkpoint` on `dataset`, writing `report.json` and
/// `report.csv` into `out`. With `before`, also writes `base_paired.csv`.
pub fn cmd_eval(
    checkpoint: &Path,
    dataset: &Path,
    universe: &Path,
    split: Split,
    detect: &DetectConfig,
    before: Option<&Path>,
    out: &Path,
) -> CliResult<EvalOutput> {
    let universe = load_universe(universe)?;
    let scenes = load_dataset(dataset)?;
    let state = load_checkpoint(checkpoint)?;
    let report = report_for(&state, &scenes, &universe, detect, dataset)?;
    let before = match before {
        Some(p) => Some(report_for(&load_checkpoint(p)?, &scenes, &universe, detect, dataset)?),
        None => None,
    };
    create_dir(out)?;
    let json = report.to_json()?;
    write(&out.join("report.json"), json + "\n")?;
    let method = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("detector");
    let rows: String = report
        .csv_rows(method)
        .lines()
        .filter(|row| {
            let split_col = row.split(',').nth(1).unwrap_or("");
            match split {
                Split::All => true,
                Split::Base => split_col == "base",
                Split::Novel => split_col == "novel",
            }
        })
        .map(|row| format!("{row}\n"))
        .collect();
    write(&out.join("report.csv"), format!("{CSV_HEADER}{rows}"))?;
    if let Some(b) = &before {
        write(&out.join("base_paired.csv"), paired_base_csv(b, &report))?;
    }
    Ok(EvalOutput { report, before })
}

/// Runs a canned experiment and writes its tables under
/// `<output_dir>/<name>/`.
pub fn cmd_experiment(name: &str, config: &ExperimentConfig) -> CliResult<PathBuf> {
    let result = experiments::run(name, config)?;
    let dir = result.write(&config.output_dir)?;
    let cfg_path = dir.join(CONFIG_FILE);
    write(&cfg_path, config.to_toml())?;
    Ok(dir)
}

/// Writes a dataset file; used by tests that build inputs by hand.
pub fn save_dataset(scenes: &[Scene], path: &Path) -> CliResult<()> {
    let f = fs::File::create(path).at(path)?;
    write_dataset(scenes, BufWriter::new(f)).at(path)
}
