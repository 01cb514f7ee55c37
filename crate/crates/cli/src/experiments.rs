//! Canned multi-seed experiments. Each writes `raw.csv` (one row per seed and
//! variant) and `summary.csv` (seed means per variant).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use morphdet::em_trainer::{train, visual_init_vectors};
use morphdet::evalkit::EvalReport;
use morphdet::numkernel::{l2_normalize, VecF};
use morphdet::{morph, DetectorState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult, WithPath};
use crate::world::World;

pub const EXPERIMENTS: [&str; 4] = ["em_iterations", "lambda", "init", "zero_shot"];
pub const LAMBDA_GRID: [f64; 5] = [0.0, 0.3, 0.5, 0.7, 1.0];

const RANDOM_PROTOTYPE_SALT: u64 = 0x7261_6e64;

/// Metrics recorded for every run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunMetrics {
    pub novel_ap50: f64,
    pub novel_ap: f64,
    pub novel_recall100: f64,
    pub base_ap50: f64,
    pub base_ap: f64,
}

impl RunMetrics {
    pub const COLUMNS: [&'static str; 5] =
        ["novel_AP50", "novel_AP", "novel_recall100", "base_AP50", "base_AP"];

    pub fn from_report(r: &EvalReport) -> Self {
        let novel = r.novel.as_ref();
        RunMetrics {
            novel_ap50: novel.map_or(0.0, |n| n.ap50),
            novel_ap: novel.map_or(0.0, |n| n.ap),
            novel_recall100: novel.map_or(0.0, |n| n.recall_at.get(&100).copied().unwrap_or(0.0)),
            base_ap50: r.base.ap50,
            base_ap: r.base.ap,
        }
    }

    fn values(&self) -> [f64; 5] {
        [self.novel_ap50, self.novel_ap, self.novel_recall100, self.base_ap50, self.base_ap]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub seed: u64,
    pub variant: String,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub name: String,
    /// Header of the variant column, e.g. `iteration` or `lambda`.
    pub variant_column: &'static str,
    pub records: Vec<Record>,
}

impl ExperimentResult {
    /// Variants in first-seen order.
    pub fn variants(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.variant) {
                out.push(r.variant.clone());
            }
        }
        out
    }

    pub fn raw_csv(&self) -> String {
        let mut out = format!("seed,{},{}\n", self.variant_column, RunMetrics::COLUMNS.join(","));
        for r in &self.records {
            let _ = write!(out, "{},{}", r.seed, r.variant);
            for v in r.metrics.values() {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = format!("{},{},seeds\n", self.variant_column, RunMetrics::COLUMNS.join(","));
        for variant in self.variants() {
            let rows: Vec<&Record> = self.records.iter().filter(|r| r.variant == variant).collect();
            let _ = write!(out, "{variant}");
            for k in 0..RunMetrics::COLUMNS.len() {
                let mean = rows.iter().map(|r| r.metrics.values()[k]).sum::<f64>() / rows.len() as f64;
                let _ = write!(out, ",{mean:.6}");
            }
            let _ = writeln!(out, ",{}", rows.len());
        }
        out
    }

    /// Writes both tables under `<dir>/<name>/`; returns that directory.
    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        let out = dir.join(&self.name);
        std::fs::create_dir_all(&out).at(&out)?;
        let raw = out.join("raw.csv");
        std::fs::write(&raw, self.raw_csv()).at(&raw)?;
        let summary = out.join("summary.csv");
        std::fs::write(&summary, self.summary_csv()).at(&summary)?;
        Ok(out)
    }
}

fn morph_and_score(state: &DetectorState, world: &World, config: &ExperimentConfig) -> morphdet::Result<RunMetrics> {
    let morphed = morph(state, &world.exemplars)?;
    Ok(RunMetrics::from_report(&world.evaluate(&morphed, config)?))
}

/// Runs experiment `name` over every seed in `config.seeds`.
pub fn run(name: &str, config: &ExperimentConfig) -> CliResult<ExperimentResult> {
    let variant_column = match name {
        "em_iterations" => "iteration",
        "lambda" => "lambda",
        "init" => "init",
        "zero_shot" => "prototypes",
        other => {
            return Err(CliError::Usage(format!(
                "unknown experiment `{other}`; valid names: {}",
                EXPERIMENTS.join(", ")
            )))
        }
    };
    let mut records = Vec::new();
    for &seed in &config.seeds {
        let cfg = config.with_seed(seed);
        let world = World::generate(&cfg)?;
        let mut push = |variant: String, metrics: RunMetrics| records.push(Record { seed, variant, metrics });
        match name {
            "em_iterations" => {
                let outcome = train(&world.train, &world.base_semantics()?, &cfg.train)?;
                for (i, snap) in outcome.snapshots.iter().enumerate() {
                    push((i + 1).to_string(), morph_and_score(snap, &world, &cfg)?);
                }
            }
            "lambda" => {
                for lambda in LAMBDA_GRID {
                    let mut c = cfg.clone();
                    c.train.lambda = lambda;
                    let outcome = train(&world.train, &world.base_semantics()?, &c.train)?;
                    push(lambda.to_string(), morph_and_score(outcome.final_snapshot(), &world, &c)?);
                }
            }
            "init" => {
                let semantic = world.base_semantics()?;
                let d = cfg.universe.d_sem;
                let visual = visual_init_vectors(&world.train, &world.universe.base_ids, d)?;
                for (label, init) in [("semantic", semantic), ("visual", visual)] {
                    let outcome = train(&world.train, &init, &cfg.train)?;
                    push(label.into(), morph_and_score(outcome.final_snapshot(), &world, &cfg)?);
                }
            }
            "zero_shot" => {
                let outcome = train(&world.train, &world.base_semantics()?, &cfg.train)?;
                let trained = outcome.final_snapshot();
                let semantic = world.universe.semantics(&world.universe.novel_ids)?;
                let mut with_semantic = trained.prototypes.clone();
                for (&c, v) in &semantic {
                    with_semantic = with_semantic.add_novel_semantic(c, v)?;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ RANDOM_PROTOTYPE_SALT);
                let mut with_random = trained.prototypes.clone();
                for &c in &world.universe.novel_ids {
                    let v: VecF = (0..trained.prototypes.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
                    with_random = with_random.add_novel(c, &l2_normalize(&v)?)?;
                }
                for (label, protos) in [("semantic", with_semantic), ("random", with_random)] {
                    let state = DetectorState::new(trained.params.clone(), protos, trained.config.clone())?;
                    push(label.into(), RunMetrics::from_report(&world.evaluate(&state, &cfg)?));
                }
            }
            _ => unreachable!("name checked above"),
        }
    }
    Ok(ExperimentResult { name: name.into(), variant_column, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.seeds = vec![3];
        c.universe.n_base = 3;
        c.universe.n_novel = 2;
        c.scenes.scenes_per_class = 3;
        c.test_scenes_per_class = 2;
        c.train.m_step_epochs = 1;
        c.train.em_iterations = 2;
        c
    }

    #[test]
    fn unknown_name_is_usage_error() {
        let e = run("nope", &tiny()).unwrap_err();
        assert_eq!(e.exit_code(), crate::error::EXIT_USAGE);
        for n in EXPERIMENTS {
            assert!(e.to_string().contains(n));
        }
    }

    #[test]
    fn tables_have_one_row_per_seed_and_variant() {
        let r = run("em_iterations", &tiny()).unwrap();
        assert_eq!(r.records.len(), 2);
        let raw = r.raw_csv();
        assert_eq!(raw.lines().next().unwrap(), "seed,iteration,novel_AP50,novel_AP,novel_recall100,base_AP50,base_AP");
        assert_eq!(raw.lines().count(), 3);
        assert_eq!(r.summary_csv().lines().count(), 3);
        let again = run("em_iterations", &tiny()).unwrap();
        assert_eq!(again.raw_csv(), raw);
    }

    #[test]
    fn summary_averages_seeds() {
        let m = |x| RunMetrics { novel_ap50: x, novel_ap: 0.0, novel_recall100: 0.0, base_ap50: 0.0, base_ap: 0.0 };
        let r = ExperimentResult {
            name: "t".into(),
            variant_column: "v",
            records: vec![
                Record { seed: 0, variant: "a".into(), metrics: m(0.25) },
                Record { seed: 1, variant: "a".into(), metrics: m(0.75) },
                Record { seed: 0, variant: "b".into(), metrics: m(1.0) },
            ],
        };
        let s = r.summary_csv();
        let rows: Vec<&str> = s.lines().collect();
        assert_eq!(rows[1], "a,0.500000,0.000000,0.000000,0.000000,0.000000,2");
        assert_eq!(rows[2], "b,1.000000,0.000000,0.000000,0.000000,0.000000,1");
    }
}
