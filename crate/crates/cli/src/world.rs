//! Generated benchmark artifacts shared by every command.

use std::collections::BTreeMap;

use morphdet::evalkit::{evaluate, EvalReport};
use morphdet::numkernel::VecF;
use morphdet::toyworld::{exemplars_for, make_dataset, make_universe};
use morphdet::{DetectorState, Scene, SceneConfig, Universe};

use crate::config::ExperimentConfig;

/// Keeps the held-out scenes on a different stream from the training scenes.
const TEST_SEED_SALT: u64 = 0x7465_7374_0000_0000;

pub struct World {
    pub universe: Universe,
    /// Base classes only.
    pub train: Vec<Scene>,
    /// Base and novel classes.
    pub test: Vec<Scene>,
    /// `shots` descriptors per novel class.
    pub exemplars: BTreeMap<u32, Vec<VecF>>,
}

impl World {
    /// Everything derived from `config.seed`.
    pub fn generate(config: &ExperimentConfig) -> morphdet::Result<Self> {
        let config = config.with_seed(config.seed);
        let universe = make_universe(&config.universe)?;
        let train = make_dataset(&universe, &universe.base_ids, &config.scenes, config.seed)?;
        let all: Vec<u32> = universe.base_ids.iter().chain(&universe.novel_ids).copied().collect();
        let test_scenes = SceneConfig {
            scenes_per_class: config.test_scenes_per_class,
            ..config.scenes.clone()
        };
        let test = make_dataset(&universe, &all, &test_scenes, config.seed ^ TEST_SEED_SALT)?;
        let exemplars = exemplars_for(&universe, &universe.novel_ids, config.shots, config.seed)?;
        Ok(World { universe, train, test, exemplars })
    }

    pub fn base_semantics(&self) -> morphdet::Result<BTreeMap<u32, VecF>> {
        self.universe.semantics(&self.universe.base_ids)
    }

    /// Evaluates `state` on the held-out scenes. Novel classes are scored
    /// only when `state` holds prototypes for them.
    pub fn evaluate(&self, state: &DetectorState, config: &ExperimentConfig) -> morphdet::Result<EvalReport> {
        let novel: Vec<u32> = self
            .universe
            .novel_ids
            .iter()
            .copied()
            .filter(|&c| state.prototypes.contains(c))
            .collect();
        evaluate(state, &self.test, &self.universe.base_ids, &novel, &config.detect)
    }
}
