//! Alternating training: an M-step trains the network against frozen
//! prototypes, an E-step refreshes the base prototypes from class-mean
//! features under the frozen network.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::embedder::{EmbedderConfig, EmbedderParams};
use crate::error::{Error, Result};
use crate::numkernel::VecF;
use crate::objective::{LossBreakdown, LossWeights};
use crate::parallel;
use crate::prototype_store::{PrototypeSet, DEFAULT_LAMBDA};
use crate::toyworld::{stream, Proposal, Scene};

const STATE_FORMAT: &str = "morphdet-detector";
const STATE_VERSION: u32 = 1;
const STREAM_SHUFFLE: u64 = 0x7368_7566;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub em_iterations: usize,
    pub m_step_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplier applied to `lr` once `decay_at` of the epochs have run.
    pub lr_decay: f64,
    pub decay_at: f64,
    pub momentum: f64,
    pub lambda: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            em_iterations: 3,
            m_step_epochs: 6,
            batch_size: 64,
            lr: 0.02,
            lr_decay: 0.1,
            decay_at: 0.8,
            momentum: 0.9,
            lambda: DEFAULT_LAMBDA,
            hidden: vec![64, 64],
            seed: 0,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.em_iterations == 0 {
            return bad("em_iterations must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2".into());
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return bad(format!("lr {} and lr_decay {} must be > 0", self.lr, self.lr_decay));
        }
        if !(0.0..=1.0).contains(&self.decay_at) {
            return bad(format!("decay_at {} outside [0, 1]", self.decay_at));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch inside one M-step.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decay_epoch = (self.decay_at * self.m_step_epochs as f64).ceil() as usize;
        if epoch >= decay_epoch {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }
}

/// Network parameters plus prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorState {
    pub params: EmbedderParams,
    pub prototypes: PrototypeSet,
    pub config: TrainConfig,
}

impl DetectorState {
    pub fn new(params: EmbedderParams, prototypes: PrototypeSet, config: TrainConfig) -> Result<Self> {
        if params.feature_dim() != prototypes.dim() {
            return Err(Error::Dimension {
                expected: params.feature_dim(),
                got: prototypes.dim(),
            });
        }
        Ok(DetectorState {
            params,
            prototypes,
            config,
        })
    }

    pub fn to_checkpoint(&self) -> Result<String> {
        let ck = StateCheckpoint {
            format: STATE_FORMAT.into(),
            version: STATE_VERSION,
            state: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&ck)?)
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let ck: StateCheckpoint = serde_json::from_str(text)?;
        if ck.format != STATE_FORMAT || ck.version != STATE_VERSION {
            return Err(Error::Format(format!("{} v{}", ck.format, ck.version)));
        }
        let s = ck.state;
        s.params.validate()?;
        s.prototypes.validate()?;
        DetectorState::new(s.params, s.prototypes, s.config)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateCheckpoint {
    format: String,
    version: u32,
    state: DetectorState,
}

/// Mean losses of one M-step epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub iteration: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("iteration,epoch,fg,bg,bbox,total\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            m.iteration, m.epoch, m.loss.fg, m.loss.bg, m.loss.bbox, m.loss.total
        ));
    }
    out
}

fn split_proposals(dataset: &[Scene]) -> (Vec<&Proposal>, Vec<&Proposal>) {
    dataset
        .iter()
        .flat_map(|s| &s.proposals)
        .partition(|p| p.label != 0)
}

/// Minibatch SGD on the composite loss with prototypes frozen.
/// `iteration` only selects the shuffle stream.
pub fn m_step(
    state: &DetectorState,
    dataset: &[Scene],
    config: &TrainConfig,
    iteration: usize,
) -> Result<(DetectorState, Vec<EpochMetrics>)> {
    config.validate()?;
    let (mut fg, mut bg) = split_proposals(dataset);
    if fg.is_empty() && bg.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    for p in &fg {
        if !state.prototypes.base().contains_key(&p.label) {
            return Err(Error::UnknownClass(p.label));
        }
    }
    let n_fg_batch = (config.batch_size / 4).max(1);
    let n_bg_batch = config.batch_size - n_fg_batch;

    let mut params = state.params.clone();
    let mut velocity = params.new_momentum();
    let mut metrics = Vec::with_capacity(config.m_step_epochs);
    for epoch in 0..config.m_step_epochs {
        let lr = config.lr_at(epoch);
        let mut rng = stream(
            config.seed ^ ((iteration as u64) << 32) ^ epoch as u64,
            STREAM_SHUFFLE,
        );
        fg.shuffle(&mut rng);
        bg.shuffle(&mut rng);
        let n_batches = if fg.is_empty() {
            bg.len().div_ceil(config.batch_size)
        } else {
            fg.len().div_ceil(n_fg_batch)
        };
        let bg_per_batch = if fg.is_empty() { config.batch_size } else { n_bg_batch };
        let mut bg_cursor = 0;
        let mut sum = LossBreakdown::default();
        let mut batch: Vec<&Proposal> = Vec::with_capacity(config.batch_size);
        for b in 0..n_batches {
            batch.clear();
            if !fg.is_empty() {
                let end = ((b + 1) * n_fg_batch).min(fg.len());
                batch.extend_from_slice(&fg[b * n_fg_batch..end]);
            }
            for _ in 0..bg_per_batch.min(bg.len()) {
                batch.push(bg[bg_cursor % bg.len()]);
                bg_cursor += 1;
            }
            let (loss, grads) =
                params.forward_batch_with_grad(&batch, &state.prototypes, &config.loss_weights)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at iteration {iteration}, epoch {epoch}, batch {b}"
                )));
            }
            params.sgd_step_in_place(&grads, lr, &mut velocity, config.momentum)?;
            sum.fg += loss.fg;
            sum.bg += loss.bg;
            sum.bbox += loss.bbox;
            sum.total += loss.total;
        }
        let n = n_batches.max(1) as f64;
        metrics.push(EpochMetrics {
            iteration,
            epoch,
            loss: LossBreakdown {
                fg: sum.fg / n,
                bg: sum.bg / n,
                bbox: sum.bbox / n,
                total: sum.total / n,
            },
        });
    }
    if params.tensors().iter().any(|t| t.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite(format!("parameters after iteration {iteration}")));
    }
    Ok((
        DetectorState {
            params,
            prototypes: state.prototypes.clone(),
            config: config.clone(),
        },
        metrics,
    ))
}

/// Mean feature vector per class over ground-truth boxes in `dataset`.
pub fn class_means(
    params: &EmbedderParams,
    dataset: &[Scene],
    classes: &[u32],
) -> Result<BTreeMap<u32, VecF>> {
    let objects: Vec<_> = dataset
        .iter()
        .flat_map(|s| &s.objects)
        .filter(|o| classes.contains(&o.class_id))
        .collect();
    let features = parallel::map_ordered(&objects, |o| params.forward(&o.descriptor));
    let d = params.feature_dim();
    let mut sums: BTreeMap<u32, (VecF, usize)> = BTreeMap::new();
    for (o, f) in objects.iter().zip(features) {
        let f = f?;
        let (acc, n) = sums.entry(o.class_id).or_insert_with(|| (vec![0.0; d], 0));
        acc.iter_mut().zip(&f.feature).for_each(|(a, x)| *a += x);
        *n += 1;
    }
    classes
        .iter()
        .map(|&c| {
            let (sum, n) = sums.remove(&c).ok_or(Error::MissingClassSamples(c))?;
            Ok((c, sum.into_iter().map(|x| x / n as f64).collect()))
        })
        .collect()
}

/// Prototype refresh with the network frozen. Every base class must have at
/// least one ground-truth box in `dataset`.
pub fn e_step(state: &DetectorState, dataset: &[Scene], lambda: f64) -> Result<DetectorState> {
    let base_ids = state.prototypes.base_ids();
    let means = class_means(&state.params, dataset, &base_ids)?;
    let prototypes = state.prototypes.e_step_update(&means, lambda)?;
    Ok(DetectorState {
        params: state.params.clone(),
        prototypes,
        config: state.config.clone(),
    })
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State after the last E-step.
    pub state: DetectorState,
    /// State right after each M-step; entry `t` is EM iteration `t + 1`.
    pub snapshots: Vec<DetectorState>,
    /// Per-epoch losses of every M-step, in order.
    pub metrics: Vec<EpochMetrics>,
}

impl TrainOutcome {
    /// The network together with the prototypes it was last trained on.
    pub fn final_snapshot(&self) -> &DetectorState {
        self.snapshots.last().expect("at least one EM iteration")
    }
}

/// Initializes base prototypes from `init_vectors` (semantic vectors, or any
/// stand-in) and alternates M and E steps `em_iterations` times.
pub fn train(
    dataset: &[Scene],
    init_vectors: &BTreeMap<u32, VecF>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let m_in = dataset
        .iter()
        .flat_map(|s| &s.proposals)
        .map(|p| p.descriptor.len())
        .next()
        .ok_or(Error::Empty("training dataset"))?;
    let prototypes = PrototypeSet::init_from_semantic(init_vectors.clone())?;
    let params = EmbedderParams::init(EmbedderConfig {
        m_in,
        hidden: config.hidden.clone(),
        d: prototypes.dim(),
        seed: config.seed,
    })?;
    let mut state = DetectorState::new(params, prototypes, config.clone())?;
    let mut snapshots = Vec::with_capacity(config.em_iterations);
    let mut metrics = Vec::new();
    for iteration in 1..=config.em_iterations {
        let (trained, m) = m_step(&state, dataset, config, iteration)?;
        metrics.extend(m);
        snapshots.push(trained.clone());
        state = e_step(&trained, dataset, config.lambda)?;
    }
    Ok(TrainOutcome {
        state,
        snapshots,
        metrics,
    })
}

/// Stand-in initialization from raw appearance: per-class mean ground-truth
/// descriptor, zero-padded or truncated to `d` components.
pub fn visual_init_vectors(
    dataset: &[Scene],
    classes: &[u32],
    d: usize,
) -> Result<BTreeMap<u32, VecF>> {
    let mut sums: BTreeMap<u32, (VecF, usize)> = BTreeMap::new();
    for o in dataset.iter().flat_map(|s| &s.objects) {
        if !classes.contains(&o.class_id) {
            continue;
        }
        let (acc, n) = sums
            .entry(o.class_id)
            .or_insert_with(|| (vec![0.0; o.descriptor.len()], 0));
        acc.iter_mut().zip(&o.descriptor).for_each(|(a, x)| *a += x);
        *n += 1;
    }
    classes
        .iter()
        .map(|&c| {
            let (sum, n) = sums.remove(&c).ok_or(Error::MissingClassSamples(c))?;
            let mut v: VecF = sum.into_iter().map(|x| x / n as f64).collect();
            v.resize(d, 0.0);
            Ok((c, v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::numkernel::{dot, l2_normalize, norm};
    use crate::toyworld::{make_dataset, make_universe, SceneConfig, SceneObject, UniverseConfig};

    fn tiny_world() -> (crate::toyworld::Universe, Vec<Scene>) {
        let u = make_universe(&UniverseConfig {
            n_base: 4,
            n_novel: 2,
            ..Default::default()
        })
        .unwrap();
        let scenes = make_dataset(
            &u,
            &u.base_ids,
            &SceneConfig {
                scenes_per_class: 3,
                proposals_per_scene: 12,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        (u, scenes)
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            em_iterations: 2,
            m_step_epochs: 3,
            batch_size: 16,
            hidden: vec![16],
            ..Default::default()
        }
    }

    fn initial_state(u: &crate::toyworld::Universe, cfg: &TrainConfig) -> DetectorState {
        let protos = PrototypeSet::init_from_semantic(u.semantics(&u.base_ids).unwrap()).unwrap();
        let params = EmbedderParams::init(EmbedderConfig {
            m_in: u.config.m_in,
            hidden: cfg.hidden.clone(),
            d: u.config.d_sem,
            seed: cfg.seed,
        })
        .unwrap();
        DetectorState::new(params, protos, cfg.clone()).unwrap()
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (u, scenes) = tiny_world();
        let cfg = TrainConfig { m_step_epochs: 0, ..quick_config() };
        let s = initial_state(&u, &cfg);
        let (next, m) = m_step(&s, &scenes, &cfg, 1).unwrap();
        assert_eq!(next, s);
        assert!(m.is_empty());
    }

    #[test]
    fn m_step_is_deterministic_and_keeps_prototypes() {
        let (u, scenes) = tiny_world();
        let cfg = quick_config();
        let s = initial_state(&u, &cfg);
        let (a, ma) = m_step(&s, &scenes, &cfg, 1).unwrap();
        let (b, mb) = m_step(&s, &scenes, &cfg, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert_eq!(a.prototypes, s.prototypes);
        assert_ne!(a.params, s.params);
    }

    #[test]
    fn m_step_errors() {
        let (u, scenes) = tiny_world();
        let cfg = quick_config();
        let s = initial_state(&u, &cfg);
        assert!(matches!(m_step(&s, &[], &cfg, 1), Err(Error::Empty(_))));
        let mut partial = s.clone();
        partial.prototypes = PrototypeSet::init_from_semantic(u.semantics(&[1]).unwrap()).unwrap();
        assert!(matches!(m_step(&partial, &scenes, &cfg, 1), Err(Error::UnknownClass(_))));
    }

    #[test]
    fn m_step_reduces_loss_on_small_dataset() {
        let (u, scenes) = tiny_world();
        let cfg = TrainConfig { m_step_epochs: 50, lr: 0.02, ..quick_config() };
        let s = initial_state(&u, &cfg);
        let all: Vec<&Proposal> = scenes.iter().flat_map(|s| &s.proposals).collect();
        let w = LossWeights::default();
        let before = crate::embedder::batch_loss_value(&s.params, &all, &s.prototypes, &w).unwrap();
        let (next, _) = m_step(&s, &scenes, &cfg, 1).unwrap();
        let after = crate::embedder::batch_loss_value(&next.params, &all, &next.prototypes, &w).unwrap();
        assert!(after.total < 0.1 * before.total, "{} -> {}", before.total, after.total);
    }

    #[test]
    fn e_step_identity_and_params_frozen() {
        let (u, scenes) = tiny_world();
        let s = initial_state(&u, &quick_config());
        let same = e_step(&s, &scenes, 1.0).unwrap();
        assert_eq!(same, s);
        let moved = e_step(&s, &scenes, 0.5).unwrap();
        assert_eq!(moved.params, s.params);
        assert_ne!(moved.prototypes, s.prototypes);
        for v in moved.prototypes.base().values() {
            assert!((norm(v) - 1.0).abs() < 1e-9);
        }
    }

    fn object(class_id: u32, descriptor: VecF) -> SceneObject {
        SceneObject {
            class_id,
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            descriptor,
        }
    }

    #[test]
    fn e_step_two_sample_mean() {
        // hand-built identity net: ReLU of (x, -x), recombined by the feature head
        let cfg = EmbedderConfig { m_in: 2, hidden: vec![4], d: 2, seed: 0 };
        let mut params = EmbedderParams::zeros(cfg).unwrap();
        params.trunk[0].weight = vec![1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0, -1.0];
        params.feature_head.weight = vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0];
        assert_eq!(params.forward(&[0.3, -0.7]).unwrap().feature, vec![0.3, -0.7]);

        let protos = PrototypeSet::init_from_semantic([(1, vec![0.0, 1.0])]).unwrap();
        let state = DetectorState::new(params, protos, TrainConfig::default()).unwrap();
        let scene = Scene {
            id: 0,
            objects: vec![object(1, vec![1.0, 0.0]), object(1, vec![0.0, 1.0])],
            proposals: vec![],
        };
        let next = e_step(&state, std::slice::from_ref(&scene), 0.0).unwrap();
        let r2 = std::f64::consts::FRAC_1_SQRT_2;
        let p = &next.prototypes.base()[&1];
        assert!((p[0] - r2).abs() < 1e-12 && (p[1] - r2).abs() < 1e-12);

        let empty = Scene { objects: vec![object(2, vec![1.0, 0.0])], ..scene };
        assert!(matches!(
            e_step(&state, &[empty], 0.5),
            Err(Error::MissingClassSamples(1))
        ));
    }

    #[test]
    fn e_step_moves_prototypes_toward_means() {
        let (u, scenes) = tiny_world();
        let s = initial_state(&u, &quick_config());
        let means = class_means(&s.params, &scenes, &u.base_ids).unwrap();
        let next = e_step(&s, &scenes, 0.5).unwrap();
        for (c, v) in &means {
            let v = l2_normalize(v).unwrap();
            let old = &s.prototypes.base()[c];
            let new = &next.prototypes.base()[c];
            let angle = |a: &[f64]| dot(a, &v).unwrap().clamp(-1.0, 1.0).acos();
            if angle(old) > 1e-9 {
                assert!(angle(new) < angle(old));
            }
        }
    }

    #[test]
    fn train_snapshots_and_determinism() {
        let (u, scenes) = tiny_world();
        let cfg = TrainConfig { em_iterations: 1, ..quick_config() };
        let sem = u.semantics(&u.base_ids).unwrap();
        let out = train(&scenes, &sem, &cfg).unwrap();
        assert_eq!(out.snapshots.len(), 1);
        assert_eq!(out.metrics.len(), cfg.m_step_epochs);
        // one M then one E: snapshot params equal final params, prototypes differ
        assert_eq!(out.snapshots[0].params, out.state.params);
        assert_ne!(out.snapshots[0].prototypes, out.state.prototypes);

        let cfg = quick_config();
        let a = train(&scenes, &sem, &cfg).unwrap();
        let b = train(&scenes, &sem, &cfg).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.snapshots.len(), 2);
    }

    #[test]
    fn lambda_one_keeps_prototype_trajectory_constant() {
        let (u, scenes) = tiny_world();
        let cfg = TrainConfig { lambda: 1.0, em_iterations: 3, ..quick_config() };
        let sem = u.semantics(&u.base_ids).unwrap();
        let out = train(&scenes, &sem, &cfg).unwrap();
        let init = PrototypeSet::init_from_semantic(sem).unwrap();
        for s in &out.snapshots {
            assert_eq!(s.prototypes, init);
        }
        assert_eq!(out.state.prototypes, init);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (u, _) = tiny_world();
        let s = initial_state(&u, &quick_config());
        let text = s.to_checkpoint().unwrap();
        assert_eq!(DetectorState::from_checkpoint(&text).unwrap(), s);
        let mut bad = s.clone();
        bad.params.box_head.bias.push(0.0);
        assert!(DetectorState::from_checkpoint(&bad.to_checkpoint().unwrap()).is_err());
    }

    #[test]
    fn visual_init_pads_to_feature_dim() {
        let (u, scenes) = tiny_world();
        let v = visual_init_vectors(&scenes, &u.base_ids, 16).unwrap();
        assert_eq!(v.len(), 4);
        assert!(v.values().all(|x| x.len() == 16 && x[12..].iter().all(|z| *z == 0.0)));
        assert!(visual_init_vectors(&scenes, &[99], 16).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { em_iterations: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lambda: 1.1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        let c = TrainConfig { m_step_epochs: 10, ..Default::default() };
        assert_eq!(c.lr_at(7), c.lr);
        assert!((c.lr_at(8) - c.lr * 0.1).abs() < 1e-18);
    }
}
