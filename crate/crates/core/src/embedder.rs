//! The trainable network: a ReLU trunk over proposal descriptors feeding
//! three linear heads (feature vector, background logit, box deltas), with
//! hand-written backpropagation.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{all_finite, VecF};
use crate::objective::{bbox_loss, bg_loss, fg_loss, LossBreakdown, LossWeights};
use crate::parallel;
use crate::prototype_store::{Prototype, PrototypeSet};
use crate::toyworld::Proposal;

/// Proposals per accumulation chunk. Fixed so the reduction order does not
/// depend on the thread count.
const GRAD_CHUNK: usize = 16;

const CHECKPOINT_FORMAT: &str = "morphdet-embedder";
const CHECKPOINT_VERSION: u32 = 1;

thread_local! {
    static GRAD_EVALS: Cell<u64> = const { Cell::new(0) };
}

/// Number of gradient evaluations issued from the current thread.
pub fn grad_evaluations() -> u64 {
    GRAD_EVALS.with(|c| c.get())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderConfig {
    pub m_in: usize,
    pub hidden: Vec<usize>,
    pub d: usize,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            m_in: 12,
            hidden: vec![64, 64],
            d: 16,
            seed: 0,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_in == 0 || self.d == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "layer sizes must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Affine layer; `weight` is `fan_in × fan_out`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: VecF,
    pub bias: VecF,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            fan_in,
            fan_out,
            weight: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    fn uniform(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = 1.0 / (fan_in as f64).sqrt();
        let weight = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-s..s))
            .collect();
        Dense {
            fan_in,
            fan_out,
            weight,
            bias: vec![0.0; fan_out],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.fan_in, self.fan_out)
    }

    pub fn at(&self, i: usize, o: usize) -> f64 {
        self.weight[i * self.fan_out + o]
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.bias);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.weight[i * self.fan_out..(i + 1) * self.fan_out];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }

    /// Accumulates `dW += x ⊗ g`, `db += g`, and `dx += W g` when requested.
    fn backward(&self, x: &[f64], g: &[f64], grad: &mut Dense, dx: Option<&mut [f64]>) {
        for (b, gi) in grad.bias.iter_mut().zip(g) {
            *b += gi;
        }
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &mut grad.weight[i * self.fan_out..(i + 1) * self.fan_out];
            for (w, gi) in row.iter_mut().zip(g) {
                *w += xi * gi;
            }
        }
        if let Some(dx) = dx {
            for (i, d) in dx.iter_mut().enumerate() {
                let row = &self.weight[i * self.fan_out..(i + 1) * self.fan_out];
                *d += row.iter().zip(g).map(|(w, gi)| w * gi).sum::<f64>();
            }
        }
    }

    fn zeros_like(&self) -> Self {
        Dense::zeros(self.fan_in, self.fan_out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalOutputs {
    pub feature: VecF,
    pub bg_logit: f64,
    pub box_deltas: VecF,
}

/// All network weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderParams {
    pub config: EmbedderConfig,
    pub trunk: Vec<Dense>,
    pub feature_head: Dense,
    pub background_head: Dense,
    pub box_head: Dense,
}

/// Gradient of a scalar loss w.r.t. every entry of [`EmbedderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub EmbedderParams);

/// SGD velocity, same shape as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState(pub EmbedderParams);

/// Cached activations of one forward pass.
struct Trace {
    /// `acts[0]` is the input, `acts[l + 1]` the ReLU output of trunk layer `l`.
    acts: Vec<VecF>,
    out: ProposalOutputs,
}

impl EmbedderParams {
    /// Uniform `±1/√fan_in` weights, zero biases.
    pub fn init(config: EmbedderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut trunk = Vec::with_capacity(config.hidden.len());
        let mut fan_in = config.m_in;
        for &h in &config.hidden {
            trunk.push(Dense::uniform(fan_in, h, &mut rng));
            fan_in = h;
        }
        let feature_head = Dense::uniform(fan_in, config.d, &mut rng);
        let background_head = Dense::uniform(fan_in, 1, &mut rng);
        let box_head = Dense::uniform(fan_in, 4, &mut rng);
        Ok(EmbedderParams {
            config,
            trunk,
            feature_head,
            background_head,
            box_head,
        })
    }

    /// All-zero parameters.
    pub fn zeros(config: EmbedderConfig) -> Result<Self> {
        let p = Self::init(config)?;
        Ok(p.zeros_like())
    }

    pub fn zeros_like(&self) -> Self {
        EmbedderParams {
            config: self.config.clone(),
            trunk: self.trunk.iter().map(Dense::zeros_like).collect(),
            feature_head: self.feature_head.zeros_like(),
            background_head: self.background_head.zeros_like(),
            box_head: self.box_head.zeros_like(),
        }
    }

    pub fn m_in(&self) -> usize {
        self.config.m_in
    }

    pub fn feature_dim(&self) -> usize {
        self.config.d
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk
            .iter()
            .chain([&self.feature_head, &self.background_head, &self.box_head])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.trunk.iter_mut().chain([
            &mut self.feature_head,
            &mut self.background_head,
            &mut self.box_head,
        ])
    }

    /// Flat views over every tensor, weights before biases, trunk first.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Checks that layer shapes chain and all values are finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.trunk.len() != self.config.hidden.len() {
            return Err(Error::Shape(format!(
                "{} trunk layers, config has {}",
                self.trunk.len(),
                self.config.hidden.len()
            )));
        }
        let mut fan_in = self.config.m_in;
        let mut expect = Vec::new();
        for &h in &self.config.hidden {
            expect.push((fan_in, h));
            fan_in = h;
        }
        expect.extend([(fan_in, self.config.d), (fan_in, 1), (fan_in, 4)]);
        for (layer, (i, o)) in self.layers().zip(expect) {
            if layer.shape() != (i, o) || layer.weight.len() != i * o || layer.bias.len() != o {
                return Err(Error::Shape(format!(
                    "layer is {:?} with {} weights, expected ({i}, {o})",
                    layer.shape(),
                    layer.weight.len()
                )));
            }
        }
        if !self.tensors().iter().all(|t| all_finite(t)) {
            return Err(Error::NonFinite("parameters".into()));
        }
        Ok(())
    }

    fn check_congruent(&self, other: &EmbedderParams) -> Result<()> {
        let a = self.tensors();
        let b = other.tensors();
        if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.len() != y.len()) {
            return Err(Error::Shape("parameter trees differ".into()));
        }
        Ok(())
    }

    fn trace(&self, descriptor: &[f64]) -> Result<Trace> {
        if descriptor.len() != self.config.m_in {
            return Err(Error::Dimension {
                expected: self.config.m_in,
                got: descriptor.len(),
            });
        }
        let mut acts = Vec::with_capacity(self.trunk.len() + 1);
        acts.push(descriptor.to_vec());
        for layer in &self.trunk {
            let mut z = Vec::with_capacity(layer.fan_out);
            layer.apply(acts.last().expect("input present"), &mut z);
            z.iter_mut().for_each(|v| *v = v.max(0.0));
            acts.push(z);
        }
        let phi = acts.last().expect("input present");
        let mut feature = Vec::new();
        let mut bg = Vec::new();
        let mut box_deltas = Vec::new();
        self.feature_head.apply(phi, &mut feature);
        self.background_head.apply(phi, &mut bg);
        self.box_head.apply(phi, &mut box_deltas);
        Ok(Trace {
            acts,
            out: ProposalOutputs {
                feature,
                bg_logit: bg[0],
                box_deltas,
            },
        })
    }

    pub fn forward(&self, descriptor: &[f64]) -> Result<ProposalOutputs> {
        Ok(self.trace(descriptor)?.out)
    }

    /// Backpropagates head gradients through one cached trace.
    fn backward(&self, trace: &Trace, g_f: &[f64], g_b: f64, g_box: &[f64], grads: &mut EmbedderParams) {
        let phi = trace.acts.last().expect("input present");
        let mut dphi = vec![0.0; phi.len()];
        self.feature_head
            .backward(phi, g_f, &mut grads.feature_head, Some(&mut dphi));
        self.background_head
            .backward(phi, &[g_b], &mut grads.background_head, Some(&mut dphi));
        self.box_head
            .backward(phi, g_box, &mut grads.box_head, Some(&mut dphi));

        let mut upstream = dphi;
        for l in (0..self.trunk.len()).rev() {
            let out = &trace.acts[l + 1];
            for (u, a) in upstream.iter_mut().zip(out) {
                if *a <= 0.0 {
                    *u = 0.0;
                }
            }
            let input = &trace.acts[l];
            if l == 0 {
                self.trunk[l].backward(input, &upstream, &mut grads.trunk[l], None);
            } else {
                let mut dx = vec![0.0; input.len()];
                self.trunk[l].backward(input, &upstream, &mut grads.trunk[l], Some(&mut dx));
                upstream = dx;
            }
        }
    }

    /// Composite loss over `batch` and its exact gradient w.r.t. every
    /// parameter. Prototypes are constants; the softmax runs over the base
    /// prototypes.
    pub fn forward_batch_with_grad(
        &self,
        batch: &[&Proposal],
        prototypes: &PrototypeSet,
        weights: &LossWeights,
    ) -> Result<(LossBreakdown, Gradients)> {
        GRAD_EVALS.with(|c| c.set(c.get() + 1));
        if batch.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        if prototypes.dim() != self.config.d {
            return Err(Error::Dimension {
                expected: self.config.d,
                got: prototypes.dim(),
            });
        }
        let protos = prototypes.base_prototypes();
        for p in batch {
            if p.label != 0 && !prototypes.base().contains_key(&p.label) {
                return Err(Error::UnknownClass(p.label));
            }
        }
        let n_fg = batch.iter().filter(|p| p.label != 0).count();
        let n_bg = batch.len() - n_fg;
        let scale = BatchScale {
            fg: if n_fg > 0 { weights.fg / n_fg as f64 } else { 0.0 },
            bg: if n_bg > 0 { weights.bg / n_bg as f64 } else { 0.0 },
            bbox: if n_fg > 0 { weights.bbox / n_fg as f64 } else { 0.0 },
        };

        let partials = parallel::map_chunks(batch, GRAD_CHUNK, |chunk| {
            self.chunk_grad(chunk, &protos, &scale)
        });
        let mut loss = LossBreakdown::default();
        let mut grads = self.zeros_like();
        for part in partials {
            let (l, g) = part?;
            loss.fg += l.fg;
            loss.bg += l.bg;
            loss.bbox += l.bbox;
            for (dst, src) in grads.tensors_mut().into_iter().zip(g.tensors()) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        loss.total = loss.fg + loss.bg + loss.bbox;
        Ok((loss, Gradients(grads)))
    }

    fn chunk_grad(
        &self,
        chunk: &[&Proposal],
        protos: &[Prototype],
        scale: &BatchScale,
    ) -> Result<(LossBreakdown, EmbedderParams)> {
        let mut grads = self.zeros_like();
        let mut loss = LossBreakdown::default();
        let zero_box = [0.0; 4];
        for p in chunk {
            let trace = self.trace(&p.descriptor)?;
            let out = &trace.out;
            if p.label == 0 {
                let h = bg_loss(&out.feature, out.bg_logit, protos)?;
                loss.bg += scale.bg * h.value;
                let g_f: VecF = h.grad_f.iter().map(|g| g * scale.bg).collect();
                self.backward(&trace, &g_f, h.grad_b * scale.bg, &zero_box, &mut grads);
            } else {
                let target = p.target_deltas.ok_or_else(|| {
                    Error::InvalidParameter("foreground proposal without box target".into())
                })?;
                let h = fg_loss(&out.feature, out.bg_logit, protos, p.label)?;
                let (bv, bg) = bbox_loss(&out.box_deltas, &target)?;
                loss.fg += scale.fg * h.value;
                loss.bbox += scale.bbox * bv;
                let g_f: VecF = h.grad_f.iter().map(|g| g * scale.fg).collect();
                let g_box: Vec<f64> = bg.iter().map(|g| g * scale.bbox).collect();
                self.backward(&trace, &g_f, h.grad_b * scale.fg, &g_box, &mut grads);
            }
        }
        Ok((loss, grads))
    }

    /// Momentum SGD: `v ← μ·v + g`, `θ ← θ − lr·v`.
    pub fn sgd_step(
        &self,
        grads: &Gradients,
        lr: f64,
        state: &MomentumState,
        momentum: f64,
    ) -> Result<(EmbedderParams, MomentumState)> {
        let mut params = self.clone();
        let mut state = state.clone();
        params.sgd_step_in_place(grads, lr, &mut state, momentum)?;
        Ok((params, state))
    }

    pub fn sgd_step_in_place(
        &mut self,
        grads: &Gradients,
        lr: f64,
        state: &mut MomentumState,
        momentum: f64,
    ) -> Result<()> {
        if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidParameter(format!(
                "lr {lr} must be > 0 and momentum {momentum} in [0, 1)"
            )));
        }
        self.check_congruent(&grads.0)?;
        self.check_congruent(&state.0)?;
        for ((p, g), v) in self
            .tensors_mut()
            .into_iter()
            .zip(grads.0.tensors())
            .zip(state.0.tensors_mut())
        {
            for ((pk, gk), vk) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vk = momentum * *vk + gk;
                *pk -= lr * *vk;
            }
        }
        Ok(())
    }

    pub fn new_momentum(&self) -> MomentumState {
        MomentumState(self.zeros_like())
    }

    pub fn to_checkpoint(&self) -> Result<String> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            params: self.clone(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    /// Loads a checkpoint, rejecting other formats and inconsistent shapes.
    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("{} v{}", ck.format, ck.version)));
        }
        ck.params.validate()?;
        Ok(ck.params)
    }
}

impl Gradients {
    pub fn scaled(&self, c: f64) -> Gradients {
        let mut g = self.0.clone();
        for t in g.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= c);
        }
        Gradients(g)
    }
}

struct BatchScale {
    fg: f64,
    bg: f64,
    bbox: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    params: EmbedderParams,
}

/// Straight-line composite loss, used by gradient checks.
pub fn batch_loss_value(
    params: &EmbedderParams,
    batch: &[&Proposal],
    prototypes: &PrototypeSet,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let outs = batch
        .iter()
        .map(|p| params.forward(&p.descriptor))
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<_> = batch
        .iter()
        .zip(&outs)
        .map(|(p, o)| crate::objective::Supervised {
            outputs: o,
            label: p.label,
            target_deltas: p.target_deltas.as_ref(),
        })
        .collect();
    crate::objective::batch_loss(&items, &prototypes.base_prototypes(), weights)
}
