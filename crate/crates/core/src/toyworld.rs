//! Synthetic stand-in for a backbone, a proposal network and a dataset.
//!
//! Each class has a latent attribute vector `a`. Its semantic vector is
//! `A·a + σ_sem·ε` and the appearance part of a proposal descriptor is
//! `B·a + offset + σ_inst·ε`, so semantics and appearance are correlated
//! through the shared attributes. The last four descriptor components encode
//! where the dominant object sits inside the proposal window.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{parse_err, Error, Result};
use crate::geometry::{encode_box, iou, BBox};
use crate::numkernel::{norm, VecF, NORM_EPS};
use crate::prototype_store::write_vector_sections;

/// Foreground/background IoU cut for proposal labels.
pub const FG_IOU: f64 = 0.5;

const GEOMETRY_DIMS: usize = 4;
const UNIVERSE_FORMAT: &str = "morphdet-universe";
const DATASET_FORMAT: &str = "morphdet-dataset";
const FORMAT_VERSION: u32 = 1;

/// RNG stream tags; each generator derives its own stream from the seed.
const STREAM_UNIVERSE: u64 = 0x756e_6976;
const STREAM_DATASET: u64 = 0x6461_7461;
const STREAM_EXEMPLARS: u64 = 0x6578_656d;

pub(crate) fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.rotate_left(17));
    rng.set_stream(tag);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> VecF {
    (0..n).map(|_| scale * gaussian(rng)).collect()
}

/// Row-major `rows × cols` matrix-vector product.
fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> VecF {
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UniverseConfig {
    pub n_base: usize,
    pub n_novel: usize,
    /// Latent attribute dimension.
    pub k: usize,
    pub d_sem: usize,
    pub m_in: usize,
    pub sigma_sem: f64,
    pub sigma_inst: f64,
    /// Norm of the appearance component shared by every object.
    pub shared_appearance: f64,
    /// Scale of the attribute drawn for background clutter.
    pub clutter_scale: f64,
    /// Spread of each object's attributes around its class attributes.
    pub attribute_jitter: f64,
    /// Ratio of the largest to the smallest singular value of the
    /// attribute→appearance map; 1 keeps attribute distances up to scale.
    pub appearance_anisotropy: f64,
    pub seed: u64,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        UniverseConfig {
            n_base: 20,
            n_novel: 5,
            k: 8,
            d_sem: 16,
            m_in: 12,
            sigma_sem: 0.3,
            sigma_inst: 0.05,
            shared_appearance: 3.0,
            clutter_scale: 0.5,
            attribute_jitter: 0.6,
            appearance_anisotropy: 30.0,
            seed: 0,
        }
    }
}

impl UniverseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_base == 0 || self.n_novel == 0 || self.k == 0 || self.d_sem == 0 {
            return Err(Error::InvalidParameter(
                "class counts and dimensions must be >= 1".into(),
            ));
        }
        if self.m_in <= GEOMETRY_DIMS {
            return Err(Error::InvalidParameter(format!(
                "m_in must exceed the {GEOMETRY_DIMS} geometry features"
            )));
        }
        for (name, v) in [
            ("sigma_sem", self.sigma_sem),
            ("sigma_inst", self.sigma_inst),
            ("shared_appearance", self.shared_appearance),
            ("clutter_scale", self.clutter_scale),
            ("attribute_jitter", self.attribute_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} = {v}")));
            }
        }
        if !(self.appearance_anisotropy >= 1.0 && self.appearance_anisotropy.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "appearance_anisotropy = {} must be >= 1",
                self.appearance_anisotropy
            )));
        }
        Ok(())
    }

    pub fn appearance_dims(&self) -> usize {
        self.m_in - GEOMETRY_DIMS
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyClass {
    pub class_id: u32,
    pub name: String,
    pub attribute: VecF,
    pub semantic: VecF,
}

/// A generated class universe with its fixed linear maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Universe {
    pub config: UniverseConfig,
    pub classes: Vec<ToyClass>,
    pub base_ids: Vec<u32>,
    pub novel_ids: Vec<u32>,
    /// `d_sem × k`
    pub semantic_map: VecF,
    /// `(m_in − 4) × k`
    pub appearance_map: VecF,
    pub appearance_offset: VecF,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub descriptor: VecF,
    pub anchor: BBox,
    /// 0 is background.
    pub label: u32,
    pub target_deltas: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_id: u32,
    pub bbox: BBox,
    /// Descriptor of the tight ground-truth window.
    pub descriptor: VecF,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u32,
    pub objects: Vec<SceneObject>,
    pub proposals: Vec<Proposal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub scenes_per_class: usize,
    pub objects_per_scene: usize,
    pub proposals_per_scene: usize,
    /// Relative center/size jitter of proposals drawn around objects.
    pub jitter: f64,
    pub scene_size: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            scenes_per_class: 10,
            objects_per_scene: 2,
            proposals_per_scene: 24,
            jitter: 0.12,
            scene_size: 100.0,
        }
    }
}

impl Universe {
    pub fn class(&self, class_id: u32) -> Option<&ToyClass> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }

    pub fn semantics(&self, ids: &[u32]) -> Result<BTreeMap<u32, VecF>> {
        ids.iter()
            .map(|&id| {
                self.class(id)
                    .map(|c| (id, c.semantic.clone()))
                    .ok_or(Error::UnknownClass(id))
            })
            .collect()
    }

    /// Attributes of one object: its class attributes plus per-object spread.
    fn instance_attribute(&self, rng: &mut ChaCha8Rng, class_id: u32) -> VecF {
        let base = &self.class(class_id).expect("caller checked the class").attribute;
        base.iter()
            .map(|a| a + self.config.attribute_jitter * gaussian(rng))
            .collect()
    }

    fn appearance(&self, attribute: &[f64], objectness: f64) -> VecF {
        let a = self.config.appearance_dims();
        let mut v = matvec(&self.appearance_map, a, self.config.k, attribute);
        for (x, o) in v.iter_mut().zip(&self.appearance_offset) {
            *x += objectness * o;
        }
        v
    }

    /// Descriptor of a window whose dominant object (if any) has the given
    /// attribute, IoU and placement relative to the window.
    fn descriptor(
        &self,
        rng: &mut ChaCha8Rng,
        object: Option<(&[f64], f64, [f64; 4])>,
    ) -> VecF {
        let k = self.config.k;
        let clutter = gaussian_vec(rng, k, self.config.clutter_scale);
        let (attr, overlap, placement) = match object {
            Some((a, u, placement)) => {
                let mix: VecF = a.iter().zip(&clutter).map(|(x, c)| u * x + (1.0 - u) * c).collect();
                (mix, u, placement)
            }
            None => (clutter, 0.0, [0.0; 4]),
        };
        let mut desc = self.appearance(&attr, overlap);
        for x in desc.iter_mut() {
            *x += self.config.sigma_inst * gaussian(rng);
        }
        desc.extend(placement.iter().map(|p| p + 0.02 * gaussian(rng)));
        desc
    }

    /// Serializes to the versioned JSON-lines universe format.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        write_header(&mut w, UNIVERSE_FORMAT)?;
        let rec = UniverseRecord::Config {
            config: self.config.clone(),
            base_ids: self.base_ids.clone(),
            novel_ids: self.novel_ids.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        let rec = UniverseRecord::Maps {
            semantic_map: self.semantic_map.clone(),
            appearance_map: self.appearance_map.clone(),
            appearance_offset: self.appearance_offset.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        for c in &self.classes {
            writeln!(w, "{}", serde_json::to_string(&UniverseRecord::Class(c.clone()))?)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        read_header(&mut lines, UNIVERSE_FORMAT)?;
        let mut config = None;
        let mut maps = None;
        let mut classes = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: UniverseRecord =
                serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
            match rec {
                UniverseRecord::Config { config: c, base_ids, novel_ids } => {
                    config = Some((c, base_ids, novel_ids))
                }
                UniverseRecord::Maps { semantic_map, appearance_map, appearance_offset } => {
                    maps = Some((semantic_map, appearance_map, appearance_offset))
                }
                UniverseRecord::Class(c) => classes.push(c),
            }
        }
        let (config, base_ids, novel_ids) =
            config.ok_or_else(|| Error::Format("universe without config record".into()))?;
        let (semantic_map, appearance_map, appearance_offset) =
            maps.ok_or_else(|| Error::Format("universe without maps record".into()))?;
        config.validate()?;
        Ok(Universe {
            config,
            classes,
            base_ids,
            novel_ids,
            semantic_map,
            appearance_map,
            appearance_offset,
        })
    }

    /// Semantic vectors in the prototype text format (base, `---`, novel).
    pub fn semantic_text(&self) -> Result<String> {
        Ok(write_vector_sections(
            &self.semantics(&self.base_ids)?,
            &self.semantics(&self.novel_ids)?,
        ))
    }
}

/// `rows × cols` row-major matrix with orthonormal columns (`rows ≥ cols`).
fn orthonormal_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<VecF> {
    let mut out: Vec<VecF> = Vec::with_capacity(cols);
    while out.len() < cols {
        let mut v = gaussian_vec(rng, rows, 1.0);
        for prev in &out {
            let proj: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(prev).for_each(|(x, y)| *x -= proj * y);
        }
        let n = norm(&v);
        // redraw the rare near-dependent vector
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            out.push(v);
        }
    }
    out
}

/// `U·diag(s)·Vᵀ` as a row-major `rows × k` matrix, with random orthonormal
/// `U`, `V` and singular values spaced geometrically so that
/// `max(s) / min(s) = ratio` and `Σ s² = rows`: each output component has unit
/// variance on average for standard-normal inputs.
fn conditioned_map(rng: &mut ChaCha8Rng, rows: usize, k: usize, ratio: f64) -> VecF {
    let rank = rows.min(k);
    let u = orthonormal_columns(rng, rows, rank);
    let v = orthonormal_columns(rng, k, rank);
    let raw: VecF = (0..rank)
        .map(|i| {
            let t = if rank > 1 { i as f64 / (rank - 1) as f64 } else { 0.0 };
            ratio.powf(-t)
        })
        .collect();
    let scale = (rows as f64 / raw.iter().map(|x| x * x).sum::<f64>()).sqrt();
    let mut out = vec![0.0; rows * k];
    for r in 0..rows {
        for c in 0..k {
            out[r * k + c] = (0..rank).map(|i| u[i][r] * scale * raw[i] * v[i][c]).sum();
        }
    }
    out
}

/// `rows × k` map with orthogonal columns of norm `√(rows / k)`: attribute
/// distances are preserved up to scale. Falls back to a Gaussian map when
/// `rows < k`.
fn scaled_isometry(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> VecF {
    if rows < k {
        return gaussian_vec(rng, rows * k, 1.0 / (k as f64).sqrt());
    }
    let cols = orthonormal_columns(rng, rows, k);
    let scale = (rows as f64 / k as f64).sqrt();
    let mut out = vec![0.0; rows * k];
    for (c, col) in cols.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            out[r * k + c] = scale * v;
        }
    }
    out
}

/// Generates classes and the fixed attribute→semantic/appearance maps.
pub fn make_universe(config: &UniverseConfig) -> Result<Universe> {
    config.validate()?;
    let mut rng = stream(config.seed, STREAM_UNIVERSE);
    let k = config.k;
    let a_dims = config.appearance_dims();
    let semantic_map = scaled_isometry(&mut rng, config.d_sem, k);
    let appearance_map = conditioned_map(&mut rng, a_dims, k, config.appearance_anisotropy);
    let dir = gaussian_vec(&mut rng, a_dims, 1.0);
    let dn = norm(&dir).max(NORM_EPS);
    let appearance_offset = dir.iter().map(|x| x / dn * config.shared_appearance).collect();

    let total = config.n_base + config.n_novel;
    let mut classes = Vec::with_capacity(total);
    for i in 0..total {
        let class_id = i as u32 + 1;
        let attribute = gaussian_vec(&mut rng, k, 1.0);
        let noise = gaussian_vec(&mut rng, config.d_sem, 1.0);
        let mut semantic = matvec(&semantic_map, config.d_sem, k, &attribute);
        for (s, e) in semantic.iter_mut().zip(&noise) {
            *s += config.sigma_sem * e;
        }
        if !(norm(&semantic) > NORM_EPS) {
            return Err(Error::DegenerateVector { norm: norm(&semantic) });
        }
        let kind = if i < config.n_base { "base" } else { "novel" };
        classes.push(ToyClass {
            class_id,
            name: format!("{kind}-{class_id:03}"),
            attribute,
            semantic,
        });
    }
    let base_ids = (1..=config.n_base as u32).collect();
    let novel_ids = (config.n_base as u32 + 1..=total as u32).collect();
    Ok(Universe {
        config: config.clone(),
        classes,
        base_ids,
        novel_ids,
        semantic_map,
        appearance_map,
        appearance_offset,
    })
}

/// Label by the IoU rule: best-overlapping object if IoU ≥ 0.5, else 0.
pub fn label_for(anchor: &BBox, objects: &[SceneObject]) -> (u32, Option<usize>, f64) {
    let mut best: Option<(usize, f64)> = None;
    for (i, o) in objects.iter().enumerate() {
        let u = iou(anchor, &o.bbox);
        if u > best.map_or(0.0, |b| b.1) {
            best = Some((i, u));
        }
    }
    match best {
        Some((i, u)) if u >= FG_IOU => (objects[i].class_id, Some(i), u),
        Some((i, u)) => (0, Some(i), u),
        None => (0, None, 0.0),
    }
}

fn random_box(rng: &mut ChaCha8Rng, size: f64, min: f64, max: f64) -> BBox {
    let w = rng.random_range(min..max);
    let h = rng.random_range(min..max);
    let x = rng.random_range(0.0..size - w);
    let y = rng.random_range(0.0..size - h);
    BBox { x1: x, y1: y, x2: x + w, y2: y + h }
}

fn jittered(rng: &mut ChaCha8Rng, b: &BBox, jitter: f64) -> BBox {
    if jitter == 0.0 {
        return *b;
    }
    let (cx, cy) = b.center();
    let (w, h) = (b.width(), b.height());
    let ncx = cx + jitter * w * rng.random_range(-1.0..1.0);
    let ncy = cy + jitter * h * rng.random_range(-1.0..1.0);
    let nw = w * (jitter * rng.random_range(-1.0..1.0)).exp();
    let nh = h * (jitter * rng.random_range(-1.0..1.0)).exp();
    BBox::from_center(ncx, ncy, nw, nh).unwrap_or(*b)
}

fn make_proposal(
    universe: &Universe,
    rng: &mut ChaCha8Rng,
    anchor: BBox,
    objects: &[SceneObject],
    attrs: &[VecF],
) -> Proposal {
    let (label, best, u) = label_for(&anchor, objects);
    let object = best.map(|i| (attrs[i].as_slice(), u, encode_box(&anchor, &objects[i].bbox)));
    let descriptor = universe.descriptor(rng, object.filter(|o| o.1 > 0.0));
    let target_deltas = (label != 0).then(|| {
        encode_box(&anchor, &objects[best.expect("foreground has an object")].bbox)
    });
    Proposal {
        descriptor,
        anchor,
        label,
        target_deltas,
    }
}

/// Scenes whose objects are drawn from `classes`. Scene `i` always contains
/// class `classes[i % n]`, so every class appears `scenes_per_class` times or more.
pub fn make_dataset(
    universe: &Universe,
    classes: &[u32],
    scenes: &SceneConfig,
    seed: u64,
) -> Result<Vec<Scene>> {
    if classes.is_empty() {
        return Err(Error::Empty("dataset classes"));
    }
    for &c in classes {
        universe.class(c).ok_or(Error::UnknownClass(c))?;
    }
    if scenes.scenes_per_class == 0 || scenes.objects_per_scene == 0 || scenes.proposals_per_scene == 0 {
        return Err(Error::InvalidParameter("scene counts must be >= 1".into()));
    }
    let mut rng = stream(seed, STREAM_DATASET);
    let size = scenes.scene_size;
    let (min_side, max_side) = (0.15 * size, 0.4 * size);
    let n_scenes = scenes.scenes_per_class * classes.len();
    let mut out = Vec::with_capacity(n_scenes);
    for s in 0..n_scenes {
        let mut objects: Vec<SceneObject> = Vec::new();
        let mut attrs: Vec<VecF> = Vec::new();
        for j in 0..scenes.objects_per_scene {
            let class_id = if j == 0 {
                classes[s % classes.len()]
            } else {
                classes[rng.random_range(0..classes.len())]
            };
            // rejection-sample low-overlap placements; give up after a few tries
            let mut bbox = random_box(&mut rng, size, min_side, max_side);
            for _ in 0..20 {
                if objects.iter().all(|o| iou(&o.bbox, &bbox) < 0.1) {
                    break;
                }
                bbox = random_box(&mut rng, size, min_side, max_side);
            }
            let attr = universe.instance_attribute(&mut rng, class_id);
            let descriptor = universe.descriptor(&mut rng, Some((attr.as_slice(), 1.0, [0.0; 4])));
            objects.push(SceneObject {
                class_id,
                bbox,
                descriptor,
            });
            attrs.push(attr);
        }
        let n_jitter = (scenes.proposals_per_scene / 2 / objects.len()).max(1);
        let mut proposals = Vec::with_capacity(scenes.proposals_per_scene);
        for o in &objects {
            for _ in 0..n_jitter {
                if proposals.len() >= scenes.proposals_per_scene {
                    break;
                }
                let anchor = jittered(&mut rng, &o.bbox, scenes.jitter);
                proposals.push(make_proposal(universe, &mut rng, anchor, &objects, &attrs));
            }
        }
        while proposals.len() < scenes.proposals_per_scene {
            let anchor = random_box(&mut rng, size, 0.1 * size, 0.5 * size);
            proposals.push(make_proposal(universe, &mut rng, anchor, &objects, &attrs));
        }
        let scene = Scene {
            id: s as u32,
            objects,
            proposals,
        };
        verify_labels(&scene)?;
        out.push(scene);
    }
    Ok(out)
}

/// Re-checks the IoU labelling invariant of a scene.
pub fn verify_labels(scene: &Scene) -> Result<()> {
    for (i, p) in scene.proposals.iter().enumerate() {
        let (label, _, _) = label_for(&p.anchor, &scene.objects);
        let fg_ok = p.label == 0 || scene.objects.iter().any(|o| {
            o.class_id == p.label && iou(&p.anchor, &o.bbox) >= FG_IOU
        });
        let bg_ok = p.label != 0 || scene.objects.iter().all(|o| iou(&p.anchor, &o.bbox) < FG_IOU);
        if label != p.label || !fg_ok || !bg_ok || (p.label == 0) != p.target_deltas.is_none() {
            return Err(Error::InvalidParameter(format!(
                "scene {} proposal {i} violates the labelling rule",
                scene.id
            )));
        }
    }
    Ok(())
}

/// `shots` exemplar descriptors per class, each a tight (IoU 1) window.
pub fn exemplars_for(
    universe: &Universe,
    classes: &[u32],
    shots: usize,
    seed: u64,
) -> Result<BTreeMap<u32, Vec<VecF>>> {
    if shots == 0 {
        return Err(Error::InvalidParameter("shots must be >= 1".into()));
    }
    let mut rng = stream(seed, STREAM_EXEMPLARS);
    let mut out = BTreeMap::new();
    for &c in classes {
        universe.class(c).ok_or(Error::UnknownClass(c))?;
        let descs = (0..shots)
            .map(|_| {
                let attr = universe.instance_attribute(&mut rng, c);
                universe.descriptor(&mut rng, Some((attr.as_slice(), 1.0, [0.0; 4])))
            })
            .collect();
        out.insert(c, descs);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum UniverseRecord {
    Config {
        config: UniverseConfig,
        base_ids: Vec<u32>,
        novel_ids: Vec<u32>,
    },
    Maps {
        semantic_map: VecF,
        appearance_map: VecF,
        appearance_offset: VecF,
    },
    Class(ToyClass),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum DatasetRecord {
    Scene { id: u32, objects: Vec<SceneObject> },
    Proposal { scene: u32, proposal: Proposal },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
}

fn write_header<W: Write>(w: &mut W, format: &str) -> Result<()> {
    let h = Header {
        format: format.into(),
        version: FORMAT_VERSION,
    };
    writeln!(w, "{}", serde_json::to_string(&h)?)?;
    Ok(())
}

fn read_header<I>(lines: &mut I, format: &str) -> Result<()>
where
    I: Iterator<Item = (usize, std::io::Result<String>)>,
{
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Format(format!("empty {format} file")))?;
    let h: Header = serde_json::from_str(&first?).map_err(|e| parse_err(1, e.to_string()))?;
    if h.format != format || h.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "expected {format} v{FORMAT_VERSION}, found {} v{}",
            h.format, h.version
        )));
    }
    Ok(())
}

/// Writes scenes as one record per scene and per proposal.
pub fn write_dataset<W: Write>(scenes: &[Scene], mut w: W) -> Result<()> {
    write_header(&mut w, DATASET_FORMAT)?;
    for s in scenes {
        let rec = DatasetRecord::Scene {
            id: s.id,
            objects: s.objects.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        for p in &s.proposals {
            let rec = DatasetRecord::Proposal {
                scene: s.id,
                proposal: p.clone(),
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<Scene>> {
    let mut lines = r.lines().enumerate();
    read_header(&mut lines, DATASET_FORMAT)?;
    let mut scenes: Vec<Scene> = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        match rec {
            DatasetRecord::Scene { id, objects } => scenes.push(Scene {
                id,
                objects,
                proposals: Vec::new(),
            }),
            DatasetRecord::Proposal { scene, proposal } => {
                let s = scenes
                    .last_mut()
                    .filter(|s| s.id == scene)
                    .ok_or_else(|| parse_err(i + 1, "proposal outside its scene"))?;
                s.proposals.push(proposal);
            }
        }
    }
    for s in &scenes {
        verify_labels(s)?;
    }
    Ok(scenes)
}
