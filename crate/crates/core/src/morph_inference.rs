//! Training-free class insertion and the detection pipeline.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::em_trainer::DetectorState;
use crate::error::{parse_err, Error, Result};
pub use crate::geometry::{decode_box, encode_box, BBox};
use crate::geometry::iou;
use crate::numkernel::VecF;
use crate::objective::posterior;
use crate::parallel;

/// Size deltas are clamped to `±ln(1000/16)` before decoding.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: u32,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            score_threshold: 0.05,
            nms_iou: 0.5,
        }
    }
}

/// Adds one novel prototype per class: the mean feature of its exemplars
/// under the frozen network. Only forward passes run here.
pub fn morph(state: &DetectorState, exemplars: &BTreeMap<u32, Vec<VecF>>) -> Result<DetectorState> {
    let mut prototypes = state.prototypes.clone();
    for (&class_id, descs) in exemplars {
        if descs.is_empty() {
            return Err(Error::Empty("exemplar list"));
        }
        if prototypes.contains(class_id) {
            return Err(Error::ClassCollision(class_id));
        }
        let feats = parallel::map_ordered(descs, |x| state.params.forward(x));
        let mut mean = vec![0.0; state.params.feature_dim()];
        for f in feats {
            for (m, x) in mean.iter_mut().zip(f?.feature) {
                *m += x;
            }
        }
        let n = descs.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        prototypes = prototypes.add_novel(class_id, &mean)?;
    }
    Ok(DetectorState {
        params: state.params.clone(),
        prototypes,
        config: state.config.clone(),
    })
}

fn order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then_with(|| {
            a.bbox
                .coords()
                .iter()
                .zip(b.bbox.coords())
                .map(|(x, y)| x.total_cmp(&y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
}

/// Greedy per-class suppression. Output is sorted by descending score, ties
/// by class id and then box coordinates.
pub fn nms(mut detections: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    detections.sort_by(order);
    let mut kept: Vec<Detection> = Vec::with_capacity(detections.len());
    for d in detections {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) >= iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Scores every proposal against all prototypes, keeps classes at or above
/// the threshold with the decoded box, then applies per-class NMS.
pub fn detect<'a, I>(state: &DetectorState, proposals: I, config: &DetectConfig) -> Result<Vec<Detection>>
where
    I: IntoIterator<Item = (&'a [f64], &'a BBox)>,
{
    let protos = state.prototypes.all_prototypes();
    if protos.is_empty() {
        return Ok(Vec::new());
    }
    let mut raw = Vec::new();
    for (descriptor, anchor) in proposals {
        let out = state.params.forward(descriptor)?;
        let scores = posterior(&out.feature, out.bg_logit, &protos)?;
        if scores.per_class.values().all(|s| *s < config.score_threshold) {
            continue;
        }
        let mut deltas = out.box_deltas.clone();
        deltas[2] = deltas[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
        deltas[3] = deltas[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
        let bbox = decode_box(anchor, &deltas)?;
        for (&class_id, &score) in &scores.per_class {
            if score >= config.score_threshold {
                raw.push(Detection {
                    class_id,
                    score,
                    bbox,
                });
            }
        }
    }
    Ok(nms(raw, config.nms_iou))
}

/// `scene_id,class_id,score,x1,y1,x2,y2` with 6-decimal scores.
pub fn detections_csv(per_scene: &[(u32, Vec<Detection>)]) -> String {
    let mut out = String::from("scene_id,class_id,score,x1,y1,x2,y2\n");
    for (scene, dets) in per_scene {
        for d in dets {
            let _ = writeln!(
                out,
                "{scene},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                d.class_id, d.score, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2
            );
        }
    }
    out
}

/// Exemplar CSV: `class_id,descriptor components…`, one exemplar per row.
pub fn exemplars_csv(exemplars: &BTreeMap<u32, Vec<VecF>>) -> String {
    let mut out = String::new();
    for (c, descs) in exemplars {
        for d in descs {
            let _ = write!(out, "{c}");
            for x in d {
                let _ = write!(out, ",{x:.16e}");
            }
            out.push('\n');
        }
    }
    out
}

pub fn parse_exemplars_csv(text: &str) -> Result<BTreeMap<u32, Vec<VecF>>> {
    let mut out: BTreeMap<u32, Vec<VecF>> = BTreeMap::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("class_id") {
            continue;
        }
        let mut fields = line.split(',');
        let class_id: u32 = fields
            .next()
            .unwrap_or_default()
            .trim()
            .parse()
            .map_err(|e| parse_err(i + 1, format!("bad class id: {e}")))?;
        let desc = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<VecF, _>>()
            .map_err(|e| parse_err(i + 1, format!("bad component: {e}")))?;
        let w = *width.get_or_insert(desc.len());
        if desc.is_empty() || desc.len() != w {
            return Err(parse_err(i + 1, format!("expected {w} components, got {}", desc.len())));
        }
        out.entry(class_id).or_default().push(desc);
    }
    Ok(out)
}

/// Keeps the first `shots` exemplars of every class.
pub fn take_shots(exemplars: &BTreeMap<u32, Vec<VecF>>, shots: usize) -> Result<BTreeMap<u32, Vec<VecF>>> {
    if shots == 0 {
        return Err(Error::InvalidParameter("shots must be >= 1".into()));
    }
    exemplars
        .iter()
        .map(|(c, v)| {
            if v.len() < shots {
                Err(Error::InvalidParameter(format!(
                    "class {c} has {} exemplars, {shots} requested",
                    v.len()
                )))
            } else {
                Ok((*c, v[..shots].to_vec()))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::{grad_evaluations, EmbedderConfig, EmbedderParams};
    use crate::em_trainer::TrainConfig;
    use crate::numkernel::l2_normalize;
    use crate::prototype_store::PrototypeSet;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state(seed: u64) -> DetectorState {
        let params = EmbedderParams::init(EmbedderConfig { m_in: 6, hidden: vec![8], d: 4, seed }).unwrap();
        let protos = PrototypeSet::init_from_semantic([
            (1, vec![1.0, 0.0, 0.0, 0.0]),
            (2, vec![0.0, 1.0, 0.0, 0.0]),
        ])
        .unwrap();
        DetectorState::new(params, protos, TrainConfig::default()).unwrap()
    }

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn single_exemplar_prototype_is_normalized_feature() {
        let s = state(1);
        let x = vec![0.3, -1.0, 0.5, 2.0, 0.1, -0.4];
        let before = grad_evaluations();
        let m = morph(&s, &[(7, vec![x.clone()])].into()).unwrap();
        assert_eq!(grad_evaluations(), before);
        assert_eq!(m.params, s.params);
        let expect = l2_normalize(&s.params.forward(&x).unwrap().feature).unwrap();
        for (a, b) in m.prototypes.novel()[&7].iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sequential_morphs_equal_combined() {
        let s = state(2);
        let a: BTreeMap<u32, Vec<VecF>> = [(5, vec![vec![1.0; 6], vec![0.5; 6]])].into();
        let b: BTreeMap<u32, Vec<VecF>> = [(6, vec![vec![-1.0, 0.0, 1.0, 0.0, 2.0, 0.0]])].into();
        let mut both = a.clone();
        both.extend(b.clone());
        let seq = morph(&morph(&s, &a).unwrap(), &b).unwrap();
        assert_eq!(seq, morph(&s, &both).unwrap());
        assert_eq!(morph(&s, &BTreeMap::new()).unwrap(), s);
    }

    #[test]
    fn morph_errors() {
        let s = state(3);
        let collide: BTreeMap<u32, Vec<VecF>> = [(1, vec![vec![1.0; 6]])].into();
        assert!(matches!(morph(&s, &collide), Err(Error::ClassCollision(1))));
        let empty: BTreeMap<u32, Vec<VecF>> = [(9, vec![])].into();
        assert!(matches!(morph(&s, &empty), Err(Error::Empty(_))));
    }

    #[test]
    fn nms_examples() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        let d = |c, s| Detection { class_id: c, score: s, bbox: b };
        let kept = nms(vec![d(1, 0.8), d(1, 0.9)], 0.5);
        assert_eq!(kept, vec![d(1, 0.9)]);
        let kept = nms(vec![d(1, 0.8), d(2, 0.9)], 0.5);
        assert_eq!(kept.len(), 2);
    }

    /// O(n²) reference: a detection survives iff no higher-ranked surviving
    /// detection of its class overlaps it.
    fn reference_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
        let mut idx: Vec<usize> = (0..dets.len()).collect();
        idx.sort_by(|&i, &j| order(&dets[i], &dets[j]));
        let mut alive = vec![true; dets.len()];
        for a in 0..idx.len() {
            if !alive[idx[a]] {
                continue;
            }
            for b in a + 1..idx.len() {
                let (i, j) = (idx[a], idx[b]);
                if dets[i].class_id == dets[j].class_id {
                    let ix = (dets[i].bbox.x2.min(dets[j].bbox.x2) - dets[i].bbox.x1.max(dets[j].bbox.x1)).max(0.0);
                    let iy = (dets[i].bbox.y2.min(dets[j].bbox.y2) - dets[i].bbox.y1.max(dets[j].bbox.y1)).max(0.0);
                    let inter = ix * iy;
                    let u = inter / (dets[i].bbox.area() + dets[j].bbox.area() - inter);
                    if u >= thr {
                        alive[j] = false;
                    }
                }
            }
        }
        idx.into_iter().filter(|&i| alive[i]).map(|i| dets[i]).collect()
    }

    #[test]
    fn nms_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let dets: Vec<Detection> = (0..20)
                .map(|_| {
                    let x = rng.random_range(0.0..30.0);
                    let y = rng.random_range(0.0..30.0);
                    let w = rng.random_range(5.0..20.0);
                    Detection {
                        class_id: rng.random_range(1..=3),
                        score: (rng.random_range(0..10) as f64) / 10.0,
                        bbox: bx(x, y, x + w, y + w),
                    }
                })
                .collect();
            assert_eq!(nms(dets.clone(), 0.5), reference_nms(&dets, 0.5));
        }
    }

    #[test]
    fn threshold_above_one_yields_nothing() {
        let s = state(4);
        let x = vec![0.1; 6];
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let cfg = DetectConfig { score_threshold: 1.0 + 1e-9, ..Default::default() };
        assert!(detect(&s, [(x.as_slice(), &a)], &cfg).unwrap().is_empty());
    }

    #[test]
    fn saturated_feature_survives() {
        // net whose feature equals 20·p1 and background logit 0 for every input
        let mut s = state(5);
        let p = &mut s.params;
        p.trunk.iter_mut().for_each(|l| l.weight.iter_mut().for_each(|w| *w = 0.0));
        for h in [&mut p.feature_head, &mut p.background_head, &mut p.box_head] {
            h.weight.iter_mut().for_each(|w| *w = 0.0);
            h.bias.iter_mut().for_each(|w| *w = 0.0);
        }
        p.feature_head.bias[0] = 20.0;
        s.prototypes = PrototypeSet::init_from_semantic([
            (1, vec![1.0, 0.0, 0.0, 0.0]),
            (2, vec![-1.0, 0.0, 0.0, 0.0]),
        ])
        .unwrap();
        let x = vec![0.7; 6];
        let a = bx(2.0, 2.0, 12.0, 8.0);
        let dets = detect(&s, [(x.as_slice(), &a)], &DetectConfig::default()).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class_id, 1);
        assert!(dets[0].score > 0.99);
        assert_eq!(dets[0].bbox, a);
    }

    #[test]
    fn detect_is_pure_and_scores_come_from_posterior() {
        let s = state(6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let props: Vec<(VecF, BBox)> = (0..15)
            .map(|_| {
                let x: VecF = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
                let o = rng.random_range(0.0..20.0);
                (x, bx(o, o, o + 10.0, o + 12.0))
            })
            .collect();
        let cfg = DetectConfig { score_threshold: 0.0, nms_iou: 0.5 };
        let it = || props.iter().map(|(x, b)| (x.as_slice(), b));
        let a = detect(&s, it(), &cfg).unwrap();
        assert_eq!(a, detect(&s, it(), &cfg).unwrap());
        let protos = s.prototypes.all_prototypes();
        for d in &a {
            let found = props.iter().any(|(x, _)| {
                let o = s.params.forward(x).unwrap();
                posterior(&o.feature, o.bg_logit, &protos).unwrap().per_class[&d.class_id] == d.score
            });
            assert!(found);
        }
    }

    #[test]
    fn exemplar_csv_round_trip() {
        let ex: BTreeMap<u32, Vec<VecF>> =
            [(3, vec![vec![0.1, -2.0], vec![1.0 / 3.0, 5.0]]), (4, vec![vec![7.0, 8.0]])].into();
        let text = exemplars_csv(&ex);
        assert_eq!(parse_exemplars_csv(&text).unwrap(), ex);
        assert!(parse_exemplars_csv("1,0.5\n2,0.5,0.1\n").is_err());
        assert_eq!(take_shots(&ex, 1).unwrap()[&3].len(), 1);
        assert!(take_shots(&ex, 2).is_err());
    }

    #[test]
    fn detection_csv_layout() {
        let d = Detection { class_id: 2, score: 0.123456789, bbox: bx(1.0, 2.0, 3.0, 4.0) };
        let csv = detections_csv(&[(9, vec![d])]);
        assert_eq!(csv.lines().nth(1).unwrap(), "9,2,0.123457,1.000000,2.000000,3.000000,4.000000");
    }

    proptest! {
        #[test]
        fn morph_preserves_base_ratios(seed in 0u64..1000, x in proptest::collection::vec(-2.0f64..2.0, 6)) {
            let s = state(seed);
            let ex: BTreeMap<u32, Vec<VecF>> = [(9, vec![x.iter().map(|v| v * 0.5 + 0.1).collect()])].into();
            let m = morph(&s, &ex);
            prop_assume!(m.is_ok());
            let m = m.unwrap();
            let o = s.params.forward(&x).unwrap();
            let before = posterior(&o.feature, o.bg_logit, &s.prototypes.all_prototypes()).unwrap();
            let after = posterior(&o.feature, o.bg_logit, &m.prototypes.all_prototypes()).unwrap();
            let r0 = before.per_class[&1] / before.per_class[&2];
            let r1 = after.per_class[&1] / after.per_class[&2];
            prop_assert!((r0 - r1).abs() <= 1e-12 * r0.abs().max(1.0));
        }
    }
}
