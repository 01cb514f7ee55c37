//! Detection metrics: all-point average precision at fixed and averaged IoU
//! thresholds, recall@N, and per-split reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::em_trainer::DetectorState;
use crate::error::{Error, Result};
pub use crate::geometry::iou;
use crate::geometry::BBox;
use crate::morph_inference::{detect, DetectConfig, Detection};
use crate::parallel;
use crate::toyworld::Scene;

/// 0.50, 0.55, …, 0.95
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// A scored detection of one class, tagged with its scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub scene: u32,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub scene: u32,
    pub bbox: BBox,
}

/// Indices of `dets` sorted by descending score; stable for ties.
fn ranked(dets: &[ScoredBox]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    idx
}

/// Greedy matching in rank order: each detection takes the unmatched
/// same-scene ground truth with the highest IoU ≥ threshold (lowest index on
/// ties). Returns true-positive flags in rank order.
fn match_ranked(dets: &[ScoredBox], order: &[usize], gts: &[GtBox], thr: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    order
        .iter()
        .map(|&i| {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] || gt.scene != d.scene {
                    continue;
                }
                let u = iou(&d.bbox, &gt.bbox);
                if u >= thr && best.is_none_or(|(_, bu)| u > bu) {
                    best = Some((g, u));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated AP of one class. Zero when there is no ground truth.
pub fn average_precision(dets: &[ScoredBox], gts: &[GtBox], iou_threshold: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let order = ranked(dets);
    let tp = match_ranked(dets, &order, gts, iou_threshold);
    let n_gt = gts.len() as f64;
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        recall.push(hits as f64 / n_gt);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    // precision envelope, right to left
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap.clamp(0.0, 1.0)
}

/// Fraction of ground truths matched by the top-`n` detections of their
/// scene. Matching ignores class. Zero when there is no ground truth.
pub fn recall_at(dets: &[ScoredBox], gts: &[GtBox], n: usize, iou_threshold: f64) -> f64 {
    if gts.is_empty() || n == 0 {
        return 0.0;
    }
    let scenes: BTreeSet<u32> = gts.iter().map(|g| g.scene).collect();
    let mut matched = 0usize;
    for scene in scenes {
        let sd: Vec<ScoredBox> = dets.iter().filter(|d| d.scene == scene).copied().collect();
        let sg: Vec<GtBox> = gts.iter().filter(|g| g.scene == scene).copied().collect();
        let mut order = ranked(&sd);
        order.truncate(n);
        matched += match_ranked(&sd, &order, &sg, iou_threshold)
            .into_iter()
            .filter(|t| *t)
            .count();
    }
    matched as f64 / gts.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub recall_at: BTreeMap<usize, f64>,
    pub classes: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// AP of each class at each threshold.
    pub per_class: BTreeMap<u32, Vec<f64>>,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub recall_at: BTreeMap<usize, f64>,
    pub base: SplitMetrics,
    pub novel: Option<SplitMetrics>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Rows of `method,split,AP,AP50,AP75`; percentages with two decimals.
    pub fn csv_rows(&self, method: &str) -> String {
        let mut out = String::new();
        let mut row = |split: &str, m: (f64, f64, f64)| {
            let _ = writeln!(
                out,
                "{method},{split},{:.2},{:.2},{:.2}",
                100.0 * m.0,
                100.0 * m.1,
                100.0 * m.2
            );
        };
        row("all", (self.ap, self.ap50, self.ap75));
        row("base", (self.base.ap, self.base.ap50, self.base.ap75));
        if let Some(n) = &self.novel {
            row("novel", (n.ap, n.ap50, n.ap75));
        }
        out
    }

    pub fn to_csv(&self, method: &str) -> String {
        format!("{}{}", CSV_HEADER, self.csv_rows(method))
    }
}

pub const CSV_HEADER: &str = "method,split,AP,AP50,AP75\n";

/// Recall@N cut-offs included in every report.
pub const RECALL_CUTOFFS: [usize; 2] = [10, 100];

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Builds a report from detections already produced for each scene.
/// `per_scene[i]` belongs to `scenes[i]`.
pub fn evaluate_detections(
    per_scene: &[Vec<Detection>],
    scenes: &[Scene],
    base_ids: &[u32],
    novel_ids: &[u32],
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::Empty("evaluation scenes"));
    }
    if per_scene.len() != scenes.len() {
        return Err(Error::Dimension {
            expected: scenes.len(),
            got: per_scene.len(),
        });
    }
    let thresholds = coco_thresholds();
    let classes: Vec<u32> = base_ids.iter().chain(novel_ids).copied().collect();
    let dets_of = |pred: &dyn Fn(u32) -> bool| -> Vec<ScoredBox> {
        scenes
            .iter()
            .zip(per_scene)
            .flat_map(|(s, ds)| {
                ds.iter().filter(|d| pred(d.class_id)).map(move |d| ScoredBox {
                    scene: s.id,
                    score: d.score,
                    bbox: d.bbox,
                })
            })
            .collect()
    };
    let gts_of = |pred: &dyn Fn(u32) -> bool| -> Vec<GtBox> {
        scenes
            .iter()
            .flat_map(|s| {
                s.objects
                    .iter()
                    .filter(|o| pred(o.class_id))
                    .map(move |o| GtBox { scene: s.id, bbox: o.bbox })
            })
            .collect()
    };

    let per_class: BTreeMap<u32, Vec<f64>> = classes
        .iter()
        .map(|&c| {
            let d = dets_of(&|x| x == c);
            let g = gts_of(&|x| x == c);
            (c, thresholds.iter().map(|&t| average_precision(&d, &g, t)).collect())
        })
        .collect();

    let split = |ids: &[u32]| -> SplitMetrics {
        let aps: Vec<&Vec<f64>> = ids.iter().map(|c| &per_class[c]).collect();
        let d = dets_of(&|x| ids.contains(&x));
        let g = gts_of(&|x| ids.contains(&x));
        SplitMetrics {
            ap: mean(aps.iter().map(|a| mean(a.iter().copied()))),
            ap50: mean(aps.iter().map(|a| a[0])),
            ap75: mean(aps.iter().map(|a| a[5])),
            recall_at: RECALL_CUTOFFS
                .iter()
                .map(|&n| (n, recall_at(&d, &g, n, 0.5)))
                .collect(),
            classes: ids.to_vec(),
        }
    };
    let all = split(&classes);
    Ok(EvalReport {
        thresholds,
        ap: all.ap,
        ap50: all.ap50,
        ap75: all.ap75,
        recall_at: all.recall_at,
        base: split(base_ids),
        novel: (!novel_ids.is_empty()).then(|| split(novel_ids)),
        per_class,
    })
}

/// Runs detection on every scene, in parallel when enabled.
pub fn detect_scenes(state: &DetectorState, scenes: &[Scene], config: &DetectConfig) -> Result<Vec<Vec<Detection>>> {
    parallel::map_ordered(scenes, |s| {
        detect(
            state,
            s.proposals.iter().map(|p| (p.descriptor.as_slice(), &p.anchor)),
            config,
        )
    })
    .into_iter()
    .collect()
}

pub fn evaluate(
    state: &DetectorState,
    scenes: &[Scene],
    base_ids: &[u32],
    novel_ids: &[u32],
    config: &DetectConfig,
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::Empty("evaluation scenes"));
    }
    let per_scene = detect_scenes(state, scenes, config)?;
    evaluate_detections(&per_scene, scenes, base_ids, novel_ids)
}
