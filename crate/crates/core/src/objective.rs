//! Prototype contrastive losses, the box loss, and the class posterior.
//!
//! For a proposal with feature `f` and background logit `b`, the logits are
//! `[b, f·p_1, …, f·p_K]`. The foreground loss is the negative log softmax of
//! the labelled class, the background loss that of `b`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embedder::ProposalOutputs;
use crate::error::{Error, Result};
use crate::numkernel::{axpy, dot_unchecked, log_sum_exp, smooth_l1, smooth_l1_grad, VecF};
use crate::prototype_store::Prototype;

/// Posterior over prototype classes plus background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub per_class: BTreeMap<u32, f64>,
    pub background: f64,
}

impl ClassScores {
    pub fn total(&self) -> f64 {
        self.background + self.per_class.values().sum::<f64>()
    }

    /// Most probable outcome; `0` is background.
    pub fn argmax(&self) -> u32 {
        let mut best = (0u32, self.background);
        for (&c, &p) in &self.per_class {
            if p > best.1 {
                best = (c, p);
            }
        }
        best.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub fg: f64,
    pub bg: f64,
    pub bbox: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            fg: 1.0,
            bg: 1.0,
            bbox: 1.0,
        }
    }
}

impl LossWeights {
    pub fn scaled(&self, c: f64) -> Self {
        LossWeights {
            fg: self.fg * c,
            bg: self.bg * c,
            bbox: self.bbox * c,
        }
    }
}

/// Weighted loss terms; `total` is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub fg: f64,
    pub bg: f64,
    pub bbox: f64,
    pub total: f64,
}

/// Loss value with gradients w.r.t. the feature vector and background logit.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLoss {
    pub value: f64,
    pub grad_f: VecF,
    pub grad_b: f64,
}

fn check_dims(f: &[f64], prototypes: &[Prototype]) -> Result<()> {
    if prototypes.is_empty() {
        return Err(Error::Empty("prototype set"));
    }
    for p in prototypes {
        if p.vector.len() != f.len() {
            return Err(Error::Dimension {
                expected: f.len(),
                got: p.vector.len(),
            });
        }
    }
    Ok(())
}

/// `[b, f·p_1, …]` and their log-sum-exp.
fn logits(f: &[f64], b: f64, prototypes: &[Prototype]) -> (VecF, f64) {
    let mut z = Vec::with_capacity(prototypes.len() + 1);
    z.push(b);
    z.extend(prototypes.iter().map(|p| dot_unchecked(f, &p.vector)));
    let lse = log_sum_exp(&z).expect("non-empty logits");
    (z, lse)
}

/// Class posterior over `prototypes` and background, computed in log space.
pub fn posterior(f: &[f64], b: f64, prototypes: &[Prototype]) -> Result<ClassScores> {
    check_dims(f, prototypes)?;
    let (z, lse) = logits(f, b, prototypes);
    let per_class = prototypes
        .iter()
        .zip(&z[1..])
        .map(|(p, zi)| (p.class_id, (zi - lse).exp()))
        .collect();
    Ok(ClassScores {
        per_class,
        background: (z[0] - lse).exp(),
    })
}

/// Shared backward pass: loss `lse − z_target`, target index into logits.
fn softmax_nll(f: &[f64], b: f64, prototypes: &[Prototype], target: usize) -> HeadLoss {
    let (z, lse) = logits(f, b, prototypes);
    let mut grad_f = vec![0.0; f.len()];
    for (k, p) in prototypes.iter().enumerate() {
        let mut q = (z[k + 1] - lse).exp();
        if target == k + 1 {
            q -= 1.0;
        }
        axpy(q, &p.vector, &mut grad_f);
    }
    let mut grad_b = (z[0] - lse).exp();
    if target == 0 {
        grad_b -= 1.0;
    }
    HeadLoss {
        value: lse - z[target],
        grad_f,
        grad_b,
    }
}

/// `−log posterior(label)` for a foreground proposal.
pub fn fg_loss(f: &[f64], b: f64, prototypes: &[Prototype], label: u32) -> Result<HeadLoss> {
    check_dims(f, prototypes)?;
    let idx = prototypes
        .iter()
        .position(|p| p.class_id == label)
        .ok_or(Error::UnknownClass(label))?;
    Ok(softmax_nll(f, b, prototypes, idx + 1))
}

/// `−log posterior(background)` for a background proposal.
pub fn bg_loss(f: &[f64], b: f64, prototypes: &[Prototype]) -> Result<HeadLoss> {
    check_dims(f, prototypes)?;
    Ok(softmax_nll(f, b, prototypes, 0))
}

/// `Σ_k smooth_l1(pred_k − target_k)` and its gradient w.r.t. `pred`.
pub fn bbox_loss(pred: &[f64], target: &[f64]) -> Result<(f64, [f64; 4])> {
    if pred.len() != 4 || target.len() != 4 {
        return Err(Error::Dimension {
            expected: 4,
            got: if pred.len() != 4 { pred.len() } else { target.len() },
        });
    }
    let mut value = 0.0;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d = pred[k] - target[k];
        value += smooth_l1(d);
        grad[k] = smooth_l1_grad(d);
    }
    Ok((value, grad))
}

/// One proposal's network outputs together with its supervision.
#[derive(Debug, Clone, Copy)]
pub struct Supervised<'a> {
    pub outputs: &'a ProposalOutputs,
    pub label: u32,
    pub target_deltas: Option<&'a [f64; 4]>,
}

/// Composite loss: fg averaged over foreground proposals, bg over background
/// proposals, bbox over foreground proposals. Empty groups contribute zero.
pub fn batch_loss(
    items: &[Supervised<'_>],
    prototypes: &[Prototype],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let n_fg = items.iter().filter(|s| s.label != 0).count();
    let n_bg = items.len() - n_fg;
    let mut out = LossBreakdown::default();
    for s in items {
        let f = &s.outputs.feature;
        let b = s.outputs.bg_logit;
        if s.label == 0 {
            out.bg += bg_loss(f, b, prototypes)?.value / n_bg as f64;
        } else {
            out.fg += fg_loss(f, b, prototypes, s.label)?.value / n_fg as f64;
            let target = s
                .target_deltas
                .ok_or_else(|| Error::InvalidParameter("foreground proposal without box target".into()))?;
            out.bbox += bbox_loss(&s.outputs.box_deltas, target)?.0 / n_fg as f64;
        }
    }
    out.fg *= weights.fg;
    out.bg *= weights.bg;
    out.bbox *= weights.bbox;
    out.total = out.fg + out.bg + out.bbox;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::numkernel::l2_normalize;

    const LN2: f64 = std::f64::consts::LN_2;

    fn protos(vs: &[&[f64]]) -> Vec<Prototype> {
        vs.iter()
            .enumerate()
            .map(|(i, v)| Prototype {
                class_id: i as u32 + 1,
                vector: v.to_vec(),
            })
            .collect()
    }

    fn random_protos(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Prototype> {
        (0..n)
            .map(|i| {
                let v: VecF = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                Prototype {
                    class_id: i as u32 + 1,
                    vector: l2_normalize(&v).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn posterior_examples() {
        let p = protos(&[&[1.0, 0.0]]);
        let s = posterior(&[0.0, 0.0], 0.0, &p).unwrap();
        assert!((s.per_class[&1] - 0.5).abs() < 1e-15);
        assert!((s.background - 0.5).abs() < 1e-15);

        let p = protos(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let s = posterior(&[LN2, 0.0], 0.0, &p).unwrap();
        assert!((s.per_class[&1] - 0.5).abs() < 1e-15);
        assert!((s.per_class[&2] - 0.25).abs() < 1e-15);
        assert!((s.background - 0.25).abs() < 1e-15);

        assert!(matches!(posterior(&[0.0], 0.0, &p), Err(Error::Dimension { .. })));
        assert!(matches!(posterior(&[0.0], 0.0, &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn posterior_matches_naive_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_protos(&mut rng, 50, 8);
        let f: VecF = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = 0.3;
        let s = posterior(&f, b, &p).unwrap();
        let exps: Vec<f64> = p.iter().map(|q| dot_unchecked(&f, &q.vector).exp()).collect();
        let denom = b.exp() + exps.iter().sum::<f64>();
        for (q, e) in p.iter().zip(&exps) {
            assert!((s.per_class[&q.class_id] - e / denom).abs() < 1e-10);
        }
        assert!((s.background - b.exp() / denom).abs() < 1e-10);
        assert!((s.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_examples() {
        let p = protos(&[&[1.0, 0.0]]);
        assert!((fg_loss(&[0.0, 0.0], 0.0, &p, 1).unwrap().value - LN2).abs() < 1e-15);
        assert!((bg_loss(&[0.0, 0.0], 0.0, &p).unwrap().value - LN2).abs() < 1e-15);
        assert!(matches!(fg_loss(&[0.0, 0.0], 0.0, &p, 4), Err(Error::UnknownClass(4))));
        assert!(bg_loss(&[0.0, 0.0], 0.0, &[]).is_err());

        let p = protos(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        // f·p1 = 25, f·p2 = -25, b = 0: margins ≥ 20
        assert!(fg_loss(&[25.0, 0.0], 0.0, &p, 1).unwrap().value < 1e-8);
        assert!(bg_loss(&[0.0, 0.0], 30.0, &protos(&[&[1.0, 0.0]])).unwrap().value < 1e-8);
        assert!(bg_loss(&[-3.0, 0.0], 30.0, &p).unwrap().value < 1e-8);
    }

    #[test]
    fn bbox_examples() {
        let t = [0.1, -0.2, 0.3, 0.0];
        assert_eq!(bbox_loss(&t, &t).unwrap().0, 0.0);
        let (v, _) = bbox_loss(&[0.5, 0.0, 0.0, 0.0], &[0.0; 4]).unwrap();
        assert_eq!(v, 0.125);
        assert!(bbox_loss(&[0.0; 3], &[0.0; 4]).is_err());
    }

    fn fd_check<F: Fn(&[f64], f64) -> f64>(loss: F, an: &HeadLoss, f: &[f64], b: f64) {
        let h = 1e-6;
        for k in 0..f.len() {
            let mut fp = f.to_vec();
            let mut fm = f.to_vec();
            fp[k] += h;
            fm[k] -= h;
            let fd = (loss(&fp, b) - loss(&fm, b)) / (2.0 * h);
            let rel = (fd - an.grad_f[k]).abs() / an.grad_f[k].abs().max(1e-3);
            assert!(rel < 1e-6, "f[{k}]: fd {fd} vs {}", an.grad_f[k]);
        }
        let fd = (loss(f, b + h) - loss(f, b - h)) / (2.0 * h);
        let rel = (fd - an.grad_b).abs() / an.grad_b.abs().max(1e-3);
        assert!(rel < 1e-6, "b: fd {fd} vs {}", an.grad_b);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let p = random_protos(&mut rng, 6, 5);
            let f: VecF = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b = rng.random_range(-1.0..1.0);
            let label = rng.random_range(1..=6);
            let an = fg_loss(&f, b, &p, label).unwrap();
            fd_check(|f, b| fg_loss(f, b, &p, label).unwrap().value, &an, &f, b);
            let an = bg_loss(&f, b, &p).unwrap();
            fd_check(|f, b| bg_loss(f, b, &p).unwrap().value, &an, &f, b);
        }
    }

    #[test]
    fn bbox_gradient_matches_finite_differences() {
        let pred = [0.3, -0.4, 1.7, -2.2];
        let target = [0.0, 0.1, 0.2, -0.1];
        let (_, g) = bbox_loss(&pred, &target).unwrap();
        let h = 1e-6;
        for k in 0..4 {
            let mut pp = pred;
            let mut pm = pred;
            pp[k] += h;
            pm[k] -= h;
            let fd = (bbox_loss(&pp, &target).unwrap().0 - bbox_loss(&pm, &target).unwrap().0) / (2.0 * h);
            assert!((fd - g[k]).abs() / g[k].abs() < 1e-6);
        }
    }

    fn out(f: &[f64], b: f64, d: [f64; 4]) -> ProposalOutputs {
        ProposalOutputs {
            feature: f.to_vec(),
            bg_logit: b,
            box_deltas: d.to_vec(),
        }
    }

    #[test]
    fn batch_loss_examples() {
        let p = protos(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let w = LossWeights::default();
        let bg = out(&[0.2, -0.1], 0.4, [0.0; 4]);
        let all_bg = [
            Supervised { outputs: &bg, label: 0, target_deltas: None },
        ];
        let l = batch_loss(&all_bg, &p, &w).unwrap();
        assert_eq!(l.fg, 0.0);
        assert_eq!(l.bbox, 0.0);
        assert_eq!(l.total, l.bg);

        let fg = out(&[1.0, 0.5], -0.3, [0.1, 0.0, 0.0, 0.2]);
        let t = [0.0, 0.0, 0.5, 0.0];
        let once = [
            Supervised { outputs: &fg, label: 2, target_deltas: Some(&t) },
            Supervised { outputs: &bg, label: 0, target_deltas: None },
        ];
        let twice = [once[0], once[0], once[1], once[1]];
        let a = batch_loss(&once, &p, &w).unwrap();
        let b = batch_loss(&twice, &p, &w).unwrap();
        assert!((a.total - b.total).abs() < 1e-12);
    }

    #[test]
    fn batch_loss_composes_per_op_values() {
        let p = protos(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let w = LossWeights { fg: 0.7, bg: 1.3, bbox: 2.0 };
        let o = [
            out(&[1.0, 0.5], -0.3, [0.1, 0.0, 0.0, 0.2]),
            out(&[-0.2, 0.9], 0.1, [0.0, 1.5, 0.0, 0.0]),
            out(&[0.0, 0.1], 1.0, [0.0; 4]),
            out(&[0.4, 0.4], -0.5, [0.0; 4]),
        ];
        let t1 = [0.0, 0.0, 0.5, 0.0];
        let t2 = [0.3, -0.2, 0.0, 0.1];
        let items = [
            Supervised { outputs: &o[0], label: 1, target_deltas: Some(&t1) },
            Supervised { outputs: &o[1], label: 2, target_deltas: Some(&t2) },
            Supervised { outputs: &o[2], label: 0, target_deltas: None },
            Supervised { outputs: &o[3], label: 0, target_deltas: None },
        ];
        let fg = (fg_loss(&o[0].feature, o[0].bg_logit, &p, 1).unwrap().value
            + fg_loss(&o[1].feature, o[1].bg_logit, &p, 2).unwrap().value)
            / 2.0;
        let bg = (bg_loss(&o[2].feature, o[2].bg_logit, &p).unwrap().value
            + bg_loss(&o[3].feature, o[3].bg_logit, &p).unwrap().value)
            / 2.0;
        let bbox = (bbox_loss(&o[0].box_deltas, &t1).unwrap().0
            + bbox_loss(&o[1].box_deltas, &t2).unwrap().0)
            / 2.0;
        let l = batch_loss(&items, &p, &w).unwrap();
        let expect = 0.7 * fg + 1.3 * bg + 2.0 * bbox;
        assert!((l.total - expect).abs() < 1e-12);
        assert!((l.total - (l.fg + l.bg + l.bbox)).abs() < 1e-12);
    }

    #[test]
    fn very_negative_prototype_is_negligible() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = random_protos(&mut rng, 4, 3);
        let f = vec![0.5, -0.2, 0.9];
        let before = posterior(&f, 0.2, &p).unwrap();
        // f·p = -1000 for this appended prototype
        let dir = l2_normalize(&f).unwrap();
        let n = crate::numkernel::norm(&f);
        let far: VecF = dir.iter().map(|x| -x * 1000.0 / n).collect();
        p.push(Prototype { class_id: 99, vector: far });
        let after = posterior(&f, 0.2, &p).unwrap();
        for (c, v) in &before.per_class {
            assert!((v - after.per_class[c]).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn posterior_sums_to_one(
            f in proptest::collection::vec(-100.0f64..100.0, 4),
            b in -1e4f64..1e4,
            scale in 1.0f64..100.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let p: Vec<Prototype> = random_protos(&mut rng, 5, 4)
                .into_iter()
                .map(|q| Prototype { class_id: q.class_id, vector: q.vector.iter().map(|x| x * scale).collect() })
                .collect();
            let s = posterior(&f, b, &p).unwrap();
            prop_assert!((s.total() - 1.0).abs() < 1e-9);
            prop_assert!(s.per_class.values().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn argmax_shift_invariant(f in proptest::collection::vec(-3.0f64..3.0, 3), b in -3.0f64..3.0, c in -5.0f64..5.0) {
            // the shared last component adds c to every class logit; b is shifted by hand
            let p = vec![
                Prototype { class_id: 1, vector: vec![1.0, 0.0, 0.0, 1.0] },
                Prototype { class_id: 2, vector: vec![0.0, 1.0, 0.0, 1.0] },
                Prototype { class_id: 3, vector: vec![0.0, 0.0, 1.0, 1.0] },
            ];
            let mut f0 = f.clone();
            f0.push(0.0);
            let mut f1 = f.clone();
            f1.push(c);
            let a = posterior(&f0, b, &p).unwrap();
            let s = posterior(&f1, b + c, &p).unwrap();
            prop_assert_eq!(a.argmax(), s.argmax());
        }

        #[test]
        fn fg_loss_monotone_in_own_logit(t in -5.0f64..5.0, dt in 0.01f64..3.0) {
            let p = protos(&[&[1.0, 0.0], &[0.0, 1.0]]);
            let lo = fg_loss(&[t, 0.3], 0.1, &p, 1).unwrap().value;
            let hi = fg_loss(&[t + dt, 0.3], 0.1, &p, 1).unwrap().value;
            prop_assert!(hi < lo);
            prop_assert!(lo > 0.0);
        }
    }
}
