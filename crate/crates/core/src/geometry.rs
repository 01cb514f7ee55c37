//! Axis-aligned boxes and the center/log-size delta parameterization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidParameter(format!("invalid box {b:?}")))
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Regression target taking `anchor` to `target`:
/// `(Δcx / w_a, Δcy / h_a, ln(w / w_a), ln(h / h_a))`.
pub fn encode_box(anchor: &BBox, target: &BBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (tx, ty) = target.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (tx - ax) / aw,
        (ty - ay) / ah,
        (target.width() / aw).ln(),
        (target.height() / ah).ln(),
    ]
}

/// Applies regression deltas to `anchor`. Inverse of [`encode_box`].
pub fn decode_box(anchor: &BBox, deltas: &[f64]) -> Result<BBox> {
    if deltas.len() != 4 {
        return Err(Error::Dimension {
            expected: 4,
            got: deltas.len(),
        });
    }
    if !deltas.iter().all(|d| d.is_finite()) {
        return Err(Error::NonFinite(format!("box deltas {deltas:?}")));
    }
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + deltas[0] * aw;
    let cy = ay + deltas[1] * ah;
    let w = aw * deltas[2].exp();
    let h = ah * deltas[3].exp();
    BBox::from_center(cx, cy, w, h)
        .map_err(|_| Error::NonFinite(format!("decoded box from deltas {deltas:?}")))
}
