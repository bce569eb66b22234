//! Tracking losses: weighted focal classification, L1 and GIoU box
//! regression, and their weighted total with the expert balance term.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-6;
const FOCAL_ALPHA: i32 = 2;
const FOCAL_BETA: i32 = 4;

/// Axis-aligned box in center form, normalized to the search region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match *v {
            [cx, cy, w, h] => Ok(Self::new(cx, cy, w, h)),
            _ => Err(Error::contract(format!("box needs 4 values, got {}", v.len()))),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.w >= 0.0 && self.h >= 0.0
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let [x1, y1, x2, y2] = self.corners();
        let [a1, b1, a2, b2] = other.corners();
        let iw = (x2.min(a2) - x1.max(a1)).max(0.0);
        let ih = (y2.min(b2) - y1.max(b1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

/// Weighted focal loss on a center heatmap and its gradient w.r.t. `pred`.
///
/// Positives (`gt == 1`) contribute `−(1−p)² ln p`; every other location
/// contributes `−(1−gt)⁴ p² ln(1−p)`. The sum is divided by the positive count.
pub fn weighted_focal_with_grad(pred: &Tensor, gt: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != gt.shape() {
        return Err(Error::dim("weighted_focal", pred.shape(), gt.shape()));
    }
    let n_pos = gt.data().iter().filter(|&&v| v == 1.0).count();
    if n_pos == 0 {
        return Err(Error::contract("focal target has no positive location"));
    }
    let norm = n_pos as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(pred.shape().to_vec());
    for ((&p_raw, &y), d) in pred.data().iter().zip(gt.data()).zip(grad.data_mut()) {
        let clamped = p_raw <= PROB_CLAMP || p_raw >= 1.0 - PROB_CLAMP;
        let p = p_raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let (l, dl) = if y == 1.0 {
            let q = 1.0 - p;
            (-q.powi(FOCAL_ALPHA) * p.ln(), 2.0 * q * p.ln() - q * q / p)
        } else {
            let wneg = (1.0 - y).powi(FOCAL_BETA);
            let ln1 = (1.0 - p).ln();
            (
                -wneg * p.powi(FOCAL_ALPHA) * ln1,
                -wneg * (2.0 * p * ln1 - p * p / (1.0 - p)),
            )
        };
        loss += l;
        *d = if clamped { 0.0 } else { dl / norm };
    }
    Ok((loss / norm, grad))
}

pub fn weighted_focal(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    weighted_focal_with_grad(pred, gt).map(|(l, _)| l)
}

/// Focal loss recorded on the tape.
pub fn focal_node(g: &mut Graph, pred: Var, gt: &Tensor) -> Result<Var> {
    let (value, grad) = weighted_focal_with_grad(g.value(pred), gt)?;
    g.scalar_fn(pred, value, grad)
}

/// `1 − GIoU(pred, gt)` and its gradient w.r.t. `pred`'s `(cx, cy, w, h)`.
///
/// When the union is empty IoU is taken as 0; when the enclosing box is empty
/// the enclosure penalty is taken as 0.
pub fn giou_loss_with_grad(pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
    let [x1, y1, x2, y2] = pred.corners();
    let [a1, b1, a2, b2] = gt.corners();
    let (pw, ph) = (x2 - x1, y2 - y1);

    let iw_raw = x2.min(a2) - x1.max(a1);
    let ih_raw = y2.min(b2) - y1.max(b1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    // d/d(x1, y1, x2, y2)
    let d_iw = if iw_raw > 0.0 {
        [
            if x1 >= a1 { -1.0 } else { 0.0 },
            0.0,
            if x2 <= a2 { 1.0 } else { 0.0 },
            0.0,
        ]
    } else {
        [0.0; 4]
    };
    let d_ih = if ih_raw > 0.0 {
        [
            0.0,
            if y1 >= b1 { -1.0 } else { 0.0 },
            0.0,
            if y2 <= b2 { 1.0 } else { 0.0 },
        ]
    } else {
        [0.0; 4]
    };
    let inter = iw * ih;
    let d_inter: [f64; 4] = std::array::from_fn(|i| ih * d_iw[i] + iw * d_ih[i]);

    let area_p = pw * ph;
    let d_area_p = [-ph, -pw, ph, pw];
    let union = area_p + gt.area() - inter;
    let d_union: [f64; 4] = std::array::from_fn(|i| d_area_p[i] - d_inter[i]);

    let (iou, d_iou) = if union > 0.0 {
        (
            inter / union,
            std::array::from_fn(|i| (d_inter[i] * union - inter * d_union[i]) / (union * union)),
        )
    } else {
        (0.0, [0.0; 4])
    };

    let cw = x2.max(a2) - x1.min(a1);
    let ch = y2.max(b2) - y1.min(b1);
    let d_cw = [
        if x1 <= a1 { -1.0 } else { 0.0 },
        0.0,
        if x2 >= a2 { 1.0 } else { 0.0 },
        0.0,
    ];
    let d_ch = [
        0.0,
        if y1 <= b1 { -1.0 } else { 0.0 },
        0.0,
        if y2 >= b2 { 1.0 } else { 0.0 },
    ];
    let enclose = cw * ch;

    // GIoU = IoU − (C − U)/C = IoU − 1 + U/C
    let (giou, d_giou): (f64, [f64; 4]) = if enclose > 0.0 {
        let d_c: [f64; 4] = std::array::from_fn(|i| ch * d_cw[i] + cw * d_ch[i]);
        (
            iou - (enclose - union) / enclose,
            std::array::from_fn(|i| d_iou[i] + (d_union[i] * enclose - union * d_c[i]) / (enclose * enclose)),
        )
    } else {
        (iou, d_iou)
    };

    let d_corner: [f64; 4] = std::array::from_fn(|i| -d_giou[i]);
    let grad = [
        d_corner[0] + d_corner[2],
        d_corner[1] + d_corner[3],
        (d_corner[2] - d_corner[0]) / 2.0,
        (d_corner[3] - d_corner[1]) / 2.0,
    ];
    (1.0 - giou, grad)
}

pub fn giou_loss(pred: &BBox, gt: &BBox) -> f64 {
    giou_loss_with_grad(pred, gt).0
}

/// GIoU loss of a 4-element `(cx, cy, w, h)` prediction node.
pub fn giou_node(g: &mut Graph, pred: Var, gt: &BBox) -> Result<Var> {
    let pv = g.value(pred);
    let b = BBox::from_slice(pv.data())?;
    let (value, grad) = giou_loss_with_grad(&b, gt);
    let grad = Tensor::new(pv.shape().to_vec(), grad.to_vec())?;
    g.scalar_fn(pred, value, grad)
}

/// Mean absolute coordinate difference.
pub fn l1_box_loss(pred: &BBox, gt: &BBox) -> f64 {
    pred.to_array()
        .iter()
        .zip(gt.to_array())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / 4.0
}

pub fn l1_node(g: &mut Graph, pred: Var, gt: &BBox) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    let target = g.constant(Tensor::new(shape, gt.to_array().to_vec())?);
    let diff = g.sub(pred, target)?;
    let abs = g.abs(diff);
    Ok(g.mean(abs))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_iou: f64,
    pub lambda_l1: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_iou: 2.0,
            lambda_l1: 5.0,
            alpha: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_iou", self.lambda_iou),
            ("lambda_l1", self.lambda_l1),
            ("alpha", self.alpha),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
    pub eb: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
    pub eb: f64,
    pub total: f64,
}

/// `cls + λ_iou·iou + λ_L1·l1 + α·eb`.
pub fn total_loss(c: LossComponents, w: &LossWeights) -> Result<LossBundle> {
    for (name, v) in [("cls", c.cls), ("iou", c.iou), ("l1", c.l1), ("eb", c.eb)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss component `{name}` is {v}")));
        }
    }
    Ok(LossBundle {
        cls: c.cls,
        iou: c.iou,
        l1: c.l1,
        eb: c.eb,
        total: c.cls + w.lambda_iou * c.iou + w.lambda_l1 * c.l1 + w.alpha * c.eb,
    })
}

/// Tape version of [`total_loss`].
pub fn total_node(g: &mut Graph, cls: Var, iou: Var, l1: Var, eb: Var, w: &LossWeights) -> Result<Var> {
    let iou = g.scale(iou, w.lambda_iou);
    let l1 = g.scale(l1, w.lambda_l1);
    let eb = g.scale(eb, w.alpha);
    let a = g.add(cls, iou)?;
    let b = g.add(l1, eb)?;
    g.add(a, b)
}
