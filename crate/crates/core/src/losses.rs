//! Training objectives.
//!
//! Every loss returns its value together with the gradient with respect to
//! the raw head outputs it consumes (logits, regression values), evaluated
//! in f64. The tape records them through [`crate::autograd::Tape::loss`].

use serde::{Deserialize, Serialize};

use crate::dual::{Dual, Scalar};
use crate::error::{Error, Result};
use crate::geometry::{iou3d_generic, Box3D};
use crate::matrix::Matrix;

/// Probability clamp used by the cross-entropy style losses.
pub const PROB_EPS: f64 = 1e-7;

pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;

/// Scalar loss value with the gradient of its input.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Matrix<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn focal_term(p: f64, positive: bool, gamma: f64, alpha: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let pt = if positive { p } else { 1.0 - p };
    -alpha * (1.0 - pt).powf(gamma) * pt.ln()
}

/// Focal loss on probabilities, one binary problem per class column.
/// `targets[i]` is the foreground class of row `i` or `None` for background.
/// The per-element terms are summed over classes and averaged over rows.
pub fn focal_loss(probs: &Matrix<f64>, targets: &[Option<usize>], gamma: f64, alpha: f64) -> f64 {
    assert_eq!(probs.rows(), targets.len());
    if probs.rows() == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for (r, t) in targets.iter().enumerate() {
        for (c, &p) in probs.row(r).iter().enumerate() {
            sum += focal_term(p, *t == Some(c), gamma, alpha);
        }
    }
    sum / probs.rows() as f64
}

/// [`focal_loss`] on `sigmoid(logits)` with the gradient for the logits.
/// Clamped probabilities contribute no gradient.
pub fn focal_loss_logits(logits: &Matrix<f64>, targets: &[Option<usize>], gamma: f64, alpha: f64) -> LossGrad {
    assert_eq!(logits.rows(), targets.len());
    let n = logits.rows();
    let mut grad = Matrix::zeros(n, logits.cols());
    if n == 0 {
        return LossGrad { value: 0.0, grad };
    }
    let inv = 1.0 / n as f64;
    let mut sum = 0.0;
    for (r, t) in targets.iter().enumerate() {
        for c in 0..logits.cols() {
            let p = sigmoid(logits.get(r, c));
            let positive = *t == Some(c);
            sum += focal_term(p, positive, gamma, alpha);
            if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
                continue;
            }
            let pt = if positive { p } else { 1.0 - p };
            let q = 1.0 - pt;
            // d/dpt of -α q^γ ln pt
            let mut dpt = -alpha * q.powf(gamma) / pt;
            if gamma != 0.0 {
                dpt += alpha * gamma * q.powf(gamma - 1.0) * pt.ln();
            }
            let dz = p * (1.0 - p) * if positive { 1.0 } else { -1.0 };
            grad.set(r, c, dpt * dz * inv);
        }
    }
    LossGrad { value: sum * inv, grad }
}

/// Binary cross-entropy on probabilities, averaged over elements.
pub fn bce(probs: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(probs.len(), targets.len());
    if probs.is_empty() {
        return 0.0;
    }
    let s: f64 = probs
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    s / probs.len() as f64
}

fn entropy(t: f64) -> f64 {
    let f = |x: f64| if x > 0.0 { -x * x.ln() } else { 0.0 };
    f(t) + f(1.0 - t)
}

/// Cross-entropy between soft targets in `[0, 1]` and `sigmoid(logits)`,
/// offset by the target entropy so that an exact prediction scores zero.
/// Averaged over elements; the gradient is `(σ(z) − t) / n`.
pub fn soft_bce_logits(logits: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), targets.len());
    if logits.is_empty() {
        return (0.0, Vec::new());
    }
    let inv = 1.0 / logits.len() as f64;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &t) in logits.iter().zip(targets) {
        let ce = z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        sum += (ce - entropy(t)).max(0.0);
        grad.push((sigmoid(z) - t) * inv);
    }
    (sum * inv, grad)
}

fn smooth_l1_elem(x: f64, beta: f64) -> (f64, f64) {
    if x.abs() < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (x.abs() - 0.5 * beta, x.signum())
    }
}

/// Smooth-ℓ1 between equally shaped matrices, averaged over elements.
pub fn smooth_l1(pred: &Matrix<f64>, target: &Matrix<f64>, beta: f64) -> LossGrad {
    assert_eq!(pred.shape(), target.shape());
    let n = pred.as_slice().len();
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    if n == 0 {
        return LossGrad { value: 0.0, grad };
    }
    let inv = 1.0 / n as f64;
    let mut sum = 0.0;
    for ((g, &p), &t) in grad.as_mut_slice().iter_mut().zip(pred.as_slice()).zip(target.as_slice()) {
        let (v, d) = smooth_l1_elem(p - t, beta);
        sum += v;
        *g = d * inv;
    }
    LossGrad { value: sum * inv, grad }
}

/// Decoder from eight raw regression values to box parameters, written over
/// [`Scalar`] so the IoU loss can be differentiated through it.
pub trait BoxDecoder {
    fn decode<S: Scalar>(&self, row: usize, raw: [S; 8]) -> [S; 7];
}

/// `1 − IoU(decode(raw_i), gt_i)` averaged over rows, with its gradient for
/// the raw values. Rows whose decoded box is degenerate contribute a loss of
/// one and no gradient.
pub fn iou_loss(raw: &Matrix<f64>, gts: &[Box3D], decoder: &impl BoxDecoder) -> LossGrad {
    assert_eq!(raw.cols(), 8);
    assert_eq!(raw.rows(), gts.len());
    let n = raw.rows();
    let mut grad = Matrix::zeros(n, 8);
    if n == 0 {
        return LossGrad { value: 0.0, grad };
    }
    let inv = 1.0 / n as f64;
    let mut sum = 0.0;
    for (r, gt) in gts.iter().enumerate() {
        let (iou, d) = iou_with_grad(decoder, r, raw.row(r), gt);
        sum += 1.0 - iou;
        for (c, dv) in d.iter().enumerate() {
            grad.set(r, c, -dv * inv);
        }
    }
    LossGrad { value: sum * inv, grad }
}

fn iou_with_grad(decoder: &impl BoxDecoder, row: usize, raw: &[f64], gt: &Box3D) -> (f64, [f64; 8]) {
    let vars: [Dual<8>; 8] = std::array::from_fn(|i| Dual::var(raw[i], i));
    let b = decoder.decode(row, vars);
    if b.iter().any(|v| !v.v.is_finite()) || b[3].v <= 0.0 || b[4].v <= 0.0 || b[5].v <= 0.0 {
        return (0.0, [0.0; 8]);
    }
    let g = gt.to_array().map(Dual::<8>::cst);
    let iou = iou3d_generic(&b, &g);
    let d = if iou.d.iter().all(|v| v.is_finite()) { iou.d } else { [0.0; 8] };
    (iou.v, d)
}

/// Refinement loss: per row the smooth-ℓ1 terms of the eight residual
/// components summed, plus `1 − IoU` of the decoded box, averaged over rows.
pub fn rebox_loss(
    pred: &Matrix<f64>,
    target: &Matrix<f64>,
    gts: &[Box3D],
    decoder: &impl BoxDecoder,
    beta: f64,
) -> LossGrad {
    assert_eq!(pred.shape(), target.shape());
    assert_eq!(pred.cols(), 8);
    let n = pred.rows();
    let mut l1 = smooth_l1(pred, target, beta);
    if n == 0 {
        return l1;
    }
    // smooth_l1 averages over 8n elements; rescale to a per-row sum.
    l1.value *= 8.0;
    l1.grad.scale(8.0);
    let iou = iou_loss(pred, gts, decoder);
    let mut grad = l1.grad;
    grad.add_assign(&iou.grad);
    LossGrad { value: l1.value + iou.value, grad }
}

/// Balancing factors of the total objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub sem: f64,
    pub vote: f64,
    pub cntr: f64,
    pub bbox: f64,
    pub cls: f64,
    pub rebox: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { sem: 1.0, vote: 1.0, cntr: 1.0, bbox: 1.0, cls: 1.0, rebox: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.sem, self.vote, self.cntr, self.bbox, self.cls, self.rebox];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Unweighted loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub sem: f64,
    pub vote: f64,
    pub cntr: f64,
    pub bbox: f64,
    pub cls: f64,
    pub rebox: f64,
}

impl LossTerms {
    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("sem", self.sem),
            ("vote", self.vote),
            ("cntr", self.cntr),
            ("box", self.bbox),
            ("cls", self.cls),
            ("rebox", self.rebox),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: LossTerms,
    pub total: f64,
    /// Foreground voxels supervising the vote term.
    pub n_fg: usize,
    /// Positive head voxels supervising the box and centerness terms.
    pub n_pos: usize,
    /// Proposals supervising the refinement term.
    pub n_roi: usize,
}

/// Weighted sum of the terms, in the fixed order sem, vote, cntr, box, cls, rebox.
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> Result<f64> {
    for (name, v) in terms.named() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term `{name}` is {v}")));
        }
    }
    Ok(w.sem * terms.sem
        + w.vote * terms.vote
        + w.cntr * terms.cntr
        + w.bbox * terms.bbox
        + w.cls * terms.cls
        + w.rebox * terms.rebox)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_matrix(x: &Matrix<f64>, f: impl Fn(&Matrix<f64>) -> f64) -> Matrix<f64> {
        let h = 1e-6;
        let mut g = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.as_slice().len() {
            let mut a = x.clone();
            a.as_mut_slice()[i] += h;
            let up = f(&a);
            a.as_mut_slice()[i] -= 2.0 * h;
            g.as_mut_slice()[i] = (up - f(&a)) / (2.0 * h);
        }
        g
    }

    fn logits() -> Matrix<f64> {
        Matrix::from_rows(&[vec![0.3, -1.2, 2.0], vec![-0.5, 0.1, 0.7], vec![1.5, -2.5, -0.2], vec![0.0, 0.9, -1.1]])
            .unwrap()
    }

    #[test]
    fn focal_reduces_to_cross_entropy() {
        let z = logits();
        let t = [Some(2), None, Some(0), Some(1)];
        let p = z.map(sigmoid);
        let focal = focal_loss(&p, &t, 0.0, 1.0);
        let mut probs = Vec::new();
        let mut tgt = Vec::new();
        for (r, tr) in t.iter().enumerate() {
            for c in 0..3 {
                probs.push(p.get(r, c));
                tgt.push(if *tr == Some(c) { 1.0 } else { 0.0 });
            }
        }
        assert!((focal - 3.0 * bce(&probs, &tgt)).abs() < 1e-10);
    }

    #[test]
    fn focal_vanishes_when_confident() {
        let p = Matrix::from_rows(&[vec![1.0 - PROB_EPS, PROB_EPS]]).unwrap();
        assert!(focal_loss(&p, &[Some(0)], 2.0, 0.25) <= 1e-5);
    }

    #[test]
    fn focal_gradient_matches_differences() {
        let z = logits();
        let t = [Some(2), None, Some(0), Some(1)];
        let a = focal_loss_logits(&z, &t, 2.0, 0.25);
        let num = fd_matrix(&z, |m| focal_loss_logits(m, &t, 2.0, 0.25).value);
        assert!(a.grad.max_rel_diff(&num, 1e-6) < 1e-4);
    }

    #[test]
    fn smooth_l1_branches_agree_at_beta() {
        let p = Matrix::from_rows(&[vec![2.0]]).unwrap();
        let t = Matrix::from_rows(&[vec![0.0]]).unwrap();
        let v = smooth_l1(&p, &t, 2.0).value;
        assert!((v - 1.0).abs() < 1e-15);
        let q = Matrix::from_rows(&[vec![2.0 - 1e-12]]).unwrap();
        assert!((smooth_l1(&q, &t, 2.0).value - 1.0).abs() < 1e-11);
    }

    #[test]
    fn soft_bce_is_zero_at_the_target() {
        let t = [0.2, 0.7, 1.0, 0.0];
        let z: Vec<f64> =
            t.iter().map(|&p: &f64| (p.clamp(1e-12, 1.0 - 1e-12) / (1.0 - p.clamp(1e-12, 1.0 - 1e-12))).ln()).collect();
        let (v, _) = soft_bce_logits(&z, &t);
        assert!(v < 1e-5, "{v}");
    }

    #[test]
    fn total_uses_default_weights() {
        let terms = LossTerms { sem: 1.0, vote: 1.0, cntr: 1.0, bbox: 1.0, cls: 1.0, rebox: 1.0 };
        assert_eq!(total_loss(&terms, &LossWeights::default()).unwrap(), 5.5);
        let bad = LossTerms { cls: f64::NAN, ..terms };
        let err = total_loss(&bad, &LossWeights::default()).unwrap_err();
        assert!(err.to_string().contains("cls"));
    }
}
