//! Yaw-oriented 3D boxes: containment, corners and rotated IoU.
//!
//! Box parameters are `(cx, cy, cz, w, l, h, theta)`: `w` spans the box's
//! local x axis, `l` its local y axis, `h` the vertical axis, and `theta`
//! rotates local x towards world y. The IoU routines are generic over
//! [`Scalar`] so they can be differentiated with dual numbers.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dual::Scalar;
use crate::error::{Error, Result};

/// Planar intersections below this area (m²) count as empty.
pub const AREA_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub theta: f64,
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let t = theta.sin().atan2(theta.cos());
    if t <= -PI {
        t + 2.0 * PI
    } else {
        t
    }
}

impl Box3D {
    pub fn new(center: [f64; 3], dims: [f64; 3], theta: f64) -> Result<Self> {
        let b = Self {
            cx: center[0],
            cy: center[1],
            cz: center[2],
            w: dims[0],
            l: dims[1],
            h: dims[2],
            theta: wrap_angle(theta),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn from_array(a: [f64; 7]) -> Result<Self> {
        Self::new([a[0], a[1], a[2]], [a[3], a[4], a[5]], a[6])
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.to_array();
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("box parameters".into()));
        }
        if !(self.w > 0.0 && self.l > 0.0 && self.h > 0.0) {
            return Err(Error::invalid(format!("box dimensions must be positive: {a:?}")));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.cx, self.cy, self.cz, self.w, self.l, self.h, self.theta]
    }

    pub fn center(&self) -> [f64; 3] {
        [self.cx, self.cy, self.cz]
    }

    pub fn dims(&self) -> [f64; 3] {
        [self.w, self.l, self.h]
    }

    pub fn volume(&self) -> f64 {
        self.w * self.l * self.h
    }

    /// Point expressed in the box frame: centered, then rotated by `-theta`.
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        to_canonical(p, self.center(), self.theta)
    }

    /// Point in the box frame mapped back to world coordinates.
    pub fn to_world(&self, q: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.theta.sin_cos();
        [self.cx + c * q[0] - s * q[1], self.cy + s * q[0] + c * q[1], self.cz + q[2]]
    }
}

/// Translate by `-center`, then rotate by `-theta` about the vertical axis.
pub fn to_canonical(p: [f64; 3], center: [f64; 3], theta: f64) -> [f64; 3] {
    let (s, c) = theta.sin_cos();
    let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
    [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
}

/// Closed containment test in the box frame.
pub fn contains(b: &Box3D, p: [f64; 3]) -> bool {
    let q = b.to_local(p);
    q[0].abs() <= 0.5 * b.w && q[1].abs() <= 0.5 * b.l && q[2].abs() <= 0.5 * b.h
}

/// The eight corners, signs `(sx, sy, sz)` enumerated `-` before `+` with
/// z fastest: corner `i` has local offset
/// `(±w/2, ±l/2, ±h/2)` with bit 2 of `i` selecting x, bit 1 y, bit 0 z.
pub fn corners(b: &Box3D) -> [[f64; 3]; 8] {
    let mut out = [[0.0; 3]; 8];
    for (i, c) in out.iter_mut().enumerate() {
        let sx = if i & 4 != 0 { 0.5 } else { -0.5 };
        let sy = if i & 2 != 0 { 0.5 } else { -0.5 };
        let sz = if i & 1 != 0 { 0.5 } else { -0.5 };
        *c = b.to_world([sx * b.w, sy * b.l, sz * b.h]);
    }
    out
}

/// Counter-clockwise footprint of a box given as `(cx, cy, cz, w, l, h, θ)`.
pub fn footprint<S: Scalar>(b: &[S; 7]) -> [[S; 2]; 4] {
    let (s, c) = (b[6].sin(), b[6].cos());
    let hw = b[3] * S::cst(0.5);
    let hl = b[4] * S::cst(0.5);
    let local = [(hw, hl), (-hw, hl), (-hw, -hl), (hw, -hl)];
    local.map(|(u, v)| [b[0] + c * u - s * v, b[1] + s * u + c * v])
}

#[inline]
fn cross<S: Scalar>(o: [S; 2], a: [S; 2], b: [S; 2]) -> S {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Clips a polygon against a convex counter-clockwise polygon.
pub fn clip_convex<S: Scalar>(subject: &[[S; 2]], clip: &[[S; 2]]) -> Vec<[S; 2]> {
    let mut poly = subject.to_vec();
    for e in 0..clip.len() {
        if poly.is_empty() {
            break;
        }
        let (a, b) = (clip[e], clip[(e + 1) % clip.len()]);
        let input = std::mem::take(&mut poly);
        for i in 0..input.len() {
            let p = input[i];
            let q = input[(i + 1) % input.len()];
            let dp = cross(a, b, p);
            let dq = cross(a, b, q);
            let p_in = dp.val() >= 0.0;
            let q_in = dq.val() >= 0.0;
            if p_in {
                poly.push(p);
            }
            if p_in != q_in {
                let t = dp / (dp - dq);
                poly.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    poly
}

/// Shoelace area (positive for counter-clockwise polygons).
pub fn polygon_area<S: Scalar>(poly: &[[S; 2]]) -> S {
    let mut acc = S::cst(0.0);
    for i in 0..poly.len() {
        let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
        acc = acc + (p[0] * q[1] - q[0] * p[1]);
    }
    acc * S::cst(0.5)
}

/// Intersection volume of two boxes.
pub fn intersection_volume<S: Scalar>(a: &[S; 7], b: &[S; 7]) -> S {
    let zero = S::cst(0.0);
    let half = S::cst(0.5);
    let top = (a[2] + a[5] * half).min(b[2] + b[5] * half);
    let bottom = (a[2] - a[5] * half).max(b[2] - b[5] * half);
    let dz = top - bottom;
    if dz.val() <= 0.0 {
        return zero;
    }
    // Circumscribed circles that do not touch cannot overlap.
    let (ddx, ddy) = (a[0].val() - b[0].val(), a[1].val() - b[1].val());
    let ra = 0.5 * a[3].val().hypot(a[4].val());
    let rb = 0.5 * b[3].val().hypot(b[4].val());
    if ddx * ddx + ddy * ddy > (ra + rb) * (ra + rb) {
        return zero;
    }
    let poly = clip_convex(&footprint(a), &footprint(b));
    if poly.len() < 3 {
        return zero;
    }
    let area = polygon_area(&poly);
    if area.val() <= AREA_EPS {
        return zero;
    }
    area * dz
}

/// Rotated 3D IoU over generic scalars.
pub fn iou3d_generic<S: Scalar>(a: &[S; 7], b: &[S; 7]) -> S {
    let inter = intersection_volume(a, b);
    if inter.val() <= 0.0 {
        return S::cst(0.0);
    }
    let va = a[3] * a[4] * a[5];
    let vb = b[3] * b[4] * b[5];
    let iou = inter / (va + vb - inter);
    if iou.val() > 1.0 {
        S::cst(1.0)
    } else {
        iou
    }
}

/// Rotated 3D IoU in `[0, 1]`.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    iou3d_generic(&a.to_array(), &b.to_array())
}

/// Centerness of a point with respect to a box: the cube root of the product
/// over axes of `min(d⁻, d⁺) / max(d⁻, d⁺)`, with `d±` the distances to the
/// two opposing faces in the box frame. 1 at the center, 0 on or beyond a face.
pub fn centerness(b: &Box3D, p: [f64; 3]) -> f64 {
    let q = b.to_local(p);
    let mut prod = 1.0;
    for (v, ext) in q.into_iter().zip([b.w, b.l, b.h]) {
        let lo = 0.5 * ext + v;
        let hi = 0.5 * ext - v;
        if lo <= 0.0 || hi <= 0.0 {
            return 0.0;
        }
        prod *= lo.min(hi) / lo.max(hi);
    }
    prod.cbrt().clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(center: [f64; 3], theta: f64) -> Box3D {
        Box3D::new(center, [1.0; 3], theta).unwrap()
    }

    #[test]
    fn containment_is_closed() {
        let b = unit([0.0; 3], 0.0);
        assert!(contains(&b, [0.0; 3]));
        assert!(contains(&b, [0.5, 0.0, 0.0]));
        assert!(contains(&b, [0.5, -0.5, 0.5]));
        assert!(!contains(&b, [0.5000001, 0.0, 0.0]));
    }

    #[test]
    fn self_iou_and_half_overlap() {
        let a = unit([0.0; 3], 0.3);
        assert!((iou3d(&a, &a) - 1.0).abs() < 1e-12);
        let b = unit([0.0; 3], 0.0);
        let c = unit([0.5, 0.0, 0.0], 0.0);
        assert!((iou3d(&b, &c) - 1.0 / 3.0).abs() < 1e-12);
        let far = unit([5.0, 0.0, 0.0], 0.0);
        assert_eq!(iou3d(&b, &far), 0.0);
    }

    #[test]
    fn unit_cube_corners() {
        let c = corners(&unit([0.0; 3], 0.0));
        assert_eq!(c[0], [-0.5, -0.5, -0.5]);
        assert_eq!(c[1], [-0.5, -0.5, 0.5]);
        assert_eq!(c[2], [-0.5, 0.5, -0.5]);
        assert_eq!(c[7], [0.5, 0.5, 0.5]);
    }

    #[test]
    fn quarter_turn_permutes_corners() {
        let b = Box3D::new([0.0; 3], [2.0, 1.0, 1.0], 0.0).unwrap();
        let r = Box3D { theta: std::f64::consts::FRAC_PI_2, ..b };
        let (c0, c1) = (corners(&b), corners(&r));
        for (p, q) in c0.iter().zip(&c1) {
            // (x, y) -> (-y, x)
            assert!((q[0] + p[1]).abs() < 1e-12 && (q[1] - p[0]).abs() < 1e-12);
            assert_eq!(q[2], p[2]);
        }
    }

    #[test]
    fn angle_wrapping() {
        assert!((wrap_angle(PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!(Box3D::new([0.0; 3], [1.0, 0.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn centerness_extremes() {
        let b = Box3D::new([1.0, 2.0, 3.0], [2.0, 1.0, 0.5], 0.4).unwrap();
        assert!((centerness(&b, b.center()) - 1.0).abs() < 1e-12);
        let face = b.to_world([1.0, 0.0, 0.0]);
        assert!(centerness(&b, face) < 1e-6);
        let q = centerness(&b, b.to_world([0.5, 0.0, 0.0]));
        assert!((q - (1.0f64 / 3.0).cbrt()).abs() < 1e-12);
    }
}
