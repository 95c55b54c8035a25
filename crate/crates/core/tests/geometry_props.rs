use proptest::prelude::*;
use sparsedet3d::geometry::{iou3d, Box3D};
use sparsedet3d::losses::{focal_loss, smooth_l1, soft_bce_logits};
use sparsedet3d::Matrix;

fn boxes() -> impl Strategy<Value = Box3D> {
    ((-2.0f64..2.0, -2.0f64..2.0, -1.0f64..1.0), (0.2f64..2.0, 0.2f64..2.0, 0.2f64..2.0), -3.1f64..3.1)
        .prop_map(|(c, d, t)| Box3D::new([c.0, c.1, c.2], [d.0, d.1, d.2], t).unwrap())
}

fn moved(b: &Box3D, phi: f64, t: [f64; 3]) -> Box3D {
    let (s, c) = phi.sin_cos();
    let center = [c * b.cx - s * b.cy + t[0], s * b.cx + c * b.cy + t[1], b.cz + t[2]];
    Box3D::new(center, b.dims(), b.theta + phi).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in boxes(), b in boxes()) {
        let ab = iou3d(&a, &b);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - iou3d(&b, &a)).abs() < 1e-12);
        prop_assert!((iou3d(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_invariant_under_rigid_motion(
        a in boxes(),
        b in boxes(),
        phi in -3.1f64..3.1,
        t in (-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0),
    ) {
        let t = [t.0, t.1, t.2];
        prop_assert!((iou3d(&a, &b) - iou3d(&moved(&a, phi, t), &moved(&b, phi, t))).abs() < 1e-9);
    }

    #[test]
    fn focal_falls_as_the_true_class_gains(p in 0.01f64..0.98, dp in 0.001f64..0.01) {
        let at = |q: f64| focal_loss(&Matrix::from_vec(1, 1, vec![q]).unwrap(), &[Some(0)], 2.0, 0.25);
        prop_assert!(at(p + dp) < at(p));
        let neg = |q: f64| focal_loss(&Matrix::from_vec(1, 1, vec![q]).unwrap(), &[None], 2.0, 0.25);
        prop_assert!(neg(p + dp) > neg(p));
    }

    #[test]
    fn losses_are_non_negative(
        x in prop::collection::vec(-5.0f64..5.0, 12),
        y in prop::collection::vec(-5.0f64..5.0, 12),
        t in prop::collection::vec(0.0f64..1.0, 12),
        p in prop::collection::vec(0.0f64..1.0, 12),
    ) {
        let a = Matrix::from_vec(4, 3, x.clone()).unwrap();
        let b = Matrix::from_vec(4, 3, y).unwrap();
        prop_assert!(smooth_l1(&a, &b, 1.0).value >= 0.0);
        prop_assert!(soft_bce_logits(&x, &t).0 >= -1e-12);
        let probs = Matrix::from_vec(4, 3, p).unwrap();
        prop_assert!(focal_loss(&probs, &[Some(0), None, Some(2), Some(1)], 2.0, 0.25) >= 0.0);
    }
}

#[test]
fn soft_bce_vanishes_at_the_target() {
    let t = [0.2, 0.5, 0.9];
    let logits: Vec<f64> = t.iter().map(|p: &f64| (p / (1.0 - p)).ln()).collect();
    assert!(soft_bce_logits(&logits, &t).0.abs() < 1e-12);
}
