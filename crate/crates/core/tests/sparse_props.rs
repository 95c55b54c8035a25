use std::collections::BTreeSet;

use proptest::prelude::*;
use sparsedet3d::sparse::{
    build_kernel_map, sparse_conv_forward, strided_downsample_coords, ConvWeights, Coord3, SparseTensor,
};
use sparsedet3d::Matrix;

fn coords(max: usize) -> impl Strategy<Value = Vec<Coord3>> {
    prop::collection::btree_set((-6i32..6, -6i32..6, -6i32..6), 1..max)
        .prop_map(|s| s.into_iter().map(|(x, y, z)| Coord3::new(x, y, z)).collect())
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n)
}

fn tensor(c: &[Coord3], v: &[f64], ch: usize) -> SparseTensor<f64> {
    SparseTensor::new(c.to_vec(), Matrix::from_vec(c.len(), ch, v.to_vec()).unwrap(), 1, [0.1; 3]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear(
        (c, x, y) in coords(40).prop_flat_map(|c| { let n = c.len() * 2; (Just(c), values(n), values(n)) }),
        w in values(27 * 2 * 3),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let wts = ConvWeights::new(3, Matrix::from_vec(27 * 2, 3, w).unwrap(), None).unwrap();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let run = |v: &[f64]| sparse_conv_forward(&tensor(&c, v, 2), &wts, &c, 1, false).unwrap().tensor;
        let (fx, fy, fm) = (run(&x), run(&y), run(&mix));
        for i in 0..fm.feats().as_slice().len() {
            let want = a * fx.feats().as_slice()[i] + b * fy.feats().as_slice()[i];
            prop_assert!((fm.feats().as_slice()[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn conv_commutes_with_translation(
        (c, x) in coords(40).prop_flat_map(|c| { let n = c.len() * 2; (Just(c), values(n)) }),
        w in values(27 * 2 * 2),
        bias in values(2),
        d in (-5i32..5, -5i32..5, -5i32..5),
    ) {
        let delta = Coord3::new(d.0, d.1, d.2);
        let wts = ConvWeights::new(3, Matrix::from_vec(27 * 2, 2, w).unwrap(), Some(bias)).unwrap();
        let t = tensor(&c, &x, 2);
        let moved = t.translated(delta).unwrap();
        let y = sparse_conv_forward(&t, &wts, t.coords(), 1, false).unwrap().tensor;
        let ym = sparse_conv_forward(&moved, &wts, moved.coords(), 1, false).unwrap().tensor;
        prop_assert_eq!(y.feats(), ym.feats());
    }

    #[test]
    fn kernel_map_is_complete(a in coords(30), b in coords(30), k in prop::sample::select(vec![1usize, 3, 5])) {
        let got: BTreeSet<(u32, u32, u32)> = build_kernel_map(&a, &b, k, 1).unwrap().triples().collect();
        let r = (k / 2) as i32;
        for (i, p) in a.iter().enumerate() {
            for (o, q) in b.iter().enumerate() {
                let near = (p.x - q.x).abs() <= r && (p.y - q.y).abs() <= r && (p.z - q.z).abs() <= r;
                let hit = got.iter().any(|t| t.0 == i as u32 && t.1 == o as u32);
                prop_assert_eq!(near, hit);
            }
        }
    }

    #[test]
    fn downsampled_sites_align_and_cover(c in coords(60), f in 1u32..5) {
        let low = strided_downsample_coords(&c, f);
        let set: BTreeSet<Coord3> = low.iter().copied().collect();
        prop_assert_eq!(set.len(), low.len());
        let fi = f as i32;
        for p in &low {
            prop_assert!(p.x.rem_euclid(fi) == 0 && p.y.rem_euclid(fi) == 0 && p.z.rem_euclid(fi) == 0);
        }
        for p in &c {
            prop_assert!(set.contains(&p.floor_to(fi)));
        }
    }
}
