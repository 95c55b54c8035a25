//! Slow, obviously-correct counterparts of the library kernels.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use sparsedet3d::geometry::{contains, iou3d, Box3D};
use sparsedet3d::sparse::Coord3;

/// Dense 3D convolution over a `dims` grid holding `feats[i]` at `coords[i]`
/// (zeros elsewhere), evaluated at `out`. `kernel[d][ci][co]` follows the
/// z-fastest offset order; `dilation` scales the offsets.
#[allow(clippy::too_many_arguments)]
pub fn dense_conv(
    dims: [usize; 3],
    coords: &[Coord3],
    feats: &[Vec<f64>],
    kernel: &[Vec<Vec<f64>>],
    bias: Option<&[f64]>,
    k: usize,
    dilation: i32,
    out: &[Coord3],
) -> Vec<Vec<f64>> {
    let c_in = feats.first().map_or(0, Vec::len);
    let c_out = kernel[0][0].len();
    let idx = |x: i32, y: i32, z: i32| -> Option<usize> {
        let ok = |v: i32, n: usize| v >= 0 && (v as usize) < n;
        (ok(x, dims[0]) && ok(y, dims[1]) && ok(z, dims[2]))
            .then(|| ((x as usize * dims[1]) + y as usize) * dims[2] + z as usize)
    };
    let mut grid = vec![0.0; dims[0] * dims[1] * dims[2] * c_in];
    for (c, f) in coords.iter().zip(feats) {
        let g = idx(c.x, c.y, c.z).expect("coordinate inside the grid");
        grid[g * c_in..(g + 1) * c_in].copy_from_slice(f);
    }
    let r = (k / 2) as i32;
    out.iter()
        .map(|o| {
            let mut acc = bias.map_or(vec![0.0; c_out], <[f64]>::to_vec);
            let mut d = 0;
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if let Some(g) = idx(o.x + dilation * dx, o.y + dilation * dy, o.z + dilation * dz) {
                            for ci in 0..c_in {
                                let v = grid[g * c_in + ci];
                                if v != 0.0 {
                                    for co in 0..c_out {
                                        acc[co] += kernel[d][ci][co] * v;
                                    }
                                }
                            }
                        }
                        d += 1;
                    }
                }
            }
            acc
        })
        .collect()
}

/// All `(in, out, offset)` triples by a double loop over coordinate pairs.
pub fn brute_kernel_map(input: &[Coord3], out: &[Coord3], k: usize, dilation: i32) -> BTreeSet<(u32, u32, u32)> {
    let r = (k / 2) as i32;
    let mut s = BTreeSet::new();
    for (i, a) in input.iter().enumerate() {
        for (o, b) in out.iter().enumerate() {
            let d = [a.x - b.x, a.y - b.y, a.z - b.z];
            if d.iter().any(|v| v % dilation != 0) {
                continue;
            }
            let d = d.map(|v| v / dilation);
            if d.iter().all(|v| v.abs() <= r) {
                let k = k as i32;
                let off = ((d[0] + r) * k + (d[1] + r)) * k + (d[2] + r);
                s.insert((i as u32, o as u32, off as u32));
            }
        }
    }
    s
}

/// Set of parents `floor(c / f) · f`.
pub fn brute_downsample(coords: &[Coord3], f: i32) -> BTreeSet<Coord3> {
    let fl = |v: i32| (v as f64 / f as f64).floor() as i32 * f;
    coords.iter().map(|c| Coord3::new(fl(c.x), fl(c.y), fl(c.z))).collect()
}

/// Row of the coarse cell enclosing each target, by linear search.
pub fn brute_parent(low: &[Coord3], low_stride: i32, targets: &[Coord3]) -> Vec<Option<usize>> {
    targets
        .iter()
        .map(|t| {
            low.iter().position(|l| {
                (0..3).all(|a| {
                    let (tv, lv) = (t.to_array()[a], l.to_array()[a]);
                    tv >= lv && tv < lv + low_stride
                })
            })
        })
        .collect()
}

/// Central differences of `f` at `x`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let dn = f(&p);
            p[i] = x[i];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

/// `max |a − b| / max |b|`, the normwise relative error of `a` against `b`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// IoU from uniform samples inside `a`: the hit fraction times `vol(a)`
/// estimates the intersection.
pub fn monte_carlo_iou(a: &Box3D, b: &Box3D, samples: usize, rng: &mut impl Rng) -> f64 {
    let (sa, ca) = a.theta.sin_cos();
    let (sb, cb) = b.theta.sin_cos();
    let mut hits = 0usize;
    for _ in 0..samples {
        let u = (rng.random::<f64>() - 0.5) * a.w;
        let v = (rng.random::<f64>() - 0.5) * a.l;
        let z = a.cz + (rng.random::<f64>() - 0.5) * a.h;
        let x = a.cx + ca * u - sa * v - b.cx;
        let y = a.cy + sa * u + ca * v - b.cy;
        let (bu, bv) = (cb * x + sb * y, -sb * x + cb * y);
        hits += (bu.abs() <= 0.5 * b.w && bv.abs() <= 0.5 * b.l && (z - b.cz).abs() <= 0.5 * b.h) as usize;
    }
    let inter = a.volume() * hits as f64 / samples as f64;
    inter / (a.volume() + b.volume() - inter)
}

/// Repeatedly keeps the best remaining box (lowest index on ties) and
/// discards everything overlapping it by more than `thr`.
pub fn brute_nms(boxes: &[(Box3D, f64)], score_min: f64, thr: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..boxes.len()).filter(|&i| boxes[i].1 >= score_min).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if boxes[i].1 > boxes[best].1 || (boxes[i].1 == boxes[best].1 && i < best) {
                best = i;
            }
        }
        kept.push(best);
        alive.retain(|&i| i != best && iou3d(&boxes[best].0, &boxes[i].0) <= thr);
    }
    kept
}

/// For every point, the containing box of least volume (lowest index on
/// ties) by testing every box.
pub fn brute_assign(points: &[[f64; 3]], gt: &[(Box3D, usize)]) -> Vec<Option<usize>> {
    points
        .iter()
        .map(|&p| {
            let mut best: Option<usize> = None;
            for (k, (b, _)) in gt.iter().enumerate() {
                if contains(b, p) && best.is_none_or(|j| b.volume() < gt[j].0.volume()) {
                    best = Some(k);
                }
            }
            best
        })
        .collect()
}

/// Average precision as the area under the monotone precision envelope:
/// for every distinct recall level, the best precision at that recall or
/// beyond, times the recall increment.
pub fn reference_ap(scored: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0).then(a.cmp(&b)));
    let mut points = Vec::new();
    let mut tp = 0;
    for (rank, &i) in order.iter().enumerate() {
        tp += scored[i].1 as usize;
        points.push((tp as f64 / n_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
    levels.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

/// Reference mean AP: per class, detections ranked by score claim the
/// unclaimed same-scene box of highest IoU when it reaches `thr`.
pub fn reference_map(
    preds: &[(String, usize, f64, Box3D)],
    gts: &[(String, Vec<(Box3D, usize)>)],
    n_class: usize,
    thr: f64,
) -> f64 {
    let mut aps = Vec::new();
    for c in 0..n_class {
        let mut pool: HashMap<&str, Vec<(Box3D, bool)>> = HashMap::new();
        for (s, g) in gts {
            pool.entry(s).or_default().extend(g.iter().filter(|x| x.1 == c).map(|x| (x.0, false)));
        }
        let n_gt: usize = pool.values().map(Vec::len).sum();
        if n_gt == 0 {
            continue;
        }
        let mut mine: Vec<&(String, usize, f64, Box3D)> = preds.iter().filter(|p| p.1 == c).collect();
        mine.sort_by(|a, b| b.2.total_cmp(&a.2));
        let mut scored = Vec::new();
        for (rank, p) in mine.iter().enumerate() {
            let mut tp = false;
            if let Some(cands) = pool.get_mut(p.0.as_str()) {
                let mut best: Option<(usize, f64)> = None;
                for (i, (g, _)) in cands.iter().enumerate() {
                    let v = iou3d(&p.3, g);
                    if best.is_none_or(|b| v > b.1) {
                        best = Some((i, v));
                    }
                }
                if let Some((i, v)) = best {
                    if v >= thr && !cands[i].1 {
                        cands[i].1 = true;
                        tp = true;
                    }
                }
            }
            // Scores strictly decrease with rank so the reference order is kept.
            scored.push((-(rank as f64), tp));
        }
        aps.push(reference_ap(&scored, n_gt));
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}
