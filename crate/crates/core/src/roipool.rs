//! Stage II: RoI-Conv pooling and box refinement.
//!
//! Block 1 samples a regular grid inside every proposal, merges grid points
//! that quantize to the same voxel, and runs a sparse convolution centered
//! on each point over the backbone voxels, dropping points with no occupied
//! neighbor. Block 2 pools each proposal's block-1 points into one vector
//! with a sparse convolution whose kernel offsets are measured in the
//! proposal's canonical frame, so the pooled feature is invariant to the
//! proposal's pose.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::SparseVar;
use crate::dual::Scalar;
use crate::error::{Error, Result};
use crate::geometry::{iou3d, to_canonical, Box3D};
use crate::losses::BoxDecoder;
use crate::matrix::Matrix;
use crate::nn::{Conv, Linear, ParamStore};
use crate::real::Real;
use crate::sparse::{offset_index, sparse_conv_forward, ConvWeights, Coord3, KernelMap, Layout, SparseTensor};

/// Deduplicated grid points in voxel coordinates and the proposals that
/// generated each one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridSample {
    pub points: Vec<Coord3>,
    pub owners: Vec<Vec<u32>>,
}

/// Local offset of grid cell `i` of `g` along an axis of length `ext`.
fn cell_center(i: usize, g: usize, ext: f64) -> f64 {
    ((2 * i + 1) as f64 / (2 * g) as f64 - 0.5) * ext
}

/// Metric positions of the `G_x·G_y·G_z` grid points of one box, x slowest.
pub fn grid_points(b: &Box3D, resolution: [usize; 3]) -> Vec<[f64; 3]> {
    let [gx, gy, gz] = resolution;
    let mut out = Vec::with_capacity(gx * gy * gz);
    for i in 0..gx {
        for j in 0..gy {
            for k in 0..gz {
                out.push(b.to_world([cell_center(i, gx, b.w), cell_center(j, gy, b.l), cell_center(k, gz, b.h)]));
            }
        }
    }
    out
}

/// Samples every proposal's grid, quantizes it to sites of step `stride`
/// (base cell `voxel_size`) and merges duplicates in first-seen order.
pub fn sample_roi_grid(
    proposals: &[Box3D],
    resolution: [usize; 3],
    stride: u32,
    voxel_size: [f64; 3],
) -> Result<GridSample> {
    if resolution.contains(&0) {
        return Err(Error::invalid("grid resolution components must be positive"));
    }
    let mut index: HashMap<Coord3, usize> = HashMap::new();
    let mut out = GridSample { points: Vec::new(), owners: Vec::new() };
    for (p, b) in proposals.iter().enumerate() {
        for q in grid_points(b, resolution) {
            let c = Coord3::quantize(q, voxel_size).ok_or(Error::CoordRange)?.floor_to(stride as i32);
            let row = *index.entry(c).or_insert_with(|| {
                out.points.push(c);
                out.owners.push(Vec::new());
                out.points.len() - 1
            });
            let owners = &mut out.owners[row];
            if owners.last() != Some(&(p as u32)) {
                owners.push(p as u32);
            }
        }
    }
    Ok(out)
}

/// Coordinates of `points` in the frame of `b`: center at the origin, box
/// axes along the coordinate axes.
pub fn canonical_transform(points: &[[f64; 3]], b: &Box3D) -> Vec<[f64; 3]> {
    points.iter().map(|&p| to_canonical(p, b.center(), b.theta)).collect()
}

/// One sparse abstraction block on plain tensors: sample the grid and
/// convolve centered on every sampled point, dropping unreached points.
pub fn sparse_abstraction<T: Real>(
    input: &SparseTensor<T>,
    proposals: &[Box3D],
    resolution: [usize; 3],
    weights: &ConvWeights<T>,
) -> Result<(SparseTensor<T>, GridSample)> {
    let grid = sample_roi_grid(proposals, resolution, input.stride(), input.voxel_size())?;
    let out = sparse_conv_forward(input, weights, &grid.points, input.stride(), true)?;
    let keep = out.kmap.covered_outputs();
    let mut kept = GridSample { points: Vec::new(), owners: Vec::new() };
    for ((p, o), k) in grid.points.into_iter().zip(grid.owners).zip(keep) {
        if k {
            kept.points.push(p);
            kept.owners.push(o);
        }
    }
    Ok((out.tensor, kept))
}

/// Kernel map pooling block-1 sites into one output row per proposal. Each
/// site is expressed in its owner's canonical frame in units of one grid
/// cell (`dims / resolution`) and assigned the nearest kernel offset,
/// clamped to the kernel's extent.
pub fn canonical_kernel_map(
    sites: &[[f64; 3]],
    owners: &[Vec<u32>],
    proposals: &[Box3D],
    resolution: [usize; 3],
    kernel_size: usize,
) -> Result<KernelMap> {
    let r = (kernel_size as i32 - 1) / 2;
    let mut triples = Vec::new();
    for (i, (&s, own)) in sites.iter().zip(owners).enumerate() {
        for &p in own {
            let b = &proposals[p as usize];
            let q = to_canonical(s, b.center(), b.theta);
            let unit = [b.w / resolution[0] as f64, b.l / resolution[1] as f64, b.h / resolution[2] as f64];
            let off: [i32; 3] = std::array::from_fn(|k| ((q[k] / unit[k]).round() as i32).clamp(-r, r));
            let d = offset_index(kernel_size, Coord3::from(off)).expect("clamped offset");
            triples.push((i as u32, p, d as u32));
        }
    }
    KernelMap::from_triples(sites.len(), proposals.len(), kernel_size, triples)
}

/// Residual target between a proposal and its ground truth.
pub fn encode_residual(p: &Box3D, gt: &Box3D) -> [f64; 8] {
    let d = (p.h * p.h + p.w * p.w + p.l * p.l).sqrt();
    let dt = gt.theta - p.theta;
    [
        (gt.cx - p.cx) / d,
        (gt.cy - p.cy) / d,
        (gt.cz - p.cz) / d,
        (gt.h / p.h).ln(),
        (gt.w / p.w).ln(),
        (gt.l / p.l).ln(),
        dt.sin(),
        dt.cos(),
    ]
}

/// Inverse of [`encode_residual`] as raw box parameters `(cx, cy, cz, w, l, h, θ)`.
pub fn decode_residual<S: Scalar>(p: &Box3D, t: [S; 8]) -> [S; 7] {
    let c = |v: f64| S::cst(v);
    let d = (p.h * p.h + p.w * p.w + p.l * p.l).sqrt();
    [
        c(p.cx) + t[0] * c(d),
        c(p.cy) + t[1] * c(d),
        c(p.cz) + t[2] * c(d),
        c(p.w) * t[4].exp(),
        c(p.l) * t[5].exp(),
        c(p.h) * t[3].exp(),
        c(p.theta) + t[6].atan2(t[7]),
    ]
}

/// Decoded residual as a validated box with wrapped heading.
pub fn decode_residual_box(p: &Box3D, t: [f64; 8]) -> Result<Box3D> {
    Box3D::from_array(decode_residual(p, t))
}

/// Per-row proposals as a [`BoxDecoder`] for residuals.
pub struct ResidualDecoder<'a>(pub &'a [Box3D]);

impl BoxDecoder for ResidualDecoder<'_> {
    fn decode<S: Scalar>(&self, row: usize, raw: [S; 8]) -> [S; 7] {
        decode_residual(&self.0[row], raw)
    }
}

/// A proposal chosen for refinement training with its matched ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selected {
    pub proposal: usize,
    pub gt: usize,
    pub iou: f64,
}

/// Proposals whose best IoU with any ground-truth box exceeds `min_iou`,
/// by descending IoU (stable), at most `max_count`.
pub fn select_training_proposals(proposals: &[Box3D], gt: &[Box3D], min_iou: f64, max_count: usize) -> Vec<Selected> {
    let mut sel: Vec<Selected> = proposals
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let (g, iou) = gt.iter().enumerate().map(|(g, b)| (g, iou3d(p, b))).fold(
                None,
                |best: Option<(usize, f64)>, (g, v)| match best {
                    Some((_, bv)) if bv >= v => best,
                    _ => Some((g, v)),
                },
            )?;
            (iou > min_iou).then_some(Selected { proposal: i, gt: g, iou })
        })
        .collect();
    sel.sort_by(|a, b| b.iou.total_cmp(&a.iou));
    sel.truncate(max_count);
    sel
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiConfig {
    pub feat_channels: usize,
    pub grid1: [usize; 3],
    pub grid2: [usize; 3],
    pub k1: usize,
    pub k2: usize,
    pub block1_channels: usize,
    pub block2_channels: usize,
    pub refine_hidden: usize,
}

/// Pooled features of every proposal.
#[derive(Clone, Debug)]
pub struct RoiFeature {
    pub feats: Var,
    /// Proposals with no occupied voxel near any grid point.
    pub hollow: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct RoiNet {
    pub cfg: RoiConfig,
    block1: Conv,
    block2: Conv,
    hidden: Linear,
    out: Linear,
}

impl RoiNet {
    pub fn new<T: Real, R: Rng>(cfg: RoiConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        if cfg.grid2 != [1, 1, 1] {
            return Err(Error::invalid("the final abstraction block pools to a single point"));
        }
        for k in [cfg.k1, cfg.k2] {
            if k % 2 == 0 {
                return Err(Error::EvenKernel(k));
            }
        }
        let block1 = Conv::new(store, "roi.block1", cfg.k1, cfg.feat_channels, cfg.block1_channels, true, rng)?;
        let block2 = Conv::new(store, "roi.block2", cfg.k2, cfg.block1_channels, cfg.block2_channels, false, rng)?;
        let hidden = Linear::new(store, "roi.refine.hidden", cfg.block2_channels, cfg.refine_hidden, rng)?;
        let out = Linear::new(store, "roi.refine.out", cfg.refine_hidden, 8, rng)?;
        store.get_mut(out.w).scale(T::of(0.1));
        if let Some(b) = out.b {
            store.get_mut(b).set(0, 7, T::one());
        }
        Ok(Self { cfg, block1, block2, hidden, out })
    }

    /// Two-block RoI-Conv pooling of backbone features.
    pub fn pool<T: Real>(&self, t: &mut Tape<'_, T>, backbone: &SparseVar, proposals: &[Box3D]) -> Result<RoiFeature> {
        let lay = &backbone.layout;
        let grid = sample_roi_grid(proposals, self.cfg.grid1, lay.stride(), lay.voxel_size())?;
        let sites = Layout::new(grid.points, lay.stride(), lay.voxel_size())?;
        let kmap = lay.kernel_map(&sites, self.cfg.k1)?;
        let keep = kmap.covered_outputs();
        let kmap = Arc::new(kmap.retain_outputs(&keep));
        let x1 = self.block1.forward(t, backbone.feats, kmap)?;
        let x1 = t.relu(x1);

        let mut centers = Vec::new();
        let mut owners = Vec::new();
        for (i, k) in keep.iter().enumerate() {
            if *k {
                centers.push(sites.center(i));
                owners.push(grid.owners[i].clone());
            }
        }
        let kmap2 = canonical_kernel_map(&centers, &owners, proposals, self.cfg.grid1, self.cfg.k2)?;
        let covered = kmap2.covered_outputs();
        let x2 = self.block2.forward(t, x1, Arc::new(kmap2))?;
        let x2 = t.relu(x2);
        Ok(RoiFeature { feats: x2, hollow: covered.iter().map(|c| !c).collect() })
    }

    /// Residual predictions, one row of eight per proposal.
    pub fn refine<T: Real>(&self, t: &mut Tape<'_, T>, roi: &RoiFeature) -> Result<Var> {
        let h = self.hidden.forward(t, roi.feats)?;
        let h = t.relu(h);
        self.out.forward(t, h)
    }
}

/// Inference-mode pooling and refinement of `proposals` over plain backbone
/// features: returns the pooled features, hollow flags and refined boxes.
pub fn roiconv_pool<T: Real>(
    backbone: &SparseTensor<T>,
    proposals: &[Box3D],
    net: &RoiNet,
    params: &ParamStore<T>,
) -> Result<(Matrix<T>, Vec<bool>, Vec<Box3D>)> {
    if proposals.is_empty() {
        return Err(Error::invalid("RoI pooling needs at least one proposal"));
    }
    let mut t = Tape::new(params);
    let bv = SparseVar { layout: Arc::new(Layout::of(backbone)), feats: t.constant(backbone.feats().clone()) };
    let roi = net.pool(&mut t, &bv, proposals)?;
    let res = net.refine(&mut t, &roi)?;
    let r = t.value(res);
    let boxes = proposals
        .iter()
        .enumerate()
        .map(|(i, p)| decode_residual_box(p, std::array::from_fn(|k| r.get(i, k).as_f64())))
        .collect::<Result<_>>()?;
    Ok((t.value(roi.feats).clone(), roi.hollow, boxes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> Box3D {
        Box3D::new([0.0; 3], [1.0; 3], 0.0).unwrap()
    }

    #[test]
    fn single_cell_grid_hits_the_center() {
        let b = Box3D::new([0.51, 0.33, 0.1], [0.4, 0.2, 0.3], 0.7).unwrap();
        let g = sample_roi_grid(&[b], [1, 1, 1], 1, [0.02; 3]).unwrap();
        assert_eq!(g.points, vec![Coord3::quantize(b.center(), [0.02; 3]).unwrap()]);
        assert_eq!(g.owners, vec![vec![0]]);
    }

    #[test]
    fn identical_proposals_share_points() {
        let b = unit();
        let one = sample_roi_grid(&[b], [7, 7, 7], 2, [0.02; 3]).unwrap();
        let two = sample_roi_grid(&[b, b], [7, 7, 7], 2, [0.02; 3]).unwrap();
        assert_eq!(one.points.len(), 343);
        assert_eq!(two.points, one.points);
        assert!(two.owners.iter().all(|o| o == &vec![0, 1]));
    }

    #[test]
    fn residual_examples() {
        let p = unit();
        assert_eq!(encode_residual(&p, &p), [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let d = 3f64.sqrt();
        let g = Box3D::new([d, 0.0, 0.0], [1.0; 3], 0.0).unwrap();
        assert_eq!(encode_residual(&p, &g)[0], 1.0);
    }

    #[test]
    fn residual_round_trip() {
        let p = Box3D::new([1.0, -2.0, 0.3], [0.7, 1.3, 0.4], 3.0).unwrap();
        let g = Box3D::new([1.2, -1.5, 0.1], [0.5, 1.6, 0.6], -2.9).unwrap();
        let back = decode_residual_box(&p, encode_residual(&p, &g)).unwrap();
        for (a, b) in back.to_array().iter().zip(g.to_array()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn canonical_transform_aligns_corners() {
        let b = Box3D::new([1.0, 2.0, 3.0], [0.6, 1.0, 0.4], 1.1).unwrap();
        let pts = canonical_transform(&crate::geometry::corners(&b), &b);
        for (i, q) in pts.iter().enumerate() {
            let s = |bit: usize| if i & bit != 0 { 0.5 } else { -0.5 };
            let expect = [s(4) * 0.6, s(2) * 1.0, s(1) * 0.4];
            for k in 0..3 {
                assert!((q[k] - expect[k]).abs() < 1e-9);
            }
        }
        assert_eq!(canonical_transform(&[b.center()], &b), vec![[0.0; 3]]);
    }

    #[test]
    fn empty_space_is_hollow() {
        let mut store = ParamStore::<f64>::new();
        let cfg = RoiConfig {
            feat_channels: 2,
            grid1: [7, 7, 7],
            grid2: [1, 1, 1],
            k1: 5,
            k2: 7,
            block1_channels: 3,
            block2_channels: 4,
            refine_hidden: 4,
        };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let net = RoiNet::new(cfg, &mut store, &mut rng).unwrap();
        let x = SparseTensor::new(vec![Coord3::ORIGIN], Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap(), 2, [0.04; 3])
            .unwrap();
        let far = Box3D::new([10.0, 0.0, 0.0], [0.5; 3], 0.0).unwrap();
        let near = Box3D::new([0.04, 0.04, 0.04], [0.5; 3], 0.2).unwrap();
        let (f, hollow, boxes) = roiconv_pool(&x, &[far, near], &net, &store).unwrap();
        assert_eq!(hollow, vec![true, false]);
        assert!(f.row(0).iter().all(|&v| v == 0.0));
        assert_eq!(boxes.len(), 2);
    }

    #[test]
    fn selection_filters_and_caps() {
        let g = unit();
        let near = Box3D::new([0.2, 0.0, 0.0], [1.0; 3], 0.0).unwrap();
        let far = Box3D::new([5.0, 0.0, 0.0], [1.0; 3], 0.0).unwrap();
        let s = select_training_proposals(&[far, near, g], &[g], 0.3, 128);
        assert_eq!(s.iter().map(|s| s.proposal).collect::<Vec<_>>(), vec![2, 1]);
        assert_eq!(select_training_proposals(&[far, near, g], &[g], 0.3, 1).len(), 1);
    }
}
