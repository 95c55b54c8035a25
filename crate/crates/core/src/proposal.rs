//! Stage I: voting, semantic scoring, class-aware grouping and proposals.
//!
//! Every backbone voxel votes for its object center and predicts one
//! independent probability per class. For each class the votes scoring
//! above `tau` are re-voxelized on a grid sized `alpha` times the class's
//! average box, aggregated by a class-specific sparse convolution, and fed
//! to a head shared by all classes that predicts boxes, class logits and
//! centerness.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::SparseVar;
use crate::dual::Scalar;
use crate::error::{Error, Result};
use crate::geometry::{contains, iou3d, Box3D};
use crate::losses::BoxDecoder;
use crate::matrix::Matrix;
use crate::nn::{Conv, Linear, ParamStore};
use crate::real::Real;
use crate::sparse::{Coord3, Layout, SparseTensor};
use crate::voxel::{class_cell, quantize_points, ClassSizeTable, PointCloud};

pub const TAU_INIT: f64 = 0.15;
pub const TAU_STEP: f64 = 0.02;
pub const TAU_MIN: f64 = 0.05;

/// Schedule of the semantic threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetPreset {
    /// Decays every 10 epochs.
    ScanNet,
    /// Decays every 4 epochs.
    SunRgbd,
}

impl DatasetPreset {
    pub fn decay_period(self) -> u32 {
        match self {
            Self::ScanNet => 10,
            Self::SunRgbd => 4,
        }
    }
}

impl std::str::FromStr for DatasetPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scannet" => Ok(Self::ScanNet),
            "sunrgbd" => Ok(Self::SunRgbd),
            _ => Err(Error::Parse(format!("unknown dataset preset `{s}`"))),
        }
    }
}

impl std::fmt::Display for DatasetPreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ScanNet => "scannet",
            Self::SunRgbd => "sunrgbd",
        })
    }
}

/// Threshold for `epoch`: starts at 0.15, drops by 0.02 per decay period,
/// never below 0.05.
pub fn tau_schedule(epoch: u32, preset: DatasetPreset) -> f64 {
    tau_schedule_with(epoch, preset.decay_period(), TAU_INIT, TAU_STEP, TAU_MIN)
}

/// General form of [`tau_schedule`]. Values are computed on a 1e-2 grid so
/// the defaults come out as the exact decimals.
pub fn tau_schedule_with(epoch: u32, period: u32, init: f64, step: f64, min: f64) -> f64 {
    let k = (epoch / period.max(1)) as f64;
    let v = ((init * 100.0) - k * (step * 100.0)) / 100.0;
    v.max(min)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    pub n_class: usize,
    /// Width of the backbone features.
    pub feat_channels: usize,
    pub vote_hidden: usize,
    pub group_channels: usize,
    /// Grouping kernel size.
    pub k_a: usize,
    /// Re-voxelization scale factor.
    pub alpha: f64,
}

/// Per-voxel vote offsets in meters and feature offsets.
#[derive(Clone, Debug)]
pub struct VoteOutput<T> {
    pub delta_x: Matrix<T>,
    pub delta_f: Matrix<T>,
}

/// Ground truth for every backbone voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelTargets {
    pub class_id: Vec<Option<usize>>,
    pub center_offset: Vec<Option<[f64; 3]>>,
    pub box_id: Vec<Option<usize>>,
}

impl VoxelTargets {
    pub fn n_foreground(&self) -> usize {
        self.box_id.iter().flatten().count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: Box3D,
    pub score: f64,
    pub class_id: usize,
    pub centerness: f64,
    /// Sigmoid class probabilities.
    pub class_scores: Vec<f64>,
}

/// Index of the smallest box containing `p`, ties going to the lower index.
pub fn min_volume_box(gt: &[(Box3D, usize)], p: [f64; 3]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, (b, _)) in gt.iter().enumerate() {
        let r = 0.5 * (b.w.hypot(b.l));
        if (p[0] - b.cx).abs() > r || (p[1] - b.cy).abs() > r || (p[2] - b.cz).abs() > 0.5 * b.h {
            continue;
        }
        if contains(b, p) {
            let v = b.volume();
            if best.is_none_or(|(_, bv)| v < bv) {
                best = Some((k, v));
            }
        }
    }
    best.map(|(k, _)| k)
}

/// Assigns each voxel center the smallest ground-truth box containing it.
pub fn assign_targets(centers: &[[f64; 3]], gt: &[(Box3D, usize)]) -> VoxelTargets {
    let mut t = VoxelTargets {
        class_id: Vec::with_capacity(centers.len()),
        center_offset: Vec::with_capacity(centers.len()),
        box_id: Vec::with_capacity(centers.len()),
    };
    for &p in centers {
        match min_volume_box(gt, p) {
            Some(k) => {
                let b = &gt[k].0;
                t.class_id.push(Some(gt[k].1));
                t.center_offset.push(Some([b.cx - p[0], b.cy - p[1], b.cz - p[2]]));
                t.box_id.push(Some(k));
            }
            None => {
                t.class_id.push(None);
                t.center_offset.push(None);
                t.box_id.push(None);
            }
        }
    }
    t
}

/// Metric centers of all sites of a layout.
pub fn layout_centers(layout: &Layout) -> Vec<[f64; 3]> {
    (0..layout.len()).map(|i| layout.center(i)).collect()
}

/// Indices of the votes whose class-`j` score exceeds `tau`.
pub fn slice_class<T: Real>(scores: &Matrix<T>, class_id: usize, tau: f64) -> Vec<u32> {
    (0..scores.rows()).filter(|&i| scores.get(i, class_id).as_f64() > tau).map(|i| i as u32).collect()
}

/// Reference frame of one class-grid voxel for box encoding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub center: [f64; 3],
    pub cell: [f64; 3],
    /// Class prior dimensions `(w, l, h)`.
    pub prior: [f64; 3],
}

/// Stage-I regression target: center offset in cell units, log size ratios
/// against the class prior `(w, l, h)`, and the heading as `(sin, cos)`.
pub fn encode_stage1(a: &Anchor, b: &Box3D) -> [f64; 8] {
    let c = b.center();
    let d = b.dims();
    [
        (c[0] - a.center[0]) / a.cell[0],
        (c[1] - a.center[1]) / a.cell[1],
        (c[2] - a.center[2]) / a.cell[2],
        (d[0] / a.prior[0]).ln(),
        (d[1] / a.prior[1]).ln(),
        (d[2] / a.prior[2]).ln(),
        b.theta.sin(),
        b.theta.cos(),
    ]
}

/// Inverse of [`encode_stage1`] as raw box parameters.
pub fn decode_stage1<S: Scalar>(a: &Anchor, r: [S; 8]) -> [S; 7] {
    let c = |v: f64| S::cst(v);
    [
        c(a.center[0]) + r[0] * c(a.cell[0]),
        c(a.center[1]) + r[1] * c(a.cell[1]),
        c(a.center[2]) + r[2] * c(a.cell[2]),
        c(a.prior[0]) * r[3].exp(),
        c(a.prior[1]) * r[4].exp(),
        c(a.prior[2]) * r[5].exp(),
        r[6].atan2(r[7]),
    ]
}

/// Per-row anchors as a [`BoxDecoder`].
pub struct AnchorDecoder<'a>(pub &'a [Anchor]);

impl BoxDecoder for AnchorDecoder<'_> {
    fn decode<S: Scalar>(&self, row: usize, raw: [S; 8]) -> [S; 7] {
        decode_stage1(&self.0[row], raw)
    }
}

/// Greedy suppression in descending score order (stable for ties) after
/// dropping scores below `score_min`. Class-agnostic.
pub fn filter_nms(proposals: &[Proposal], score_min: f64, iou_thresh: f64) -> Vec<Proposal> {
    let keep = nms_indices(&proposals.iter().map(|p| (p.bbox, p.score)).collect::<Vec<_>>(), score_min, iou_thresh);
    keep.into_iter().map(|i| proposals[i].clone()).collect()
}

/// Indices kept by [`filter_nms`], in output order.
pub fn nms_indices(boxes: &[(Box3D, f64)], score_min: f64, iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).filter(|&i| boxes[i].1 >= score_min).collect();
    order.sort_by(|&a, &b| boxes[b].1.total_cmp(&boxes[a].1));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou3d(&boxes[k].0, &boxes[i].0) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}

/// Raw head outputs of one class group with its anchors.
#[derive(Clone, Debug)]
pub struct HeadRows {
    pub cls: Matrix<f64>,
    pub reg: Matrix<f64>,
    pub ctr: Matrix<f64>,
    pub anchors: Vec<Anchor>,
}

/// Stage-I head losses with gradients per group, aligned with the input.
#[derive(Clone, Debug)]
pub struct StageOneLosses {
    pub cls: f64,
    pub cntr: f64,
    pub bbox: f64,
    pub n_rows: usize,
    pub n_pos: usize,
    /// `(d cls, d reg, d ctr)` per group.
    pub grads: Vec<(Matrix<f64>, Matrix<f64>, Matrix<f64>)>,
}

/// Classification, centerness and box losses of the shared head.
///
/// An anchor is positive when its center lies in a ground-truth box; the
/// smallest such box is its target. `cls` is the focal loss over all rows,
/// `cntr` and `bbox` are averaged over positives and are 0 without any.
pub fn stage1_losses(heads: &[HeadRows], gt: &[(Box3D, usize)], gamma: f64, alpha: f64) -> StageOneLosses {
    let n_rows: usize = heads.iter().map(|h| h.anchors.len()).sum();
    let assigned: Vec<Vec<Option<usize>>> =
        heads.iter().map(|h| h.anchors.iter().map(|a| min_volume_box(gt, a.center)).collect()).collect();
    let n_pos: usize = assigned.iter().map(|a| a.iter().flatten().count()).sum();
    let mut out = StageOneLosses { cls: 0.0, cntr: 0.0, bbox: 0.0, n_rows, n_pos, grads: Vec::new() };
    for (h, asg) in heads.iter().zip(&assigned) {
        let n = h.anchors.len();
        let mut d_cls = Matrix::zeros(n, h.cls.cols());
        let mut d_reg = Matrix::zeros(n, 8);
        let mut d_ctr = Matrix::zeros(n, 1);
        if n > 0 {
            let share = n as f64 / n_rows as f64;
            let targets: Vec<Option<usize>> = asg.iter().map(|a| a.map(|k| gt[k].1)).collect();
            let l = crate::losses::focal_loss_logits(&h.cls, &targets, gamma, alpha);
            out.cls += l.value * share;
            d_cls = l.grad;
            d_cls.scale(share);
        }
        let pos: Vec<usize> = (0..n).filter(|&i| asg[i].is_some()).collect();
        if !pos.is_empty() {
            let pshare = pos.len() as f64 / n_pos as f64;
            let target = |i: usize| &gt[asg[i].expect("positive")].0;
            let logits: Vec<f64> = pos.iter().map(|&i| h.ctr.get(i, 0)).collect();
            let ctr_t: Vec<f64> =
                pos.iter().map(|&i| crate::geometry::centerness(target(i), h.anchors[i].center)).collect();
            let (v, d) = crate::losses::soft_bce_logits(&logits, &ctr_t);
            out.cntr += v * pshare;
            for (k, &i) in pos.iter().enumerate() {
                d_ctr.set(i, 0, d[k] * pshare);
            }
            let raw = Matrix::from_fn(pos.len(), 8, |r, c| h.reg.get(pos[r], c));
            let gts: Vec<Box3D> = pos.iter().map(|&i| *target(i)).collect();
            let anc: Vec<Anchor> = pos.iter().map(|&i| h.anchors[i]).collect();
            let l = crate::losses::iou_loss(&raw, &gts, &AnchorDecoder(&anc));
            out.bbox += l.value * pshare;
            for (k, &i) in pos.iter().enumerate() {
                for c in 0..8 {
                    d_reg.set(i, c, l.grad.get(k, c) * pshare);
                }
            }
        }
        out.grads.push((d_cls, d_reg, d_ctr));
    }
    out
}

/// Learnable parts of stage I.
#[derive(Clone, Debug)]
pub struct ProposalNet {
    pub cfg: ProposalConfig,
    vote_hidden: Linear,
    vote_out: Linear,
    semantic: Linear,
    group: Vec<Conv>,
    head_cls: Linear,
    head_reg: Linear,
    head_ctr: Linear,
}

/// Aggregated votes of one class on its grid, with the shared head outputs.
#[derive(Clone, Debug)]
pub struct ClassGroup {
    pub class_id: usize,
    pub cell: [f64; 3],
    pub layout: Arc<Layout>,
    /// Vote indices pooled into each class voxel.
    pub members: Arc<Vec<Vec<u32>>>,
    pub feats: Var,
    pub cls: Var,
    pub reg: Var,
    pub ctr: Var,
}

impl ClassGroup {
    pub fn anchors(&self, sizes: &ClassSizeTable) -> Result<Vec<Anchor>> {
        let prior = sizes.get(self.class_id)?;
        Ok((0..self.layout.len()).map(|i| Anchor { center: self.layout.center(i), cell: self.cell, prior }).collect())
    }
}

/// Everything stage I records on the tape for one scene.
#[derive(Clone, Debug)]
pub struct StageOne {
    pub delta_x: Var,
    pub vote_feats: Var,
    pub sem_logits: Var,
    pub sem_scores: Var,
    pub voxel_centers: Vec<[f64; 3]>,
    pub vote_positions: Vec<[f64; 3]>,
    pub groups: Vec<ClassGroup>,
}

impl ProposalNet {
    pub fn new<T: Real, R: Rng>(cfg: ProposalConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        if cfg.n_class == 0 || cfg.feat_channels == 0 || cfg.vote_hidden == 0 || cfg.group_channels == 0 {
            return Err(Error::invalid("stage-I widths must be positive"));
        }
        if cfg.k_a.is_multiple_of(2) {
            return Err(Error::EvenKernel(cfg.k_a));
        }
        let c = cfg.feat_channels;
        let vote_hidden = Linear::new(store, "proposal.vote.hidden", c, cfg.vote_hidden, rng)?;
        let vote_out = Linear::new(store, "proposal.vote.out", cfg.vote_hidden, 3 + c, rng)?;
        scale_param(store, vote_out.w, 0.1);
        let semantic = Linear::new(store, "proposal.semantic", c, cfg.n_class, rng)?;
        let group = (0..cfg.n_class)
            .map(|j| Conv::new(store, &format!("proposal.group{j}"), cfg.k_a, c, cfg.group_channels, true, rng))
            .collect::<Result<Vec<_>>>()?;
        for g in &group {
            scale_param(store, g.w, 0.5);
        }
        let g = cfg.group_channels;
        let head_cls = Linear::new(store, "proposal.head.cls", g, cfg.n_class, rng)?;
        let head_reg = Linear::new(store, "proposal.head.reg", g, 8, rng)?;
        let head_ctr = Linear::new(store, "proposal.head.ctr", g, 1, rng)?;
        for l in [head_cls, head_reg, head_ctr] {
            scale_param(store, l.w, 0.1);
        }
        let prior = -(1.0f64 - 0.01).ln() + 0.01f64.ln();
        if let Some(b) = head_cls.b {
            *store.get_mut(b) = Matrix::from_fn(1, cfg.n_class, |_, _| T::of(prior));
        }
        Ok(Self { cfg, vote_hidden, vote_out, semantic, group, head_cls, head_reg, head_ctr })
    }

    /// Per-voxel vote and feature offsets.
    pub fn vote<T: Real>(&self, t: &mut Tape<'_, T>, feats: Var) -> Result<(Var, Var)> {
        let h = self.vote_hidden.forward(t, feats)?;
        let h = t.relu(h);
        let out = self.vote_out.forward(t, h)?;
        let dx = t.slice_cols(out, 0, 3)?;
        let df = t.slice_cols(out, 3, 3 + self.cfg.feat_channels)?;
        Ok((dx, df))
    }

    /// Per-voxel class logits.
    pub fn semantic<T: Real>(&self, t: &mut Tape<'_, T>, feats: Var) -> Result<Var> {
        self.semantic.forward(t, feats)
    }

    /// Re-voxelizes class `class_id`'s slice of the votes and aggregates it.
    /// Returns `None` for an empty slice.
    #[allow(clippy::too_many_arguments)]
    pub fn group_class<T: Real>(
        &self,
        t: &mut Tape<'_, T>,
        class_id: usize,
        slice: &[u32],
        positions: &[[f64; 3]],
        vote_feats: Var,
        sizes: &ClassSizeTable,
    ) -> Result<Option<ClassGroup>> {
        if slice.is_empty() {
            return Ok(None);
        }
        let cell = class_cell(sizes, class_id, self.cfg.alpha)?;
        let pts: Vec<[f64; 3]> = slice.iter().map(|&i| positions[i as usize]).collect();
        let q = quantize_points(&pts, cell)?;
        let members: Vec<Vec<u32>> = q.members.iter().map(|m| m.iter().map(|&k| slice[k as usize]).collect()).collect();
        let members = Arc::new(members);
        let layout = Arc::new(Layout::new(q.coords, 1, cell)?);
        let pooled = t.segment_mean(vote_feats, members.clone())?;
        let kmap = Arc::new(layout.kernel_map(&layout, self.cfg.k_a)?);
        let a = self.group[class_id].forward(t, pooled, kmap)?;
        let a = t.relu(a);
        let cls = self.head_cls.forward(t, a)?;
        let reg = self.head_reg.forward(t, a)?;
        let ctr = self.head_ctr.forward(t, a)?;
        Ok(Some(ClassGroup { class_id, cell, layout, members, feats: a, cls, reg, ctr }))
    }

    /// Full stage-I forward pass over backbone features.
    pub fn forward<T: Real>(
        &self,
        t: &mut Tape<'_, T>,
        backbone: &SparseVar,
        tau: f64,
        sizes: &ClassSizeTable,
    ) -> Result<StageOne> {
        if sizes.n_class() != self.cfg.n_class {
            return Err(Error::shape("class size table does not match the class count"));
        }
        let (delta_x, delta_f) = self.vote(t, backbone.feats)?;
        let vote_feats = t.add(backbone.feats, delta_f)?;
        let sem_logits = self.semantic(t, backbone.feats)?;
        let sem_scores = t.sigmoid(sem_logits);
        let voxel_centers = layout_centers(&backbone.layout);
        let dx = t.value(delta_x);
        let vote_positions: Vec<[f64; 3]> = voxel_centers
            .iter()
            .enumerate()
            .map(|(i, c)| std::array::from_fn(|k| c[k] + dx.get(i, k).as_f64()))
            .collect();
        let mut groups = Vec::new();
        for j in 0..self.cfg.n_class {
            let slice = slice_class(t.value(sem_scores), j, tau);
            if let Some(g) = self.group_class(t, j, &slice, &vote_positions, vote_feats, sizes)? {
                groups.push(g);
            }
        }
        Ok(StageOne { delta_x, vote_feats, sem_logits, sem_scores, voxel_centers, vote_positions, groups })
    }

    /// Decodes every class voxel into a proposal.
    pub fn proposals<T: Real>(
        &self,
        t: &Tape<'_, T>,
        groups: &[ClassGroup],
        sizes: &ClassSizeTable,
    ) -> Result<Vec<Proposal>> {
        let mut out = Vec::new();
        for g in groups {
            let anchors = g.anchors(sizes)?;
            let (cls, reg, ctr) = (t.value(g.cls), t.value(g.reg), t.value(g.ctr));
            for (i, a) in anchors.iter().enumerate() {
                let raw: [f64; 8] = std::array::from_fn(|k| reg.get(i, k).as_f64());
                let b = decode_stage1(a, raw);
                let Ok(bbox) = Box3D::from_array(b) else { continue };
                let class_scores: Vec<f64> = cls.row(i).iter().map(|v| sigmoid(v.as_f64())).collect();
                let (class_id, &best) = class_scores
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                    .expect("at least one class");
                let centerness = sigmoid(ctr.get(i, 0).as_f64());
                out.push(Proposal { bbox, score: best * centerness, class_id, centerness, class_scores });
            }
        }
        Ok(out)
    }
}

fn scale_param<T: Real>(store: &mut ParamStore<T>, id: crate::nn::ParamId, s: f64) {
    store.get_mut(id).scale(T::of(s));
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Inference-mode vote prediction on a plain tensor.
pub fn vote_forward<T: Real>(
    feats: &SparseTensor<T>,
    net: &ProposalNet,
    params: &ParamStore<T>,
) -> Result<VoteOutput<T>> {
    let mut t = Tape::new(params);
    let x = t.constant(feats.feats().clone());
    let (dx, df) = net.vote(&mut t, x)?;
    Ok(VoteOutput { delta_x: t.value(dx).clone(), delta_f: t.value(df).clone() })
}

/// Inference-mode semantic probabilities on a plain tensor.
pub fn semantic_forward<T: Real>(
    feats: &SparseTensor<T>,
    net: &ProposalNet,
    params: &ParamStore<T>,
) -> Result<Matrix<T>> {
    let mut t = Tape::new(params);
    let x = t.constant(feats.feats().clone());
    let l = net.semantic(&mut t, x)?;
    let s = t.sigmoid(l);
    Ok(t.value(s).clone())
}

/// Class-aware grouping of explicit votes: one aggregated tensor per class
/// (empty when no vote passes `tau`).
pub fn class_aware_group<T: Real>(
    votes: &PointCloud,
    scores: &Matrix<T>,
    tau: f64,
    sizes: &ClassSizeTable,
    net: &ProposalNet,
    params: &ParamStore<T>,
) -> Result<Vec<SparseTensor<T>>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("threshold {tau} must lie in (0, 1)")));
    }
    let feats = votes.features.as_ref().ok_or_else(|| Error::shape("votes need features for grouping"))?;
    if scores.rows() != votes.len() || scores.cols() != net.cfg.n_class {
        return Err(Error::shape("score matrix does not match the votes"));
    }
    let mut t = Tape::new(params);
    let f = t.constant(feats.cast());
    let mut out = Vec::new();
    for j in 0..net.cfg.n_class {
        let slice = slice_class(scores, j, tau);
        let cell = class_cell(sizes, j, net.cfg.alpha)?;
        match net.group_class(&mut t, j, &slice, &votes.positions, f, sizes)? {
            Some(g) => out.push(SparseTensor::new(g.layout.coords().to_vec(), t.value(g.feats).clone(), 1, cell)?),
            None => out.push(SparseTensor::empty(net.cfg.group_channels, 1, cell)?),
        }
    }
    Ok(out)
}

/// Class-grid coordinates occupied by a slice of votes.
pub fn class_voxel_coords(positions: &[[f64; 3]], slice: &[u32], cell: [f64; 3]) -> Result<Vec<Coord3>> {
    let pts: Vec<[f64; 3]> = slice.iter().map(|&i| positions[i as usize]).collect();
    Ok(quantize_points(&pts, cell)?.coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tau_schedule_matches_defaults() {
        assert_eq!(tau_schedule(0, DatasetPreset::ScanNet), 0.15);
        assert_eq!(tau_schedule(9, DatasetPreset::ScanNet), 0.15);
        assert_eq!(tau_schedule(10, DatasetPreset::ScanNet), 0.13);
        assert_eq!(tau_schedule(4, DatasetPreset::SunRgbd), 0.13);
        assert_eq!(tau_schedule(1000, DatasetPreset::ScanNet), 0.05);
        assert!("kitti".parse::<DatasetPreset>().is_err());
    }

    #[test]
    fn nested_boxes_pick_the_smaller() {
        let outer = Box3D::new([0.0; 3], [2.0; 3], 0.0).unwrap();
        let inner = Box3D::new([0.2, 0.0, 0.0], [0.5; 3], 0.3).unwrap();
        let t = assign_targets(&[[0.2, 0.0, 0.0], [0.9, 0.9, 0.9], [5.0, 0.0, 0.0]], &[(outer, 0), (inner, 2)]);
        assert_eq!(t.box_id, vec![Some(1), Some(0), None]);
        assert_eq!(t.class_id, vec![Some(2), Some(0), None]);
        assert_eq!(t.center_offset[0], Some([0.0, 0.0, 0.0]));
        assert_eq!(t.center_offset[2], None);
    }

    #[test]
    fn zero_regression_decodes_to_the_prior_at_the_voxel() {
        let a = Anchor { center: [1.0, 2.0, 0.5], cell: [0.1, 0.2, 0.3], prior: [0.5, 0.7, 0.9] };
        let b = decode_stage1(&a, [0.0; 8]);
        assert_eq!(b, [1.0, 2.0, 0.5, 0.5, 0.7, 0.9, 0.0]);
    }

    #[test]
    fn stage1_round_trip() {
        let a = Anchor { center: [1.0, 2.0, 0.5], cell: [0.1, 0.2, 0.3], prior: [0.5, 0.7, 0.9] };
        let b = Box3D::new([1.3, 1.7, 0.2], [0.4, 1.1, 0.6], -2.5).unwrap();
        let d = Box3D::from_array(decode_stage1(&a, encode_stage1(&a, &b))).unwrap();
        for (x, y) in d.to_array().iter().zip(b.to_array()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn nms_keeps_the_higher_of_identical_boxes() {
        let b = Box3D::new([0.0; 3], [1.0; 3], 0.0).unwrap();
        let p = |s| Proposal { bbox: b, score: s, class_id: 0, centerness: 1.0, class_scores: vec![s] };
        let out = filter_nms(&[p(0.8), p(0.9)], 0.01, 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
        assert_eq!(filter_nms(&[p(0.005)], 0.01, 0.5).len(), 0);
    }

    fn net(store: &mut ParamStore<f64>) -> ProposalNet {
        let cfg =
            ProposalConfig { n_class: 2, feat_channels: 4, vote_hidden: 5, group_channels: 3, k_a: 3, alpha: 0.5 };
        ProposalNet::new(cfg, store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn scores_below_tau_leave_every_class_empty() {
        let mut store = ParamStore::new();
        let n = net(&mut store);
        let sizes = ClassSizeTable::new(vec![[1.0; 3], [2.0; 3]]).unwrap();
        let votes =
            PointCloud::new(vec![[0.0; 3], [1.0; 3]], Some(Matrix::from_fn(2, 4, |r, c| (r + c) as f64))).unwrap();
        let scores = Matrix::from_fn(2, 2, |_, _| 0.1);
        let groups = class_aware_group(&votes, &scores, 0.15, &sizes, &n, &store).unwrap();
        assert!(groups.iter().all(|g| g.is_empty()));
        assert_eq!(groups[1].voxel_size(), [1.0; 3]);
        let scores = Matrix::from_fn(2, 2, |r, c| if r == c { 0.9 } else { 0.0 });
        let groups = class_aware_group(&votes, &scores, 0.15, &sizes, &n, &store).unwrap();
        assert_eq!(groups.iter().map(|g| g.len()).collect::<Vec<_>>(), vec![1, 1]);
    }

    #[test]
    fn zero_vote_parameters_leave_votes_at_voxels() {
        let mut store = ParamStore::new();
        let n = net(&mut store);
        for id in store.ids().collect::<Vec<_>>() {
            let m = store.get(id).map(|_| 0.0);
            *store.get_mut(id) = m;
        }
        let x = SparseTensor::new(vec![Coord3::ORIGIN], Matrix::from_fn(1, 4, |_, c| c as f64), 2, [0.04; 3]).unwrap();
        let v = vote_forward(&x, &n, &store).unwrap();
        assert!(v.delta_x.as_slice().iter().chain(v.delta_f.as_slice()).all(|&a| a == 0.0));
        let s = semantic_forward(&x, &n, &store).unwrap();
        assert!(s.as_slice().iter().all(|&a| a == 0.5));
    }
}
