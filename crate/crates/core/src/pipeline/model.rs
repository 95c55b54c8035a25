//! The assembled two-stage detector: training loss and inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::io::{Detection, SceneRecord};
use crate::autograd::{NormStat, Tape, Var};
use crate::backbone::{Backbone, SparseVar};
use crate::error::{Error, Result};
use crate::geometry::Box3D;
use crate::losses::{focal_loss_logits, rebox_loss, smooth_l1, total_loss, LossReport, LossTerms};
use crate::matrix::Matrix;
use crate::nn::{Grads, Mode, ParamStore};
use crate::proposal::{assign_targets, filter_nms, stage1_losses, HeadRows, Proposal, ProposalNet, StageOne};
use crate::real::Real;
use crate::roipool::{decode_residual_box, encode_residual, select_training_proposals, ResidualDecoder, RoiNet};
use crate::sparse::SparseTensor;
use crate::voxel::{voxelize_avg, ClassSizeTable, PointCloud};

/// Loss value, parameter gradients and normalization statistics of one scene.
#[derive(Clone, Debug)]
pub struct SceneStep<T> {
    pub report: LossReport,
    pub grads: Grads<T>,
    pub norm_stats: Vec<NormStat>,
}

#[derive(Clone, Debug)]
pub struct Detector<T: Real> {
    pub config: RunConfig,
    pub sizes: ClassSizeTable,
    pub params: ParamStore<T>,
    backbone: Backbone,
    proposal: ProposalNet,
    roi: RoiNet,
}

fn stage(name: &'static str) -> impl FnOnce(Error) -> Error {
    move |e| e.in_stage(name)
}

/// Per-class mean box size over a set of scenes.
pub fn class_sizes_from_scenes(scenes: &[SceneRecord], n_class: usize) -> Result<ClassSizeTable> {
    let boxes: Vec<(Box3D, usize)> = scenes.iter().flat_map(|s| s.gt.iter().copied()).collect();
    ClassSizeTable::from_boxes(n_class, &boxes)
}

impl<T: Real> Detector<T> {
    /// Freshly initialized detector; `config.class_sizes` must be set.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let sizes =
            ClassSizeTable::new(config.class_sizes.clone()).map_err(|_| Error::invalid("config lacks class_sizes"))?;
        if sizes.n_class() != config.n_class {
            return Err(Error::invalid("class_sizes must list one triple per class"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let backbone = Backbone::new(config.backbone(), &mut params, &mut rng)?;
        let proposal = ProposalNet::new(config.proposal(), &mut params, &mut rng)?;
        let roi = RoiNet::new(config.roi(), &mut params, &mut rng)?;
        Ok(Self { config, sizes, params, backbone, proposal, roi })
    }

    /// Detector for training on `scenes`, estimating class sizes when the
    /// configuration does not fix them.
    pub fn for_scenes(mut config: RunConfig, scenes: &[SceneRecord]) -> Result<Self> {
        if config.class_sizes.is_empty() {
            config.class_sizes = class_sizes_from_scenes(scenes, config.n_class)?.sizes().to_vec();
        }
        Self::new(config)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut d = Self::new(ck.config.clone())?;
        ck.restore(&mut d.params)?;
        Ok(d)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(&self.config, &self.params)
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn proposal_net(&self) -> &ProposalNet {
        &self.proposal
    }

    pub fn roi_net(&self) -> &RoiNet {
        &self.roi
    }

    /// Voxelized network input.
    pub fn input_tensor(&self, cloud: &PointCloud) -> Result<SparseTensor<T>> {
        let x: SparseTensor<T> = voxelize_avg(cloud, [self.config.voxel_size; 3])?;
        if x.channels() != self.config.in_channels {
            return Err(Error::shape(format!(
                "scene has {} feature channels, model expects {}",
                x.channels(),
                self.config.in_channels
            )));
        }
        Ok(x)
    }

    /// Stage-I proposals before filtering, ordered as produced.
    fn raw_proposals(&self, t: &Tape<'_, T>, s1: &StageOne) -> Result<Vec<Proposal>> {
        self.proposal.proposals(t, &s1.groups, &self.sizes)
    }

    /// Keeps the `nms_pre` best-scoring proposals, then suppresses overlaps.
    fn suppress(&self, mut props: Vec<Proposal>, score_min: f64) -> Vec<Proposal> {
        props.sort_by(|a, b| b.score.total_cmp(&a.score));
        props.truncate(self.config.nms_pre);
        filter_nms(&props, score_min, self.config.nms_iou)
    }

    /// Loss and gradients for one scene at semantic threshold `tau`.
    pub fn scene_loss(&self, scene: &SceneRecord, tau: f64) -> Result<SceneStep<T>> {
        let cfg = &self.config;
        let x = self.input_tensor(&scene.cloud).map_err(stage("voxelize"))?;
        let mut t = Tape::new(&self.params);
        let mut report = LossReport { terms: LossTerms::default(), total: 0.0, n_fg: 0, n_pos: 0, n_roi: 0 };
        if x.is_empty() {
            return Ok(SceneStep { report, grads: Grads::empty(self.params.len()), norm_stats: Vec::new() });
        }
        let bb = self.backbone.forward(&mut t, &x, Mode::Train).map_err(stage("backbone"))?;
        let s1 = self.proposal.forward(&mut t, &bb, tau, &self.sizes).map_err(stage("proposal"))?;
        let targets = assign_targets(&s1.voxel_centers, &scene.gt);
        let mut terms = LossTerms::default();
        let mut vars: Vec<(Var, f64)> = Vec::new();

        let logits = t.value(s1.sem_logits).cast::<f64>();
        let sem = focal_loss_logits(&logits, &targets.class_id, cfg.focal_gamma, cfg.focal_alpha);
        terms.sem = sem.value;
        let v = t.loss(sem.value, vec![(s1.sem_logits, sem.grad.cast())])?;
        vars.push((v, cfg.weights.sem));

        let fg: Vec<usize> = (0..targets.box_id.len()).filter(|&i| targets.box_id[i].is_some()).collect();
        report.n_fg = fg.len();
        if !fg.is_empty() {
            let dx = t.value(s1.delta_x);
            let pred = Matrix::from_fn(fg.len(), 3, |r, c| dx.get(fg[r], c).as_f64());
            let tgt = Matrix::from_fn(fg.len(), 3, |r, c| targets.center_offset[fg[r]].expect("foreground")[c]);
            let l = smooth_l1(&pred, &tgt, cfg.vote_beta);
            let mut full = Matrix::<T>::zeros(dx.rows(), 3);
            for (r, &i) in fg.iter().enumerate() {
                for c in 0..3 {
                    full.set(i, c, T::of(l.grad.get(r, c)));
                }
            }
            terms.vote = l.value;
            let v = t.loss(l.value, vec![(s1.delta_x, full)])?;
            vars.push((v, cfg.weights.vote));
        }

        self.head_losses(&mut t, &s1, scene, &mut terms, &mut vars, &mut report)?;
        self.refine_losses(&mut t, &bb, &s1, scene, &mut terms, &mut vars, &mut report)?;

        report.terms = terms;
        report.total = total_loss(&terms, &cfg.weights)?;
        let root = t.weighted_sum(vars);
        let grads = t.backward(root)?;
        let norm_stats = t.take_norm_stats();
        Ok(SceneStep { report, grads, norm_stats })
    }

    fn head_losses(
        &self,
        t: &mut Tape<'_, T>,
        s1: &StageOne,
        scene: &SceneRecord,
        terms: &mut LossTerms,
        vars: &mut Vec<(Var, f64)>,
        report: &mut LossReport,
    ) -> Result<()> {
        let cfg = &self.config;
        if s1.groups.iter().all(|g| g.layout.is_empty()) {
            return Ok(());
        }
        let heads = s1
            .groups
            .iter()
            .map(|g| {
                Ok(HeadRows {
                    cls: t.value(g.cls).cast(),
                    reg: t.value(g.reg).cast(),
                    ctr: t.value(g.ctr).cast(),
                    anchors: g.anchors(&self.sizes)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let l = stage1_losses(&heads, &scene.gt, cfg.focal_gamma, cfg.focal_alpha);
        report.n_pos = l.n_pos;
        let mut cls = Vec::new();
        let mut reg = Vec::new();
        let mut ctr = Vec::new();
        for (g, (dc, dr, dt)) in s1.groups.iter().zip(&l.grads) {
            cls.push((g.cls, dc.cast()));
            reg.push((g.reg, dr.cast()));
            ctr.push((g.ctr, dt.cast()));
        }
        terms.cls = l.cls;
        let v = t.loss(l.cls, cls)?;
        vars.push((v, cfg.weights.cls));
        if l.n_pos > 0 {
            terms.cntr = l.cntr;
            terms.bbox = l.bbox;
            let v = t.loss(l.cntr, ctr)?;
            vars.push((v, cfg.weights.cntr));
            let v = t.loss(l.bbox, reg)?;
            vars.push((v, cfg.weights.bbox));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn refine_losses(
        &self,
        t: &mut Tape<'_, T>,
        bb: &SparseVar,
        s1: &StageOne,
        scene: &SceneRecord,
        terms: &mut LossTerms,
        vars: &mut Vec<(Var, f64)>,
        report: &mut LossReport,
    ) -> Result<()> {
        let cfg = &self.config;
        if scene.gt.is_empty() {
            return Ok(());
        }
        let props = self.suppress(self.raw_proposals(t, s1)?, 0.0);
        let boxes: Vec<Box3D> = props.iter().map(|p| p.bbox).collect();
        let gt_boxes: Vec<Box3D> = scene.gt.iter().map(|g| g.0).collect();
        let sel = select_training_proposals(&boxes, &gt_boxes, cfg.roi_iou_train, cfg.roi_max_train);
        report.n_roi = sel.len();
        if sel.is_empty() {
            return Ok(());
        }
        let pb: Vec<Box3D> = sel.iter().map(|s| boxes[s.proposal]).collect();
        let gts: Vec<Box3D> = sel.iter().map(|s| gt_boxes[s.gt]).collect();
        let roi = self.roi.pool(t, bb, &pb).map_err(stage("roipool"))?;
        let res = self.roi.refine(t, &roi)?;
        let pred = t.value(res).cast::<f64>();
        let target = Matrix::from_fn(pb.len(), 8, |r, c| encode_residual(&pb[r], &gts[r])[c]);
        let l = rebox_loss(&pred, &target, &gts, &ResidualDecoder(&pb), cfg.rebox_beta);
        terms.rebox = l.value;
        let v = t.loss(l.value, vec![(res, l.grad.cast())])?;
        vars.push((v, cfg.weights.rebox));
        Ok(())
    }

    /// Stage-I proposals after score filtering and NMS.
    pub fn propose(&self, cloud: &PointCloud) -> Result<Vec<Proposal>> {
        let x = self.input_tensor(cloud).map_err(stage("voxelize"))?;
        if x.is_empty() {
            return Ok(Vec::new());
        }
        let mut t = Tape::new(&self.params);
        let bb = self.backbone.forward(&mut t, &x, Mode::Eval).map_err(stage("backbone"))?;
        let s1 = self.proposal.forward(&mut t, &bb, self.config.tau_min, &self.sizes).map_err(stage("proposal"))?;
        Ok(self.suppress(self.raw_proposals(&t, &s1)?, self.config.score_min))
    }

    /// Refined detections for one scene.
    pub fn detect(&self, cloud: &PointCloud) -> Result<Vec<(Box3D, usize, f64)>> {
        let x = self.input_tensor(cloud).map_err(stage("voxelize"))?;
        if x.is_empty() {
            return Ok(Vec::new());
        }
        let mut t = Tape::new(&self.params);
        let bb = self.backbone.forward(&mut t, &x, Mode::Eval).map_err(stage("backbone"))?;
        let s1 = self.proposal.forward(&mut t, &bb, self.config.tau_min, &self.sizes).map_err(stage("proposal"))?;
        let props = self.suppress(self.raw_proposals(&t, &s1)?, self.config.score_min);
        if props.is_empty() {
            return Ok(Vec::new());
        }
        let pb: Vec<Box3D> = props.iter().map(|p| p.bbox).collect();
        let roi = self.roi.pool(&mut t, &bb, &pb).map_err(stage("roipool"))?;
        let res = self.roi.refine(&mut t, &roi).map_err(stage("refine"))?;
        let r = t.value(res);
        props
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let b = decode_residual_box(&p.bbox, std::array::from_fn(|k| r.get(i, k).as_f64()))
                    .map_err(stage("refine"))?;
                Ok((b, p.class_id, p.score))
            })
            .collect()
    }

    /// [`Detector::detect`] as output records.
    pub fn run_inference(&self, scene: &SceneRecord) -> Result<Vec<Detection>> {
        Ok(self.detect(&scene.cloud)?.iter().map(|(b, c, s)| Detection::new(&scene.scene_id, *c, *s, b)).collect())
    }
}

/// Detections for `scene` from a stored model.
pub fn run_inference(scene: &SceneRecord, checkpoint: &Checkpoint) -> Result<Vec<Detection>> {
    match checkpoint.config.precision {
        super::config::Precision::F32 => Detector::<f32>::from_checkpoint(checkpoint)?.run_inference(scene),
        super::config::Precision::F64 => Detector::<f64>::from_checkpoint(checkpoint)?.run_inference(scene),
    }
}
