//! Run configuration as flat `key = value` text.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, FOCAL_ALPHA, FOCAL_GAMMA};
use crate::nn::{AdamWConfig, NormKind};
use crate::proposal::{DatasetPreset, ProposalConfig, TAU_INIT, TAU_MIN, TAU_STEP};
use crate::roipool::RoiConfig;
use crate::voxel::ClassSizeTable;

/// Numeric precision of features and parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            _ => Err(Error::Parse(format!("unknown precision `{s}`"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub voxel_size: f64,
    pub highres_voxel_size: f64,
    pub alpha: f64,
    pub tau_init: f64,
    pub tau_step: f64,
    pub tau_min: f64,
    pub tau_preset: DatasetPreset,
    pub k_a: usize,
    pub roi_grid_1: [usize; 3],
    pub roi_grid_2: [usize; 3],
    pub k_p_1: usize,
    pub k_p_2: usize,
    pub roi_max_train: usize,
    pub roi_iou_train: f64,
    pub score_min: f64,
    pub nms_iou: f64,
    pub nms_pre: usize,
    pub weights: LossWeights,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub vote_beta: f64,
    pub rebox_beta: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub n_class: usize,
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub highres_channels: usize,
    pub fusion_points: Vec<usize>,
    pub out_channels: usize,
    pub norm: NormKind,
    pub norm_momentum: f64,
    pub vote_hidden: usize,
    pub group_channels: usize,
    pub roi_channels_1: usize,
    pub roi_channels_2: usize,
    pub refine_hidden: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Per-class mean `(w, l, h)`; estimated from the training boxes when empty.
    pub class_sizes: Vec<[f64; 3]>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            voxel_size: crate::voxel::DEFAULT_VOXEL_SIZE,
            highres_voxel_size: 0.04,
            alpha: 0.15,
            tau_init: TAU_INIT,
            tau_step: TAU_STEP,
            tau_min: TAU_MIN,
            tau_preset: DatasetPreset::ScanNet,
            k_a: 9,
            roi_grid_1: [7, 7, 7],
            roi_grid_2: [1, 1, 1],
            k_p_1: 5,
            k_p_2: 7,
            roi_max_train: 128,
            roi_iou_train: 0.3,
            score_min: 0.01,
            nms_iou: 0.5,
            nms_pre: 1000,
            weights: w,
            focal_gamma: FOCAL_GAMMA,
            focal_alpha: FOCAL_ALPHA,
            vote_beta: 1.0,
            rebox_beta: 1.0,
            lr: 0.001,
            weight_decay: 0.0001,
            grad_clip: 10.0,
            batch_size: 2,
            steps: 500,
            n_class: 3,
            in_channels: 3,
            stage_channels: vec![16, 32, 64, 128],
            blocks_per_stage: 2,
            highres_channels: 32,
            fusion_points: vec![1, 2, 3],
            out_channels: 64,
            norm: NormKind::Batch,
            norm_momentum: 0.1,
            vote_hidden: 64,
            group_channels: 64,
            roi_channels_1: 32,
            roi_channels_2: 64,
            refine_hidden: 64,
            seed: 0,
            precision: Precision::F32,
            class_sizes: Vec::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Parse(format!("bad value `{v}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse(key, p)).collect()
}

fn parse_triple<T: FromStr + Copy>(key: &str, v: &str) -> Result<[T; 3]> {
    let l: Vec<T> = parse_list(key, v)?;
    <[T; 3]>::try_from(l).map_err(|_| Error::Parse(format!("`{key}` needs three values")))
}

fn join<T: std::fmt::Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, k: &str, v: &str) -> Result<()> {
        match k {
            "voxel_size" => self.voxel_size = parse(k, v)?,
            "highres_voxel_size" => self.highres_voxel_size = parse(k, v)?,
            "alpha" => self.alpha = parse(k, v)?,
            "tau_init" => self.tau_init = parse(k, v)?,
            "tau_step" => self.tau_step = parse(k, v)?,
            "tau_min" => self.tau_min = parse(k, v)?,
            "tau_preset" => self.tau_preset = v.parse()?,
            "k_a" => self.k_a = parse(k, v)?,
            "roi_grid_1" => self.roi_grid_1 = parse_triple(k, v)?,
            "roi_grid_2" => self.roi_grid_2 = parse_triple(k, v)?,
            "k_p_1" => self.k_p_1 = parse(k, v)?,
            "k_p_2" => self.k_p_2 = parse(k, v)?,
            "roi_max_train" => self.roi_max_train = parse(k, v)?,
            "roi_iou_train" => self.roi_iou_train = parse(k, v)?,
            "score_min" => self.score_min = parse(k, v)?,
            "nms_iou" => self.nms_iou = parse(k, v)?,
            "nms_pre" => self.nms_pre = parse(k, v)?,
            "w_sem" => self.weights.sem = parse(k, v)?,
            "w_vote" => self.weights.vote = parse(k, v)?,
            "w_cntr" => self.weights.cntr = parse(k, v)?,
            "w_box" => self.weights.bbox = parse(k, v)?,
            "w_cls" => self.weights.cls = parse(k, v)?,
            "w_rebox" => self.weights.rebox = parse(k, v)?,
            "focal_gamma" => self.focal_gamma = parse(k, v)?,
            "focal_alpha" => self.focal_alpha = parse(k, v)?,
            "vote_beta" => self.vote_beta = parse(k, v)?,
            "rebox_beta" => self.rebox_beta = parse(k, v)?,
            "lr" => self.lr = parse(k, v)?,
            "weight_decay" => self.weight_decay = parse(k, v)?,
            "grad_clip" => self.grad_clip = parse(k, v)?,
            "batch_size" => self.batch_size = parse(k, v)?,
            "steps" => self.steps = parse(k, v)?,
            "n_class" => self.n_class = parse(k, v)?,
            "in_channels" => self.in_channels = parse(k, v)?,
            "stage_channels" => self.stage_channels = parse_list(k, v)?,
            "blocks_per_stage" => self.blocks_per_stage = parse(k, v)?,
            "highres_channels" => self.highres_channels = parse(k, v)?,
            "fusion_points" => self.fusion_points = parse_list(k, v)?,
            "out_channels" => self.out_channels = parse(k, v)?,
            "norm" => self.norm = v.parse()?,
            "norm_momentum" => self.norm_momentum = parse(k, v)?,
            "vote_hidden" => self.vote_hidden = parse(k, v)?,
            "group_channels" => self.group_channels = parse(k, v)?,
            "roi_channels_1" => self.roi_channels_1 = parse(k, v)?,
            "roi_channels_2" => self.roi_channels_2 = parse(k, v)?,
            "refine_hidden" => self.refine_hidden = parse(k, v)?,
            "seed" => self.seed = parse(k, v)?,
            "precision" => self.precision = v.parse()?,
            "class_sizes" => {
                self.class_sizes =
                    v.split(';').filter(|s| !s.trim().is_empty()).map(|s| parse_triple(k, s)).collect::<Result<_>>()?
            }
            _ => return Err(Error::Parse(format!("unknown config key `{k}`"))),
        }
        Ok(())
    }

    /// Canonical text form; `parse(dump())` reproduces the configuration.
    pub fn dump(&self) -> String {
        let w = &self.weights;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("voxel_size", format!("{:?}", self.voxel_size));
        kv("highres_voxel_size", format!("{:?}", self.highres_voxel_size));
        kv("alpha", format!("{:?}", self.alpha));
        kv("tau_init", format!("{:?}", self.tau_init));
        kv("tau_step", format!("{:?}", self.tau_step));
        kv("tau_min", format!("{:?}", self.tau_min));
        kv("tau_preset", self.tau_preset.to_string());
        kv("k_a", self.k_a.to_string());
        kv("roi_grid_1", join(&self.roi_grid_1));
        kv("roi_grid_2", join(&self.roi_grid_2));
        kv("k_p_1", self.k_p_1.to_string());
        kv("k_p_2", self.k_p_2.to_string());
        kv("roi_max_train", self.roi_max_train.to_string());
        kv("roi_iou_train", format!("{:?}", self.roi_iou_train));
        kv("score_min", format!("{:?}", self.score_min));
        kv("nms_iou", format!("{:?}", self.nms_iou));
        kv("nms_pre", self.nms_pre.to_string());
        kv("w_sem", format!("{:?}", w.sem));
        kv("w_vote", format!("{:?}", w.vote));
        kv("w_cntr", format!("{:?}", w.cntr));
        kv("w_box", format!("{:?}", w.bbox));
        kv("w_cls", format!("{:?}", w.cls));
        kv("w_rebox", format!("{:?}", w.rebox));
        kv("focal_gamma", format!("{:?}", self.focal_gamma));
        kv("focal_alpha", format!("{:?}", self.focal_alpha));
        kv("vote_beta", format!("{:?}", self.vote_beta));
        kv("rebox_beta", format!("{:?}", self.rebox_beta));
        kv("lr", format!("{:?}", self.lr));
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("grad_clip", format!("{:?}", self.grad_clip));
        s.push_str("# toy preset: batch_size and steps are sized for desk-scale runs\n");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("batch_size", self.batch_size.to_string());
        kv("steps", self.steps.to_string());
        kv("n_class", self.n_class.to_string());
        kv("in_channels", self.in_channels.to_string());
        kv("stage_channels", join(&self.stage_channels));
        kv("blocks_per_stage", self.blocks_per_stage.to_string());
        kv("highres_channels", self.highres_channels.to_string());
        kv("fusion_points", join(&self.fusion_points));
        kv("out_channels", self.out_channels.to_string());
        kv("norm", self.norm.to_string());
        kv("norm_momentum", format!("{:?}", self.norm_momentum));
        kv("vote_hidden", self.vote_hidden.to_string());
        kv("group_channels", self.group_channels.to_string());
        kv("roi_channels_1", self.roi_channels_1.to_string());
        kv("roi_channels_2", self.roi_channels_2.to_string());
        kv("refine_hidden", self.refine_hidden.to_string());
        kv("seed", self.seed.to_string());
        kv("precision", self.precision.to_string());
        kv("class_sizes", self.class_sizes.iter().map(|t| join(t)).collect::<Vec<_>>().join(";"));
        s
    }

    /// Grid stride of the high-resolution branch in base voxels.
    pub fn highres_stride(&self) -> Result<u32> {
        let r = self.highres_voxel_size / self.voxel_size;
        let s = r.round();
        if (r - s).abs() > 1e-9 || s < 2.0 || !(s as u32).is_power_of_two() {
            return Err(Error::invalid(format!(
                "high-resolution voxel size {} must be a power-of-two multiple of {}",
                self.highres_voxel_size, self.voxel_size
            )));
        }
        Ok(s as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.voxel_size.is_nan() || self.voxel_size <= 0.0 {
            return Err(Error::invalid("voxel_size must be positive"));
        }
        self.highres_stride()?;
        self.backbone().validate()?;
        self.weights.validate()?;
        if !(self.tau_min > 0.0 && self.tau_init < 1.0 && self.tau_min <= self.tau_init) {
            return Err(Error::invalid("tau schedule must satisfy 0 < tau_min ≤ tau_init < 1"));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::invalid("nms_iou must lie in [0, 1]"));
        }
        if self.batch_size == 0 || self.n_class == 0 {
            return Err(Error::invalid("batch_size and n_class must be positive"));
        }
        if !self.class_sizes.is_empty() {
            if self.class_sizes.len() != self.n_class {
                return Err(Error::invalid("class_sizes must list one triple per class"));
            }
            ClassSizeTable::new(self.class_sizes.clone())?;
        }
        Ok(())
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: self.in_channels,
            stage_channels: self.stage_channels.clone(),
            blocks_per_stage: self.blocks_per_stage,
            highres_channels: self.highres_channels,
            highres_stride: self.highres_stride().unwrap_or(2),
            fusion_points: self.fusion_points.clone(),
            out_channels: self.out_channels,
            norm: self.norm,
        }
    }

    pub fn proposal(&self) -> ProposalConfig {
        ProposalConfig {
            n_class: self.n_class,
            feat_channels: self.out_channels,
            vote_hidden: self.vote_hidden,
            group_channels: self.group_channels,
            k_a: self.k_a,
            alpha: self.alpha,
        }
    }

    pub fn roi(&self) -> RoiConfig {
        RoiConfig {
            feat_channels: self.out_channels,
            grid1: self.roi_grid_1,
            grid2: self.roi_grid_2,
            k1: self.k_p_1,
            k2: self.k_p_2,
            block1_channels: self.roi_channels_1,
            block2_channels: self.roi_channels_2,
            refine_hidden: self.refine_hidden,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }

    /// Semantic threshold at `epoch`.
    pub fn tau(&self, epoch: u32) -> f64 {
        crate::proposal::tau_schedule_with(
            epoch,
            self.tau_preset.decay_period(),
            self.tau_init,
            self.tau_step,
            self.tau_min,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_parses_back() {
        let c = RunConfig {
            class_sizes: vec![[1.0, 0.5, 0.25], [0.3, 0.3, 0.9], [0.5, 1.5, 0.5]],
            seed: 7,
            ..RunConfig::default()
        };
        let back = RunConfig::parse(&c.dump()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::parse("colour = red").is_err());
        assert!(RunConfig::parse("k_a = nine").is_err());
        assert!(RunConfig::parse("highres_voxel_size = 0.03").is_err());
        let c = RunConfig::parse("# comment\nk_a = 5 # trailing\n").unwrap();
        assert_eq!(c.k_a, 5);
    }

    #[test]
    fn highres_stride_follows_voxel_sizes() {
        assert_eq!(RunConfig::default().highres_stride().unwrap(), 2);
    }
}
