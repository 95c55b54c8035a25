//! Dual-resolution sparse backbone.
//!
//! A residual branch downsamples through stages of doubling stride while an
//! auxiliary branch keeps a fixed high-resolution grid. After each fusion
//! stage the two exchange information: the high branch is carried down to the
//! stage grid by a chain of stride-2 convolutions and added to it, and the
//! stage output is copied up to the high grid by nearest-parent
//! interpolation, compressed by a 1³ convolution and added there.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, Mode, Norm, NormKind, ParamStore};
use crate::real::Real;
use crate::sparse::{KernelMap, Layout, SparseTensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Channels of each downsampling stage; stage `i` runs at stride
    /// `highres_stride · 2^i`.
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub highres_channels: usize,
    pub highres_stride: u32,
    /// Stages (index ≥ 1) followed by a bilateral fusion.
    pub fusion_points: Vec<usize>,
    pub out_channels: usize,
    pub norm: NormKind,
}

impl BackboneConfig {
    /// Small preset used for desk-scale training.
    pub fn toy(in_channels: usize) -> Self {
        Self {
            in_channels,
            stage_channels: vec![16, 32, 64, 128],
            blocks_per_stage: 2,
            highres_channels: 32,
            highres_stride: 2,
            fusion_points: vec![1, 2, 3],
            out_channels: 64,
            norm: NormKind::Batch,
        }
    }

    pub fn stage_stride(&self, i: usize) -> u32 {
        self.highres_stride << i
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.highres_channels == 0 {
            return Err(Error::invalid("backbone channel counts must be positive"));
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::invalid("backbone needs at least one stage with positive width"));
        }
        if !self.highres_stride.is_power_of_two() || self.highres_stride < 2 {
            return Err(Error::invalid("high-resolution stride must be a power of two ≥ 2"));
        }
        let mut seen = vec![false; self.stage_channels.len()];
        for &f in &self.fusion_points {
            if f == 0 || f >= self.stage_channels.len() || std::mem::replace(&mut seen[f], true) {
                return Err(Error::invalid(format!("invalid fusion point {f}")));
            }
        }
        Ok(())
    }
}

/// Pre-activation residual block of two submanifold 3³ convolutions.
#[derive(Clone, Debug)]
pub struct ResBlock {
    n1: Norm,
    c1: Conv,
    n2: Norm,
    c2: Conv,
}

impl ResBlock {
    fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        norm: NormKind,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            n1: Norm::new(store, &format!("{name}.n1"), c, norm)?,
            c1: Conv::new(store, &format!("{name}.c1"), 3, c, c, false, rng)?,
            n2: Norm::new(store, &format!("{name}.n2"), c, norm)?,
            c2: Conv::new(store, &format!("{name}.c2"), 3, c, c, false, rng)?,
        })
    }

    fn forward<T: Real>(&self, t: &mut Tape<'_, T>, x: Var, kmap: &Arc<KernelMap>, mode: Mode) -> Result<Var> {
        let h = self.n1.forward(t, x, mode)?;
        let h = t.relu(h);
        let h = self.c1.forward(t, h, kmap.clone())?;
        let h = self.n2.forward(t, h, mode)?;
        let h = t.relu(h);
        let h = self.c2.forward(t, h, kmap.clone())?;
        t.add(x, h)
    }
}

/// Convolution, normalization and an optional ReLU.
#[derive(Clone, Debug)]
struct ConvNorm {
    conv: Conv,
    norm: Norm,
    relu: bool,
}

impl ConvNorm {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        k: usize,
        c_in: usize,
        c_out: usize,
        norm: NormKind,
        relu: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(store, &format!("{name}.conv"), k, c_in, c_out, false, rng)?,
            norm: Norm::new(store, &format!("{name}.norm"), c_out, norm)?,
            relu,
        })
    }

    fn forward<T: Real>(&self, t: &mut Tape<'_, T>, x: Var, kmap: Arc<KernelMap>, mode: Mode) -> Result<Var> {
        let h = self.conv.forward(t, x, kmap)?;
        let h = self.norm.forward(t, h, mode)?;
        Ok(if self.relu { t.relu(h) } else { h })
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: ConvNorm,
    blocks: Vec<ResBlock>,
}

/// Parameters of one two-way exchange between the branches.
#[derive(Clone, Debug)]
pub struct Fusion {
    stage: usize,
    down_chain: Vec<ConvNorm>,
    up: ConvNorm,
}

/// A branch state on the tape: sites plus the feature node.
#[derive(Clone, Debug)]
pub struct SparseVar {
    pub layout: Arc<Layout>,
    pub feats: Var,
}

impl Fusion {
    /// Exchanges features between `high` and `low`. `chain` lists the
    /// layouts visited on the way down, ending with `low`'s own layout.
    pub fn forward<T: Real>(
        &self,
        t: &mut Tape<'_, T>,
        high: &SparseVar,
        low: &SparseVar,
        chain: &[Arc<Layout>],
        mode: Mode,
    ) -> Result<(SparseVar, SparseVar)> {
        if !low.layout.stride().is_multiple_of(high.layout.stride()) {
            return Err(Error::Stride { low: low.layout.stride(), high: high.layout.stride() });
        }
        if chain.len() != self.down_chain.len() || !chain.last().is_some_and(|l| Arc::ptr_eq(l, &low.layout)) {
            return Err(Error::shape("fusion chain does not end at the low-resolution layout"));
        }
        let mut x = high.feats;
        let mut from = high.layout.clone();
        for (layer, to) in self.down_chain.iter().zip(chain) {
            let kmap = Arc::new(from.kernel_map(to, 3)?);
            x = layer.forward(t, x, kmap, mode)?;
            from = to.clone();
        }
        let low_out = t.add(low.feats, x)?;

        let parents = high.layout.parent_rows(&low.layout)?;
        let up = t.gather(low.feats, parents)?;
        let kmap = Arc::new(high.layout.kernel_map(&high.layout, 1)?);
        let up = self.up.forward(t, up, kmap, mode)?;
        let high_out = t.add(high.feats, up)?;
        Ok((
            SparseVar { layout: high.layout.clone(), feats: high_out },
            SparseVar { layout: low.layout.clone(), feats: low_out },
        ))
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    stem: ConvNorm,
    stages: Vec<Stage>,
    highres_in: ConvNorm,
    fusions: Vec<(Fusion, ResBlock)>,
    head: ConvNorm,
}

impl Backbone {
    pub fn new<T: Real, R: Rng>(cfg: BackboneConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let nk = cfg.norm;
        let c0 = cfg.stage_channels[0];
        let stem = ConvNorm::new(store, "backbone.stem", 3, cfg.in_channels, c0, nk, true, rng)?;
        let mut stages = Vec::new();
        let mut prev = c0;
        for (i, &c) in cfg.stage_channels.iter().enumerate() {
            let name = format!("backbone.stage{i}");
            let down = ConvNorm::new(store, &format!("{name}.down"), 3, prev, c, nk, true, rng)?;
            let blocks = (0..cfg.blocks_per_stage)
                .map(|b| ResBlock::new(store, &format!("{name}.block{b}"), c, nk, rng))
                .collect::<Result<_>>()?;
            stages.push(Stage { down, blocks });
            prev = c;
        }
        let hc = cfg.highres_channels;
        let highres_in = ConvNorm::new(store, "backbone.highres.in", 1, c0, hc, nk, true, rng)?;
        let mut fusions = Vec::new();
        let mut points = cfg.fusion_points.clone();
        points.sort_unstable();
        for &s in &points {
            let name = format!("backbone.fuse{s}");
            let mut down_chain = Vec::new();
            for step in 1..=s {
                let c_out = if step == s { cfg.stage_channels[s] } else { hc };
                let relu = step != s;
                down_chain.push(ConvNorm::new(store, &format!("{name}.down{step}"), 3, hc, c_out, nk, relu, rng)?);
            }
            let up = ConvNorm::new(store, &format!("{name}.up"), 1, cfg.stage_channels[s], hc, nk, false, rng)?;
            let block = ResBlock::new(store, &format!("{name}.block"), hc, nk, rng)?;
            fusions.push((Fusion { stage: s, down_chain, up }, block));
        }
        let head = ConvNorm::new(store, "backbone.head", 1, hc, cfg.out_channels, nk, true, rng)?;
        Ok(Self { cfg, stem, stages, highres_in, fusions, head })
    }

    /// Forward pass on the tape. `input` must be at stride 1; returns the
    /// high-resolution branch output.
    pub fn forward<T: Real>(&self, t: &mut Tape<'_, T>, input: &SparseTensor<T>, mode: Mode) -> Result<SparseVar> {
        let cfg = &self.cfg;
        if input.stride() != 1 {
            return Err(Error::invalid("backbone input must be at stride 1"));
        }
        if input.channels() != cfg.in_channels {
            return Err(Error::shape(format!(
                "backbone expects {} input channels, got {}",
                cfg.in_channels,
                input.channels()
            )));
        }
        let base = Arc::new(Layout::of(input));
        let x = t.constant(input.feats().clone());
        let kmap = Arc::new(base.kernel_map(&base, 3)?);
        let x = self.stem.forward(t, x, kmap, mode)?;

        let mut layouts: Vec<Arc<Layout>> = Vec::new();
        let mut prev = SparseVar { layout: base.clone(), feats: x };
        let mut high: Option<SparseVar> = None;
        let mut fusions = self.fusions.iter().peekable();
        for (i, stage) in self.stages.iter().enumerate() {
            let stride = cfg.stage_stride(i);
            let layout = Arc::new(prev.layout.downsample(stride / prev.layout.stride())?);
            let kmap = Arc::new(prev.layout.kernel_map(&layout, 3)?);
            let mut x = stage.down.forward(t, prev.feats, kmap, mode)?;
            let sub = Arc::new(layout.kernel_map(&layout, 3)?);
            for block in &stage.blocks {
                x = block.forward(t, x, &sub, mode)?;
            }
            layouts.push(layout.clone());
            let mut low = SparseVar { layout, feats: x };
            if i == 0 {
                let k1 = Arc::new(low.layout.kernel_map(&low.layout, 1)?);
                let h = self.highres_in.forward(t, low.feats, k1, mode)?;
                high = Some(SparseVar { layout: low.layout.clone(), feats: h });
            } else if let Some((fusion, block)) = fusions.next_if(|(f, _)| f.stage == i) {
                let hv = high.take().expect("high branch exists after stage 0");
                let (h, l) = fusion.forward(t, &hv, &low, &layouts[1..=i], mode)?;
                let sub_h = Arc::new(h.layout.kernel_map(&h.layout, 3)?);
                let hf = block.forward(t, h.feats, &sub_h, mode)?;
                high = Some(SparseVar { layout: h.layout, feats: hf });
                low = l;
            }
            prev = low;
        }
        let hv = high.expect("high branch exists after stage 0");
        let k1 = Arc::new(hv.layout.kernel_map(&hv.layout, 1)?);
        let out = self.head.forward(t, hv.feats, k1, mode)?;
        Ok(SparseVar { layout: hv.layout, feats: out })
    }
}

/// Inference-mode backbone evaluation returning a plain tensor.
pub fn backbone_forward<T: Real>(
    input: &SparseTensor<T>,
    backbone: &Backbone,
    params: &ParamStore<T>,
) -> Result<SparseTensor<T>> {
    if input.is_empty() {
        return SparseTensor::empty(backbone.cfg.out_channels, backbone.cfg.highres_stride, input.voxel_size());
    }
    let mut t = Tape::new(params);
    let out = backbone.forward(&mut t, input, Mode::Eval)?;
    SparseTensor::new(
        out.layout.coords().to_vec(),
        t.value(out.feats).clone(),
        out.layout.stride(),
        out.layout.voxel_size(),
    )
}

/// Inference-mode evaluation of one bilateral fusion between plain tensors.
/// `chain` lists the intermediate layouts strictly between the two grids.
pub fn bilateral_fuse<T: Real>(
    high: &SparseTensor<T>,
    low: &SparseTensor<T>,
    fusion: &Fusion,
    params: &ParamStore<T>,
) -> Result<(SparseTensor<T>, SparseTensor<T>)> {
    if high.stride() == 0 || !low.stride().is_multiple_of(high.stride()) {
        return Err(Error::Stride { low: low.stride(), high: high.stride() });
    }
    let hl = Arc::new(Layout::of(high));
    let ll = Arc::new(Layout::of(low));
    let mut chain = Vec::new();
    let mut cur = hl.clone();
    while cur.stride() * 2 < ll.stride() {
        cur = Arc::new(cur.downsample(2)?);
        chain.push(cur.clone());
    }
    chain.push(ll.clone());
    let mut t = Tape::new(params);
    let hv = SparseVar { layout: hl, feats: t.constant(high.feats().clone()) };
    let lv = SparseVar { layout: ll, feats: t.constant(low.feats().clone()) };
    let (h, l) = fusion.forward(&mut t, &hv, &lv, &chain, Mode::Eval)?;
    let to_tensor = |v: &SparseVar, t: &Tape<'_, T>| {
        SparseTensor::new(
            v.layout.coords().to_vec(),
            t.value(v.feats).clone(),
            v.layout.stride(),
            v.layout.voxel_size(),
        )
    };
    Ok((to_tensor(&h, &t)?, to_tensor(&l, &t)?))
}

impl Backbone {
    pub fn fusions(&self) -> impl Iterator<Item = &Fusion> {
        self.fusions.iter().map(|(f, _)| f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::sparse::Coord3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud_tensor(shift: Coord3) -> SparseTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut coords = std::collections::BTreeSet::new();
        while coords.len() < 120 {
            coords.insert(Coord3::new(rng.random_range(0..12), rng.random_range(0..12), rng.random_range(0..6)));
        }
        let coords: Vec<Coord3> = coords.into_iter().collect();
        let feats = Matrix::from_fn(coords.len(), 2, |r, c| ((r * 7 + c * 3) % 11) as f64 / 11.0);
        SparseTensor::new(coords.iter().map(|&c| c + shift).collect(), feats, 1, [0.02; 3]).unwrap()
    }

    fn shallow() -> BackboneConfig {
        BackboneConfig {
            in_channels: 2,
            stage_channels: vec![4, 6],
            blocks_per_stage: 1,
            highres_channels: 5,
            highres_stride: 2,
            fusion_points: vec![1],
            out_channels: 3,
            norm: NormKind::Batch,
        }
    }

    #[test]
    fn output_lives_on_the_high_resolution_grid() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = Backbone::new(BackboneConfig::toy(2), &mut store, &mut rng).unwrap();
        let x = cloud_tensor(Coord3::ORIGIN);
        let y = backbone_forward(&x, &bb, &store).unwrap();
        assert_eq!(y.stride(), 2);
        assert_eq!(y.channels(), 64);
        let expect = crate::sparse::strided_downsample_coords(x.coords(), 2);
        assert_eq!(y.coords(), &expect[..]);
        let again = backbone_forward(&x, &bb, &store).unwrap();
        assert_eq!(y.feats(), again.feats());
    }

    #[test]
    fn empty_input_gives_empty_output() {
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::new(shallow(), &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = SparseTensor::<f64>::empty(2, 1, [0.02; 3]).unwrap();
        assert!(backbone_forward(&x, &bb, &store).unwrap().is_empty());
    }

    #[test]
    fn translation_by_coarsest_stride_is_equivariant() {
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::new(shallow(), &mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let a = backbone_forward(&cloud_tensor(Coord3::ORIGIN), &bb, &store).unwrap();
        let shift = Coord3::new(4, 0, 0);
        let b = backbone_forward(&cloud_tensor(shift), &bb, &store).unwrap();
        let moved: Vec<Coord3> = a.coords().iter().map(|&c| c + shift).collect();
        assert_eq!(b.coords(), &moved[..]);
        assert!(a.feats().max_rel_diff(b.feats(), 1e-12) < 1e-10);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = shallow();
        cfg.fusion_points = vec![0];
        assert!(cfg.validate().is_err());
        let mut cfg = shallow();
        cfg.highres_stride = 3;
        assert!(cfg.validate().is_err());
    }
}
