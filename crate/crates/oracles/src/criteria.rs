//! The acceptance criteria, each checked against an independent oracle.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsedet3d::geometry::{iou3d, wrap_angle, Box3D};
use sparsedet3d::losses::{focal_loss_logits, iou_loss, rebox_loss, smooth_l1, soft_bce_logits};
use sparsedet3d::nn::ParamStore;
use sparsedet3d::pipeline::{eval_map, run_toy_train, synth_scenes, Checkpoint, Detector, RunConfig, SynthSpec};
use sparsedet3d::proposal::{
    assign_targets, decode_stage1, encode_stage1, nms_indices, slice_class, stage1_losses, Anchor, AnchorDecoder,
    HeadRows, ProposalConfig, ProposalNet,
};
use sparsedet3d::roipool::{decode_residual_box, encode_residual, ResidualDecoder};
use sparsedet3d::sparse::{
    build_kernel_map, sparse_conv_backward, sparse_conv_forward, strided_downsample_coords, ConvWeights, Coord3,
    SparseTensor,
};
use sparsedet3d::voxel::{class_revoxelize, ClassSizeTable, PointCloud};
use sparsedet3d::{Matrix, Real};

use crate::reference::{brute_assign, brute_kernel_map, brute_nms, central_diff, dense_conv, monte_carlo_iou, rel_err};

pub const SEED: u64 = 20_240_601;

pub const CONV_TOL_F64: f64 = 1e-6;
pub const CONV_TOL_F32: f64 = 1e-4;
pub const CONV_GRAD_TOL: f64 = 1e-5;
pub const LOSS_GRAD_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-6;
pub const MC_SAMPLES: usize = 1_000_000;
pub const MC_TOL: f64 = 0.01;
pub const ANALYTIC_IOU_TOL: f64 = 1e-9;
pub const ROUND_TRIP_TOL: f64 = 1e-6;
pub const LOSS_RATIO: f64 = 0.5;
pub const MIN_RECALL: f64 = 0.9;
pub const MIN_MAP: f64 = 0.8;
pub const TRAIN_BUDGET_S: f64 = 15.0 * 60.0;

#[derive(Clone, Debug)]
pub struct Outcome {
    /// `criterion N` or `oracle`.
    pub label: String,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Outcome {
    pub fn line(&self) -> String {
        format!(
            "{}: {} [{}] {} ({:.1}s)",
            self.label,
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

pub(crate) fn run(
    label: String,
    name: &'static str,
    f: impl FnOnce() -> sparsedet3d::Result<(bool, String)>,
) -> Outcome {
    let t0 = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    Outcome { label, name, passed, detail, seconds: t0.elapsed().as_secs_f64() }
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

pub(crate) fn random_box(rng: &mut ChaCha8Rng, span: f64) -> Box3D {
    Box3D::new(
        [uniform(rng, -span, span), uniform(rng, -span, span), uniform(rng, -span, span)],
        [uniform(rng, 0.3, 2.0), uniform(rng, 0.3, 2.0), uniform(rng, 0.3, 2.0)],
        uniform(rng, -PI, PI),
    )
    .expect("positive dimensions")
}

/// Random occupied sites of a `dims` grid, at least one.
fn random_sites(rng: &mut ChaCha8Rng, dims: [usize; 3], occupancy: f64) -> Vec<Coord3> {
    let mut out = Vec::new();
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                if occupancy >= 1.0 || rng.random_bool(occupancy) {
                    out.push(Coord3::new(x as i32, y as i32, z as i32));
                }
            }
        }
    }
    if out.is_empty() {
        out.push(Coord3::ORIGIN);
    }
    out
}

struct ConvCase {
    dims: [usize; 3],
    coords: Vec<Coord3>,
    feats: Vec<Vec<f64>>,
    kernel: Vec<Vec<Vec<f64>>>,
    bias: Vec<f64>,
    k: usize,
}

impl ConvCase {
    fn random(rng: &mut ChaCha8Rng, dims: [usize; 3], occupancy: f64, k: usize, c_in: usize, c_out: usize) -> Self {
        let coords = random_sites(rng, dims, occupancy);
        let feats = coords.iter().map(|_| (0..c_in).map(|_| uniform(rng, -1.0, 1.0)).collect()).collect();
        let kernel = (0..k.pow(3))
            .map(|_| (0..c_in).map(|_| (0..c_out).map(|_| uniform(rng, -1.0, 1.0)).collect()).collect())
            .collect();
        let bias = (0..c_out).map(|_| uniform(rng, -1.0, 1.0)).collect();
        Self { dims, coords, feats, kernel, bias, k }
    }

    fn tensor<T: Real>(&self) -> sparsedet3d::Result<SparseTensor<T>> {
        let c_in = self.feats[0].len();
        let m = Matrix::from_fn(self.coords.len(), c_in, |r, c| T::of(self.feats[r][c]));
        SparseTensor::new(self.coords.clone(), m, 1, [0.1; 3])
    }

    fn weights<T: Real>(&self) -> sparsedet3d::Result<ConvWeights<T>> {
        let c_in = self.kernel[0].len();
        let c_out = self.kernel[0][0].len();
        let m = Matrix::from_fn(self.k.pow(3) * c_in, c_out, |r, c| T::of(self.kernel[r / c_in][r % c_in][c]));
        ConvWeights::new(self.k, m, Some(self.bias.iter().map(|&b| T::of(b)).collect()))
    }

    fn dense(&self, out: &[Coord3]) -> Vec<f64> {
        dense_conv(self.dims, &self.coords, &self.feats, &self.kernel, Some(&self.bias), self.k, 1, out)
            .into_iter()
            .flatten()
            .collect()
    }
}

/// Sparse convolution against a dense convolution on random grids.
pub fn criterion_1() -> Outcome {
    run("criterion 1".into(), "sparse conv vs dense oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED);
        let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
        for inst in 0..50 {
            let occupancy = [0.05, 0.3, 1.0][inst % 3];
            let k = [1, 3, 5][(inst / 3) % 3];
            let dims = [rng.random_range(4..=16), rng.random_range(4..=16), rng.random_range(4..=16)];
            let (c_in, c_out) = (rng.random_range(1..=4), rng.random_range(1..=4));
            let case = ConvCase::random(&mut rng, dims, occupancy, k, c_in, c_out);
            let expect = case.dense(&case.coords);
            let y64 = sparse_conv_forward(&case.tensor::<f64>()?, &case.weights::<f64>()?, &case.coords, 1, false)?;
            worst64 = worst64.max(rel_err(y64.tensor.feats().as_slice(), &expect));
            let y32 = sparse_conv_forward(&case.tensor::<f32>()?, &case.weights::<f32>()?, &case.coords, 1, false)?;
            let got: Vec<f64> = y32.tensor.feats().as_slice().iter().map(|v| *v as f64).collect();
            worst32 = worst32.max(rel_err(&got, &expect));
        }
        Ok((
            worst64 <= CONV_TOL_F64 && worst32 <= CONV_TOL_F32,
            format!("50 instances; max rel err f64 {worst64:.2e} (tol {CONV_TOL_F64:.0e}), f32 {worst32:.2e} (tol {CONV_TOL_F32:.0e})"),
        ))
    })
}

fn conv_grad_error(rng: &mut ChaCha8Rng, k: usize, strided: bool) -> sparsedet3d::Result<f64> {
    let mut case = ConvCase::random(rng, [6, 6, 6], 0.3, k, 2, 3);
    case.coords.truncate(200);
    case.feats.truncate(200);
    let x = case.tensor::<f64>()?;
    let w = case.weights::<f64>()?;
    let (out, stride) =
        if strided { (strided_downsample_coords(&case.coords, 2), 2) } else { (case.coords.clone(), 1) };
    let y = sparse_conv_forward(&x, &w, &out, stride, false)?;
    let r = Matrix::from_fn(y.tensor.len(), 3, |_, _| uniform(rng, -1.0, 1.0));
    let (gx, gw) = sparse_conv_backward(&x, &w, &y.kmap, &r)?;
    let objective = |x: &SparseTensor<f64>, w: &ConvWeights<f64>| -> f64 {
        let y = sparse_conv_forward(x, w, &out, stride, false).expect("valid instance");
        y.tensor.feats().as_slice().iter().zip(r.as_slice()).map(|(a, b)| a * b).sum()
    };
    let xf = x.feats().as_slice().to_vec();
    let num_x = central_diff(
        &mut |v| objective(&x.with_feats(Matrix::from_vec(x.len(), 2, v.to_vec()).unwrap()).unwrap(), &w),
        &xf,
        FD_STEP,
    );
    let kf = w.kernel().as_slice().to_vec();
    let bias = w.bias().map(<[f64]>::to_vec);
    let num_w = central_diff(
        &mut |v| {
            let w2 = ConvWeights::new(k, Matrix::from_vec(kf.len() / 3, 3, v.to_vec()).unwrap(), bias.clone()).unwrap();
            objective(&x, &w2)
        },
        &kf,
        FD_STEP,
    );
    let bv = bias.clone().unwrap_or_default();
    let num_b = central_diff(
        &mut |v| {
            let w2 = ConvWeights::new(k, w.kernel().clone(), Some(v.to_vec())).unwrap();
            objective(&x, &w2)
        },
        &bv,
        FD_STEP,
    );
    Ok(rel_err(gx.as_slice(), &num_x)
        .max(rel_err(gw.kernel().as_slice(), &num_w))
        .max(rel_err(gw.bias().unwrap_or(&[]), &num_b)))
}

/// Random box and an anchor whose decoded prediction overlaps it with IoU
/// strictly inside `[0.1, 0.9]`.
pub(crate) fn anchor_pair(rng: &mut ChaCha8Rng) -> (Anchor, Box3D, [f64; 8]) {
    loop {
        let gt = random_box(rng, 1.0);
        let a = Anchor {
            center: gt.to_world([uniform(rng, -0.3, 0.3) * gt.w, uniform(rng, -0.3, 0.3) * gt.l, 0.0]),
            cell: [uniform(rng, 0.1, 0.4), uniform(rng, 0.1, 0.4), uniform(rng, 0.1, 0.4)],
            prior: [uniform(rng, 0.3, 2.0), uniform(rng, 0.3, 2.0), uniform(rng, 0.3, 2.0)],
        };
        let mut raw = encode_stage1(&a, &gt);
        for v in &mut raw {
            *v += uniform(rng, -0.4, 0.4);
        }
        let Ok(pred) = Box3D::from_array(decode_stage1(&a, raw)) else { continue };
        let iou = iou3d(&pred, &gt);
        if (0.1..=0.9).contains(&iou) {
            return (a, gt, raw);
        }
    }
}

fn loss_grad_errors(rng: &mut ChaCha8Rng) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();

    let logits: Vec<f64> = (0..30).map(|_| uniform(rng, -3.0, 3.0)).collect();
    let targets: Vec<Option<usize>> =
        (0..10).map(|_| if rng.random_bool(0.3) { None } else { Some(rng.random_range(0..3)) }).collect();
    let focal = |v: &[f64]| focal_loss_logits(&Matrix::from_vec(10, 3, v.to_vec()).unwrap(), &targets, 2.0, 0.25);
    let num = central_diff(&mut |v| focal(v).value, &logits, FD_STEP);
    out.push(("focal", rel_err(focal(&logits).grad.as_slice(), &num)));

    let target: Vec<f64> = (0..40).map(|_| uniform(rng, -2.0, 2.0)).collect();
    let pred: Vec<f64> = target
        .iter()
        .map(|t| loop {
            let p = t + uniform(rng, -2.5, 2.5);
            if ((p - t).abs() - 1.0).abs() > 1e-3 {
                break p;
            }
        })
        .collect();
    let tm = Matrix::from_vec(40, 1, target.clone()).unwrap();
    let sl = |v: &[f64]| smooth_l1(&Matrix::from_vec(40, 1, v.to_vec()).unwrap(), &tm, 1.0);
    let num = central_diff(&mut |v| sl(v).value, &pred, FD_STEP);
    out.push(("vote smooth-l1", rel_err(sl(&pred).grad.as_slice(), &num)));

    let z: Vec<f64> = (0..20).map(|_| uniform(rng, -3.0, 3.0)).collect();
    let t: Vec<f64> = (0..20).map(|_| uniform(rng, 0.0, 1.0)).collect();
    let num = central_diff(&mut |v| soft_bce_logits(v, &t).0, &z, FD_STEP);
    out.push(("centerness bce", rel_err(&soft_bce_logits(&z, &t).1, &num)));

    let pairs: Vec<(Anchor, Box3D, [f64; 8])> = (0..5).map(|_| anchor_pair(rng)).collect();
    let anchors: Vec<Anchor> = pairs.iter().map(|p| p.0).collect();
    let gts: Vec<Box3D> = pairs.iter().map(|p| p.1).collect();
    let raw: Vec<f64> = pairs.iter().flat_map(|p| p.2).collect();
    let il = |v: &[f64]| iou_loss(&Matrix::from_vec(5, 8, v.to_vec()).unwrap(), &gts, &AnchorDecoder(&anchors));
    let num = central_diff(&mut |v| il(v).value, &raw, FD_STEP);
    out.push(("box iou", rel_err(il(&raw).grad.as_slice(), &num)));

    let props: Vec<Box3D> = (0..5).map(|_| random_box(rng, 1.0)).collect();
    let mut tgt = Vec::new();
    let mut pred = Vec::new();
    let mut gts = Vec::new();
    for p in &props {
        loop {
            let g = Box3D::new(
                [p.cx + uniform(rng, -0.2, 0.2), p.cy + uniform(rng, -0.2, 0.2), p.cz + uniform(rng, -0.2, 0.2)],
                [p.w * uniform(rng, 0.7, 1.3), p.l * uniform(rng, 0.7, 1.3), p.h * uniform(rng, 0.7, 1.3)],
                p.theta + uniform(rng, -0.5, 0.5),
            )
            .unwrap();
            let t = encode_residual(p, &g);
            let q: [f64; 8] = std::array::from_fn(|k| loop {
                let v = t[k] + uniform(rng, -0.3, 0.3);
                if ((v - t[k]).abs() - 1.0).abs() > 1e-3 {
                    break v;
                }
            });
            let Ok(dec) = decode_residual_box(p, q) else { continue };
            if (0.1..=0.9).contains(&iou3d(&dec, &g)) {
                tgt.extend(t);
                pred.extend(q);
                gts.push(g);
                break;
            }
        }
    }
    let tm = Matrix::from_vec(5, 8, tgt).unwrap();
    let rl =
        |v: &[f64]| rebox_loss(&Matrix::from_vec(5, 8, v.to_vec()).unwrap(), &tm, &gts, &ResidualDecoder(&props), 1.0);
    let num = central_diff(&mut |v| rl(v).value, &pred, FD_STEP);
    out.push(("rebox", rel_err(rl(&pred).grad.as_slice(), &num)));

    // Stage-I head: two groups, four anchors in total, all three terms.
    let pairs: Vec<(Anchor, Box3D, [f64; 8])> = (0..3)
        .map(|i| {
            let (mut a, g, raw) = anchor_pair(rng);
            let shift = 10.0 * i as f64;
            a.center[0] += shift;
            let g = Box3D::new([g.cx + shift, g.cy, g.cz], g.dims(), g.theta).unwrap();
            (a, g, raw)
        })
        .collect();
    let gt: Vec<(Box3D, usize)> = pairs.iter().enumerate().map(|(i, p)| (p.1, i % 3)).collect();
    let far = Anchor { center: [50.0, 50.0, 50.0], cell: [0.2; 3], prior: [1.0; 3] };
    let groups = [vec![pairs[0].0, far], vec![pairs[1].0, pairs[2].0]];
    let mut x = Vec::new();
    for (g, anchors) in groups.iter().enumerate() {
        for (i, _) in anchors.iter().enumerate() {
            let raw = if g == 0 && i == 1 { [0.0; 8] } else { pairs[g + i].2 };
            x.extend((0..3).map(|_| uniform(rng, -2.0, 2.0)));
            x.extend(raw);
            x.push(uniform(rng, -2.0, 2.0));
        }
    }
    let heads = |v: &[f64]| -> Vec<HeadRows> {
        let mut off = 0;
        groups
            .iter()
            .map(|anchors| {
                let n = anchors.len();
                let row = |r: usize| &v[off + r * 12..off + (r + 1) * 12];
                let h = HeadRows {
                    cls: Matrix::from_fn(n, 3, |r, c| row(r)[c]),
                    reg: Matrix::from_fn(n, 8, |r, c| row(r)[3 + c]),
                    ctr: Matrix::from_fn(n, 1, |r, _| row(r)[11]),
                    anchors: anchors.clone(),
                };
                off += n * 12;
                h
            })
            .collect()
    };
    let total = |v: &[f64]| {
        let l = stage1_losses(&heads(v), &gt, 2.0, 0.25);
        l.cls + l.cntr + l.bbox
    };
    let l = stage1_losses(&heads(&x), &gt, 2.0, 0.25);
    let mut analytic = Vec::new();
    for (dc, dr, dt) in &l.grads {
        for r in 0..dc.rows() {
            analytic.extend(dc.row(r));
            analytic.extend(dr.row(r));
            analytic.extend(dt.row(r));
        }
    }
    let num = central_diff(&mut |v| total(v), &x, FD_STEP);
    out.push(("stage-I head", rel_err(&analytic, &num)));
    out
}

/// Analytic gradients of the convolution and of every loss term against
/// central finite differences.
pub fn criterion_2() -> Outcome {
    run("criterion 2".into(), "gradient checks", || {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
        let mut conv = 0.0f64;
        for (k, strided) in [(1, false), (3, false), (5, false), (3, true)] {
            conv = conv.max(conv_grad_error(&mut rng, k, strided)?);
        }
        let mut losses = Vec::new();
        for _ in 0..3 {
            for (name, e) in loss_grad_errors(&mut rng) {
                match losses.iter_mut().find(|(n, _)| *n == name) {
                    Some((_, w)) => *w = f64::max(*w, e),
                    None => losses.push((name, e)),
                }
            }
        }
        let worst = losses.iter().map(|l| l.1).fold(0.0, f64::max);
        let names: Vec<String> = losses.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
        Ok((
            conv <= CONV_GRAD_TOL && worst <= LOSS_GRAD_TOL,
            format!("conv {conv:.1e} (tol {CONV_GRAD_TOL:.0e}); losses {} (tol {LOSS_GRAD_TOL:.0e})", names.join(", ")),
        ))
    })
}

fn unit(c: [f64; 3], d: [f64; 3], t: f64) -> Box3D {
    Box3D::new(c, d, t).expect("valid box")
}

/// Axis-aligned and right-angle cases with closed-form IoU.
pub fn analytic_iou_cases() -> Vec<(Box3D, Box3D, f64)> {
    vec![
        (unit([0.0; 3], [1.0; 3], 0.0), unit([0.5, 0.0, 0.0], [1.0; 3], 0.0), 1.0 / 3.0),
        (unit([0.0; 3], [1.0; 3], 0.0), unit([0.0; 3], [1.0; 3], 0.0), 1.0),
        (unit([0.0; 3], [1.0; 3], 0.0), unit([3.0, 0.0, 0.0], [1.0; 3], 0.0), 0.0),
        (unit([0.0; 3], [1.0; 3], 0.0), unit([0.0; 3], [0.5; 3], 0.0), 0.125),
        (unit([0.0; 3], [1.0; 3], 0.0), unit([0.5, 0.5, 0.5], [1.0; 3], 0.0), 0.125 / 1.875),
        (unit([0.0; 3], [1.0; 3], 0.0), unit([0.0; 3], [1.0; 3], PI / 2.0), 1.0),
        (unit([0.0; 3], [2.0, 1.0, 1.0], 0.0), unit([0.0; 3], [2.0, 1.0, 1.0], PI / 2.0), 1.0 / 3.0),
        (unit([0.0; 3], [1.0; 3], 0.0), unit([0.0, 0.0, 0.75], [1.0; 3], 0.0), 0.25 / 1.75),
    ]
}

/// Rotated IoU against Monte-Carlo volumes and closed forms.
pub fn criterion_3() -> Outcome {
    run("criterion 3".into(), "rotated IoU vs Monte Carlo", || {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3);
        let mut worst_mc = 0.0f64;
        for _ in 0..500 {
            let a = random_box(&mut rng, 1.0);
            let c = a.to_world([uniform(&mut rng, -0.5, 0.5) * a.w, uniform(&mut rng, -0.5, 0.5) * a.l, 0.0]);
            let b = Box3D::new(
                [c[0], c[1], a.cz + uniform(&mut rng, -0.5, 0.5) * a.h],
                [uniform(&mut rng, 0.3, 2.0), uniform(&mut rng, 0.3, 2.0), uniform(&mut rng, 0.3, 2.0)],
                uniform(&mut rng, -PI, PI),
            )?;
            worst_mc = worst_mc.max((iou3d(&a, &b) - monte_carlo_iou(&a, &b, MC_SAMPLES, &mut rng)).abs());
        }
        let worst_exact = analytic_iou_cases().iter().map(|(a, b, e)| (iou3d(a, b) - e).abs()).fold(0.0, f64::max);
        Ok((
            worst_mc <= MC_TOL && worst_exact <= ANALYTIC_IOU_TOL,
            format!(
                "500 pairs x {MC_SAMPLES} samples: max |err| {worst_mc:.4} (tol {MC_TOL}); closed forms {worst_exact:.1e} (tol {ANALYTIC_IOU_TOL:.0e})"
            ),
        ))
    })
}

/// Slicing, class-grid cell sizes and the grouping kernel map.
pub fn criterion_4() -> Outcome {
    run("criterion 4".into(), "class-aware grouping semantics", || {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED + 4);
        let n_class = 3;
        let alpha = 0.15;
        let cfg = ProposalConfig { n_class, feat_channels: 4, vote_hidden: 4, group_channels: 4, k_a: 9, alpha };
        let mut params = ParamStore::<f64>::new();
        let net = ProposalNet::new(cfg, &mut params, &mut rng)?;
        let (mut slices, mut cells, mut triples) = (0usize, 0usize, 0usize);
        let mut failures = Vec::new();
        for inst in 0..100 {
            let n = rng.random_range(100..=600);
            let positions: Vec<[f64; 3]> = (0..n)
                .map(|_| [uniform(&mut rng, 0.0, 4.0), uniform(&mut rng, 0.0, 4.0), uniform(&mut rng, 0.0, 2.0)])
                .collect();
            let feats = Matrix::from_fn(n, 4, |_, _| uniform(&mut rng, -1.0, 1.0));
            let scores = Matrix::from_fn(n, n_class, |_, _| rng.random::<f64>());
            let tau = uniform(&mut rng, 0.05, 0.5);
            let dims: Vec<[f64; 3]> = (0..n_class)
                .map(|_| [uniform(&mut rng, 0.3, 2.0), uniform(&mut rng, 0.3, 2.0), uniform(&mut rng, 0.3, 2.0)])
                .collect();
            let sizes = ClassSizeTable::new(dims.clone())?;
            let votes = PointCloud::new(positions.clone(), Some(feats.clone()))?;
            let grouped = sparsedet3d::proposal::class_aware_group(&votes, &scores, tau, &sizes, &net, &params)?;
            for j in 0..n_class {
                let brute: Vec<u32> = (0..n).filter(|&i| scores.get(i, j) > tau).map(|i| i as u32).collect();
                let slice = slice_class(&scores, j, tau);
                slices += 1;
                if slice != brute {
                    failures.push(format!("instance {inst} class {j}: slice differs"));
                }
                let cell = dims[j].map(|d| alpha * d);
                let sub = PointCloud::new(
                    slice.iter().map(|&i| positions[i as usize]).collect(),
                    Some(Matrix::from_fn(slice.len(), 4, |r, c| feats.get(slice[r] as usize, c))),
                )?;
                let revox: SparseTensor<f64> = class_revoxelize(&sub, j, &sizes, alpha)?;
                cells += 2;
                if revox.voxel_size() != cell || grouped[j].voxel_size() != cell {
                    failures.push(format!("instance {inst} class {j}: cell size differs"));
                }
                let expect: BTreeSet<Coord3> = slice
                    .iter()
                    .map(|&i| {
                        let p = positions[i as usize];
                        Coord3::new(
                            (p[0] / cell[0]).floor() as i32,
                            (p[1] / cell[1]).floor() as i32,
                            (p[2] / cell[2]).floor() as i32,
                        )
                    })
                    .collect();
                let coords = grouped[j].coords();
                if coords.iter().copied().collect::<BTreeSet<_>>() != expect || coords.len() != expect.len() {
                    failures.push(format!("instance {inst} class {j}: class voxels are not the in-class votes"));
                }
                let kmap = build_kernel_map(coords, coords, 9, 1)?;
                let got: BTreeSet<(u32, u32, u32)> = kmap.triples().collect();
                triples += got.len();
                if got.len() != kmap.len() || got != brute_kernel_map(coords, coords, 9, 1) {
                    failures.push(format!("instance {inst} class {j}: grouping neighbors differ"));
                }
            }
        }
        Ok((
            failures.is_empty(),
            if failures.is_empty() {
                format!("{slices} slices, {cells} cell sizes, {triples} k=9 neighbor triples verified")
            } else {
                failures[..failures.len().min(3)].join("; ")
            },
        ))
    })
}

fn box_gap(a: &Box3D, b: &Box3D) -> f64 {
    let p = a.to_array();
    let q = b.to_array();
    let lin = (0..6).map(|k| (p[k] - q[k]).abs()).fold(0.0, f64::max);
    lin.max(wrap_angle(p[6] - q[6]).abs())
}

/// Scene with class sizes matching the default synthetic spec.
fn sized_config() -> RunConfig {
    RunConfig { class_sizes: SynthSpec::default().classes.iter().map(|c| c.mean).collect(), ..RunConfig::default() }
}

/// Encode/decode identities and checkpoint round-trip inference.
pub fn criterion_5() -> Outcome {
    run("criterion 5".into(), "round trips", || {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED + 5);
        let (mut res, mut st1) = (0.0f64, 0.0f64);
        for _ in 0..1000 {
            let p = random_box(&mut rng, 3.0);
            let g = random_box(&mut rng, 3.0);
            res = res.max(box_gap(&decode_residual_box(&p, encode_residual(&p, &g))?, &g));
            let a = Anchor {
                center: [uniform(&mut rng, -3.0, 3.0), uniform(&mut rng, -3.0, 3.0), uniform(&mut rng, -3.0, 3.0)],
                cell: [uniform(&mut rng, 0.05, 0.5), uniform(&mut rng, 0.05, 0.5), uniform(&mut rng, 0.05, 0.5)],
                prior: [uniform(&mut rng, 0.3, 2.0), uniform(&mut rng, 0.3, 2.0), uniform(&mut rng, 0.3, 2.0)],
            };
            st1 = st1.max(box_gap(&Box3D::from_array(decode_stage1(&a, encode_stage1(&a, &g)))?, &g));
        }
        let config = RunConfig { score_min: 0.0, ..sized_config() };
        let det = Detector::<f32>::new(config)?;
        let scene = &synth_scenes(1, SEED, &SynthSpec::default())?[0];
        let before = det.run_inference(scene)?;
        let mut buf = Vec::new();
        det.checkpoint().write(&mut buf)?;
        let restored = Detector::<f32>::from_checkpoint(&Checkpoint::read(&buf[..])?)?;
        let after = restored.run_inference(scene)?;
        let bits = |d: &sparsedet3d::pipeline::Detection| {
            [d.score, d.cx, d.cy, d.cz, d.w, d.l, d.h, d.theta].map(f64::to_bits)
        };
        let same = !before.is_empty()
            && before.len() == after.len()
            && before.iter().zip(&after).all(|(a, b)| a.class == b.class && bits(a) == bits(b));
        Ok((
            res <= ROUND_TRIP_TOL && st1 <= ROUND_TRIP_TOL && same,
            format!(
                "1000 pairs: residual {res:.1e}, stage-I {st1:.1e} (tol {ROUND_TRIP_TOL:.0e}); checkpoint reload {} on {} detections",
                if same { "bit-identical" } else { "DIFFERS" },
                before.len()
            ),
        ))
    })
}

/// NMS and target assignment against brute force.
pub fn criterion_6() -> Outcome {
    run("criterion 6".into(), "NMS and target assignment", || {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED + 6);
        let mut failures = Vec::new();
        let mut kept_total = 0;
        for inst in 0..20 {
            let boxes: Vec<(Box3D, f64)> = (0..200)
                .map(|_| {
                    let b = Box3D::new(
                        [uniform(&mut rng, 0.0, 3.0), uniform(&mut rng, 0.0, 3.0), uniform(&mut rng, 0.0, 1.0)],
                        [uniform(&mut rng, 0.3, 1.2), uniform(&mut rng, 0.3, 1.2), uniform(&mut rng, 0.3, 1.2)],
                        uniform(&mut rng, -PI, PI),
                    )
                    .unwrap();
                    // Coarse scores so ties occur.
                    (b, (rng.random::<f64>() * 20.0).floor() / 20.0)
                })
                .collect();
            let thr = [0.25, 0.5][inst % 2];
            let got = nms_indices(&boxes, 0.1, thr);
            kept_total += got.len();
            if got != brute_nms(&boxes, 0.1, thr) {
                failures.push(format!("nms instance {inst}"));
            }
        }
        let mut fg_total = 0;
        for inst in 0..10 {
            let mut gt: Vec<(Box3D, usize)> = (0..rng.random_range(10..=30))
                .map(|_| {
                    let b = Box3D::new(
                        [uniform(&mut rng, 0.5, 3.5), uniform(&mut rng, 0.5, 3.5), uniform(&mut rng, 0.3, 1.0)],
                        [uniform(&mut rng, 0.3, 1.5), uniform(&mut rng, 0.3, 1.5), uniform(&mut rng, 0.3, 1.5)],
                        uniform(&mut rng, -PI, PI),
                    )
                    .unwrap();
                    (b, rng.random_range(0..3))
                })
                .collect();
            // Nested boxes and an exact duplicate exercise the volume and index ties.
            let (b0, _) = gt[0];
            gt.push((Box3D::new(b0.center(), [b0.w * 0.5, b0.l * 0.5, b0.h * 0.5], b0.theta)?, 1));
            gt.push((b0, 2));
            let pts: Vec<[f64; 3]> = (0..5000)
                .map(|_| [uniform(&mut rng, 0.0, 4.0), uniform(&mut rng, 0.0, 4.0), uniform(&mut rng, 0.0, 1.5)])
                .collect();
            let t = assign_targets(&pts, &gt);
            let brute = brute_assign(&pts, &gt);
            fg_total += brute.iter().flatten().count();
            let ok = t.box_id == brute
                && pts.iter().zip(&brute).enumerate().all(|(i, (p, b))| match b {
                    Some(k) => {
                        let g = &gt[*k].0;
                        t.class_id[i] == Some(gt[*k].1)
                            && t.center_offset[i] == Some([g.cx - p[0], g.cy - p[1], g.cz - p[2]])
                    }
                    None => t.class_id[i].is_none() && t.center_offset[i].is_none(),
                });
            if !ok {
                failures.push(format!("assignment instance {inst}"));
            }
        }
        Ok((
            failures.is_empty(),
            if failures.is_empty() {
                format!(
                    "20 x 200-box NMS ({kept_total} kept), 10 x 5000-voxel assignments ({fg_total} foreground) exact"
                )
            } else {
                failures.join("; ")
            },
        ))
    })
}

/// Scenes used by the end-to-end criterion.
pub const E2E_SCENES: usize = 10;
pub const E2E_SEED: u64 = 0;

/// End-to-end desk-scale training, inference and evaluation.
pub fn criterion_7() -> Outcome {
    run("criterion 7".into(), "desk-scale end-to-end", || {
        let scenes = synth_scenes(E2E_SCENES, E2E_SEED, &SynthSpec::default())?;
        let config = RunConfig::default();
        let t0 = Instant::now();
        let (det, log) = run_toy_train::<f32>(&scenes, &config, |_| {})?;
        let train_s = t0.elapsed().as_secs_f64();
        let window = (E2E_SCENES / config.batch_size).max(1);
        let mean =
            |r: &[sparsedet3d::pipeline::StepReport]| r.iter().map(|s| s.loss.total).sum::<f64>() / r.len() as f64;
        let first = mean(&log[..window]);
        let last = mean(&log[log.len() - window..]);
        let mut preds = Vec::new();
        for s in &scenes {
            preds.extend(det.run_inference(s)?);
        }
        let gts: Vec<_> = scenes.iter().map(|s| (s.scene_id.clone(), s.gt.clone())).collect();
        let r = eval_map(&preds, &gts, config.n_class, 0.25)?;
        let elapsed = t0.elapsed().as_secs_f64();
        Ok((
            last < LOSS_RATIO * first && r.recall >= MIN_RECALL && r.map >= MIN_MAP && elapsed < TRAIN_BUDGET_S,
            format!(
                "{} steps in {train_s:.0}s; loss {first:.3} -> {last:.3} (ratio {:.2}, need < {LOSS_RATIO}); recall@0.25 {:.3} (need >= {MIN_RECALL}); mAP@0.25 {:.3} (need >= {MIN_MAP}); total {elapsed:.0}s",
                log.len(),
                last / first,
                r.recall,
                r.map
            ),
        ))
    })
}

/// Shipped defaults as they must appear in the configuration dump.
pub const DEFAULT_LINES: &[&str] = &[
    "voxel_size = 0.02",
    "highres_voxel_size = 0.04",
    "alpha = 0.15",
    "tau_init = 0.15",
    "tau_step = 0.02",
    "tau_min = 0.05",
    "k_a = 9",
    "roi_grid_1 = 7,7,7",
    "roi_grid_2 = 1,1,1",
    "k_p_1 = 5",
    "k_p_2 = 7",
    "nms_iou = 0.5",
    "score_min = 0.01",
    "roi_max_train = 128",
    "roi_iou_train = 0.3",
    "w_sem = 1.0",
    "w_vote = 1.0",
    "w_cntr = 1.0",
    "w_box = 1.0",
    "w_cls = 1.0",
    "w_rebox = 0.5",
];

/// Every default hyper-parameter is present byte for byte.
pub fn criterion_8() -> Outcome {
    run("criterion 8".into(), "hyper-parameter fidelity", || {
        let dump = RunConfig::default().dump();
        let lines: Vec<&str> = dump.lines().collect();
        let missing: Vec<&str> = DEFAULT_LINES.iter().copied().filter(|l| !lines.contains(l)).collect();
        let reparsed = RunConfig::parse(&dump)? == RunConfig::default();
        Ok((
            missing.is_empty() && reparsed,
            if missing.is_empty() {
                format!("{} default lines matched; dump re-parses to the defaults: {reparsed}", DEFAULT_LINES.len())
            } else {
                format!("missing: {}", missing.join(" | "))
            },
        ))
    })
}

/// All criteria in order; the end-to-end run is optional because it trains.
pub fn all_criteria(include_training: bool) -> Vec<Outcome> {
    let mut out = vec![criterion_1(), criterion_2(), criterion_3(), criterion_4(), criterion_5(), criterion_6()];
    if include_training {
        out.push(criterion_7());
    }
    out.push(criterion_8());
    out
}
