//! Oracle suites beyond the acceptance criteria.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsedet3d::geometry::{centerness, iou3d, Box3D};
use sparsedet3d::losses::{focal_loss, focal_loss_logits, rebox_loss, smooth_l1, soft_bce_logits};
use sparsedet3d::pipeline::io::{read_binary_cloud, read_text_cloud, write_binary_cloud, write_text_cloud, Detection};
use sparsedet3d::pipeline::{eval_map, synth_scenes, SynthSpec};
use sparsedet3d::proposal::{decode_stage1, min_volume_box, stage1_losses, HeadRows};
use sparsedet3d::roipool::{decode_residual_box, encode_residual, ResidualDecoder};
use sparsedet3d::sparse::{build_kernel_map, strided_downsample_coords, upsample_interpolate, Coord3, SparseTensor};
use sparsedet3d::Matrix;

use crate::bench::{run_bench, BenchConfig};
use crate::criteria::{all_criteria, anchor_pair, random_box, run, uniform, Outcome, SEED};
use crate::reference::{brute_downsample, brute_kernel_map, brute_parent, reference_map};

fn oracle(name: &'static str, f: impl FnOnce() -> sparsedet3d::Result<(bool, String)>) -> Outcome {
    run("oracle".into(), name, f)
}

fn random_coords(rng: &mut ChaCha8Rng, n: usize, lo: i32, hi: i32) -> Vec<Coord3> {
    let mut s = BTreeSet::new();
    while s.len() < n {
        s.insert(Coord3::new(rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)));
    }
    let mut v: Vec<Coord3> = s.into_iter().collect();
    // Shuffle so row order carries no structure.
    for i in (1..v.len()).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    v
}

pub fn kernel_map_bruteforce() -> Outcome {
    oracle("kernel map vs double loop", || {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED + 11);
        let mut triples = 0;
        for inst in 0..40 {
            let a = random_coords(&mut rng, 50, 0, 8);
            let b = if inst % 2 == 0 { a.clone() } else { random_coords(&mut rng, 30, 0, 8) };
            let k = [1, 3, 5][inst % 3];
            let dilation = 1 + (inst % 4 == 3) as u32;
            let km = build_kernel_map(&a, &b, k, dilation)?;
            let got: BTreeSet<(u32, u32, u32)> = km.triples().collect();
            if got.len() != km.len() || got != brute_kernel_map(&a, &b, k, dilation as i32) {
                return Ok((false, format!("instance {inst} (k={k}, dilation {dilation}) differs")));
            }
            triples += got.len();
        }
        Ok((true, format!("40 instances, {triples} triples")))
    })
}

pub fn resampling_bruteforce() -> Outcome {
    oracle("downsample and upsample vs set oracles", || {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED + 12);
        for inst in 0..30 {
            let c = random_coords(&mut rng, 80, -12, 12);
            let f = [2, 3, 4][inst % 3];
            let got = strided_downsample_coords(&c, f as u32);
            let set: BTreeSet<Coord3> = got.iter().copied().collect();
            if set.len() != got.len() || set != brute_downsample(&c, f) {
                return Ok((false, format!("downsample instance {inst}")));
            }
            let low_coords: Vec<Coord3> = got.iter().copied().filter(|_| rng.random_bool(0.7)).collect();
            if low_coords.is_empty() {
                continue;
            }
            let feats = Matrix::from_fn(low_coords.len(), 2, |_, _| uniform(&mut rng, -1.0, 1.0));
            let low = SparseTensor::new(low_coords.clone(), feats.clone(), f as u32, [0.1; 3])?;
            let up = upsample_interpolate(&low, &c, 1)?;
            let parents = brute_parent(&low_coords, f, &c);
            for (i, p) in parents.iter().enumerate() {
                let want: Vec<f64> = p.map_or(vec![0.0; 2], |r| feats.row(r).to_vec());
                if up.feats().row(i) != want.as_slice() {
                    return Ok((false, format!("upsample instance {inst} row {i}")));
                }
            }
        }
        Ok((true, "30 instances exact".into()))
    })
}

fn focal_direct(p: f64, positive: bool, gamma: f64, alpha: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    let pt = if positive { p } else { 1.0 - p };
    -alpha * (1.0 - pt).powf(gamma) * pt.ln()
}

fn smooth_direct(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        0.5 * x * x / beta
    } else {
        x.abs() - 0.5 * beta
    }
}

pub fn loss_formulas() -> Outcome {
    oracle("loss formulas", || {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED + 13);
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let (n, c) = (rng.random_range(1..20), rng.random_range(1..5));
            let probs = Matrix::from_fn(n, c, |_, _| rng.random::<f64>());
            let targets: Vec<Option<usize>> =
                (0..n).map(|_| if rng.random_bool(0.3) { None } else { Some(rng.random_range(0..c)) }).collect();
            let mut want = 0.0;
            for (r, t) in targets.iter().enumerate() {
                for k in 0..c {
                    want += focal_direct(probs.get(r, k), *t == Some(k), 2.0, 0.25);
                }
            }
            worst = worst.max((focal_loss(&probs, &targets, 2.0, 0.25) - want / n as f64).abs());
            let beta = uniform(&mut rng, 0.1, 2.0);
            let pred = Matrix::from_fn(n, 3, |_, _| uniform(&mut rng, -3.0, 3.0));
            let tgt = Matrix::from_fn(n, 3, |_, _| uniform(&mut rng, -3.0, 3.0));
            let want: f64 = pred.as_slice().iter().zip(tgt.as_slice()).map(|(a, b)| smooth_direct(a - b, beta)).sum();
            worst = worst.max((smooth_l1(&pred, &tgt, beta).value - want / (3 * n) as f64).abs());
        }
        Ok((worst <= 1e-12, format!("50 focal and smooth-l1 instances; max |err| {worst:.1e}")))
    })
}

pub fn compositional_losses() -> Outcome {
    oracle("stage-I and refinement losses from primitives", || {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED + 14);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let pairs: Vec<_> = (0..4).map(|_| anchor_pair(&mut rng)).collect();
            let gt: Vec<(Box3D, usize)> = pairs.iter().enumerate().map(|(i, p)| (p.1, i % 3)).collect();
            let anchors: Vec<_> = pairs.iter().map(|p| p.0).collect();
            let n = anchors.len();
            let cls = Matrix::from_fn(n, 3, |_, _| uniform(&mut rng, -2.0, 2.0));
            let reg = Matrix::from_fn(n, 8, |r, c| pairs[r].2[c]);
            let ctr = Matrix::from_fn(n, 1, |_, _| uniform(&mut rng, -2.0, 2.0));
            let l = stage1_losses(
                &[HeadRows { cls: cls.clone(), reg, ctr: ctr.clone(), anchors: anchors.clone() }],
                &gt,
                2.0,
                0.25,
            );
            let assigned: Vec<Option<usize>> = anchors.iter().map(|a| min_volume_box(&gt, a.center)).collect();
            let cls_t: Vec<Option<usize>> = assigned.iter().map(|a| a.map(|k| gt[k].1)).collect();
            let want_cls = focal_loss(&cls.map(|z| 1.0 / (1.0 + (-z).exp())), &cls_t, 2.0, 0.25);
            let pos: Vec<usize> = (0..n).filter(|&i| assigned[i].is_some()).collect();
            let logits: Vec<f64> = pos.iter().map(|&i| ctr.get(i, 0)).collect();
            let targets: Vec<f64> =
                pos.iter().map(|&i| centerness(&gt[assigned[i].unwrap()].0, anchors[i].center)).collect();
            let want_ctr = if pos.is_empty() { 0.0 } else { soft_bce_logits(&logits, &targets).0 };
            let want_box = if pos.is_empty() {
                0.0
            } else {
                pos.iter()
                    .map(|&i| {
                        let b = Box3D::from_array(decode_stage1(&anchors[i], pairs[i].2)).unwrap();
                        1.0 - iou3d(&b, &gt[assigned[i].unwrap()].0)
                    })
                    .sum::<f64>()
                    / pos.len() as f64
            };
            worst = worst.max((l.cls - want_cls).abs()).max((l.cntr - want_ctr).abs()).max((l.bbox - want_box).abs());
            // The focal term reported for logits agrees with the one on probabilities.
            worst = worst.max((focal_loss_logits(&cls, &cls_t, 2.0, 0.25).value - want_cls).abs());

            let props: Vec<Box3D> = (0..5).map(|_| random_box(&mut rng, 2.0)).collect();
            let gts: Vec<Box3D> = (0..5).map(|_| random_box(&mut rng, 2.0)).collect();
            let target = Matrix::from_fn(5, 8, |r, c| encode_residual(&props[r], &gts[r])[c]);
            let pred = Matrix::from_fn(5, 8, |r, c| target.get(r, c) + uniform(&mut rng, -0.5, 0.5));
            let mut want = 0.0;
            for r in 0..5 {
                for c in 0..8 {
                    want += smooth_direct(pred.get(r, c) - target.get(r, c), 1.0);
                }
                let row: [f64; 8] = std::array::from_fn(|c| pred.get(r, c));
                want += 1.0 - iou3d(&decode_residual_box(&props[r], row)?, &gts[r]);
            }
            let got = rebox_loss(&pred, &target, &gts, &ResidualDecoder(&props), 1.0).value;
            worst = worst.max((got - want / 5.0).abs());
        }
        Ok((worst <= 1e-10, format!("20 instances; max |err| {worst:.1e}")))
    })
}

pub fn average_precision_reference() -> Outcome {
    oracle("mAP vs reference implementation", || {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED + 15);
        let mut worst = 0.0f64;
        for _ in 0..40 {
            let scenes: Vec<String> = (0..3).map(|i| format!("s{i}")).collect();
            let gts: Vec<(String, Vec<(Box3D, usize)>)> = scenes
                .iter()
                .map(|s| {
                    (
                        s.clone(),
                        (0..rng.random_range(0..5))
                            .map(|_| (random_box(&mut rng, 2.0), rng.random_range(0..3)))
                            .collect(),
                    )
                })
                .collect();
            let mut preds = Vec::new();
            for (s, g) in &gts {
                for (b, c) in g {
                    for _ in 0..rng.random_range(0..3) {
                        let j = Box3D::new(
                            [b.cx + uniform(&mut rng, -0.3, 0.3), b.cy + uniform(&mut rng, -0.3, 0.3), b.cz],
                            b.dims(),
                            b.theta + uniform(&mut rng, -0.3, 0.3),
                        )?;
                        let class = if rng.random_bool(0.8) { *c } else { rng.random_range(0..3) };
                        preds.push((s.clone(), class, rng.random::<f64>(), j));
                    }
                }
                for _ in 0..rng.random_range(0..3) {
                    preds.push((s.clone(), rng.random_range(0..3), rng.random::<f64>(), random_box(&mut rng, 2.0)));
                }
            }
            let dets: Vec<Detection> = preds.iter().map(|(s, c, p, b)| Detection::new(s, *c, *p, b)).collect();
            for thr in [0.25, 0.5] {
                let got = eval_map(&dets, &gts, 3, thr)?.map;
                worst = worst.max((got - reference_map(&preds, &gts, 3, thr)).abs());
            }
        }
        Ok((worst <= 1e-12, format!("40 random instances at IoU 0.25 and 0.5; max |err| {worst:.1e}")))
    })
}

pub fn synthetic_size_statistics() -> Outcome {
    oracle("synthetic box sizes vs class means", || {
        let spec = SynthSpec::default();
        let mut per_class: Vec<Vec<[f64; 3]>> = vec![Vec::new(); spec.n_class()];
        let mut index = 0;
        while per_class.iter().map(Vec::len).sum::<usize>() < 1000 {
            for s in synth_scenes(50, SEED + index, &spec)? {
                for (b, c) in s.gt {
                    per_class[c].push(b.dims());
                }
            }
            index += 1;
        }
        let mut worst = 0.0f64;
        for (c, dims) in per_class.iter().enumerate() {
            let n = dims.len() as f64;
            for k in 0..3 {
                let mean = dims.iter().map(|d| d[k]).sum::<f64>() / n;
                let se = spec.classes[c].std[k] / n.sqrt();
                worst = worst.max((mean - spec.classes[c].mean[k]).abs() / se);
            }
        }
        Ok((
            worst <= 3.0,
            format!(
                "{} boxes; worst deviation {worst:.2} standard errors",
                per_class.iter().map(Vec::len).sum::<usize>()
            ),
        ))
    })
}

pub fn cloud_round_trip() -> Outcome {
    oracle("binary and text cloud round trip", || {
        let scenes = synth_scenes(3, SEED + 16, &SynthSpec::default())?;
        for s in &scenes {
            let mut bin = Vec::new();
            write_binary_cloud(&s.cloud, &mut bin)?;
            let from_bin = read_binary_cloud(&bin[..])?;
            let mut txt = Vec::new();
            write_text_cloud(&from_bin, &mut txt)?;
            let from_txt = read_text_cloud(&txt[..])?;
            let f32_exact = s
                .cloud
                .positions
                .iter()
                .zip(&from_bin.positions)
                .all(|(a, b)| (0..3).all(|k| a[k] as f32 == b[k] as f32 && b[k] == (b[k] as f32) as f64));
            if from_txt != from_bin || !f32_exact {
                return Ok((false, format!("{} differs after round trip", s.scene_id)));
            }
        }
        Ok((true, "3 scenes identical to f32 exactness".into()))
    })
}

pub fn bench_dense_agreement() -> Outcome {
    oracle("benchmark numerics vs dense oracle", || {
        let cfg = BenchConfig { reps: 1, c_in: 4, c_out: 4, ..BenchConfig::default() };
        let rows = run_bench(&cfg)?;
        let worst = rows.iter().map(|r| r.dense_rel_err).fold(0.0, f64::max);
        let full = rows.iter().filter(|r| r.occupancy >= 1.0).all(|r| r.sites == 16 * 16 * 16);
        let cardinal = rows.len() == cfg.occupancies.len() * cfg.kernels.len();
        Ok((
            worst <= 1e-12 && full && cardinal,
            format!("{} rows over a 16^3 grid; max rel err {worst:.1e}", rows.len()),
        ))
    })
}

/// Oracle suites outside the acceptance criteria.
pub fn extra_suites() -> Vec<Outcome> {
    vec![
        kernel_map_bruteforce(),
        resampling_bruteforce(),
        loss_formulas(),
        compositional_losses(),
        average_precision_reference(),
        synthetic_size_statistics(),
        cloud_round_trip(),
        bench_dense_agreement(),
    ]
}

/// Every oracle suite: the acceptance criteria, then the extra suites.
pub fn run_oracles(include_training: bool) -> Vec<Outcome> {
    let mut out = all_criteria(include_training);
    out.extend(extra_suites());
    out
}
