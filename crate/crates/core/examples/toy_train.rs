use std::time::Instant;

use sparsedet3d::pipeline::{eval_map, run_toy_train, synth_scenes, RunConfig, SynthSpec};

fn main() -> sparsedet3d::Result<()> {
    let steps: usize = std::env::args().nth(1).map_or(20, |s| s.parse().expect("steps"));
    let scenes = synth_scenes(10, 0, &SynthSpec::default())?;
    let config = RunConfig { steps, ..RunConfig::default() };
    let t0 = Instant::now();
    let (det, log) = run_toy_train::<f32>(&scenes, &config, |r| {
        if r.step % 20 == 0 {
            let t = &r.loss.terms;
            println!(
                "step {:3} tau {:.2} total {:.4} sem {:.3} vote {:.3} cntr {:.3} box {:.3} cls {:.3} rebox {:.3} roi {} |g| {:.2} {:.1}s",
                r.step, r.tau, r.loss.total, t.sem, t.vote, t.cntr, t.bbox, t.cls, t.rebox,
                r.loss.n_roi, r.grad_norm, t0.elapsed().as_secs_f64()
            );
        }
    })?;
    let first = log[0].loss.total;
    let last = log.last().expect("steps").loss.total;
    println!("{} steps in {:.1}s; loss {first:.4} -> {last:.4}", log.len(), t0.elapsed().as_secs_f64());
    let mut preds = Vec::new();
    for s in &scenes {
        let d = det.run_inference(s)?;
        let props = det.propose(&s.cloud)?;
        println!("{}: {} gt, {} proposals, {} detections", s.scene_id, s.gt.len(), props.len(), d.len());
        preds.extend(d);
    }
    let gts: Vec<_> = scenes.iter().map(|s| (s.scene_id.clone(), s.gt.clone())).collect();
    for thr in [0.25, 0.5] {
        let r = eval_map(&preds, &gts, config.n_class, thr)?;
        println!(
            "iou {thr}: mAP {:.3} recall {:.3} {:?}",
            r.map,
            r.recall,
            r.classes.iter().map(|c| c.ap).collect::<Vec<_>>()
        );
    }
    Ok(())
}
