use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sparsedet3d"))
}

fn ok(cmd: &mut Command) -> String {
    let out = cmd.env("SPARSEDET3D_THREADS", "2").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_small_config(path: &Path) {
    let text = "stage_channels = 8,8,16,16\nblocks_per_stage = 1\nhighres_channels = 8\nout_channels = 16\n\
                vote_hidden = 16\ngroup_channels = 16\nroi_channels_1 = 8\nroi_channels_2 = 16\n\
                refine_hidden = 16\nscore_min = 0\n";
    std::fs::write(path, text).unwrap();
}

#[test]
fn synth_train_infer_eval() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    let cfg = dir.path().join("run.cfg");
    let ck = dir.path().join("model.sdck");
    let dets = dir.path().join("dets.jsonl");
    write_small_config(&cfg);
    ok(bin().args(["synth", "--count", "2", "--seed", "4", "--out"]).arg(&scenes));
    assert_eq!(std::fs::read_dir(&scenes).unwrap().count(), 4);
    ok(bin()
        .args(["train", "--steps", "2", "--precision", "f64", "--config"])
        .arg(&cfg)
        .arg("--scenes")
        .arg(&scenes)
        .arg("--checkpoint")
        .arg(&ck));
    assert_eq!(&std::fs::read(&ck).unwrap()[..4], b"SDCK");
    ok(bin().arg("infer").arg("--scenes").arg(&scenes).arg("--checkpoint").arg(&ck).arg("--out").arg(&dets));
    assert!(!std::fs::read_to_string(&dets).unwrap().is_empty());
    let report = ok(bin().arg("eval").arg("--scenes").arg(&scenes).arg("--detections").arg(&dets));
    assert!(report.contains("iou 0.25: mAP") && report.contains("iou 0.5: mAP"), "{report}");
}

#[test]
fn bench_writes_tsv() {
    let out = ok(bin().args(["bench", "--grid", "6", "--reps", "1"]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 1 + 9);
    assert!(lines[1..].iter().all(|l| l.split('\t').count() == lines[0].split('\t').count()));
}

#[test]
fn missing_flags_are_reported() {
    let out = bin().arg("infer").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));
}

#[test]
fn bad_thread_count_is_rejected() {
    let out = bin().args(["bench", "--grid", "4"]).env("SPARSEDET3D_THREADS", "many").output().unwrap();
    assert!(!out.status.success());
}
