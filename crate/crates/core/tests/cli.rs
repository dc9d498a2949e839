use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use roimatcher::data::{load_manifest, Split};

fn roimatcher(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roimatcher")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TOY: [&str; 8] = [
    "--set",
    "model.input_size=[64,64]",
    "--set",
    "model.base_channels=4",
    "--set",
    "model.head_channels=8",
    "--set",
    "train.batch_size=2",
];

#[test]
fn synth_train_eval_infer_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (data, data2) = (dir.path().join("data"), dir.path().join("data2"));
    for d in [&data, &data2] {
        let o = roimatcher(&["synth", "--count", "10", "--seed", "4", "--out", path(d)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let manifest = data.join("manifest.json");
    assert_eq!(fs::read(&manifest).unwrap(), fs::read(data2.join("manifest.json")).unwrap());
    let m = load_manifest(&manifest).unwrap();
    let count = |s| m.records_in(s).count();
    assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (24, 3, 3));

    let run = dir.path().join("run");
    let mut args = vec!["train", "--manifest", path(&manifest), "--out", path(&run), "--set", "train.max_iterations=3", "--set", "train.eval_every=3"];
    args.extend(TOY);
    let o = roimatcher(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["iteration", "lr", "total", "region", "kernel", "agg", "dis"] {
            assert!(v.get(key).is_some(), "missing {key} in {line}");
        }
    }
    let ckpt = run.join("best.ckpt");
    assert!(ckpt.is_file() && run.join("last.ckpt").is_file());

    let eval = dir.path().join("eval");
    let o = roimatcher(&["eval", "--checkpoint", path(&ckpt), "--manifest", path(&manifest), "--split", "test", "--out", path(&eval)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("Level I mIoU,Level I F,"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["counts"]["images"], 3);

    let rec = m.records_in(Split::Test).next().unwrap();
    let infer = dir.path().join("infer");
    let o = roimatcher(&[
        "infer",
        "--checkpoint",
        path(&ckpt),
        "--ref-image",
        path(&data.join(&rec.ref_image)),
        "--ref-mask",
        path(&data.join(&rec.ref_mask)),
        "--tgt-image",
        path(&data.join(&rec.tgt_image)),
        "--gt-polygons",
        path(&data.join(&rec.tgt_polygons)),
        "--viz",
        "--out",
        path(&infer),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let result: serde_json::Value = serde_json::from_str(&fs::read_to_string(infer.join("result.json")).unwrap()).unwrap();
    assert!(result["latency_s"].as_f64().unwrap() > 0.0);
    assert!(result["instances"].is_array());
    let tgt = image::open(data.join(&rec.tgt_image)).unwrap();
    let mask = image::open(infer.join(result["mask_file"].as_str().unwrap())).unwrap();
    assert_eq!((mask.width(), mask.height()), (tgt.width(), tgt.height()));
    assert!(infer.join("overlay.png").is_file());

    let viz = dir.path().join("viz");
    let o = roimatcher(&["viz", "--checkpoint", path(&ckpt), "--manifest", path(&manifest), "--out", path(&viz)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_dir(&viz).unwrap().count(), 3);
}

#[test]
fn errors_map_to_exit_codes_and_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path());

    let o = roimatcher(&["synth", "--count", "1", "--out", out, "--bogus"]);
    assert_eq!(o.status.code(), Some(2));

    let o = roimatcher(&["synth", "--count", "1", "--out", out, "--set", "model.nope=1"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).starts_with("error code=4 kind=config msg=\""), "{}", stderr(&o));

    let missing = dir.path().join("missing.json");
    let o = roimatcher(&["train", "--manifest", path(&missing), "--out", out]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stderr(&o).lines().count(), 1);

    // a checkpoint from another format version is refused as a config error
    let data = dir.path().join("d");
    assert!(roimatcher(&["synth", "--count", "1", "--out", path(&data)]).status.success());
    let run = dir.path().join("r");
    let manifest = data.join("manifest.json");
    let mut args = vec!["train", "--manifest", path(&manifest), "--out", path(&run), "--set", "train.max_iterations=0"];
    args.extend(TOY);
    let o = roimatcher(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = fs::read(run.join("best.ckpt")).unwrap();
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let at = text.find("roimatcher-v1").expect("version tag in header");
    let mut patched = bytes.clone();
    patched[at + "roimatcher-v".len()] = b'9';
    let old = dir.path().join("old.ckpt");
    fs::write(&old, patched).unwrap();
    let o = roimatcher(&["eval", "--checkpoint", path(&old), "--manifest", path(&manifest), "--out", out]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("roimatcher-v9"));
}
