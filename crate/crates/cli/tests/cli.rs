use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use rcd_core::data::{write_label_png, write_mask_png, write_rgb_png};
use rcd_core::{BinaryChangeMap, ClassVocabulary, RasterImage, SemanticLabelMap};

const SIZE: usize = 32;

fn rcd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcd"))
        .args(args)
        .env_remove("RCD_SEED")
        .output()
        .expect("binary runs")
}

fn image(seed: usize, changed: &[u16]) -> RasterImage {
    let px = (0..SIZE * SIZE)
        .flat_map(|p| {
            let v = ((p * 7 + seed * 13) % 29) as f32 / 40.0 + 0.1;
            match changed[p] {
                1 => [0.9, 0.2, 0.1],
                2 => [0.1, 0.3, 0.9],
                _ => [v, v * 0.8, 0.5],
            }
        })
        .collect();
    RasterImage::new(SIZE, SIZE, px).unwrap()
}

/// Two semantic samples with classes `building` and `water`.
fn write_fixture(root: &Path) {
    let vocab = Arc::new(ClassVocabulary::new(["building", "water"]).unwrap());
    for d in ["im1", "im2", "label1", "label2"] {
        fs::create_dir_all(root.join(d)).unwrap();
    }
    for s in 0..2 {
        let labels: Vec<u16> = (0..SIZE * SIZE)
            .map(|p| {
                let (y, x) = (p / SIZE, p % SIZE);
                match (y / 8 + s, x / 8) {
                    (1, 0) | (1, 1) => 1,
                    (2, 3) => 2,
                    _ => 0,
                }
            })
            .collect();
        let id = format!("s{s}");
        let f = |d: &str| root.join(d).join(format!("{id}.png"));
        write_rgb_png(&f("im1"), &image(s, &vec![0; SIZE * SIZE])).unwrap();
        write_rgb_png(&f("im2"), &image(s, &labels)).unwrap();
        let zeros = SemanticLabelMap::new(SIZE, SIZE, vec![0; SIZE * SIZE], vocab.clone()).unwrap();
        write_label_png(&f("label1"), &zeros).unwrap();
        write_label_png(&f("label2"), &SemanticLabelMap::new(SIZE, SIZE, labels, vocab.clone()).unwrap()).unwrap();
    }
    fs::write(root.join("train.txt"), "s0\ns1\n").unwrap();
}

fn write_config(dir: &Path, out: &str, extra: &str) -> std::path::PathBuf {
    let text = format!(
        "seed = 3\noutput = {out}\nmodel.base_channels = 8\nmodel.heads = 2\nmodel.text_width = 16\n\
         gen.hidden = 8\ngen.time_dim = 8\ngen.timesteps = 20\ngen.steps = 4\n\
         data.toy.root = data\ndata.toy.layout = scd_pairs\ndata.toy.classes = building, water\n\
         data.toy.split.train = train.txt\n\
         train.datasets = toy\ntrain.batch = 2\neval.dataset = toy\neval.split = train\ngen.dataset = toy\n{extra}"
    );
    let p = dir.join(format!("{out}.cfg"));
    fs::write(&p, text).unwrap();
    p
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_eval_infer_generate() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_fixture(&root.join("data"));
    let cfg = write_config(root, "train", "");
    ok(&rcd(&["train-rcdnet", "--config", cfg.to_str().unwrap()]));
    let ck = root.join("train/rcdnet.json");
    assert!(ck.is_file());
    let log = fs::read_to_string(root.join("train/run.log")).unwrap();
    assert!(log.contains("seed=3") && log.contains("config_hash=") && log.contains("epoch=1 loss="));

    let ecfg = write_config(root, "eval", "");
    ok(&rcd(&["eval", "--config", ecfg.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap()]));
    let metrics = fs::read_to_string(root.join("eval/metrics.txt")).unwrap();
    let keys: Vec<&str> = metrics.lines().map(|l| l.split('=').next().unwrap()).collect();
    assert_eq!(keys, ["oa", "miou", "sek", "fscd", "binary_iou", "composite"]);

    let inf = root.join("infer");
    let (pre, post) = (root.join("data/im1/s0.png"), root.join("data/im2/s0.png"));
    ok(&rcd(&[
        "infer",
        "--pre",
        pre.to_str().unwrap(),
        "--post",
        post.to_str().unwrap(),
        "--prompt",
        "building",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--out",
        inf.to_str().unwrap(),
    ]));
    for f in ["logits.txt", "mask.png", "overlay.png"] {
        assert!(inf.join(f).is_file(), "{f} missing");
    }

    let gcfg = write_config(root, "gen", "");
    ok(&rcd(&["generate", "--config", gcfg.to_str().unwrap(), "--count", "2"]));
    let manifest = fs::read_to_string(root.join("gen/synthetic/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 2);
    assert_eq!(fs::read_to_string(root.join("gen/synthetic/ids.txt")).unwrap(), "syn00000\nsyn00001\n");
}

#[test]
fn train_rcdgen_writes_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(&dir.path().join("data"));
    let cfg = write_config(dir.path(), "g", "");
    ok(&rcd(&["train-rcdgen", "--config", cfg.to_str().unwrap()]));
    assert!(dir.path().join("g/rcdgen.json").is_file());
}

#[test]
fn render_and_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gt = BinaryChangeMap::new(2, 2, vec![1, 1, 0, 0]).unwrap();
    let pred = BinaryChangeMap::new(2, 2, vec![1, 0, 1, 0]).unwrap();
    write_mask_png(&d.join("gt.png"), &gt).unwrap();
    write_mask_png(&d.join("pred.png"), &pred).unwrap();
    ok(&rcd(&[
        "render",
        "--gt",
        d.join("gt.png").to_str().unwrap(),
        "--pred",
        d.join("pred.png").to_str().unwrap(),
        "--out",
        d.join("eval.png").to_str().unwrap(),
    ]));
    let img = image::open(d.join("eval.png")).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (2, 2));

    let logits = d.join("logits");
    fs::create_dir_all(&logits).unwrap();
    fs::write(logits.join("1_building.txt"), "1 3\n2 -1 3\n").unwrap();
    fs::write(logits.join("2_water.txt"), "1 3\n5 -2 3\n").unwrap();
    ok(&rcd(&["aggregate", "--in", logits.to_str().unwrap(), "--out", d.join("sem.png").to_str().unwrap()]));
    let sem = image::open(d.join("sem.png")).unwrap().to_luma8();
    assert_eq!(sem.as_raw(), &[2, 0, 1]);
}

#[test]
fn failures_exit_nonzero_with_structured_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "train.datasets = missing\n").unwrap();
    let o = rcd(&["train-rcdnet", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error kind=config task=TrainRcdNet"), "{err}");

    let o = rcd(&["eval", "--config", dir.path().join("nope.cfg").to_str().unwrap(), "--checkpoint", "x"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("kind=io"));
}

#[test]
fn seed_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(&dir.path().join("data"));
    let cfg = write_config(dir.path(), "s", "");
    let o = Command::new(env!("CARGO_BIN_EXE_rcd"))
        .args(["generate", "--config", cfg.to_str().unwrap(), "--count", "1"])
        .env("RCD_SEED", "11")
        .output()
        .unwrap();
    ok(&o);
    let log = fs::read_to_string(dir.path().join("s/run.log")).unwrap();
    assert!(log.contains("seed=11"));
}
