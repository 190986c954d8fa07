//! End-to-end runs of the command-line tool on the bundled toy fixture, with
//! small seeded backbone weights so every test runs in seconds.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use locprobe::backbone::{BackboneFamily, BackboneSpec, Encoder, WeightSource};
use locprobe::inference::DecoderPredictor;

const WEIGHTS: &str = "seed:1";

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy8")
}

fn manifest() -> String {
    fixture().join("manifest.jsonl").display().to_string()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_locprobe")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn run_dir(o: &Output) -> PathBuf {
    let text = stdout(o);
    let line = text
        .lines()
        .find_map(|l| l.strip_prefix("run directory: "))
        .unwrap_or_else(|| panic!("no run directory in {text:?} / {}", String::from_utf8_lossy(&o.stderr)));
    PathBuf::from(line)
}

fn train_linear(out: &Path, seed: &str) -> Output {
    run(&[
        "train",
        "--backbone",
        "rn50",
        "--layer",
        "3",
        "--weights",
        WEIGHTS,
        "--decoder",
        "linear",
        "--train",
        &manifest(),
        "--epochs",
        "4",
        "--batch-size",
        "4",
        "--seed",
        seed,
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn train_smoke_writes_checkpoint_and_history() {
    let tmp = tempfile::tempdir().unwrap();
    let o = train_linear(tmp.path(), "0");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dir = run_dir(&o);
    for f in ["decoder.safetensors", "history.csv", "config.json"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    assert!(stdout(&o).contains("encoder checksum unchanged"));
    let history = std::fs::read_to_string(dir.join("history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,train_loss,val_loss,lr"));
    assert_eq!(history.lines().count(), 5);
}

#[test]
fn same_seed_gives_identical_history_and_checkpoint() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (oa, ob) = (train_linear(a.path(), "5"), train_linear(b.path(), "5"));
    let (da, db) = (run_dir(&oa), run_dir(&ob));
    assert_eq!(da.file_name(), db.file_name(), "run directory is named by config hash");
    assert_eq!(std::fs::read(da.join("history.csv")).unwrap(), std::fs::read(db.join("history.csv")).unwrap());
    assert_eq!(std::fs::read(da.join("decoder.safetensors")).unwrap(), std::fs::read(db.join("decoder.safetensors")).unwrap());
    let oc = train_linear(a.path(), "6");
    assert_ne!(run_dir(&oc), da);
}

#[test]
fn validation_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let m = manifest();
    let cases: Vec<Vec<&str>> = vec![
        vec!["train", "--backbone", "rn50", "--layer", "7", "--weights", WEIGHTS, "--train", &m, "--out", out],
        vec!["train", "--backbone", "vit-l14", "--layer", "25", "--weights", WEIGHTS, "--train", &m, "--out", out],
        vec!["train", "--backbone", "rn50", "--layer", "3", "--decoder", "conv-5", "--weights", WEIGHTS, "--train", &m, "--out", out],
        vec!["train", "--backbone", "concat", "--layer", "21", "--weights", WEIGHTS, "--train", &m, "--out", out],
        vec!["train", "--backbone", "rn50", "--layer", "3", "--weights", WEIGHTS, "--train", "/nonexistent/manifest.jsonl", "--out", out],
        vec!["train", "--backbone", "resnet18", "--train", &m],
        vec!["no-such-command"],
    ];
    for args in cases {
        let o = run(&args);
        assert_eq!(code(&o), 1, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!o.stderr.is_empty());
    }
    let o = run(&["train", "--backbone", "rn50", "--layer", "7", "--weights", WEIGHTS, "--train", &m, "--out", out]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("layer 7 out of range"));
}

#[test]
fn runtime_failures_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("broken.safetensors");
    std::fs::write(&bad, b"definitely not safetensors").unwrap();
    let o = run(&["eval", "--checkpoint", bad.to_str().unwrap(), "--test", &manifest(), "--weights", WEIGHTS]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));

    // an inpainter that always fails leaves nothing to build
    let records = tmp.path().join("records.jsonl");
    let img = fixture().join("images/00.png");
    let mask = fixture().join("masks/00.png");
    std::fs::write(&records, format!("{{\"image_path\":{:?},\"caption\":\"x\",\"object_masks\":[{:?}],\"split\":\"test\"}}\n", img, mask))
        .unwrap();
    let o = run(&[
        "build-cocosd",
        "--records",
        records.to_str().unwrap(),
        "--inpainter-cmd",
        "false",
        "--retries",
        "0",
        "--out",
        tmp.path().join("coco").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn eval_single_matrix_and_empty_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let ck = run_dir(&train_linear(tmp.path(), "0")).join("decoder.safetensors");
    let ck = ck.to_str().unwrap();
    let m = manifest();

    let o = run(&["eval", "--checkpoint", ck, "--test", &m, "--weights", WEIGHTS, "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dir = run_dir(&o);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["fake_images"], 6);
    assert!(summary["ap"].is_number(), "fixture has real and fake images");
    let per_image = std::fs::read_to_string(dir.join("per_image.csv")).unwrap();
    assert_eq!(per_image.lines().count(), 7);
    let mean: f64 = per_image.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum::<f64>() / 6.0;
    assert!((100.0 * mean - summary["iou"].as_f64().unwrap()).abs() < 1e-4);

    let o = run(&["eval", "--matrix", "--checkpoint", ck, ck, "--test", &m, &m, "--generators", "p,q", "--weights", WEIGHTS, "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(run_dir(&o).join("matrix.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("train\\test,p,q"));
    assert_eq!(csv.lines().count(), 3);

    let empty = tmp.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = run(&["eval", "--checkpoint", ck, "--test", empty.to_str().unwrap(), "--weights", WEIGHTS, "--out", out]);
    assert_eq!(code(&o), 1);
}

#[test]
fn eval_ingests_precomputed_prediction_maps() {
    let tmp = tempfile::tempdir().unwrap();
    let preds = tmp.path().join("preds/images");
    std::fs::create_dir_all(&preds).unwrap();
    // predicting each ground-truth mask exactly gives 100
    for entry in std::fs::read_dir(fixture().join("masks")).unwrap() {
        let p = entry.unwrap().path();
        std::fs::copy(&p, preds.join(p.file_name().unwrap())).unwrap();
    }
    let o = run(&[
        "eval",
        "--predictions",
        tmp.path().join("preds").to_str().unwrap(),
        "--test",
        &manifest(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("IoU: 100.0 over 6 fake images"), "{}", stdout(&o));
}

#[test]
fn predict_writes_two_files_and_threshold_only_moves_the_overlay() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = run_dir(&train_linear(tmp.path(), "0")).join("decoder.safetensors");
    let img = fixture().join("images/01.png");
    let predict = |t: &str| {
        let o = run(&[
            "predict",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--weights",
            WEIGHTS,
            "--threshold",
            t,
            "--out",
            tmp.path().to_str().unwrap(),
            img.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        run_dir(&o)
    };
    let spec = BackboneSpec::new(BackboneFamily::Resnet50, 3, WeightSource::Seeded(1)).unwrap();
    let encoder = Encoder::load(&[spec]).unwrap();
    let pred = DecoderPredictor::load(&encoder, &ck, None).unwrap().predict_path(&img).unwrap();
    // thresholds at the 30th and 70th percentile, so both overlays are non-trivial
    let mut sorted = pred.values.clone();
    sorted.sort_by(f32::total_cmp);
    let (t_lo, t_hi) = (sorted[sorted.len() * 3 / 10], sorted[sorted.len() * 7 / 10]);
    assert!(t_lo < t_hi, "prediction is too flat to pick distinct thresholds");
    let (lo, hi) = (predict(&t_lo.to_string()), predict(&t_hi.to_string()));
    let mut names: Vec<_> = std::fs::read_dir(&lo).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["01.overlay.png", "01.prob.png"]);
    assert_eq!(std::fs::read(lo.join("01.prob.png")).unwrap(), std::fs::read(hi.join("01.prob.png")).unwrap());
    assert_ne!(std::fs::read(lo.join("01.overlay.png")).unwrap(), std::fs::read(hi.join("01.overlay.png")).unwrap());

    // count oracle: red-dominant overlay pixels equal the binarized positives
    let mut counts = Vec::new();
    for (dir, t) in [(&lo, t_lo), (&hi, t_hi)] {
        let overlay = image::open(dir.join("01.overlay.png")).unwrap().to_rgb8();
        let red = overlay.pixels().filter(|p| p.0[0] >= 128).count();
        assert_eq!(red, pred.binarize(t).positives(), "threshold {t}");
        assert!(red > 0);
        counts.push(red);
    }
    assert!(counts[0] >= counts[1]);
}

#[test]
fn compose_reports_background_exactness() {
    let tmp = tempfile::tempdir().unwrap();
    let f = fixture();
    let out = tmp.path().join("c.png");
    let o = run(&[
        "compose",
        "--inside",
        f.join("images/00.png").to_str().unwrap(),
        "--outside",
        f.join("images/07.png").to_str().unwrap(),
        "--mask",
        f.join("masks/00.png").to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("background exact: yes"));
    assert!(out.is_file());

    let src = tmp.path().join("src");
    locprobe::dataset::fixture::ldm_sources(&src, 3, 11).unwrap();
    let o = run(&[
        "compose",
        "--variant",
        "clean",
        "--real-dir",
        src.join("real").to_str().unwrap(),
        "--generated-dir",
        src.join("generated").to_str().unwrap(),
        "--mask-dir",
        src.join("masks").to_str().unwrap(),
        "--out",
        tmp.path().join("ldm").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("background exact: 3/3"), "{}", stdout(&o));

    std::fs::remove_file(src.join("generated/01.png")).unwrap();
    let o = run(&[
        "compose",
        "--variant",
        "real",
        "--real-dir",
        src.join("real").to_str().unwrap(),
        "--generated-dir",
        src.join("generated").to_str().unwrap(),
        "--mask-dir",
        src.join("masks").to_str().unwrap(),
        "--out",
        tmp.path().join("ldm2").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1, "unmatched file is a validation error");
}

#[test]
fn augment_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let go = |name: &str| {
        let out = tmp.path().join(name);
        let o = run(&["augment", "--manifest", &manifest(), "--aug", "jitter,jpeg", "--seed", "4", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (go("a"), go("b"));
    for i in 0..8 {
        let f = format!("images/{i:02}.png");
        assert_eq!(std::fs::read(a.join(&f)).unwrap(), std::fs::read(b.join(&f)).unwrap());
    }
    let o = run(&["augment", "--manifest", &manifest(), "--aug", "sharpen", "--out", tmp.path().join("c").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

/// Pulls `(row, col, value)` out of the heatmap's cell annotations.
fn parse_cells(svg: &str) -> Vec<(usize, usize, String)> {
    svg.lines()
        .filter(|l| l.contains(r#"class="cell""#))
        .map(|l| {
            let attr = |name: &str| -> usize {
                let start = l.find(&format!("{name}=\"")).unwrap() + name.len() + 2;
                l[start..].split('"').next().unwrap().parse().unwrap()
            };
            let text = l.rsplit_once("</text>").unwrap().0.rsplit_once('>').unwrap().1.to_string();
            (attr("data-row"), attr("data-col"), text)
        })
        .collect()
}

#[test]
fn report_renders_and_parses_back() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("m.csv");
    let values = [[70.04, 31.25, 28.0], [35.5, 65.849, 30.1], [33.333, 29.95, 68.1]];
    let mut text = String::from("train\\test,ldm,lama,pluralistic\n");
    for (name, row) in ["ldm", "lama", "pluralistic"].iter().zip(values) {
        text.push_str(&format!("{name},{},{},{}\n", row[0], row[1], row[2]));
    }
    std::fs::write(&csv, text).unwrap();
    let o = run(&["report", "--matrix", csv.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dir = run_dir(&o);
    let svg = std::fs::read_to_string(dir.join("heatmap.svg")).unwrap();
    let cells = parse_cells(&svg);
    assert_eq!(cells.len(), 9);
    for (i, j, shown) in cells {
        assert_eq!(shown, format!("{:.1}", values[i][j]), "cell {i},{j}");
    }
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("summary.json")).unwrap()).unwrap();
    let id = (70.04 + 65.849 + 68.1) / 3.0;
    assert!((summary["id_iou"].as_f64().unwrap() - id).abs() < 1e-9);

    // identical inputs, identical artifacts
    let again = run(&["report", "--matrix", csv.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(run_dir(&again), dir);
    assert_eq!(std::fs::read_to_string(dir.join("heatmap.svg")).unwrap(), svg);

    std::fs::write(&csv, "train\\test,solo\nsolo,51.1\n").unwrap();
    let o = run(&["report", "--matrix", csv.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let svg = std::fs::read_to_string(run_dir(&o).join("heatmap.svg")).unwrap();
    assert_eq!(parse_cells(&svg), vec![(0, 0, "51.1".to_string())]);

    std::fs::write(&csv, "train\\test,a,b\na,1,2\n").unwrap();
    let o = run(&["report", "--matrix", csv.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{"backbone": "rn50", "layer": 2, "weights": "{WEIGHTS}", "decoder": "linear", "train_manifest": {:?}, "train": {{"max_epochs": 2, "batch_size": 8}}}}"#,
            manifest()
        ),
    )
    .unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--layer", "3", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let used: serde_json::Value = serde_json::from_slice(&std::fs::read(run_dir(&o).join("config.json")).unwrap()).unwrap();
    assert_eq!(used["layer"], 3);
    assert_eq!(used["train"]["max_epochs"], 2);
    assert_eq!(used["train"]["batch_size"], 8);
    assert_eq!(used["train"]["plateau_patience"], 5);
}

#[test]
fn bundled_fixture_matches_its_generator() {
    let tmp = tempfile::tempdir().unwrap();
    locprobe::dataset::fixture::toy_dataset(tmp.path(), 8, 6, 7).unwrap();
    for sub in ["images", "masks"] {
        for i in 0..8 {
            let f = format!("{sub}/{i:02}.png");
            assert_eq!(std::fs::read(tmp.path().join(&f)).unwrap(), std::fs::read(fixture().join(&f)).unwrap(), "{f}");
        }
    }
    let o = run(&["make-fixture", "--out", tmp.path().join("again").to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(tmp.path().join("again/masks/03.png")).unwrap(), std::fs::read(fixture().join("masks/03.png")).unwrap());
}
