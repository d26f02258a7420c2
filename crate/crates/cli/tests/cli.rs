use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use proxbundle::data::{gen_subspaces, LabeledFeatures, SubspaceSpec};
use proxbundle::linalg::{pxb, SplitMix64};
use proxbundle::Matrix;
use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_proxbundle"));
    c.env_remove("PROXBUNDLE_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn micro_config(variant: &str) -> Value {
    json!({
        "vit": {
            "image_height": 8, "image_width": 8, "patch_size": 4,
            "num_layers": 1, "num_heads": 2, "embed_dim": 8, "ffn_dim": 16
        },
        "train": { "variant": variant, "epochs": 5, "batch_size": 8, "seed": 1 },
        "data": { "synthetic": { "size": 8, "classes": 3, "samples_per_class": 10, "noise": 0.3, "seed": 2 } }
    })
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_trace(path: &Path) -> Vec<f64> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("iteration,objective"));
    lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect()
}

#[test]
fn train_writes_artifacts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "micro.json", &micro_config("learnable-prox"));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let start = Instant::now();
    let o = run(&["train", "--config", s(&cfg), "--out", s(&a)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(start.elapsed() < Duration::from_secs(60));
    let o = run(&["train", "--config", s(&cfg), "--out", s(&b)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    for f in [
        "report.json",
        "train_log.jsonl",
        "checkpoint/manifest.json",
        "features/pre.pxb",
        "features/post.pxb",
        "features/labels.json",
        "features/coefficients.pxb",
    ] {
        let x = fs::read(a.join(f)).unwrap_or_else(|e| panic!("{f}: {e}"));
        assert_eq!(x, fs::read(b.join(f)).unwrap(), "{f} differs between runs");
    }
    let report: Value = serde_json::from_slice(&fs::read(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 5);
    assert_eq!(report["placement"], json!([1]));
    let log = fs::read_to_string(a.join("train_log.jsonl")).unwrap();
    assert!(log.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));
}

#[test]
fn seed_flag_overrides_document() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "micro.json", &micro_config("baseline"));
    let out = dir.path().join("o");
    let o = run(&["train", "--config", s(&cfg), "--seed", "7", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], json!(7));
}

#[test]
fn toml_config_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("micro.toml");
    fs::write(
        &cfg,
        r#"
[vit]
image_height = 8
image_width = 8
patch_size = 4
num_layers = 1
num_heads = 2
embed_dim = 8
ffn_dim = 16

[train]
variant = "fixed-prox"
epochs = 1
batch_size = 8

[data.synthetic]
size = 8
classes = 3
samples_per_class = 5
noise = 0.3
seed = 0
"#,
    )
    .unwrap();
    let o = run(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn missing_field_is_exit_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = micro_config("baseline");
    v["train"].as_object_mut().unwrap().remove("variant");
    let cfg = write_config(dir.path(), "bad.json", &v);
    let o = run(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("variant"), "{}", stderr(&o));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn unknown_key_is_exit_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = micro_config("baseline");
    v["vit"]["depth"] = json!(3);
    let cfg = write_config(dir.path(), "bad.json", &v);
    let o = run(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("vit") && stderr(&o).contains("depth"), "{}", stderr(&o));
}

#[test]
fn invalid_values_are_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = micro_config("fixed-prox");
    v["train"]["placement"] = json!([3]);
    let cfg = write_config(dir.path(), "bad.json", &v);
    assert_eq!(code(&run(&["train", "--config", s(&cfg)])), 2);
    assert_eq!(code(&run(&["train", "--config", s(&dir.path().join("absent.json"))])), 2);
    assert_eq!(code(&run(&["train"])), 2);
    assert_eq!(code(&run(&["no-such-command"])), 2);
}

#[test]
fn runtime_failure_is_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "micro.json", &micro_config("baseline"));
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = run(&["train", "--config", s(&cfg), "--out", s(&blocker.join("out"))]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn thread_variable_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "micro.json", &micro_config("baseline"));
    let o = bin().args(["train", "--config", s(&cfg)]).env("PROXBUNDLE_THREADS", "zero").output().unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("PROXBUNDLE_THREADS"));
    let out = dir.path().join("o");
    let o = bin()
        .args(["train", "--config", s(&cfg), "--out", s(&out)])
        .env("PROXBUNDLE_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn sweep_rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("blocks,accuracy,seed"));
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn sweep_writes_one_row_per_placement() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = micro_config("fixed-prox");
    v["vit"]["num_layers"] = json!(2);
    v["train"]["epochs"] = json!(2);
    let cfg = write_config(dir.path(), "micro.json", &v);

    let out = dir.path().join("one");
    let o = run(&["sweep", "--config", s(&cfg), "--placements", "2", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = sweep_rows(&out.join("sweep.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "2");

    v["sweep"] = json!({ "placements": "∅;1;L" });
    let cfg = write_config(dir.path(), "sweep.json", &v);
    let out = dir.path().join("three");
    let o = run(&["sweep", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = sweep_rows(&out.join("sweep.csv"));
    let blocks: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(blocks, ["none", "1", "2"]);
    assert!(rows.iter().all(|r| r[2] == "1"));
    for r in &rows {
        let acc: f64 = r[1].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    let bad = write_config(dir.path(), "nosweep.json", &micro_config("fixed-prox"));
    assert_eq!(code(&run(&["sweep", "--config", s(&bad)])), 2);
    assert_eq!(code(&run(&["sweep", "--config", s(&cfg), "--placements", "5"])), 2);
}

fn write_features(dir: &Path, name: &str, lf: &LabeledFeatures) -> (PathBuf, PathBuf) {
    let f = dir.join(format!("{name}.pxb"));
    let l = dir.join(format!("{name}_labels.json"));
    lf.save(&f, &l).unwrap();
    (f, l)
}

fn csv_matrix(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn geometry_identical_classes_have_zero_distance() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = SplitMix64::new(4);
    let a = rng.normal_matrix(3, 5, 1.0);
    let far = Matrix::from_fn(3, 5, |r, c| a[(r, c)] + 10.0);
    let features = Matrix::concat_cols(&[&a, &a, &far]).unwrap();
    let labels: Vec<usize> = (0..15).map(|i| i / 5).collect();
    let (f, l) = write_features(dir.path(), "x", &LabeledFeatures::new(features, labels).unwrap());
    let out = dir.path().join("g");
    let o = run(&["geometry", "--features", s(&f), "--labels", s(&l), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let d = csv_matrix(&out.join("distances.csv"));
    assert_eq!(d.len(), 3);
    assert!(d[0][1].abs() <= 1e-12 && d[1][0].abs() <= 1e-12);
    assert!(d[0][2] > 10.0);
    let rep: Value = serde_json::from_slice(&fs::read(out.join("separability.json")).unwrap()).unwrap();
    assert_eq!(rep["delta_mean_inter_class"], json!(0.0));
}

#[test]
fn geometry_tsne_on_fifty_points() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = SplitMix64::new(5);
    let features = Matrix::from_fn(6, 50, |r, c| if r == c % 2 { 4.0 } else { 0.0 } + rng.normal());
    let labels: Vec<usize> = (0..50).map(|c| c % 2).collect();
    let lf = LabeledFeatures::new(features.clone(), labels.clone()).unwrap();
    let (f, l) = write_features(dir.path(), "x", &lf);
    let post = LabeledFeatures::new(features.scale(0.5), labels).unwrap();
    let (p, _) = write_features(dir.path(), "post", &post);
    let out = dir.path().join("g");
    let o = run(&[
        "geometry", "--features", s(&f), "--labels", s(&l), "--post", s(&p), "--tsne", "--tsne-iterations", "200", "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for name in ["tsne", "tsne_post"] {
        let text = fs::read_to_string(out.join(format!("{name}.csv"))).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x,y,label"));
        assert_eq!(lines.count(), 50);
        let kl = fs::read_to_string(out.join(format!("{name}_kl.csv"))).unwrap();
        let kl: Vec<f64> = kl.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
        assert_eq!(kl.len(), 200);
        assert!(kl.iter().all(|&v| v >= 0.0));
    }
    assert!(out.join("distances_post.csv").exists());
    let rep: Value = serde_json::from_slice(&fs::read(out.join("separability.json")).unwrap()).unwrap();
    let (pre, post) = (&rep["pre"]["mean_intra_class"], &rep["post"]["mean_intra_class"]);
    assert!((post.as_f64().unwrap() - 0.5 * pre.as_f64().unwrap()).abs() <= 1e-9);
}

#[test]
fn geometry_bad_inputs_are_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let lf = LabeledFeatures::new(SplitMix64::new(1).normal_matrix(2, 6, 1.0), vec![0, 0, 0, 1, 1, 1]).unwrap();
    let (f, l) = write_features(dir.path(), "x", &lf);
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&run(&["geometry", "--features", s(&f), "--labels", s(&missing)])), 2);
    fs::write(&missing, "[0, 1]").unwrap();
    assert_eq!(code(&run(&["geometry", "--features", s(&f), "--labels", s(&missing)])), 2);
    fs::write(&missing, "[0, 0, 0, 0, 0, 0]").unwrap();
    assert_eq!(code(&run(&["geometry", "--features", s(&f), "--labels", s(&missing)])), 2);
    let junk = dir.path().join("junk.pxb");
    fs::write(&junk, b"PXB0garbage").unwrap();
    assert_eq!(code(&run(&["geometry", "--features", s(&junk), "--labels", s(&l)])), 2);
    // Six points cannot carry perplexity 15.
    let o = run(&["geometry", "--features", s(&f), "--labels", s(&l), "--tsne", "--out", s(&dir.path().join("g"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn prox_bench_zero_iterations_has_single_entry() {
    let dir = tempfile::tempdir().unwrap();
    let z = dir.path().join("z.pxb");
    pxb::write_matrix(&z, &SplitMix64::new(2).normal_matrix(4, 6, 1.0)).unwrap();
    let out = dir.path().join("b");
    let o = run(&["prox-bench", "--features", s(&z), "--k-max", "0", "--w0", "identity", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_trace(&out.join("trace.csv")).len(), 1);
    assert_eq!(pxb::read_matrix(out.join("w.pxb")).unwrap(), Matrix::identity(6));
}

#[test]
fn prox_bench_subspace_trace_is_non_increasing() {
    let dir = tempfile::tempdir().unwrap();
    let sample = gen_subspaces(&SubspaceSpec {
        dim: 20,
        subspace_dim: 2,
        classes: 3,
        samples_per_class: 20,
        noise: 0.01,
        seed: 3,
    })
    .unwrap();
    let z = dir.path().join("z.pxb");
    pxb::write_matrix(&z, &sample.data.features).unwrap();
    let out = dir.path().join("b");
    let o = run(&[
        "prox-bench", "--features", s(&z), "--k-max", "200", "--lambda", "0.05", "--zero-diagonal", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let trace = read_trace(&out.join("trace.csv"));
    assert_eq!(trace.len(), 201);
    assert!(trace.windows(2).all(|p| p[1] <= p[0] + 1e-10));
    let w = pxb::read_matrix(out.join("w.pxb")).unwrap();
    assert_eq!(w.shape(), (60, 60));
    assert!((0..60).all(|i| w[(i, i)] == 0.0));
}

#[test]
fn prox_bench_single_sample_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let z = dir.path().join("z.pxb");
    pxb::write_matrix(&z, &Matrix::zeros(4, 1)).unwrap();
    let o = run(&["prox-bench", "--features", s(&z), "--out", s(&dir.path().join("b"))]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&run(&["prox-bench", "--features", s(&dir.path().join("none.pxb"))])), 2);
}

#[test]
fn prox_bench_reproduces_pipeline_unroll_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    for step in ["absolute", "relative"] {
        let mut v = micro_config("learnable-prox");
        v["train"]["learnable_step"] = json!(step);
        let cfg = write_config(dir.path(), "micro.json", &v);
        let run_dir = dir.path().join(format!("run-{step}"));
        let o = run(&["train", "--config", s(&cfg), "--out", s(&run_dir)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let features = run_dir.join("features");
        let out = dir.path().join(format!("bench-{step}"));
        let o = run(&[
            "prox-bench",
            "--features",
            s(&features.join("pre.pxb")),
            "--checkpoint",
            s(&run_dir.join("checkpoint")),
            "--out",
            s(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        // Six test samples fit one evaluation batch, so the exported W is that batch's W.
        let w = pxb::read_matrix(out.join("w.pxb")).unwrap();
        let exported = pxb::read_matrix(features.join("coefficients.pxb")).unwrap();
        assert_eq!(w.shape(), (6, 6));
        assert!(w.max_abs_diff(&exported) <= 1e-12, "{step}");
        let pre = pxb::read_matrix(features.join("pre.pxb")).unwrap();
        let post = pxb::read_matrix(features.join("post.pxb")).unwrap();
        assert!(pre.matmul(&w).unwrap().max_abs_diff(&post) <= 1e-12, "{step}");
    }
}
