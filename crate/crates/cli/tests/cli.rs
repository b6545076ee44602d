use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn himap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_himap"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env("HIMAP_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = himap(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("train.toml");
    fs::write(
        &path,
        "steps = 4\nwarmup_steps = 1\nbatch_size = 2\nlog_every = 2\n[model]\ndim = 16\nheads = 4\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

fn numbers(svg: &str, attr: &str) -> f64 {
    let key = format!("{attr}=\"");
    let start = svg.find(&key).unwrap() + key.len();
    svg[start..].split('"').next().unwrap().parse().unwrap()
}

#[test]
fn gen_writes_count_docs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&["gen", "--spec", "default", "--count", "12", "--seed", "7", "--out", p(&out)]);
    let docs = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("scenario_"))
        .count();
    assert_eq!(docs, 12);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["artifacts"].as_array().unwrap().len(), 12);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    let again = dir.path().join("d2");
    ok(&["gen", "--count", "12", "--seed", "7", "--out", p(&again)]);
    for i in 0..12 {
        let name = format!("scenario_{i:06}.json");
        assert_eq!(fs::read(out.join(&name)).unwrap(), fs::read(again.join(&name)).unwrap());
    }
}

#[test]
fn usage_errors_exit_one_with_synopsis() {
    let out = himap(&["gen", "--count", "3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(himap(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(himap(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = himap(&["eval", "--ckpt", p(&dir.path().join("nope.json")), "--corpus", p(dir.path()), "--out", p(&dir.path().join("e"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_eval_sweep_plot_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    ok(&["gen", "--count", "6", "--seed", "1", "--out", p(&d.join("train"))]);
    ok(&["gen", "--count", "4", "--seed", "2", "--out", p(&d.join("test"))]);
    let corpus_before: Vec<Vec<u8>> = (0..4)
        .map(|i| fs::read(d.join("test").join(format!("scenario_{i:06}.json"))).unwrap())
        .collect();

    ok(&["train", "--corpus", p(&d.join("train")), "--holdout", p(&d.join("test")), "--config", &cfg, "--seed", "3", "--out", p(&d.join("m"))]);
    ok(&["train", "--corpus", p(&d.join("train")), "--config", &cfg, "--model", "tracked", "--out", p(&d.join("b"))]);
    let log = fs::read_to_string(d.join("m/train_log.csv")).unwrap();
    assert!(log.starts_with("step,lr,loss"));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("m/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);

    let ckpt = d.join("m/checkpoint.json");
    let ck_before = fs::read(&ckpt).unwrap();
    ok(&["eval", "--ckpt", p(&ckpt), "--corpus", p(&d.join("test")), "--out", p(&d.join("e1"))]);
    ok(&["eval", "--ckpt", p(&ckpt), "--corpus", p(&d.join("test")), "--out", p(&d.join("e2"))]);
    for f in ["metrics.csv", "per_scenario.csv"] {
        assert_eq!(fs::read(d.join("e1").join(f)).unwrap(), fs::read(d.join("e2").join(f)).unwrap());
    }
    assert_eq!(fs::read(&ckpt).unwrap(), ck_before);

    // config asking for a different architecture is rejected with a diff
    let other = d.join("other.toml");
    fs::write(&other, "[model]\ndim = 24\nheads = 4\n").unwrap();
    let out = himap(&["eval", "--ckpt", p(&ckpt), "--corpus", p(&d.join("test")), "--config", p(&other), "--out", p(&d.join("e3"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dim"));

    ok(&["sweep", "--himap", p(&ckpt), "--baseline", p(&d.join("b/checkpoint.json")), "--corpus", p(&d.join("test")), "--out", p(&d.join("s"))]);
    let sweep = fs::read_to_string(d.join("s/sweep.csv")).unwrap();
    assert!(sweep.starts_with("n,model,min_ade_6,min_fde_6,mr_6,travel"));
    for (i, before) in corpus_before.iter().enumerate() {
        assert_eq!(&fs::read(d.join("test").join(format!("scenario_{i:06}.json"))).unwrap(), before);
    }

    let svg_path = d.join("fig/sweep.svg");
    ok(&["plot", "--sweep", p(&d.join("s/sweep.csv")), "--out", p(&svg_path)]);
    let svg = fs::read_to_string(&svg_path).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert!(svg.contains("stroke-dasharray"));
    assert!(svg.contains(r#"data-name="travel""#));
    assert!(d.join("fig/sweep.csv").exists());
    assert!(d.join("fig/sweep.manifest.json").exists());
}

#[test]
fn plot_axes_cover_data_with_margin() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    fs::write(
        &csv,
        "n,model,min_ade_6,min_fde_6,mr_6,travel\n\
         0,himap,1.0,2.0,0.1,0.0\n0,baseline,3.0,5.0,0.2,0.0\n\
         4,himap,1.0,2.0,0.1,4.0\n4,baseline,0.5,1.0,0.1,4.0\n",
    )
    .unwrap();
    let svg_path = dir.path().join("f.svg");
    ok(&["plot", "--sweep", p(&csv), "--out", p(&svg_path)]);
    let svg = fs::read_to_string(&svg_path).unwrap();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
    assert!(close(numbers(&svg, "data-x-min"), -0.2) && close(numbers(&svg, "data-x-max"), 4.2));
    assert!(close(numbers(&svg, "data-y-min"), -0.25) && close(numbers(&svg, "data-y-max"), 5.25));
}

#[test]
fn plot_single_n_and_schema_errors() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("one.csv");
    fs::write(&csv, "n,model,min_ade_6,min_fde_6,mr_6,travel\n3,himap,1.0,2.0,0.1,2.0\n3,baseline,1.5,2.5,0.1,2.0\n").unwrap();
    let svg_path = dir.path().join("one.svg");
    ok(&["plot", "--sweep", p(&csv), "--out", p(&svg_path)]);
    let svg = fs::read_to_string(&svg_path).unwrap();
    assert!(numbers(&svg, "data-x-min") < 3.0 && numbers(&svg, "data-x-max") > 3.0);
    assert!(!svg.contains("NaN") && !svg.contains("inf"));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "n,model,min_ade_6\n0,himap,1.0\n").unwrap();
    let out = himap(&["plot", "--sweep", p(&bad), "--out", p(&dir.path().join("bad.svg"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("min_fde_6") && err.contains("mr_6") && err.contains("travel"), "{err}");
    assert!(!dir.path().join("bad.svg").exists());
}
