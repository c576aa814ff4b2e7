use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn scp(args: &[&str]) -> Output {
    scp_env(args, None)
}

fn scp_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_scp"));
    cmd.args(args).env_remove("SCP_SEED");
    if let Some(s) = seed {
        cmd.env("SCP_SEED", s);
    }
    cmd.output().expect("run scp")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}\nstderr: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small dataset and trained model shared by several tests.
fn prepared(dir: &Path, rho: &str, seed: &str) {
    let data = dir.join("data");
    ok(&scp(&["gen-data", "--rho", rho, "--n", "400", "--n-eval", "200", "--seed", seed, "--out", p(&data)]));
    ok(&scp(&["train", "--data", p(&data), "--epochs", "4", "--seed", seed, "--out", p(&dir.join("model.scp"))]));
}

#[test]
fn gen_data_writes_files_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&scp(&["gen-data", "--rho", "1.0", "--classes", "2", "--n", "200", "--seed", "7", "--out", p(&out)]));
    assert!(out.join("train.sds").exists() && out.join("eval.sds").exists());
    let m = json(&out.join("gen-data.manifest.json"));
    assert_eq!(m["config"]["spurious_strength"], 1.0);
    assert_eq!(m["seed"], 7);
    assert_eq!(m["command"], "gen-data");
}

#[test]
fn gen_data_rejects_out_of_range_rho() {
    let dir = tempfile::tempdir().unwrap();
    let out = scp(&["gen-data", "--rho", "1.5", "--out", p(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--rho"));
}

#[test]
fn gen_data_is_deterministic_and_seed_env_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str, env: Option<&str>| {
        let out = dir.path().join(name);
        ok(&scp_env(&["gen-data", "--n", "100", "--n-eval", "50", "--seed", seed, "--out", p(&out)], env));
        std::fs::read(out.join("train.sds")).unwrap()
    };
    let a = run("a", "3", None);
    assert_eq!(a, run("b", "3", None));
    assert_ne!(a, run("c", "4", None));
    assert_eq!(run("d", "4", Some("3")), a);
    let bad = scp_env(&["gen-data", "--out", p(&dir.path().join("e"))], Some("x"));
    assert_eq!(code(&bad), 2);
}

#[test]
fn train_is_reproducible_and_checks_paths() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path(), "0", "5");
    let first = json(&dir.path().join("model.scp.manifest.json"));
    let bytes = std::fs::read(dir.path().join("model.scp")).unwrap();
    let again = dir.path().join("again.scp");
    ok(&scp(&["train", "--data", p(&dir.path().join("data")), "--epochs", "4", "--seed", "5", "--out", p(&again)]));
    assert_eq!(std::fs::read(&again).unwrap(), bytes);
    assert_eq!(json(&beside(&again))["results"], first["results"]);
    assert!(first["results"]["eval"]["f1"].as_f64().unwrap() > 0.0);

    let missing = scp(&["train", "--data", p(&dir.path().join("nope")), "--out", p(&dir.path().join("x.scp"))]);
    assert_eq!(code(&missing), 2);
}

fn beside(path: &Path) -> std::path::PathBuf {
    path.with_file_name(format!("{}.manifest.json", path.file_name().unwrap().to_str().unwrap()))
}

fn write_fmap(path: &Path, values: &[f32], labels: &[u8]) {
    let mut bytes = b"FMAP".to_vec();
    for d in [1u32, labels.len() as u32, (values.len() / labels.len()) as u32, 1, 1] {
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend_from_slice(labels);
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn score_channels_from_feature_maps() {
    let dir = tempfile::tempdir().unwrap();
    let fmap = dir.path().join("two.fmap");
    write_fmap(&fmap, &[0.0, 1.0], &[0, 1]);
    let csv = dir.path().join("scores.csv");
    ok(&scp(&["score-channels", "--fmap", p(&fmap), "--out", p(&csv)]));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("channel,score"));
    let score: f64 = lines.next().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    // each sample has no same-group peer: -ln(eps / (e^-1 + eps))
    let eps = 1e-12f64;
    let want = -(eps / ((-1.0f64).exp() + eps)).ln();
    assert!((score - want).abs() <= 1e-7 * want, "{score} vs {want}");
    assert!(beside(&csv).exists());

    let same = dir.path().join("same.fmap");
    write_fmap(&same, &[0.0, 1.0, 2.0, 0.5, 3.0, 1.0], &[1, 1, 1]);
    let text = ok(&scp(&["score-channels", "--fmap", p(&same)]));
    assert_eq!(text, "channel,score\n0,0.00000000\n1,0.00000000\n");
}

#[test]
fn score_channels_argument_errors() {
    let dir = tempfile::tempdir().unwrap();
    let fmap = dir.path().join("two.fmap");
    write_fmap(&fmap, &[0.0, 1.0], &[0, 1]);
    let both = scp(&["score-channels", "--fmap", p(&fmap), "--model", "m.scp", "--data", "d"]);
    assert_eq!(code(&both), 2);
    assert_eq!(code(&scp(&["score-channels"])), 2);

    std::fs::write(dir.path().join("bad.fmap"), b"NOPE0000000000000000000000").unwrap();
    let bad = scp(&["score-channels", "--fmap", p(&dir.path().join("bad.fmap"))]);
    assert_eq!(code(&bad), 3);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("magic"));
}

#[test]
fn score_channels_from_model() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path(), "0.95", "1");
    let model = dir.path().join("model.scp");
    let data = dir.path().join("data");
    let text = ok(&scp(&["score-channels", "--model", p(&model), "--data", p(&data), "--layer", "1", "--temp", "50"]));
    assert_eq!(text.lines().count(), 9);
}

#[test]
fn run_recipe_smoke_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path(), "0.95", "2");
    let model = dir.path().join("model.scp");
    let data = dir.path().join("data");

    let out = dir.path().join("run");
    let stdout = ok(&scp(&["run-recipe", "--model", p(&model), "--data", p(&data), "--temp", "50", "--out", p(&out)]));
    assert!(stdout.starts_with("recipe: "));
    let m = json(&out.join("run-recipe.manifest.json"));
    assert!(m["results"]["stop_reason"].is_string());
    for f in ["model.scp", "trace.jsonl", "ablation.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let report = ok(&scp(&["report", "--trace", p(&out.join("trace.jsonl"))]));
    assert!(report.contains("stop: "));

    let sw = dir.path().join("sweep");
    ok(&scp(&[
        "run-recipe",
        "--model",
        p(&model),
        "--data",
        p(&data),
        "--temp",
        "50",
        "--max-iters",
        "2",
        "--run-to-max-iters",
        "--sweep",
        "prc=1,2,5",
        "--out",
        p(&sw),
    ]));
    for label in ["prc_1", "prc_2", "prc_5"] {
        let csv = std::fs::read_to_string(sw.join(label).join("ablation.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4, "{label}");
    }
    let layers = dir.path().join("layers");
    ok(&scp(&[
        "run-recipe",
        "--model",
        p(&model),
        "--data",
        p(&data),
        "--max-iters",
        "1",
        "--sweep",
        "layer=1,2",
        "--out",
        p(&layers),
    ]));
    assert!(layers.join("layer_1/trace.jsonl").exists() && layers.join("layer_2/trace.jsonl").exists());
}

#[test]
fn run_recipe_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["run-recipe", "--model", "m.scp", "--data", "d", "--out", p(dir.path())];
    let with = |extra: &[&str]| scp(&[&base[..], extra].concat());
    assert_eq!(code(&with(&["--prc", "0"])), 2);
    assert_eq!(code(&with(&["--prc", "1.2"])), 2);
    assert_eq!(code(&with(&["--sweep", "depth=1"])), 2);
    assert_eq!(code(&with(&["--sweep", "prc=0"])), 2);
}

#[test]
fn prune_single_iteration_and_explicit_channels() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path(), "0.95", "3");
    let model = dir.path().join("model.scp");
    let data = dir.path().join("data");
    let out = dir.path().join("pruned.scp");
    let text = ok(&scp(&[
        "prune",
        "--model",
        p(&model),
        "--data",
        p(&data),
        "--prc",
        "0.25",
        "--temp",
        "50",
        "--out",
        p(&out),
    ]));
    assert!(text.contains("12 channels left"), "{text}");
    let m = json(&beside(&out));
    assert_eq!(m["results"]["pruned_channels"].as_array().unwrap().len(), 4);

    let text = ok(&scp(&[
        "prune",
        "--model",
        p(&model),
        "--data",
        p(&data),
        "--channels",
        "0,3",
        "--finetune-epochs",
        "0",
        "--out",
        p(&out),
    ]));
    assert!(text.contains("removed [0, 3], 14 channels left"), "{text}");
    let all = scp(&[
        "prune",
        "--model",
        p(&model),
        "--data",
        p(&data),
        "--layer",
        "1",
        "--channels",
        "0,1,2,3,4,5,6,7",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&all), 2);
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn eval_fairness_from_predictions() {
    let dir = tempfile::tempdir().unwrap();
    // same behaviour in both groups
    let mut csv = String::from("pred,label,group\n");
    for g in 0..2 {
        for (pr, y) in [(0, 0), (1, 1), (1, 0), (0, 1), (1, 1)] {
            csv.push_str(&format!("{pr},{y},{g}\n"));
        }
    }
    let preds = dir.path().join("preds.csv");
    write(&preds, &csv);
    let out = dir.path().join("first");
    ok(&scp(&["eval-fairness", "--preds", p(&preds), "--out", p(&out)]));
    let m = json(&out.join("metrics.json"));
    assert_eq!((m["eopp0"].as_f64(), m["eopp1"].as_f64(), m["eodd"].as_f64()), (Some(0.0), Some(0.0), Some(0.0)));

    let out2 = dir.path().join("self");
    let table = ok(&scp(&[
        "eval-fairness",
        "--preds",
        p(&preds),
        "--baseline",
        p(&out.join("metrics.json")),
        "--out",
        p(&out2),
    ]));
    let fate = json(&out2.join("fate.json"));
    assert_eq!(fate["eodd"].as_f64(), Some(0.0));
    assert!(table.contains("Avg."));
    assert!(out2.join("report.csv").exists() && out2.join("eval-fairness.manifest.json").exists());
}

#[test]
fn eval_fairness_hand_confusion() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("pred,label,group\n");
    for (g, tp, fp) in [(0, 8, 1), (1, 6, 3)] {
        for i in 0..10 {
            csv.push_str(&format!("{},1,{g}\n", u8::from(i < tp)));
        }
        for i in 0..10 {
            csv.push_str(&format!("{},0,{g}\n", u8::from(i < fp)));
        }
    }
    let preds = dir.path().join("preds.csv");
    write(&preds, &csv);
    let out = dir.path().join("r");
    ok(&scp(&["eval-fairness", "--preds", p(&preds), "--out", p(&out)]));
    let m = json(&out.join("metrics.json"));
    assert!((m["eopp1"].as_f64().unwrap() - 0.2).abs() < 1e-12);
    assert!((m["eodd"].as_f64().unwrap() - 0.2).abs() < 1e-12);
}

#[test]
fn eval_fairness_published_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("baseline.json");
    let model = dir.path().join("model.json");
    write(&base, r#"{"name": "baseline", "f1": 0.510, "eodd": 0.182}"#);
    write(&model, r#"{"name": "pruned", "f1": 0.520, "eodd": 0.139}"#);
    let out = dir.path().join("r");
    let text = ok(&scp(&["eval-fairness", "--metrics", p(&model), "--baseline", p(&base), "--out", p(&out)]));
    let fate = json(&out.join("fate.json"))["eodd"].as_f64().unwrap();
    assert!((fate - 0.2559).abs() <= 0.005, "{fate}");
    assert!(text.contains("0.2559") || text.contains("0.2558"), "{text}");
}

#[test]
fn eval_fairness_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&scp(&["eval-fairness"])), 2);
    let preds = dir.path().join("bad.csv");
    write(&preds, "pred,label,group\n1,x,0\n");
    let out = scp(&["eval-fairness", "--preds", p(&preds)]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    write(&preds, "pred,label,group\n");
    assert_eq!(code(&scp(&["eval-fairness", "--preds", p(&preds)])), 3);
    let base = dir.path().join("b.json");
    write(&base, "{not json");
    write(&preds, "pred,label,group\n1,1,0\n0,0,1\n");
    assert_eq!(code(&scp(&["eval-fairness", "--preds", p(&preds), "--baseline", p(&base)])), 3);
}

#[test]
fn eval_fairness_from_model_matches_training_manifest() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path(), "0.95", "4");
    let out = dir.path().join("r");
    ok(&scp(&[
        "eval-fairness",
        "--model",
        p(&dir.path().join("model.scp")),
        "--data",
        p(&dir.path().join("data")),
        "--out",
        p(&out),
    ]));
    let trained = json(&dir.path().join("model.scp.manifest.json"));
    let m = json(&out.join("metrics.json"));
    assert_eq!(m["f1"], trained["results"]["eval"]["f1"]);
    assert_eq!(m["eodd"], trained["results"]["eval"]["eodd"]);
}

#[test]
fn manifest_argv_replays_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&scp(&["gen-data", "--n", "120", "--n-eval", "40", "--seed", "9", "--out", p(&out)]));
    let first = std::fs::read(out.join("eval.sds")).unwrap();
    let m = json(&out.join("gen-data.manifest.json"));
    let argv: Vec<String> =
        m["argv"].as_array().unwrap().iter().skip(1).map(|v| v.as_str().unwrap().to_string()).collect();
    std::fs::remove_dir_all(&out).unwrap();
    let args: Vec<&str> = argv.iter().map(String::as_str).collect();
    ok(&scp(&args));
    assert_eq!(std::fs::read(out.join("eval.sds")).unwrap(), first);
}

#[test]
fn biased_training_data_gives_larger_eval_eodd() {
    let dir = tempfile::tempdir().unwrap();
    let eodd = |rho: &str, seed: u64| {
        let d = dir.path().join(format!("{rho}-{seed}"));
        let s = seed.to_string();
        ok(&scp(&["gen-data", "--rho", rho, "--n", "1000", "--n-eval", "1000", "--seed", &s, "--out", p(&d)]));
        let model = d.join("model.scp");
        ok(&scp(&["train", "--data", p(&d), "--epochs", "8", "--seed", &s, "--out", p(&model)]));
        json(&beside(&model))["results"]["eval"]["eodd"].as_f64().unwrap()
    };
    let wins = (0..5).filter(|&seed| eodd("0.95", seed) > eodd("0", seed)).count();
    assert!(wins >= 4, "{wins}/5");
}
