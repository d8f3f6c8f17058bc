use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dockmtl::io::Checkpoint;

const BIN: &str = env!("CARGO_BIN_EXE_dockmtl");

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn dockmtl")
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("summary is JSON")
}

fn exit_code(args: &[&str]) -> (i32, serde_json::Value) {
    let out = run(args);
    let err = String::from_utf8_lossy(&out.stderr);
    let last = err.lines().last().unwrap_or("{}");
    (out.status.code().unwrap(), serde_json::from_str(last).unwrap_or_default())
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let mut rows = vec![r.headers().unwrap().iter().map(String::from).collect()];
    rows.extend(r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()));
    rows
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &[&str] = &[
    "--dim", "8", "--layers", "2", "--head-hidden", "8", "--batch-size", "32",
    "--min-epochs", "3", "--patience", "2", "--max-epochs", "5",
];

fn synth(dir: &Path, compounds: usize, test: usize) -> (PathBuf, PathBuf) {
    let train = dir.join("train.csv");
    let test_path = dir.join("test.csv");
    ok(&[
        "synth-gen", "--tasks", "3", "--compounds", &compounds.to_string(), "--seed", "11",
        "--test-size", &test.to_string(), "--test-out", s(&test_path), "--out", s(&train),
    ]);
    (train, test_path)
}

#[test]
fn golden_predictions_are_stable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.csv");
    let summary = ok(&[
        "predict", "--model", s(&fixture("golden.ckpt")),
        "--input", s(&fixture("golden_input.csv")), "--out", s(&out),
    ]);
    assert_eq!(summary["failed"], 1);
    let got = read_csv(&out);
    let want = read_csv(&fixture("golden_predictions.csv"));
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want) {
        assert_eq!(g[0], w[0]);
        for (a, b) in g[1..3].iter().zip(&w[1..3]) {
            match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(x), Ok(y)) => assert_eq!(x.to_bits(), y.to_bits(), "{} vs {}", x, y),
                _ => assert_eq!(a, b),
            }
        }
        assert_eq!(g[3].is_empty(), w[3].is_empty());
    }
}

#[test]
fn train_eval_screen_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = synth(dir.path(), 150, 60);
    let model = dir.path().join("m.ckpt");
    let log = dir.path().join("log.csv");
    let mut args = vec![
        "train", "--data", s(&train), "--new-target", "T1", "--new-size", "50",
        "--aux-size", "80", "--out", s(&model), "--log", s(&log),
    ];
    args.extend_from_slice(SMALL);
    let summary = ok(&args);
    assert_eq!(summary["tasks"][0], "T1");
    assert_eq!(summary["labels_per_task"][0], 50);
    assert_eq!(summary["labels_per_task"][1], 80);
    let log_rows = read_csv(&log);
    assert_eq!(log_rows[0], ["epoch", "train_loss", "val_loss", "heads_only"]);
    assert_eq!(log_rows.len() - 1, summary["epochs"].as_u64().unwrap() as usize);

    let metrics = dir.path().join("metrics.csv");
    let ev = ok(&["eval", "--model", s(&model), "--data", s(&test), "--k", "3", "--out", s(&metrics)]);
    let rows = ev["metrics"].as_array().unwrap();
    // 3 tasks x (mse, pearson, ci + 1 k x 3 fractions)
    assert_eq!(rows.len(), 3 * 6);
    assert_eq!(read_csv(&metrics).len(), rows.len() + 1);

    let ranked = dir.path().join("screen.csv");
    let sc = ok(&["screen", "--model", s(&model), "--input", s(&test), "--top-frac", "0.05", "--out", s(&ranked)]);
    assert_eq!(sc["predicted_hits"], 3);
    let top = read_csv(&ranked);
    assert_eq!(top.len(), 1 + 3);

    let full = dir.path().join("all.csv");
    ok(&["screen", "--model", s(&model), "--input", s(&test), "--task", "T2", "--all", "--out", s(&full)]);
    let all = read_csv(&full);
    assert_eq!(all.len(), 1 + 60);
    let scores: Vec<f64> = all[1..].iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] <= w[1]), "lower is better ranks ascending");
    let hits = all[1..].iter().filter(|r| r[3] == "true").count();
    assert_eq!(hits, 2);

    let again = dir.path().join("again.csv");
    ok(&["screen", "--model", s(&model), "--input", s(&test), "--task", "T2", "--all", "--out", s(&again)]);
    assert_eq!(std::fs::read(&full).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = synth(dir.path(), 100, 0);
    let bytes: Vec<Vec<u8>> = ["a.ckpt", "b.ckpt"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let mut args = vec!["train", "--data", s(&train), "--new-target", "T0", "--seed", "3", "--out", s(&out)];
            args.extend_from_slice(SMALL);
            ok(&args);
            std::fs::read(&out).unwrap()
        })
        .collect();
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn transfer_active_learning_and_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = synth(dir.path(), 120, 0);
    let pre = dir.path().join("pre.ckpt");
    let mut args = vec!["train", "--data", s(&train), "--new-target", "T0", "--aux-tasks", "T1", "--out", s(&pre)];
    args.extend_from_slice(SMALL);
    ok(&args);

    let tuned = dir.path().join("t.ckpt");
    let t = ok(&[
        "transfer", "--pretrained", s(&pre), "--data", s(&train), "--target", "T2", "--new-size", "60",
        "--warmup", "2", "--min-epochs", "3", "--patience", "2", "--max-epochs", "4", "--head-hidden", "8",
        "--out", s(&tuned),
    ]);
    assert_eq!(t["labels"], 60);
    let ck = Checkpoint::read(std::fs::File::open(&tuned).unwrap()).unwrap();
    assert_eq!((ck.header.dim, ck.header.layers), (8, 2));
    assert_eq!(ck.header.task_names, ["T2"]);

    let al = dir.path().join("al.ckpt");
    let labeled = dir.path().join("labeled.csv");
    let mut args = vec![
        "active-learn", "--pool", s(&train), "--target", "T2", "--budget", "30", "--rounds", "2",
        "--ensemble-size", "2", "--acquisition", "ucb", "--beta", "0.5", "--out", s(&al),
        "--labeled-out", s(&labeled),
    ];
    args.extend_from_slice(SMALL);
    let summary = ok(&args);
    assert_eq!(summary["labeled"], 30);
    assert_eq!(read_csv(&labeled).len(), 31);
    let ck = Checkpoint::read(std::fs::File::open(&al).unwrap()).unwrap();
    assert_eq!(ck.members.len(), 2);

    let emb = dir.path().join("z.csv");
    let e = ok(&["export-embeddings", "--model", s(&al), "--member", "1", "--input", s(&train), "--out", s(&emb)]);
    assert_eq!(e["dim"], 8);
    assert_eq!(read_csv(&emb)[0].len(), 9);
}

#[test]
fn sweep_covers_the_size_grid() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = synth(dir.path(), 120, 40);
    let out = dir.path().join("sweep.csv");
    let mut args = vec![
        "sweep", "--data", s(&train), "--test", s(&test), "--new-target", "T0", "--new-sizes", "30,60",
        "--aux-sizes", "0,50", "--out", s(&out),
    ];
    args.extend_from_slice(SMALL);
    let summary = ok(&args);
    assert_eq!(summary["k"], 4);
    let rows = read_csv(&out);
    assert_eq!(rows[0][..2], ["new_size", "aux_size"]);
    let grid: Vec<(&str, &str)> = rows[1..].iter().map(|r| (r[0].as_str(), r[1].as_str())).collect();
    assert_eq!(grid, [("30", "0"), ("30", "50"), ("60", "0"), ("60", "50")]);
}

#[test]
fn ingest_reports_rejected_rows() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("raw.csv");
    std::fs::write(
        &input,
        "smiles,A,B_ic50_molar\nCCO,-7.5,\nC1CC,-6.0,\nCCN,,1e-5\nCCO,-8.5,\nCC,,\n",
    )
    .unwrap();
    let errors = dir.path().join("errors.csv");
    let clean = dir.path().join("clean.csv");
    let summary = ok(&[
        "ingest", "--input", s(&input), "--errors", s(&errors), "--out", s(&clean), "--direction", "A=lower",
    ]);
    assert_eq!(summary["rejected"], 2);
    assert_eq!(summary["compounds"], 2);
    assert_eq!(summary["directions"], serde_json::json!(["lower_is_better", "higher_is_better"]));
    let errs = read_csv(&errors);
    assert_eq!(errs[1][0], "3");
    assert_eq!(errs[2][0], "6");
    let rows = read_csv(&clean);
    let cco = rows.iter().find(|r| r[0] == "CCO").unwrap();
    assert_eq!(cco[1].parse::<f64>().unwrap(), -8.0);
    let ccn = rows.iter().find(|r| r[0] == "CCN").unwrap();
    assert!((ccn[2].parse::<f64>().unwrap() - 5.0).abs() < 1e-9);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = synth(dir.path(), 80, 0);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"seed": 9, "train": {"dim": 8, "layers": 2, "head_hidden": 8, "min_epochs": 2, "patience": 1, "max_epochs": 3}}"#,
    )
    .unwrap();
    let out = dir.path().join("m.ckpt");
    let summary = ok(&[
        "--config", s(&cfg), "train", "--data", s(&train), "--new-target", "T0", "--dim", "4", "--out", s(&out),
    ]);
    assert_eq!(summary["seed"], 9);
    let ck = Checkpoint::read(std::fs::File::open(&out).unwrap()).unwrap();
    assert_eq!((ck.header.dim, ck.header.layers, ck.header.seed), (4, 2, 9));
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let (code, body) = exit_code(&["train", "--data", s(&missing), "--new-target", "T0", "--out", "x"]);
    assert_eq!((code, body["error"].as_str()), (4, Some("io")));

    let (code, _) = exit_code(&["train", "--data", "x.csv"]);
    assert_eq!(code, 2);
    let (code, _) = exit_code(&["screen", "--model", "m", "--input", "i", "--out", "o", "--top-frac", "1.5"]);
    assert_eq!(code, 2);

    let bad_cfg = dir.path().join("bad.json");
    std::fs::write(&bad_cfg, r#"{"train": {"learning_rate": 1}}"#).unwrap();
    let (code, _) = exit_code(&["--config", s(&bad_cfg), "synth-gen", "--out", "x.csv"]);
    assert_eq!(code, 2);

    let mut ck = Checkpoint::read(std::fs::File::open(fixture("golden.ckpt")).unwrap()).unwrap();
    ck.header.schema_hash = "stale".into();
    let stale = dir.path().join("stale.ckpt");
    ck.write(std::fs::File::create(&stale).unwrap()).unwrap();
    let (code, body) = exit_code(&[
        "predict", "--model", s(&stale), "--input", s(&fixture("golden_input.csv")), "--out", s(&dir.path().join("p.csv")),
    ]);
    assert_eq!((code, body["error"].as_str()), (3, Some("schema_mismatch")));

    let (train, _) = synth(dir.path(), 40, 0);
    let (code, body) = exit_code(&["train", "--data", s(&train), "--new-target", "Nope", "--out", "x"]);
    assert_eq!((code, body["error"].as_str()), (5, Some("data")));

    let (code, _) = exit_code(&["train", "--data", s(&train), "--new-target", "T0", "--lr", "-1", "--out", "x"]);
    assert_eq!(code, 2);
}
