use std::path::Path;
use std::process::{Command, Output};

fn genret(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genret"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 16] = [
    "--set",
    "steps=20",
    "--set",
    "batch_size=32",
    "--set",
    "dim=16",
    "--set",
    "embed_dim=16",
    "--set",
    "enc_hidden=16",
    "--set",
    "dec_hidden=32",
    "--set",
    "indexer_hidden=16",
    "--set",
    "log_interval=5",
];

#[test]
fn end_to_end_flow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let o = genret(&[
        "synth",
        "--out",
        s(&data),
        "--clusters",
        "4",
        "--docs-per-cluster",
        "10",
        "--vocab",
        "128",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["pairs.tsv", "clusters.tsv", "train.tsv", "heldout.tsv"] {
        assert!(data.join(f).exists(), "{f}");
    }
    assert_eq!(
        std::fs::read_to_string(data.join("clusters.tsv"))
            .unwrap()
            .lines()
            .count(),
        40
    );

    let run = d.join("run");
    let train_tsv = data.join("train.tsv");
    let mut args = vec![
        "train",
        "--corpus",
        s(&train_tsv),
        "--out",
        s(&run),
        "--seed",
        "3",
        "--quiet",
    ];
    args.extend(TINY);
    let o = genret(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = run.join("model.ckpt");
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let cfg = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(cfg.contains("seed = 3"));

    let ids = d.join("ids.tsv");
    let o = genret(&[
        "assign",
        "--checkpoint",
        s(&ckpt),
        "--docs",
        s(&data.join("train.tsv")),
        "--out",
        s(&ids),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let index = std::fs::read_to_string(&ids).unwrap();
    assert_eq!(index.lines().count(), 40);
    for line in index.lines() {
        let (codes, _) = line.split_once('\t').unwrap();
        assert_eq!(codes.split(',').count(), 4);
    }
    let again = d.join("ids2.tsv");
    genret(&[
        "assign",
        "--checkpoint",
        s(&ckpt),
        "--docs",
        s(&data.join("train.tsv")),
        "--out",
        s(&again),
    ]);
    assert_eq!(std::fs::read(&ids).unwrap(), std::fs::read(&again).unwrap());

    let query = std::fs::read_to_string(data.join("train.tsv"))
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .split('\t')
        .next()
        .unwrap()
        .to_string();
    let o = genret(&[
        "retrieve",
        "--checkpoint",
        s(&ckpt),
        "--index",
        s(&ids),
        "--query",
        &query,
        "--beam",
        "1",
        "--format",
        "records",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out.lines().count(), 1);
    let rec: serde_json::Value = serde_json::from_str(out.lines().next().unwrap()).unwrap();
    assert_eq!(rec["rank"], 1);
    let o = genret(&[
        "retrieve",
        "--checkpoint",
        s(&ckpt),
        "--index",
        s(&ids),
        "--query",
        &query,
    ]);
    assert_eq!(code(&o), 0);
    let o = genret(&[
        "retrieve",
        "--checkpoint",
        s(&ckpt),
        "--index",
        s(&ids),
        "--query",
        "zzzz qqqq",
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no known words"));

    let report = d.join("report.json");
    let o = genret(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--index",
        s(&ids),
        "--pairs",
        s(&data.join("heldout.tsv")),
        "--train-corpus",
        s(&data.join("train.tsv")),
        "--out",
        s(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["beam"], 10);
    assert!(r["overall"]["r10"].as_f64().unwrap() <= 1.0);
    assert!(r["splits"]["existing"].is_object());
    assert!(String::from_utf8_lossy(&o.stdout).contains("R@10"));

    let hist = d.join("hist.csv");
    let o = genret(&[
        "analyze-utilization",
        "--index",
        s(&ids),
        "--out",
        s(&hist),
        "--format",
        "records",
    ]);
    assert_eq!(code(&o), 0);
    let rec: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rec["documents"], 40);
    assert!(std::fs::read_to_string(&hist)
        .unwrap()
        .starts_with("size,count\n"));

    let tree = d.join("tree.json");
    let o = genret(&[
        "export-tree",
        "--index",
        s(&ids),
        "--out",
        s(&tree),
        "--checkpoint",
        s(&ckpt),
    ]);
    assert_eq!(code(&o), 0);
    let t = genret::idstore::TreeNode::from_json(&std::fs::read_to_string(&tree).unwrap()).unwrap();
    assert_eq!(t.num_docs(), 40);

    let o = genret(&[
        "train",
        "--corpus",
        s(&data.join("train.tsv")),
        "--out",
        s(&run),
        "--resume",
        s(&ckpt),
        "--steps",
        "25",
        "--quiet",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(genret::trainer::Checkpoint::load(&ckpt).unwrap().step, 25);
    let entries: Vec<_> = std::fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert!(
        entries
            .iter()
            .all(|n| !n.to_string_lossy().contains(".tmp")),
        "{entries:?}"
    );
}

#[test]
fn exit_codes() {
    assert_eq!(code(&genret(&["--help"])), 0);
    assert_eq!(code(&genret(&[])), 1);
    assert_eq!(code(&genret(&["frobnicate"])), 1);
    assert_eq!(code(&genret(&["retrieve", "--checkpoint", "x"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("p.tsv");
    std::fs::write(&pairs, "a b\tc d\ne f\tg h\n").unwrap();
    let out = dir.path().join("run");
    let o = genret(&[
        "train",
        "--corpus",
        s(&pairs),
        "--out",
        s(&out),
        "--set",
        "no_such_key=1",
    ]);
    assert_eq!(code(&o), 1);
    let o = genret(&[
        "train",
        "--corpus",
        s(&pairs),
        "--out",
        s(&out),
        "--disable-loss",
        "ce",
    ]);
    assert_eq!(code(&o), 1);
    let o = genret(&[
        "train",
        "--corpus",
        s(&dir.path().join("missing.tsv")),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 2);
    let o = genret(&["analyze-utilization", "--index", s(&pairs)]);
    assert_eq!(code(&o), 2);
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, "nope").unwrap();
    let o = genret(&[
        "assign",
        "--checkpoint",
        s(&bad),
        "--docs",
        s(&pairs),
        "--out",
        s(&dir.path().join("i.tsv")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("i.tsv").exists());
}
