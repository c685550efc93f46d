use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
name = "small"

[data.synthetic]
num_labels = 3
signal_dim = 6
bias_strength = 0.9
signal_noise = 0.1
signal_scale = 0.4
train_size = 300
dev_size = 90
test_size = 90
ood_size = 90
seed = 3

[loss]
kind = "dfl"

[train]
epochs = 2
batch_size = 16
lr = 0.1
seed = 3

[eval]
hardset = "test_indomain"

[sweep]
gamma = [1.0, 2.0]

[run]
losses = ["ce", "poe", "dfl"]
replicates = 2
"#;

fn debias(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_debias"))
        .args(args)
        .current_dir(cwd)
        .env("DEBIAS_WORKERS", "2")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    (dir, cfg)
}

fn read_tree(root: &Path, ext: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == ext) {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn missing_loss_kind_exits_with_two_and_names_the_key() {
    let (dir, _) = setup();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, SMALL.replace("kind = \"dfl\"", "")).unwrap();
    let out = debias(&["run", bad.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("loss.kind"));
}

#[test]
fn unreadable_config_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = debias(&["run", "nowhere.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_worker_count_is_rejected() {
    let (dir, cfg) = setup();
    let out = Command::new(env!("CARGO_BIN_EXE_debias"))
        .args(["train", "--config", cfg.to_str().unwrap()])
        .current_dir(dir.path())
        .env("DEBIAS_WORKERS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_twice_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(&debias(&["gen", "--seed", "1", "--p", "0.9", "--train-size", "200", "--out", out], dir.path()));
    }
    let a = read_tree(&dir.path().join("a"), "jsonl");
    assert_eq!(a.len(), 4);
    assert_eq!(a, read_tree(&dir.path().join("b"), "jsonl"));
    let manifest = fs::read_to_string(dir.path().join("a/manifest.json")).unwrap();
    assert!(manifest.contains("\"bias_strength\": 0.9"));
}

#[test]
fn run_writes_reports_plots_and_manifest_deterministically() {
    let (dir, cfg) = setup();
    let stdout = ok(&debias(&["run", cfg.to_str().unwrap(), "--out", "out"], dir.path()));
    assert!(stdout.lines().next().unwrap().starts_with("model"));
    let root = dir.path().join("out");
    for f in ["report.csv", "reports.json", "plots/gamma_curve.csv", "plots/pearson.csv", "r1/dfl/model.json", "r0/ce/trace.csv", "r0/hardset/test_indomain.hard.jsonl"] {
        assert!(root.join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"]["r0.train"], 3);
    let listed: Vec<&str> = manifest["artifacts"].as_array().unwrap().iter().map(|a| a["path"].as_str().unwrap()).collect();
    assert!(listed.contains(&"report.csv"));
    assert_eq!(manifest["config"]["loss"]["kind"], "dfl");

    let first = read_tree(&root, "csv");
    fs::remove_dir_all(&root).unwrap();
    ok(&debias(&["run", cfg.to_str().unwrap(), "--out", "out"], dir.path()));
    assert_eq!(first, read_tree(&root, "csv"));
}

#[test]
fn sweep_gamma_list_gives_one_row_per_value() {
    let (dir, cfg) = setup();
    ok(&debias(&["sweep", "--config", cfg.to_str().unwrap(), "--gamma", "0.5,1,2,3,4", "--out", "sw"], dir.path()));
    let csv = fs::read_to_string(dir.path().join("sw/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);
    assert_eq!(fs::read_dir(dir.path().join("sw/jobs")).unwrap().count(), 5);
    let curve = fs::read_to_string(dir.path().join("sw/plots/gamma_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 5);
}

#[test]
fn train_eval_report_chain() {
    let (dir, cfg) = setup();
    let c = cfg.to_str().unwrap();
    for kind in ["ce", "poe", "dfl"] {
        ok(&debias(&["train", "--config", c, "--loss", kind, "--out", kind], dir.path()));
    }
    ok(&debias(&["gen", "--config", c, "--out", "data"], dir.path()));
    for kind in ["ce", "poe", "dfl"] {
        let model = format!("{kind}/r0/{kind}/model.json");
        ok(&debias(
            &["eval", "--model", &model, "--data", "data/test_ood.jsonl", "--data", "data/dev.jsonl", "--name", kind, "--out", &format!("eval_{kind}")],
            dir.path(),
        ));
    }
    let table = ok(&debias(
        &["report", "eval_ce/reports.json", "eval_poe/reports.json", "eval_dfl/reports.json", "--out", "cmp.csv"],
        dir.path(),
    ));
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(!lines[1].contains('('), "baseline row has no deltas: {}", lines[1]);
    assert!(lines[2].contains("(+") || lines[2].contains("(-") || lines[2].contains("(0.00)"));
    let csv = fs::read_to_string(dir.path().join("cmp.csv")).unwrap();
    assert!(csv.starts_with("split,model,n,acc"));
    let poe_row = csv.lines().find(|l| l.starts_with("test_ood,poe")).unwrap();
    assert!(!poe_row.ends_with(",,,,,"), "delta columns are filled: {poe_row}");
}

#[test]
fn hardset_partitions_and_leaves_inputs_alone() {
    let dir = tempfile::tempdir().unwrap();
    ok(&debias(&["gen", "--seed", "2", "--train-size", "400", "--out", "data"], dir.path()));
    let target = dir.path().join("data/test_indomain.jsonl");
    let before = fs::read(&target).unwrap();
    let stdout = ok(&debias(&["hardset", "--train", "data/train.jsonl", "--target", "data/test_indomain.jsonl", "--out", "hs"], dir.path()));
    assert!(stdout.contains("hard"));
    assert_eq!(fs::read(&target).unwrap(), before);
    let count = |f: &str| fs::read_to_string(dir.path().join("hs").join(f)).unwrap().lines().count() - 1;
    let total = fs::read_to_string(&target).unwrap().lines().count() - 1;
    assert_eq!(count("test_indomain.hard.jsonl") + count("test_indomain.easy.jsonl"), total);

    let copy = dir.path().join("hs/copy.json");
    let report = r#"{"split":"dev","model":"ce","n":1,"accuracy":1.0,"per_label":[],"fingerprint":"x"}"#;
    fs::write(&copy, report).unwrap();
    let clobber = debias(&["report", "hs/copy.json", "--out", "hs/copy.json"], dir.path());
    assert_eq!(clobber.status.code(), Some(1));
    assert_eq!(fs::read_to_string(&copy).unwrap(), report);
}
