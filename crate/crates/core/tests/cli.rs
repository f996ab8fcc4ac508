use std::path::Path;
use std::process::{Command, Output};

fn relflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relflow"))
        .args(args)
        .env("RELFLOW_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const FAST: [&str; 10] = [
    "--override",
    "train.noise_levels=10",
    "--override",
    "train.time_dim=8",
    "--override",
    "gnn.hidden=16",
    "--override",
    "mlp.hidden=[32, 32]",
    "--override",
    "flow.euler_steps=10",
];

fn toy(dir: &Path, parents: &str, seed: &str) {
    let o = relflow(&["toy", "--out", p(dir), "--parents", parents, "--seed", seed]);
    assert!(o.status.success(), "{o:?}");
}

#[test]
fn fit_sample_inspect_eval() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    toy(&data, "120", "0");
    let schema = data.join("schema.toml");
    let ckpt = root.path().join("model.ckpt");

    let mut args = vec!["fit", "--schema", p(&schema), "--data", p(&data), "--out", p(&ckpt), "--override", "train.epochs=3"];
    args.extend(FAST);
    let o = relflow(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let epochs: Vec<&str> = out.lines().filter(|l| l.starts_with("epoch=")).collect();
    assert_eq!(epochs.len(), 3, "{out}");
    assert!(epochs[0].contains(" train=") && epochs[0].contains(" val="));
    assert!(out.lines().last().unwrap().starts_with("best_epoch="), "{out}");
    assert!(ckpt.exists());

    let sample = |dir: &Path, seed: &str| {
        let o = relflow(&["sample", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(dir), "--seed", seed]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    let (a, b, c) = (root.path().join("a"), root.path().join("b"), root.path().join("c"));
    let printed = sample(&a, "7");
    assert!(printed.contains("table=parent rows=") && printed.contains("table=child rows="), "{printed}");
    sample(&b, "7");
    sample(&c, "8");
    for t in ["parent.csv", "child.csv"] {
        let (x, y, z) = (
            std::fs::read(a.join(t)).unwrap(),
            std::fs::read(b.join(t)).unwrap(),
            std::fs::read(c.join(t)).unwrap(),
        );
        assert_eq!(x, y, "{t} differs across identical seeds");
        assert_ne!(x, z, "{t} identical across seeds");
        let header = |bytes: &[u8]| String::from_utf8_lossy(bytes).lines().next().unwrap().to_string();
        assert_eq!(header(&x), header(&z));
    }
    let o = relflow(&["inspect", "--schema", p(&schema), "--data", p(&a), "--validate"]);
    assert!(o.status.success(), "{o:?}");
    let o = relflow(&["inspect", "--schema", p(&schema), "--ckpt", p(&ckpt)]);
    assert!(stdout(&o).contains("best_epoch="));

    let report = root.path().join("report.json");
    let o = relflow(&["eval", "--schema", p(&schema), "--data", p(&data), "--synth", p(&a), "--out", p(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("max_dda_accuracy="));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["dda"]["tables"].as_array().unwrap().len(), 1);
    // 120 parents and about 360 children: both tables are eligible.
    assert_eq!(json["privacy"].as_array().unwrap().len(), 2);
    assert!(report.with_extension("txt").exists());
}

#[test]
fn eval_real_against_itself() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    toy(&data, "500", "3");
    let schema = data.join("schema.toml");
    let report = root.path().join("report.json");
    let o = relflow(&["eval", "--schema", p(&schema), "--data", p(&data), "--synth", p(&data), "--out", p(&report)]);
    assert!(o.status.success());
    let line = stdout(&o).lines().find(|l| l.starts_with("max_dda_accuracy=")).unwrap().to_string();
    let acc: f64 = line.trim_start_matches("max_dda_accuracy=").parse().unwrap();
    assert!(acc <= 0.55, "{acc}");
}

#[test]
fn user_errors_exit_one() {
    let root = tempfile::tempdir().unwrap();
    let missing = root.path().join("nope.toml");
    let o = relflow(&["fit", "--schema", p(&missing), "--data", p(root.path()), "--out", p(&root.path().join("m"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.toml"));

    let o = relflow(&["sample", "--ckpt", p(&missing), "--data", p(root.path()), "--out", p(root.path())]);
    assert_eq!(o.status.code(), Some(1));

    let o = Command::new(env!("CARGO_BIN_EXE_relflow"))
        .args(["toy", "--out", p(&root.path().join("t"))])
        .env("RELFLOW_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sample_rejects_other_schema() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    toy(&data, "30", "0");
    let schema = data.join("schema.toml");
    let ckpt = root.path().join("m.ckpt");
    let mut args = vec!["fit", "--schema", p(&schema), "--data", p(&data), "--out", p(&ckpt), "--override", "train.epochs=1"];
    args.extend(FAST);
    assert!(relflow(&args).status.success());

    let other = root.path().join("other.toml");
    let text = std::fs::read_to_string(&schema).unwrap().replace("\"size\", kind = \"continuous\"", "\"size\", kind = \"categorical\"");
    std::fs::write(&other, text).unwrap();
    let o = relflow(&["sample", "--ckpt", p(&ckpt), "--schema", p(&other), "--data", p(&data), "--out", p(&root.path().join("s"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("schema"));
}
