use std::path::{Path, PathBuf};
use std::process::Command;
use taco::cli::run;

fn taco(args: &[&str]) -> i32 {
    let mut full = vec!["taco"];
    full.extend_from_slice(args);
    run(full)
}

fn bin(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_taco")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn gen(&self, name: &str, n: usize, seed: u64) -> PathBuf {
        let out = self.path(name);
        assert_eq!(taco(&["gen-data", "--n", &n.to_string(), "--length", "3", "--seed", &seed.to_string(), "--out", s(&out)]), 0);
        out
    }

    fn train(&self, algo: &str, data: &Path, name: &str) -> PathBuf {
        let out = self.path(name);
        let code = taco(&[
            "train", "--algo", algo, "--data", s(data), "--out", s(&out), "--seed", "3", "--epochs", "3", "--hidden", "12",
            "--batch-size", "4",
        ]);
        assert_eq!(code, 0, "{algo}");
        out
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn gen_data_echoes_flags_and_is_reproducible() {
    let f = Fixture::new();
    let a = f.gen("a.jsonl", 50, 7);
    let b = f.gen("b.jsonl", 50, 7);
    assert_eq!(read(&a), read(&b));
    let header: serde_json::Value = serde_json::from_slice(&read(&taco::navworld::header_path(&a))).unwrap();
    assert_eq!(header["n"], 50);
    assert_eq!(header["L"], 3);
    assert_eq!(header["seed"], 7);
    assert_eq!(header["d_s"], 8);
    assert_eq!(header["d_a"], 2);
    assert_eq!(header["K"], 4);
}

#[test]
fn invalid_flags_exit_with_usage_code() {
    let f = Fixture::new();
    let out = f.path("x.jsonl");
    assert_eq!(bin(&["gen-data", "--n", "5", "--length", "0", "--out", s(&out)]).status.code(), Some(1));
    assert_eq!(bin(&["gen-data", "--n", "5"]).status.code(), Some(1));
    assert_eq!(bin(&["train", "--algo", "nope", "--data", s(&out), "--out", s(&out)]).status.code(), Some(1));
    assert_eq!(bin(&["eval", "--checkpoint", s(&f.path("missing.json"))]).status.code(), Some(2));
}

#[test]
fn training_is_reproducible_and_writes_monotone_history() {
    let f = Fixture::new();
    let data = f.gen("d.jsonl", 8, 1);
    for algo in ["taco", "gt-bc", "ctc-bc-argmax", "ctc-bc-prob"] {
        let a = f.train(algo, &data, &format!("{algo}-a.json"));
        let b = f.train(algo, &data, &format!("{algo}-b.json"));
        assert_eq!(read(&a), read(&b), "{algo}");
        let ha = read(&a.with_extension("history.csv"));
        assert_eq!(ha, read(&b.with_extension("history.csv")));
        let text = String::from_utf8(ha).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "epoch,loss,dropout_rate,wall_clock_s");
        let epochs: Vec<usize> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert_eq!(epochs, vec![0, 1, 2]);
    }
}

#[test]
fn gt_bc_needs_ground_truth_alignments() {
    let f = Fixture::new();
    let data = f.gen("d.jsonl", 4, 2);
    let (header, demos) = taco::navworld::read_dataset(&data).unwrap();
    let stripped_demos: Vec<_> = demos.into_iter().map(|mut d| {
        d.alignment = None;
        d
    }).collect();
    let stripped = f.path("stripped.jsonl");
    taco::navworld::write_dataset(&stripped, &header, &stripped_demos).unwrap();
    let out = f.path("c.json");
    let res = bin(&["train", "--algo", "gt-bc", "--data", s(&stripped), "--out", s(&out), "--epochs", "1"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("ground-truth alignments"));
    // The other learners accept it.
    assert_eq!(taco(&["train", "--algo", "taco", "--data", s(&stripped), "--out", s(&out), "--epochs", "1", "--hidden", "8"]), 0);
}

#[test]
fn eval_reports_null_alignment_without_heldout_and_is_reproducible() {
    let f = Fixture::new();
    let data = f.gen("d.jsonl", 6, 3);
    let ckpt = f.train("taco", &data, "c.json");
    let mut outputs = Vec::new();
    for run in 0..2 {
        let (json, csv) = (f.path(&format!("m{run}.json")), f.path(&format!("m{run}.csv")));
        let code = taco(&["eval", "--checkpoint", s(&ckpt), "--l-test", "4", "--n-tasks", "5", "--seed", "2", "--out", s(&json), "--csv", s(&csv)]);
        assert_eq!(code, 0);
        outputs.push((read(&json), read(&csv)));
    }
    assert_eq!(outputs[0], outputs[1]);
    let report: serde_json::Value = serde_json::from_slice(&outputs[0].0).unwrap();
    assert!(report["alignment_accuracy_pct"].is_null());
    assert_eq!(report["L_test"], 4);
    assert_eq!(report["L_train"], 3);
    assert_eq!(report["n_demos"], 6);

    let json = f.path("h.json");
    let code = taco(&["eval", "--checkpoint", s(&ckpt), "--n-tasks", "2", "--heldout", s(&data), "--out", s(&json)]);
    assert_eq!(code, 0);
    let report: serde_json::Value = serde_json::from_slice(&read(&json)).unwrap();
    assert!(report["alignment_accuracy_pct"].as_f64().is_some());
}

#[test]
fn eval_rejects_incompatible_checkpoints() {
    let f = Fixture::new();
    let data = f.gen("d.jsonl", 4, 4);
    let ckpt = f.train("taco", &data, "c.json");
    let mut doc: serde_json::Value = serde_json::from_slice(&read(&ckpt)).unwrap();
    doc["version"] = serde_json::json!(999);
    std::fs::write(&ckpt, serde_json::to_vec(&doc).unwrap()).unwrap();
    assert_eq!(bin(&["eval", "--checkpoint", s(&ckpt), "--n-tasks", "1"]).status.code(), Some(2));
}

#[test]
fn align_dumps_banded_lattice_and_reproduces() {
    let f = Fixture::new();
    let data = f.gen("d.jsonl", 5, 5);
    let ckpt = f.train("taco", &data, "c.json");
    let (a, b) = (f.path("a.csv"), f.path("b.csv"));
    let res = bin(&["align", "--checkpoint", s(&ckpt), "--data", s(&data), "--index", "2", "--out", s(&a)]);
    assert_eq!(res.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&res.stdout).to_string();
    assert!(stdout.contains("decoded:"));
    assert!(stdout.contains("agreement:") && stdout.contains('%'));
    assert_eq!(taco(&["align", "--checkpoint", s(&ckpt), "--data", s(&data), "--index", "2", "--out", s(&b)]), 0);
    assert_eq!(read(&a), read(&b));

    let (_, demos) = taco::navworld::read_dataset(&data).unwrap();
    let big_t = demos[2].states.len();
    let big_l = demos[2].sketch.len();
    let text = String::from_utf8(read(&a)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,l,alpha,scale");
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        let (t, l): (usize, usize) = (cols[0].parse().unwrap(), cols[1].parse().unwrap());
        assert!(l + big_t >= big_l + t && l <= t && l < big_l, "cell ({t},{l}) outside band");
    }
    assert_ne!(taco(&["align", "--checkpoint", s(&ckpt), "--data", s(&data), "--index", "99", "--out", s(&b)]), 0);
}

#[test]
fn sweep_writes_one_row_per_cell_with_stable_columns() {
    let f = Fixture::new();
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = f.path(&format!("sweep{run}.csv"));
        let code = taco(&[
            "sweep", "--sizes", "3,5,6", "--algos", "taco,gt-bc,ctc-bc-argmax", "--seeds", "1", "--epochs", "1",
            "--n-tasks", "2", "--heldout", "3", "--out", s(&out),
        ]);
        assert_eq!(code, 0);
        outputs.push(read(&out));
    }
    assert_eq!(outputs[0], outputs[1]);
    let text = String::from_utf8(outputs[0].clone()).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "seed,n_demos,algorithm,L_train,L_test,task_accuracy,subtask_accuracy,alignment_accuracy_pct,n_excluded,error"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r.ends_with(',')), "no cell should fail");
}
