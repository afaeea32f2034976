//! The binary driven as a subprocess.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_structalign");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("STRUCTALIGN_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--epochs",
    "2",
    "--warmup-epochs",
    "1",
    "--hidden",
    "8",
    "--layers",
    "2",
    "--heads",
    "2",
    "--proj-dim",
    "4",
    "--struct-vocab",
    "6",
    "--max-len",
    "24",
    "--batch-records",
    "4",
];

fn corpus(dir: &Path) -> std::path::PathBuf {
    let c = dir.join("corpus.jsonl");
    ok(&[
        "gen",
        "--n",
        "24",
        "--len-min",
        "12",
        "--len-max",
        "20",
        "--noise-frac",
        "0.25",
        "--seed",
        "3",
        "--out",
        p(&c),
    ]);
    c
}

#[test]
fn gen_is_reproducible_and_the_env_seed_wins() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    ok(&["gen", "--n", "5", "--seed", "7", "--out", p(&a)]);
    ok(&["gen", "--n", "5", "--seed", "7", "--out", p(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let out = Command::new(BIN)
        .args(["gen", "--n", "5", "--seed", "1", "--out", p(&c)])
        .env("STRUCTALIGN_SEED", "7")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 5);
}

#[test]
fn manifest_records_inputs_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let cb = dir.path().join("cb.json");
    ok(&[
        "fit-tokenizer",
        "--corpus",
        p(&c),
        "--k",
        "6",
        "--out",
        p(&cb),
    ]);
    let m: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("cb.json.manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(m["command"], "fit-tokenizer");
    assert_eq!(m["status"], "ok");
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert!(!dir.path().join("cb.json.lock").exists());

    let first = fs::read(&cb).unwrap();
    fs::remove_file(&cb).unwrap();
    ok(&["replay", p(&dir.path().join("cb.json.manifest.json"))]);
    assert_eq!(fs::read(&cb).unwrap(), first);
}

#[test]
fn held_lock_refuses_the_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.jsonl");
    fs::write(dir.path().join("x.jsonl.lock"), "1").unwrap();
    let r = run(&["gen", "--n", "2", "--out", p(&out)]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("lock"));
    assert!(!out.exists());
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let o = dir.path().join("run");
    let code = |args: &[&str]| run(args).status.code().unwrap();
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["gen", "--bogus"]), 2);
    assert_eq!(code(&["align", "--corpus", p(&c), "--out", p(&o)]), 2);
    assert_eq!(
        code(&[
            "align",
            "--corpus",
            p(&c),
            "--strategy",
            "full",
            "--rho",
            "1.5",
            "--out",
            p(&o)
        ]),
        2
    );
    assert_eq!(
        code(&[
            "align",
            "--corpus",
            p(&dir.path().join("missing")),
            "--strategy",
            "full",
            "--out",
            p(&o)
        ]),
        3
    );
    let bad = Command::new(BIN)
        .args(["gen", "--n", "2", "--out", p(&dir.path().join("g"))])
        .env("STRUCTALIGN_SEED", "nope")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn help_shows_defaults() {
    let h = String::from_utf8(ok(&["align", "--help"]).stdout).unwrap();
    for d in [
        "[default: excess]",
        "[default: 0.8]",
        "[default: 0.5]",
        "[default: 0.0001]",
        "[default: 0.001]",
    ] {
        assert!(h.contains(d), "missing {}", d);
    }
}

#[test]
fn pipeline_from_corpus_to_scores() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let c = corpus(d);
    let refdir = d.join("ref");
    let mut args = vec!["train-ref", "--corpus", p(&c), "--out", p(&refdir)];
    args.extend_from_slice(TINY);
    ok(&args);
    assert!(refdir.join("codebook.json").is_file());
    assert!(refdir.join("reference.json").is_file());

    let run_dir = d.join("run");
    let mut args = vec![
        "align",
        "--corpus",
        p(&c),
        "--ref",
        p(&refdir),
        "--audit",
        "--out",
        p(&run_dir),
    ];
    args.extend_from_slice(TINY);
    ok(&args);
    assert!(run_dir.join("checkpoints/final.json").is_file());
    assert!(run_dir.join("logs/metrics.jsonl").is_file());
    let audit = fs::read_to_string(run_dir.join("logs/selection_audit.csv")).unwrap();
    assert!(audit.starts_with("step,family,flat_index,current,reference,excess,selected"));

    let ppl = d.join("ppl.json");
    ok(&[
        "ppl",
        "--ckpt",
        p(&run_dir),
        "--corpus",
        p(&c),
        "--out",
        p(&ppl),
    ]);
    let probe = d.join("ss.json");
    ok(&[
        "probe",
        "--ckpt",
        p(&run_dir),
        "--task",
        "ss",
        "--corpus",
        p(&c),
        "--epochs",
        "2",
        "--out",
        p(&probe),
    ]);
    let rep: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&probe).unwrap()).unwrap();
    assert!(rep["value"].as_f64().unwrap() >= 0.0);

    // scores fed back as labels rank identically
    let muts = d.join("muts.txt");
    let first: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&c).unwrap().lines().next().unwrap()).unwrap();
    let wt = first["seq"].as_str().unwrap().to_string();
    let variants: Vec<String> = wt
        .chars()
        .enumerate()
        .take(6)
        .map(|(i, a)| format!("{}{}{}", a, i + 1, if a == 'G' { 'A' } else { 'G' }))
        .collect();
    fs::write(&muts, variants.join("\n")).unwrap();
    let s1 = d.join("s1.json");
    ok(&[
        "score",
        "--ckpt",
        p(&run_dir),
        "--wt",
        &wt,
        "--mutations",
        p(&muts),
        "--out",
        p(&s1),
    ]);
    let r1: serde_json::Value = serde_json::from_str(&fs::read_to_string(&s1).unwrap()).unwrap();
    let labels: Vec<String> = r1["variants"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["score"].as_f64().unwrap().to_string())
        .collect();
    let lab = d.join("labels.txt");
    fs::write(&lab, labels.join("\n")).unwrap();
    let s2 = d.join("s2.json");
    ok(&[
        "score",
        "--ckpt",
        p(&run_dir),
        "--wt",
        &wt,
        "--mutations",
        p(&muts),
        "--labels",
        p(&lab),
        "--out",
        p(&s2),
    ]);
    let r2: serde_json::Value = serde_json::from_str(&fs::read_to_string(&s2).unwrap()).unwrap();
    assert_eq!(r2["spearman"].as_f64().unwrap(), 1.0);
}
