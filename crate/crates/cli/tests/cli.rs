use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn consimp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_consimp")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SOURCE: &str = "the hub is key .\nthe cat sat on the mat .\na great deal of people came .\nthe dog ran .\n";
const TARGET: &str = "the center is important .\nthe cat sat .\nmany people came .\nthe dog ran .\n";
const KB: &str = "hub\tcenter\t0.9\nkey\timportant\t0.8\na great deal of\tmany\t0.7\n";

fn train_tiny(dir: &Path) -> std::path::PathBuf {
    fs::write(dir.join("src.txt"), SOURCE).unwrap();
    fs::write(dir.join("tgt.txt"), TARGET).unwrap();
    fs::write(dir.join("kb.tsv"), KB).unwrap();
    fs::write(
        dir.join("train.cfg"),
        "# tiny\nembed_dim = 4\nhidden_dim = 6\nepochs = 2\nbatch_size = 2\nbeam = 3\nmax_decode_len = 20\nkb = ".to_string()
            + s(&dir.join("kb.tsv"))
            + "\n",
    )
    .unwrap();
    let out = dir.join("run");
    let o = consimp(&[
        "train",
        "--config",
        s(&dir.join("train.cfg")),
        "--source",
        s(&dir.join("src.txt")),
        "--target",
        s(&dir.join("tgt.txt")),
        "--out-dir",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn train_then_simplify() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path());
    for f in ["model.ckpt", "epoch-0001.ckpt", "epoch-0002.ckpt", "train_log.csv", "config.txt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("epoch,train_loss,valid_loss,seconds\n"));
    assert!(fs::read_to_string(run.join("config.txt")).unwrap().contains("hidden_dim = 6"));

    let input = dir.path().join("in.txt");
    fs::write(&input, "The hub is key.\n\nthe dog ran .\n").unwrap();
    let args = |out: &str, trace: &str| {
        vec![
            "simplify".to_string(),
            "--model".into(),
            s(&run.join("model.ckpt")).into(),
            "--kb".into(),
            s(&dir.path().join("kb.tsv")).into(),
            "--input".into(),
            s(&input).into(),
            "--beam".into(),
            "2".into(),
            "--max-constraints".into(),
            "2".into(),
            "--output".into(),
            out.into(),
            "--trace".into(),
            trace.into(),
        ]
    };
    let (o1, t1) = (dir.path().join("o1.txt"), dir.path().join("t1.jsonl"));
    let (o2, t2) = (dir.path().join("o2.txt"), dir.path().join("t2.jsonl"));
    for (o, t) in [(&o1, &t1), (&o2, &t2)] {
        let a = args(s(o), s(t));
        let r = consimp(&a.iter().map(String::as_str).collect::<Vec<_>>());
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    let out = fs::read_to_string(&o1).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].contains("center") && lines[0].contains("important"), "{}", lines[0]);
    assert_eq!(lines[1], "");
    let trace = fs::read_to_string(&t1).unwrap();
    assert_eq!(trace.lines().count(), 3);
    assert!(trace.lines().next().unwrap().contains("\"complex\":\"hub\""));
    assert_eq!(out, fs::read_to_string(&o2).unwrap());
    assert_eq!(trace, fs::read_to_string(&t2).unwrap());
}

#[test]
fn evaluate_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (i, o, r) = (dir.path().join("i"), dir.path().join("copy.txt"), dir.path().join("r"));
    fs::write(&i, SOURCE).unwrap();
    fs::write(&o, SOURCE).unwrap();
    fs::write(&r, TARGET).unwrap();
    let csv = consimp(&["evaluate", "--input", s(&i), "--output", s(&o), "--reference", s(&r), "--report", "csv"]);
    assert!(csv.status.success());
    let text = String::from_utf8(csv.stdout).unwrap();
    let mut rows = text.lines();
    assert_eq!(rows.next(), Some("system,FK,BLEU(O,R),BLEU(O,I),iBLEU,SARI"));
    let fields: Vec<&str> = rows.next().unwrap().split(',').collect();
    assert_eq!(fields[0], "copy");
    assert_eq!(fields[3], "100");

    let table = consimp(&["evaluate", "--input", s(&i), "--output", s(&o), "--reference", s(&r)]);
    assert!(String::from_utf8(table.stdout).unwrap().starts_with("system"));

    fs::write(&r, "only one line\n").unwrap();
    let bad = consimp(&["evaluate", "--input", s(&i), "--output", s(&o), "--reference", s(&r)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn kb_check_reports_coverage_and_rejects_malformed() {
    let dir = tempfile::tempdir().unwrap();
    let kb = dir.path().join("kb.tsv");
    let corpus = dir.path().join("c.txt");
    fs::write(&kb, format!("{KB}same\tsame\t0.5\n")).unwrap();
    fs::write(&corpus, SOURCE).unwrap();
    let o = consimp(&["kb-check", "--kb", s(&kb), "--corpus", s(&corpus)]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("rules: 3\n"), "{text}");
    assert!(text.contains("rejected: 1\n"));
    assert!(text.contains("sentences: 4\n"));

    fs::write(&kb, "no tabs here\n").unwrap();
    assert_eq!(consimp(&["kb-check", "--kb", s(&kb)]).status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(consimp(&[]).status.code(), Some(1));
    assert_eq!(consimp(&["simplify", "--bogus"]).status.code(), Some(1));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "beam = 0\n").unwrap();
    let o = consimp(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("beam"));

    fs::write(&cfg, "colour = blue\n").unwrap();
    let o = consimp(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains(":1: `colour`: unknown key"));

    let missing = dir.path().join("nope.txt");
    let o = consimp(&["train", "--source", s(&missing), "--target", s(&missing), "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));

    let kb = dir.path().join("kb.tsv");
    let input = dir.path().join("in.txt");
    let ck = dir.path().join("broken.ckpt");
    fs::write(&kb, KB).unwrap();
    fs::write(&input, "the hub .\n").unwrap();
    fs::write(&ck, "not a checkpoint\n").unwrap();
    let o = consimp(&["simplify", "--model", s(&ck), "--kb", s(&kb), "--input", s(&input)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn oov_constraint_is_a_model_error() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path());
    let kb = dir.path().join("oov.tsv");
    fs::write(&kb, "hub\tnexus\t0.9\n").unwrap();
    let input = dir.path().join("in.txt");
    fs::write(&input, "the dog ran .\nthe hub is key .\n").unwrap();
    let o = consimp(&["simplify", "--model", s(&run.join("model.ckpt")), "--kb", s(&kb), "--input", s(&input)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}
