use std::fs;
use std::path::Path;

use consimp::pipeline::{run_simplify_pipeline, run_training, PipelineConfig, Simplifier};

const SOURCE: &str = "millbrook became a key market town after the opening of the canal in 1821 , serving as a hub for a great deal of grain and timber trade until the 1950s .";
const TARGET: &str = "millbrook became an important market town after the opening of the canal in 1821 . it became a center of grain and timber trade until the 1950s .";
const KB: &str = "key\timportant\t0.9\nhub\tcenter\t0.9\na great deal of\tmany\t0.8\n";

fn trained(dir: &Path) -> PipelineConfig {
    fs::write(dir.join("src"), format!("{SOURCE}\na great deal of people came .\n")).unwrap();
    fs::write(dir.join("tgt"), format!("{TARGET}\nmany people came .\n")).unwrap();
    fs::write(dir.join("kb.tsv"), KB).unwrap();
    let text = format!(
        "kb = {}\nembed_dim = 8\nhidden_dim = 16\nepochs = 300\nbatch_size = 1\ncheckpoint_every = 0\nmax_decode_len = 60\nbeam = 3\n",
        dir.join("kb.tsv").display()
    );
    let mut cfg = PipelineConfig::parse(&text, "test").unwrap();
    let out = dir.join("run");
    let summary = run_training(&cfg, &dir.join("src"), &dir.join("tgt"), &out).unwrap();
    assert_eq!(summary.train_pairs, 2);
    assert!(summary.log.epochs.last().unwrap().train_loss < 0.1);
    cfg.checkpoint = Some(out.join("model.ckpt"));
    let echo = PipelineConfig::load(&out.join("config.txt")).unwrap();
    assert_eq!(echo.hidden_dim, 16);
    cfg
}

#[test]
fn multi_pass_on_overfit_pair() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let s = Simplifier::from_config(&cfg).unwrap();
    let out = run_simplify_pipeline(SOURCE, &s).unwrap();
    let t = &out.trace;
    assert_eq!(t.constraints.len(), 3);
    assert!(t.passes.len() >= 2, "{t:?}");
    let words: Vec<&str> = t.output.split(' ').collect();
    for w in ["important", "center"] {
        assert!(words.contains(&w), "{w} missing from {}", t.output);
    }
    let skipped_for_limit = t.skipped.iter().filter(|(_, why)| *why == "pass_limit").count();
    assert_eq!(skipped_for_limit, 0);
}

#[test]
fn same_seed_gives_identical_trace() {
    let traces: Vec<String> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let cfg = trained(dir.path());
            let s = Simplifier::from_config(&cfg).unwrap();
            run_simplify_pipeline(SOURCE, &s).unwrap().trace.to_json_line()
        })
        .collect();
    assert_eq!(traces[0], traces[1]);
}
