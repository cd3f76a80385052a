mod common;

use common::{cli_pipeline, sbmoe, sbmoe_ok, snapshot};

fn stderr(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn synth_twice_gives_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        sbmoe_ok(&["synth", "--domains", "3", "--dim", "32", "--seed", "42", "--out", "d"], dir.path());
    }
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.len(), 8);
    assert_eq!(sa, sb);
}

#[test]
fn pipeline_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ea = cli_pipeline(a.path());
    let eb = cli_pipeline(b.path());
    assert_eq!(ea, eb);
    assert_eq!(snapshot(a.path()), snapshot(b.path()));
    let text = String::from_utf8(ea).unwrap();
    assert!(text.starts_with("nDCG@10\tall\t0."), "{text}");
}

#[test]
fn evaluate_prints_five_decimals() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.txt"), "q Q0 a 1 2 t\nq Q0 b 2 1 t\n").unwrap();
    std::fs::write(dir.path().join("qrels.txt"), "q 0 b 1\n").unwrap();
    let out = sbmoe_ok(
        &["evaluate", "--run", "run.txt", "--qrels", "qrels.txt", "--metric", "ndcg@10"],
        dir.path(),
    );
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "nDCG@10\tall\t0.63093\n");
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("run.txt"), "q Q0 a 1 2 t\n").unwrap();

    let missing = sbmoe(&["evaluate", "--run", "run.txt", "--qrels", "nope.txt"], p);
    assert!(!missing.status.success());
    assert!(stderr(&missing).contains("nope.txt"));

    let unknown = sbmoe(&["evaluate", "--bogus"], p);
    assert!(!unknown.status.success());

    sbmoe_ok(&["synth", "--out", "a", "--dim", "8", "--docs-per-domain", "10", "--queries-per-domain", "2", "--train-queries-per-domain", "2", "--subspace-rank", "2"], p);
    sbmoe_ok(&["synth", "--out", "b", "--dim", "6", "--docs-per-domain", "10", "--queries-per-domain", "2", "--train-queries-per-domain", "2", "--subspace-rank", "2"], p);
    sbmoe_ok(&["index", "--corpus", "a/corpus.sbme", "--out", "idx"], p);
    let mismatch = sbmoe(&["search", "--index", "idx", "--queries", "b/queries.sbme", "--out", "r.txt"], p);
    assert!(!mismatch.status.success());
    assert!(stderr(&mismatch).contains("dimension"), "{}", stderr(&mismatch));

    let bad_synth = sbmoe(&["synth", "--out", "c", "--dim", "2", "--domains", "3"], p);
    assert!(!bad_synth.status.success());
}

#[test]
fn config_file_from_flag_or_environment() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    sbmoe_ok(&["synth", "--out", "d", "--docs-per-domain", "50", "--queries-per-domain", "5", "--train-queries-per-domain", "40"], p);
    std::fs::write(p.join("cfg.txt"), "epochs=2\nlr=0.001\nexperts=2\n").unwrap();
    std::fs::write(p.join("broken.txt"), "epochs=two\n").unwrap();
    let train = ["train", "--corpus", "d/corpus.sbme", "--queries", "d/train_queries.sbme", "--qrels", "d/train_qrels.txt"];

    let mut args = train.to_vec();
    args.extend(["--out", "a.ckpt", "--config", "cfg.txt"]);
    sbmoe_ok(&args, p);
    let log = std::fs::read_to_string(p.join("a.ckpt.log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let via_env = std::process::Command::new(env!("CARGO_BIN_EXE_sbmoe"))
        .args(train)
        .args(["--out", "b.ckpt"])
        .env(sbmoe::io::CONFIG_ENV, "cfg.txt")
        .current_dir(p)
        .output()
        .unwrap();
    assert!(via_env.status.success(), "{}", stderr(&via_env));
    assert_eq!(std::fs::read(p.join("a.ckpt")).unwrap(), std::fs::read(p.join("b.ckpt")).unwrap());

    let mut args = train.to_vec();
    args.extend(["--out", "c.ckpt", "--config", "broken.txt"]);
    let broken = sbmoe(&args, p);
    assert!(!broken.status.success());
    assert!(stderr(&broken).contains("broken.txt:1"), "{}", stderr(&broken));
}

#[test]
fn help_lists_every_subcommand() {
    let out = sbmoe_ok(&["--help"], std::path::Path::new("."));
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["synth", "train", "index", "search", "evaluate", "compare", "activation", "sweep", "export-viz"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn export_viz_and_random_gate_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    sbmoe_ok(&["synth", "--out", "d", "--docs-per-domain", "50", "--queries-per-domain", "3", "--train-queries-per-domain", "40"], p);
    sbmoe_ok(&["train", "--corpus", "d/corpus.sbme", "--queries", "d/train_queries.sbme", "--qrels", "d/train_qrels.txt", "--out", "b.ckpt", "--epochs", "1", "--experts", "3"], p);
    let rg = ["--checkpoint", "b.ckpt", "--pooling", "random-gate", "--random-style", "top1", "--seed", "5"];
    let mut idx = vec!["index", "--corpus", "d/corpus.sbme", "--out", "idx"];
    idx.extend(rg);
    sbmoe_ok(&idx, p);
    let mut search = vec!["search", "--index", "idx", "--queries", "d/queries.sbme", "--out", "run.txt", "--k", "20"];
    search.extend(rg);
    sbmoe_ok(&search, p);
    // a different style is a different refinement
    let mut wrong = search.clone();
    let style = wrong.len() - 3;
    wrong[style] = "all";
    assert!(!sbmoe(&wrong, p).status.success());

    let mut viz = vec!["export-viz", "--query", "q0", "--run", "run.txt", "--queries", "d/queries.sbme", "--corpus", "d/corpus.sbme", "--top-k", "5", "--out", "viz.tsv"];
    viz.extend(rg);
    sbmoe_ok(&viz, p);
    let rows = sbmoe::analysis::parse_viz(&std::fs::read_to_string(p.join("viz.tsv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 6);

    let act = sbmoe_ok(&["activation", "--index", "idx", "--threshold-count", "1"], p);
    assert!(String::from_utf8(act.stdout).unwrap().contains("corpus=150"));
}
