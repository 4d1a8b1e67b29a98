use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use xtal::dataset::{toy_corpus, write_jsonl};

fn xtal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xtal"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn toy_file(dir: &Path) -> PathBuf {
    let p = dir.join("toy.jsonl");
    write_jsonl(&p, &toy_corpus()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 12] = [
    "--set", "width=16", "--set", "layers=1", "--set", "heads=2", "--set", "gem_edge_hidden=8", "--set", "log_samples=2",
    "--set", "log_sample_steps=4",
];

#[test]
fn geom_subcommands() {
    let o = xtal(&["geom", "min-image", "0.9", "0", "0", "0", "0", "0", "--cubic", "1"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "(-0.1, 0, 0) d=0.1");
    assert_eq!(stdout(&xtal(&["geom", "wrap", "0.7", "-0.5", "1.25"])).trim(), "-0.3 -0.5 0.25");
    assert_eq!(stdout(&xtal(&["geom", "mod1", "-0.25", "1.5"])).trim(), "0.75 0.5");
    let o = xtal(&["geom", "latent-roundtrip", "--lattice", "4", "0", "0", "1", "5", "0", "0.5", "0.3", "6"]);
    assert!(o.status.success());
    let err: f64 = stdout(&o).lines().last().unwrap().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(err < 1e-12);
    let o = xtal(&["geom", "min-image", "0", "0", "0", "0.5", "0.5", "0.5", "--lattice", "1", "0", "0", "0", "1", "0", "0", "0", "-1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn build_tokens_and_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tokens.json");
    let o = xtal(&["build-tokens", "--out", s(&out)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("round-trip 89/89"));
    assert!(out.exists());

    let missing = dir.path().join("nope.txt");
    let o = xtal(&["build-tokens", "--elements", s(&missing), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));

    let elems = dir.path().join("elems.txt");
    std::fs::write(&elems, "Fe, O\nXx\n").unwrap();
    assert_eq!(xtal(&["build-tokens", "--elements", s(&elems), "--out", s(&out)]).status.code(), Some(2));
    std::fs::write(&elems, "Fe Co Ni 8\n").unwrap();
    let o = xtal(&["build-tokens", "--elements", s(&elems), "--dh", "3", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("4/4"));
}

#[test]
fn schedule_dump() {
    let o = xtal(&["schedule", "--dump"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# xtal "));
    assert_eq!(lines[1], "i,sigma,alpha_h,alpha_f,alpha_lat");
    assert_eq!(lines.len(), 2 + 151);
    assert!(lines[2].starts_with("0,80,"));
    assert_eq!(*lines.last().unwrap(), "150,0,,,");
    let o = xtal(&["schedule", "--dump", "--steps", "4", "--aa-coords", "10"]);
    assert_eq!(stdout(&o).lines().count(), 2 + 5);
    assert_eq!(xtal(&["schedule", "--set", "rho=-1"]).status.code(), Some(2));
    assert_eq!(xtal(&["schedule", "--set", "bogus=1"]).status.code(), Some(2));
}

#[test]
fn dataset_stats_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let toy = toy_file(dir.path());
    let written = dir.path().join("written.jsonl");
    assert!(xtal(&["dataset", "toy", "--out", s(&written)]).status.success());
    assert_eq!(std::fs::read(&written).unwrap(), std::fs::read(&toy).unwrap());
    let o = xtal(&["dataset", "stats", s(&toy)]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("crystals 16 (skipped 0)"));

    let report = dir.path().join("eval.json");
    let o = xtal(&["eval", "--generated", s(&toy), "--reference", s(&toy), "--out", s(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["n_generated"], 16);
    assert_eq!(v["unique"], 1.0);
    assert_eq!(v["novel"], 0.0);
    assert_eq!(v["wdist_rho"], 0.0);
    assert!(v["sun"].is_null());

    let o = xtal(&["csp-eval", "--predictions", s(&toy), "--truths", s(&toy), "--out", s(&report)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("match_rate=1.0000 rmsd=0.0000"));

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{not json}\n").unwrap();
    assert_eq!(xtal(&["dataset", "stats", s(&bad)]).status.code(), Some(2));
    assert_eq!(xtal(&["eval", "--generated", s(&bad), "--reference", s(&toy), "--out", s(&report)]).status.code(), Some(2));
}

#[test]
fn train_sample_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let toy = toy_file(dir.path());
    let ckpt = dir.path().join("model.json");
    let log = dir.path().join("log.csv");
    let mut args = vec!["train", "--data", s(&toy), "--out", s(&ckpt), "--log", s(&log), "--steps", "4", "--set", "log_every=2"];
    args.extend(TINY);
    let o = xtal(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&log).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert!(rows[0].starts_with("# xtal "));
    assert!(rows[1].starts_with("step,loss,grad_norm"));
    assert_eq!(rows.len(), 4);
    assert!(rows[3].starts_with("4,"));

    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for out in [&a, &b] {
        let o = xtal(&["sample", "--ckpt", s(&ckpt), "--n", "3", "--out", s(out), "--seed", "7", "--set", "sample_steps=6"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let samples = xtal::dataset::read_jsonl(&a).unwrap();
    assert_eq!(samples.len(), 3);

    let comps = dir.path().join("comps.jsonl");
    std::fs::write(&comps, "{\"atomic_numbers\": [11, 17]}\n").unwrap();
    let c = dir.path().join("c.jsonl");
    let o = xtal(&["sample", "--ckpt", s(&ckpt), "--n", "2", "--csp", s(&comps), "--out", s(&c), "--set", "sample_steps=6"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let preds = xtal::dataset::read_jsonl(&c).unwrap();
    assert_eq!(preds.len(), 2);
    assert!(preds.iter().all(|p| p.atomic_numbers == vec![11, 17]));

    assert_eq!(xtal(&["sample", "--ckpt", s(&dir.path().join("none.json")), "--out", s(&c)]).status.code(), Some(2));
}

#[test]
fn train_zero_steps_and_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let toy = toy_file(dir.path());
    let ckpt = dir.path().join("m.json");
    let mut args = vec!["train", "--data", s(&toy), "--out", s(&ckpt), "--steps", "0"];
    args.extend(TINY);
    assert!(xtal(&args).status.success());
    assert!(ckpt.exists());

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "# nothing here\n").unwrap();
    let mut args = vec!["train", "--data", s(&empty), "--out", s(&ckpt), "--steps", "1"];
    args.extend(TINY);
    assert_eq!(xtal(&args).status.code(), Some(2));
}
