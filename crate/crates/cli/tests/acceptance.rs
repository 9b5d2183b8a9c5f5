//! Acceptance criteria observable through the `cm` binary; one PASS/FAIL
//! line each, non-zero exit on any FAIL.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use cm_core::train::load_checkpoint;

fn cm(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cm"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("cm {args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn tree(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(|e| e.to_string())? {
            let p = e.map_err(|e| e.to_string())?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, fs::read(&p).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(out)
}

fn rounds(d: &Path) -> Result<(bool, String), String> {
    cm(d, &["train", "--config", "corpus/config.toml", "--rounds", "3", "--seed", "0", "--epochs", "2", "--out", "rounds"])?;
    let mut seeds = Vec::new();
    let mut weights = Vec::new();
    for r in 0..3 {
        let ck = load_checkpoint(d.join(format!("rounds/round_{r}/model.cmck"))).map_err(|e| e.to_string())?;
        seeds.push(ck.params.seed);
        weights.push(ck.params.params);
    }
    let distinct = weights[0] != weights[1] && weights[1] != weights[2] && weights[0] != weights[2];
    Ok((seeds == [0, 1, 2] && distinct, format!("`cm train --rounds 3` checkpoints seeded {seeds:?}, distinct weights: {distinct}")))
}

/// Train, evaluate, probe and compare into `out`.
fn pipeline(d: &Path, out: &str) -> Result<(), String> {
    let o = |s: &str| format!("{out}/{s}");
    cm(d, &["train", "--config", "corpus/config.toml", "--backend", "lgf", "--epochs", "3", "--rounds", "2", "--out", &o("train")])?;
    for r in ["0", "1"] {
        let ck = o(&format!("train/round_{r}/model.cmck"));
        cm(d, &["eval", "--checkpoint", &ck, "--protocol", "corpus/eval.tsv", "--by", "attack", "--out", &o(&format!("eval_{r}"))])?;
    }
    cm(d, &["probe", "--checkpoint", &o("train/round_0/model.cmck"), "--protocol", "corpus/eval.tsv", "--bands", "default", "--out", &o("probe")])?;
    cm(d, &["stats", &o("eval_0/eval.score"), &o("eval_1/eval.score"), "--protocol", "corpus/eval.tsv", "--out", &o("stats")])?;
    Ok(())
}

fn determinism(d: &Path) -> Result<(bool, String), String> {
    pipeline(d, "first")?;
    pipeline(d, "second")?;
    let (a, b) = (tree(&d.join("first"))?, tree(&d.join("second"))?);
    let differing: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let kinds = ["model.cmck", "eval.score", "dev.score", "summary.csv", "matrix.csv", "metrics.csv"];
    let covered = kinds.iter().all(|k| a.keys().any(|p| p.ends_with(k)));
    Ok((
        differing.is_empty() && covered,
        format!("two train/eval/probe/stats runs: {} files compared, differing {differing:?}", a.len()),
    ))
}

fn cmfeat_fixtures(d: &Path) -> Result<(bool, String), String> {
    cm(d, &["lfcc", "--protocol", "corpus/eval.tsv", "--out", "dump"])?;
    let ck = "rounds/round_0/model.cmck";
    let direct = cm(d, &["eval", "--checkpoint", ck, "--protocol", "corpus/eval.tsv", "--out", "direct"])?;
    let stored = cm(d, &[
        "eval", "--checkpoint", ck, "--protocol", "corpus/eval.tsv", "--frontend", "external",
        "--manifest", "dump/manifest.tsv", "--no-project", "--out", "stored",
    ])?;
    let same = fs::read(d.join("direct/eval.score")).map_err(|e| e.to_string())?
        == fs::read(d.join("stored/eval.score")).map_err(|e| e.to_string())?;
    Ok((
        same && direct == stored,
        format!("scores from `cm lfcc` CMFEAT dump equal on-the-fly LFCC scores byte for byte: {same}"),
    ))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let d = tmp.path();
    if let Err(e) = cm(d, &["synth", "--n-per-class", "20", "--out", "corpus"]) {
        println!("FAIL setup: {e}");
        std::process::exit(1);
    }
    let checks: [(&str, fn(&Path) -> Result<(bool, String), String>); 3] = [
        ("recipe_fidelity_rounds", rounds),
        ("determinism", determinism),
        ("cmfeat_fixture_scoring", cmfeat_fixtures),
    ];
    let mut failed = Vec::new();
    for (name, f) in checks {
        let t = Instant::now();
        let (pass, detail) = f(d).unwrap_or_else(|e| (false, format!("error: {e}")));
        println!("{} {name}: {detail} [{:.1}s]", if pass { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
        if !pass {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: {} failing: {}", failed.len(), failed.join(", "));
        std::process::exit(1);
    }
}
