use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use cm_core::frontend::{write_features, FeatureManifest, MultiLayerFeatures};
use cm_core::train::load_checkpoint;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn cm(dir: &Path, args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_cm")).args(args).current_dir(dir).output().unwrap();
    Run {
        code: out.status.code().unwrap(),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let r = cm(dir, args);
    assert_eq!(r.code, 0, "cm {args:?} failed: {}", r.stderr);
    r.stdout
}

/// Small corpus plus a quickly trained GF model that separates it.
fn trained(dir: &Path) {
    ok(dir, &["synth", "--n-per-class", "40", "--out", "corpus"]);
    ok(dir, &["train", "--config", "corpus/config.toml", "--epochs", "30", "--batch-size", "16", "--lr", "0.01", "--out", "run"]);
}

fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn rounds_are_seeded_consecutively() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["synth", "--n-per-class", "10", "--out", "c"]);
    let stdout = ok(t.path(), &["train", "--config", "c/config.toml", "--rounds", "3", "--seed", "5", "--epochs", "2", "--out", "r"]);
    assert_eq!(stdout.lines().count(), 4);
    for r in 0..3 {
        let dir = t.path().join(format!("r/round_{r}"));
        assert_eq!(load_checkpoint(dir.join("model.cmck")).unwrap().params.seed, 5 + r);
        assert!(dir.join("epochs.csv").exists() && dir.join("dev.score").exists());
    }
}

#[test]
fn missing_protocol_exits_2_without_outputs() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["synth", "--n-per-class", "10", "--out", "c"]);
    let r = cm(t.path(), &["train", "--train-protocol", "absent.tsv", "--dev-protocol", "c/dev.tsv", "--out", "run"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("absent.tsv"));
    assert!(!t.path().join("run").exists());

    let r = cm(t.path(), &["eval", "--checkpoint", "none.cmck", "--protocol", "c/eval.tsv", "--out", "ev"]);
    assert_eq!(r.code, 2);
    assert!(!t.path().join("ev").exists());
}

#[test]
fn bad_config_exits_2() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("c.toml"), "[train]\nlearning_rate = 1.0\n").unwrap();
    let r = cm(t.path(), &["synth", "--config", "c.toml", "--out", "x"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("learning_rate"));
    assert_eq!(cm(t.path(), &["synth", "--jobs", "0", "--out", "x"]).code, 2);
    assert_eq!(cm(t.path(), &["probe"]).code, 2);
}

#[test]
fn rerun_from_echoed_config_is_byte_identical() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["synth", "--n-per-class", "10", "--out", "c"]);
    ok(t.path(), &["train", "--config", "c/config.toml", "--backend", "lgf", "--epochs", "2", "--rounds", "2", "--out", "a"]);
    ok(t.path(), &["train", "--config", "a/config.toml", "--out", "b"]);
    ok(t.path(), &["train", "--config", "a/config.toml", "--jobs", "3", "--out", "c3"]);
    let a = read_tree(&t.path().join("a"));
    assert_eq!(a.len(), 8);
    assert_eq!(a, read_tree(&t.path().join("b")));
    let mut threaded = read_tree(&t.path().join("c3"));
    // only the echoed thread count differs
    assert_ne!(threaded.remove(Path::new("config.toml")), a.get(Path::new("config.toml")).cloned());
    let mut a = a;
    a.remove(Path::new("config.toml"));
    assert_eq!(a, threaded);
}

#[test]
fn eval_stats_probe_pipeline() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    trained(d);
    let metrics = ok(d, &["eval", "--checkpoint", "run/round_0/model.cmck", "--protocol", "corpus/eval.tsv", "--by", "attack", "--out", "ev"]);
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "eer,min_tdcf,threshold,n_bonafide,n_spoof");
    assert!(lines[1].starts_with("0.000000,0.000000,"), "{metrics}");
    // one pseudo-attack, one row
    assert_eq!(&lines[3..], ["attack,eer,threshold,n_bonafide,n_spoof", lines[4]]);
    assert!(lines[4].starts_with("AS01,0.000000,"));
    assert_eq!(fs::read_to_string(d.join("ev/metrics.csv")).unwrap(), lines[..2].join("\n") + "\n");

    // the score file fed back through stats reproduces the EER
    fs::copy(d.join("ev/eval.score"), d.join("twin.score")).unwrap();
    let matrix = ok(d, &["stats", "ev/eval.score", "twin.score", "--protocol", "corpus/eval.tsv", "--alpha", "0.05", "--out", "st"]);
    assert_eq!(matrix, "labelA,labelB,p,reject\neval,twin,1.000000e0,false\n");
    let systems = fs::read_to_string(d.join("st/systems.csv")).unwrap();
    let eer_of = |csv: &str, row: usize| csv.lines().nth(row).unwrap().split(',').nth(1).unwrap().to_string();
    assert_eq!(eer_of(&systems, 1), eer_of(&metrics, 1));

    let summary = ok(d, &["probe", "--checkpoint", "run/round_0/model.cmck", "--protocol", "corpus/eval.tsv", "--bands", "default", "--out", "pr"]);
    assert_eq!(summary.lines().count(), 9);
    assert!(summary.contains("\n2400,4000,"));
    assert!(d.join("pr/hist_7200_8000.csv").exists() && d.join("pr/config.toml").exists());
}

#[test]
fn mismatched_checkpoint_exits_3() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["synth", "--n-per-class", "10", "--out", "c"]);
    ok(d, &["train", "--config", "c/config.toml", "--epochs", "1", "--out", "r"]);
    let r = cm(d, &["eval", "--checkpoint", "r/round_0/model.cmck", "--protocol", "c/eval.tsv", "--backend", "llgf", "--out", "ev"]);
    assert_eq!(r.code, 3, "{}", r.stderr);
    assert!(!d.join("ev").exists());

    ok(d, &["lfcc", "--protocol", "c/eval.tsv", "--out", "dump"]);
    let projected = ["eval", "--checkpoint", "r/round_0/model.cmck", "--protocol", "c/eval.tsv", "--frontend", "external", "--manifest", "dump/manifest.tsv", "--out", "ev"];
    assert_eq!(cm(d, &projected).code, 3);
    let probe_ext = "[frontend]\nkind = \"external\"\nproject = false\nmanifest = \"dump/manifest.tsv\"\n";
    fs::write(d.join("ext.toml"), probe_ext).unwrap();
    let r = cm(d, &["probe", "--config", "ext.toml", "--checkpoint", "r/round_0/model.cmck", "--protocol", "c/eval.tsv", "--out", "pr"]);
    assert_eq!(r.code, 3, "{}", r.stderr);

    let mut bytes = fs::read(d.join("r/round_0/model.cmck")).unwrap();
    bytes[40] ^= 1;
    fs::write(d.join("bad.cmck"), bytes).unwrap();
    assert_eq!(cm(d, &["eval", "--checkpoint", "bad.cmck", "--protocol", "c/eval.tsv", "--out", "ev"]).code, 2);
}

#[test]
fn lfcc_dump_scores_match_lfcc_frontend_bit_exactly() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    trained(d);
    let dump = ok(d, &["lfcc", "--protocol", "corpus/eval.tsv", "--out", "dump"]);
    assert!(dump.starts_with("trials,frames\n16,"));
    let direct = ok(d, &["eval", "--checkpoint", "run/round_0/model.cmck", "--protocol", "corpus/eval.tsv", "--out", "a"]);
    let stored = ok(d, &[
        "eval", "--checkpoint", "run/round_0/model.cmck", "--protocol", "corpus/eval.tsv",
        "--frontend", "external", "--manifest", "dump/manifest.tsv", "--no-project", "--out", "b",
    ]);
    assert_eq!(direct, stored);
    assert_eq!(fs::read(d.join("a/eval.score")).unwrap(), fs::read(d.join("b/eval.score")).unwrap());

    // single files take their stem as trial id
    ok(d, &["lfcc", "corpus/wav/SYN_B_00000.wav", "--out", "one"]);
    let m = FeatureManifest::load(d.join("one/manifest.tsv")).unwrap();
    assert_eq!((m.n_layers, m.dim), (1, 60));
    assert!(m.path_of("SYN_B_00000").is_some());
}

#[test]
fn diverging_training_exits_4() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let mut entries = BTreeMap::new();
    let mut protocol = String::from("trial_id\tlabel\tattack\tcodec\tpath\n");
    for i in 0..4 {
        let id = format!("T{i}");
        // identical, huge but finite inputs: one absurd step overflows the logits
        let data = vec![1e30f32; 300 * 4];
        write_features(d.join(format!("{id}.cmf")), &MultiLayerFeatures::new(1, 300, 4, data).unwrap()).unwrap();
        entries.insert(id.clone(), PathBuf::from(format!("{id}.cmf")));
        let label = if i % 2 == 0 { "bonafide" } else { "spoof" };
        protocol.push_str(&format!("{id}\t{label}\t-\t-\t-\n"));
    }
    FeatureManifest::write(d.join("manifest.tsv"), &entries).unwrap();
    fs::write(d.join("p.tsv"), protocol).unwrap();
    let r = cm(d, &[
        "train", "--frontend", "external", "--manifest", "manifest.tsv", "--no-project",
        "--train-protocol", "p.tsv", "--dev-protocol", "p.tsv", "--epochs", "3", "--lr", "1e300", "--out", "run",
    ]);
    assert_eq!(r.code, 4, "{}", r.stderr);
}

#[test]
fn log_level_comes_from_cm_log() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["synth", "--n-per-class", "10", "--out", "c"]);
    let out = Command::new(env!("CARGO_BIN_EXE_cm"))
        .args(["train", "--config", "c/config.toml", "--epochs", "1", "--out", "r"])
        .current_dir(t.path())
        .env("CM_LOG", "info")
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains("round 0"));
}
