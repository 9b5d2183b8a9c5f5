use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;

use cm_core::data::{generate_synthetic_dataset, parse_protocol, ProtocolFormat, ProtocolSet};
use cm_core::dsp::read_wav;
use cm_core::eval::{
    compute_eer, decompose_eer, decomposition_csv, metrics_csv, DecomposeBy, min_tdcf, missing_inputs, read_scores, score_trials,
    write_scores, ScoreSet,
};
use cm_core::frontend::{write_features, FeatureManifest, FrontEnd, FrontendConfig, FrontendInput, FrontendKind, MultiLayerFeatures};
use cm_core::model::Model;
use cm_core::nn::BackendKind;
use cm_core::probe::{run_probe, DEFAULT_BANDS};
use cm_core::stats::build_matrix;
use cm_core::train::{expected_fingerprint, load_checkpoint, save_checkpoint, train as train_model, write_epoch_log};
use cm_core::{Error, Result};

use crate::config::RunConfig;
use crate::{Common, EvalArgs, FrontendArgs, LfccArgs, ProbeArgs, ProtocolArgs, StatsArgs, SynthArgs, TrainArgs};

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::io(p, e))
}

fn load_config(common: &Common, preset: Option<&str>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref(), preset)?;
    if let Some(j) = common.jobs {
        cfg.jobs = j;
    }
    Ok(cfg)
}

/// Validates the config and sizes the global thread pool.
fn start(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build_global();
    Ok(())
}

fn apply_frontend(cfg: &mut RunConfig, a: &FrontendArgs) -> Result<()> {
    if let Some(k) = a.frontend {
        cfg.frontend.kind = k;
    }
    if let Some(m) = &a.manifest {
        cfg.frontend.manifest = Some(absolute(m)?);
    }
    if a.no_project {
        cfg.frontend.project = false;
    }
    if let Some(s) = a.frame_shift {
        cfg.frontend.frame_shift_s = s;
    }
    Ok(())
}

fn apply_protocol(cfg: &mut RunConfig, a: &ProtocolArgs) -> Result<()> {
    if let Some(p) = &a.protocol {
        cfg.data.eval_protocol = Some(absolute(p)?);
    }
    if let Some(f) = a.protocol_format {
        cfg.data.protocol_format = f;
    }
    Ok(())
}

fn load_protocol(path: Option<&Path>, format: ProtocolFormat, what: &str) -> Result<ProtocolSet> {
    let path = path.ok_or_else(|| Error::Config(format!("no {what} protocol given")))?;
    parse_protocol(path, format)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint and binds it to the configured front end, refusing
/// weights trained for something else.
fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model> {
    let frontend = FrontEnd::new(&cfg.frontend)?;
    let ck = load_checkpoint(checkpoint)?;
    let backend = cfg.backend.unwrap_or(ck.fingerprint.backend);
    ck.fingerprint.require(&expected_fingerprint(&frontend, backend))?;
    Model::new(frontend, ck.params)
}

fn require_inputs(model: &Model, protocol: &ProtocolSet) -> Result<()> {
    let missing = missing_inputs(model, protocol);
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingTrials(missing))
    }
}

fn parse_band(s: &str) -> Result<(f64, f64)> {
    let bad = || Error::Config(format!("band '{s}' is not low-high in Hz"));
    let (lo, hi) = s.split_once('-').ok_or_else(bad)?;
    Ok((lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?))
}

fn parse_bands(s: &str) -> Result<Vec<(f64, f64)>> {
    if s == "default" {
        return Ok(DEFAULT_BANDS.to_vec());
    }
    s.split(',').map(parse_band).collect()
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.common, a.preset.as_deref())?;
    apply_frontend(&mut cfg, &a.frontend)?;
    if let Some(b) = a.backend {
        cfg.backend = Some(b);
    }
    if let Some(p) = &a.train_protocol {
        cfg.data.train_protocol = Some(absolute(p)?);
    }
    if let Some(p) = &a.dev_protocol {
        cfg.data.dev_protocol = Some(absolute(p)?);
    }
    if let Some(f) = a.protocol_format {
        cfg.data.protocol_format = f;
    }
    let t = &mut cfg.train;
    if let Some(s) = a.seed {
        t.seed = s;
    }
    if let Some(r) = a.rounds {
        t.rounds = r;
    }
    if let Some(e) = a.epochs {
        t.max_epochs = e;
    }
    if let Some(b) = a.batch_size {
        t.batch_size = b;
    }
    if let Some(lr) = a.lr {
        t.lr0 = lr;
    }
    let backend = *cfg.backend.get_or_insert(BackendKind::Gf);
    start(&cfg)?;

    // everything that can fail on bad input happens before the run dir exists
    let train_set = load_protocol(cfg.data.train_protocol.as_deref(), cfg.data.protocol_format, "training")?;
    let dev_set = load_protocol(cfg.data.dev_protocol.as_deref(), cfg.data.protocol_format, "development")?;
    let frontend = FrontEnd::new(&cfg.frontend)?;
    let probe_model = Model::init(frontend.clone(), backend, cfg.train.seed)?;
    require_inputs(&probe_model, &train_set)?;
    require_inputs(&probe_model, &dev_set)?;

    create_dir(&a.out)?;
    cfg.write(&a.out)?;
    let mut summary = String::from("round,seed,best_epoch,best_dev_loss,dev_eer\n");
    for r in 0..cfg.train.rounds {
        let seed = cfg.train.seed + r as u64;
        info!("round {r}: training {backend} on {} with seed {seed}", frontend.kind());
        let outcome = train_model(&cfg.train, &frontend, backend, &train_set, &dev_set, seed)?;
        let dir = a.out.join(format!("round_{r}"));
        create_dir(&dir)?;
        save_checkpoint(&outcome.best, dir.join("model.cmck"))?;
        write_epoch_log(dir.join("epochs.csv"), &outcome.log)?;
        let model = outcome.model(&frontend)?;
        let scores = score_trials(&model, &dev_set)?;
        write_scores(dir.join("dev.score"), &scores)?;
        let eer = compute_eer(&scores.quantized(), &dev_set)?;
        summary.push_str(&format!(
            "{r},{seed},{},{:.8},{:.6}\n",
            outcome.best.epoch, outcome.best.best_dev_loss, eer.eer
        ));
    }
    write_text(&a.out.join("rounds.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg = load_config(&a.common, None)?;
    apply_frontend(&mut cfg, &a.frontend)?;
    apply_protocol(&mut cfg, &a.protocol)?;
    if let Some(b) = a.backend {
        cfg.backend = Some(b);
    }
    start(&cfg)?;
    let protocol = load_protocol(cfg.data.eval_protocol.as_deref(), cfg.data.protocol_format, "evaluation")?;
    let model = load_model(&cfg, &a.checkpoint)?;
    require_inputs(&model, &protocol)?;

    let scores = score_trials(&model, &protocol)?;
    // metrics come from the scores exactly as written to disk
    let written = scores.quantized();
    let eer = compute_eer(&written, &protocol)?;
    let tdcf = min_tdcf(&written, &protocol, &cfg.tdcf)?;
    let table = a.by.map(|by| decompose_eer(&written, &protocol, by).map(|t| (by, t))).transpose()?;

    create_dir(&a.out)?;
    cfg.write(&a.out)?;
    write_scores(a.out.join("eval.score"), &scores)?;
    let metrics = metrics_csv(&eer, tdcf);
    write_text(&a.out.join("metrics.csv"), &metrics)?;
    print!("{metrics}");
    if let Some((by, t)) = table {
        let csv = decomposition_csv(by, &t);
        let name = if by == DecomposeBy::Attack { "by_attack.csv" } else { "by_codec.csv" };
        write_text(&a.out.join(name), &csv)?;
        print!("\n{csv}");
    }
    Ok(())
}

pub fn probe(a: ProbeArgs) -> Result<()> {
    let mut cfg = load_config(&a.common, None)?;
    apply_protocol(&mut cfg, &a.protocol)?;
    if let Some(b) = &a.bands {
        cfg.probe.stopbands = parse_bands(b)?;
    }
    if let Some(n) = a.subset {
        cfg.probe.subset_size = Some(n);
    }
    if let Some(s) = a.seed {
        cfg.probe.seed = s;
    }
    if let Some(b) = a.bins {
        cfg.probe.n_bins = b;
    }
    start(&cfg)?;
    let protocol = load_protocol(cfg.data.eval_protocol.as_deref(), cfg.data.protocol_format, "evaluation")?;
    let model = load_model(&cfg, &a.checkpoint)?;
    let report = run_probe(&model, &protocol, &cfg.probe)?;
    create_dir(&a.out)?;
    cfg.write(&a.out)?;
    report.write(&a.out)?;
    print!("{}", report.summary_csv());
    Ok(())
}

/// Shortest trailing path (extension dropped) that tells the files apart.
fn labels(paths: &[PathBuf]) -> Vec<String> {
    let parts: Vec<Vec<String>> = paths
        .iter()
        .map(|p| {
            let mut c: Vec<String> = p.with_extension("").components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            c.reverse();
            c
        })
        .collect();
    let deepest = parts.iter().map(Vec::len).max().unwrap_or(1);
    let label = |c: &Vec<String>, k: usize| {
        let mut tail: Vec<&str> = c.iter().take(k).map(String::as_str).collect();
        tail.reverse();
        tail.join("/")
    };
    for k in 1..=deepest {
        let ls: Vec<String> = parts.iter().map(|c| label(c, k)).collect();
        if ls.iter().collect::<std::collections::BTreeSet<_>>().len() == ls.len() {
            return ls;
        }
    }
    paths.iter().map(|p| p.display().to_string()).collect()
}

pub fn stats(a: StatsArgs) -> Result<()> {
    let mut cfg = load_config(&a.common, None)?;
    apply_protocol(&mut cfg, &a.protocol)?;
    if let Some(alpha) = a.alpha {
        cfg.stats.alpha = alpha;
    }
    start(&cfg)?;
    let protocol = load_protocol(cfg.data.eval_protocol.as_deref(), cfg.data.protocol_format, "evaluation")?;
    let sets: Vec<(String, ScoreSet)> = labels(&a.scores)
        .into_iter()
        .zip(&a.scores)
        .map(|(l, p)| Ok((l, read_scores(p)?)))
        .collect::<Result<_>>()?;
    let matrix = build_matrix(&sets, &protocol, cfg.stats.alpha)?;
    let mut systems = String::from("label,eer,threshold,n_bonafide,n_spoof\n");
    for (label, s) in &sets {
        let e = compute_eer(s, &protocol)?;
        systems.push_str(&format!("{label},{:.6},{:.6},{},{}\n", e.eer, e.threshold, e.n_bonafide, e.n_spoof));
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        cfg.write(out)?;
        write_text(&out.join("matrix.csv"), &matrix.to_csv())?;
        write_text(&out.join("systems.csv"), &systems)?;
    }
    print!("{}", matrix.to_csv());
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = load_config(&a.common, None)?;
    if let Some(s) = a.seed {
        cfg.synth.seed = s;
    }
    if let Some(n) = a.n_per_class {
        cfg.synth.n_per_class = n;
    }
    if let Some(b) = &a.band {
        (cfg.synth.artifact_low_hz, cfg.synth.artifact_high_hz) = parse_band(b)?;
    }
    start(&cfg)?;
    let corpus = generate_synthetic_dataset(&cfg.synth, &a.out)?;
    let out = absolute(&a.out)?;
    cfg.data.train_protocol = Some(out.join("train.tsv"));
    cfg.data.dev_protocol = Some(out.join("dev.tsv"));
    cfg.data.eval_protocol = Some(out.join("eval.tsv"));
    cfg.write(&a.out)?;
    println!("split,trials");
    for (name, set) in [("train", &corpus.train), ("dev", &corpus.dev), ("eval", &corpus.eval)] {
        println!("{name},{}", set.len());
    }
    Ok(())
}

pub fn lfcc(a: LfccArgs) -> Result<()> {
    let mut cfg = load_config(&a.common, None)?;
    apply_protocol(&mut cfg, &a.protocol)?;
    cfg.frontend = FrontendConfig { kind: FrontendKind::Lfcc, lfcc: cfg.frontend.lfcc.clone(), ..Default::default() };
    start(&cfg)?;
    let frontend = FrontEnd::new(&cfg.frontend)?;

    let mut jobs: Vec<(String, PathBuf)> = Vec::new();
    for w in &a.wavs {
        let id = w
            .file_stem()
            .ok_or_else(|| Error::Config(format!("{} has no file name", w.display())))?
            .to_string_lossy()
            .into_owned();
        jobs.push((id, w.clone()));
    }
    if a.protocol.protocol.is_some() {
        let protocol = load_protocol(cfg.data.eval_protocol.as_deref(), cfg.data.protocol_format, "input")?;
        for r in &protocol.records {
            let path = protocol
                .audio_path(r)
                .ok_or_else(|| Error::MissingTrials(vec![r.trial_id.clone()]))?;
            jobs.push((r.trial_id.clone(), path));
        }
    }
    if jobs.is_empty() {
        return Err(Error::Config("give WAV files or --protocol".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for (id, _) in &jobs {
        if !seen.insert(id.clone()) {
            return Err(Error::Duplicate(id.clone()));
        }
    }

    let feats: Vec<(String, MultiLayerFeatures)> = jobs
        .par_iter()
        .map(|(id, path)| {
            let FrontendInput::Features(seq) = frontend.from_waveform(&read_wav(path)?)? else {
                unreachable!("the LFCC front end yields feature sequences")
            };
            Ok((id.clone(), MultiLayerFeatures::from_layers(&[seq])?))
        })
        .collect::<Result<_>>()?;

    let feat_dir = a.out.join("feats");
    create_dir(&feat_dir)?;
    cfg.write(&a.out)?;
    let mut entries = BTreeMap::new();
    for (id, f) in &feats {
        let rel = PathBuf::from("feats").join(format!("{id}.cmf"));
        write_features(a.out.join(&rel), f)?;
        entries.insert(id.clone(), rel);
    }
    FeatureManifest::write(a.out.join("manifest.tsv"), &entries)?;
    println!("trials,frames");
    println!("{},{}", feats.len(), feats.iter().map(|(_, f)| f.n_frames()).sum::<usize>());
    Ok(())
}
