//! Trial scoring, score files and detection metrics.

mod metrics;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

pub use metrics::{
    class_scores, compute_eer, decompose_eer, eer_from_scores, histogram_from_scores, min_tdcf, min_tdcf_from_scores,
    score_histogram, DecomposeBy, EerResult, Histogram, TdcfParams,
};

use crate::data::ProtocolSet;
use crate::error::{Error, Result};
use crate::model::Model;

/// Trial id → detection score (higher = more bona fide).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSet {
    scores: BTreeMap<String, f64>,
    /// Free-form description of what produced the scores.
    pub provenance: Option<String>,
}

impl ScoreSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, trial_id: impl Into<String>, score: f64) -> Result<()> {
        let id = trial_id.into();
        if !score.is_finite() {
            return Err(Error::NumericFault(format!("score for {id} is not finite")));
        }
        if self.scores.contains_key(&id) {
            return Err(Error::Duplicate(id));
        }
        self.scores.insert(id, score);
        Ok(())
    }

    pub fn get(&self, trial_id: &str) -> Option<f64> {
        self.scores.get(trial_id).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.scores.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Scores as they read back from a score file.
    pub fn quantized(&self) -> Self {
        let scores = self
            .scores
            .iter()
            .map(|(k, v)| (k.clone(), format!("{v:.6}").parse().expect("formatted float")))
            .collect();
        Self { scores, provenance: self.provenance.clone() }
    }

    /// `trial_id<TAB>score` lines, sorted by trial id.
    pub fn to_text(&self) -> String {
        self.scores.iter().map(|(k, v)| format!("{k}\t{v:.6}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut set = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse { line: i + 1, msg };
            let (id, score) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected trial_id<TAB>score".into()))?;
            let score: f64 = score.trim().parse().map_err(|_| parse_err(format!("bad score '{score}'")))?;
            set.insert(id, score).map_err(|e| match e {
                Error::NumericFault(m) => parse_err(m),
                other => other,
            })?;
        }
        Ok(set)
    }
}

pub fn write_scores(path: impl AsRef<Path>, scores: &ScoreSet) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, scores.to_text()).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<ScoreSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ScoreSet::parse(&text)
}

/// Trials whose audio or stored features cannot be found.
pub fn missing_inputs(model: &Model, protocol: &ProtocolSet) -> Vec<String> {
    protocol
        .records
        .iter()
        .filter(|r| match model.frontend.manifest() {
            Some(m) => !m.path_of(&r.trial_id).is_some_and(|p| p.is_file()),
            None => !protocol.audio_path(r).is_some_and(|p| p.is_file()),
        })
        .map(|r| r.trial_id.clone())
        .collect()
}

/// Scores every trial whole. Fails up front, naming all trials whose
/// inputs are missing.
pub fn score_trials(model: &Model, protocol: &ProtocolSet) -> Result<ScoreSet> {
    let missing = missing_inputs(model, protocol);
    if !missing.is_empty() {
        return Err(Error::MissingTrials(missing));
    }
    let scored = protocol
        .records
        .par_iter()
        .map(|r| {
            let input = model.frontend.load_trial(protocol, r)?;
            Ok((r.trial_id.clone(), model.score(&input)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut set = ScoreSet::new();
    for (id, s) in scored {
        set.insert(id, s)?;
    }
    Ok(set)
}

/// One-row CSV with header.
pub fn metrics_csv(eer: &EerResult, min_tdcf: f64) -> String {
    format!(
        "eer,min_tdcf,threshold,n_bonafide,n_spoof\n{:.6},{:.6},{:.6},{},{}\n",
        eer.eer, min_tdcf, eer.threshold, eer.n_bonafide, eer.n_spoof
    )
}

pub fn decomposition_csv(by: DecomposeBy, table: &BTreeMap<String, EerResult>) -> String {
    let key = if by == DecomposeBy::Attack { "attack" } else { "codec" };
    let mut out = format!("{key},eer,threshold,n_bonafide,n_spoof\n");
    for (k, r) in table {
        out.push_str(&format!("{k},{:.6},{:.6},{},{}\n", r.eer, r.threshold, r.n_bonafide, r.n_spoof));
    }
    out
}
