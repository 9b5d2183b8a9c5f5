use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ScoreSet;
use crate::data::{Label, ProtocolSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerResult {
    pub eer: f64,
    /// Operating threshold; `+∞` when every trial is rejected.
    pub threshold: f64,
    pub n_bonafide: usize,
    pub n_spoof: usize,
}

/// Effective miss and false-alarm costs for the normalized min t-DCF.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdcfParams {
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for TdcfParams {
    fn default() -> Self {
        Self { c_miss: 1.0, c_fa: 10.0 }
    }
}

impl TdcfParams {
    pub fn validate(&self) -> Result<()> {
        if self.c_miss > 0.0 && self.c_fa > 0.0 && self.c_miss.is_finite() && self.c_fa.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("t-DCF costs must be positive and finite, got {self:?}")))
        }
    }
}

/// Miss and false-alarm rates over the threshold sweep: every distinct
/// score, then `+∞`.
struct Sweep {
    bona: Vec<f64>,
    spoof: Vec<f64>,
    thresholds: Vec<f64>,
}

impl Sweep {
    fn new(bona: &[f64], spoof: &[f64]) -> Result<Self> {
        if bona.is_empty() || spoof.is_empty() {
            return Err(Error::Metric(format!(
                "need both classes, got {} bona fide and {} spoof scores",
                bona.len(),
                spoof.len()
            )));
        }
        if bona.iter().chain(spoof).any(|s| !s.is_finite()) {
            return Err(Error::Metric("non-finite score".into()));
        }
        let sorted = |v: &[f64]| {
            let mut v = v.to_vec();
            v.sort_by(f64::total_cmp);
            v
        };
        let (bona, spoof) = (sorted(bona), sorted(spoof));
        let mut thresholds: Vec<f64> = bona.iter().chain(&spoof).copied().collect();
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        thresholds.push(f64::INFINITY);
        Ok(Self { bona, spoof, thresholds })
    }

    /// `(P_miss, P_fa)` at `tau`.
    fn rates(&self, tau: f64) -> (f64, f64) {
        let miss = self.bona.partition_point(|&s| s < tau);
        let fa = self.spoof.len() - self.spoof.partition_point(|&s| s < tau);
        (miss as f64 / self.bona.len() as f64, fa as f64 / self.spoof.len() as f64)
    }
}

/// EER at the lowest threshold minimizing `|P_miss − P_fa|`, reported as
/// the midpoint of the two rates there.
pub fn eer_from_scores(bona: &[f64], spoof: &[f64]) -> Result<EerResult> {
    let sweep = Sweep::new(bona, spoof)?;
    let mut best = (f64::INFINITY, 0.0, f64::INFINITY);
    for &tau in &sweep.thresholds {
        let (pm, pf) = sweep.rates(tau);
        let gap = (pm - pf).abs();
        if gap < best.0 {
            best = (gap, (pm + pf) / 2.0, tau);
        }
    }
    Ok(EerResult { eer: best.1, threshold: best.2, n_bonafide: bona.len(), n_spoof: spoof.len() })
}

/// `min_τ (C_miss·P_miss + C_fa·P_fa) / min(C_miss, C_fa)`
pub fn min_tdcf_from_scores(bona: &[f64], spoof: &[f64], p: &TdcfParams) -> Result<f64> {
    p.validate()?;
    let sweep = Sweep::new(bona, spoof)?;
    let norm = p.c_miss.min(p.c_fa);
    Ok(sweep
        .thresholds
        .iter()
        .map(|&tau| {
            let (pm, pf) = sweep.rates(tau);
            (p.c_miss * pm + p.c_fa * pf) / norm
        })
        .fold(f64::INFINITY, f64::min))
}

/// Scores of protocol trials split by class; every trial must be scored.
pub fn class_scores(scores: &ScoreSet, protocol: &ProtocolSet) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut missing = Vec::new();
    let (mut bona, mut spoof) = (Vec::new(), Vec::new());
    for r in &protocol.records {
        match scores.get(&r.trial_id) {
            Some(s) if r.label == Label::Bonafide => bona.push(s),
            Some(s) => spoof.push(s),
            None => missing.push(r.trial_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingTrials(missing));
    }
    Ok((bona, spoof))
}

pub fn compute_eer(scores: &ScoreSet, protocol: &ProtocolSet) -> Result<EerResult> {
    let (b, s) = class_scores(scores, protocol)?;
    eer_from_scores(&b, &s)
}

pub fn min_tdcf(scores: &ScoreSet, protocol: &ProtocolSet, p: &TdcfParams) -> Result<f64> {
    let (b, s) = class_scores(scores, protocol)?;
    min_tdcf_from_scores(&b, &s, p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecomposeBy {
    Attack,
    Codec,
}

impl std::str::FromStr for DecomposeBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attack" => Ok(DecomposeBy::Attack),
            "codec" => Ok(DecomposeBy::Codec),
            other => Err(Error::Config(format!("cannot decompose by '{other}'"))),
        }
    }
}

/// Per-attack EERs (all bona fide against each attack's spoofs) or per-codec
/// EERs (both classes within each codec). Codecs lacking a class are skipped.
pub fn decompose_eer(scores: &ScoreSet, protocol: &ProtocolSet, by: DecomposeBy) -> Result<BTreeMap<String, EerResult>> {
    let (bona_all, _) = class_scores(scores, protocol)?;
    let score = |id: &str| scores.get(id).expect("checked by class_scores");
    let mut groups: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &protocol.records {
        let key = match by {
            DecomposeBy::Attack => r.attack_id.as_ref().filter(|_| r.label == Label::Spoof),
            DecomposeBy::Codec => r.codec_id.as_ref(),
        };
        if let Some(k) = key {
            let g = groups.entry(k.clone()).or_default();
            match r.label {
                Label::Bonafide => g.0.push(score(&r.trial_id)),
                Label::Spoof => g.1.push(score(&r.trial_id)),
            }
        }
    }
    if groups.is_empty() {
        let tag = if by == DecomposeBy::Attack { "attack" } else { "codec" };
        return Err(Error::Metric(format!("no trial carries a {tag} tag")));
    }
    let mut out = BTreeMap::new();
    for (key, (bona, spoof)) in groups {
        let bona = if by == DecomposeBy::Attack { bona_all.clone() } else { bona };
        if bona.is_empty() || spoof.is_empty() {
            log::warn!("skipping '{key}': one class is absent");
            continue;
        }
        out.insert(key, eer_from_scores(&bona, &spoof)?);
    }
    Ok(out)
}

/// Per-class counts over shared, equal-width bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `n_bins + 1` ascending edges from the lowest to the highest score.
    pub edges: Vec<f64>,
    pub bonafide: Vec<usize>,
    pub spoof: Vec<usize>,
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let join = |name: &str, vals: Vec<String>| format!("{name},{}\n", vals.join(","));
        join("edges", self.edges.iter().map(|e| format!("{e:.6}")).collect())
            + &join("bonafide", self.bonafide.iter().map(usize::to_string).collect())
            + &join("spoof", self.spoof.iter().map(usize::to_string).collect())
    }
}

pub fn histogram_from_scores(bona: &[f64], spoof: &[f64], n_bins: usize) -> Result<Histogram> {
    if n_bins == 0 {
        return Err(Error::Param("histogram needs at least one bin".into()));
    }
    let all = || bona.iter().chain(spoof);
    if all().next().is_none() {
        return Err(Error::Metric("no scores to bin".into()));
    }
    let lo = all().copied().fold(f64::INFINITY, f64::min);
    let hi = all().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / n_bins as f64;
    let edges = (0..=n_bins)
        .map(|i| if i == n_bins { hi } else { lo + width * i as f64 })
        .collect();
    let bin = |s: f64| {
        if width > 0.0 {
            (((s - lo) / width) as usize).min(n_bins - 1)
        } else {
            0
        }
    };
    let count = |v: &[f64]| {
        let mut c = vec![0; n_bins];
        v.iter().for_each(|&s| c[bin(s)] += 1);
        c
    };
    Ok(Histogram { edges, bonafide: count(bona), spoof: count(spoof) })
}

pub fn score_histogram(scores: &ScoreSet, protocol: &ProtocolSet, n_bins: usize) -> Result<Histogram> {
    let (b, s) = class_scores(scores, protocol)?;
    histogram_from_scores(&b, &s, n_bins)
}
