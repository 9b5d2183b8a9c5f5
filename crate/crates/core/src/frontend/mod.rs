//! Front ends: LFCC from audio, or precomputed (multi-layer) features from
//! CMFEAT files, optionally layer-weighted and projected.

mod cmfeat;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use cmfeat::{
    load_features, read_features, write_features, FeatureManifest, MultiLayerFeatures, CMFEAT_MAGIC,
    CMFEAT_VERSION,
};

use crate::data::{slice_segments, ProtocolSet, TrialRecord};
use crate::dsp::{extract_lfcc, read_wav, FeatureSequence, LfccConfig, Waveform};
use crate::error::{Error, Result};
use crate::nn::{softmax, Initializer, ModelParams, ParamVars, Tape, Tensor, Var};

pub const LAYER_WEIGHTS: &str = "frontend.layer_weights";
pub const PROJ_WEIGHT: &str = "frontend.proj.weight";
pub const PROJ_BIAS: &str = "frontend.proj.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrontendKind {
    Lfcc,
    /// Last stored layer only.
    External,
    /// Softmax-weighted sum over all stored layers.
    ExternalWeighted,
}

impl fmt::Display for FrontendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FrontendKind::Lfcc => "lfcc",
            FrontendKind::External => "external",
            FrontendKind::ExternalWeighted => "external_weighted",
        })
    }
}

impl FromStr for FrontendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lfcc" => Ok(FrontendKind::Lfcc),
            "external" => Ok(FrontendKind::External),
            "external_weighted" => Ok(FrontendKind::ExternalWeighted),
            other => Err(Error::Config(format!("unknown front end '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    pub kind: FrontendKind,
    pub lfcc: LfccConfig,
    /// Feature manifest, required by the external kinds.
    pub manifest: Option<PathBuf>,
    /// Insert the trainable projection (external kinds only).
    pub project: bool,
    pub proj_dim: usize,
    /// Frame shift of stored external features, seconds.
    pub frame_shift_s: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            kind: FrontendKind::Lfcc,
            lfcc: LfccConfig::default(),
            manifest: None,
            project: true,
            proj_dim: 128,
            frame_shift_s: 0.02,
        }
    }
}

/// Softmax-normalized layer weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub raw: Vec<f64>,
}

impl LayerWeights {
    pub fn uniform(k: usize) -> Self {
        Self { raw: vec![0.0; k] }
    }

    pub fn effective(&self) -> Vec<f64> {
        softmax(&self.raw)
    }
}

/// Per-frame affine map, `weight: [D, P]`, `bias: [P]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// One trial (or segment) as the front end sees it before any trainable stage.
#[derive(Debug, Clone, PartialEq)]
pub enum FrontendInput {
    Features(FeatureSequence),
    Layers(MultiLayerFeatures),
}

impl FrontendInput {
    pub fn n_frames(&self) -> usize {
        match self {
            FrontendInput::Features(f) => f.n_frames(),
            FrontendInput::Layers(l) => l.n_frames(),
        }
    }
}

fn layers_tensor(features: &MultiLayerFeatures) -> Result<Tensor> {
    Tensor::new(
        vec![features.n_layers(), features.n_frames(), features.dim()],
        features.data().iter().map(|&v| v as f64).collect(),
    )
}

fn seq_tensor(features: &FeatureSequence) -> Result<Tensor> {
    Tensor::new(
        vec![features.n_frames(), features.dim()],
        features.data().iter().map(|&v| v as f64).collect(),
    )
}

fn to_sequence(t: &Tensor, frame_shift_s: f64) -> Result<FeatureSequence> {
    let shape = t.shape();
    FeatureSequence::new(
        t.data().iter().map(|&v| v as f32).collect(),
        shape[0],
        shape[1],
        frame_shift_s,
    )
}

/// `Σ_k softmax(raw)_k · layer_k`.
pub fn combine_layers(features: &MultiLayerFeatures, weights: &LayerWeights, frame_shift_s: f64) -> Result<FeatureSequence> {
    let mut tape = Tape::new();
    let z = tape.leaf(layers_tensor(features)?);
    let raw = tape.leaf(Tensor::new(vec![weights.raw.len()], weights.raw.clone())?);
    let out = tape.combine_layers(z, raw)?;
    to_sequence(tape.value(out), frame_shift_s)
}

pub fn project(features: &FeatureSequence, p: &ProjectionParams) -> Result<FeatureSequence> {
    let mut tape = Tape::new();
    let x = tape.leaf(seq_tensor(features)?);
    let w = tape.leaf(p.weight.clone());
    let b = tape.leaf(p.bias.clone());
    let out = tape.linear(x, w, Some(b))?;
    to_sequence(tape.value(out), features.frame_shift_s)
}

/// A configured front end; cheap to share across threads.
#[derive(Debug, Clone)]
pub struct FrontEnd {
    cfg: FrontendConfig,
    manifest: Option<FeatureManifest>,
}

impl FrontEnd {
    pub fn new(cfg: &FrontendConfig) -> Result<Self> {
        let manifest = match cfg.kind {
            FrontendKind::Lfcc => {
                cfg.lfcc.validate(crate::dsp::DEFAULT_SAMPLE_RATE)?;
                None
            }
            FrontendKind::External | FrontendKind::ExternalWeighted => {
                let path = cfg.manifest.as_ref().ok_or_else(|| {
                    Error::Config(format!("front end '{}' needs a feature manifest", cfg.kind))
                })?;
                if cfg.project && cfg.proj_dim == 0 {
                    return Err(Error::Config("proj_dim must be positive".into()));
                }
                if !(cfg.frame_shift_s > 0.0) {
                    return Err(Error::Config("frame_shift_s must be positive".into()));
                }
                Some(FeatureManifest::load(path)?)
            }
        };
        Ok(Self { cfg: cfg.clone(), manifest })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn kind(&self) -> FrontendKind {
        self.cfg.kind
    }

    pub fn manifest(&self) -> Option<&FeatureManifest> {
        self.manifest.as_ref()
    }

    /// Whether features are computed from audio (and so can be probed).
    pub fn is_waveform_backed(&self) -> bool {
        self.cfg.kind == FrontendKind::Lfcc
    }

    fn projects(&self) -> bool {
        self.cfg.kind != FrontendKind::Lfcc && self.cfg.project
    }

    pub fn frame_shift_s(&self) -> f64 {
        match self.cfg.kind {
            FrontendKind::Lfcc => self.cfg.lfcc.frame_shift_ms / 1000.0,
            _ => self.cfg.frame_shift_s,
        }
    }

    /// Width of the stored or extracted features.
    pub fn raw_dim(&self) -> usize {
        match &self.manifest {
            Some(m) => m.dim,
            None => self.cfg.lfcc.output_dim(),
        }
    }

    /// Width handed to the back end.
    pub fn output_dim(&self) -> usize {
        if self.projects() {
            self.cfg.proj_dim
        } else {
            self.raw_dim()
        }
    }

    /// Adds the front end's trainable tensors (if any) to `params`.
    pub fn init_params(&self, params: &mut ModelParams) {
        let mut init = Initializer::new(params.seed ^ 0x5eed_f00d);
        if self.cfg.kind == FrontendKind::ExternalWeighted {
            let k = self.manifest.as_ref().map_or(1, |m| m.n_layers);
            params.params.insert(LAYER_WEIGHTS.into(), Tensor::zeros(&[k]));
        }
        if self.projects() {
            let d = self.raw_dim();
            let bound = 1.0 / (d as f64).sqrt();
            params.params.insert(PROJ_WEIGHT.into(), init.uniform(&[d, self.cfg.proj_dim], bound));
            params.params.insert(PROJ_BIAS.into(), init.uniform(&[self.cfg.proj_dim], bound));
        }
    }

    /// Checks that `params` carries exactly the tensors this front end needs.
    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        let want_weights = self.cfg.kind == FrontendKind::ExternalWeighted;
        let has = |n: &str| params.params.contains_key(n);
        if has(LAYER_WEIGHTS) != want_weights || has(PROJ_WEIGHT) != self.projects() {
            return Err(Error::KindMismatch {
                expected: format!("front end {} (project={})", self.cfg.kind, self.projects()),
                found: "parameters for a different front end".into(),
            });
        }
        if params.input_dim != self.output_dim() {
            return Err(Error::Shape(format!(
                "back end expects {}-dim features, front end produces {}",
                params.input_dim,
                self.output_dim()
            )));
        }
        if want_weights {
            let k = params.get(LAYER_WEIGHTS)?.numel();
            let stored = self.manifest.as_ref().map_or(1, |m| m.n_layers);
            if k != stored {
                return Err(Error::Shape(format!("{k} layer weights for {stored} stored layers")));
            }
        }
        if self.projects() && params.get(PROJ_WEIGHT)?.shape()[0] != self.raw_dim() {
            return Err(Error::Shape("projection input width disagrees with stored features".into()));
        }
        Ok(())
    }

    pub fn from_waveform(&self, wave: &Waveform) -> Result<FrontendInput> {
        if !self.is_waveform_backed() {
            return Err(Error::UnsupportedFrontend(format!(
                "front end '{}' reads stored features, not audio",
                self.cfg.kind
            )));
        }
        Ok(FrontendInput::Features(extract_lfcc(wave, &self.cfg.lfcc)?))
    }

    fn read_audio(&self, protocol: &ProtocolSet, record: &TrialRecord) -> Result<Waveform> {
        let path = protocol
            .audio_path(record)
            .ok_or_else(|| Error::Lookup(format!("trial {} has no audio path", record.trial_id)))?;
        read_wav(path)
    }

    /// Whole-trial input.
    pub fn load_trial(&self, protocol: &ProtocolSet, record: &TrialRecord) -> Result<FrontendInput> {
        match &self.manifest {
            None => self.from_waveform(&self.read_audio(protocol, record)?),
            Some(m) => Ok(FrontendInput::Layers(load_features(m, &record.trial_id)?)),
        }
    }

    /// Non-overlapping training segments of at most `max_dur_s`.
    ///
    /// Audio is sliced before extraction; stored features are sliced by the
    /// equivalent frame count. Segments too short to yield a frame are dropped.
    pub fn training_segments(&self, protocol: &ProtocolSet, record: &TrialRecord, max_dur_s: f64) -> Result<Vec<FrontendInput>> {
        match &self.manifest {
            None => {
                let wave = self.read_audio(protocol, record)?;
                let frame_len = self.cfg.lfcc.frame_len(wave.sample_rate_hz);
                slice_segments(&wave, max_dur_s)
                    .iter()
                    .filter(|seg| seg.len() >= frame_len)
                    .map(|seg| self.from_waveform(seg))
                    .collect()
            }
            Some(m) => {
                let feats = load_features(m, &record.trial_id)?;
                let per = ((max_dur_s / self.cfg.frame_shift_s).round() as usize).max(1);
                (0..feats.n_frames())
                    .step_by(per)
                    .map(|start| Ok(FrontendInput::Layers(feats.slice_frames(start, start + per)?)))
                    .collect()
            }
        }
    }

    /// Records `input`'s trainable path on `tape`, returning `[N, output_dim]`.
    pub fn build(&self, tape: &mut Tape, vars: &ParamVars, input: &FrontendInput) -> Result<Var> {
        let seq = match (input, self.cfg.kind) {
            (FrontendInput::Features(f), FrontendKind::Lfcc) => return Ok(tape.leaf(seq_tensor(f)?)),
            (FrontendInput::Layers(l), FrontendKind::External) => {
                let last = l.layer(l.n_layers() - 1, self.cfg.frame_shift_s);
                tape.leaf(seq_tensor(&last)?)
            }
            (FrontendInput::Layers(l), FrontendKind::ExternalWeighted) => {
                let z = tape.leaf(layers_tensor(l)?);
                tape.combine_layers(z, vars.get(LAYER_WEIGHTS)?)?
            }
            _ => {
                return Err(Error::KindMismatch {
                    expected: self.cfg.kind.to_string(),
                    found: "input from another front end".into(),
                })
            }
        };
        if self.projects() {
            tape.linear(seq, vars.get(PROJ_WEIGHT)?, Some(vars.get(PROJ_BIAS)?))
        } else {
            Ok(seq)
        }
    }

    /// The feature sequence the back end would receive.
    pub fn features(&self, params: &ModelParams, input: &FrontendInput) -> Result<FeatureSequence> {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let out = self.build(&mut tape, &vars, input)?;
        to_sequence(tape.value(out), self.frame_shift_s())
    }
}

#[cfg(test)]
mod tests;
