use super::params::{LcnnLayer, LCNN_STACK};
use super::tape::{log_sum_exp, BatchStats, Tape, Var};
use super::{BackendKind, ModelParams, ParamVars, Tensor};
use crate::data::Label;
use crate::dsp::FeatureSequence;
use crate::error::{Error, Result};

/// Two-class output, bona fide first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Logits {
    pub bonafide: f64,
    pub spoof: f64,
}

impl Logits {
    pub fn from_row(row: &[f64]) -> Self {
        Self { bonafide: row[0], spoof: row[1] }
    }
}

/// Detection score; higher means more likely bona fide.
pub fn score_from_logits(l: Logits) -> f64 {
    l.bonafide - l.spoof
}

pub fn cross_entropy(l: Logits, label: Label) -> f64 {
    let row = [l.bonafide, l.spoof];
    log_sum_exp(&row) - row[label.index()]
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// `[B, 2]`
    pub logits: Var,
    /// Batch statistics per batchnorm layer (training mode only).
    pub bn_stats: Vec<(String, BatchStats)>,
}

/// Runs the back end on a padded batch `x: [B, T, D]`.
///
/// Positions at or beyond `lens[b]` never influence item `b`'s logits.
pub fn forward_batch(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &ParamVars,
    x: Var,
    lens: &[usize],
    training: bool,
) -> Result<ForwardOutput> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 || shape[2] != params.input_dim {
        return Err(Error::Shape(format!(
            "{} back end expects [B, T, {}] input, got {shape:?}",
            params.backend, params.input_dim
        )));
    }
    let mut bn_stats = Vec::new();
    let mut lens = lens.to_vec();
    let mut seq = x;
    if params.backend == BackendKind::Llgf {
        seq = lcnn(tape, params, vars, x, &mut lens, training, &mut bn_stats)?;
    }
    if params.backend != BackendKind::Gf {
        for layer in 0..2 {
            seq = blstm_layer(tape, vars, &format!("blstm{layer}"), seq, &lens)?;
        }
    }
    let pooled = tape.global_avg_pool(seq, &lens)?;
    let logits = tape.linear(pooled, vars.get("fc.weight")?, Some(vars.get("fc.bias")?))?;
    Ok(ForwardOutput { logits, bn_stats })
}

/// Forward and backward LSTM passes concatenated to the input width.
pub fn blstm_layer(tape: &mut Tape, vars: &ParamVars, prefix: &str, x: Var, lens: &[usize]) -> Result<Var> {
    let width = *tape.value(x).shape().last().unwrap_or(&0);
    if !width.is_multiple_of(2) {
        return Err(Error::Shape(format!("BLSTM input width {width} is odd")));
    }
    let mut halves = [x; 2];
    for (half, (dir, reverse)) in halves.iter_mut().zip([("fwd", false), ("bwd", true)]) {
        *half = tape.lstm(
            x,
            vars.get(&format!("{prefix}.{dir}.w_ih"))?,
            vars.get(&format!("{prefix}.{dir}.w_hh"))?,
            vars.get(&format!("{prefix}.{dir}.b"))?,
            lens,
            reverse,
        )?;
    }
    tape.concat(halves[0], halves[1])
}

fn lcnn(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &ParamVars,
    x: Var,
    lens: &mut Vec<usize>,
    training: bool,
    bn_stats: &mut Vec<(String, BatchStats)>,
) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let h = tape.reshape(x, &[shape[0], 1, shape[1], shape[2]])?;
    // the first convolution would otherwise read padding next to valid frames
    let mut h = tape.mask_time(h, 2, lens)?;
    for (idx, layer) in LCNN_STACK.iter().enumerate() {
        h = match *layer {
            LcnnLayer::Conv { .. } => {
                let conv = tape.conv2d(
                    h,
                    vars.get(&format!("lcnn.{idx}.weight"))?,
                    Some(vars.get(&format!("lcnn.{idx}.bias"))?),
                )?;
                tape.mask_time(conv, 2, lens)?
            }
            LcnnLayer::Mfm => tape.mfm(h)?,
            LcnnLayer::Pool => {
                let pooled = tape.max_pool2(h)?;
                lens.iter_mut().for_each(|l| *l /= 2);
                if lens.contains(&0) {
                    return Err(Error::Shape(
                        "LLGF needs at least 16 valid frames per item".into(),
                    ));
                }
                tape.mask_time(pooled, 2, lens)?
            }
            LcnnLayer::BatchNorm { .. } => {
                let prefix = format!("lcnn.{idx}");
                let mean = params.buffer(&format!("{prefix}.running_mean"))?.data().to_vec();
                let var = params.buffer(&format!("{prefix}.running_var"))?.data().to_vec();
                let (out, stats) = tape.batch_norm(
                    h,
                    vars.get(&format!("{prefix}.gamma"))?,
                    vars.get(&format!("{prefix}.beta"))?,
                    lens,
                    (&mean, &var),
                    training,
                )?;
                if let Some(s) = stats {
                    bn_stats.push((prefix, s));
                }
                out
            }
        };
    }
    tape.to_sequence(h)
}

/// Inference-mode forward pass on one whole feature sequence.
///
/// Frames at or beyond `valid_len` are treated as padding.
pub fn forward_backend(params: &ModelParams, features: &FeatureSequence, valid_len: usize) -> Result<(Logits, Tape)> {
    if valid_len == 0 || valid_len > features.n_frames() {
        return Err(Error::Param(format!(
            "valid length {valid_len} outside 1..={}",
            features.n_frames()
        )));
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let input = Tensor::new(
        vec![1, features.n_frames(), features.dim()],
        features.data().iter().map(|&v| v as f64).collect(),
    )?;
    let x = tape.leaf(input);
    let out = forward_batch(&mut tape, params, &vars, x, &[valid_len], false)?;
    let logits = Logits::from_row(tape.value(out.logits).data());
    Ok((logits, tape))
}
