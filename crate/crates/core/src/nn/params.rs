use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{BatchStats, Gradients, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Global average pooling and a linear layer.
    Gf,
    /// Two BLSTM layers, then GF.
    Lgf,
    /// An LCNN stack, then LGF.
    Llgf,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Gf => "gf",
            BackendKind::Lgf => "lgf",
            BackendKind::Llgf => "llgf",
        })
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gf" => Ok(BackendKind::Gf),
            "lgf" => Ok(BackendKind::Lgf),
            "llgf" => Ok(BackendKind::Llgf),
            other => Err(Error::Config(format!("unknown back end '{other}'"))),
        }
    }
}

/// Named parameter tensors plus non-trainable batchnorm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub backend: BackendKind,
    pub input_dim: usize,
    pub seed: u64,
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

/// Tape handles for every trainable tensor.
#[derive(Debug, Clone, Default)]
pub struct ParamVars(BTreeMap<String, Var>);

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("parameter '{name}' not registered")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    /// Gradient for every registered parameter, zero where unreachable.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.0.iter().map(|(k, &v)| (k.clone(), grads.wrt(v))).collect()
    }
}

impl FromIterator<(String, Var)> for ParamVars {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        ParamVars(iter.into_iter().collect())
    }
}

pub(crate) struct Initializer(ChaCha8Rng);

impl Initializer {
    pub(crate) fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub(crate) fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.0.gen_range(-bound..=bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("valid init shape")
    }
}

impl ModelParams {
    pub fn empty(backend: BackendKind, input_dim: usize, seed: u64) -> Self {
        Self { backend, input_dim, seed, params: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    /// Fresh parameters for `backend` over `input_dim`-wide features, drawn
    /// from `seed`.
    pub fn init(backend: BackendKind, input_dim: usize, seed: u64) -> Result<Self> {
        let mut p = Self::empty(backend, input_dim, seed);
        let mut init = Initializer::new(seed);
        let seq_dim = match backend {
            BackendKind::Gf => input_dim,
            BackendKind::Lgf => {
                p.add_blstm(&mut init, input_dim)?;
                input_dim
            }
            BackendKind::Llgf => {
                let seq = p.add_lcnn(&mut init, input_dim)?;
                p.add_blstm(&mut init, seq)?;
                seq
            }
        };
        let bound = 1.0 / (seq_dim as f64).sqrt();
        p.params.insert("fc.weight".into(), init.uniform(&[seq_dim, 2], bound));
        p.params.insert("fc.bias".into(), init.uniform(&[2], bound));
        Ok(p)
    }

    fn add_blstm(&mut self, init: &mut Initializer, dim: usize) -> Result<()> {
        if dim < 2 || !dim.is_multiple_of(2) {
            return Err(Error::Shape(format!("BLSTM width must be even, got {dim}")));
        }
        let hidden = dim / 2;
        let bound = 1.0 / (hidden as f64).sqrt();
        for layer in 0..2 {
            for dir in ["fwd", "bwd"] {
                let prefix = format!("blstm{layer}.{dir}");
                self.params
                    .insert(format!("{prefix}.w_ih"), init.uniform(&[dim, 4 * hidden], bound));
                self.params
                    .insert(format!("{prefix}.w_hh"), init.uniform(&[hidden, 4 * hidden], bound));
                let mut b = init.uniform(&[4 * hidden], bound);
                for v in &mut b.data_mut()[hidden..2 * hidden] {
                    *v += 1.0;
                }
                self.params.insert(format!("{prefix}.b"), b);
            }
        }
        Ok(())
    }

    /// Returns the sequence width the stack produces.
    fn add_lcnn(&mut self, init: &mut Initializer, input_dim: usize) -> Result<usize> {
        let mut freq = input_dim;
        let mut channels = 1;
        for (idx, layer) in LCNN_STACK.iter().enumerate() {
            match *layer {
                LcnnLayer::Conv { cin, cout, kernel } => {
                    let fan_in = (cin * kernel * kernel) as f64;
                    let bound = 1.0 / fan_in.sqrt();
                    self.params.insert(
                        format!("lcnn.{idx}.weight"),
                        init.uniform(&[cout, cin, kernel, kernel], bound),
                    );
                    self.params.insert(format!("lcnn.{idx}.bias"), init.uniform(&[cout], bound));
                    channels = cout;
                }
                LcnnLayer::Mfm => channels /= 2,
                LcnnLayer::Pool => freq /= 2,
                LcnnLayer::BatchNorm { channels: c } => {
                    self.params.insert(format!("lcnn.{idx}.gamma"), Tensor::filled(&[c], 1.0));
                    self.params.insert(format!("lcnn.{idx}.beta"), Tensor::zeros(&[c]));
                    self.buffers.insert(format!("lcnn.{idx}.running_mean"), Tensor::zeros(&[c]));
                    self.buffers.insert(format!("lcnn.{idx}.running_var"), Tensor::filled(&[c], 1.0));
                }
            }
        }
        if freq == 0 {
            return Err(Error::Shape(format!(
                "LCNN needs at least 16 feature dimensions, got {input_dim}"
            )));
        }
        Ok(channels * freq)
    }

    /// Registers every trainable tensor as a tape leaf, in name order.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(
            self.params
                .iter()
                .map(|(k, t)| (k.clone(), tape.leaf(t.clone())))
                .collect(),
        )
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("parameter '{name}' missing")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("buffer '{name}' missing")))
    }

    pub fn n_trainable(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) {
        for (prefix, s) in stats {
            for (suffix, fresh) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                if let Some(buf) = self.buffers.get_mut(&format!("{prefix}.{suffix}")) {
                    for (r, &v) in buf.data_mut().iter_mut().zip(fresh) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum LcnnLayer {
    Conv { cin: usize, cout: usize, kernel: usize },
    Mfm,
    Pool,
    BatchNorm { channels: usize },
}

use LcnnLayer::{BatchNorm as Bn, Conv, Mfm, Pool};

/// The light CNN front of LLGF: four blocks, each ending in a 2×2 pool.
pub(crate) const LCNN_STACK: &[LcnnLayer] = &[
    // block 1
    Conv { cin: 1, cout: 32, kernel: 5 },
    Mfm,
    Pool,
    // block 2
    Conv { cin: 16, cout: 32, kernel: 1 },
    Mfm,
    Bn { channels: 16 },
    Conv { cin: 16, cout: 48, kernel: 3 },
    Mfm,
    Pool,
    Bn { channels: 24 },
    // block 3
    Conv { cin: 24, cout: 48, kernel: 1 },
    Mfm,
    Bn { channels: 24 },
    Conv { cin: 24, cout: 64, kernel: 3 },
    Mfm,
    Pool,
    // block 4
    Conv { cin: 32, cout: 64, kernel: 1 },
    Mfm,
    Bn { channels: 32 },
    Conv { cin: 32, cout: 32, kernel: 3 },
    Mfm,
    Bn { channels: 16 },
    Conv { cin: 16, cout: 32, kernel: 1 },
    Mfm,
    Bn { channels: 16 },
    Conv { cin: 16, cout: 32, kernel: 3 },
    Mfm,
    Pool,
];
