//! Front end plus back end as one scoring unit.

use crate::error::Result;
use crate::frontend::{FrontEnd, FrontendInput};
use crate::nn::{forward_batch, score_from_logits, BackendKind, ForwardOutput, Logits, ModelParams, ParamVars, Tape};

#[derive(Debug, Clone)]
pub struct Model {
    pub frontend: FrontEnd,
    pub params: ModelParams,
}

impl Model {
    /// Fresh parameters for both stages.
    pub fn init(frontend: FrontEnd, backend: BackendKind, seed: u64) -> Result<Self> {
        let mut params = ModelParams::init(backend, frontend.output_dim(), seed)?;
        frontend.init_params(&mut params);
        Ok(Self { frontend, params })
    }

    /// Pairs stored parameters with a front end, checking they belong together.
    pub fn new(frontend: FrontEnd, params: ModelParams) -> Result<Self> {
        frontend.check_params(&params)?;
        Ok(Self { frontend, params })
    }

    /// Records a padded batch forward pass on `tape`.
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, inputs: &[&FrontendInput], training: bool) -> Result<ForwardOutput> {
        let items = inputs
            .iter()
            .map(|input| self.frontend.build(tape, vars, input))
            .collect::<Result<Vec<_>>>()?;
        let lens: Vec<usize> = inputs.iter().map(|i| i.n_frames()).collect();
        let x = tape.stack_pad(&items)?;
        forward_batch(tape, &self.params, vars, x, &lens, training)
    }

    pub fn logits(&self, input: &FrontendInput) -> Result<Logits> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape);
        let out = self.forward(&mut tape, &vars, &[input], false)?;
        Ok(Logits::from_row(tape.value(out.logits).data()))
    }

    pub fn score(&self, input: &FrontendInput) -> Result<f64> {
        self.logits(input).map(score_from_logits)
    }
}
