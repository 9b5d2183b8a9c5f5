//! Central finite-difference checks of every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{blstm_layer, ParamVars, Tape, Tensor, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
/// Most coordinates perturbed per input tensor.
const MAX_COORDS: usize = 16;

/// Worst relative error seen for one op across its random instances.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

/// `|a − n| / max(|a|, |n|, 1e-3)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares backward-pass gradients of the scalar `f(inputs)` with central
/// differences on up to `MAX_COORDS` coordinates of each input.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, rng: &mut ChaCha8Rng) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut worst = 0.0f64;
    let mut values = inputs.to_vec();
    for (i, &var) in vars.iter().enumerate() {
        let analytic = grads.wrt(var);
        let n = inputs[i].numel();
        let coords: Vec<usize> = if n <= MAX_COORDS {
            (0..n).collect()
        } else {
            (0..MAX_COORDS).map(|_| rng.gen_range(0..n)).collect()
        };
        for c in coords {
            let orig = inputs[i].data()[c];
            values[i].data_mut()[c] = orig + FD_STEP;
            let up = eval(&values)?;
            values[i].data_mut()[c] = orig - FD_STEP;
            let down = eval(&values)?;
            values[i].data_mut()[c] = orig;
            worst = worst.max(rel_err(analytic.data()[c], (up - down) / (2.0 * FD_STEP)));
        }
    }
    Ok(worst)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("nonempty shape")
}

/// Scalar loss: a fixed random projection of `y`.
fn readout(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = tape.value(y).numel();
    tape.weighted_sum(y, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn lens(rng: &mut ChaCha8Rng, batch: usize, t: usize) -> Vec<usize> {
    let mut l: Vec<usize> = (0..batch).map(|_| rng.gen_range(1..=t)).collect();
    l[0] = t;
    l
}

/// Runs `instances` random checks of each differentiable op.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    type Case = fn(&mut ChaCha8Rng, u64) -> Result<f64>;
    let cases: [(&'static str, Case); 10] = [
        ("conv2d", case_conv2d),
        ("mfm", case_mfm),
        ("max_pool2", case_max_pool),
        ("batchnorm", case_batch_norm),
        ("blstm_layer", case_blstm),
        ("global_avg_pool", case_gap),
        ("projection", case_projection),
        ("combine_layers", case_combine),
        ("cross_entropy", case_cross_entropy),
        ("to_sequence", case_to_sequence),
    ];
    let mut reports = Vec::new();
    for (idx, (op, case)) in cases.iter().enumerate() {
        let mut worst = 0.0f64;
        for inst in 0..instances {
            let s = seed.wrapping_mul(1000).wrapping_add((idx * 100_000 + inst) as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            worst = worst.max(case(&mut rng, s)?);
        }
        reports.push(GradCheckReport { op, instances, max_rel_err: worst });
    }
    Ok(reports)
}

fn case_conv2d(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let (b, ci, co) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
    let (h, w) = (rng.gen_range(2..7), rng.gen_range(2..7));
    let k = [1, 3, 5][rng.gen_range(0..3)];
    let inputs = [
        random(rng, &[b, ci, h, w], 1.0),
        random(rng, &[co, ci, k, k], 0.5),
        random(rng, &[co], 0.5),
    ];
    check_gradients(&inputs, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]))?;
        readout(t, y, seed)
    }, rng)
}

fn case_mfm(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let shape = [rng.gen_range(1..3), 2 * rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..5)];
    let inputs = [random(rng, &shape, 1.0)];
    check_gradients(&inputs, |t, v| {
        let y = t.mfm(v[0])?;
        readout(t, y, seed)
    }, rng)
}

fn case_max_pool(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let shape = [rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(2..7), rng.gen_range(2..7)];
    let inputs = [random(rng, &shape, 1.0)];
    check_gradients(&inputs, |t, v| {
        let y = t.max_pool2(v[0])?;
        readout(t, y, seed)
    }, rng)
}

fn case_batch_norm(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let (b, c, h, w) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(2..6), rng.gen_range(2..5));
    let l = lens(rng, b, h);
    let inputs = [random(rng, &[b, c, h, w], 2.0), random(rng, &[c], 1.5), random(rng, &[c], 1.0)];
    let (mean, var) = (vec![0.0; c], vec![1.0; c]);
    check_gradients(&inputs, |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], &l, (&mean, &var), true)?;
        readout(t, y, seed)
    }, rng)
}

fn case_blstm(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let (b, steps, hidden) = (rng.gen_range(1..3), rng.gen_range(1..6), rng.gen_range(1..4));
    let d = 2 * hidden;
    let l = lens(rng, b, steps);
    let mut inputs = vec![random(rng, &[b, steps, d], 1.0)];
    let mut names = Vec::new();
    for dir in ["fwd", "bwd"] {
        for (name, shape) in [("w_ih", vec![d, 4 * hidden]), ("w_hh", vec![hidden, 4 * hidden]), ("b", vec![4 * hidden])] {
            names.push(format!("l.{dir}.{name}"));
            inputs.push(random(rng, &shape, 0.8));
        }
    }
    check_gradients(&inputs, |t, v| {
        let vars: ParamVars = names.iter().cloned().zip(v[1..].iter().copied()).collect();
        let y = blstm_layer(t, &vars, "l", v[0], &l)?;
        readout(t, y, seed)
    }, rng)
}

fn case_gap(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let (b, steps, d) = (rng.gen_range(1..4), rng.gen_range(1..7), rng.gen_range(1..5));
    let l = lens(rng, b, steps);
    let inputs = [random(rng, &[b, steps, d], 1.0)];
    check_gradients(&inputs, |t, v| {
        let y = t.global_avg_pool(v[0], &l)?;
        readout(t, y, seed)
    }, rng)
}

fn case_projection(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let (n, d, p) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
    let inputs = [random(rng, &[n, d], 1.0), random(rng, &[d, p], 1.0), random(rng, &[p], 1.0)];
    check_gradients(&inputs, |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        readout(t, y, seed)
    }, rng)
}

fn case_combine(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let (k, n, d) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
    let inputs = [random(rng, &[k, n, d], 1.0), random(rng, &[k], 2.0)];
    check_gradients(&inputs, |t, v| {
        let y = t.combine_layers(v[0], v[1])?;
        readout(t, y, seed)
    }, rng)
}

fn case_cross_entropy(rng: &mut ChaCha8Rng, _seed: u64) -> Result<f64> {
    let b = rng.gen_range(1..6);
    let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..2)).collect();
    let inputs = [random(rng, &[b, 2], 4.0)];
    check_gradients(&inputs, |t, v| t.cross_entropy(v[0], &labels), rng)
}

fn case_to_sequence(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let shape = [rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..4)];
    let l = lens(rng, shape[0], shape[2]);
    let inputs = [random(rng, &shape, 1.0)];
    check_gradients(&inputs, |t, v| {
        let m = t.mask_time(v[0], 2, &l)?;
        let y = t.to_sequence(m)?;
        readout(t, y, seed)
    }, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for r in gradient_suite(20, 1).unwrap() {
            assert!(r.max_rel_err < 1e-4, "{r:?}");
        }
    }

}
