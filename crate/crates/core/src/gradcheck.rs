//! Central finite-difference checks of every differentiable tape operation
//! and of the full two-head network.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::multitask::{build_network, Bound, MixedBatch, NetError, TrunkSpec};
use crate::rng::{stream, StreamRng};
use crate::tensor::{Result as TensorResult, Tensor, TensorError};

const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn random_tensor(shape: &[usize], rng: &mut StreamRng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Inputs bounded away from zero, so ReLU kinks sit outside the step.
fn kink_free(shape: &[usize], rng: &mut StreamRng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() { m } else { -m }
    })
}

/// Compares backward-pass gradients of `Σ wᵢ·fᵢ(inputs)` (fixed random `w`)
/// against central differences for every input element.
pub fn check<F>(name: &str, inputs: &[Tensor], f: F) -> TensorResult<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> TensorResult<Var>,
{
    let weights: std::cell::OnceCell<Vec<f64>> = std::cell::OnceCell::new();
    let scalar = |tape: &mut Tape, vars: &[Var]| -> TensorResult<Var> {
        let y = f(tape, vars)?;
        let n = tape.value(y).numel();
        let w = weights.get_or_init(|| {
            let mut rng = stream(n as u64, "gradcheck-weights");
            (0..n).map(|_| rng.random_range(0.5..1.5)).collect()
        });
        tape.weighted_sum(y, w)
    };
    let loss_at = |values: &[Tensor]| -> TensorResult<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let l = scalar(&mut tape, &vars)?;
        Ok(tape.value(l).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = scalar(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().expect("param leaf gradient"))
        .collect();

    let mut values = inputs.to_vec();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..values[i].numel() {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + STEP;
            let up = loss_at(&values)?;
            values[i].data_mut()[j] = orig - STEP;
            let down = loss_at(&values)?;
            values[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(grad.data()[j], numeric));
            checked += 1;
        }
    }
    Ok(GradReport {
        name: name.to_string(),
        max_rel_error: worst,
        checked,
    })
}

/// One report per operation, then one for the whole network.
pub fn run_suite(seed: u64) -> Result<Vec<GradReport>, NetError> {
    let mut rng = stream(seed, "gradcheck");
    let r = &mut rng;
    let mut out = Vec::new();

    let (a, b) = (random_tensor(&[3, 4], r), random_tensor(&[4, 2], r));
    out.push(check("matmul", &[a, b], |t, v| t.matmul(v[0], v[1]))?);

    let (x, bias) = (random_tensor(&[3, 4], r), random_tensor(&[4], r));
    out.push(check("add_row_bias", &[x, bias], |t, v| t.add_row_bias(v[0], v[1]))?);

    for (stride, pad, c, hw) in [(1, 1, 2, 5), (2, 0, 1, 6), (1, 0, 3, 4), (2, 1, 2, 5)] {
        let x = random_tensor(&[2, c, hw, hw], r);
        let k = random_tensor(&[3, c, 3, 3], r);
        out.push(check(&format!("conv2d(stride={stride},pad={pad})"), &[x, k], move |t, v| {
            t.conv2d(v[0], v[1], stride, pad)
        })?);
    }

    let (x, bias) = (random_tensor(&[2, 3, 2, 2], r), random_tensor(&[3], r));
    out.push(check("add_channel_bias", &[x, bias], |t, v| t.add_channel_bias(v[0], v[1]))?);

    out.push(check("relu", &[kink_free(&[4, 5], r)], |t, v| Ok(t.relu(v[0])))?);

    out.push(check("global_avg_pool", &[random_tensor(&[2, 3, 3, 4], r)], |t, v| {
        t.global_avg_pool(v[0])
    })?);

    out.push(check("dropout", &[random_tensor(&[6, 5], r)], |t, v| {
        t.dropout(v[0], 0.25, true, &mut stream(seed, "gradcheck-mask"))
    })?);

    out.push(check("slice_rows", &[random_tensor(&[5, 3], r)], |t, v| t.slice_rows(v[0], 1, 3))?);

    out.push(check("group_mean", &[random_tensor(&[6, 4], r)], |t, v| t.group_mean(v[0], 3))?);

    let labels = [2, 0, 1, 2];
    out.push(check("softmax_cross_entropy", &[random_tensor(&[4, 3], r)], |t, v| {
        Ok(t.softmax_cross_entropy(v[0], &labels)?.0)
    })?);

    out.push(check("sum", &[random_tensor(&[3, 3], r)], |t, v| Ok(t.sum(v[0])))?);

    let w: Vec<f64> = (0..6).map(|_| r.random_range(-2.0..2.0)).collect();
    out.push(check("weighted_sum", &[random_tensor(&[2, 3], r)], |t, v| t.weighted_sum(v[0], &w))?);

    let (p, q) = (random_tensor(&[1], r), random_tensor(&[1], r));
    out.push(check("linear_combination", &[p, q], |t, v| {
        t.linear_combination(&[(v[0], 0.3), (v[1], 0.7)])
    })?);

    out.push(network_check(seed)?);
    Ok(out)
}

/// Mixed-batch loss of a small two-head network, dropout on, against every
/// parameter.
pub fn network_check(seed: u64) -> Result<GradReport, NetError> {
    let spec = TrunkSpec {
        in_channels: 1,
        conv_channels: vec![2, 3],
        kernel: 3,
        hidden: 5,
    };
    let mut net = build_network(3, 4, &spec, seed)?;
    net.dropout_rate = 0.25;
    let mut rng = stream(seed, "gradcheck-network");
    // Trunk biases start at zero; nudge them so no unit sits on a kink.
    for name in net.trunk_param_names() {
        if name.ends_with("bias") {
            let b = net.params.get_mut(&name).expect("listed");
            b.data_mut().iter_mut().for_each(|x| *x = rng.random_range(0.05..0.2));
        }
    }
    let frame = |rng: &mut StreamRng| random_tensor(&[1, 5, 5], rng);
    let batch = MixedBatch {
        segments: 3,
        activity_frames: (0..6).map(|_| frame(&mut rng)).collect(),
        activity_labels: vec![0, 2],
        object_images: (0..3).map(|_| frame(&mut rng)).collect(),
        object_labels: vec![3, 1, 0],
    };
    let names: Vec<String> = net.params.names().map(str::to_string).collect();
    let inputs: Vec<Tensor> = names
        .iter()
        .map(|n| net.params.get(n).expect("listed").clone())
        .collect();
    let report = check("network", &inputs, |tape, vars| {
        let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()));
        let (total, _, _) = net
            .loss_on_tape(tape, &bound, &batch, true, &mut stream(seed, "gradcheck-dropout"))
            .map_err(|e| TensorError::Shape(e.to_string()))?;
        Ok(total)
    })?;
    Ok(report)
}
