//! Central finite-difference checks of tape gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{derive_seed, synth_phantom, PhantomKind};
use crate::error::{Error, Result};
use crate::loss::{self, weight_map_batch, DEFAULT_SIGMA, DEFAULT_W0};
use crate::model::{build, forward_graph, Graph, SumNetConfig};
use crate::ops::{self, PoolIndices};
use crate::tensor::{Shape, Tensor};

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Worst disagreement found by [`check_inputs`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// (input position, flat element) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    /// Probes rejected because the step crossed a kink.
    pub skipped: usize,
}

impl GradCheckReport {
    fn record(&mut self, input: usize, element: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_relative_error || self.worst.is_none() {
            self.max_relative_error = err;
            self.worst = Some((input, element));
            self.analytic_at_worst = analytic;
            self.numeric_at_worst = numeric;
        }
    }
}

/// Compares the tape gradient of a scalar function against central
/// differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
///
/// `f` receives one leaf per entry of `inputs`. `select(k, numel)` picks
/// which flat elements of input `k` to probe; pass `None` to probe all.
pub fn check_inputs<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    select: Option<&dyn Fn(usize, usize) -> Vec<usize>>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .ok_or_else(|| Error::Autodiff(format!("no gradient for input {k}")))?
            .clone();
        let elements = match select {
            Some(pick) => pick(k, input.numel()),
            None => (0..input.numel()).collect(),
        };
        for i in elements {
            let mut plus = input.data().to_vec();
            let mut minus = input.data().to_vec();
            plus[i] += eps;
            minus[i] -= eps;
            probe[k] = Tensor::new(input.shape(), plus)?;
            let f_plus = eval(&probe)?;
            probe[k] = Tensor::new(input.shape(), minus)?;
            let f_minus = eval(&probe)?;
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            report.record(k, i, analytic.data()[i], numeric);
        }
        probe[k] = input.clone();
    }
    Ok(report)
}

/// Single-input form: maximum relative error over every element of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = check_inputs(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps, None)?;
    Ok(report.max_relative_error)
}

/// Eager forward that records which side of every kink the pass is on:
/// the sign of each ReLU input and each pooling argmax.
#[derive(Default)]
struct KinkPattern {
    relu: Vec<bool>,
    pools: Vec<u8>,
}

impl Graph for KinkPattern {
    type Node = Tensor;
    fn shape(&self, x: &Tensor) -> Shape {
        x.shape()
    }
    fn conv2d(&mut self, x: &Tensor, k: &Tensor, b: &Tensor, padding: usize) -> Result<Tensor> {
        ops::conv2d(x, k, b, padding)
    }
    fn relu(&mut self, x: &Tensor) -> Tensor {
        self.relu.extend(x.data().iter().map(|&v| v > 0.0));
        ops::relu(x)
    }
    fn sigmoid(&mut self, x: &Tensor) -> Tensor {
        ops::sigmoid(x)
    }
    fn maxpool2x2(&mut self, x: &Tensor) -> Result<(Tensor, PoolIndices)> {
        let (y, idx) = ops::maxpool2x2(x)?;
        self.pools.extend_from_slice(idx.offsets());
        Ok((y, idx))
    }
    fn maxunpool2x2(&mut self, x: &Tensor, idx: &PoolIndices, hw: (usize, usize)) -> Result<Tensor> {
        ops::maxunpool2x2(x, idx, hw)
    }
    fn concat_channels(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::concat_channels(a, b)
    }
}

/// Checks d(loss)/d(parameters) of the whole network. Weights, the input
/// phantom and its mask all come from `seed`; `per_tensor` randomly chosen
/// elements of every kernel and bias are probed.
///
/// The loss is only piecewise smooth, so an element is probed only when
/// both `x + eps` and `x - eps` keep every ReLU sign and pooling argmax of
/// the unperturbed pass; otherwise the next random element is tried.
///
/// Elements with `|gradient| < min_grad` are passed over as well. Evaluating
/// the loss twice rounds differently by a few ulps, which puts roughly
/// `1e-15 * |loss| / eps` of noise on every central difference; a relative
/// comparison is only meaningful well above that level.
pub fn check_network(
    config: &SumNetConfig,
    seed: u64,
    per_tensor: usize,
    eps: f64,
    min_grad: f64,
) -> Result<GradCheckReport> {
    let params = build(config, derive_seed(seed, &[0]))?;
    let (image, mask) = synth_phantom(derive_seed(seed, &[1]), config.input_hw, PhantomKind::Blob)?;
    let weights = weight_map_batch(&mask, DEFAULT_W0, DEFAULT_SIGMA)?;
    let inputs: Vec<Tensor> = params.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let pairs: Vec<(Var, Var)> = vars.chunks_exact(2).map(|c| (c[0], c[1])).collect();
    let x = tape.constant(image.clone());
    let out = forward_graph(&params, &mut tape, &pairs, x, None)?;
    let loss = tape.wce_loss(out, &mask, &weights)?;
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor]| -> Result<(f64, KinkPattern)> {
        let pairs: Vec<(Tensor, Tensor)> = values.chunks_exact(2).map(|c| (c[0].clone(), c[1].clone())).collect();
        let mut g = KinkPattern::default();
        let out = forward_graph(&params, &mut g, &pairs, image.clone(), None)?;
        Ok((loss::wce_loss(&out, &mask, &weights)?, g))
    };
    let base = eval(&inputs)?.1;
    let same = |p: &KinkPattern| p.relu == base.relu && p.pools == base.pools;

    let mut report = GradCheckReport::default();
    let mut probe = inputs.clone();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .ok_or_else(|| Error::Autodiff(format!("no gradient for input {k}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2, k as u64]));
        let mut order: Vec<usize> = (0..input.numel()).collect();
        order.shuffle(&mut rng);
        let mut probed = 0;
        for i in order {
            if probed == per_tensor {
                break;
            }
            if analytic.data()[i].abs() < min_grad {
                continue;
            }
            let mut shifted = input.data().to_vec();
            shifted[i] = input.data()[i] + eps;
            probe[k] = Tensor::new(input.shape(), shifted.clone())?;
            let (f_plus, p_plus) = eval(&probe)?;
            shifted[i] = input.data()[i] - eps;
            probe[k] = Tensor::new(input.shape(), shifted)?;
            let (f_minus, p_minus) = eval(&probe)?;
            if !same(&p_plus) || !same(&p_minus) {
                report.skipped += 1;
                continue;
            }
            probed += 1;
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            report.record(k, i, analytic.data()[i], numeric);
        }
        probe[k] = input.clone();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::from_fn(Shape::new(1, 2, 3, 3), |_, c, h, w| (c + h) as f64 - 0.5 * w as f64).unwrap();
        // Dyadic step and values keep every difference exact.
        let err = grad_check(|t, x| Ok(t.sum(x)), &x, 2f64.powi(-16)).unwrap();
        assert_eq!(err, 0.0);
        let err = grad_check(|t, x| Ok(t.sum(x)), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1e-9, 0.0), 1e-9 / 1e-8);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }

    #[test]
    fn narrow_network_gradients() {
        let cfg = SumNetConfig::vgg11(32, 32).narrowed(16);
        let report = check_network(&cfg, 7, 2, 1e-5, 1e-5).unwrap();
        assert!(report.checked >= 30, "{report:?}");
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}
