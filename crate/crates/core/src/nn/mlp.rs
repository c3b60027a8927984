use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::special::{normal_cdf, normal_pdf};
use crate::PROB_FLOOR;

/// Hidden widths of the operator network.
pub const HIDDEN_WIDTHS: [usize; 5] = [64, 128, 256, 128, 64];

/// `[input, 64, 128, 256, 128, 64, output]`.
pub fn operator_widths(input: usize, output: usize) -> Vec<usize> {
    let mut w = Vec::with_capacity(HIDDEN_WIDTHS.len() + 2);
    w.push(input);
    w.extend_from_slice(&HIDDEN_WIDTHS);
    w.push(output);
    w
}

/// One affine layer; `weights` is `outputs x inputs`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub widths: Vec<usize>,
    pub layers: Vec<Layer>,
}

/// Gradients share the parameter layout.
pub type Gradients = MlpParams;

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::invalid("a network needs at least input and output widths"));
    }
    if widths.contains(&0) {
        return Err(Error::invalid("layer widths must be positive"));
    }
    Ok(())
}

impl MlpParams {
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        check_widths(widths)?;
        let layers = widths.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Ok(MlpParams { widths: widths.to_vec(), layers })
    }

    pub fn zeros_like(&self) -> Self {
        let layers = self.layers.iter().map(|l| Layer::zeros(l.inputs, l.outputs)).collect();
        MlpParams { widths: self.widths.clone(), layers }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.bias).all(|x| x.is_finite()))
    }

    /// Checks that the layer list agrees with `widths`.
    pub fn validate(&self) -> Result<()> {
        check_widths(&self.widths)?;
        if self.layers.len() != self.widths.len() - 1 {
            return Err(Error::invalid("layer count does not match widths"));
        }
        for (l, w) in self.layers.iter().zip(self.widths.windows(2)) {
            if l.inputs != w[0]
                || l.outputs != w[1]
                || l.weights.len() != w[0] * w[1]
                || l.bias.len() != w[1]
            {
                return Err(Error::invalid("layer shape does not match widths"));
            }
        }
        if !self.is_finite() {
            return Err(Error::invalid("parameters contain non-finite values"));
        }
        Ok(())
    }

    /// Euclidean norm over every parameter.
    pub fn global_norm(&self) -> f64 {
        let ss: f64 = self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias)).map(|x| x * x).sum();
        libm::sqrt(ss)
    }
}

/// Glorot-uniform weights and zero biases.
pub fn init_params(widths: &[usize], seed: u64) -> Result<MlpParams> {
    let mut params = MlpParams::zeros(widths)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut params.layers {
        let a = libm::sqrt(6.0 / (layer.inputs + layer.outputs) as f64);
        for w in &mut layer.weights {
            *w = rng.random_range(-a..=a);
        }
    }
    Ok(params)
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_derivative(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = libm::exp(*x - max);
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Target with `1 - 2 eps` on `label` and `eps` on each neighbour; a
/// neighbour that falls off either end gives its mass back to `label`.
pub fn smoothed_targets(label: usize, m: usize, eps: f64) -> Result<Vec<f64>> {
    if m < 2 {
        return Err(Error::invalid("smoothing needs at least two classes"));
    }
    if label >= m {
        return Err(Error::invalid("label out of range"));
    }
    if !(0.0..0.5).contains(&eps) {
        return Err(Error::invalid("smoothing mass must lie in [0, 0.5)"));
    }
    let mut q = vec![0.0; m];
    q[label] = 1.0 - 2.0 * eps;
    for nb in [label.checked_sub(1), Some(label + 1).filter(|&j| j < m)] {
        match nb {
            Some(j) => q[j] += eps,
            None => q[label] += eps,
        }
    }
    Ok(q)
}

/// `-sum q log p`, with `p` floored.
pub fn cross_entropy(probs: &[f64], target: &[f64]) -> f64 {
    probs
        .iter()
        .zip(target)
        .filter(|(_, &q)| q != 0.0)
        .map(|(&p, &q)| -q * libm::log(p.max(PROB_FLOOR)))
        .sum()
}

pub enum Mode<'a> {
    Eval,
    /// Inverted dropout with probability `dropout`, masks drawn from `rng`.
    Train { dropout: f64, rng: &'a mut ChaCha8Rng },
}

/// Activations recorded by [`forward_batch`] for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub batch: usize,
    /// Input to each layer, after dropout; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
    masks: Vec<Option<Vec<f64>>>,
    /// `batch x output` logits.
    pub logits: Vec<f64>,
}

impl ForwardCache {
    pub fn probabilities(&self, width: usize) -> Vec<f64> {
        let mut p = self.logits.clone();
        p.chunks_mut(width).for_each(softmax_in_place);
        p
    }
}

/// `c = beta c + a b` for row-major-or-strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the assertions bound every strided access inside the slices,
    // and `c` does not alias `a` or `b` because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Runs `batch` row-major inputs through the network.
pub fn forward_batch(params: &MlpParams, x: &[f64], batch: usize, mut mode: Mode<'_>) -> Result<ForwardCache> {
    crate::error::ensure_len(batch * params.input_dim(), x.len())?;
    if let Some(index) = x.iter().position(|v| v.is_nan()) {
        return Err(Error::NanValue { index });
    }
    if let Mode::Train { dropout, .. } = mode {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::invalid("dropout probability must lie in [0, 1)"));
        }
    }
    let last = params.layers.len() - 1;
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(last);
    let mut masks = Vec::with_capacity(last);
    let mut h = x.to_vec();
    for (idx, layer) in params.layers.iter().enumerate() {
        let mut z = vec![0.0; batch * layer.outputs];
        for row in z.chunks_mut(layer.outputs) {
            row.copy_from_slice(&layer.bias);
        }
        gemm(batch, layer.inputs, layer.outputs, &h, (layer.inputs, 1), &layer.weights, (1, layer.inputs), 1.0, &mut z);
        inputs.push(h);
        if idx == last {
            return Ok(ForwardCache { batch, inputs, pre, masks, logits: z });
        }
        let mut a: Vec<f64> = z.iter().map(|&v| gelu(v)).collect();
        let mask = match &mut mode {
            Mode::Train { dropout, rng } if *dropout > 0.0 => {
                let keep = 1.0 / (1.0 - *dropout);
                let mask: Vec<f64> =
                    (0..a.len()).map(|_| if rng.random::<f64>() < *dropout { 0.0 } else { keep }).collect();
                a.iter_mut().zip(&mask).for_each(|(v, s)| *v *= s);
                Some(mask)
            }
            _ => None,
        };
        pre.push(z);
        masks.push(mask);
        h = a;
    }
    unreachable!("networks have at least one layer")
}

pub fn forward(params: &MlpParams, input: &[f64], mode: Mode<'_>) -> Result<ForwardCache> {
    forward_batch(params, input, 1, mode)
}

/// Softmax outputs for every row of `inputs`, in eval mode.
pub fn predict_proba(params: &MlpParams, inputs: &Matrix) -> Result<Matrix> {
    const CHUNK: usize = 512;
    crate::error::ensure_len(params.input_dim(), inputs.cols())?;
    let m = params.output_dim();
    let mut out = Vec::with_capacity(inputs.rows() * m);
    for chunk in inputs.as_slice().chunks(CHUNK * inputs.cols().max(1)) {
        let batch = chunk.len() / inputs.cols().max(1);
        let cache = forward_batch(params, chunk, batch, Mode::Eval)?;
        out.extend(cache.probabilities(m));
    }
    Matrix::from_vec(inputs.rows(), m, out)
}

/// Gradient of the batch-mean cross-entropy against `targets`
/// (`batch x output`, one distribution per row). Returns the loss too.
pub fn backward(params: &MlpParams, cache: &ForwardCache, targets: &[f64]) -> Result<(f64, Gradients)> {
    let m = params.output_dim();
    let batch = cache.batch;
    crate::error::ensure_len(batch * m, targets.len())?;
    let probs = cache.probabilities(m);
    let loss = probs.chunks(m).zip(targets.chunks(m)).map(|(p, q)| cross_entropy(p, q)).sum::<f64>()
        / batch as f64;
    let scale = 1.0 / batch as f64;
    let mut dz: Vec<f64> = probs.iter().zip(targets).map(|(p, q)| (p - q) * scale).collect();

    let mut grads = params.zeros_like();
    for idx in (0..params.layers.len()).rev() {
        let layer = &params.layers[idx];
        let g = &mut grads.layers[idx];
        let input = &cache.inputs[idx];
        // dW = dz^T input
        gemm(layer.outputs, batch, layer.inputs, &dz, (1, layer.outputs), input, (layer.inputs, 1), 0.0, &mut g.weights);
        for row in dz.chunks(layer.outputs) {
            g.bias.iter_mut().zip(row).for_each(|(b, d)| *b += d);
        }
        if idx == 0 {
            break;
        }
        let mut dh = vec![0.0; batch * layer.inputs];
        gemm(batch, layer.outputs, layer.inputs, &dz, (layer.outputs, 1), &layer.weights, (layer.inputs, 1), 0.0, &mut dh);
        if let Some(mask) = &cache.masks[idx - 1] {
            dh.iter_mut().zip(mask).for_each(|(d, s)| *d *= s);
        }
        dh.iter_mut().zip(&cache.pre[idx - 1]).for_each(|(d, &z)| *d *= gelu_derivative(z));
        dz = dh;
    }
    Ok((loss, grads))
}
