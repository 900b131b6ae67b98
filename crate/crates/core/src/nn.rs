//! Dense-network kernels: ReLU MLP with inverted dropout, manual backprop,
//! Adam, the sigmoid family, MSE, and a central-difference gradient checker.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::{Error, Result};

/// Logistic function, branching on sign so neither side overflows.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log σ(x) = -softplus(-x)`; finite wherever `x` is.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Squared L2 distance divided by the vector length.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "mse of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// Gradient of [`mse`] with respect to `a`.
pub fn mse_grad(a: &[f64], b: &[f64]) -> Vec<f64> {
    let scale = 2.0 / a.len() as f64;
    a.iter().zip(b).map(|(x, y)| scale * (x - y)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((fan_out, fan_in), || {
            rng.random_range(-limit..limit)
        });
        Dense {
            weights,
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

pub enum Mode<'r> {
    Train(&'r mut Rng),
    Eval,
}

/// Fully connected network: ReLU after every layer but the last, inverted
/// dropout after every hidden activation in training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub dropout_p: f64,
}

/// Intermediate values from a forward pass, consumed by backward.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input to each layer (post-dropout activations for hidden layers).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Array2<f64>>,
    /// Scaled keep-masks (`0` or `1/(1-p)`) per hidden layer, train mode only.
    masks: Vec<Option<Array2<f64>>>,
}

impl Tape {
    /// Smallest |pre-activation| over all hidden units; distance to the
    /// nearest ReLU kink.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.pre
            .iter()
            .flat_map(|z| z.iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub bias: Vec<Array1<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(m: &Mlp) -> Self {
        MlpGrads {
            weights: m.layers.iter().map(|l| Array2::zeros(l.weights.raw_dim())).collect(),
            bias: m.layers.iter().map(|l| Array1::zeros(l.bias.len())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    /// Weight then bias slice per layer, matching [`Mlp::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, b)| [w.as_slice().unwrap(), b.as_slice().unwrap()])
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

impl Mlp {
    /// Network with layer widths `sizes[0] → sizes[1] → … → sizes[n]`.
    pub fn new(sizes: &[usize], dropout_p: f64, rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], rng))
            .collect();
        Self::from_layers(layers, dropout_p)
    }

    pub fn from_layers(layers: Vec<Dense>, dropout_p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::Config(format!("dropout {dropout_p} outside [0, 1)")));
        }
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::Dimension(format!("layer {i}: bias length")));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Dimension(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Mlp { layers, dropout_p })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// `[in, hidden…, out]`.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::out_dim))
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weights.as_slice_mut().unwrap(),
                    l.bias.as_slice_mut().unwrap(),
                ]
            })
            .collect()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice().unwrap(), l.bias.as_slice().unwrap()])
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Dimension(format!(
                "{} values for {} parameters",
                flat.len(),
                self.n_params()
            )));
        }
        let mut at = 0;
        for s in self.param_slices_mut() {
            s.copy_from_slice(&flat[at..at + s.len()]);
            at += s.len();
        }
        Ok(())
    }

    /// Batched forward pass; rows of `x` are samples.
    pub fn forward_batch(&self, x: ArrayView2<f64>, mode: Mode<'_>) -> Result<(Array2<f64>, Tape)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "network input {} but got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let mut rng = match mode {
            Mode::Train(r) if self.dropout_p > 0.0 => Some(r),
            _ => None,
        };
        let keep = 1.0 - self.dropout_p;
        let last = self.layers.len() - 1;
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(last),
            masks: Vec::with_capacity(last),
        };
        let mut a = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.weights.t()) + &layer.bias;
            tape.inputs.push(a);
            if i == last {
                return Ok((z, tape));
            }
            let mut h = z.mapv(|v| v.max(0.0));
            let mask = rng.as_deref_mut().map(|r| {
                Array2::from_shape_simple_fn(h.raw_dim(), || {
                    if r.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
            });
            if let Some(m) = &mask {
                h *= m;
            }
            tape.pre.push(z);
            tape.masks.push(mask);
            a = h;
        }
        unreachable!("loop returns at the last layer")
    }

    fn backward_impl(
        &self,
        tape: &Tape,
        grad_out: ArrayView2<f64>,
        want_params: bool,
    ) -> Result<(Option<MlpGrads>, Array2<f64>)> {
        if tape.inputs.len() != self.layers.len() || tape.pre.len() + 1 != self.layers.len() {
            return Err(Error::Dimension("tape does not match network depth".into()));
        }
        let batch = tape.inputs[0].nrows();
        if grad_out.nrows() != batch || grad_out.ncols() != self.output_dim() {
            return Err(Error::Dimension(format!(
                "output gradient {:?}, expected [{batch}, {}]",
                grad_out.shape(),
                self.output_dim()
            )));
        }
        let mut grads = want_params.then(|| MlpGrads::zeros_like(self));
        let mut g = grad_out.to_owned();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if let Some(gr) = grads.as_mut() {
                gr.weights[i] = g.t().dot(&tape.inputs[i]);
                gr.bias[i] = g.sum_axis(Axis(0));
            }
            let mut g_in = g.dot(&layer.weights);
            if i > 0 {
                if let Some(m) = &tape.masks[i - 1] {
                    g_in *= m;
                }
                ndarray::Zip::from(&mut g_in)
                    .and(&tape.pre[i - 1])
                    .for_each(|gv, &z| {
                        if z <= 0.0 {
                            *gv = 0.0;
                        }
                    });
            }
            g = g_in;
        }
        Ok((grads, g))
    }

    /// Parameter gradients and input gradient for a batch.
    pub fn backward_batch(
        &self,
        tape: &Tape,
        grad_out: ArrayView2<f64>,
    ) -> Result<(MlpGrads, Array2<f64>)> {
        let (grads, g_in) = self.backward_impl(tape, grad_out, true)?;
        Ok((grads.unwrap(), g_in))
    }

    /// Input gradient only; used when the network is frozen.
    pub fn backward_input(&self, tape: &Tape, grad_out: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.backward_impl(tape, grad_out, false)?.1)
    }

    /// Eval-mode forward of a single vector.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(mlp_forward(self, x, Mode::Eval)?.0)
    }
}

fn row(x: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, x.len()), x).expect("contiguous row")
}

/// Single-vector forward pass.
pub fn mlp_forward(m: &Mlp, x: &[f64], mode: Mode<'_>) -> Result<(Vec<f64>, Tape)> {
    let (out, tape) = m.forward_batch(row(x), mode)?;
    Ok((out.into_raw_vec_and_offset().0, tape))
}

/// Single-vector backward pass.
pub fn mlp_backward(m: &Mlp, tape: &Tape, grad_out: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
    let (grads, g_in) = m.backward_batch(tape, row(grad_out))?;
    Ok((grads, g_in.into_raw_vec_and_offset().0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }

    #[inline]
    fn update(&self, step: u64, p: &mut f64, g: f64, m: &mut f64, v: &mut f64) {
        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
        let m_hat = *m / (1.0 - self.beta1.powi(step as i32));
        let v_hat = *v / (1.0 - self.beta2.powi(step as i32));
        *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
    }
}

/// Adam over a fixed list of parameter buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, shapes: &[usize]) -> Self {
        AdamState {
            cfg,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_mlp(cfg: AdamConfig, m: &Mlp) -> Self {
        let shapes: Vec<usize> = m.param_slices().iter().map(|s| s.len()).collect();
        Self::new(cfg, &shapes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }
}

/// One bias-corrected Adam update. Fails without touching anything if a
/// gradient is non-finite or shapes disagree.
pub fn adam_step(state: &mut AdamState, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "adam state has {} buffers, got {} params and {} grads",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != state.m[i].len() || g.len() != state.m[i].len() {
            return Err(Error::Dimension(format!("adam buffer {i} shape mismatch")));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient buffer {i}")));
        }
    }
    state.step += 1;
    let cfg = state.cfg;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        for (((pj, &gj), mj), vj) in p
            .iter_mut()
            .zip(g.iter())
            .zip(state.m[i].iter_mut())
            .zip(state.v[i].iter_mut())
        {
            cfg.update(state.step, pj, gj, mj, vj);
        }
    }
    Ok(())
}

/// Row-wise lazy Adam for embedding tables: each row keeps its own moments
/// and step count and is only updated when it receives a gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct RowAdam {
    pub cfg: AdamConfig,
    dim: usize,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: Vec<u64>,
}

impl RowAdam {
    pub fn new(cfg: AdamConfig, rows: usize, dim: usize) -> Self {
        RowAdam {
            cfg,
            dim,
            m: vec![0.0; rows * dim],
            v: vec![0.0; rows * dim],
            steps: vec![0; rows],
        }
    }

    pub fn update_row(&mut self, row: usize, param: &mut [f64], grad: &[f64]) -> Result<()> {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of embedding row {row}")));
        }
        self.steps[row] += 1;
        let step = self.steps[row];
        let range = row * self.dim..(row + 1) * self.dim;
        for (((p, &g), m), v) in param
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m[range.clone()])
            .zip(&mut self.v[range])
        {
            self.cfg.update(step, p, g, m, v);
        }
        Ok(())
    }
}

/// Relative error below which two gradient magnitudes are compared on an
/// absolute scale (denominator floor).
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Compares `analytic` against central differences of `f` at `params`,
/// returning the largest per-coordinate relative error
/// `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F>(mut f: F, analytic: &[f64], params: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(analytic.len(), params.len(), "gradient length");
    let mut x = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}
