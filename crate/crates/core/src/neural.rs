//! Dense networks with exact reverse-mode gradients, Adam, and the
//! structured quadratic critic used by the linear-gain agent.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    Relu,
    Tanh,
    Scale { factor: f64 },
}

impl LayerSpec {
    fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { input, output } => (input + 1) * output,
            _ => 0,
        }
    }
}

/// Sequential network over a flat parameter vector. Dense weights are stored
/// row-major as `output x input`, followed by the `output` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<LayerSpec>,
    params: Vec<f64>,
    lr_factors: Vec<f64>,
    input_dim: usize,
    output_dim: usize,
}

/// Activations recorded by a batched forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct Tape {
    batch: usize,
    /// `inputs[i]` is the input to layer `i`; the final entry is the output.
    activations: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("tape always holds the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

impl DenseNet {
    /// Builds a network with zero parameters and unit learn-rate factors.
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let mut dim: Option<usize> = None;
        let mut input_dim = None;
        for (i, layer) in layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { input, output } => {
                    if input == 0 || output == 0 {
                        return Err(Error::Dimension(format!("layer {i} has a zero dimension")));
                    }
                    if let Some(d) = dim {
                        if d != input {
                            return Err(Error::Dimension(format!(
                                "layer {i} expects {input} inputs, previous layer yields {d}"
                            )));
                        }
                    }
                    input_dim.get_or_insert(input);
                    dim = Some(output);
                }
                LayerSpec::Scale { factor } if !factor.is_finite() => {
                    return Err(Error::InvalidArgument(format!("layer {i} has a non-finite scale")));
                }
                _ => {
                    if dim.is_none() {
                        return Err(Error::Dimension("the first layer must be dense".into()));
                    }
                }
            }
        }
        let (Some(input_dim), Some(output_dim)) = (input_dim, dim) else {
            return Err(Error::Dimension("network has no dense layer".into()));
        };
        let count = layers.iter().map(LayerSpec::param_count).sum();
        Ok(Self {
            layers,
            params: vec![0.0; count],
            lr_factors: vec![1.0; count],
            input_dim,
            output_dim,
        })
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let mut offset = 0;
        for layer in &self.layers {
            if let LayerSpec::Dense { input, output } = *layer {
                let bound = 1.0 / (input as f64).sqrt();
                for w in &mut self.params[offset..offset + input * output] {
                    *w = rng.random_range(-bound..=bound);
                }
                self.params[offset + input * output..offset + (input + 1) * output].fill(0.0);
                offset += (input + 1) * output;
            }
        }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Dimension(format!(
                "network has {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn lr_factors(&self) -> &[f64] {
        &self.lr_factors
    }

    pub fn set_lr_factors(&mut self, factors: &[f64]) -> Result<()> {
        if factors.len() != self.lr_factors.len() {
            return Err(Error::Dimension(
                "learn-rate factor count differs from parameter count".into(),
            ));
        }
        self.lr_factors.copy_from_slice(factors);
        Ok(())
    }

    /// Sets the learn-rate factor of every dense-layer bias.
    pub fn set_bias_lr_factor(&mut self, factor: f64) {
        for range in self.bias_ranges() {
            self.lr_factors[range].fill(factor);
        }
    }

    pub fn bias_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut offset = 0;
        let mut out = Vec::new();
        for layer in &self.layers {
            if let LayerSpec::Dense { input, output } = *layer {
                out.push(offset + input * output..offset + (input + 1) * output);
                offset += (input + 1) * output;
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Batched forward pass over row-major `batch x input_dim` data.
    pub fn forward(&self, input: &[f64], batch: usize) -> Result<Tape> {
        if input.len() != batch * self.input_dim {
            return Err(Error::Dimension(format!(
                "expected {} x {} inputs, got {} values",
                batch,
                self.input_dim,
                input.len()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        let mut offset = 0;
        for layer in &self.layers {
            let x = activations.last().expect("non-empty");
            let y = match *layer {
                LayerSpec::Dense { input, output } => {
                    let w = &self.params[offset..offset + input * output];
                    let b = &self.params[offset + input * output..offset + (input + 1) * output];
                    offset += (input + 1) * output;
                    let mut y = Vec::with_capacity(batch * output);
                    for _ in 0..batch {
                        y.extend_from_slice(b);
                    }
                    // y += x * w^T
                    gemm(
                        batch,
                        input,
                        output,
                        x,
                        (input, 1),
                        w,
                        (1, input),
                        1.0,
                        &mut y,
                        (output, 1),
                    );
                    y
                }
                LayerSpec::Relu => x.iter().map(|v| v.max(0.0)).collect(),
                LayerSpec::Tanh => x.iter().map(|v| v.tanh()).collect(),
                LayerSpec::Scale { factor } => x.iter().map(|v| v * factor).collect(),
            };
            activations.push(y);
        }
        Ok(Tape { batch, activations })
    }

    /// Reverse pass. Parameter gradients (summed over the batch) are added to
    /// `param_grads` when given; the input gradient is returned.
    pub fn backward(&self, tape: &Tape, upstream: &[f64], mut param_grads: Option<&mut [f64]>) -> Result<Vec<f64>> {
        let batch = tape.batch;
        if upstream.len() != batch * self.output_dim {
            return Err(Error::Dimension("upstream gradient has the wrong shape".into()));
        }
        if let Some(g) = param_grads.as_deref() {
            if g.len() != self.params.len() {
                return Err(Error::Dimension("gradient buffer has the wrong length".into()));
            }
        }
        let mut delta = upstream.to_vec();
        let mut offset = self.params.len();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &tape.activations[i];
            delta = match *layer {
                LayerSpec::Dense { input, output } => {
                    offset -= (input + 1) * output;
                    let w = &self.params[offset..offset + input * output];
                    if let Some(g) = param_grads.as_deref_mut() {
                        let (gw, gb) = g[offset..offset + (input + 1) * output].split_at_mut(input * output);
                        // gW += delta^T * x
                        gemm(
                            output,
                            batch,
                            input,
                            &delta,
                            (1, output),
                            x,
                            (input, 1),
                            1.0,
                            gw,
                            (input, 1),
                        );
                        for row in delta.chunks_exact(output) {
                            for (b, d) in gb.iter_mut().zip(row) {
                                *b += d;
                            }
                        }
                    }
                    let mut dx = vec![0.0; batch * input];
                    gemm(
                        batch,
                        output,
                        input,
                        &delta,
                        (output, 1),
                        w,
                        (input, 1),
                        0.0,
                        &mut dx,
                        (input, 1),
                    );
                    dx
                }
                LayerSpec::Relu => delta
                    .iter()
                    .zip(x)
                    .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                    .collect(),
                LayerSpec::Tanh => {
                    let y = &tape.activations[i + 1];
                    delta.iter().zip(y).map(|(d, t)| d * (1.0 - t * t)).collect()
                }
                LayerSpec::Scale { factor } => delta.iter().map(|d| d * factor).collect(),
            };
        }
        Ok(delta)
    }
}

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
    (rsc, csc): (usize, usize),
) {
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(m == 0 || n == 0 || c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the slices cover every index reached with the given strides,
    // checked above in debug builds and guaranteed by the callers' shapes.
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
            rsc as isize,
            csc as isize,
        );
    }
}

/// Single-sample forward pass.
pub fn net_forward(net: &DenseNet, input: &[f64]) -> Result<Vec<f64>> {
    Ok(net.forward(input, 1)?.output().to_vec())
}

/// Gradients of `upstream . net(input)` with respect to the parameters and the input.
pub fn net_gradients(net: &DenseNet, input: &[f64], upstream: &[f64]) -> Result<Gradients> {
    let tape = net.forward(input, 1)?;
    let mut params = vec![0.0; net.param_count()];
    let input = net.backward(&tape, upstream, Some(&mut params))?;
    Ok(Gradients { params, input })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam descent step; `lr_factors[i]` scales the rate of parameter `i`.
pub fn adam_update(state: &mut AdamState, params: &mut [f64], grads: &[f64], lr_factors: &[f64]) -> Result<()> {
    let n = params.len();
    if grads.len() != n || lr_factors.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Dimension("Adam buffers differ in length".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..n {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        if lr_factors[i] == 0.0 {
            continue;
        }
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= state.lr * lr_factors[i] * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Quadratic Q-function `z^T W z + b` over `z = [x; u]`, with the symmetric
/// 4x4 `W` assembled from ten weights (diagonal entries whole, off-diagonal
/// entries halved).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticCritic {
    pub w: [f64; 10],
    pub bias: f64,
}

/// Position of each weight in the upper triangle, row-major.
const TRIU: [(usize, usize); 10] = [
    (0, 0),
    (0, 1),
    (0, 2),
    (0, 3),
    (1, 1),
    (1, 2),
    (1, 3),
    (2, 2),
    (2, 3),
    (3, 3),
];

impl QuadraticCritic {
    pub fn new(w: [f64; 10]) -> Self {
        Self { w, bias: 0.0 }
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(4, 4);
        for (k, &(i, j)) in TRIU.iter().enumerate() {
            if i == j {
                m[(i, i)] = self.w[k];
            } else {
                m[(i, j)] = 0.5 * self.w[k];
                m[(j, i)] = 0.5 * self.w[k];
            }
        }
        m
    }

    /// Gradient of the value with respect to the ten weights.
    pub fn features(x: &[f64; 3], u: f64) -> [f64; 10] {
        let z = [x[0], x[1], x[2], u];
        TRIU.map(|(i, j)| z[i] * z[j])
    }

    /// Partial derivative of the value with respect to the action.
    pub fn action_gradient(&self, x: &[f64; 3], u: f64) -> f64 {
        let w = &self.w;
        w[3] * x[0] + w[6] * x[1] + w[8] * x[2] + 2.0 * w[9] * u
    }

    pub fn params(&self) -> [f64; 11] {
        let mut p = [0.0; 11];
        p[..10].copy_from_slice(&self.w);
        p[10] = self.bias;
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != 11 {
            return Err(Error::Dimension(format!(
                "quadratic critic has 11 parameters, got {}",
                p.len()
            )));
        }
        self.w.copy_from_slice(&p[..10]);
        self.bias = p[10];
        Ok(())
    }
}

/// `[x; u]^T W [x; u]`, excluding the bias.
pub fn quad_critic_value(qc: &QuadraticCritic, x: &[f64; 3], u: f64) -> f64 {
    QuadraticCritic::features(x, u)
        .iter()
        .zip(&qc.w)
        .map(|(f, w)| f * w)
        .sum()
}

/// `P = [I; K]^T W [I; K]`, so that `x^T P x = Q(x, K x)`.
pub fn policy_value_matrix(qc: &QuadraticCritic, k: &[f64; 3]) -> DMatrix<f64> {
    let mut t = DMatrix::zeros(4, 3);
    for i in 0..3 {
        t[(i, i)] = 1.0;
        t[(3, i)] = k[i];
    }
    let p = t.transpose() * qc.matrix() * t;
    (&p + p.transpose()) * 0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefinitenessReport {
    pub w_eigenvalues: Vec<f64>,
    pub p_eigenvalues: Vec<f64>,
    pub w_negative_definite: bool,
    pub p_negative_definite: bool,
}

/// Eigen-check of `W` and the induced `P` against negative definiteness.
pub fn definiteness_report(qc: &QuadraticCritic, k: &[f64; 3]) -> DefinitenessReport {
    let sorted = |m: DMatrix<f64>| {
        let mut e: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
        e.sort_by(f64::total_cmp);
        e
    };
    let w = sorted(qc.matrix());
    let p = sorted(policy_value_matrix(qc, k));
    DefinitenessReport {
        w_negative_definite: w.iter().all(|&v| v < 0.0),
        p_negative_definite: p.iter().all(|&v| v < 0.0),
        w_eigenvalues: w,
        p_eigenvalues: p,
    }
}
