//! Dense multilayer perceptrons with exact backpropagation, Adam and
//! exponential-moving-average target tracking.
//!
//! Weights are stored row-major with shape `(out, in)`. Batched inputs are
//! `(batch, features)`. Everything is `f64`.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Error, Result};

const MLP_MAGIC: &[u8; 8] = b"PLRLMLP\x01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Relu),
            2 => Ok(Activation::Identity),
            t => Err(Error::format("mlp checkpoint", format!("unknown activation tag {t}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Gradient (or any other per-parameter quantity) shaped like an [`Mlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite())
        })
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.weight.mapv_inplace(|v| v * k);
            l.bias.mapv_inplace(|v| v * k);
        }
    }

    /// Flattened view in layer order: weights row-major, then biases.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }
}

/// Per-layer post-activation values from a batched forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// `values[0]` is the input, `values[i + 1]` the output of layer `i`.
    values: Vec<Array2<f64>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.values.last().expect("trace always holds the input")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeMismatch("an mlp needs at least one layer".into()));
        }
        for l in &layers {
            if l.bias.len() != l.out_dim() {
                return Err(Error::DimensionMismatch {
                    expected: l.out_dim(),
                    got: l.bias.len(),
                });
            }
            if !l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::NonFinite("mlp parameters"));
            }
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].out_dim(),
                    got: pair[1].in_dim(),
                });
            }
        }
        Ok(Mlp { layers })
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialisation for weights and biases.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        Self::build(sizes, hidden, output, |fan_in| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            rng.random_range(-bound..=bound)
        })
    }

    pub fn zeros(sizes: &[usize], hidden: Activation, output: Activation) -> Self {
        Self::build(sizes, hidden, output, |_| 0.0)
    }

    fn build(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        mut init: impl FnMut(usize) -> f64,
    ) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                let weight = Array2::from_shape_fn((fan_out, fan_in), |_| init(fan_in));
                let bias = Array1::from_shape_fn(fan_out, |_| init(fan_in));
                let activation = if i + 1 == n { output } else { hidden };
                Layer {
                    weight,
                    bias,
                    activation,
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.activation == b.activation)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(input.ncols())?;
        let mut x = layer_forward(&self.layers[0], input);
        for layer in &self.layers[1..] {
            x = layer_forward(layer, x.view());
        }
        Ok(x)
    }

    pub fn forward_trace(&self, input: ArrayView2<f64>) -> Result<Trace> {
        self.check_input(input.ncols())?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(input.to_owned());
        for layer in &self.layers {
            let next = layer_forward(layer, values.last().unwrap().view());
            values.push(next);
        }
        Ok(Trace { values })
    }

    /// Gradient of `output · output_grad` with respect to every parameter, for one sample.
    pub fn backward(&self, input: &[f64], output_grad: &[f64]) -> Result<Gradients> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let g = ArrayView2::from_shape((1, output_grad.len()), output_grad)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let trace = self.forward_trace(x)?;
        Ok(self.backward_batch(&trace, g)?.0)
    }

    /// Backpropagates `output_grad` (one row per sample) through a recorded trace.
    ///
    /// Returns parameter gradients summed over the batch and the gradient with
    /// respect to the input rows.
    pub fn backward_batch(
        &self,
        trace: &Trace,
        output_grad: ArrayView2<f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        let out = trace.output();
        if output_grad.dim() != out.dim() {
            return Err(Error::ShapeMismatch(format!(
                "output gradient {:?} does not match output {:?}",
                output_grad.dim(),
                out.dim()
            )));
        }
        if trace.values.len() != self.layers.len() + 1 {
            return Err(Error::ShapeMismatch("trace does not belong to this network".into()));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = output_grad.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let y = &trace.values[i + 1];
            let x = &trace.values[i];
            let act = layer.activation;
            Zip::from(&mut upstream)
                .and(y)
                .for_each(|g, &yv| *g *= act.derivative_at_output(yv));
            let weight = upstream.t().dot(x);
            let bias = upstream.sum_axis(Axis(0));
            let next = upstream.dot(&layer.weight);
            grads.push(LayerGrad { weight, bias });
            upstream = next;
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, upstream))
    }

    fn check_input(&self, got: usize) -> Result<()> {
        let expected = self.input_dim();
        if got != expected {
            return Err(Error::DimensionMismatch { expected, got });
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MLP_MAGIC)?;
        codec::write_u32(w, self.layers.len() as u32)?;
        for l in &self.layers {
            codec::write_u32(w, l.in_dim() as u32)?;
            codec::write_u32(w, l.out_dim() as u32)?;
            codec::write_u8(w, l.activation.tag())?;
            codec::write_f64s(w, l.weight.iter().copied())?;
            codec::write_f64s(w, l.bias.iter().copied())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        codec::expect_magic(r, MLP_MAGIC, "mlp checkpoint")?;
        let n = codec::read_u32(r)? as usize;
        if n == 0 || n > 64 {
            return Err(Error::format("mlp checkpoint", format!("implausible layer count {n}")));
        }
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let fan_in = codec::read_u32(r)? as usize;
            let fan_out = codec::read_u32(r)? as usize;
            if fan_in * fan_out > 1 << 24 {
                return Err(Error::format("mlp checkpoint", "layer too large"));
            }
            let activation = Activation::from_tag(codec::read_u8(r)?)?;
            let weight = Array2::from_shape_vec((fan_out, fan_in), codec::read_f64s(r, fan_in * fan_out)?)
                .map_err(|e| Error::format("mlp checkpoint", e.to_string()))?;
            let bias = Array1::from_vec(codec::read_f64s(r, fan_out)?);
            layers.push(Layer {
                weight,
                bias,
                activation,
            });
        }
        Mlp::from_layers(layers)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        Mlp::read_from(&mut cursor)
    }
}

fn layer_forward(layer: &Layer, x: ArrayView2<f64>) -> Array2<f64> {
    let mut z = x.dot(&layer.weight.t());
    let act = layer.activation;
    for mut row in z.rows_mut() {
        Zip::from(&mut row)
            .and(&layer.bias)
            .for_each(|v, &b| *v = act.apply(*v + b));
    }
    z
}

/// Adam optimiser state for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Gradients,
    second: Gradients,
}

impl Adam {
    pub fn new(net: &Mlp) -> Self {
        Self::with_betas(net, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(net: &Mlp, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            first: Gradients::zeros_like(net),
            second: Gradients::zeros_like(net),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &Gradients {
        &self.first
    }

    pub fn second_moment(&self) -> &Gradients {
        &self.second
    }

    /// Restores a previously serialised state.
    pub fn from_parts(
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: u64,
        first: Gradients,
        second: Gradients,
    ) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step,
            first,
            second,
        }
    }

    /// Hyperparameters, step count and both moment estimates.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        codec::write_f64s(w, [self.beta1, self.beta2, self.eps])?;
        codec::write_u64(w, self.step)?;
        for g in [&self.first, &self.second] {
            codec::write_f64s(w, g.flat())?;
        }
        Ok(())
    }

    /// Reads a state written by [`Adam::write_to`] for a network shaped like `net`.
    pub fn read_from(r: &mut impl Read, net: &Mlp) -> Result<Self> {
        let h = codec::read_f64s(r, 3)?;
        let step = codec::read_u64(r)?;
        let mut moments = [Gradients::zeros_like(net), Gradients::zeros_like(net)];
        for g in &mut moments {
            for layer in &mut g.layers {
                for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                    *v = codec::read_f64(r)?;
                }
            }
        }
        let [first, second] = moments;
        Ok(Adam::from_parts(h[0], h[1], h[2], step, first, second))
    }

    /// One bias-corrected Adam step. Rejects non-finite gradients without
    /// touching the parameters or the moments.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.layers.len() != net.layers.len()
            || self.first.layers.len() != net.layers.len()
            || grads
                .layers
                .iter()
                .zip(&net.layers)
                .zip(&self.first.layers)
                .any(|((g, l), m)| {
                    g.weight.dim() != l.weight.dim()
                        || g.bias.len() != l.bias.len()
                        || m.weight.dim() != l.weight.dim()
                })
        {
            return Err(Error::ShapeMismatch("gradients do not match network".into()));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("adam gradients"));
        }
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (((layer, g), m), v) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.first.layers)
            .zip(&mut self.second.layers)
        {
            Zip::from(&mut layer.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(|p, &g, m, v| adam_scalar(p, g, m, v, b1, b2, c1, c2, eps, lr));
            Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| adam_scalar(p, g, m, v, b1, b2, c1, c2, eps, lr));
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn adam_scalar(
    p: &mut f64,
    g: f64,
    m: &mut f64,
    v: &mut f64,
    b1: f64,
    b2: f64,
    c1: f64,
    c2: f64,
    eps: f64,
    lr: f64,
) {
    *m = b1 * *m + (1.0 - b1) * g;
    *v = b2 * *v + (1.0 - b2) * g * g;
    let m_hat = *m / c1;
    let v_hat = *v / c2;
    *p -= lr * m_hat / (v_hat.sqrt() + eps);
}

/// `target ← τ·online + (1 − τ)·target`, entry by entry.
pub fn ema_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<()> {
    if !target.same_shape(online) {
        return Err(Error::ShapeMismatch("target and online networks differ".into()));
    }
    let keep = 1.0 - tau;
    for (t, o) in target.layers.iter_mut().zip(&online.layers) {
        Zip::from(&mut t.weight)
            .and(&o.weight)
            .for_each(|t, &o| *t = tau * o + keep * *t);
        Zip::from(&mut t.bias)
            .and(&o.bias)
            .for_each(|t, &o| *t = tau * o + keep * *t);
    }
    Ok(())
}

/// A slowly tracking copy of an online network.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetNet {
    pub net: Mlp,
    pub tau: f64,
}

impl TargetNet {
    pub fn new(online: &Mlp, tau: f64) -> Self {
        TargetNet {
            net: online.clone(),
            tau,
        }
    }

    pub fn sync(&mut self, online: &Mlp) -> Result<()> {
        ema_update(&mut self.net, online, self.tau)
    }
}
