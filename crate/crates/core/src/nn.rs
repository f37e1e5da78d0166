//! Minimal feed-forward network: valid convolutions, max-pooling, dense layers
//! and rectifiers, with exact backpropagation. Tensors are flat `f64` buffers in
//! channel-major order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::photon_sim::standard_normal;
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn flat(len: usize) -> Self {
        Self::new(len, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Network layouts available from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// conv 5x5 (8 maps), pool 2, conv 5x5 (16 maps), pool 2, dense 128, dense K.
    Conv,
    /// dense 64, dense K.
    Fc,
}

/// Valid (unpadded) stride-one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub input: Shape,
    pub out_channels: usize,
    pub kernel: usize,
    /// `[out][in][ky][kx]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn output(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.input.height + 1 - self.kernel,
            self.input.width + 1 - self.kernel,
        )
    }

    #[inline]
    pub fn weight_index(&self, o: usize, c: usize, ky: usize, kx: usize) -> usize {
        ((o * self.input.channels + c) * self.kernel + ky) * self.kernel + kx
    }

    fn forward(&self, x: &[f64], y: &mut [f64]) {
        let out = self.output();
        let (ih, iw, k) = (self.input.height, self.input.width, self.kernel);
        for o in 0..self.out_channels {
            for oy in 0..out.height {
                for ox in 0..out.width {
                    let mut acc = self.bias[o];
                    for c in 0..self.input.channels {
                        for ky in 0..k {
                            let row = &x[(c * ih + oy + ky) * iw + ox..][..k];
                            let w = &self.weights[self.weight_index(o, c, ky, 0)..][..k];
                            acc += row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    y[(o * out.height + oy) * out.width + ox] = acc;
                }
            }
        }
    }

    fn backward(
        &self,
        x: &[f64],
        dy: &[f64],
        grad: &mut ParamGrad,
        mut dx: Option<&mut [f64]>,
    ) {
        let out = self.output();
        let (ih, iw, k) = (self.input.height, self.input.width, self.kernel);
        for o in 0..self.out_channels {
            for oy in 0..out.height {
                for ox in 0..out.width {
                    let g = dy[(o * out.height + oy) * out.width + ox];
                    if g == 0.0 {
                        continue;
                    }
                    grad.bias[o] += g;
                    for c in 0..self.input.channels {
                        for ky in 0..k {
                            let xi = (c * ih + oy + ky) * iw + ox;
                            let wi = self.weight_index(o, c, ky, 0);
                            let row = &x[xi..xi + k];
                            for (dw, a) in grad.weights[wi..wi + k].iter_mut().zip(row) {
                                *dw += g * a;
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                let w = &self.weights[wi..wi + k];
                                for (d, w) in dx[xi..xi + k].iter_mut().zip(w) {
                                    *d += g * w;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn mults(&self) -> u64 {
        let out = self.output();
        (out.len() * self.input.channels * self.kernel * self.kernel) as u64
    }
}

/// Non-overlapping max-pooling; trailing rows/columns that do not fill a
/// window are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxPool2d {
    pub input: Shape,
    pub size: usize,
}

impl MaxPool2d {
    pub fn output(&self) -> Shape {
        Shape::new(
            self.input.channels,
            self.input.height / self.size,
            self.input.width / self.size,
        )
    }

    /// Input index holding the maximum of output unit `j` (first one on ties).
    pub fn argmax(&self, x: &[f64], j: usize) -> usize {
        let out = self.output();
        let c = j / (out.height * out.width);
        let oy = (j / out.width) % out.height;
        let ox = j % out.width;
        let mut best = usize::MAX;
        let mut best_v = f64::NEG_INFINITY;
        for dy in 0..self.size {
            for dx in 0..self.size {
                let i = (c * self.input.height + oy * self.size + dy) * self.input.width
                    + ox * self.size
                    + dx;
                if best == usize::MAX || x[i] > best_v {
                    best = i;
                    best_v = x[i];
                }
            }
        }
        best
    }

    /// Output unit whose window contains input index `i`, if any.
    pub fn window_of(&self, i: usize) -> Option<usize> {
        let out = self.output();
        let c = i / (self.input.height * self.input.width);
        let y = (i / self.input.width) % self.input.height;
        let x = i % self.input.width;
        let (oy, ox) = (y / self.size, x / self.size);
        (oy < out.height && ox < out.width).then(|| (c * out.height + oy) * out.width + ox)
    }

    fn forward(&self, x: &[f64], y: &mut [f64]) {
        for (j, v) in y.iter_mut().enumerate() {
            *v = x[self.argmax(x, j)];
        }
    }

    fn backward(&self, x: &[f64], dy: &[f64], dx: &mut [f64]) {
        for (j, &g) in dy.iter().enumerate() {
            dx[self.argmax(x, j)] += g;
        }
    }
}

/// Fully connected layer, weights `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn forward(&self, x: &[f64], y: &mut [f64]) {
        for (o, v) in y.iter_mut().enumerate() {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            *v = self.bias[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    fn backward(&self, x: &[f64], dy: &[f64], grad: &mut ParamGrad, mut dx: Option<&mut [f64]>) {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let range = o * self.inputs..(o + 1) * self.inputs;
            for (dw, a) in grad.weights[range.clone()].iter_mut().zip(x) {
                *dw += g * a;
            }
            if let Some(dx) = dx.as_deref_mut() {
                for (d, w) in dx.iter_mut().zip(&self.weights[range]) {
                    *d += g * w;
                }
            }
        }
    }

    pub fn mults(&self) -> u64 {
        (self.inputs * self.outputs) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Pool(MaxPool2d),
    Dense(Dense),
    Relu { len: usize },
}

impl Layer {
    pub fn input_len(&self) -> usize {
        match self {
            Layer::Conv(c) => c.input.len(),
            Layer::Pool(p) => p.input.len(),
            Layer::Dense(d) => d.inputs,
            Layer::Relu { len } => *len,
        }
    }

    pub fn output_len(&self) -> usize {
        match self {
            Layer::Conv(c) => c.output().len(),
            Layer::Pool(p) => p.output().len(),
            Layer::Dense(d) => d.outputs,
            Layer::Relu { len } => *len,
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Layer::Conv(_) | Layer::Dense(_))
    }

    /// Multiplications of one dense evaluation.
    pub fn mults(&self) -> u64 {
        match self {
            Layer::Conv(c) => c.mults(),
            Layer::Dense(d) => d.mults(),
            _ => 0,
        }
    }

    fn params(&self) -> Option<(&[f64], &[f64])> {
        match self {
            Layer::Conv(c) => Some((&c.weights, &c.bias)),
            Layer::Dense(d) => Some((&d.weights, &d.bias)),
            _ => None,
        }
    }

    fn params_mut(&mut self) -> Option<(&mut Vec<f64>, &mut Vec<f64>)> {
        match self {
            Layer::Conv(c) => Some((&mut c.weights, &mut c.bias)),
            Layer::Dense(d) => Some((&mut d.weights, &mut d.bias)),
            _ => None,
        }
    }

    pub fn forward(&self, x: &[f64], y: &mut [f64]) {
        match self {
            Layer::Conv(c) => c.forward(x, y),
            Layer::Pool(p) => p.forward(x, y),
            Layer::Dense(d) => d.forward(x, y),
            Layer::Relu { .. } => {
                for (o, i) in y.iter_mut().zip(x) {
                    *o = i.max(0.0);
                }
            }
        }
    }
}

/// Gradient buffers for one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients for every layer (`None` for parameter-free layers).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<ParamGrad>>,
}

impl Gradients {
    pub fn zeros(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| {
                    l.params().map(|(w, b)| ParamGrad {
                        weights: vec![0.0; w.len()],
                        bias: vec![0.0; b.len()],
                    })
                })
                .collect(),
        }
    }

    pub fn clear(&mut self) {
        for g in self.layers.iter_mut().flatten() {
            g.weights.iter_mut().for_each(|v| *v = 0.0);
            g.bias.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Same ordering as [`Network::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in self.layers.iter().flatten() {
            out.extend_from_slice(&g.weights);
            out.extend_from_slice(&g.bias);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input: Shape,
    pub layers: Vec<Layer>,
}

impl Network {
    /// Builds and He-initializes a network for `classes` outputs.
    pub fn build(arch: Architecture, input: Shape, classes: usize, seed: u64) -> Result<Self> {
        let layers = match arch {
            Architecture::Conv => {
                if input.height < 16 || input.width < 16 {
                    return Err(Error::invalid(
                        "architecture",
                        format!("conv layout needs inputs of at least 16x16, got {input}"),
                    ));
                }
                let c1 = conv(input, 8, 5);
                let r1 = c1.output().len();
                let p1 = MaxPool2d {
                    input: c1.output(),
                    size: 2,
                };
                let c2 = conv(p1.output(), 16, 5);
                let r2 = c2.output().len();
                let p2 = MaxPool2d {
                    input: c2.output(),
                    size: 2,
                };
                let flat = p2.output().len();
                vec![
                    Layer::Conv(c1),
                    Layer::Relu { len: r1 },
                    Layer::Pool(p1),
                    Layer::Conv(c2),
                    Layer::Relu { len: r2 },
                    Layer::Pool(p2),
                    Layer::Dense(dense(flat, 128)),
                    Layer::Relu { len: 128 },
                    Layer::Dense(dense(128, classes)),
                ]
            }
            Architecture::Fc => vec![
                Layer::Dense(dense(input.len(), 64)),
                Layer::Relu { len: 64 },
                Layer::Dense(dense(64, classes)),
            ],
        };
        let mut net = Self::from_layers(input, layers)?;
        net.init_he(seed);
        Ok(net)
    }

    /// Validates that consecutive layer sizes agree.
    pub fn from_layers(input: Shape, layers: Vec<Layer>) -> Result<Self> {
        let first = layers.first().ok_or(Error::Empty("layer list"))?;
        if !first.is_linear() {
            return Err(Error::invalid("layers", "the first layer must be convolutional or dense"));
        }
        let mut len = input.len();
        for layer in &layers {
            if layer.input_len() != len {
                return Err(Error::shape(len, layer.input_len()));
            }
            match layer {
                Layer::Pool(p) if p.size == 0 || p.size > p.input.height.min(p.input.width) => {
                    return Err(Error::invalid("pool size", format!("{} does not fit {}", p.size, p.input)));
                }
                Layer::Conv(c) if c.kernel == 0 || c.kernel > c.input.height.min(c.input.width) => {
                    return Err(Error::invalid("kernel", format!("{} does not fit {}", c.kernel, c.input)));
                }
                _ => {}
            }
            len = layer.output_len();
        }
        if !layers.last().is_some_and(Layer::is_linear) {
            return Err(Error::invalid("layers", "the last layer must produce logits"));
        }
        Ok(Self { input, layers })
    }

    fn init_he(&mut self, seed: u64) {
        let mut rng = stream_rng(seed, 0x1417);
        for layer in &mut self.layers {
            let fan_in = match layer {
                Layer::Conv(c) => c.input.channels * c.kernel * c.kernel,
                Layer::Dense(d) => d.inputs,
                _ => continue,
            };
            let std = (2.0 / fan_in as f64).sqrt();
            let (w, b) = layer.params_mut().expect("linear layer");
            w.iter_mut().for_each(|v| *v = std * standard_normal(&mut rng));
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, Layer::output_len)
    }

    pub fn first_layer(&self) -> &Layer {
        &self.layers[0]
    }

    /// Number of first-layer hidden units.
    pub fn hidden_len(&self) -> usize {
        self.layers[0].output_len()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).pop().expect("non-empty network")
    }

    /// Activations `[input, layer 1 output, ..., logits]`.
    pub fn trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        assert_eq!(x.len(), self.input.len(), "input length");
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for layer in &self.layers {
            let mut y = vec![0.0; layer.output_len()];
            layer.forward(acts.last().unwrap(), &mut y);
            acts.push(y);
        }
        acts
    }

    /// Accumulates parameter gradients for `dlogits` into `grads` and, when
    /// asked, returns the gradient with respect to the input.
    pub fn backward(
        &self,
        acts: &[Vec<f64>],
        dlogits: &[f64],
        grads: &mut Gradients,
        input_grad: bool,
    ) -> Option<Vec<f64>> {
        let mut dy = dlogits.to_vec();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let x = &acts[idx];
            let need_dx = idx > 0 || input_grad;
            let mut dx = vec![0.0; if need_dx { layer.input_len() } else { 0 }];
            let dx_opt = need_dx.then_some(dx.as_mut_slice());
            match layer {
                Layer::Conv(c) => {
                    c.backward(x, &dy, grads.layers[idx].as_mut().expect("grad"), dx_opt)
                }
                Layer::Dense(d) => {
                    d.backward(x, &dy, grads.layers[idx].as_mut().expect("grad"), dx_opt)
                }
                Layer::Pool(p) => p.backward(x, &dy, &mut dx),
                Layer::Relu { .. } => {
                    for ((d, g), xi) in dx.iter_mut().zip(&dy).zip(x) {
                        if *xi > 0.0 {
                            *d = *g;
                        }
                    }
                }
            }
            if idx == 0 {
                return input_grad.then_some(dx);
            }
            dy = dx;
        }
        None
    }

    /// Multiplications of one dense forward pass.
    pub fn dense_mults(&self) -> u64 {
        self.layers.iter().map(Layer::mults).sum()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.layers.iter().filter_map(Layer::params) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(self.param_count(), flat.len()));
        }
        let mut at = 0;
        for (w, b) in self.layers.iter_mut().filter_map(Layer::params_mut) {
            let (nw, nb) = (w.len(), b.len());
            w.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            b.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    /// Plain SGD step: `w -= lr * (g + decay * w)`; biases are not decayed.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64, weight_decay: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            if let (Some((w, b)), Some(g)) = (layer.params_mut(), g) {
                for (w, dw) in w.iter_mut().zip(&g.weights) {
                    *w -= lr * (dw + weight_decay * *w);
                }
                for (b, db) in b.iter_mut().zip(&g.bias) {
                    *b -= lr * db;
                }
            }
        }
    }

    /// Sum of squared filter weights (the weight-decay penalty is half of
    /// `decay` times this).
    pub fn weight_norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .map(|(w, _)| w.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

fn conv(input: Shape, out_channels: usize, kernel: usize) -> Conv2d {
    let n = out_channels * input.channels * kernel * kernel;
    Conv2d {
        input,
        out_channels,
        kernel,
        weights: vec![0.0; n],
        bias: vec![0.0; out_channels],
    }
}

fn dense(inputs: usize, outputs: usize) -> Dense {
    Dense {
        inputs,
        outputs,
        weights: vec![0.0; inputs * outputs],
        bias: vec![0.0; outputs],
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Negative log-likelihood of `label` and its gradient wrt the logits.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let mut grad: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    grad[label] -= 1.0;
    (lse - logits[label], grad)
}
