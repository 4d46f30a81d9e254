use rand::Rng;

use super::{sigmoid, NnError, Tensor, BCE_EPS};

/// 2-D convolution, valid padding, stride 1.
///
/// Weights are `[filters, in_channels, k, k]`, one bias per filter. The
/// nonlinearity is applied by a separate [`Layer::Relu`] entry, never here.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub filters: usize,
    pub in_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn zeros(filters: usize, in_channels: usize, kernel: usize) -> Self {
        Conv2d {
            weights: Tensor::zeros(vec![filters, in_channels, kernel, kernel]),
            bias: vec![0.0; filters],
            filters,
            in_channels,
            kernel,
        }
    }

    /// He-uniform initialization (fan-in = C*k*k), zero biases.
    pub fn he_init(filters: usize, in_channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let mut layer = Self::zeros(filters, in_channels, kernel);
        let fan_in = (in_channels * kernel * kernel) as f64;
        let limit = (6.0 / fan_in).sqrt();
        for w in layer.weights.data_mut() {
            *w = rng.gen_range(-limit..limit);
        }
        layer
    }

    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>, NnError> {
        if in_shape.len() != 3 || in_shape[0] != self.in_channels {
            return Err(NnError::ShapeMismatch(format!(
                "conv2d expects [{}, H, W] input, got {:?}",
                self.in_channels, in_shape
            )));
        }
        let (h, w) = (in_shape[1], in_shape[2]);
        if h < self.kernel || w < self.kernel {
            return Err(NnError::ShapeMismatch(format!(
                "conv2d kernel {} exceeds input {}x{}",
                self.kernel, h, w
            )));
        }
        Ok(vec![self.filters, h - self.kernel + 1, w - self.kernel + 1])
    }

    /// out[f,i,j] = bias[f] + sum_{c,a,b} w[f,c,a,b] * in[c,i+a,j+b]
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, NnError> {
        let out_shape = self.out_shape(input.shape())?;
        let (ho, wo) = (out_shape[1], out_shape[2]);
        let k = self.kernel;
        let mut out = Tensor::zeros(out_shape);

        for f in 0..self.filters {
            let b0 = self.bias[f];
            for i in 0..ho {
                for v in out.row3_mut(f, i) {
                    *v = b0;
                }
            }
            for c in 0..self.in_channels {
                for a in 0..k {
                    for b in 0..k {
                        let w = self.weights.data()[((f * self.in_channels + c) * k + a) * k + b];
                        if w == 0.0 {
                            continue;
                        }
                        for i in 0..ho {
                            let in_row = &input.row3(c, i + a)[b..b + wo];
                            let out_row = out.row3_mut(f, i);
                            for (o, x) in out_row.iter_mut().zip(in_row) {
                                *o += w * x;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Gradients of the loss w.r.t. weights, biases, and input, given the
    /// upstream gradient on the output map.
    pub fn backward(&self, input: &Tensor, grad_out: &Tensor) -> (LayerGrads, Tensor) {
        let k = self.kernel;
        let (ho, wo) = (grad_out.shape()[1], grad_out.shape()[2]);
        let mut dw = Tensor::zeros(vec![self.filters, self.in_channels, k, k]);
        let mut db = vec![0.0; self.filters];
        let mut din = Tensor::zeros(input.shape().to_vec());

        for f in 0..self.filters {
            for i in 0..ho {
                db[f] += grad_out.row3(f, i).iter().sum::<f64>();
            }
            for c in 0..self.in_channels {
                for a in 0..k {
                    for b in 0..k {
                        let mut acc = 0.0;
                        for i in 0..ho {
                            let g_row = grad_out.row3(f, i);
                            let in_row = &input.row3(c, i + a)[b..b + wo];
                            acc += g_row
                                .iter()
                                .zip(in_row)
                                .map(|(g, x)| g * x)
                                .sum::<f64>();
                        }
                        dw.data_mut()[((f * self.in_channels + c) * k + a) * k + b] = acc;

                        let w = self.weights.data()[((f * self.in_channels + c) * k + a) * k + b];
                        if w == 0.0 {
                            continue;
                        }
                        for i in 0..ho {
                            // Split the immutable read from the mutable write.
                            let g_start = (f * ho + i) * wo;
                            let g_row = &grad_out.data()[g_start..g_start + wo];
                            let d_row = &mut din.row3_mut(c, i + a)[b..b + wo];
                            for (d, g) in d_row.iter_mut().zip(g_row) {
                                *d += w * g;
                            }
                        }
                    }
                }
            }
        }
        (
            LayerGrads {
                weights: dw,
                bias: db,
            },
            din,
        )
    }
}

/// 2x2 max pooling with floor semantics (odd trailing rows/cols dropped).
#[derive(Debug, Clone, PartialEq)]
pub struct MaxPool2d {
    pub size: usize,
}

impl MaxPool2d {
    pub fn new(size: usize) -> Self {
        assert!(size >= 1);
        MaxPool2d { size }
    }

    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>, NnError> {
        if in_shape.len() != 3 {
            return Err(NnError::ShapeMismatch(format!(
                "maxpool expects rank-3 input, got {:?}",
                in_shape
            )));
        }
        let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
        if h < self.size || w < self.size {
            return Err(NnError::ShapeMismatch(format!(
                "maxpool window {} exceeds input {}x{}",
                self.size, h, w
            )));
        }
        Ok(vec![c, h / self.size, w / self.size])
    }

    /// Returns the pooled map and, per output element, the flat index of its
    /// argmax in the input (first occurrence in row-major window order).
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Vec<usize>), NnError> {
        let out_shape = self.out_shape(input.shape())?;
        let (c_n, ho, wo) = (out_shape[0], out_shape[1], out_shape[2]);
        let (h, w) = (input.shape()[1], input.shape()[2]);
        let s = self.size;
        let mut out = Tensor::zeros(out_shape);
        let mut argmax = vec![0usize; c_n * ho * wo];

        for c in 0..c_n {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for a in 0..s {
                        let row = oi * s + a;
                        for b in 0..s {
                            let col = oj * s + b;
                            let idx = (c * h + row) * w + col;
                            let v = input.data()[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (c * ho + oi) * wo + oj;
                    out.data_mut()[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        Ok((out, argmax))
    }

    /// Routes each output gradient to its recorded argmax position.
    pub fn backward(&self, in_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
        let mut din = Tensor::zeros(in_shape.to_vec());
        for (g, &idx) in grad_out.data().iter().zip(argmax) {
            din.data_mut()[idx] += g;
        }
        din
    }
}

/// Fully connected layer, weights `[outputs, inputs]`, one bias per output.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn zeros(outputs: usize, inputs: usize) -> Self {
        Dense {
            weights: Tensor::zeros(vec![outputs, inputs]),
            bias: vec![0.0; outputs],
            inputs,
            outputs,
        }
    }

    /// He-uniform initialization (fan-in), zero biases. For ReLU layers.
    pub fn he_init(outputs: usize, inputs: usize, rng: &mut impl Rng) -> Self {
        let mut layer = Self::zeros(outputs, inputs);
        let limit = (6.0 / inputs as f64).sqrt();
        for w in layer.weights.data_mut() {
            *w = rng.gen_range(-limit..limit);
        }
        layer
    }

    /// Xavier-uniform initialization (fan-in + fan-out), zero biases. For the
    /// sigmoid output layer.
    pub fn xavier_init(outputs: usize, inputs: usize, rng: &mut impl Rng) -> Self {
        let mut layer = Self::zeros(outputs, inputs);
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        for w in layer.weights.data_mut() {
            *w = rng.gen_range(-limit..limit);
        }
        layer
    }

    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>, NnError> {
        if in_shape.len() != 1 || in_shape[0] != self.inputs {
            return Err(NnError::ShapeMismatch(format!(
                "dense expects [{}] input, got {:?}",
                self.inputs, in_shape
            )));
        }
        Ok(vec![self.outputs])
    }

    /// out = W . in + b
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, NnError> {
        self.out_shape(input.shape())?;
        let x = input.data();
        let mut out = Tensor::zeros(vec![self.outputs]);
        for m in 0..self.outputs {
            let row = self.weights.row2(m);
            let dot: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
            out.data_mut()[m] = self.bias[m] + dot;
        }
        Ok(out)
    }

    pub fn backward(&self, input: &Tensor, grad_out: &Tensor) -> (LayerGrads, Tensor) {
        let x = input.data();
        let g = grad_out.data();
        let mut dw = Tensor::zeros(vec![self.outputs, self.inputs]);
        let mut din = Tensor::zeros(vec![self.inputs]);
        for m in 0..self.outputs {
            let gm = g[m];
            let dw_row = dw.row2_mut(m);
            for (d, v) in dw_row.iter_mut().zip(x) {
                *d = gm * v;
            }
            let w_row = self.weights.row2(m);
            for (d, w) in din.data_mut().iter_mut().zip(w_row) {
                *d += gm * w;
            }
        }
        (
            LayerGrads {
                weights: dw,
                bias: g.to_vec(),
            },
            din,
        )
    }
}

/// One stage of a sequential network.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Relu,
    MaxPool2d(MaxPool2d),
    Flatten,
    Dense(Dense),
    Sigmoid,
}

impl Layer {
    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>, NnError> {
        match self {
            Layer::Conv2d(l) => l.out_shape(in_shape),
            Layer::Relu => Ok(in_shape.to_vec()),
            Layer::MaxPool2d(l) => l.out_shape(in_shape),
            Layer::Flatten => Ok(vec![in_shape.iter().product()]),
            Layer::Dense(l) => l.out_shape(in_shape),
            Layer::Sigmoid => {
                if in_shape.iter().product::<usize>() != 1 {
                    return Err(NnError::ShapeMismatch(format!(
                        "sigmoid output expects a scalar, got {:?}",
                        in_shape
                    )));
                }
                Ok(vec![1])
            }
        }
    }

    /// Number of trainable parameters, 0 for stateless layers.
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv2d(l) => l.weights.len() + l.bias.len(),
            Layer::Dense(l) => l.weights.len() + l.bias.len(),
            _ => 0,
        }
    }
}

/// Per-layer weight and bias gradients, shape-congruent with the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

impl LayerGrads {
    pub fn add_assign(&mut self, other: &LayerGrads) {
        self.weights.add_assign(&other.weights);
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.scale(s);
        for v in &mut self.bias {
            *v *= s;
        }
    }
}

/// Gradients for a whole network, one entry per layer (None for stateless).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub per_layer: Vec<Option<LayerGrads>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        let per_layer = net
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv2d(c) => Some(LayerGrads {
                    weights: Tensor::zeros(c.weights.shape().to_vec()),
                    bias: vec![0.0; c.bias.len()],
                }),
                Layer::Dense(d) => Some(LayerGrads {
                    weights: Tensor::zeros(d.weights.shape().to_vec()),
                    bias: vec![0.0; d.bias.len()],
                }),
                _ => None,
            })
            .collect();
        Gradients { per_layer }
    }

    /// Accumulate `other` into `self`; entries must be congruent.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.per_layer.iter_mut().zip(&other.per_layer) {
            match (a, b) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, None) => {}
                _ => panic!("gradient structure mismatch"),
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.per_layer.iter_mut().flatten() {
            g.scale(s);
        }
    }
}

/// Cache produced by a training-mode forward pass: the input of every layer
/// plus pooling argmax records, consumed by the backward pass.
pub struct ForwardTape {
    inputs: Vec<Tensor>,
    pool_argmax: Vec<Option<Vec<usize>>>,
    output: f64,
}

impl ForwardTape {
    pub fn output(&self) -> f64 {
        self.output
    }
}

/// A sequential stack of layers ending in a sigmoid scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Network { layers }
    }

    /// Walk the shape chain, returning the output shape or the first mismatch.
    pub fn check_shapes(&self, input_shape: &[usize]) -> Result<Vec<usize>, NnError> {
        let mut shape = input_shape.to_vec();
        for layer in &self.layers {
            shape = layer.out_shape(&shape)?;
        }
        Ok(shape)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Inference pass; returns the final activation tensor.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, NnError> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = self.apply(layer, &x)?.0;
        }
        Ok(x)
    }

    /// Scalar network output (sigmoid probability).
    pub fn predict(&self, input: &Tensor) -> Result<f64, NnError> {
        Ok(self.forward(input)?.data()[0])
    }

    fn apply(&self, layer: &Layer, x: &Tensor) -> Result<(Tensor, Option<Vec<usize>>), NnError> {
        match layer {
            Layer::Conv2d(l) => Ok((l.forward(x)?, None)),
            Layer::Relu => Ok((x.map(|v| v.max(0.0)), None)),
            Layer::MaxPool2d(l) => {
                let (out, argmax) = l.forward(x)?;
                Ok((out, Some(argmax)))
            }
            Layer::Flatten => Ok((x.clone().reshape(vec![x.len()]), None)),
            Layer::Dense(l) => Ok((l.forward(x)?, None)),
            Layer::Sigmoid => {
                layer.out_shape(x.shape())?;
                Ok((
                    Tensor::from_vec(vec![1], vec![sigmoid(x.data()[0])]),
                    None,
                ))
            }
        }
    }

    /// Forward pass that records the tape needed by [`Network::backward_from_tape`].
    pub fn forward_tape(&self, input: &Tensor) -> Result<ForwardTape, NnError> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pool_argmax = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            inputs.push(x.clone());
            let (out, argmax) = self.apply(layer, &x)?;
            pool_argmax.push(argmax);
            x = out;
        }
        if x.len() != 1 {
            return Err(NnError::ShapeMismatch(format!(
                "network output must be scalar, got shape {:?}",
                x.shape()
            )));
        }
        Ok(ForwardTape {
            inputs,
            pool_argmax,
            output: x.data()[0],
        })
    }

    /// Exact reverse-mode gradients of the binary cross-entropy at label `y`,
    /// returned together with the loss. ReLU uses subgradient 0 at 0; max
    /// pooling routes to the recorded argmax.
    pub fn backward(&self, input: &Tensor, y: f64) -> Result<(f64, Gradients), NnError> {
        let tape = self.forward_tape(input)?;
        Ok(self.backward_from_tape(&tape, y))
    }

    pub fn backward_from_tape(&self, tape: &ForwardTape, y: f64) -> (f64, Gradients) {
        let p = tape.output;
        let loss = super::bce_loss(p, y);
        let mut grads = Gradients {
            per_layer: vec![None; self.layers.len()],
        };

        // Combined sigmoid + BCE gradient at the output pre-activation. The
        // clamp makes the loss flat once p leaves [eps, 1-eps].
        let dz = if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
            0.0
        } else {
            p - y
        };

        let mut grad = Tensor::from_vec(vec![1], vec![dz]);
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let x_in = &tape.inputs[idx];
            grad = match layer {
                Layer::Sigmoid => {
                    // Gradient w.r.t. the sigmoid input is already folded into
                    // the BCE term above; pass it through unchanged.
                    grad
                }
                Layer::Conv2d(l) => {
                    let (lg, din) = l.backward(x_in, &grad);
                    grads.per_layer[idx] = Some(lg);
                    din
                }
                Layer::Relu => {
                    let mut din = grad;
                    for (d, &v) in din.data_mut().iter_mut().zip(x_in.data()) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    din
                }
                Layer::MaxPool2d(l) => {
                    let argmax = tape.pool_argmax[idx]
                        .as_ref()
                        .expect("pool layer recorded argmax");
                    l.backward(x_in.shape(), argmax, &grad)
                }
                Layer::Flatten => grad.reshape(x_in.shape().to_vec()),
                Layer::Dense(l) => {
                    let (lg, din) = l.backward(x_in, &grad);
                    grads.per_layer[idx] = Some(lg);
                    din
                }
            };
        }
        (loss, grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Brute-force direct convolution, written independently of Conv2d::forward.
    fn conv_oracle(input: &Tensor, weights: &Tensor, bias: &[f64]) -> Tensor {
        let (c_n, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (f_n, k) = (weights.shape()[0], weights.shape()[2]);
        let (ho, wo) = (h - k + 1, w - k + 1);
        let mut out = Tensor::zeros(vec![f_n, ho, wo]);
        for f in 0..f_n {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = bias[f];
                    for c in 0..c_n {
                        for a in 0..k {
                            for b in 0..k {
                                acc += weights.data()[((f * c_n + c) * k + a) * k + b]
                                    * input.data()[(c * h + i + a) * w + j + b];
                            }
                        }
                    }
                    out.data_mut()[(f * ho + i) * wo + j] = acc;
                }
            }
        }
        out
    }

    /// Naive dot-product dense oracle.
    fn dense_oracle(input: &[f64], weights: &Tensor, bias: &[f64]) -> Vec<f64> {
        let (m_n, n_n) = (weights.shape()[0], weights.shape()[1]);
        let mut out = vec![0.0; m_n];
        for m in 0..m_n {
            let mut acc = bias[m];
            for n in 0..n_n {
                acc += weights.data()[m * n_n + n] * input[n];
            }
            out[m] = acc;
        }
        out
    }

    fn random_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn conv_ones_kernel_sums_ones() {
        let input = Tensor::from_vec(vec![1, 3, 3], vec![1.0; 9]);
        let mut conv = Conv2d::zeros(1, 1, 3);
        for w in conv.weights.data_mut() {
            *w = 1.0;
        }
        let out = conv.forward(&input).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data()[0], 9.0);
    }

    #[test]
    fn conv_delta_kernel_is_interior_crop() {
        let input = Tensor::from_vec(vec![1, 4, 4], (0..16).map(f64::from).collect());
        let mut conv = Conv2d::zeros(1, 1, 3);
        // Center one, rest zero.
        conv.weights.data_mut()[(1 * 3) + 1] = 1.0;
        let out = conv.forward(&input).unwrap();
        // Interior 2x2 crop of a 4x4 grid: rows 1..3, cols 1..3.
        assert_eq!(out.data(), &[5.0, 6.0, 9.0, 10.0]);
    }

    #[test]
    fn conv_matches_oracle_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let input = random_tensor(vec![1, 5, 5], &mut rng);
            let conv = Conv2d::he_init(2, 1, 3, &mut rng);
            let got = conv.forward(&input).unwrap();
            let want = conv_oracle(&input, &conv.weights, &conv.bias);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_multichannel_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let input = random_tensor(vec![3, 7, 6], &mut rng);
        let conv = Conv2d::he_init(4, 3, 3, &mut rng);
        let got = conv.forward(&input).unwrap();
        let want = conv_oracle(&input, &conv.weights, &conv.bias);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_wrong_channels() {
        let conv = Conv2d::zeros(1, 2, 3);
        let input = Tensor::zeros(vec![1, 5, 5]);
        assert!(matches!(
            conv.forward(&input),
            Err(NnError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn conv_rejects_undersized_input() {
        let conv = Conv2d::zeros(1, 1, 3);
        let input = Tensor::zeros(vec![1, 2, 5]);
        assert!(conv.forward(&input).is_err());
    }

    #[test]
    fn pool_definition() {
        let input = Tensor::from_vec(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let (out, argmax) = MaxPool2d::new(2).forward(&input).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(argmax, vec![3]);
    }

    #[test]
    fn pool_constant_input() {
        let input = Tensor::from_vec(vec![1, 4, 4], vec![0.7; 16]);
        let (out, argmax) = MaxPool2d::new(2).forward(&input).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.7));
        // Ties go to the first window element in row-major order.
        assert_eq!(argmax, vec![0, 2, 8, 10]);
    }

    #[test]
    fn pool_floor_semantics_drops_odd_edge() {
        let input = Tensor::zeros(vec![1, 5, 5]);
        let (out, _) = MaxPool2d::new(2).forward(&input).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
    }

    #[test]
    fn pool_backward_routes_to_argmax() {
        let input = Tensor::from_vec(vec![1, 2, 2], vec![1.0, 5.0, 3.0, 4.0]);
        let pool = MaxPool2d::new(2);
        let (_, argmax) = pool.forward(&input).unwrap();
        let g = Tensor::from_vec(vec![1, 1, 1], vec![2.5]);
        let din = pool.backward(&[1, 2, 2], &argmax, &g);
        assert_eq!(din.data(), &[0.0, 2.5, 0.0, 0.0]);
    }

    #[test]
    fn dense_identity_weights() {
        let mut dense = Dense::zeros(3, 3);
        for m in 0..3 {
            dense.weights.row2_mut(m)[m] = 1.0;
        }
        let input = Tensor::from_vec(vec![3], vec![0.5, -1.0, 2.0]);
        assert_eq!(dense.forward(&input).unwrap().data(), input.data());
    }

    #[test]
    fn dense_zero_weights_yield_bias() {
        let mut dense = Dense::zeros(2, 3);
        dense.bias = vec![1.0, 2.0];
        let input = Tensor::from_vec(vec![3], vec![4.0, 5.0, 6.0]);
        assert_eq!(dense.forward(&input).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn dense_matches_oracle_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let dense = Dense::he_init(5, 9, &mut rng);
            let input = random_tensor(vec![9], &mut rng);
            let got = dense.forward(&input).unwrap();
            let want = dense_oracle(input.data(), &dense.weights, &dense.bias);
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_rejects_length_mismatch() {
        let dense = Dense::zeros(2, 3);
        let input = Tensor::zeros(vec![4]);
        assert!(matches!(
            dense.forward(&input),
            Err(NnError::ShapeMismatch(_))
        ));
    }

    fn tiny_net(rng: &mut impl Rng) -> Network {
        Network::new(vec![
            Layer::Conv2d(Conv2d::he_init(2, 1, 3, rng)),
            Layer::Relu,
            Layer::MaxPool2d(MaxPool2d::new(2)),
            Layer::Flatten,
            Layer::Dense(Dense::he_init(4, 2 * 3 * 3, rng)),
            Layer::Relu,
            Layer::Dense(Dense::xavier_init(1, 4, rng)),
            Layer::Sigmoid,
        ])
    }

    /// Central finite differences over every parameter of the network.
    fn fd_check(net: &Network, input: &Tensor, y: f64, h: f64, tol: f64) {
        let (_, grads) = net.backward(input, y).unwrap();
        for (li, layer) in net.layers.iter().enumerate() {
            let n_params = layer.param_count();
            if n_params == 0 {
                continue;
            }
            let lg = grads.per_layer[li].as_ref().unwrap();
            for p in 0..n_params {
                let mut plus = net.clone();
                let mut minus = net.clone();
                perturb(&mut plus.layers[li], p, h);
                perturb(&mut minus.layers[li], p, -h);
                let lp = super::super::bce_loss(plus.predict(input).unwrap(), y);
                let lm = super::super::bce_loss(minus.predict(input).unwrap(), y);
                let numeric = (lp - lm) / (2.0 * h);
                let analytic = param_grad(lg, p);
                let denom = numeric.abs().max(analytic.abs()).max(1e-8);
                let rel = (numeric - analytic).abs() / denom;
                assert!(
                    rel < tol,
                    "layer {li} param {p}: numeric={numeric:.10e} analytic={analytic:.10e} rel={rel:.3e}"
                );
            }
        }
    }

    fn perturb(layer: &mut Layer, p: usize, delta: f64) {
        match layer {
            Layer::Conv2d(l) => {
                let nw = l.weights.len();
                if p < nw {
                    l.weights.data_mut()[p] += delta;
                } else {
                    l.bias[p - nw] += delta;
                }
            }
            Layer::Dense(l) => {
                let nw = l.weights.len();
                if p < nw {
                    l.weights.data_mut()[p] += delta;
                } else {
                    l.bias[p - nw] += delta;
                }
            }
            _ => unreachable!(),
        }
    }

    fn param_grad(lg: &LayerGrads, p: usize) -> f64 {
        let nw = lg.weights.len();
        if p < nw {
            lg.weights.data()[p]
        } else {
            lg.bias[p - nw]
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let input = random_tensor(vec![1, 8, 8], &mut rng);
        let net = tiny_net(&mut rng);
        fd_check(&net, &input, 1.0, 1e-5, 1e-4);
        fd_check(&net, &input, 0.0, 1e-5, 1e-4);
    }

    #[test]
    fn final_bias_gradient_is_residual() {
        // With an all-zero final dense layer the output is sigmoid(0) = 0.5
        // and the bias gradient reduces to p - y.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = tiny_net(&mut rng);
        if let Layer::Dense(d) = &mut net.layers[6] {
            *d = Dense::zeros(1, 4);
        }
        let input = random_tensor(vec![1, 8, 8], &mut rng);
        let (_, grads) = net.backward(&input, 1.0).unwrap();
        let lg = grads.per_layer[6].as_ref().unwrap();
        assert!((lg.bias[0] - (0.5 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_input_zeroes_conv_weight_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = tiny_net(&mut rng);
        // Nonzero biases keep the ReLUs active on a zero image; freshly
        // initialized biases are zero and would gate every gradient.
        for layer in &mut net.layers {
            match layer {
                Layer::Conv2d(l) => l.bias.fill(0.1),
                Layer::Dense(l) => l.bias.fill(0.1),
                _ => {}
            }
        }
        let input = Tensor::zeros(vec![1, 8, 8]);
        let (_, grads) = net.backward(&input, 1.0).unwrap();
        let conv = grads.per_layer[0].as_ref().unwrap();
        // dL/dw = sum g * x vanishes with the input; dL/db = sum g does not.
        assert!(conv.weights.data().iter().all(|&v| v == 0.0));
        assert!(conv.bias.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn shape_chain_for_classifier_architecture() {
        // 64 -> 62 -> 31 -> 29 -> 14 -> 12, flatten 12*12*32 = 4608.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Network::new(vec![
            Layer::Conv2d(Conv2d::he_init(8, 1, 3, &mut rng)),
            Layer::Relu,
            Layer::MaxPool2d(MaxPool2d::new(2)),
            Layer::Conv2d(Conv2d::he_init(16, 8, 3, &mut rng)),
            Layer::Relu,
            Layer::MaxPool2d(MaxPool2d::new(2)),
            Layer::Conv2d(Conv2d::he_init(32, 16, 3, &mut rng)),
            Layer::Relu,
            Layer::Flatten,
        ]);
        let out = net.check_shapes(&[1, 64, 64]).unwrap();
        assert_eq!(out, vec![4608]);
    }

    #[test]
    fn network_rejects_broken_chain() {
        let net = Network::new(vec![
            Layer::Conv2d(Conv2d::zeros(2, 1, 3)),
            Layer::Dense(Dense::zeros(1, 10)),
        ]);
        assert!(net.check_shapes(&[1, 8, 8]).is_err());
    }
}
