use serde::{Deserialize, Serialize};

use super::{Gradients, Layer, LayerGrads, Network, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain stochastic gradient descent, w <- w - lr * g.
    Sgd,
    /// Adaptive moment estimation with bias correction.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 0.0,
        }
    }
}

/// First/second moment estimates for Adam; unused (empty) for plain SGD.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    step: u64,
    m: Vec<Option<LayerGrads>>,
    v: Vec<Option<LayerGrads>>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    fn ensure_shaped(&mut self, net: &Network) {
        if self.m.is_empty() {
            self.m = Gradients::zeros_like(net).per_layer;
            self.v = Gradients::zeros_like(net).per_layer;
        }
    }
}

/// Apply one optimizer update to every trainable parameter of the network.
///
/// Deterministic given (params, grads, state, cfg); the update touches
/// parameters in layer order, weights before biases.
pub fn step(
    net: &mut Network,
    grads: &Gradients,
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
) {
    match cfg.kind {
        OptimizerKind::Sgd => {
            for (layer, lg) in net.layers.iter_mut().zip(&grads.per_layer) {
                if let Some(lg) = lg {
                    let (w, b) = layer_params_mut(layer);
                    for (wv, gv) in w.data_mut().iter_mut().zip(lg.weights.data()) {
                        *wv -= cfg.learning_rate * gv;
                    }
                    for (bv, gv) in b.iter_mut().zip(&lg.bias) {
                        *bv -= cfg.learning_rate * gv;
                    }
                }
            }
        }
        OptimizerKind::Adam => {
            state.ensure_shaped(net);
            state.step += 1;
            let t = state.step as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            for (((layer, lg), m), v) in net
                .layers
                .iter_mut()
                .zip(&grads.per_layer)
                .zip(&mut state.m)
                .zip(&mut state.v)
            {
                let (Some(lg), Some(m), Some(v)) = (lg, m, v) else {
                    continue;
                };
                let (w, b) = layer_params_mut(layer);
                adam_update(
                    w.data_mut(),
                    lg.weights.data(),
                    m.weights.data_mut(),
                    v.weights.data_mut(),
                    cfg,
                    bc1,
                    bc2,
                );
                adam_update(b, &lg.bias, &mut m.bias, &mut v.bias, cfg, bc1, bc2);
            }
        }
    }
}

fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    cfg: &OptimizerConfig,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

fn layer_params_mut(layer: &mut Layer) -> (&mut Tensor, &mut Vec<f64>) {
    match layer {
        Layer::Conv2d(l) => (&mut l.weights, &mut l.bias),
        Layer::Dense(l) => (&mut l.weights, &mut l.bias),
        _ => unreachable!("stateless layer has no parameters"),
    }
}
