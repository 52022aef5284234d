//! Small layer building blocks on top of the autodiff graph.

use crate::autograd::{Graph, Mat, Var};
use crate::params::{Initializer, ParamId, ParamSet};

/// `y = x·W + b`
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(params: &mut ParamSet, init: &mut Initializer, name: &str, fan_in: usize, fan_out: usize, relu: bool) -> Self {
        let w = if relu { init.he(fan_in, fan_out) } else { init.glorot(fan_in, fan_out) };
        Self {
            weight: params.add(format!("{name}.weight"), w),
            bias: params.add(format!("{name}.bias"), Mat::zeros((1, fan_out))),
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Var {
        let w = g.param(params, self.weight);
        let b = g.param(params, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Row-wise layer normalization with learned gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(params: &mut ParamSet, name: &str, width: usize) -> Self {
        Self {
            gain: params.add(format!("{name}.gain"), Mat::ones((1, width))),
            bias: params.add(format!("{name}.bias"), Mat::zeros((1, width))),
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Var {
        let n = g.layer_norm(x, Self::EPS);
        let gain = g.param(params, self.gain);
        let bias = g.param(params, self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// Stack of linear layers with ReLU between them (and optionally after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub final_relu: bool,
}

impl Mlp {
    pub fn new(params: &mut ParamSet, init: &mut Initializer, name: &str, input: usize, widths: &[usize], final_relu: bool) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input;
        for (i, &w) in widths.iter().enumerate() {
            let relu = i + 1 < widths.len() || final_relu;
            layers.push(Linear::new(params, init, &format!("{name}.{i}"), fan_in, w, relu));
            fan_in = w;
        }
        Self { layers, final_relu }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Var {
        let mut h = x;
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, params, h);
            if i + 1 < n || self.final_relu {
                h = g.relu(h);
            }
        }
        h
    }
}
