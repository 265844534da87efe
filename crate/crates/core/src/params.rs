//! Named parameter collections and the two leaf layers (linear, layer norm).
//!
//! Gradients reuse the parameter types: the reverse pass of a layer returns a
//! value of the same struct, so flattening both through [`Params`] yields
//! aligned lists for the optimiser and the checkpoint writer.

use crate::error::Result;
use crate::tensor::{layer_norm, layer_norm_backward, LayerNormCache, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable, subject to weight decay.
    Weight,
    /// Trainable, no weight decay (biases, norms, tokens).
    NoDecay,
    /// Stored but never trained (fixed random features).
    Buffer,
}

pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn named_tensors<P: Params + ?Sized>(p: &P) -> Vec<(String, &Tensor, ParamKind)> {
    let mut out = Vec::new();
    p.visit("", &mut |n, t, k| out.push((n, t, k)));
    out
}

pub fn zeros_like<P: Params + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.visit_mut("", &mut |_, t, _| t.fill(0.0));
    z
}

/// `dst += src`, tensor by tensor.
pub fn accumulate<P: Params>(dst: &mut P, src: &P) {
    let srcs: Vec<&Tensor> = named_tensors(src).into_iter().map(|(_, t, _)| t).collect();
    let mut i = 0;
    dst.visit_mut("", &mut |_, t, _| {
        t.add_assign(srcs[i]).expect("aligned parameter shapes");
        i += 1;
    });
}

pub fn scale_all<P: Params>(p: &mut P, s: f64) {
    p.visit_mut("", &mut |_, t, _| {
        t.data_mut().iter_mut().for_each(|v| *v *= s);
    });
}

pub fn param_count<P: Params>(p: &P) -> usize {
    named_tensors(p)
        .iter()
        .filter(|(_, _, k)| *k != ParamKind::Buffer)
        .map(|(_, t, _)| t.len())
        .sum()
}

/// `y = x · W + b` with `W: in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn xavier(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        Self {
            weight: Tensor::rand_uniform(&[input, output], bound, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            weight: Tensor::eye(n),
            bias: Tensor::zeros(&[n]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(&self.weight)?;
        y.add_row_vector(&self.bias)?;
        Ok(y)
    }

    /// Returns `(dx, grads)` given the forward input `x`.
    pub fn backward(&self, x: &Tensor, dy: &Tensor) -> Result<(Tensor, Linear)> {
        let dx = dy.matmul_nt(&self.weight)?;
        let grads = Linear {
            weight: x.matmul_tn(dy)?,
            bias: dy.sum_rows(),
        };
        Ok((dx, grads))
    }
}

impl Params for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        f(join(prefix, "weight"), &self.weight, ParamKind::Weight);
        f(join(prefix, "bias"), &self.bias, ParamKind::NoDecay);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        f(join(prefix, "weight"), &mut self.weight, ParamKind::Weight);
        f(join(prefix, "bias"), &mut self.bias, ParamKind::NoDecay);
    }
}

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::full(&[dim], 1.0),
            beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        layer_norm(x, &self.gamma, &self.beta, LN_EPS)
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Tensor) -> (Tensor, LayerNorm) {
        let (dx, gamma, beta) = layer_norm_backward(cache, &self.gamma, dy);
        (dx, LayerNorm { gamma, beta })
    }
}

impl Params for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        f(join(prefix, "gamma"), &self.gamma, ParamKind::NoDecay);
        f(join(prefix, "beta"), &self.beta, ParamKind::NoDecay);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        f(join(prefix, "gamma"), &mut self.gamma, ParamKind::NoDecay);
        f(join(prefix, "beta"), &mut self.beta, ParamKind::NoDecay);
    }
}
