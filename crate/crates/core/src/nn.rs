//! Small network building blocks recorded on a [`Tape`].

use crate::numerics::{NodeId, Result, Tape, Tensor};
use crate::rng::{self, Rng};

/// Access to a model's trainable tensors in a fixed order.
pub trait Params {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Push every parameter onto `tape` as a leaf, in [`params`](Self::params) order.
    fn bind(&self, tape: &mut Tape) -> Result<Vec<NodeId>> {
        self.params().into_iter().map(|p| tape.leaf(p.clone())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    LeakyRelu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Identity => Ok(x),
            Activation::LeakyRelu => tape.leaky_relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[1, out]`
    pub bias: Tensor,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let a = (6.0 / (inputs + outputs) as f64).sqrt();
        Self::init_scaled(inputs, outputs, a, rng)
    }

    pub fn init_scaled(inputs: usize, outputs: usize, limit: f64, rng: &mut Rng) -> Self {
        let w = rng::uniform_vec(rng, inputs * outputs, -limit, limit);
        Self {
            weight: Tensor::matrix(inputs, outputs, w).expect("sized"),
            bias: Tensor::zeros(&[1, outputs]),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: Tensor::zeros(&[inputs, outputs]), bias: Tensor::zeros(&[1, outputs]) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Multilayer perceptron with one hidden activation and one output activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    /// `widths` lists every layer width including input and output.
    pub fn init(widths: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Self {
        let layers = widths.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Self { layers, hidden, output }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].inputs()];
        w.extend(self.layers.iter().map(Linear::outputs));
        w
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, Linear::outputs)
    }

    /// Forward pass using parameter nodes from [`Params::bind`].
    pub fn forward(&self, tape: &mut Tape, ids: &[NodeId], x: NodeId) -> Result<NodeId> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, pair) in ids.chunks(2).enumerate() {
            h = tape.linear(h, pair[0], pair[1])?;
            let act = if i == last { self.output } else { self.hidden };
            h = act.apply(tape, h)?;
        }
        Ok(h)
    }

    /// Forward pass on a throwaway tape; `x` is `[batch, in]`.
    pub fn eval(&self, x: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let ids = self.bind(&mut tape)?;
        let xi = tape.leaf(x)?;
        let out = self.forward(&mut tape, &ids, xi)?;
        Ok(tape.value(out).clone())
    }
}

impl Params for Mlp {
    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }
}

/// Single LSTM cell; gates are packed as `[input, forget, candidate, output]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    /// `[input + hidden, 4·hidden]`
    pub weight: Tensor,
    /// `[1, 4·hidden]`
    pub bias: Tensor,
    pub hidden: usize,
}

impl LstmCell {
    pub fn init(inputs: usize, hidden: usize, rng: &mut Rng) -> Self {
        let a = (1.0 / hidden as f64).sqrt();
        let w = rng::uniform_vec(rng, (inputs + hidden) * 4 * hidden, -a, a);
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        Self {
            weight: Tensor::matrix(inputs + hidden, 4 * hidden, w).expect("sized"),
            bias: Tensor::row(&b),
            hidden,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0] - self.hidden
    }

    /// One step; returns the new `(h, c)`.
    pub fn step(&self, tape: &mut Tape, ids: &[NodeId], x: NodeId, h: NodeId, c: NodeId) -> Result<(NodeId, NodeId)> {
        let hs = self.hidden;
        let xh = tape.concat_cols(&[x, h])?;
        let gates = tape.linear(xh, ids[0], ids[1])?;
        let i = tape.slice_cols(gates, 0, hs)?;
        let f = tape.slice_cols(gates, hs, hs)?;
        let g = tape.slice_cols(gates, 2 * hs, hs)?;
        let o = tape.slice_cols(gates, 3 * hs, hs)?;
        let i = tape.sigmoid(i)?;
        let f = tape.sigmoid(f)?;
        let g = tape.tanh(g)?;
        let o = tape.sigmoid(o)?;
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_new = tape.add(fc, ig)?;
        let tc = tape.tanh(c_new)?;
        let h_new = tape.mul(o, tc)?;
        Ok((h_new, c_new))
    }
}

impl Params for LstmCell {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Square-kernel "same" convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    /// `[out, in·k·k]`
    pub weight: Tensor,
    /// `[out, 1]`
    pub bias: Tensor,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    /// He-uniform weights, zero bias.
    pub fn init(inputs: usize, outputs: usize, kernel: usize, stride: usize, rng: &mut Rng) -> Self {
        let fan_in = inputs * kernel * kernel;
        let a = (6.0 / fan_in as f64).sqrt();
        let w = rng::uniform_vec(rng, outputs * fan_in, -a, a);
        Self {
            weight: Tensor::matrix(outputs, fan_in, w).expect("sized"),
            bias: Tensor::zeros(&[outputs, 1]),
            kernel,
            stride,
        }
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1] / (self.kernel * self.kernel)
    }

    pub fn forward(&self, tape: &mut Tape, ids: &[NodeId], x: NodeId) -> Result<NodeId> {
        tape.conv2d(x, ids[0], ids[1], self.kernel, self.stride)
    }
}

impl Params for Conv {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Overwrite `dst`'s parameters with a flat list of tensors of matching shapes.
pub fn load_params<P: Params + ?Sized>(dst: &mut P, src: Vec<Tensor>) -> std::result::Result<(), String> {
    let slots = dst.params_mut();
    if slots.len() != src.len() {
        return Err(format!("expected {} tensors, found {}", slots.len(), src.len()));
    }
    for (i, (slot, t)) in slots.into_iter().zip(src).enumerate() {
        if slot.shape() != t.shape() {
            return Err(format!("tensor {i}: expected shape {:?}, found {:?}", slot.shape(), t.shape()));
        }
        *slot = t;
    }
    Ok(())
}

/// Sum per-sample gradient lists elementwise.
pub fn accumulate_grads(acc: &mut Option<Vec<Tensor>>, grads: Vec<Tensor>) {
    match acc {
        Some(a) => {
            for (x, g) in a.iter_mut().zip(&grads) {
                x.add_assign(g);
            }
        }
        None => *acc = Some(grads),
    }
}
