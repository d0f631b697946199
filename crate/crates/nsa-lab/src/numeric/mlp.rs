use serde::{Deserialize, Serialize};

use super::{dot, sigmoid, silu, silu_derivative, Matrix, SeededRng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Silu,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Silu => silu(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Silu => silu_derivative(x),
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

/// Affine map y = Wx + b with W stored out_dim x in_dim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl Affine {
    pub fn new(w: Matrix, b: Vec<f64>) -> Result<Self> {
        if w.rows() != b.len() {
            return Err(Error::Shape(format!(
                "affine: W has {} rows but bias has {} entries",
                w.rows(),
                b.len()
            )));
        }
        Ok(Affine { w, b })
    }

    pub fn init(out_dim: usize, in_dim: usize, rng: &mut SeededRng) -> Self {
        Affine {
            w: rng.init_matrix(out_dim, in_dim, in_dim),
            b: rng.init_vector(out_dim, in_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Affine {
            w: Matrix::zeros(self.w.rows(), self.w.cols()),
            b: vec![0.0; self.b.len()],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.w.cols() {
            return Err(Error::Shape(format!(
                "affine: expected input of length {}, got {}",
                self.w.cols(),
                x.len()
            )));
        }
        Ok((0..self.w.rows())
            .map(|r| dot(self.w.row(r), x) + self.b[r])
            .collect())
    }

    /// Accumulates parameter gradients for upstream `d_y` at input `x` and
    /// returns the gradient w.r.t. `x`.
    pub fn backward(&self, x: &[f64], d_y: &[f64], grads: &mut Affine) -> Vec<f64> {
        let mut d_x = vec![0.0; x.len()];
        for r in 0..self.w.rows() {
            let g = d_y[r];
            grads.b[r] += g;
            let grow = grads.w.row_mut(r);
            for (c, (&xc, gw)) in x.iter().zip(grow.iter_mut()).enumerate() {
                *gw += g * xc;
                d_x[c] += g * self.w.get(r, c);
            }
        }
        d_x
    }

    pub fn add_scaled(&mut self, other: &Affine, s: f64) {
        for (a, &b) in self.w.data_mut().iter_mut().zip(other.w.data()) {
            *a += s * b;
        }
        for (a, &b) in self.b.iter_mut().zip(&other.b) {
            *a += s * b;
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.data().len() + self.b.len()
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.w.data());
        out.extend_from_slice(&self.b);
    }

    pub fn read_flat(&mut self, src: &[f64], pos: &mut usize) {
        let n = self.w.data().len();
        self.w.data_mut().copy_from_slice(&src[*pos..*pos + n]);
        *pos += n;
        let m = self.b.len();
        self.b.copy_from_slice(&src[*pos..*pos + m]);
        *pos += m;
    }
}

/// Forward cache for [`Mlp::forward_cached`]: layer inputs and
/// pre-activation values, needed by the backward pass.
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    preacts: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

/// Stack of affine layers with a fixed hidden activation and an optional
/// activation after the last layer (sigmoid for gate heads, none for
/// compression heads).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Affine>,
    pub hidden_act: Activation,
    pub final_act: Activation,
}

impl Mlp {
    pub fn new(layers: Vec<Affine>, hidden_act: Activation, final_act: Activation) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "mlp: layer output {} does not chain into input {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Mlp { layers, hidden_act, final_act })
    }

    /// Two-layer net in_dim -> hidden -> out_dim.
    pub fn init_two_layer(
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        final_act: Activation,
        rng: &mut SeededRng,
    ) -> Self {
        Mlp {
            layers: vec![Affine::init(hidden, in_dim, rng), Affine::init(out_dim, hidden, rng)],
            hidden_act: Activation::Silu,
            final_act,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty mlp").out_dim()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.output)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<MlpCache> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(cur.clone());
            let pre = layer.apply(&cur)?;
            let act = if i == last { self.final_act } else { self.hidden_act };
            cur = pre.iter().map(|&v| act.apply(v)).collect();
            preacts.push(pre);
        }
        Ok(MlpCache { inputs, preacts, output: cur })
    }

    /// Accumulates parameter gradients into `grads` and returns the
    /// gradient w.r.t. the input.
    pub fn backward(&self, cache: &MlpCache, d_out: &[f64], grads: &mut Mlp) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut d_cur = d_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let act = if i == last { self.final_act } else { self.hidden_act };
            let d_pre: Vec<f64> = cache.preacts[i]
                .iter()
                .zip(&d_cur)
                .map(|(&pre, &d)| d * act.derivative(pre))
                .collect();
            d_cur = self.layers[i].backward(&cache.inputs[i], &d_pre, &mut grads.layers[i]);
        }
        d_cur
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self.layers.iter().map(|l| l.zeros_like()).collect(),
            hidden_act: self.hidden_act,
            final_act: self.final_act,
        }
    }

    pub fn add_scaled(&mut self, other: &Mlp, s: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_scaled(b, s);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            l.write_flat(out);
        }
    }

    pub fn read_flat(&mut self, src: &[f64], pos: &mut usize) {
        for l in &mut self.layers {
            l.read_flat(src, pos);
        }
    }
}
