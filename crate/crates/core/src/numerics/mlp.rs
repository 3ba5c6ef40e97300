//! Dense feedforward stacks with per-sample backprop.
//!
//! The backward pass returns one flat gradient vector per sample (in the
//! stack's canonical parameter layout) rather than a batch-summed gradient.
//! Per-sample gradients are what DP-SGD clips; non-private paths use
//! [`MlpStack::backward_batch`] which accumulates the sum directly.
//!
//! Flat layout: for each layer in order, the weight matrix row-major
//! (`out x in`), then the bias. `flatten`/`set_from_flat` round-trip this.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::RngStream;
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative evaluated at the pre-activation. ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(pre);
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One dense layer: `act(x W^T + b)` with `weight` stored `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Gradients for one layer, shaped like the layer itself.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub d_weight: Matrix,
    pub d_bias: Vec<f64>,
}

/// Intermediates from a cached forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; index 0 is the stack input.
    inputs: Vec<Matrix>,
    /// Pre-activation values per layer.
    preacts: Vec<Matrix>,
    output: Matrix,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }
}

/// Result of a per-sample backward pass.
#[derive(Debug, Clone)]
pub struct BackwardResult {
    /// One flat parameter gradient per sample, in canonical layout.
    pub per_sample: Vec<Vec<f64>>,
    /// Gradient w.r.t. the stack input, one row per sample.
    pub input_grad: Matrix,
}

impl BackwardResult {
    /// Plain sum of the per-sample gradients.
    pub fn sum_flat(&self) -> Vec<f64> {
        let p = self.per_sample.first().map_or(0, Vec::len);
        let mut out = vec![0.0; p];
        for g in &self.per_sample {
            for (o, v) in out.iter_mut().zip(g) {
                *o += v;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpStack {
    pub layers: Vec<Layer>,
}

impl MlpStack {
    /// Glorot-uniform weights (`a = sqrt(6 / (fan_in + fan_out))`), zero
    /// biases. `sizes` has one more entry than `activations`.
    pub fn glorot(sizes: &[usize], activations: &[Activation], rng: &mut RngStream) -> Result<Self> {
        if sizes.len() != activations.len() + 1 {
            return Err(Error::Shape(format!(
                "mlp init: {} sizes requires {} activations, got {}",
                sizes.len(),
                sizes.len() - 1,
                activations.len()
            )));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Shape("mlp init: zero-width layer".into()));
        }
        let mut layers = Vec::with_capacity(activations.len());
        for (l, &act) in activations.iter().enumerate() {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut w = Matrix::zeros(fan_out, fan_in);
            for v in w.data_mut() {
                *v = (2.0 * rng.next_f64() - 1.0) * a;
            }
            layers.push(Layer { weight: w, bias: vec![0.0; fan_out], activation: act });
        }
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, Layer::in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.rows() * l.weight.cols() + l.bias.len()).sum()
    }

    /// Byte offset of each layer's weight block in the flat layout.
    fn offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offs.push(off);
            off += l.weight.rows() * l.weight.cols() + l.bias.len();
        }
        offs
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut cur = x.clone();
        for layer in &self.layers {
            let mut pre = cur.linear(&layer.weight, &layer.bias)?;
            for v in pre.data_mut() {
                *v = layer.activation.apply(*v);
            }
            cur = pre;
        }
        Ok(cur)
    }

    /// Forward pass that keeps per-layer inputs and pre-activations.
    pub fn forward_cached(&self, x: &Matrix) -> Result<ForwardCache> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let pre = cur.linear(&layer.weight, &layer.bias)?;
            inputs.push(cur);
            let mut act = pre.clone();
            for v in act.data_mut() {
                *v = layer.activation.apply(*v);
            }
            preacts.push(pre);
            cur = act;
        }
        Ok(ForwardCache { inputs, preacts, output: cur })
    }

    /// Per-sample backprop. `upstream` is `dL_i/d_output_i` row per sample;
    /// sample `i`'s flat gradient touches only row `i` of every delta, so the
    /// results are exactly the single-sample gradients.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<BackwardResult> {
        self.check_upstream(cache, upstream)?;
        let n = upstream.rows();
        let p = self.param_count();
        let offsets = self.offsets();
        let mut per_sample = vec![vec![0.0; p]; n];
        let mut cur = upstream.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let delta = self.layer_delta(&cur, &cache.preacts[l], layer);
            let input = &cache.inputs[l];
            let (out_dim, in_dim) = (layer.out_dim(), layer.in_dim());
            let w_off = offsets[l];
            let b_off = w_off + out_dim * in_dim;
            for i in 0..n {
                let g = &mut per_sample[i];
                let drow = delta.row(i);
                let xrow = input.row(i);
                for (j, &dj) in drow.iter().enumerate() {
                    if dj != 0.0 {
                        let w = &mut g[w_off + j * in_dim..w_off + (j + 1) * in_dim];
                        for (wv, &xv) in w.iter_mut().zip(xrow) {
                            *wv += dj * xv;
                        }
                    }
                    g[b_off + j] += dj;
                }
            }
            cur = delta.matmul(&layer.weight)?;
        }
        Ok(BackwardResult { per_sample, input_grad: cur })
    }

    /// Batch-summed backprop: returns `(sum_i grad_i, input_grad)` without
    /// materializing per-sample gradients. Equal to summing `backward`.
    pub fn backward_batch(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        self.check_upstream(cache, upstream)?;
        let n = upstream.rows();
        let offsets = self.offsets();
        let mut flat = vec![0.0; self.param_count()];
        let mut cur = upstream.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let delta = self.layer_delta(&cur, &cache.preacts[l], layer);
            let input = &cache.inputs[l];
            let (out_dim, in_dim) = (layer.out_dim(), layer.in_dim());
            let w_off = offsets[l];
            let b_off = w_off + out_dim * in_dim;
            for i in 0..n {
                let drow = delta.row(i);
                let xrow = input.row(i);
                for (j, &dj) in drow.iter().enumerate() {
                    if dj != 0.0 {
                        let w = &mut flat[w_off + j * in_dim..w_off + (j + 1) * in_dim];
                        for (wv, &xv) in w.iter_mut().zip(xrow) {
                            *wv += dj * xv;
                        }
                    }
                    flat[b_off + j] += dj;
                }
            }
            cur = delta.matmul(&layer.weight)?;
        }
        Ok((flat, cur))
    }

    fn check_upstream(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<()> {
        if cache.preacts.len() != self.layers.len() {
            return Err(Error::Shape("backward: cache from a different stack depth".into()));
        }
        if upstream.rows() != cache.output.rows() || upstream.cols() != cache.output.cols() {
            return Err(Error::Shape(format!(
                "backward: upstream {}x{} does not match output {}x{}",
                upstream.rows(),
                upstream.cols(),
                cache.output.rows(),
                cache.output.cols()
            )));
        }
        Ok(())
    }

    fn layer_delta(&self, upstream: &Matrix, pre: &Matrix, layer: &Layer) -> Matrix {
        let mut delta = upstream.clone();
        for (d, &p) in delta.data_mut().iter_mut().zip(pre.data()) {
            *d *= layer.activation.derivative(p);
        }
        delta
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.data());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "set_from_flat: expected {} params, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for layer in &mut self.layers {
            let wn = layer.weight.rows() * layer.weight.cols();
            layer.weight.data_mut().copy_from_slice(&flat[off..off + wn]);
            off += wn;
            let bn = layer.bias.len();
            layer.bias.copy_from_slice(&flat[off..off + bn]);
            off += bn;
        }
        Ok(())
    }

    /// View a flat gradient as per-layer blocks (for inspection/tests).
    pub fn unflatten_grad(&self, flat: &[f64]) -> Result<Vec<LayerGrad>> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "unflatten_grad: expected {} params, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for layer in &self.layers {
            let (r, c) = (layer.weight.rows(), layer.weight.cols());
            let d_weight = Matrix::from_vec(r, c, flat[off..off + r * c].to_vec())?;
            off += r * c;
            let d_bias = flat[off..off + layer.bias.len()].to_vec();
            off += layer.bias.len();
            out.push(LayerGrad { d_weight, d_bias });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{Purpose, StreamId};

    fn small_stack(seed: u64) -> MlpStack {
        let mut rng = RngStream::new(seed, StreamId::new(0, 0, Purpose::Init));
        MlpStack::glorot(&[4, 5, 3], &[Activation::Relu, Activation::Identity], &mut rng).unwrap()
    }

    #[test]
    fn param_count_formula() {
        let stack = small_stack(1);
        // 5*4+5 + 3*5+3 = 25 + 18 = 43
        assert_eq!(stack.param_count(), 43);
        assert_eq!(stack.flatten().len(), 43);
    }

    #[test]
    fn identity_layer_matches_linear() {
        let stack = MlpStack {
            layers: vec![Layer {
                weight: Matrix::from_vec(1, 2, vec![2.0, 3.0]).unwrap(),
                bias: vec![1.0],
                activation: Activation::Identity,
            }],
        };
        let x = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let y = stack.forward(&x).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn relu_clamps_and_sigmoid_centers() {
        assert_eq!(Activation::Relu.apply(-2.0), 0.0);
        assert_eq!(Activation::Relu.derivative(0.0), 0.0);
        assert!((Activation::Sigmoid.apply(0.0) - 0.5).abs() < 1e-15);
        assert!((Activation::Sigmoid.derivative(0.0) - 0.25).abs() < 1e-15);
        // Stable at large magnitudes.
        assert!(Activation::Sigmoid.apply(-800.0) >= 0.0);
        assert!(Activation::Sigmoid.apply(800.0) <= 1.0);
    }

    #[test]
    fn flatten_roundtrip() {
        let stack = small_stack(2);
        let flat = stack.flatten();
        let mut other = small_stack(3);
        other.set_from_flat(&flat).unwrap();
        assert_eq!(other, stack);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let stack = small_stack(4);
        let mut rng = RngStream::new(9, StreamId::new(0, 0, Purpose::Init));
        let x = crate::numerics::rng::gaussian_sample(&mut rng, 3, 4);
        let c = crate::numerics::rng::gaussian_sample(&mut rng, 3, 3);
        // Scalar loss L = sum_ij c_ij * out_ij, so upstream = c.
        let cache = stack.forward_cached(&x).unwrap();
        let grads = stack.backward(&cache, &c).unwrap();
        let analytic = grads.sum_flat();

        let flat = stack.flatten();
        let h = 1e-6;
        for k in (0..flat.len()).step_by(5) {
            let mut plus = stack.clone();
            let mut minus = stack.clone();
            let mut fp = flat.clone();
            fp[k] += h;
            plus.set_from_flat(&fp).unwrap();
            fp[k] -= 2.0 * h;
            minus.set_from_flat(&fp).unwrap();
            let lp: f64 =
                plus.forward(&x).unwrap().data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
            let lm: f64 =
                minus.forward(&x).unwrap().data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - analytic[k]).abs() <= 1e-5 * (1.0 + fd.abs()),
                "param {k}: fd {fd} vs analytic {}",
                analytic[k]
            );
        }
    }

    #[test]
    fn batch_backward_equals_per_sample_sum() {
        let stack = small_stack(5);
        let mut rng = RngStream::new(10, StreamId::new(0, 0, Purpose::Init));
        let x = crate::numerics::rng::gaussian_sample(&mut rng, 6, 4);
        let up = crate::numerics::rng::gaussian_sample(&mut rng, 6, 3);
        let cache = stack.forward_cached(&x).unwrap();
        let per = stack.backward(&cache, &up).unwrap();
        let (batch, input_grad) = stack.backward_batch(&cache, &up).unwrap();
        let summed = per.sum_flat();
        for (a, b) in summed.iter().zip(&batch) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(input_grad, per.input_grad);
    }

    #[test]
    fn glorot_bound_and_zero_bias() {
        let stack = small_stack(6);
        let a0 = (6.0_f64 / 9.0).sqrt();
        for v in stack.layers[0].weight.data() {
            assert!(v.abs() <= a0);
        }
        assert!(stack.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }
}
