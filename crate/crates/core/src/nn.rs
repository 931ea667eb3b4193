//! Dense feed-forward classifiers with analytic backpropagation and Adam.
//!
//! Parameters live in one flat buffer. The layout, which is also the layout of
//! [`ParamVector`] and of checkpoint blobs, is layer by layer: for layer `l`
//! with `fan_in = dims[l]` and `fan_out = dims[l + 1]`, first the weight
//! matrix in row-major order (`fan_out` rows of `fan_in` entries, so entry
//! `(o, i)` sits at `o * fan_in + i`), then the `fan_out` biases. Hidden
//! layers use ReLU; the output layer is linear and yields logits.

use std::io::{Read, Write};

use rand::Rng as _;

use crate::error::{check_len, Error, Result};
use crate::rng::Rng;

/// A flat parameter (or gradient) vector in [`DenseNet`] layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Byte length of the serialized blob: an 8-byte header plus 8 bytes per value.
    pub fn encoded_len(&self) -> usize {
        8 + 8 * self.0.len()
    }

    /// Little-endian blob: `u64` value count, then each value as an IEEE-754 `f64`.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&(self.0.len() as u64).to_le_bytes());
        for v in &self.0 {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::ParamBlob(format!(
                "blob of {} bytes has no length header",
                bytes.len()
            )));
        }
        let (head, body) = bytes.split_at(8);
        let count = u64::from_le_bytes(head.try_into().expect("8-byte header")) as usize;
        if body.len() != count.saturating_mul(8) {
            return Err(Error::ParamBlob(format!(
                "header declares {count} values but body holds {} bytes",
                body.len()
            )));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(ParamVector(values))
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_le_bytes())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)
            .map_err(|e| Error::ParamBlob(e.to_string()))?;
        Self::from_le_bytes(&buf)
    }
}

/// Number of parameters of a dense net with the given layer dimensions.
pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::InvalidDims(dims.to_vec()));
    }
    Ok(())
}

/// A ReLU multilayer perceptron producing class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    dims: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded during a forward pass, consumed by [`DenseNet::backward_into`].
#[derive(Debug, Clone)]
pub struct Trace {
    // activations[0] is the input; activations[l] is the post-ReLU output of layer l-1,
    // except the last entry which holds the raw logits.
    activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn logits(&self) -> &[f64] {
        self.activations.last().expect("trace has an output layer")
    }
}

impl DenseNet {
    /// Seeded Glorot-uniform weights, zero biases.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = Rng::seed_from_u64(seed);
        Self::init_with(dims, &mut rng)
    }

    pub fn init_with(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        validate_dims(dims)?;
        let mut params = Vec::with_capacity(param_count(dims));
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(DenseNet {
            dims: dims.to_vec(),
            params,
        })
    }

    /// A network with every parameter set to zero.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        validate_dims(dims)?;
        Ok(DenseNet {
            dims: dims.to_vec(),
            params: vec![0.0; param_count(dims)],
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn class_count(&self) -> usize {
        *self.dims.last().expect("validated dims")
    }

    pub fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn layer_offset(&self, layer: usize) -> usize {
        param_count(&self.dims[..=layer])
    }

    /// Row-major `fan_out x fan_in` weights of `layer`.
    pub fn weights(&self, layer: usize) -> &[f64] {
        let off = self.layer_offset(layer);
        &self.params[off..off + self.dims[layer] * self.dims[layer + 1]]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        let off = self.layer_offset(layer) + self.dims[layer] * self.dims[layer + 1];
        &self.params[off..off + self.dims[layer + 1]]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let off = self.layer_offset(layer);
        let len = self.dims[layer] * self.dims[layer + 1];
        &mut self.params[off..off + len]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        let off = self.layer_offset(layer) + self.dims[layer] * self.dims[layer + 1];
        let len = self.dims[layer + 1];
        &mut self.params[off..off + len]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn flatten(&self) -> ParamVector {
        ParamVector(self.params.clone())
    }

    /// Rebuild a network of shape `dims` from a flat vector.
    pub fn unflatten(dims: &[usize], params: &ParamVector) -> Result<Self> {
        validate_dims(dims)?;
        check_len("parameter vector", param_count(dims), params.len())?;
        Ok(DenseNet {
            dims: dims.to_vec(),
            params: params.0.clone(),
        })
    }

    /// Overwrite this network's parameters in place.
    pub fn load(&mut self, params: &ParamVector) -> Result<()> {
        check_len("parameter vector", self.params.len(), params.len())?;
        self.params.copy_from_slice(&params.0);
        Ok(())
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        check_len("network input", self.input_dim(), x.len())?;
        let layers = self.layer_count();
        let mut activations = Vec::with_capacity(layers + 1);
        activations.push(x.to_vec());
        for l in 0..layers {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let w = self.weights(l);
            let b = self.biases(l);
            let input = &activations[l];
            let mut out = b.to_vec();
            for (o, acc) in out.iter_mut().enumerate() {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                *acc += row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
            }
            if l + 1 < layers {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            debug_assert_eq!(out.len(), fan_out);
            activations.push(out);
        }
        Ok(Trace { activations })
    }

    pub fn forward_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut trace = self.forward_trace(x)?;
        Ok(trace.activations.pop().expect("output layer"))
    }

    /// Gradient of a loss with respect to all parameters, given `dloss/dlogits` at input `x`.
    pub fn backward(&self, x: &[f64], dlogits: &[f64]) -> Result<ParamVector> {
        let trace = self.forward_trace(x)?;
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(&trace, dlogits, 1.0, &mut grad)?;
        Ok(ParamVector(grad))
    }

    /// Accumulate `scale * dloss/dparams` into `grad` using a recorded forward pass.
    pub fn backward_into(
        &self,
        trace: &Trace,
        dlogits: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        check_len("logit gradient", self.class_count(), dlogits.len())?;
        check_len("gradient buffer", self.params.len(), grad.len())?;
        let mut delta: Vec<f64> = dlogits.iter().map(|d| d * scale).collect();
        for l in (0..self.layer_count()).rev() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let off = self.layer_offset(l);
            let input = &trace.activations[l];
            let (gw, rest) = grad[off..].split_at_mut(fan_in * fan_out);
            let gb = &mut rest[..fan_out];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                for (g, a) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if l == 0 {
                break;
            }
            let w = self.weights(l);
            let mut prev = vec![0.0; fan_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (p, wv) in prev.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *p += wv * d;
                }
            }
            // ReLU derivative: the stored activation is zero exactly where the unit was off.
            for (p, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
        Ok(())
    }
}

/// Adam optimizer state for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_net(net: &DenseNet) -> Self {
        Self::new(net.param_count())
    }
}

/// One bias-corrected Adam update, applied in flattening order.
pub fn adam_step(net: &mut DenseNet, grad: &ParamVector, state: &mut AdamState, lr: f64) -> Result<()> {
    check_len("gradient", net.param_count(), grad.len())?;
    check_len("adam moments", net.param_count(), state.m.len())?;
    if grad.0.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (((p, g), m), v) in net
        .params
        .iter_mut()
        .zip(&grad.0)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}
