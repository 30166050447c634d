//! Fully connected ReLU networks with exact reverse-mode gradients.
//!
//! Parameter layout (flat vector), layer by layer: the weight block
//! `W[in × out]` stored row-major by input index (`W[i * out + o]` connects
//! input `i` to output `o`), followed by the bias `b[out]`.
//!
//! Inputs are split into a leading block that goes through the positional
//! encoding and a trailing block appended unchanged. A skip connection at
//! hidden layer `s` concatenates the encoded features after the activation of
//! the `s`-th hidden layer, in the order `[activation, features]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode_backward, encode_into, encoding_width};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Leading inputs passed through the positional encoding.
    pub encoded_inputs: usize,
    /// Trailing inputs appended without encoding.
    pub raw_inputs: usize,
    /// Encoding degree; 0 feeds the encoded block through unchanged.
    pub encoding_degree: usize,
    /// Hidden layer widths, each followed by ReLU.
    pub hidden: Vec<usize>,
    pub output: usize,
    /// 1-based hidden layer indices after which the features are re-injected.
    #[serde(default)]
    pub skips: Vec<usize>,
}

impl MlpSpec {
    pub fn input_dim(&self) -> usize {
        self.encoded_inputs + self.raw_inputs
    }

    pub fn feature_dim(&self) -> usize {
        let enc = if self.encoding_degree == 0 {
            self.encoded_inputs
        } else {
            self.encoded_inputs * encoding_width(self.encoding_degree)
        };
        enc + self.raw_inputs
    }

    /// Number of linear layers, output layer included.
    pub fn layer_count(&self) -> usize {
        self.hidden.len() + 1
    }

    /// `(fan_in, fan_out)` of each linear layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let feat = self.feature_dim();
        let mut shapes = Vec::with_capacity(self.layer_count());
        let mut prev = feat;
        for (l, &w) in self.hidden.iter().enumerate() {
            shapes.push((prev, w));
            prev = w + if self.skips.contains(&(l + 1)) { feat } else { 0 };
        }
        shapes.push((prev, self.output));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim() == 0 {
            return Err(Error::Config("network has no inputs".into()));
        }
        if self.hidden.is_empty() {
            return Err(Error::Config("network needs at least one hidden layer".into()));
        }
        if self.output == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        for &s in &self.skips {
            if s == 0 || s >= self.layer_count() {
                return Err(Error::Config(format!(
                    "skip index {s} outside 1..{}",
                    self.layer_count()
                )));
            }
        }
        Ok(())
    }

    fn has_skip_after(&self, hidden_layer: usize) -> bool {
        self.skips.contains(&hidden_layer)
    }
}

/// A network: its spec plus the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub spec: MlpSpec,
    pub params: Vec<T>,
}

/// Intermediate values kept by a batched forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpTape<T> {
    batch: usize,
    inputs: Vec<T>,
    /// Input matrix of every linear layer, `batch × fan_in`.
    layer_inputs: Vec<Vec<T>>,
}

impl<T: Scalar> Mlp<T> {
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let params = vec![T::zero(); spec.param_count()];
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: MlpSpec, params: Vec<T>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::shape("mlp parameters", spec.param_count(), params.len()));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput("non-finite network parameter".into()));
        }
        Ok(Self { spec, params })
    }

    /// Glorot-uniform weights, zero biases. With `zero_output` the last layer
    /// starts at zero so the network initially outputs zeros.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R, zero_output: bool) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let shapes = net.spec.layer_shapes();
        let last = shapes.len() - 1;
        let mut off = 0;
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let n = fan_in * fan_out;
            if !(zero_output && l == last) {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for w in &mut net.params[off..off + n] {
                    *w = T::lit(rng.random_range(-a..a));
                }
            }
            off += n + fan_out;
        }
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        Ok(self.forward_batch(input, 1)?.0)
    }

    /// Forward pass over `batch` rows of `input` (row-major, `batch × input_dim`).
    pub fn forward_batch(&self, input: &[T], batch: usize) -> Result<(Vec<T>, MlpTape<T>)> {
        let in_dim = self.input_dim();
        if input.len() != batch * in_dim {
            return Err(Error::shape("mlp input", batch * in_dim, input.len()));
        }
        let spec = &self.spec;
        let feat_dim = spec.feature_dim();
        let features = self.encode(input, batch);
        let shapes = spec.layer_shapes();
        let mut layer_inputs: Vec<Vec<T>> = Vec::with_capacity(shapes.len());
        let mut current = features.clone();
        let mut off = 0;
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let w = &self.params[off..off + fan_in * fan_out];
            let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            let is_hidden = l + 1 < shapes.len();
            let skip = is_hidden && spec.has_skip_after(l + 1);
            let width = fan_out + if skip { feat_dim } else { 0 };
            let mut out = vec![T::zero(); batch * width];
            for r in 0..batch {
                let x = &current[r * fan_in..(r + 1) * fan_in];
                let y = &mut out[r * width..r * width + fan_out];
                y.copy_from_slice(b);
                for (i, &xi) in x.iter().enumerate() {
                    if xi == T::zero() {
                        continue;
                    }
                    let row = &w[i * fan_out..(i + 1) * fan_out];
                    for (yo, &wo) in y.iter_mut().zip(row) {
                        *yo += xi * wo;
                    }
                }
                if is_hidden {
                    for v in y.iter_mut() {
                        if *v < T::zero() {
                            *v = T::zero();
                        }
                    }
                }
                if skip {
                    out[r * width + fan_out..(r + 1) * width]
                        .copy_from_slice(&features[r * feat_dim..(r + 1) * feat_dim]);
                }
            }
            layer_inputs.push(std::mem::replace(&mut current, out));
        }
        let tape = MlpTape {
            batch,
            inputs: input.to_vec(),
            layer_inputs,
        };
        Ok((current, tape))
    }

    fn encode(&self, input: &[T], batch: usize) -> Vec<T> {
        let spec = &self.spec;
        let in_dim = spec.input_dim();
        let feat_dim = spec.feature_dim();
        let enc_len = feat_dim - spec.raw_inputs;
        let mut features = vec![T::zero(); batch * feat_dim];
        for r in 0..batch {
            let x = &input[r * in_dim..(r + 1) * in_dim];
            let f = &mut features[r * feat_dim..(r + 1) * feat_dim];
            let (enc_x, raw_x) = x.split_at(spec.encoded_inputs);
            if spec.encoding_degree == 0 {
                f[..enc_len].copy_from_slice(enc_x);
            } else {
                encode_into(enc_x, spec.encoding_degree, &mut f[..enc_len]);
            }
            f[enc_len..].copy_from_slice(raw_x);
        }
        features
    }

    /// Reverse pass for `upstream` (`batch × output`). Parameter gradients are
    /// accumulated into `param_grad`; returns input gradients when requested.
    pub fn backward_batch(
        &self,
        tape: &MlpTape<T>,
        upstream: &[T],
        param_grad: &mut [T],
        want_input_grad: bool,
    ) -> Result<Option<Vec<T>>> {
        let batch = tape.batch;
        let spec = &self.spec;
        if upstream.len() != batch * spec.output {
            return Err(Error::shape("mlp upstream gradient", batch * spec.output, upstream.len()));
        }
        if param_grad.len() != self.params.len() {
            return Err(Error::shape("mlp parameter gradient", self.params.len(), param_grad.len()));
        }
        let feat_dim = spec.feature_dim();
        let shapes = spec.layer_shapes();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for &(i, o) in &shapes {
            offsets.push(off);
            off += i * o + o;
        }
        let mut feature_grad = if want_input_grad {
            vec![T::zero(); batch * feat_dim]
        } else {
            Vec::new()
        };
        let mut grad_out = upstream.to_vec();
        for l in (0..shapes.len()).rev() {
            let (fan_in, fan_out) = shapes[l];
            let off = offsets[l];
            let x = &tape.layer_inputs[l];
            let w = &self.params[off..off + fan_in * fan_out];
            {
                let (gw, gb) = param_grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                for r in 0..batch {
                    let g = &grad_out[r * fan_out..(r + 1) * fan_out];
                    for (b, &gv) in gb.iter_mut().zip(g) {
                        *b += gv;
                    }
                    let xr = &x[r * fan_in..(r + 1) * fan_in];
                    for (i, &xi) in xr.iter().enumerate() {
                        if xi == T::zero() {
                            continue;
                        }
                        for (gwv, &gv) in gw[i * fan_out..(i + 1) * fan_out].iter_mut().zip(g) {
                            *gwv += xi * gv;
                        }
                    }
                }
            }
            if l == 0 && !want_input_grad {
                break;
            }
            // gradient w.r.t. this layer's input
            let mut grad_in = vec![T::zero(); batch * fan_in];
            for r in 0..batch {
                let g = &grad_out[r * fan_out..(r + 1) * fan_out];
                let gi = &mut grad_in[r * fan_in..(r + 1) * fan_in];
                let xr = &x[r * fan_in..(r + 1) * fan_in];
                for i in 0..fan_in {
                    // ReLU mask of the previous layer is applied below; inputs
                    // that are exactly zero after ReLU receive no gradient there.
                    if l > 0 && i < shapes[l - 1].1 && xr[i] <= T::zero() {
                        continue;
                    }
                    gi[i] = dot(&w[i * fan_out..(i + 1) * fan_out], g);
                }
            }
            if l == 0 {
                for (fg, gi) in feature_grad.iter_mut().zip(&grad_in) {
                    *fg += *gi;
                }
                break;
            }
            let prev_out = shapes[l - 1].1;
            let skip = spec.has_skip_after(l);
            let mut next = vec![T::zero(); batch * prev_out];
            for r in 0..batch {
                let gi = &grad_in[r * fan_in..(r + 1) * fan_in];
                next[r * prev_out..(r + 1) * prev_out].copy_from_slice(&gi[..prev_out]);
                if skip && want_input_grad {
                    for (fg, &v) in feature_grad[r * feat_dim..(r + 1) * feat_dim]
                        .iter_mut()
                        .zip(&gi[prev_out..])
                    {
                        *fg += v;
                    }
                }
            }
            grad_out = next;
        }
        if !want_input_grad {
            return Ok(None);
        }
        let in_dim = spec.input_dim();
        let enc_len = feat_dim - spec.raw_inputs;
        let mut input_grad = vec![T::zero(); batch * in_dim];
        for r in 0..batch {
            let x = &tape.inputs[r * in_dim..(r + 1) * in_dim];
            let fg = &feature_grad[r * feat_dim..(r + 1) * feat_dim];
            let ig = &mut input_grad[r * in_dim..(r + 1) * in_dim];
            let (ig_enc, ig_raw) = ig.split_at_mut(spec.encoded_inputs);
            if spec.encoding_degree == 0 {
                ig_enc.copy_from_slice(&fg[..enc_len]);
            } else {
                encode_backward(&x[..spec.encoded_inputs], spec.encoding_degree, &fg[..enc_len], ig_enc);
            }
            ig_raw.copy_from_slice(&fg[enc_len..]);
        }
        Ok(Some(input_grad))
    }

    /// Single-sample gradient of `upstream · output` w.r.t. parameters and input.
    pub fn gradient(&self, input: &[T], upstream: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let (_, tape) = self.forward_batch(input, 1)?;
        let mut pg = vec![T::zero(); self.params.len()];
        let ig = self
            .backward_batch(&tape, upstream, &mut pg, true)?
            .expect("input gradient requested");
        Ok((pg, ig))
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Forward pass of `spec` with `params` on a single input.
pub fn mlp_forward<T: Scalar>(spec: &MlpSpec, params: &[T], input: &[T]) -> Result<Vec<T>> {
    Mlp::from_params(spec.clone(), params.to_vec())?.forward(input)
}

/// Exact gradients of `upstream · mlp(input)` w.r.t. parameters and input.
pub fn mlp_gradient<T: Scalar>(
    spec: &MlpSpec,
    params: &[T],
    input: &[T],
    upstream: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    Mlp::from_params(spec.clone(), params.to_vec())?.gradient(input, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::positional_encoding;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straightforward matrix-vector reference implementation.
    fn naive_forward(spec: &MlpSpec, params: &[f64], input: &[f64]) -> Vec<f64> {
        let (enc, raw) = input.split_at(spec.encoded_inputs);
        let mut feat = if spec.encoding_degree == 0 {
            enc.to_vec()
        } else {
            positional_encoding(enc, spec.encoding_degree)
        };
        feat.extend_from_slice(raw);
        let mut h = feat.clone();
        let mut off = 0;
        let n_layers = spec.hidden.len() + 1;
        for l in 0..n_layers {
            let fan_in = h.len();
            let fan_out = if l < spec.hidden.len() { spec.hidden[l] } else { spec.output };
            let mut y = vec![0.0; fan_out];
            for o in 0..fan_out {
                let mut s = params[off + fan_in * fan_out + o];
                for i in 0..fan_in {
                    s += h[i] * params[off + i * fan_out + o];
                }
                y[o] = if l + 1 < n_layers { s.max(0.0) } else { s };
            }
            off += fan_in * fan_out + fan_out;
            if l < spec.hidden.len() && spec.skips.contains(&(l + 1)) {
                y.extend_from_slice(&feat);
            }
            h = y;
        }
        h
    }

    fn spec() -> MlpSpec {
        MlpSpec {
            encoded_inputs: 2,
            raw_inputs: 3,
            encoding_degree: 3,
            hidden: vec![9, 7, 8],
            output: 4,
            skips: vec![2],
        }
    }

    #[test]
    fn zero_params_give_zero_output() {
        let net = Mlp::<f64>::zeros(spec()).unwrap();
        let y = net.forward(&[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        assert_eq!(y, vec![0.0; 4]);
    }

    #[test]
    fn identity_like_single_hidden_layer() {
        // one hidden layer of identity weights followed by an identity output
        // reproduces the (non-negative) encoded input
        let s = MlpSpec {
            encoded_inputs: 1,
            raw_inputs: 0,
            encoding_degree: 2,
            hidden: vec![5],
            output: 5,
            skips: vec![],
        };
        let mut p = vec![0.0; s.param_count()];
        for i in 0..5 {
            p[i * 5 + i] = 1.0;
            p[30 + i * 5 + i] = 1.0;
        }
        let x = 0.4f64;
        let y = mlp_forward(&s, &p, &[x]).unwrap();
        let e = positional_encoding(&[x], 2);
        for (a, b) in y.iter().zip(&e) {
            assert!((a - b.max(0.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_gradient_is_outer_product() {
        let s = MlpSpec {
            encoded_inputs: 0,
            raw_inputs: 3,
            encoding_degree: 0,
            hidden: vec![2],
            output: 2,
            skips: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::<f64>::init(s, &mut rng, false).unwrap();
        let x = [0.5, -0.2, 0.9];
        let (_, tape) = net.forward_batch(&x, 1).unwrap();
        let up = [1.5, -0.5];
        let mut pg = vec![0.0; net.params.len()];
        net.backward_batch(&tape, &up, &mut pg, false).unwrap();
        // output layer: dW[i][o] = h_i * up_o, db = up
        let h = &tape.layer_inputs[1];
        let off = 3 * 2 + 2;
        for i in 0..2 {
            for o in 0..2 {
                assert!((pg[off + i * 2 + o] - h[i] * up[o]).abs() < 1e-15);
            }
        }
        assert_eq!(&pg[off + 4..off + 6], &up);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::<f64>::init(spec(), &mut rng, false).unwrap();
        let (pg, ig) = net.gradient(&[0.1, 0.2, 0.3, 0.4, 0.5], &[0.0; 4]).unwrap();
        assert!(pg.iter().all(|v| *v == 0.0));
        assert!(ig.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn batched_forward_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = Mlp::<f64>::init(spec(), &mut rng, false).unwrap();
        let batch = 6;
        let input: Vec<f64> = (0..batch * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (out, _) = net.forward_batch(&input, batch).unwrap();
        for r in 0..batch {
            let oracle = naive_forward(&net.spec, &net.params, &input[r * 5..(r + 1) * 5]);
            for (a, b) in out[r * 4..(r + 1) * 4].iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let net = Mlp::<f64>::zeros(spec()).unwrap();
        assert!(matches!(net.forward(&[0.0; 4]), Err(Error::Shape { .. })));
        assert!(Mlp::<f64>::from_params(spec(), vec![0.0; 3]).is_err());
        let mut bad = spec();
        bad.skips = vec![4];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn single_precision_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::<f32>::init(spec(), &mut rng, false).unwrap();
        let y = net.forward(&[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        assert_eq!(y.len(), 4);
        assert!(y.iter().all(|v| v.is_finite()));
    }
}
