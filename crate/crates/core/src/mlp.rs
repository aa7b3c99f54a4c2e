//! Small dense multilayer perceptrons with exact first and mixed second
//! derivatives.
//!
//! Input derivatives are carried forward as tangents along chosen input axes
//! (`forward_tangent`). The adjoint of that tangent-augmented forward pass
//! (`backward_tangent`) gives the exact gradient, with respect to every
//! weight and every input, of any scalar built from the outputs and their
//! input derivatives. That is what a loss on `sigma = d psi / d eps` needs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softplus,
    /// Linear hidden layers; only useful for tests and toy constructions.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    Identity,
    /// Clamp to `[0, 1]`; derivative 1 strictly inside, 0 elsewhere.
    ReluD,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input size, hidden sizes, output size.
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    /// One transform per output.
    pub output_heads: Vec<OutputHead>,
}

impl MlpSpec {
    pub fn new(layer_sizes: &[usize], hidden_activation: Activation, output_heads: &[OutputHead]) -> Result<Self> {
        let spec = Self {
            layer_sizes: layer_sizes.to_vec(),
            hidden_activation,
            output_heads: output_heads.to_vec(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 3 {
            return Err(Error::invalid("an MLP needs at least one hidden layer"));
        }
        if self.layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        if self.output_heads.len() != self.n_outputs() {
            return Err(Error::invalid(format!(
                "{} output heads for {} outputs",
                self.output_heads.len(),
                self.n_outputs()
            )));
        }
        Ok(())
    }

    pub fn n_inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Weights are row-major `[n_out][n_in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            biases: vec![0.0; n_out],
        }
    }

    #[inline]
    fn affine(&self, input: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let row = &self.weights[j * self.n_in..(j + 1) * self.n_in];
            *o = self.biases[j] + dot(row, input);
        }
    }

    #[inline]
    fn linear(&self, input: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = dot(&self.weights[j * self.n_in..(j + 1) * self.n_in], input);
        }
    }

    /// `out += W^T v`
    #[inline]
    fn transpose_acc(&self, v: &[f64], out: &mut [f64]) {
        for (j, &vj) in v.iter().enumerate() {
            if vj == 0.0 {
                continue;
            }
            let row = &self.weights[j * self.n_in..(j + 1) * self.n_in];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * vj;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            layers: spec.layer_sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Layer by layer: weights then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.write_flat(&mut out);
        out
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.biases);
        }
    }

    /// Reads parameters in `to_flat` order; returns the number consumed.
    pub fn read_flat(&mut self, flat: &[f64]) -> usize {
        let mut pos = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            layer.weights.copy_from_slice(&flat[pos..pos + nw]);
            pos += nw;
            let nb = layer.biases.len();
            layer.biases.copy_from_slice(&flat[pos..pos + nb]);
            pos += nb;
        }
        pos
    }

    pub fn fill(&mut self, value: f64) {
        for layer in &mut self.layers {
            layer.weights.iter_mut().for_each(|w| *w = value);
            layer.biases.iter_mut().for_each(|b| *b = value);
        }
    }

    pub fn matches(&self, spec: &MlpSpec) -> bool {
        self.layers.len() == spec.n_layers()
            && self.layers.iter().zip(spec.layer_sizes.windows(2)).all(|(l, w)| {
                l.n_in == w[0] && l.n_out == w[1] && l.weights.len() == w[0] * w[1] && l.biases.len() == w[1]
            })
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn relu_d(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Value, first and second derivative.
#[inline]
fn hidden_act(act: Activation, z: f64) -> (f64, f64, f64) {
    match act {
        Activation::Relu => {
            if z > 0.0 {
                (z, 1.0, 0.0)
            } else {
                (0.0, 0.0, 0.0)
            }
        }
        Activation::Softplus => {
            let s = sigmoid(z);
            (softplus(z), s, s * (1.0 - s))
        }
        Activation::Identity => (z, 1.0, 0.0),
    }
}

#[inline]
fn head_act(head: OutputHead, z: f64) -> (f64, f64, f64) {
    match head {
        OutputHead::Identity => (z, 1.0, 0.0),
        OutputHead::ReluD => {
            if z > 0.0 && z < 1.0 {
                (z, 1.0, 0.0)
            } else {
                (relu_d(z), 0.0, 0.0)
            }
        }
    }
}

/// Intermediate values of one tangent-augmented forward pass. Reusable
/// across calls to avoid reallocation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    input: Vec<f64>,
    dirs: Vec<usize>,
    /// Per layer: post-activation values.
    post: Vec<Vec<f64>>,
    /// Per layer: first and second activation derivatives at the pre-activation.
    d1: Vec<Vec<f64>>,
    d2: Vec<Vec<f64>>,
    /// Per layer, per direction: pre- and post-activation tangents.
    pre_t: Vec<Vec<Vec<f64>>>,
    post_t: Vec<Vec<Vec<f64>>>,
    // backward scratch
    bar: Vec<f64>,
    bar_t: Vec<Vec<f64>>,
    z_bar: Vec<f64>,
    zt_bar: Vec<Vec<f64>>,
}

impl Tape {
    /// Network outputs.
    pub fn output(&self) -> &[f64] {
        self.post.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// `d output / d x[dirs[k]]` for every output.
    pub fn output_tangent(&self, k: usize) -> &[f64] {
        &self.post_t.last().expect("forward ran")[k]
    }

    fn prepare(&mut self, spec: &MlpSpec, n_dirs: usize) {
        let n_layers = spec.n_layers();
        self.post.resize_with(n_layers, Vec::new);
        self.d1.resize_with(n_layers, Vec::new);
        self.d2.resize_with(n_layers, Vec::new);
        self.pre_t.resize_with(n_layers, Vec::new);
        self.post_t.resize_with(n_layers, Vec::new);
        for (l, &n) in spec.layer_sizes[1..].iter().enumerate() {
            self.post[l].resize(n, 0.0);
            self.d1[l].resize(n, 0.0);
            self.d2[l].resize(n, 0.0);
            self.pre_t[l].resize_with(n_dirs, Vec::new);
            self.post_t[l].resize_with(n_dirs, Vec::new);
            for k in 0..n_dirs {
                self.pre_t[l][k].resize(n, 0.0);
                self.post_t[l][k].resize(n, 0.0);
            }
        }
    }
}

/// Gradient accumulator mirroring [`MlpParams`].
pub type MlpGrads = MlpParams;

/// Network = spec + parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: MlpParams,
}

impl Mlp {
    /// Glorot-uniform weights (`|w| <= sqrt(6 / (fan_in + fan_out))`), zero
    /// biases.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = MlpParams::zeros(&spec);
        for layer in &mut params.layers {
            let bound = (6.0 / (layer.n_in + layer.n_out) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.gen_range(-bound..=bound);
            }
        }
        Ok(Self { spec, params })
    }

    pub fn new(spec: MlpSpec, params: MlpParams) -> Result<Self> {
        spec.validate()?;
        if !params.matches(&spec) {
            return Err(Error::invalid("parameter shapes do not match the spec"));
        }
        Ok(Self { spec, params })
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.n_inputs() {
            return Err(Error::invalid(format!(
                "expected {} inputs, got {}",
                self.spec.n_inputs(),
                x.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut tape = Tape::default();
        self.forward_tangent(&mut tape, x, &[]);
        Ok(tape.output().to_vec())
    }

    /// Exact `d y[output] / d x` by reverse accumulation.
    pub fn input_gradient(&self, x: &[f64], output: usize) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if output >= self.spec.n_outputs() {
            return Err(Error::invalid(format!("output index {output} out of range")));
        }
        let mut tape = Tape::default();
        self.forward_tangent(&mut tape, x, &[]);
        let mut y_bar = vec![0.0; self.spec.n_outputs()];
        y_bar[output] = 1.0;
        let mut grads = MlpParams::zeros(&self.spec);
        let mut x_bar = vec![0.0; x.len()];
        self.backward_tangent(&mut tape, &y_bar, &[], &mut grads, &mut x_bar);
        Ok(x_bar)
    }

    /// Forward pass carrying tangents along input axes `dirs`. `x` must have
    /// the input length; callers that skip [`Mlp::forward`] check it.
    pub fn forward_tangent(&self, tape: &mut Tape, x: &[f64], dirs: &[usize]) {
        debug_assert_eq!(x.len(), self.spec.n_inputs());
        tape.prepare(&self.spec, dirs.len());
        tape.input.clear();
        tape.input.extend_from_slice(x);
        tape.dirs.clear();
        tape.dirs.extend_from_slice(dirs);
        let n_layers = self.spec.n_layers();

        for (l, layer) in self.params.layers.iter().enumerate() {
            let (done, rest) = tape.post.split_at_mut(l);
            let input: &[f64] = if l == 0 { &tape.input } else { &done[l - 1] };
            let post = &mut rest[0];
            layer.affine(input, post);

            // tangents of the pre-activation
            for (k, &dir) in dirs.iter().enumerate() {
                if l == 0 {
                    for (j, z) in tape.pre_t[0][k].iter_mut().enumerate() {
                        *z = layer.weights[j * layer.n_in + dir];
                    }
                } else {
                    layer.linear(&tape.post_t[l - 1][k], &mut tape.pre_t[l][k]);
                }
            }

            let last = l + 1 == n_layers;
            for j in 0..layer.n_out {
                let z = tape.post[l][j];
                let (a, s1, s2) = if last {
                    head_act(self.spec.output_heads[j], z)
                } else {
                    hidden_act(self.spec.hidden_activation, z)
                };
                tape.post[l][j] = a;
                tape.d1[l][j] = s1;
                tape.d2[l][j] = s2;
            }
            for k in 0..dirs.len() {
                for j in 0..layer.n_out {
                    tape.post_t[l][k][j] = tape.d1[l][j] * tape.pre_t[l][k][j];
                }
            }
        }
    }

    /// Adjoint of [`Mlp::forward_tangent`]. `y_bar` is the sensitivity of the
    /// scalar objective to the outputs and `yt_bar[k]` to the output tangents
    /// along direction `k` (may be empty when no tangent terms are present).
    /// Accumulates into `grads` and `x_bar`.
    pub fn backward_tangent(
        &self,
        tape: &mut Tape,
        y_bar: &[f64],
        yt_bar: &[&[f64]],
        grads: &mut MlpGrads,
        x_bar: &mut [f64],
    ) {
        let n_dirs = yt_bar.len();
        debug_assert!(n_dirs <= tape.dirs.len());
        let Tape {
            input,
            dirs,
            post,
            d1,
            d2,
            pre_t,
            post_t,
            bar,
            bar_t,
            z_bar,
            zt_bar,
        } = tape;

        bar.clear();
        bar.extend_from_slice(y_bar);
        bar_t.resize_with(n_dirs, Vec::new);
        zt_bar.resize_with(n_dirs, Vec::new);
        for k in 0..n_dirs {
            bar_t[k].clear();
            bar_t[k].extend_from_slice(yt_bar[k]);
        }

        for l in (0..self.spec.n_layers()).rev() {
            let layer = &self.params.layers[l];
            let grad = &mut grads.layers[l];
            let n_out = layer.n_out;

            z_bar.clear();
            z_bar.extend((0..n_out).map(|j| d1[l][j] * bar[j]));
            for k in 0..n_dirs {
                let zt = &pre_t[l][k];
                let zbk = &mut zt_bar[k];
                zbk.clear();
                for j in 0..n_out {
                    z_bar[j] += d2[l][j] * zt[j] * bar_t[k][j];
                    zbk.push(d1[l][j] * bar_t[k][j]);
                }
            }

            let prev: &[f64] = if l == 0 { input } else { &post[l - 1] };
            for j in 0..n_out {
                grad.biases[j] += z_bar[j];
                let row = &mut grad.weights[j * layer.n_in..(j + 1) * layer.n_in];
                let zb = z_bar[j];
                if zb != 0.0 {
                    for (g, &a) in row.iter_mut().zip(prev) {
                        *g += zb * a;
                    }
                }
                for k in 0..n_dirs {
                    let ztb = zt_bar[k][j];
                    if ztb == 0.0 {
                        continue;
                    }
                    if l == 0 {
                        row[dirs[k]] += ztb;
                    } else {
                        for (g, &at) in row.iter_mut().zip(&post_t[l - 1][k]) {
                            *g += ztb * at;
                        }
                    }
                }
            }

            if l == 0 {
                layer.transpose_acc(z_bar, x_bar);
            } else {
                bar.clear();
                bar.resize(layer.n_in, 0.0);
                layer.transpose_acc(z_bar, bar);
                for k in 0..n_dirs {
                    bar_t[k].clear();
                    bar_t[k].resize(layer.n_in, 0.0);
                    layer.transpose_acc(&zt_bar[k], &mut bar_t[k]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_net(act: Activation, seed: u64) -> Mlp {
        let spec = MlpSpec::new(&[3, 5, 4, 2], act, &[OutputHead::Identity, OutputHead::Identity]).unwrap();
        let mut net = Mlp::init(spec, seed).unwrap();
        // nonzero biases so every unit is exercised
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for layer in &mut net.params.layers {
            for b in &mut layer.biases {
                *b = rng.gen_range(-0.5..0.5);
            }
        }
        net
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = MlpSpec::new(&[6, 16, 8, 2], Activation::Softplus, &[OutputHead::Identity, OutputHead::ReluD]).unwrap();
        let a = Mlp::init(spec.clone(), 7).unwrap();
        let b = Mlp::init(spec.clone(), 7).unwrap();
        let c = Mlp::init(spec.clone(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
        for layer in &a.params.layers {
            let bound = (6.0 / (layer.n_in + layer.n_out) as f64).sqrt();
            assert!(layer.weights.iter().all(|w| w.abs() <= bound));
            assert!(layer.biases.iter().all(|&b| b == 0.0));
        }
        assert_eq!(a.params.n_params(), spec.n_params());
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(&[3, 1], Activation::Relu, &[OutputHead::Identity]).is_err());
        assert!(MlpSpec::new(&[3, 0, 1], Activation::Relu, &[OutputHead::Identity]).is_err());
        assert!(MlpSpec::new(&[3, 4, 2], Activation::Relu, &[OutputHead::Identity]).is_err());
    }

    #[test]
    fn softplus_unit_net() {
        let spec = MlpSpec::new(&[1, 1, 1], Activation::Softplus, &[OutputHead::Identity]).unwrap();
        let mut params = MlpParams::zeros(&spec);
        params.layers[0].weights[0] = 1.0;
        params.layers[1].weights[0] = 1.0;
        let net = Mlp::new(spec, params).unwrap();
        assert_relative_eq!(net.forward(&[0.0]).unwrap()[0], std::f64::consts::LN_2, max_relative = 1e-15);
    }

    #[test]
    fn relu_d_head_clamps() {
        let spec = MlpSpec::new(&[1, 1, 1], Activation::Identity, &[OutputHead::ReluD]).unwrap();
        let mut params = MlpParams::zeros(&spec);
        params.layers[0].weights[0] = 1.0;
        params.layers[1].weights[0] = 1.0;
        let net = Mlp::new(spec, params).unwrap();
        assert_eq!(net.forward(&[-0.5]).unwrap()[0], 0.0);
        assert_eq!(net.forward(&[0.3]).unwrap()[0], 0.3);
        assert_eq!(net.forward(&[1.7]).unwrap()[0], 1.0);
        // derivative: zero outside (0, 1), including the kinks
        assert_eq!(net.input_gradient(&[0.0], 0).unwrap()[0], 0.0);
        assert_eq!(net.input_gradient(&[0.5], 0).unwrap()[0], 1.0);
        assert_eq!(net.input_gradient(&[1.0], 0).unwrap()[0], 0.0);
    }

    #[test]
    fn zero_weights_propagate_biases() {
        let spec = MlpSpec::new(&[2, 3, 1], Activation::Softplus, &[OutputHead::Identity]).unwrap();
        let mut params = MlpParams::zeros(&spec);
        params.layers[0].biases = vec![0.5, -1.0, 2.0];
        params.layers[1].biases = vec![0.25];
        let net = Mlp::new(spec, params).unwrap();
        assert_eq!(net.forward(&[3.0, -4.0]).unwrap(), vec![0.25]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let net = small_net(Activation::Softplus, 1);
        assert!(net.forward(&[1.0]).is_err());
        assert!(net.input_gradient(&[1.0, 2.0, 3.0], 5).is_err());
    }

    #[test]
    fn linear_net_gradient_is_weight_row() {
        let spec = MlpSpec::new(&[3, 2, 1], Activation::Identity, &[OutputHead::Identity]).unwrap();
        let net = Mlp::init(spec, 3).unwrap();
        let g = net.input_gradient(&[0.2, -0.1, 0.7], 0).unwrap();
        // effective row = W2 W1
        let w1 = &net.params.layers[0].weights;
        let w2 = &net.params.layers[1].weights;
        for i in 0..3 {
            let expected = w2[0] * w1[i] + w2[1] * w1[3 + i];
            assert_relative_eq!(g[i], expected, max_relative = 1e-14);
        }
    }

    #[test]
    fn tangents_match_reverse_gradient() {
        let net = small_net(Activation::Softplus, 4);
        let x = [0.3, -0.8, 1.1];
        let mut tape = Tape::default();
        net.forward_tangent(&mut tape, &x, &[0, 1, 2]);
        for out in 0..2 {
            let g = net.input_gradient(&x, out).unwrap();
            for (k, gk) in g.iter().enumerate() {
                assert_relative_eq!(tape.output_tangent(k)[out], *gk, max_relative = 1e-12);
            }
        }
    }
}
