//! Minimal owned MLP kernel: feedforward nets with rectified-linear hidden
//! layers, exact reverse-mode gradients, bias-corrected Adam, and
//! Polyak-averaged target copies. Everything is f64.
//!
//! The rectifier uses subgradient 0 at exactly 0.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input length {got} does not match first layer width {expected}")]
    InputShape { expected: usize, got: usize },
    #[error("upstream gradient length {got} does not match output width {expected}")]
    UpstreamShape { expected: usize, got: usize },
    #[error("gradient shapes do not match network shapes at layer {layer}")]
    GradShape { layer: usize },
    #[error("non-finite gradient in {kind} of layer {layer}")]
    NonFiniteGrad { layer: usize, kind: &'static str },
    #[error("network needs at least an input and an output layer")]
    TooFewLayers,
    #[error("target and source network shapes differ")]
    TargetShape,
    #[error("momentum coefficient must be in (0,1), got {0}")]
    BadTau(f64),
}

/// Multilayer perceptron; `weights[l]` has shape `(sizes[l], sizes[l+1])` so
/// a batch forward pass is `X · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

impl Mlp {
    /// Seeded init: every weight and bias uniform in ±1/√fan_in.
    pub fn init(sizes: &[usize], rng: &mut ChaCha8Rng) -> Result<Self, NnError> {
        if sizes.len() < 2 {
            return Err(NnError::TooFewLayers);
        }
        let mut weights = Vec::with_capacity(sizes.len() - 1);
        let mut biases = Vec::with_capacity(sizes.len() - 1);
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut wmat = Array2::zeros((fan_in, fan_out));
            wmat.mapv_inplace(|_: f64| rng.gen_range(-bound..bound));
            let mut bvec = Array1::zeros(fan_out);
            bvec.mapv_inplace(|_: f64| rng.gen_range(-bound..bound));
            weights.push(wmat);
            biases.push(bvec);
        }
        Ok(Self { sizes: sizes.to_vec(), weights, biases })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self, NnError> {
        if sizes.len() < 2 {
            return Err(NnError::TooFewLayers);
        }
        let weights = sizes.windows(2).map(|w| Array2::zeros((w[0], w[1]))).collect();
        let biases = sizes.windows(2).map(|w| Array1::zeros(w[1])).collect();
        Ok(Self { sizes: sizes.to_vec(), weights, biases })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Array1<f64>] {
        &mut self.biases
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Single-input forward pass. Skips zero input entries, so one-hot
    /// encodings cost only their active columns.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        if input.len() != self.input_dim() {
            return Err(NnError::InputShape { expected: self.input_dim(), got: input.len() });
        }
        let mut cur = input.to_vec();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut next = b.to_vec();
            for (i, &x) in cur.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let row = w.row(i);
                let row = row.as_slice().expect("weights are row-major");
                for (n, &wj) in next.iter_mut().zip(row) {
                    *n += x * wj;
                }
            }
            if l + 1 < self.weights.len() {
                for v in next.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            cur = next;
        }
        Ok(cur)
    }

    /// Batch forward pass: rows of `inputs` are independent samples.
    pub fn forward_batch(&self, inputs: &Array2<f64>) -> Result<Array2<f64>, NnError> {
        Ok(self.forward_batch_cached(inputs)?.into_output())
    }

    /// Batch forward pass keeping per-layer activations for [`Self::backward_batch`].
    pub fn forward_batch_cached(&self, inputs: &Array2<f64>) -> Result<ForwardCache, NnError> {
        if inputs.ncols() != self.input_dim() {
            return Err(NnError::InputShape { expected: self.input_dim(), got: inputs.ncols() });
        }
        let mut activations = Vec::with_capacity(self.weights.len() + 1);
        activations.push(inputs.clone());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = activations.last().unwrap().dot(w);
            for mut row in z.rows_mut() {
                row += b;
            }
            if l + 1 < self.weights.len() {
                z.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
            }
            activations.push(z);
        }
        Ok(ForwardCache { activations })
    }

    /// Exact reverse-mode gradients for a batch. `upstream[r][j]` is
    /// `∂L/∂output[r][j]`; returns `∂L/∂params` and, on request,
    /// `∂L/∂inputs`.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        upstream: &Array2<f64>,
        want_input_grad: bool,
    ) -> Result<(MlpGrads, Option<Array2<f64>>), NnError> {
        if upstream.ncols() != self.output_dim() {
            return Err(NnError::UpstreamShape {
                expected: self.output_dim(),
                got: upstream.ncols(),
            });
        }
        let n_layers = self.weights.len();
        let mut w_grads: Vec<Array2<f64>> = Vec::with_capacity(n_layers);
        let mut b_grads: Vec<Array1<f64>> = Vec::with_capacity(n_layers);
        let mut delta = upstream.clone();
        for l in (0..n_layers).rev() {
            let a_prev = &cache.activations[l];
            w_grads.push(a_prev.t().dot(&delta));
            b_grads.push(delta.sum_axis(ndarray::Axis(0)));
            if l > 0 {
                let mut prev_delta = delta.dot(&self.weights[l].t());
                // Rectifier mask: post-activation > 0 iff pre-activation > 0.
                prev_delta.zip_mut_with(a_prev, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = prev_delta;
            } else if want_input_grad {
                delta = delta.dot(&self.weights[0].t());
            }
        }
        w_grads.reverse();
        b_grads.reverse();
        let input_grad = want_input_grad.then_some(delta);
        Ok((MlpGrads { weights: w_grads, biases: b_grads }, input_grad))
    }

    /// Single-input backward pass: gradients of `upstream · output` with
    /// respect to parameters and the input.
    pub fn backward(
        &self,
        input: &[f64],
        upstream: &[f64],
    ) -> Result<(MlpGrads, Vec<f64>), NnError> {
        if input.len() != self.input_dim() {
            return Err(NnError::InputShape { expected: self.input_dim(), got: input.len() });
        }
        if upstream.len() != self.output_dim() {
            return Err(NnError::UpstreamShape {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).unwrap();
        let cache = self.forward_batch_cached(&x)?;
        let g = Array2::from_shape_vec((1, upstream.len()), upstream.to_vec()).unwrap();
        let (grads, input_grad) = self.backward_batch(&cache, &g, true)?;
        Ok((grads, input_grad.unwrap().row(0).to_vec()))
    }

    fn same_shape(&self, other: &Mlp) -> bool {
        self.sizes == other.sizes
    }
}

/// Per-layer activation snapshot from a cached forward pass.
/// `activations[0]` is the input batch; the last entry is the output.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().unwrap()
    }

    pub fn into_output(mut self) -> Array2<f64> {
        self.activations.pop().unwrap()
    }
}

/// Parameter-shaped gradient container.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &MlpGrads, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.scaled_add(scale, b);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.scaled_add(scale, b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            w.mapv_inplace(|v| v * factor);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|v| v * factor);
        }
    }

    pub fn max_abs(&self) -> f64 {
        let w = self
            .weights
            .iter()
            .flat_map(|w| w.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        self.biases
            .iter()
            .flat_map(|b| b.iter())
            .fold(w, |m, v| m.max(v.abs()))
    }
}

/// Adam accumulators shaped like one [`Mlp`].
#[derive(Debug, Clone)]
pub struct AdamState {
    m_weights: Vec<Array2<f64>>,
    v_weights: Vec<Array2<f64>>,
    m_biases: Vec<Array1<f64>>,
    v_biases: Vec<Array1<f64>>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Adam with the usual defaults (β1 0.9, β2 0.999, ε 1e-8).
    pub fn new(net: &Mlp, learning_rate: f64) -> Self {
        Self {
            m_weights: net.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            v_weights: net.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            m_biases: net.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            v_biases: net.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn moments(&self) -> (&[Array2<f64>], &[Array2<f64>], &[Array1<f64>], &[Array1<f64>]) {
        (&self.m_weights, &self.v_weights, &self.m_biases, &self.v_biases)
    }

    pub fn moments_mut(
        &mut self,
    ) -> (&mut [Array2<f64>], &mut [Array2<f64>], &mut [Array1<f64>], &mut [Array1<f64>]) {
        (&mut self.m_weights, &mut self.v_weights, &mut self.m_biases, &mut self.v_biases)
    }
}

/// One bias-corrected Adam update in place. Rejects non-finite gradients
/// before touching any state.
pub fn adam_step(net: &mut Mlp, grads: &MlpGrads, state: &mut AdamState) -> Result<(), NnError> {
    if grads.weights.len() != net.weights.len() || grads.biases.len() != net.biases.len() {
        return Err(NnError::GradShape { layer: 0 });
    }
    for (l, (w, g)) in net.weights.iter().zip(&grads.weights).enumerate() {
        if w.dim() != g.dim() {
            return Err(NnError::GradShape { layer: l });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteGrad { layer: l, kind: "weights" });
        }
    }
    for (l, (b, g)) in net.biases.iter().zip(&grads.biases).enumerate() {
        if b.len() != g.len() {
            return Err(NnError::GradShape { layer: l });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteGrad { layer: l, kind: "biases" });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.learning_rate, state.epsilon);

    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };

    for l in 0..net.weights.len() {
        let g = &grads.weights[l];
        let m = &mut state.m_weights[l];
        let v = &mut state.v_weights[l];
        let w = &mut net.weights[l];
        ndarray::Zip::from(w).and(g).and(m).and(v).for_each(|p, &g, m, v| update(p, g, m, v));
    }
    for l in 0..net.biases.len() {
        let g = &grads.biases[l];
        let m = &mut state.m_biases[l];
        let v = &mut state.v_biases[l];
        let b = &mut net.biases[l];
        ndarray::Zip::from(b).and(g).and(m).and(v).for_each(|p, &g, m, v| update(p, g, m, v));
    }
    Ok(())
}

/// `target ← τ·target + (1−τ)·source`, elementwise.
pub fn polyak_update(target: &mut Mlp, source: &Mlp, tau: f64) -> Result<(), NnError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(NnError::BadTau(tau));
    }
    if !target.same_shape(source) {
        return Err(NnError::TargetShape);
    }
    for (t, s) in target.weights.iter_mut().zip(&source.weights) {
        t.zip_mut_with(s, |t, &s| *t = tau * *t + (1.0 - tau) * s);
    }
    for (t, s) in target.biases.iter_mut().zip(&source.biases) {
        t.zip_mut_with(s, |t, &s| *t = tau * *t + (1.0 - tau) * s);
    }
    Ok(())
}

/// A slowly tracking parameter snapshot used for TD targets.
#[derive(Debug, Clone)]
pub struct TargetCopy {
    pub net: Mlp,
    pub tau: f64,
}

impl TargetCopy {
    pub fn new(source: &Mlp, tau: f64) -> Result<Self, NnError> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(NnError::BadTau(tau));
        }
        Ok(Self { net: source.clone(), tau })
    }

    pub fn update(&mut self, source: &Mlp) -> Result<(), NnError> {
        polyak_update(&mut self.net, source, self.tau)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::derive_rng;
    use crate::testkit;
    use ndarray::array;

    fn rng(seed: u64) -> ChaCha8Rng {
        derive_rng(seed, "nn-test")
    }

    #[test]
    fn zero_weight_net_outputs_bias() {
        let mut net = Mlp::zeros(&[3, 2]).unwrap();
        net.biases_mut()[0].assign(&array![0.5, -1.5]);
        let out = net.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.5, -1.5]);
    }

    #[test]
    fn identity_layer_is_identity() {
        let mut net = Mlp::zeros(&[3, 3]).unwrap();
        net.weights_mut()[0].assign(&Array2::eye(3));
        let out = net.forward(&[1.0, -2.0, 0.25]).unwrap();
        assert_eq!(out, vec![1.0, -2.0, 0.25]);
    }

    #[test]
    fn forward_matches_straight_line_arithmetic() {
        // Independent duplicate of the 2-layer computation with explicit loops.
        let mut r = rng(1);
        let net = Mlp::init(&[4, 3, 2], &mut r).unwrap();
        let x = [0.3, -1.2, 0.0, 2.0];
        let got = net.forward(&x).unwrap();

        let w0 = &net.weights()[0];
        let b0 = &net.biases()[0];
        let mut h = [0.0; 3];
        for j in 0..3 {
            let mut acc = b0[j];
            for i in 0..4 {
                acc += x[i] * w0[[i, j]];
            }
            h[j] = acc.max(0.0);
        }
        let w1 = &net.weights()[1];
        let b1 = &net.biases()[1];
        for j in 0..2 {
            let mut acc = b1[j];
            for i in 0..3 {
                acc += h[i] * w1[[i, j]];
            }
            assert!((got[j] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_batch_agrees_with_single_forward() {
        let mut r = rng(2);
        let net = Mlp::init(&[5, 8, 3], &mut r).unwrap();
        use rand::Rng;
        let mut inputs = Array2::zeros((7, 5));
        inputs.mapv_inplace(|_: f64| r.gen_range(-2.0..2.0));
        let batch = net.forward_batch(&inputs).unwrap();
        for row in 0..7 {
            let single = net.forward(&inputs.row(row).to_vec()).unwrap();
            for j in 0..3 {
                assert!((batch[[row, j]] - single[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut r = rng(3);
        let net = Mlp::init(&[6, 4, 2], &mut r).unwrap();
        let x = vec![0.1, -0.2, 0.3, 0.0, 1.0, -1.0];
        assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
    }

    #[test]
    fn linear_net_weight_grad_is_outer_product() {
        let mut net = Mlp::zeros(&[3, 2]).unwrap();
        net.weights_mut()[0].assign(&array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let x = [0.5, -1.0, 2.0];
        let upstream = [1.0, 1.0];
        let (grads, input_grad) = net.backward(&x, &upstream).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((grads.weights[0][[i, j]] - x[i] * upstream[j]).abs() < 1e-12);
            }
        }
        assert_eq!(grads.biases[0].to_vec(), vec![1.0, 1.0]);
        // Input grad of a linear map is W·upstream.
        assert_eq!(input_grad, vec![1.0, 1.0, 2.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut r = rng(4);
        for sizes in [vec![4, 6, 3], vec![9, 16, 16, 5], vec![2, 2]] {
            let net = Mlp::init(&sizes, &mut r).unwrap();
            let (x, upstream) = testkit::smooth_point(&net, &mut r);
            let cache = net
                .forward_batch_cached(&Array2::from_shape_vec((1, x.len()), x.clone()).unwrap())
                .unwrap();
            let up = Array2::from_shape_vec((1, upstream.len()), upstream.clone()).unwrap();
            let (analytic, _) = net.backward_batch(&cache, &up, false).unwrap();
            let fd = testkit::fd_param_grads(&net, 1e-5, |n| {
                let y = n.forward(&x).unwrap();
                y.iter().zip(&upstream).map(|(a, b)| a * b).sum()
            });
            let err = testkit::max_rel_err(&analytic, &fd, 1e-6);
            assert!(err < 1e-4, "sizes {sizes:?}: rel err {err}");
        }
    }

    #[test]
    fn rectifier_at_zero_uses_zero_subgradient() {
        // One hidden unit with pre-activation exactly 0: its path contributes
        // no gradient.
        let mut net = Mlp::zeros(&[1, 1, 1]).unwrap();
        net.weights_mut()[0][[0, 0]] = 1.0;
        net.weights_mut()[1][[0, 0]] = 1.0;
        let (grads, input_grad) = net.backward(&[0.0], &[1.0]).unwrap();
        assert_eq!(grads.weights[0][[0, 0]], 0.0);
        assert_eq!(input_grad, vec![0.0]);
    }

    #[test]
    fn adam_zero_grads_leave_params_fixed() {
        let mut r = rng(5);
        let mut net = Mlp::init(&[3, 4, 2], &mut r).unwrap();
        let before = net.clone();
        let mut state = AdamState::new(&net, 0.1);
        let grads = MlpGrads::zeros_like(&net);
        for _ in 0..5 {
            adam_step(&mut net, &grads, &mut state).unwrap();
        }
        assert_eq!(net, before);
        assert_eq!(state.step, 5);
    }

    #[test]
    fn adam_first_step_is_bounded_by_learning_rate() {
        let mut r = rng(6);
        let mut net = Mlp::init(&[3, 4, 2], &mut r).unwrap();
        let before = net.clone();
        let mut state = AdamState::new(&net, 0.05);
        let mut grads = MlpGrads::zeros_like(&net);
        use rand::Rng;
        for w in &mut grads.weights {
            w.mapv_inplace(|_| r.gen_range(-3.0..3.0));
        }
        adam_step(&mut net, &grads, &mut state).unwrap();
        for (w_new, w_old) in net.weights().iter().zip(before.weights()) {
            ndarray::Zip::from(w_new).and(w_old).for_each(|a, b| {
                assert!((a - b).abs() <= 0.05 + 1e-12);
            });
        }
    }

    #[test]
    fn adam_converges_on_scalar_quadratic() {
        // Independent scalar reference: minimize f(w) = w² from w = 1.
        let mut net = Mlp::zeros(&[1, 1]).unwrap();
        net.weights_mut()[0][[0, 0]] = 1.0;
        let mut state = AdamState::new(&net, 0.1);
        for _ in 0..200 {
            let w = net.weights()[0][[0, 0]];
            let mut grads = MlpGrads::zeros_like(&net);
            grads.weights[0][[0, 0]] = 2.0 * w;
            adam_step(&mut net, &grads, &mut state).unwrap();
        }
        assert!(net.weights()[0][[0, 0]].abs() < 0.05);
    }

    #[test]
    fn adam_rejects_non_finite_grads() {
        let mut r = rng(7);
        let mut net = Mlp::init(&[2, 2], &mut r).unwrap();
        let mut state = AdamState::new(&net, 0.1);
        let mut grads = MlpGrads::zeros_like(&net);
        grads.weights[0][[0, 0]] = f64::NAN;
        let err = adam_step(&mut net, &grads, &mut state).unwrap_err();
        assert!(matches!(err, NnError::NonFiniteGrad { .. }));
        assert_eq!(state.step, 0);
    }

    #[test]
    fn polyak_identity_and_arithmetic() {
        let mut r = rng(8);
        let source = Mlp::init(&[3, 2], &mut r).unwrap();
        let mut target = source.clone();
        polyak_update(&mut target, &source, 0.99).unwrap();
        assert_eq!(target, source);

        let mut zero_target = Mlp::zeros(&[2, 1]).unwrap();
        let mut ones = Mlp::zeros(&[2, 1]).unwrap();
        ones.weights_mut()[0].fill(1.0);
        ones.biases_mut()[0].fill(1.0);
        polyak_update(&mut zero_target, &ones, 0.99).unwrap();
        assert!((zero_target.weights()[0][[0, 0]] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn polyak_contracts_geometrically() {
        let mut r = rng(9);
        let source = Mlp::init(&[4, 3], &mut r).unwrap();
        let mut target = Mlp::zeros(&[4, 3]).unwrap();
        let gap = |t: &Mlp| {
            t.weights()[0]
                .iter()
                .zip(source.weights()[0].iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max)
        };
        let mut prev = gap(&target);
        for _ in 0..50 {
            polyak_update(&mut target, &source, 0.99).unwrap();
            let cur = gap(&target);
            assert!(cur <= prev * 0.99 + 1e-15);
            prev = cur;
        }
    }

    #[test]
    fn target_copy_tracks_source() {
        let mut r = rng(10);
        let source = Mlp::init(&[3, 3], &mut r).unwrap();
        let mut tc = TargetCopy::new(&source, 0.5).unwrap();
        let moved = Mlp::zeros(&[3, 3]).unwrap();
        tc.update(&moved).unwrap();
        assert!((tc.net.weights()[0][[0, 0]] - 0.5 * source.weights()[0][[0, 0]]).abs() < 1e-15);
        assert!(TargetCopy::new(&source, 1.0).is_err());
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut r = rng(11);
        let net = Mlp::init(&[3, 2], &mut r).unwrap();
        assert!(net.forward(&[1.0, 2.0]).is_err());
        let other = Mlp::init(&[3, 3], &mut r).unwrap();
        let mut target = other.clone();
        assert!(polyak_update(&mut target, &net, 0.9).is_err());
    }
}
