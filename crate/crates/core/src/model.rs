//! Small fully-connected networks with hand-written backpropagation.
//!
//! A network with sizes `[d₀, d₁, …, d_L]` has `L` weight layers. Weight
//! matrix `k` (`d_{k+1} × d_k`, row-major) is stored as layer `w{k}` and its
//! bias as `b{k}`; both carry depth index `k`. The last weight layer is the
//! task head and sits at depth `n = max(L − 1, 1)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{LayerParams, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    Mse,
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub loss: Loss,
}

/// Row-major batch of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, rows: usize, cols: usize) -> Result<Self> {
        if inputs.len() != rows * cols {
            return Err(Error::shape("batch inputs", rows * cols, inputs.len()));
        }
        Ok(Self { inputs, rows, cols })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.inputs[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// Row-major `rows × outputs` regression targets.
    Values(Vec<f64>),
}

/// Per-layer pre-activations and activations from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input; the last entry is the raw output.
    pub activations: Vec<Vec<f64>>,
    pub pre_activations: Vec<Vec<f64>>,
    pub rows: usize,
}

impl ForwardCache {
    pub fn outputs(&self) -> &[f64] {
        self.activations.last().expect("at least the input")
    }
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, loss: Loss) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            activation,
            loss,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Config("an MLP needs at least input and output sizes".into()));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Config("layer sizes must be >= 1".into()));
        }
        if self.loss == Loss::SoftmaxCrossEntropy && self.outputs() < 2 {
            return Err(Error::Config("softmax cross-entropy needs >= 2 outputs".into()));
        }
        Ok(())
    }

    pub fn num_weight_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn outputs(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Depth normaliser: the head's depth index.
    pub fn depth(&self) -> usize {
        (self.num_weight_layers() - 1).max(1)
    }

    pub fn with_outputs(&self, outputs: usize) -> Self {
        let mut spec = self.clone();
        *spec.layer_sizes.last_mut().unwrap() = outputs;
        spec
    }

    /// Fan-in scaled uniform initialisation, `U(−1/√fan_in, 1/√fan_in)`.
    pub fn init(&self, seed: u64) -> Result<ModelParams> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(2 * self.num_weight_layers());
        for k in 0..self.num_weight_layers() {
            let (w, b) = self.init_layer(k, &mut rng);
            layers.push(w);
            layers.push(b);
        }
        ModelParams::new(layers, self.depth())
    }

    fn init_layer(&self, k: usize, rng: &mut ChaCha8Rng) -> (LayerParams, LayerParams) {
        let (fan_in, fan_out) = (self.layer_sizes[k], self.layer_sizes[k + 1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let b = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        (
            LayerParams::new(format!("w{k}"), k, w),
            LayerParams::new(format!("b{k}"), k, b),
        )
    }

    fn check_params(&self, params: &ModelParams) -> Result<()> {
        let expected = 2 * self.num_weight_layers();
        if params.layers.len() != expected {
            return Err(Error::shape("parameter layers", expected, params.layers.len()));
        }
        for k in 0..self.num_weight_layers() {
            let (fan_in, fan_out) = (self.layer_sizes[k], self.layer_sizes[k + 1]);
            let (w, b) = (&params.layers[2 * k], &params.layers[2 * k + 1]);
            if w.len() != fan_in * fan_out {
                return Err(Error::shape(format!("weights of layer {k}"), fan_in * fan_out, w.len()));
            }
            if b.len() != fan_out {
                return Err(Error::shape(format!("bias of layer {k}"), fan_out, b.len()));
            }
        }
        Ok(())
    }

    pub fn forward(&self, params: &ModelParams, batch: &Batch) -> Result<ForwardCache> {
        self.check_params(params)?;
        if batch.cols != self.inputs() {
            return Err(Error::shape("input width", self.inputs(), batch.cols));
        }
        let rows = batch.rows;
        let last = self.num_weight_layers() - 1;
        let mut activations = vec![batch.inputs.clone()];
        let mut pre_activations = Vec::with_capacity(self.num_weight_layers());

        for k in 0..self.num_weight_layers() {
            let (fan_in, fan_out) = (self.layer_sizes[k], self.layer_sizes[k + 1]);
            let w = &params.layers[2 * k].values;
            let b = &params.layers[2 * k + 1].values;
            let input = &activations[k];
            let mut z = vec![0.0; rows * fan_out];
            for r in 0..rows {
                let x = &input[r * fan_in..(r + 1) * fan_in];
                for (o, zo) in z[r * fan_out..(r + 1) * fan_out].iter_mut().enumerate() {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    *zo = b[o] + row.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>();
                }
            }
            let a = if k == last {
                z.clone()
            } else {
                z.iter().map(|&v| self.activate(v)).collect()
            };
            pre_activations.push(z);
            activations.push(a);
        }
        Ok(ForwardCache {
            activations,
            pre_activations,
            rows,
        })
    }

    fn activate(&self, z: f64) -> f64 {
        match self.activation {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    fn activation_slope(&self, z: f64, a: f64) -> f64 {
        match self.activation {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Mean loss over the batch and its gradient with respect to the raw
    /// outputs.
    pub fn loss_and_output_grad(&self, outputs: &[f64], rows: usize, targets: &Targets) -> Result<(f64, Vec<f64>)> {
        let c = self.outputs();
        let scale = 1.0 / rows as f64;
        let mut grad = vec![0.0; outputs.len()];
        let mut loss = 0.0;
        match (self.loss, targets) {
            (Loss::Mse, Targets::Values(y)) => {
                if y.len() != outputs.len() {
                    return Err(Error::shape("regression targets", outputs.len(), y.len()));
                }
                for ((g, o), t) in grad.iter_mut().zip(outputs).zip(y) {
                    let diff = o - t;
                    loss += diff * diff;
                    *g = 2.0 * diff * scale;
                }
            }
            (Loss::Mse, Targets::Classes(labels)) => {
                check_labels(labels, rows, c)?;
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let diff = outputs[r * c + j] - if j == label { 1.0 } else { 0.0 };
                        loss += diff * diff;
                        grad[r * c + j] = 2.0 * diff * scale;
                    }
                }
            }
            (Loss::SoftmaxCrossEntropy, Targets::Classes(labels)) => {
                check_labels(labels, rows, c)?;
                for (r, &label) in labels.iter().enumerate() {
                    let logits = &outputs[r * c..(r + 1) * c];
                    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
                    let log_norm = max + sum.ln();
                    loss += log_norm - logits[label];
                    for j in 0..c {
                        let p = (logits[j] - log_norm).exp();
                        grad[r * c + j] = (p - if j == label { 1.0 } else { 0.0 }) * scale;
                    }
                }
            }
            (Loss::SoftmaxCrossEntropy, Targets::Values(_)) => {
                return Err(Error::Config("cross-entropy needs class labels".into()))
            }
        }
        Ok((loss * scale, grad))
    }

    /// Mean loss and per-layer gradients, aligned with `params.layers`.
    pub fn backward(
        &self,
        params: &ModelParams,
        cache: &ForwardCache,
        targets: &Targets,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        self.check_params(params)?;
        let rows = cache.rows;
        let (loss, mut delta) = self.loss_and_output_grad(cache.outputs(), rows, targets)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads = vec![Vec::new(); params.layers.len()];

        for k in (0..self.num_weight_layers()).rev() {
            let (fan_in, fan_out) = (self.layer_sizes[k], self.layer_sizes[k + 1]);
            let input = &cache.activations[k];
            let mut gw = vec![0.0; fan_in * fan_out];
            let mut gb = vec![0.0; fan_out];
            for r in 0..rows {
                let x = &input[r * fan_in..(r + 1) * fan_in];
                for o in 0..fan_out {
                    let dz = delta[r * fan_out + o];
                    gb[o] += dz;
                    for (g, xi) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(x) {
                        *g += dz * xi;
                    }
                }
            }
            if gw.iter().chain(&gb).any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of layer {k}")));
            }

            if k > 0 {
                let w = &params.layers[2 * k].values;
                let z_prev = &cache.pre_activations[k - 1];
                let mut next = vec![0.0; rows * fan_in];
                for r in 0..rows {
                    for i in 0..fan_in {
                        let back: f64 = (0..fan_out)
                            .map(|o| w[o * fan_in + i] * delta[r * fan_out + o])
                            .sum();
                        let idx = r * fan_in + i;
                        next[idx] = back * self.activation_slope(z_prev[idx], input[idx]);
                    }
                }
                delta = next;
            }
            grads[2 * k] = gw;
            grads[2 * k + 1] = gb;
        }
        Ok((loss, grads))
    }

    pub fn loss(&self, params: &ModelParams, batch: &Batch, targets: &Targets) -> Result<f64> {
        let cache = self.forward(params, batch)?;
        Ok(self.loss_and_output_grad(cache.outputs(), batch.rows, targets)?.0)
    }

    pub fn loss_and_grads(
        &self,
        params: &ModelParams,
        batch: &Batch,
        targets: &Targets,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let cache = self.forward(params, batch)?;
        self.backward(params, &cache, targets)
    }

    pub fn predict(&self, params: &ModelParams, batch: &Batch) -> Result<Vec<usize>> {
        let cache = self.forward(params, batch)?;
        let c = self.outputs();
        Ok(cache
            .outputs()
            .chunks_exact(c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, params: &ModelParams, batch: &Batch, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        let predicted = self.predict(params, batch)?;
        let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(correct as f64 / labels.len() as f64)
    }

    /// Maximum relative error between finite differences and
    /// [`backward`](Self::backward), using `|g_fd − g| / max(|g_fd|, |g|, 1e-12)`.
    ///
    /// `g_fd` is the Richardson combination of central differences with
    /// steps `ε` and `ε/2`, accurate to `O(ε⁴)`. For ReLU networks a probe
    /// that flips the sign of any hidden pre-activation straddles a kink,
    /// where no difference quotient estimates the derivative; the step is
    /// halved for that coordinate until no sign flips or it reaches 1e-7.
    pub fn grad_check(
        &self,
        params: &ModelParams,
        batch: &Batch,
        targets: &Targets,
        epsilon: f64,
    ) -> Result<f64> {
        if !(MIN_FD_STEP..=1e-3).contains(&epsilon) {
            return Err(Error::Config(format!(
                "finite-difference epsilon must lie in [1e-7, 1e-3], got {epsilon}"
            )));
        }
        let (_, analytic) = self.loss_and_grads(params, batch, targets)?;
        let signs = match self.activation {
            Activation::Relu => Some(self.relu_pattern(params, batch)?),
            Activation::Tanh => None,
        };
        let mut probe = params.clone();
        let mut worst: f64 = 0.0;
        for (k, layer_grad) in analytic.iter().enumerate() {
            for (j, &g) in layer_grad.iter().enumerate() {
                let fd = self.extrapolated_difference(&mut probe, k, j, batch, targets, epsilon, signs.as_deref())?;
                let err = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-12);
                worst = worst.max(err);
            }
        }
        Ok(worst)
    }

    /// Richardson-extrapolated central difference `(4·D(h/2) − D(h)) / 3`
    /// along coordinate `(k, j)`, which cancels the `h²` truncation term.
    #[allow(clippy::too_many_arguments)]
    fn extrapolated_difference(
        &self,
        probe: &mut ModelParams,
        k: usize,
        j: usize,
        batch: &Batch,
        targets: &Targets,
        epsilon: f64,
        signs: Option<&[bool]>,
    ) -> Result<f64> {
        let orig = probe.layers[k].values[j];
        let mut h = epsilon;
        loop {
            let mut losses = [0.0; 4];
            let mut crosses = false;
            for (slot, step) in losses.iter_mut().zip([h, -h, h / 2.0, -h / 2.0]) {
                probe.layers[k].values[j] = orig + step;
                let cache = self.forward(probe, batch)?;
                crosses |= signs.is_some_and(|base| self.sign_pattern(&cache) != base);
                *slot = self.loss_and_output_grad(cache.outputs(), batch.rows, targets)?.0;
            }
            probe.layers[k].values[j] = orig;
            if crosses && h / 2.0 >= MIN_FD_STEP {
                h /= 2.0;
                continue;
            }
            let wide = (losses[0] - losses[1]) / (2.0 * h);
            let narrow = (losses[2] - losses[3]) / h;
            return Ok((4.0 * narrow - wide) / 3.0);
        }
    }

    fn relu_pattern(&self, params: &ModelParams, batch: &Batch) -> Result<Vec<bool>> {
        Ok(self.sign_pattern(&self.forward(params, batch)?))
    }

    fn sign_pattern(&self, cache: &ForwardCache) -> Vec<bool> {
        let hidden = cache.pre_activations.len().saturating_sub(1);
        cache.pre_activations[..hidden]
            .iter()
            .flatten()
            .map(|&z| z > 0.0)
            .collect()
    }

    /// Replaces the head (last weight and bias layers) with freshly seeded
    /// values for `new_outputs` classes. The new head has no pre-trained
    /// reference; every other layer is left untouched.
    pub fn reinit_head(
        &self,
        params: &ModelParams,
        new_outputs: usize,
        seed: u64,
    ) -> Result<(MlpSpec, ModelParams)> {
        if new_outputs < 1 {
            return Err(Error::Config("head needs at least one output".into()));
        }
        self.check_params(params)?;
        let spec = self.with_outputs(new_outputs);
        spec.validate()?;
        let k = spec.num_weight_layers() - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, b) = spec.init_layer(k, &mut rng);
        let mut out = params.clone();
        out.layers[2 * k] = w;
        out.layers[2 * k + 1] = b;
        Ok((spec, out))
    }
}

/// Gradient check at a seeded random point: parameters from
/// [`MlpSpec::init`], inputs uniform on `[-2, 2]`, and random targets
/// (classes, or values uniform on `[-1, 1]`).
pub fn grad_check_draw(spec: &MlpSpec, seed: u64, rows: usize, epsilon: f64) -> Result<f64> {
    if rows == 0 {
        return Err(Error::Config("grad-check batch needs at least one row".into()));
    }
    let params = spec.init(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164_6368_6b00);
    let inputs = (0..rows * spec.inputs()).map(|_| rng.random_range(-2.0..=2.0)).collect();
    let batch = Batch::new(inputs, rows, spec.inputs())?;
    let targets = match spec.loss {
        Loss::Mse => Targets::Values((0..rows * spec.outputs()).map(|_| rng.random_range(-1.0..=1.0)).collect()),
        Loss::SoftmaxCrossEntropy => Targets::Classes((0..rows).map(|_| rng.random_range(0..spec.outputs())).collect()),
    };
    spec.grad_check(&params, &batch, &targets, epsilon)
}

/// Network shapes the experiments and tests use, by name.
pub fn shipped_specs() -> Vec<(&'static str, MlpSpec)> {
    let spec = |sizes: &[usize], activation, loss| MlpSpec {
        layer_sizes: sizes.to_vec(),
        activation,
        loss,
    };
    vec![
        ("mlp-tanh-ce", spec(&[2, 32, 32, 32, 4], Activation::Tanh, Loss::SoftmaxCrossEntropy)),
        ("mlp-relu-ce", spec(&[2, 32, 32, 32, 4], Activation::Relu, Loss::SoftmaxCrossEntropy)),
        ("mlp-tanh-mse", spec(&[2, 16, 16, 1], Activation::Tanh, Loss::Mse)),
        ("mlp-relu-mse", spec(&[2, 16, 16, 1], Activation::Relu, Loss::Mse)),
        ("logistic", spec(&[2, 4], Activation::Tanh, Loss::SoftmaxCrossEntropy)),
    ]
}

const MIN_FD_STEP: f64 = 1e-7;

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape("labels", rows, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Config(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(inputs: usize, outputs: usize) -> MlpSpec {
        MlpSpec::new(vec![inputs, outputs], Activation::Tanh, Loss::Mse).unwrap()
    }

    #[test]
    fn identity_linear_net() {
        let spec = linear(3, 3);
        let mut p = spec.init(0).unwrap();
        p.layers[0].values = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        p.layers[1].values = vec![0.0; 3];
        let batch = Batch::new(vec![0.5, -2.0, 7.0], 1, 3).unwrap();
        assert_eq!(spec.forward(&p, &batch).unwrap().outputs(), &[0.5, -2.0, 7.0]);
    }

    #[test]
    fn zero_network_gives_uniform_softmax() {
        let spec = MlpSpec::new(vec![2, 4, 5], Activation::Relu, Loss::SoftmaxCrossEntropy).unwrap();
        let mut p = spec.init(3).unwrap();
        p.layers.iter_mut().for_each(|l| l.values.iter_mut().for_each(|v| *v = 0.0));
        let batch = Batch::new(vec![1.0, -1.0, 3.0, 2.0], 2, 2).unwrap();
        let loss = spec.loss(&p, &batch, &Targets::Classes(vec![0, 4])).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn single_tanh_unit() {
        let spec = MlpSpec::new(vec![1, 1, 1], Activation::Tanh, Loss::Mse).unwrap();
        let mut p = spec.init(0).unwrap();
        p.layers[0].values = vec![0.5];
        p.layers[1].values = vec![0.0];
        p.layers[2].values = vec![1.0];
        p.layers[3].values = vec![0.0];
        let batch = Batch::new(vec![2.0], 1, 1).unwrap();
        let cache = spec.forward(&p, &batch).unwrap();
        assert_eq!(cache.activations[1], vec![1.0f64.tanh()]);
    }

    #[test]
    fn linear_regression_gradient_matches_closed_form() {
        // 2 Xᵀ(Xw + b − y) / B
        let spec = linear(2, 1);
        let mut p = spec.init(0).unwrap();
        p.layers[0].values = vec![0.3, -0.7];
        p.layers[1].values = vec![0.1];
        let x = [1.0, 2.0, -1.0, 0.5, 3.0, -2.0];
        let y = [0.5, -1.0, 2.0];
        let batch = Batch::new(x.to_vec(), 3, 2).unwrap();
        let (_, g) = spec.loss_and_grads(&p, &batch, &Targets::Values(y.to_vec())).unwrap();
        let mut gw = [0.0; 2];
        let mut gb = 0.0;
        for r in 0..3 {
            let resid = 0.3 * x[2 * r] - 0.7 * x[2 * r + 1] + 0.1 - y[r];
            gw[0] += 2.0 * x[2 * r] * resid / 3.0;
            gw[1] += 2.0 * x[2 * r + 1] * resid / 3.0;
            gb += 2.0 * resid / 3.0;
        }
        assert!((g[0][0] - gw[0]).abs() < 1e-14 && (g[0][1] - gw[1]).abs() < 1e-14);
        assert!((g[1][0] - gb).abs() < 1e-14);
    }

    #[test]
    fn exact_fit_is_stationary() {
        let spec = linear(1, 1);
        let mut p = spec.init(0).unwrap();
        p.layers[0].values = vec![2.0];
        p.layers[1].values = vec![1.0];
        let batch = Batch::new(vec![3.0], 1, 1).unwrap();
        let (loss, g) = spec.loss_and_grads(&p, &batch, &Targets::Values(vec![7.0])).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let spec = MlpSpec::new(vec![2, 5, 3], Activation::Tanh, Loss::SoftmaxCrossEntropy).unwrap();
        let p = spec.init(11).unwrap();
        let x = vec![0.2, -1.0, 1.5, 0.3, -0.4, 0.9];
        let labels = vec![0, 2, 1];
        let (_, g1) = spec
            .loss_and_grads(&p, &Batch::new(x.clone(), 3, 2).unwrap(), &Targets::Classes(labels.clone()))
            .unwrap();
        let x2 = [x.clone(), x].concat();
        let l2 = [labels.clone(), labels].concat();
        let (_, g2) = spec
            .loss_and_grads(&p, &Batch::new(x2, 6, 2).unwrap(), &Targets::Classes(l2))
            .unwrap();
        for (a, b) in g1.iter().flatten().zip(g2.iter().flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn grad_check_logistic_regression() {
        let spec = MlpSpec::new(vec![3, 2], Activation::Tanh, Loss::SoftmaxCrossEntropy).unwrap();
        let p = spec.init(5).unwrap();
        let batch = Batch::new(vec![0.1, 0.5, -1.2, 2.0, -0.3, 0.7, -0.8, 0.0, 1.1], 3, 3).unwrap();
        let err = spec.grad_check(&p, &batch, &Targets::Classes(vec![0, 1, 1]), 1e-5).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn grad_check_two_hidden_tanh() {
        let spec = MlpSpec::new(vec![2, 6, 5, 3], Activation::Tanh, Loss::SoftmaxCrossEntropy).unwrap();
        let p = spec.init(9).unwrap();
        let x: Vec<f64> = (0..16).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let batch = Batch::new(x, 8, 2).unwrap();
        let labels = Targets::Classes(vec![0, 1, 2, 0, 1, 2, 0, 1]);
        let err = spec.grad_check(&p, &batch, &labels, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn all_zero_system_has_zero_gradients() {
        let spec = MlpSpec::new(vec![2, 3, 2], Activation::Tanh, Loss::Mse).unwrap();
        let mut p = spec.init(0).unwrap();
        p.layers.iter_mut().for_each(|l| l.values.iter_mut().for_each(|v| *v = 0.0));
        let batch = Batch::new(vec![0.0; 4], 2, 2).unwrap();
        let targets = Targets::Values(vec![0.0; 4]);
        let (_, g) = spec.loss_and_grads(&p, &batch, &targets).unwrap();
        assert!(g.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(spec.grad_check(&p, &batch, &targets, 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn grad_check_epsilon_range() {
        let spec = linear(1, 1);
        let p = spec.init(0).unwrap();
        let batch = Batch::new(vec![1.0], 1, 1).unwrap();
        assert!(spec.grad_check(&p, &batch, &Targets::Values(vec![0.0]), 1e-2).is_err());
    }

    #[test]
    fn head_reinit_isolated_and_seeded() {
        let spec = MlpSpec::new(vec![2, 4, 4, 3], Activation::Tanh, Loss::SoftmaxCrossEntropy).unwrap();
        let mut p = spec.init(1).unwrap();
        p.snapshot_as_pretrained();
        let (s1, a) = spec.reinit_head(&p, 5, 42).unwrap();
        let (_, b) = spec.reinit_head(&p, 5, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(s1.outputs(), 5);
        assert_eq!(a.layers[4].len(), 20);
        assert!(a.layers[4].pretrained.is_none() && a.layers[5].pretrained.is_none());
        assert_eq!(&a.layers[..4], &p.layers[..4]);
        assert!(spec.reinit_head(&p, 0, 1).is_err());
    }

    #[test]
    fn shape_errors() {
        let spec = linear(2, 1);
        let p = spec.init(0).unwrap();
        let batch = Batch::new(vec![1.0, 2.0, 3.0], 1, 3).unwrap();
        assert!(matches!(spec.forward(&p, &batch), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn sgd_reduces_loss_on_fixed_batch() {
        let spec = MlpSpec::new(vec![2, 8, 8, 3], Activation::Tanh, Loss::SoftmaxCrossEntropy).unwrap();
        let mut p = spec.init(21).unwrap();
        let batch = Batch::new(vec![1.0, 0.0, 0.0, 1.0, -1.0, -1.0, 0.5, -0.5], 4, 2).unwrap();
        let targets = Targets::Classes(vec![0, 1, 2, 0]);
        let mut prev = f64::INFINITY;
        for _ in 0..10 {
            let (loss, g) = spec.loss_and_grads(&p, &batch, &targets).unwrap();
            assert!(loss < prev);
            prev = loss;
            for (layer, g) in p.layers.iter_mut().zip(&g) {
                layer.values.iter_mut().zip(g).for_each(|(v, g)| *v -= 0.05 * g);
            }
        }
    }
}
