//! Dense sigmoid layers, the sparse autoencoder objective and its exact
//! gradient, the softmax head, and a central-difference gradient checker.
//!
//! Batches are matrices with one sample per row.

use std::cell::Cell;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower/upper clamp applied to mean activations before the KL term.
pub const RHO_HAT_CLAMP: f64 = 1e-8;

thread_local! {
    static SAE_EVALUATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`sae_loss`] and [`sae_gradients`] evaluations made on the
/// calling thread so far.
pub fn sae_evaluations() -> u64 {
    SAE_EVALUATIONS.with(Cell::get)
}

fn count_sae_evaluation() {
    SAE_EVALUATIONS.with(|c| c.set(c.get() + 1));
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

/// Nested-array (row-major) JSON form for matrices.
pub(crate) mod nested {
    use ndarray::{Array1, Array2};
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.outer_iter().map(|r| r.to_vec()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix"));
        }
        let nrows = rows.len();
        Array2::from_shape_vec((nrows, ncols), rows.into_iter().flatten().collect())
            .map_err(D::Error::custom)
    }

    pub mod vector {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Array1<f64>, s: S) -> Result<S::Ok, S::Error> {
            v.as_slice()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| v.to_vec())
                .serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array1<f64>, D::Error> {
            Ok(Array1::from(Vec::<f64>::deserialize(d)?))
        }
    }
}

/// Fully connected layer with logistic activation: `sigmoid(W x + b)`.
/// `weights` is `out x in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    #[serde(with = "nested")]
    pub weights: Array2<f64>,
    #[serde(with = "nested::vector")]
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::Dimension(format!(
                "{} weight rows, {} biases",
                weights.nrows(),
                bias.len()
            )));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite layer parameter".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weights: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    /// Uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn glorot<R: rand::Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weights: glorot_matrix(output, input, rng),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }

    /// Activations for a batch (rows are samples).
    pub fn forward(&self, batch: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "layer takes {} inputs, batch has {} columns",
                self.input_dim(),
                batch.ncols()
            )));
        }
        let mut z = batch.dot(&self.weights.t());
        z += &self.bias;
        z.mapv_inplace(sigmoid);
        Ok(z)
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Dimension(e.to_string()))?;
        Ok(self.forward(view)?.into_raw_vec_and_offset().0)
    }

    pub(crate) fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend(self.weights.iter());
        out.extend(self.bias.iter());
    }

    pub(crate) fn unflatten_from(&mut self, flat: &[f64]) -> usize {
        let nw = self.weights.len();
        self.weights.iter_mut().zip(&flat[..nw]).for_each(|(w, &v)| *w = v);
        let nb = self.bias.len();
        self.bias.iter_mut().zip(&flat[nw..nw + nb]).for_each(|(b, &v)| *b = v);
        nw + nb
    }
}

fn glorot_matrix<R: rand::Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

/// Gradient of a loss with respect to one dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradient {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerGradient {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        Self {
            weights: Array2::zeros(layer.weights.raw_dim()),
            bias: Array1::zeros(layer.bias.len()),
        }
    }

    pub(crate) fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend(self.weights.iter());
        out.extend(self.bias.iter());
    }

    /// `layer -= rate * self`
    pub fn apply(&self, layer: &mut DenseLayer, rate: f64) {
        layer.weights.scaled_add(-rate, &self.weights);
        layer.bias.scaled_add(-rate, &self.bias);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparsityConfig {
    /// Weight decay coefficient.
    pub lambda: f64,
    /// Weight of the KL sparsity term.
    pub beta: f64,
    /// Target mean activation. The default is 0.3; at 0.1, plain gradient
    /// descent at rate 0.1 lets the KL term pin every unit to a constant
    /// code before any reconstruction is learned.
    pub rho: f64,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            beta: 0.3,
            rho: 0.3,
        }
    }
}

impl SparsityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be >= 0, got {}", self.beta)));
        }
        check_rho(self.rho)
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("rho must lie in (0, 1), got {rho}")))
    }
}

/// One encoder/decoder pair. The decoder maps the hidden code back to the
/// input space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseAutoencoder {
    pub encoder: DenseLayer,
    pub decoder: DenseLayer,
}

impl SparseAutoencoder {
    pub fn new(encoder: DenseLayer, decoder: DenseLayer) -> Result<Self> {
        if decoder.input_dim() != encoder.output_dim() || decoder.output_dim() != encoder.input_dim() {
            return Err(Error::Dimension(format!(
                "encoder {}->{} does not pair with decoder {}->{}",
                encoder.input_dim(),
                encoder.output_dim(),
                decoder.input_dim(),
                decoder.output_dim()
            )));
        }
        Ok(Self { encoder, decoder })
    }

    pub fn glorot<R: rand::Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let encoder = DenseLayer::glorot(input, hidden, rng);
        let decoder = DenseLayer::glorot(hidden, input, rng);
        Self { encoder, decoder }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            encoder: DenseLayer::zeros(input, hidden),
            decoder: DenseLayer::zeros(hidden, input),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Parameters in the order `W, b, W_dec, b_dec`, each row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.encoder.param_count() + self.decoder.param_count());
        self.encoder.flatten_into(&mut out);
        self.decoder.flatten_into(&mut out);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let need = self.encoder.param_count() + self.decoder.param_count();
        if flat.len() != need {
            return Err(Error::Dimension(format!("{} parameters, expected {need}", flat.len())));
        }
        let used = self.encoder.unflatten_from(flat);
        self.decoder.unflatten_from(&flat[used..]);
        Ok(())
    }
}

pub fn encode(sae: &SparseAutoencoder, x: &[f64]) -> Result<Vec<f64>> {
    sae.encoder.forward_one(x)
}

pub fn decode(sae: &SparseAutoencoder, h: &[f64]) -> Result<Vec<f64>> {
    sae.decoder.forward_one(h)
}

/// Mean hidden activation over the batch, one value per hidden unit.
pub fn mean_activation(sae: &SparseAutoencoder, batch: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    if batch.nrows() == 0 {
        return Err(Error::Empty("mean activation of an empty batch".into()));
    }
    let h = sae.encoder.forward(batch)?;
    Ok(h.mean_axis(Axis(0)).expect("non-empty").to_vec())
}

fn clamp_rho_hat(r: f64) -> f64 {
    r.clamp(RHO_HAT_CLAMP, 1.0 - RHO_HAT_CLAMP)
}

/// `sum_j KL(rho || rho_hat_j)` between Bernoulli distributions, in nats,
/// with every `rho_hat_j` clamped to `[1e-8, 1 - 1e-8]`.
pub fn kl_penalty(rho: f64, rho_hat: &[f64]) -> Result<f64> {
    check_rho(rho)?;
    Ok(rho_hat
        .iter()
        .map(|&r| {
            let r = clamp_rho_hat(r);
            rho * (rho / r).ln() + (1.0 - rho) * ((1.0 - rho) / (1.0 - r)).ln()
        })
        .sum())
}

/// The three terms of the sparse autoencoder objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SaeLossTerms {
    /// `(1/m) sum_i 0.5 ||x_i - x_hat_i||^2`
    pub reconstruction: f64,
    /// `(lambda/2) (||W||^2 + ||W_dec||^2)`
    pub weight_decay: f64,
    /// `beta * sum_j KL(rho || rho_hat_j)`
    pub sparsity: f64,
}

impl SaeLossTerms {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.weight_decay + self.sparsity
    }
}

struct SaeForward {
    hidden: Array2<f64>,
    output: Array2<f64>,
    rho_hat: Vec<f64>,
}

fn sae_forward(sae: &SparseAutoencoder, batch: ArrayView2<'_, f64>) -> Result<SaeForward> {
    if batch.nrows() == 0 {
        return Err(Error::Empty("sparse autoencoder loss of an empty batch".into()));
    }
    let hidden = sae.encoder.forward(batch)?;
    let output = sae.decoder.forward(hidden.view())?;
    let rho_hat = hidden.mean_axis(Axis(0)).expect("non-empty").to_vec();
    Ok(SaeForward {
        hidden,
        output,
        rho_hat,
    })
}

fn loss_terms(
    sae: &SparseAutoencoder,
    batch: ArrayView2<'_, f64>,
    fwd: &SaeForward,
    cfg: &SparsityConfig,
) -> Result<SaeLossTerms> {
    let m = batch.nrows() as f64;
    let sq: f64 = Zip::from(&batch)
        .and(&fwd.output)
        .fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y));
    let reconstruction = 0.5 * sq / m;
    let w2 = sae.encoder.weights.iter().map(|w| w * w).sum::<f64>()
        + sae.decoder.weights.iter().map(|w| w * w).sum::<f64>();
    let weight_decay = 0.5 * cfg.lambda * w2;
    let sparsity = if cfg.beta == 0.0 {
        0.0
    } else {
        cfg.beta * kl_penalty(cfg.rho, &fwd.rho_hat)?
    };
    Ok(SaeLossTerms {
        reconstruction,
        weight_decay,
        sparsity,
    })
}

pub fn sae_loss_terms(
    sae: &SparseAutoencoder,
    batch: ArrayView2<'_, f64>,
    cfg: &SparsityConfig,
) -> Result<SaeLossTerms> {
    count_sae_evaluation();
    cfg.validate()?;
    let fwd = sae_forward(sae, batch)?;
    loss_terms(sae, batch, &fwd, cfg)
}

/// Reconstruction error plus weight decay on both weight matrices (not the
/// biases) plus the weighted KL sparsity penalty.
pub fn sae_loss(sae: &SparseAutoencoder, batch: ArrayView2<'_, f64>, cfg: &SparsityConfig) -> Result<f64> {
    Ok(sae_loss_terms(sae, batch, cfg)?.total())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaeGradients {
    /// Loss at the point where the gradient was taken.
    pub loss: f64,
    pub encoder: LayerGradient,
    pub decoder: LayerGradient,
    /// Part of the encoder gradient that flows through the KL term.
    pub sparsity_path_norm: f64,
}

impl SaeGradients {
    /// Same layout as [`SparseAutoencoder::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.encoder.flatten_into(&mut out);
        self.decoder.flatten_into(&mut out);
        out
    }

    pub fn apply(&self, sae: &mut SparseAutoencoder, rate: f64) {
        self.encoder.apply(&mut sae.encoder, rate);
        self.decoder.apply(&mut sae.decoder, rate);
    }
}

/// Exact gradient of [`sae_loss`] by backpropagation, including the
/// dependence of the mean activations on the encoder parameters.
pub fn sae_gradients(
    sae: &SparseAutoencoder,
    batch: ArrayView2<'_, f64>,
    cfg: &SparsityConfig,
) -> Result<SaeGradients> {
    count_sae_evaluation();
    cfg.validate()?;
    let fwd = sae_forward(sae, batch)?;
    let loss = loss_terms(sae, batch, &fwd, cfg)?.total();
    let m = batch.nrows() as f64;

    // output pre-activation
    let mut d_out = &fwd.output - &batch;
    Zip::from(&mut d_out)
        .and(&fwd.output)
        .for_each(|d, &y| *d *= y * (1.0 - y) / m);

    let mut dec_w = d_out.t().dot(&fwd.hidden);
    dec_w.scaled_add(cfg.lambda, &sae.decoder.weights);
    let dec_b = d_out.sum_axis(Axis(0));

    let mut d_hidden = d_out.dot(&sae.decoder.weights);
    let mut sparsity_path_norm = 0.0;
    if cfg.beta != 0.0 {
        let rho = cfg.rho;
        let kl_grad: Array1<f64> = fwd
            .rho_hat
            .iter()
            .map(|&r| {
                if r <= RHO_HAT_CLAMP || r >= 1.0 - RHO_HAT_CLAMP {
                    0.0
                } else {
                    cfg.beta * (-rho / r + (1.0 - rho) / (1.0 - r)) / m
                }
            })
            .collect();
        sparsity_path_norm = kl_grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        d_hidden += &kl_grad;
    }
    Zip::from(&mut d_hidden)
        .and(&fwd.hidden)
        .for_each(|d, &h| *d *= h * (1.0 - h));

    let mut enc_w = d_hidden.t().dot(&batch);
    enc_w.scaled_add(cfg.lambda, &sae.encoder.weights);
    let enc_b = d_hidden.sum_axis(Axis(0));

    Ok(SaeGradients {
        loss,
        encoder: LayerGradient {
            weights: enc_w,
            bias: enc_b,
        },
        decoder: LayerGradient {
            weights: dec_w,
            bias: dec_b,
        },
        sparsity_path_norm,
    })
}

/// Softmax classifier head: `p = softmax(theta z)`, `theta` is `k x dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxLayer {
    #[serde(with = "nested")]
    pub theta: Array2<f64>,
}

impl SoftmaxLayer {
    pub fn zeros(input: usize, classes: usize) -> Self {
        Self {
            theta: Array2::zeros((classes, input)),
        }
    }

    pub fn glorot<R: rand::Rng>(input: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            theta: glorot_matrix(classes, input, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.theta.ncols()
    }

    pub fn classes(&self) -> usize {
        self.theta.nrows()
    }

    /// Class probabilities for a batch of codes, one row per sample.
    pub fn forward(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "softmax takes {} inputs, got {}",
                self.input_dim(),
                z.ncols()
            )));
        }
        let mut logits = z.dot(&self.theta.t()).as_standard_layout().into_owned();
        for mut row in logits.outer_iter_mut() {
            softmax_in_place(row.as_slice_mut().expect("standard layout"));
        }
        Ok(logits)
    }
}

/// Stable softmax (max-subtracted).
pub fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_forward(layer: &SoftmaxLayer, z: &[f64]) -> Result<Vec<f64>> {
    let view = ArrayView2::from_shape((1, z.len()), z).map_err(|e| Error::Dimension(e.to_string()))?;
    Ok(layer.forward(view)?.into_raw_vec_and_offset().0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    pub numeric: Vec<f64>,
    pub relative_errors: Vec<f64>,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl GradientCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

/// Denominator floor in [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Central-difference estimate `(f(p + h e_i) - f(p - h e_i)) / 2h` of every
/// coordinate, compared against `analytic`.
pub fn gradient_check<F>(mut loss: F, params: &[f64], analytic: &[f64], step: f64, tolerance: f64) -> Result<GradientCheck>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    if params.len() != analytic.len() {
        return Err(Error::Dimension(format!(
            "{} parameters, {} gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let mut p = params.to_vec();
    let mut numeric = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let up = loss(&p);
        p[i] = orig - step;
        let down = loss(&p);
        p[i] = orig;
        numeric.push((up - down) / (2.0 * step));
    }
    let relative_errors: Vec<f64> = numeric
        .iter()
        .zip(analytic)
        .map(|(&n, &a)| relative_error(a, n))
        .collect();
    let max_relative_error = relative_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradientCheck {
        numeric,
        relative_errors,
        max_relative_error,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    use crate::rng;
    use rand::Rng as _;

    fn random_batch(m: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::seeded(seed);
        Array2::from_shape_fn((m, d), |_| r.gen_range(0.0..1.0))
    }

    #[test]
    fn encode_examples() {
        let sae = SparseAutoencoder::zeros(3, 2);
        assert_eq!(encode(&sae, &[1.0, -2.0, 3.0]).unwrap(), vec![0.5, 0.5]);

        let mut sat = SparseAutoencoder::zeros(1, 1);
        sat.encoder.bias[0] = 20.0;
        assert!(encode(&sat, &[0.0]).unwrap()[0] > 0.999999);

        let mut one = SparseAutoencoder::zeros(1, 1);
        one.encoder.weights[[0, 0]] = 1.0;
        assert_eq!(encode(&one, &[0.0]).unwrap(), vec![0.5]);
        assert!(matches!(encode(&sae, &[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn decode_examples() {
        let sae = SparseAutoencoder::zeros(1, 1);
        let h = encode(&sae, &[0.5]).unwrap();
        let x_hat = decode(&sae, &h).unwrap();
        assert_eq!(x_hat, vec![0.5]);
        let loss = sae_loss(&sae, array![[0.5]].view(), &SparsityConfig { lambda: 0.0, beta: 0.0, rho: 0.1 }).unwrap();
        assert_eq!(loss, 0.0);

        let mut r = rng::seeded(4);
        let random = SparseAutoencoder::glorot(7, 3, &mut r);
        let x = vec![0.3; 7];
        assert_eq!(decode(&random, &encode(&random, &x).unwrap()).unwrap().len(), 7);
        assert!(decode(&random, &x).is_err());
    }

    #[test]
    fn mean_activation_examples() {
        let sae = SparseAutoencoder::zeros(4, 3);
        let batch = random_batch(5, 4, 1);
        assert_eq!(mean_activation(&sae, batch.view()).unwrap(), vec![0.5; 3]);

        let mut r = rng::seeded(2);
        let sae = SparseAutoencoder::glorot(4, 3, &mut r);
        let one = batch.slice(ndarray::s![0..1, ..]);
        let rho = mean_activation(&sae, one).unwrap();
        assert_eq!(rho, encode(&sae, one.row(0).as_slice().unwrap()).unwrap());

        let doubled = ndarray::concatenate(Axis(0), &[batch.view(), batch.view()]).unwrap();
        let a = mean_activation(&sae, batch.view()).unwrap();
        let b = mean_activation(&sae, doubled.view()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(mean_activation(&sae, Array2::zeros((0, 4)).view()).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_penalty(0.3, &[0.3, 0.3]).unwrap(), 0.0);
        // 0.2 ln(0.4) + 0.8 ln(1.6)
        let expected = 0.2 * 0.4f64.ln() + 0.8 * 1.6f64.ln();
        let kl = kl_penalty(0.2, &[0.5]).unwrap();
        assert!((kl - expected).abs() < 1e-15);
        assert!((kl - 0.19274).abs() < 1e-5);

        let edge = kl_penalty(0.2, &[0.0]).unwrap();
        let expected = 0.2 * (0.2f64 / 1e-8).ln() + 0.8 * (0.8f64 / (1.0 - 1e-8)).ln();
        assert!((edge - expected).abs() < 1e-12);
        assert!((edge - 3.1837).abs() < 1e-4);
        assert!(kl_penalty(1.0, &[0.5]).is_err());
        assert!(kl_penalty(0.0, &[0.5]).is_err());
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(rho in 0.01f64..0.99, hats in proptest::collection::vec(0.0f64..1.0, 1..10)) {
            prop_assert!(kl_penalty(rho, &hats).unwrap() >= 0.0);
        }

        #[test]
        fn softmax_sums_to_one(z in proptest::collection::vec(-50.0f64..50.0, 1..8)) {
            let k = z.len();
            let mut theta = Array2::zeros((k, k));
            for i in 0..k { theta[[i, i]] = 1.0; }
            let p = softmax_forward(&SoftmaxLayer { theta }, &z).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn loss_term_isolation() {
        let mut r = rng::seeded(9);
        let sae = SparseAutoencoder::glorot(6, 4, &mut r);
        let batch = random_batch(5, 6, 3);
        let plain = SparsityConfig { lambda: 0.0, beta: 0.0, rho: 0.1 };
        let recon = {
            let mut total = 0.0;
            for row in batch.outer_iter() {
                let x = row.to_vec();
                let y = decode(&sae, &encode(&sae, &x).unwrap()).unwrap();
                total += 0.5 * x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            total / 5.0
        };
        assert!((sae_loss(&sae, batch.view(), &plain).unwrap() - recon).abs() < 1e-12);

        let cfg = SparsityConfig { lambda: 1e-3, beta: 0.3, rho: 0.1 };
        let decay = 0.5 * 1e-3
            * (sae.encoder.weights.iter().chain(sae.decoder.weights.iter()).map(|w| w * w).sum::<f64>());
        let sparsity = 0.3 * kl_penalty(0.1, &mean_activation(&sae, batch.view()).unwrap()).unwrap();
        let total = sae_loss(&sae, batch.view(), &cfg).unwrap();
        assert!((total - (recon + decay + sparsity)).abs() < 1e-12);
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let mut r = rng::seeded(10);
        let sae = SparseAutoencoder::glorot(5, 3, &mut r);
        let batch = random_batch(6, 5, 4);
        let rev: Vec<usize> = (0..6).rev().collect();
        let shuffled = batch.select(Axis(0), &rev);
        let cfg = SparsityConfig::default();
        let a = sae_loss(&sae, batch.view(), &cfg).unwrap();
        let b = sae_loss(&sae, shuffled.view(), &cfg).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn gradient_vanishes_at_perfect_reconstruction() {
        let x: [f64; 3] = [0.2, 0.7, 0.4];
        let batch = Array2::from_shape_fn((4, 3), |(_, j)| x[j]);
        let mut r = rng::seeded(1);
        let mut sae = SparseAutoencoder::glorot(3, 2, &mut r);
        sae.decoder.weights.fill(0.0);
        for (b, &v) in sae.decoder.bias.iter_mut().zip(&x) {
            *b = (v / (1.0 - v)).ln();
        }
        let cfg = SparsityConfig { lambda: 0.0, beta: 0.0, rho: 0.1 };
        let g = sae_gradients(&sae, batch.view(), &cfg).unwrap();
        let norm = g.to_flat().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-8, "gradient norm {norm}");
        assert!(g.loss < 1e-20);
    }

    #[test]
    fn sparsity_path_is_off_without_beta() {
        let mut r = rng::seeded(5);
        let sae = SparseAutoencoder::glorot(4, 3, &mut r);
        let batch = random_batch(3, 4, 6);
        let off = sae_gradients(&sae, batch.view(), &SparsityConfig { lambda: 0.0, beta: 0.0, rho: 0.1 }).unwrap();
        assert_eq!(off.sparsity_path_norm, 0.0);
        let on = sae_gradients(&sae, batch.view(), &SparsityConfig { lambda: 0.0, beta: 0.3, rho: 0.1 }).unwrap();
        assert!(on.sparsity_path_norm > 0.0);
        // decoder gradient has no KL dependence
        assert_eq!(off.decoder, on.decoder);
    }

    #[test]
    fn sae_gradient_matches_finite_differences() {
        let cfg = SparsityConfig { lambda: 1e-3, beta: 0.3, rho: 0.1 };
        for seed in 0..5 {
            let mut r = rng::seeded(seed);
            let sae = SparseAutoencoder::glorot(10, 8, &mut r);
            let batch = random_batch(6, 10, seed + 100);
            let g = sae_gradients(&sae, batch.view(), &cfg).unwrap();
            let mut probe = sae.clone();
            let check = gradient_check(
                |p| {
                    probe.set_flat(p).unwrap();
                    sae_loss(&probe, batch.view(), &cfg).unwrap()
                },
                &sae.to_flat(),
                &g.to_flat(),
                1e-4,
                1e-5,
            )
            .unwrap();
            assert!(check.passed(), "seed {seed}: {}", check.max_relative_error);
        }
    }

    #[test]
    fn gradient_check_on_quadratic_and_zero() {
        // f(p) = sum_i (i + 1) p_i^2 + p_0 p_1, gradient known in closed form
        let f = |p: &[f64]| p.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum::<f64>() + p[0] * p[1];
        let p = [0.3, -1.2, 2.0, 0.7];
        let mut grad: Vec<f64> = p.iter().enumerate().map(|(i, v)| 2.0 * (i as f64 + 1.0) * v).collect();
        grad[0] += p[1];
        grad[1] += p[0];
        let check = gradient_check(f, &p, &grad, 1e-5, 1e-9).unwrap();
        assert!(check.passed(), "{}", check.max_relative_error);

        let zero = gradient_check(|_| 0.0, &p, &[0.0; 4], 1e-5, 1e-9).unwrap();
        assert_eq!(zero.numeric, vec![0.0; 4]);
        assert_eq!(zero.max_relative_error, 0.0);
        assert!(gradient_check(f, &p, &grad, 0.0, 1e-9).is_err());
    }

    #[test]
    fn softmax_examples() {
        let uniform = softmax_forward(&SoftmaxLayer::zeros(3, 4), &[1.0, 2.0, 3.0]).unwrap();
        assert!(uniform.iter().all(|&p| (p - 0.25).abs() < 1e-15));

        let ident = SoftmaxLayer { theta: Array2::eye(4) };
        let logits: Vec<f64> = (1..=4).map(|v| (v as f64).ln()).collect();
        let p = softmax_forward(&ident, &logits).unwrap();
        for (got, want) in p.iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((got - want).abs() < 1e-15);
        }
        let shifted: Vec<f64> = logits.iter().map(|v| v + 123.0).collect();
        let q = softmax_forward(&ident, &shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(softmax_forward(&ident, &[1.0]).is_err());
    }

    #[test]
    fn evaluation_counter_counts_loss_and_gradient_calls() {
        let before = sae_evaluations();
        let sae = SparseAutoencoder::zeros(2, 2);
        let batch = array![[0.1, 0.2]];
        sae_loss(&sae, batch.view(), &SparsityConfig::default()).unwrap();
        sae_gradients(&sae, batch.view(), &SparsityConfig::default()).unwrap();
        assert_eq!(sae_evaluations() - before, 2);
    }
}
