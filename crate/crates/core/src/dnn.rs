//! Stacked sparse autoencoder classifier: greedy layer-wise pretraining,
//! softmax head pretraining on the last code, joint fine-tuning on labels,
//! prediction, and the JSON model file.

use std::path::Path;
use std::time::Instant;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{phase, Timings};
use crate::ingest::{self, Dataset, NormalizationParams};
use crate::mrmr::{self, FeatureRanking, MrmrConfig};
use crate::nn::{self, DenseLayer, LayerGradient, SoftmaxLayer, SparseAutoencoder, SparsityConfig};
use crate::{par, rng};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Rows per block when prediction is spread over workers. Fixed so results
/// do not depend on the worker count.
const PREDICT_BLOCK: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinetuneLoss {
    /// `(1/m) sum_i 0.5 ||y_i - p_i||^2` between one-hot labels and softmax outputs.
    #[default]
    #[serde(rename = "mean-squared-error", alias = "mse")]
    MeanSquaredError,
    /// `-(1/m) sum_i ln p_i[y_i]`
    #[serde(rename = "cross-entropy")]
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs_pretrain: usize,
    /// Epochs of softmax-head pretraining on frozen codes.
    pub epochs_softmax: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub finetune_loss: FinetuneLoss,
    /// Encoder layers held fixed during fine-tuning (0-based).
    pub frozen_layers: Vec<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs_pretrain: 100,
            epochs_softmax: 100,
            epochs_finetune: 200,
            batch_size: 32,
            seed: 0,
            finetune_loss: FinetuneLoss::MeanSquaredError,
            frozen_layers: Vec::new(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Layer widths `[input, h1, ..., hL]` plus the training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub layer_dims: Vec<usize>,
    #[serde(default)]
    pub sparsity: SparsityConfig,
    #[serde(default)]
    pub trainer: TrainingConfig,
}

impl Architecture {
    pub fn new(layer_dims: Vec<usize>) -> Self {
        Self {
            layer_dims,
            sparsity: SparsityConfig::default(),
            trainer: TrainingConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "architecture needs an input and at least one hidden layer, got {:?}",
                self.layer_dims
            )));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer widths must be positive, got {:?}",
                self.layer_dims
            )));
        }
        self.sparsity.validate()?;
        self.trainer.validate()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn code_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated")
    }
}

/// Encoder stack plus softmax head: the part of a model that training moves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    #[serde(rename = "layers")]
    pub encoders: Vec<DenseLayer>,
    pub softmax: SoftmaxLayer,
}

/// Gradient of a fine-tuning loss with respect to every network parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGradients {
    pub loss: f64,
    pub encoders: Vec<LayerGradient>,
    pub softmax: Array2<f64>,
}

impl NetworkGradients {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.encoders {
            g.flatten_into(&mut out);
        }
        out.extend(self.softmax.iter());
        out
    }
}

impl Network {
    pub fn new(encoders: Vec<DenseLayer>, softmax: SoftmaxLayer) -> Result<Self> {
        let net = Self { encoders, softmax };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoders.is_empty() {
            return Err(Error::Dimension("network has no encoder layers".into()));
        }
        for (l, pair) in self.encoders.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Dimension(format!(
                    "encoder {l} emits {} values, encoder {} takes {}",
                    pair[0].output_dim(),
                    l + 1,
                    pair[1].input_dim()
                )));
            }
        }
        let code = self.encoders.last().expect("non-empty").output_dim();
        if self.softmax.input_dim() != code {
            return Err(Error::Dimension(format!(
                "softmax takes {} inputs, last encoder emits {code}",
                self.softmax.input_dim()
            )));
        }
        if self.softmax.classes() < 2 {
            return Err(Error::InvalidArgument("softmax head needs at least 2 classes".into()));
        }
        if !self.encoders.iter().all(DenseLayer::is_finite) || !self.softmax.theta.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite network parameter".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.encoders[0].input_dim()
    }

    pub fn classes(&self) -> usize {
        self.softmax.classes()
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.encoders.iter().map(DenseLayer::output_dim))
            .collect()
    }

    /// Output of the last encoder.
    pub fn encode(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut h = self.encoders[0].forward(x)?;
        for layer in &self.encoders[1..] {
            h = layer.forward(h.view())?;
        }
        Ok(h)
    }

    pub fn probabilities(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.softmax.forward(self.encode(x)?.view())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.encoders {
            layer.flatten_into(&mut out);
        }
        out.extend(self.softmax.theta.iter());
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let need = self.encoders.iter().map(DenseLayer::param_count).sum::<usize>() + self.softmax.theta.len();
        if flat.len() != need {
            return Err(Error::Dimension(format!("{} parameters, expected {need}", flat.len())));
        }
        let mut at = 0;
        for layer in &mut self.encoders {
            at += layer.unflatten_from(&flat[at..]);
        }
        self.softmax.theta.iter_mut().zip(&flat[at..]).for_each(|(t, &v)| *t = v);
        Ok(())
    }

    /// Fine-tuning loss on a batch; `labels` are `1..=k`.
    pub fn loss(&self, x: ArrayView2<'_, f64>, labels: &[usize], kind: FinetuneLoss) -> Result<f64> {
        let probs = self.probabilities(x)?;
        loss_from_probabilities(&probs, labels, kind)
    }

    /// Exact gradient of [`loss`](Self::loss) through the softmax head and
    /// every encoder.
    pub fn gradients(&self, x: ArrayView2<'_, f64>, labels: &[usize], kind: FinetuneLoss) -> Result<NetworkGradients> {
        check_labels(labels, x.nrows(), self.classes())?;
        let m = x.nrows() as f64;
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(self.encoders.len());
        for (l, layer) in self.encoders.iter().enumerate() {
            let next = if l == 0 {
                layer.forward(x)?
            } else {
                layer.forward(acts[l - 1].view())?
            };
            acts.push(next);
        }
        let code = acts.last().expect("non-empty");
        let probs = self.softmax.forward(code.view())?;
        let loss = loss_from_probabilities(&probs, labels, kind)?;

        let mut d_logits = probs.clone();
        match kind {
            FinetuneLoss::CrossEntropy => {
                for (i, &y) in labels.iter().enumerate() {
                    d_logits[[i, y - 1]] -= 1.0;
                }
                d_logits /= m;
            }
            FinetuneLoss::MeanSquaredError => {
                // dL/dp = (p - y)/m, pushed through the softmax Jacobian
                for (i, &y) in labels.iter().enumerate() {
                    let p = probs.row(i);
                    let mut dp: Vec<f64> = p.iter().map(|&v| v / m).collect();
                    dp[y - 1] -= 1.0 / m;
                    let inner: f64 = dp.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
                    for (c, d) in d_logits.row_mut(i).iter_mut().enumerate() {
                        *d = p[c] * (dp[c] - inner);
                    }
                }
            }
        }

        let softmax_grad = d_logits.t().dot(code);
        let mut delta = d_logits.dot(&self.softmax.theta);
        let mut enc_grads = Vec::with_capacity(self.encoders.len());
        for l in (0..self.encoders.len()).rev() {
            Zip::from(&mut delta)
                .and(&acts[l])
                .for_each(|d, &a| *d *= a * (1.0 - a));
            let weights = if l == 0 {
                delta.t().dot(&x)
            } else {
                delta.t().dot(&acts[l - 1])
            };
            let bias = delta.sum_axis(Axis(0));
            if l > 0 {
                delta = delta.dot(&self.encoders[l].weights);
            }
            enc_grads.push(LayerGradient { weights, bias });
        }
        enc_grads.reverse();
        Ok(NetworkGradients {
            loss,
            encoders: enc_grads,
            softmax: softmax_grad,
        })
    }
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l > k) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 1..={k}")));
    }
    Ok(())
}

fn loss_from_probabilities(probs: &Array2<f64>, labels: &[usize], kind: FinetuneLoss) -> Result<f64> {
    check_labels(labels, probs.nrows(), probs.ncols())?;
    let m = probs.nrows() as f64;
    let total: f64 = match kind {
        FinetuneLoss::MeanSquaredError => probs
            .outer_iter()
            .zip(labels)
            .map(|(p, &y)| {
                0.5 * p
                    .iter()
                    .enumerate()
                    .map(|(c, &v)| {
                        let t = if c + 1 == y { 1.0 } else { 0.0 };
                        (t - v) * (t - v)
                    })
                    .sum::<f64>()
            })
            .sum(),
        FinetuneLoss::CrossEntropy => probs
            .outer_iter()
            .zip(labels)
            .map(|(p, &y)| -p[y - 1].max(f64::MIN_POSITIVE).ln())
            .sum(),
    };
    Ok(total / m)
}

fn shuffled_batches(n: usize, batch_size: usize, rng: &mut rng::Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn ensure_finite(loss: f64, what: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numerical(format!("{what} loss became {loss}")))
    }
}

/// Training record of one greedy autoencoder layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub epochs: usize,
    /// Objective over the layer's full input at initialization.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean batch objective per epoch.
    pub epoch_losses: Vec<f64>,
    pub decoder: DenseLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainedLayer {
    pub sae: SparseAutoencoder,
    pub record: PretrainRecord,
}

/// Trains one sparse autoencoder on `input` by mini-batch gradient descent.
pub fn train_autoencoder(
    input: ArrayView2<'_, f64>,
    hidden: usize,
    sparsity: &SparsityConfig,
    trainer: &TrainingConfig,
    layer: usize,
) -> Result<PretrainedLayer> {
    let mut init_rng = rng::seeded(rng::derive_indexed(trainer.seed, "sae-init", layer));
    let mut sae = SparseAutoencoder::glorot(input.ncols(), hidden, &mut init_rng);
    let mut shuffle = rng::seeded(rng::derive_indexed(trainer.seed, "sae-shuffle", layer));
    let initial_loss = ensure_finite(nn::sae_loss(&sae, input, sparsity)?, "autoencoder")?;
    let mut epoch_losses = Vec::with_capacity(trainer.epochs_pretrain);
    for _ in 0..trainer.epochs_pretrain {
        let mut total = 0.0;
        let batches = shuffled_batches(input.nrows(), trainer.batch_size, &mut shuffle);
        for idx in &batches {
            let batch = input.select(Axis(0), idx);
            let grads = nn::sae_gradients(&sae, batch.view(), sparsity)?;
            total += ensure_finite(grads.loss, "autoencoder")?;
            grads.apply(&mut sae, trainer.learning_rate);
        }
        epoch_losses.push(total / batches.len() as f64);
    }
    let final_loss = ensure_finite(nn::sae_loss(&sae, input, sparsity)?, "autoencoder")?;
    let record = PretrainRecord {
        input_dim: input.ncols(),
        hidden_dim: hidden,
        epochs: trainer.epochs_pretrain,
        initial_loss,
        final_loss,
        epoch_losses,
        decoder: sae.decoder.clone(),
    };
    Ok(PretrainedLayer { sae, record })
}

/// Greedy layer-wise pretraining: autoencoder `l` is trained on the codes
/// of autoencoder `l - 1`.
pub fn pretrain_stack(data: ArrayView2<'_, f64>, arch: &Architecture) -> Result<Vec<PretrainedLayer>> {
    arch.validate()?;
    if data.ncols() != arch.input_dim() {
        return Err(Error::Dimension(format!(
            "architecture expects {} inputs, data has {} columns",
            arch.input_dim(),
            data.ncols()
        )));
    }
    let mut layers = Vec::with_capacity(arch.layer_dims.len() - 1);
    let mut input = data.to_owned();
    for (l, &hidden) in arch.layer_dims[1..].iter().enumerate() {
        let trained = train_autoencoder(input.view(), hidden, &arch.sparsity, &arch.trainer, l)?;
        input = trained.sae.encoder.forward(input.view())?;
        layers.push(trained);
    }
    Ok(layers)
}

/// Loss trace of a supervised training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: usize,
    pub learning_rate: f64,
    pub loss: FinetuneLoss,
    /// Mean batch loss per epoch.
    pub trace: Vec<f64>,
}

/// Fits the softmax head by mini-batch gradient descent on cross-entropy
/// over frozen codes. `labels` are `1..=k`.
pub fn pretrain_softmax(
    encodings: ArrayView2<'_, f64>,
    labels: &[usize],
    k: usize,
    trainer: &TrainingConfig,
) -> Result<(SoftmaxLayer, TrainRecord)> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("softmax head needs at least 2 classes, got {k}")));
    }
    check_labels(labels, encodings.nrows(), k)?;
    trainer.validate()?;
    let m_total = encodings.nrows();
    let mut init = rng::seeded(rng::derive(trainer.seed, "softmax-init"));
    let mut layer = SoftmaxLayer::glorot(encodings.ncols(), k, &mut init);
    let mut shuffle = rng::seeded(rng::derive(trainer.seed, "softmax-shuffle"));
    let mut trace = Vec::with_capacity(trainer.epochs_softmax);
    for _ in 0..trainer.epochs_softmax {
        let mut total = 0.0;
        let batches = shuffled_batches(m_total, trainer.batch_size, &mut shuffle);
        for idx in &batches {
            let z = encodings.select(Axis(0), idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut d = layer.forward(z.view())?;
            total += ensure_finite(loss_from_probabilities(&d, &y, FinetuneLoss::CrossEntropy)?, "softmax")?;
            for (i, &c) in y.iter().enumerate() {
                d[[i, c - 1]] -= 1.0;
            }
            d /= idx.len() as f64;
            layer.theta.scaled_add(-trainer.learning_rate, &d.t().dot(&z));
        }
        trace.push(total / batches.len() as f64);
    }
    Ok((
        layer,
        TrainRecord {
            epochs: trainer.epochs_softmax,
            learning_rate: trainer.learning_rate,
            loss: FinetuneLoss::CrossEntropy,
            trace,
        },
    ))
}

/// Joint mini-batch gradient descent over every unfrozen encoder and the
/// softmax head.
pub fn fine_tune_network(
    net: &mut Network,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    trainer: &TrainingConfig,
) -> Result<TrainRecord> {
    trainer.validate()?;
    check_labels(labels, x.nrows(), net.classes())?;
    if x.ncols() != net.input_dim() {
        return Err(Error::Dimension(format!(
            "network takes {} inputs, data has {}",
            net.input_dim(),
            x.ncols()
        )));
    }
    let mut shuffle = rng::seeded(rng::derive(trainer.seed, "finetune-shuffle"));
    let mut trace = Vec::with_capacity(trainer.epochs_finetune);
    let lr = trainer.learning_rate;
    for _ in 0..trainer.epochs_finetune {
        let mut total = 0.0;
        let batches = shuffled_batches(x.nrows(), trainer.batch_size, &mut shuffle);
        for idx in &batches {
            let xb = x.select(Axis(0), idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let g = net.gradients(xb.view(), &yb, trainer.finetune_loss)?;
            total += ensure_finite(g.loss, "fine-tuning")?;
            for (l, (layer, grad)) in net.encoders.iter_mut().zip(&g.encoders).enumerate() {
                if !trainer.frozen_layers.contains(&l) {
                    grad.apply(layer, lr);
                }
            }
            net.softmax.theta.scaled_add(-lr, &g.softmax);
        }
        trace.push(total / batches.len() as f64);
    }
    Ok(TrainRecord {
        epochs: trainer.epochs_finetune,
        learning_rate: lr,
        loss: trainer.finetune_loss,
        trace,
    })
}

/// Where a transferred network's encoders came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub source_layer_dims: Vec<usize>,
    /// `"pretrained"` or `"fine-tuned"` source encoders.
    pub encoders_from: String,
    /// Always false: the target side never trains autoencoders.
    pub target_pretraining: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default)]
    pub pretraining: Vec<PretrainRecord>,
    #[serde(default)]
    pub softmax_pretraining: Option<TrainRecord>,
    #[serde(default)]
    pub finetuning: Vec<TrainRecord>,
    #[serde(default)]
    pub transfer: Option<TransferRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    pub layer_dims: Vec<usize>,
    pub sparsity: SparsityConfig,
}

/// A trained classifier with everything needed to score raw rows: the
/// normalizer fitted on the training split, the optional mRMR column order,
/// and the class names behind labels `1..=k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DnnModel {
    pub arch: ModelArch,
    pub normalizer: NormalizationParams,
    pub selected_features: Option<Vec<usize>>,
    pub class_mapping: Vec<String>,
    #[serde(flatten)]
    pub network: Network,
    /// Encoders as they stood after autoencoder pretraining, before any
    /// fine-tuning. Transfer copies these.
    #[serde(default)]
    pub pretrained_layers: Option<Vec<DenseLayer>>,
    #[serde(default)]
    pub provenance: Provenance,
}

#[derive(Serialize)]
struct ModelFileRef<'a> {
    schema_version: u32,
    #[serde(flatten)]
    model: &'a DnnModel,
}

impl DnnModel {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.arch.layer_dims != self.network.layer_dims() {
            return Err(Error::Dimension(format!(
                "architecture {:?} disagrees with layers {:?}",
                self.arch.layer_dims,
                self.network.layer_dims()
            )));
        }
        if self.normalizer.min.len() != self.normalizer.max.len() {
            return Err(Error::Dimension("normalizer min/max lengths differ".into()));
        }
        let d = self.normalizer.dim();
        let input = match &self.selected_features {
            Some(sel) => {
                if let Some(&bad) = sel.iter().find(|&&f| f >= d) {
                    return Err(Error::Dimension(format!("selected feature {bad} outside {d} columns")));
                }
                let mut uniq = sel.clone();
                uniq.sort_unstable();
                uniq.dedup();
                if uniq.len() != sel.len() {
                    return Err(Error::InvalidArgument("selected features repeat".into()));
                }
                sel.len()
            }
            None => d,
        };
        if input != self.network.input_dim() {
            return Err(Error::Dimension(format!(
                "network takes {} inputs, preprocessing yields {input}",
                self.network.input_dim()
            )));
        }
        if self.class_mapping.len() != self.network.classes() {
            return Err(Error::Dimension(format!(
                "{} class names for a {}-way head",
                self.class_mapping.len(),
                self.network.classes()
            )));
        }
        let mut names = self.class_mapping.clone();
        names.sort();
        names.dedup();
        if names.len() != self.class_mapping.len() {
            return Err(Error::InvalidArgument("class names repeat".into()));
        }
        if let Some(pre) = &self.pretrained_layers {
            let dims: Vec<usize> = std::iter::once(pre.first().map_or(0, DenseLayer::input_dim))
                .chain(pre.iter().map(DenseLayer::output_dim))
                .collect();
            if dims != self.arch.layer_dims {
                return Err(Error::Dimension("pretrained layers disagree with the architecture".into()));
            }
        }
        Ok(())
    }

    pub fn raw_input_dim(&self) -> usize {
        self.normalizer.dim()
    }

    /// Normalizes (clamped) then applies the stored column selection.
    pub fn prepare(&self, data: &Array2<f64>) -> Result<Array2<f64>> {
        let normalized = self.normalizer.apply_matrix(data)?;
        Ok(match &self.selected_features {
            Some(sel) => normalized.select(Axis(1), sel),
            None => normalized,
        })
    }

    /// Labels of `data` expressed against this model's classes.
    pub fn labels_for(&self, data: &Dataset) -> Result<Vec<usize>> {
        Ok(data.remap_classes(&self.class_mapping)?.labels().to_vec())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&ModelFileRef {
            schema_version: MODEL_SCHEMA_VERSION,
            model: self,
        })
        .map_err(|e| Error::CorruptModel(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::CorruptModel(e.to_string()))?;
        let version = value
            .get("schema_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::CorruptModel("missing schema_version".into()))?;
        if version != u64::from(MODEL_SCHEMA_VERSION) {
            return Err(Error::SchemaVersion {
                found: u32::try_from(version).unwrap_or(u32::MAX),
                supported: MODEL_SCHEMA_VERSION,
            });
        }
        let model: DnnModel =
            serde_json::from_value(value).map_err(|e| Error::CorruptModel(e.to_string()))?;
        model.validate().map_err(|e| Error::CorruptModel(e.to_string()))?;
        Ok(model)
    }
}

pub fn save_model(model: &DnnModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = model.to_json()?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<DnnModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DnnModel::from_json(&text)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Predicted labels `1..=k`.
    pub labels: Vec<usize>,
    /// One probability row per sample.
    pub probabilities: Array2<f64>,
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Scores already-prepared rows.
pub fn predict_prepared(net: &Network, x: ArrayView2<'_, f64>) -> Result<Prediction> {
    let n = x.nrows();
    let blocks = n.div_ceil(PREDICT_BLOCK).max(1);
    let parts = par::map_range(blocks, |b| {
        let lo = b * PREDICT_BLOCK;
        let hi = ((b + 1) * PREDICT_BLOCK).min(n);
        net.probabilities(x.slice(s![lo..hi, ..]))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let probabilities = concatenate(Axis(0), &views).map_err(|e| Error::Dimension(e.to_string()))?;
    let labels = probabilities
        .outer_iter()
        .map(|row| argmax(row.as_slice().expect("standard layout")) + 1)
        .collect();
    Ok(Prediction {
        labels,
        probabilities,
    })
}

/// Normalizes, selects and scores raw rows.
pub fn predict(model: &DnnModel, data: &Array2<f64>) -> Result<Prediction> {
    if data.ncols() != model.raw_input_dim() {
        return Err(Error::Dimension(format!(
            "model expects {} raw columns, data has {}",
            model.raw_input_dim(),
            data.ncols()
        )));
    }
    predict_prepared(&model.network, model.prepare(data)?.view())
}

/// Fine-tunes a copy of `model` on raw `data`.
pub fn fine_tune(model: &DnnModel, data: &Dataset, trainer: &TrainingConfig) -> Result<(DnnModel, TrainRecord)> {
    let labels = model.labels_for(data)?;
    let x = model.prepare(data.matrix())?;
    let mut out = model.clone();
    let record = fine_tune_network(&mut out.network, x.view(), &labels, trainer)?;
    out.provenance.finetuning.push(record.clone());
    Ok((out, record))
}

/// Full from-scratch recipe: normalization, optional mRMR, optional
/// sparsity sweep, architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub mrmr: Option<MrmrConfig>,
    pub arch: Architecture,
    /// Candidate sparsity targets; the best by validation accuracy is used.
    #[serde(default)]
    pub rho_sweep: Option<Vec<f64>>,
}

impl PipelineConfig {
    pub fn new(arch: Architecture) -> Self {
        Self {
            mrmr: None,
            arch,
            rho_sweep: None,
        }
    }

    pub fn with_mrmr(mut self, mrmr: MrmrConfig) -> Self {
        self.mrmr = Some(mrmr);
        self
    }

    /// Checks the architecture against a raw input width.
    pub fn validate(&self, raw_dim: usize) -> Result<()> {
        self.arch.validate()?;
        let input = match &self.mrmr {
            Some(m) => {
                if m.m == 0 || m.m > raw_dim {
                    return Err(Error::InvalidArgument(format!(
                        "cannot select {} of {raw_dim} features",
                        m.m
                    )));
                }
                m.m
            }
            None => raw_dim,
        };
        if self.arch.input_dim() != input {
            return Err(Error::Dimension(format!(
                "architecture input is {}, pipeline feeds {input} features",
                self.arch.input_dim()
            )));
        }
        if let Some(rhos) = &self.rho_sweep {
            if rhos.is_empty() {
                return Err(Error::InvalidArgument("empty sparsity sweep".into()));
            }
            for &r in rhos {
                if !(r > 0.0 && r < 1.0) {
                    return Err(Error::InvalidArgument(format!("sweep value {r} outside (0, 1)")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub model: DnnModel,
    pub ranking: Option<FeatureRanking>,
    pub timings: Timings,
    /// Validation accuracy per swept sparsity target, when a sweep ran.
    pub sweep: Option<Vec<(f64, f64)>>,
}

/// Encoders from pretraining, head from softmax pretraining, then joint
/// fine-tuning. Shared by the from-scratch and the transfer paths.
pub(crate) fn head_and_finetune(
    encoders: Vec<DenseLayer>,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    k: usize,
    trainer: &TrainingConfig,
    timings: &mut Timings,
) -> Result<(Network, TrainRecord, TrainRecord)> {
    let start = Instant::now();
    let mut code = x.to_owned();
    for layer in &encoders {
        code = layer.forward(code.view())?;
    }
    let (softmax, softmax_record) = pretrain_softmax(code.view(), labels, k, trainer)?;
    timings.add(phase::SOFTMAX, start.elapsed().as_secs_f64());

    let start = Instant::now();
    let mut network = Network::new(encoders, softmax)?;
    let finetune_record = fine_tune_network(&mut network, x, labels, trainer)?;
    timings.add(phase::FINETUNE, start.elapsed().as_secs_f64());
    Ok((network, softmax_record, finetune_record))
}

/// Trains a classifier from scratch on raw training rows. No statistic of
/// any row outside `train` is used.
pub fn fit_pipeline(train: &Dataset, cfg: &PipelineConfig) -> Result<FitOutcome> {
    cfg.validate(train.n_features())?;
    match &cfg.rho_sweep {
        Some(rhos) if rhos.len() > 1 => fit_with_sweep(train, cfg, rhos),
        Some(rhos) => {
            let mut fixed = cfg.clone();
            fixed.arch.sparsity.rho = rhos[0];
            fixed.rho_sweep = None;
            fit_single(train, &fixed)
        }
        None => fit_single(train, cfg),
    }
}

fn fit_single(train: &Dataset, cfg: &PipelineConfig) -> Result<FitOutcome> {
    let mut timings = Timings::default();
    let arch = &cfg.arch;

    let start = Instant::now();
    let normalizer = ingest::fit_normalizer(train);
    let normalized = normalizer.apply(train)?;
    let (ranking, selected_features, x) = match &cfg.mrmr {
        Some(m) => {
            let (ranking, reduced) = mrmr::select_features(&normalized, m)?;
            let sel = ranking.selected(m.m).to_vec();
            (Some(ranking), Some(sel), reduced.matrix().clone())
        }
        None => (None, None, normalized.matrix().clone()),
    };
    timings.add(phase::FEATURE_SELECTION, start.elapsed().as_secs_f64());

    let start = Instant::now();
    let stack = pretrain_stack(x.view(), arch)?;
    timings.add(phase::PRETRAIN, start.elapsed().as_secs_f64());
    let encoders: Vec<DenseLayer> = stack.iter().map(|l| l.sae.encoder.clone()).collect();

    let (network, softmax_record, finetune_record) = head_and_finetune(
        encoders.clone(),
        x.view(),
        train.labels(),
        train.n_classes(),
        &arch.trainer,
        &mut timings,
    )?;

    let model = DnnModel {
        arch: ModelArch {
            layer_dims: arch.layer_dims.clone(),
            sparsity: arch.sparsity,
        },
        normalizer,
        selected_features,
        class_mapping: train.class_names().to_vec(),
        network,
        pretrained_layers: Some(encoders),
        provenance: Provenance {
            pretraining: stack.into_iter().map(|l| l.record).collect(),
            softmax_pretraining: Some(softmax_record),
            finetuning: vec![finetune_record],
            transfer: None,
        },
    };
    model.validate()?;
    Ok(FitOutcome {
        model,
        ranking,
        timings,
        sweep: None,
    })
}

/// Holds out one stratified fifth of `train` for validation, scores every
/// sparsity target on it, then refits on all of `train` with the winner
/// (ties go to the earlier candidate).
fn fit_with_sweep(train: &Dataset, cfg: &PipelineConfig, rhos: &[f64]) -> Result<FitOutcome> {
    let folds = 5.min(train.n_samples());
    let plan = ingest::kfold_split(train.labels(), folds, rng::derive(cfg.arch.trainer.seed, "rho-sweep"))?;
    let inner = train.select_rows(&plan.train_indices(0))?;
    let valid = train.select_rows(&plan.test_indices(0))?;
    let scores: Vec<f64> = par::map_slice(rhos, |&rho| {
        let mut c = cfg.clone();
        c.arch.sparsity.rho = rho;
        c.rho_sweep = None;
        let fit = fit_single(&inner, &c)?;
        let pred = predict(&fit.model, valid.matrix())?;
        let truth = fit.model.labels_for(&valid)?;
        let hits = pred.labels.iter().zip(&truth).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / truth.len() as f64)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let best = argmax(&scores);
    let mut c = cfg.clone();
    c.arch.sparsity.rho = rhos[best];
    c.rho_sweep = None;
    let mut out = fit_single(train, &c)?;
    out.sweep = Some(rhos.iter().copied().zip(scores).collect());
    Ok(out)
}

/// Encoder widths of a model, for reports.
pub fn describe_layers(layers: &[DenseLayer]) -> String {
    let dims: Vec<String> = std::iter::once(layers.first().map_or(0, DenseLayer::input_dim))
        .chain(layers.iter().map(DenseLayer::output_dim))
        .map(|d| d.to_string())
        .collect();
    dims.join("x")
}

#[doc(hidden)]
pub fn one_hot(labels: &[usize], k: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), k));
    for (i, &l) in labels.iter().enumerate() {
        out[[i, l - 1]] = 1.0;
    }
    out
}

#[doc(hidden)]
pub fn column_means(x: &Array2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()))
}
