//! Weight transfer: a target network starts from a source model's encoder
//! stack, gets a fresh softmax head trained on target labels, and is then
//! fine-tuned on the target set. No autoencoder is trained on target data.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dnn::{self, DnnModel, FitOutcome, ModelArch, Network, Provenance, TrainingConfig, TransferRecord};
use crate::error::{Error, Result};
use crate::eval::{self, phase, CrossValidation, EvalReport, Timings};
use crate::ingest::{self, Dataset};
use crate::nn::{self, DenseLayer, SoftmaxLayer};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderSource {
    /// Encoders as left by autoencoder pretraining on the source.
    #[default]
    Pretrained,
    /// Encoders after source fine-tuning.
    FineTuned,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferOptions {
    pub encoders_from: EncoderSource,
    /// Fit a new min/max normalizer on the target training rows instead of
    /// reusing the source one.
    pub refit_normalizer: bool,
}

pub struct TransferPlan {
    pub source: DnnModel,
    pub target_train: Dataset,
    pub target_test: Option<Dataset>,
    pub trainer: TrainingConfig,
    pub options: TransferOptions,
}

impl TransferPlan {
    pub fn from_source_path(
        source_model_path: impl AsRef<Path>,
        target_train: Dataset,
        target_test: Option<Dataset>,
        trainer: TrainingConfig,
    ) -> Result<Self> {
        Ok(Self {
            source: dnn::load_model(source_model_path)?,
            target_train,
            target_test,
            trainer,
            options: TransferOptions::default(),
        })
    }
}

fn source_encoders(source: &DnnModel, from: EncoderSource) -> Result<Vec<DenseLayer>> {
    match from {
        EncoderSource::Pretrained => source.pretrained_layers.clone().ok_or_else(|| {
            Error::CorruptModel("source model carries no pretrained encoder snapshot".into())
        }),
        EncoderSource::FineTuned => Ok(source.network.encoders.clone()),
    }
}

/// Target model initialized from `source`: encoder copies, the source
/// normalizer and column order, and a softmax head for `target_classes`
/// seeded exactly as softmax pretraining seeds it.
pub fn transfer_weights(
    source: &DnnModel,
    target_classes: &[String],
    seed: u64,
    options: &TransferOptions,
) -> Result<DnnModel> {
    source.validate().map_err(|e| Error::CorruptModel(e.to_string()))?;
    if target_classes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "target needs at least 2 classes, got {}",
            target_classes.len()
        )));
    }
    let encoders = source_encoders(source, options.encoders_from)?;
    let code = encoders.last().expect("validated").output_dim();
    let mut init = rng::seeded(rng::derive(seed, "softmax-init"));
    let softmax = SoftmaxLayer::glorot(code, target_classes.len(), &mut init);
    let model = DnnModel {
        arch: ModelArch {
            layer_dims: source.arch.layer_dims.clone(),
            sparsity: source.arch.sparsity,
        },
        normalizer: source.normalizer.clone(),
        selected_features: source.selected_features.clone(),
        class_mapping: target_classes.to_vec(),
        network: Network::new(encoders.clone(), softmax)?,
        pretrained_layers: Some(encoders),
        provenance: Provenance {
            transfer: Some(TransferRecord {
                source_layer_dims: source.arch.layer_dims.clone(),
                encoders_from: match options.encoders_from {
                    EncoderSource::Pretrained => "pretrained".into(),
                    EncoderSource::FineTuned => "fine-tuned".into(),
                },
                target_pretraining: false,
            }),
            ..Provenance::default()
        },
    };
    model.validate()?;
    Ok(model)
}

#[derive(Clone, Debug)]
pub struct DtlOutcome {
    pub fit: FitOutcome,
    /// Present when the plan has a target test set.
    pub report: Option<EvalReport>,
    /// Autoencoder loss/gradient evaluations on this thread during training.
    pub sae_evaluations: u64,
}

fn dtl_fit(
    source: &DnnModel,
    train: &Dataset,
    trainer: &TrainingConfig,
    options: &TransferOptions,
) -> Result<FitOutcome> {
    if train.n_samples() == 0 {
        return Err(Error::Empty("target training set".into()));
    }
    if train.n_features() != source.raw_input_dim() {
        return Err(Error::Dimension(format!(
            "source model takes {} raw features, target data has {}",
            source.raw_input_dim(),
            train.n_features()
        )));
    }
    let mut timings = Timings::default();
    let mut model = transfer_weights(source, train.class_names(), trainer.seed, options)?;

    let start = Instant::now();
    if options.refit_normalizer {
        model.normalizer = ingest::fit_normalizer(train);
    }
    let x = model.prepare(train.matrix())?;
    timings.add(phase::FEATURE_SELECTION, start.elapsed().as_secs_f64());
    timings.set(phase::PRETRAIN, 0.0);

    let encoders = model.network.encoders.clone();
    let (network, softmax_record, finetune_record) =
        dnn::head_and_finetune(encoders, x.view(), train.labels(), train.n_classes(), trainer, &mut timings)?;
    model.network = network;
    model.provenance.softmax_pretraining = Some(softmax_record);
    model.provenance.finetuning.push(finetune_record);
    model.validate()?;
    Ok(FitOutcome {
        model,
        ranking: None,
        timings,
        sweep: None,
    })
}

/// Reuse the source stack, pretrain the softmax head on target codes,
/// fine-tune the whole network on target labels, then score the target
/// test set.
pub fn dtl_train(plan: &TransferPlan) -> Result<DtlOutcome> {
    let before = nn::sae_evaluations();
    let fit = dtl_fit(&plan.source, &plan.target_train, &plan.trainer, &plan.options)?;
    let sae_evaluations = nn::sae_evaluations() - before;
    let method = if plan.source.selected_features.is_some() {
        "dtl-mrmr"
    } else {
        "dtl"
    };
    let report = match &plan.target_test {
        Some(test) => Some(eval::evaluate_model(&fit.model, test, method, fit.timings.clone())?),
        None => None,
    };
    Ok(DtlOutcome {
        fit,
        report,
        sae_evaluations,
    })
}

/// k-fold evaluation of transfer on target data: every fold starts from the
/// same source model.
pub fn cross_validate_dtl(
    source: &DnnModel,
    target: &Dataset,
    trainer: &TrainingConfig,
    options: &TransferOptions,
    k: usize,
    seed: u64,
) -> Result<CrossValidation> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    let method = if source.selected_features.is_some() {
        "dtl-mrmr"
    } else {
        "dtl"
    };
    eval::cross_validate_with(target, k, seed, method, |f, train| {
        let mut t = trainer.clone();
        t.seed = rng::derive_indexed(trainer.seed, "fold", f);
        dtl_fit(source, train, &t, options)
    })
}
