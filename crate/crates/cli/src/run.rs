//! The `run` subcommand: one experiment end to end from a config file.

use std::path::Path;

use faultdiag::dnn;
use faultdiag::eval::{self, EvalReport, TimingRow};
use faultdiag::ingest::Dataset;
use faultdiag::mrmr::FeatureRanking;
use faultdiag::transfer::{self, TransferPlan};

use crate::config::{ExperimentConfig, Seeds};
use crate::data;
use crate::failure::Failure;
use crate::output::{self, OutDir, RunLog, LOG_FILE, MODEL_FILE, SOURCE_MODEL_FILE};

pub struct RunOutcome {
    pub report: EvalReport,
}

struct Loader<'a> {
    cfg: &'a ExperimentConfig,
    base: &'a Path,
}

impl Loader<'_> {
    fn load(&self, source: &crate::config::DataSource, field: &str) -> Result<Dataset, Failure> {
        data::load(
            source,
            self.base,
            &self.cfg.data.label_column,
            self.cfg.segment_len,
            self.cfg.stride(),
            field,
        )
    }
}

/// Runs `cfg` with relative paths resolved against `base` and writes every
/// artifact into `out`.
pub fn execute(cfg: &ExperimentConfig, base: &Path, out: &OutDir) -> Result<RunOutcome, Failure> {
    let seeds = Seeds::from_top(cfg.seed);
    let mut log = RunLog::default();
    log.line(format!("faultdiag {} run, mode {}", env!("CARGO_PKG_VERSION"), cfg.mode.name()));
    log.section(
        "seeds",
        &serde_json::to_string_pretty(&seeds).expect("plain struct"),
    );
    log.section(
        "resolved config",
        &serde_json::to_string_pretty(cfg).expect("plain struct"),
    );
    log.line(format!("worker threads: {}", faultdiag::par::current_threads()));

    let loader = Loader { cfg, base };
    let mut timing_rows: Vec<TimingRow> = Vec::new();
    let mut ranking: Option<(FeatureRanking, Vec<String>)> = None;

    let (report, model) = if cfg.mode.is_transfer() {
        let source_model = match (&cfg.data.source_model, &cfg.data.source_train) {
            (Some(path), _) => {
                let model = dnn::load_model(data::resolve(base, path))?;
                if model.selected_features.is_some() != cfg.mode.uses_mrmr() {
                    return Err(Failure::config(format!(
                        "source model {} feature selection but mode is {}",
                        if model.selected_features.is_some() { "uses" } else { "has no" },
                        cfg.mode.name()
                    )));
                }
                log.line(format!("source model: {}", path.display()));
                model
            }
            (None, Some(source)) => {
                let train = loader.load(source, "data.source_train")?;
                let pipeline = cfg.pipeline(seeds.source);
                pipeline.validate(train.n_features())?;
                let fit = dnn::fit_pipeline(&train, &pipeline)?;
                let method = format!("source-{}", if pipeline.mrmr.is_some() { "dnn-mrmr" } else { "dnn" });
                timing_rows.extend(eval::timing_report(&EvalReport::single(
                    &method,
                    eval::ConfusionMatrix::zeros(0),
                    Vec::new(),
                    fit.timings.clone(),
                )));
                if let Some(r) = fit.ranking.clone() {
                    ranking = Some((r, train.feature_names().to_vec()));
                }
                out.model(SOURCE_MODEL_FILE, &fit.model)?;
                log.line(format!(
                    "source model trained on {} rows, written to {SOURCE_MODEL_FILE}",
                    train.n_samples()
                ));
                fit.model
            }
            (None, None) => unreachable!("validated"),
        };

        let target = loader.load(cfg.data.target_train.as_ref().expect("validated"), "data.target_train")?;
        if target.n_features() != source_model.raw_input_dim() {
            return Err(Failure::config(format!(
                "source model takes {} features, `data.target_train` has {}",
                source_model.raw_input_dim(),
                target.n_features()
            )));
        }
        let trainer = cfg.trainer.resolve(seeds.target);
        let target_test = match &cfg.data.target_test {
            Some(s) => Some(loader.load(s, "data.target_test")?),
            None => None,
        };
        let plan = TransferPlan {
            source: source_model,
            target_train: target,
            target_test,
            trainer: trainer.clone(),
            options: cfg.transfer.clone(),
        };
        match &plan.target_test {
            Some(_) => {
                let out = transfer::dtl_train(&plan)?;
                log.line(format!("autoencoder evaluations during transfer: {}", out.sae_evaluations));
                (out.report.expect("test set given"), out.fit.model)
            }
            None => {
                let cv = transfer::cross_validate_dtl(
                    &plan.source,
                    &plan.target_train,
                    &trainer,
                    &plan.options,
                    cfg.cv.k,
                    seeds.cv,
                )?;
                let final_fit = transfer::dtl_train(&plan)?;
                log.line(format!(
                    "autoencoder evaluations during final transfer: {}",
                    final_fit.sae_evaluations
                ));
                (cv.report, final_fit.fit.model)
            }
        }
    } else {
        let train = loader.load(cfg.data.train.as_ref().expect("validated"), "data.train")?;
        let pipeline = cfg.pipeline(seeds.source);
        pipeline.validate(train.n_features())?;
        let method = if pipeline.mrmr.is_some() { "dnn-mrmr" } else { "dnn" };
        let (report, fit) = match &cfg.data.test {
            Some(s) => {
                let test = loader.load(s, "data.test")?;
                let fit = dnn::fit_pipeline(&train, &pipeline)?;
                let report = eval::evaluate_model(&fit.model, &test, method, fit.timings.clone())?;
                (report, fit)
            }
            None => {
                let cv = eval::cross_validate(&train, &pipeline, cfg.cv.k, seeds.cv)?;
                let fit = dnn::fit_pipeline(&train, &pipeline)?;
                (cv.report, fit)
            }
        };
        if let Some(r) = fit.ranking.clone() {
            ranking = Some((r, train.feature_names().to_vec()));
        }
        if let Some(sweep) = &fit.sweep {
            let lines: Vec<String> = sweep.iter().map(|(r, a)| format!("rho {r}: validation accuracy {a:.4}")).collect();
            log.section("sparsity sweep", &lines.join("\n"));
        }
        (report, fit.model)
    };

    timing_rows.extend(eval::timing_report(&report));
    out.model(MODEL_FILE, &model)?;
    out.report(&report)?;
    if let Some((r, names)) = &ranking {
        out.ranking(r, names)?;
    }
    out.timings(&timing_rows)?;
    log.timings(&timing_rows);
    log.section("result", &output::summary(&report));
    out.write(LOG_FILE, log.as_str())?;
    Ok(RunOutcome { report })
}
