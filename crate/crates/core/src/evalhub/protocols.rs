//! Leave-one-domain-out and cross-dataset evaluation.

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::datagen::{DomainDataset, DomainId};
use crate::encoder::{FrozenEncoders, TokenTable};
use crate::error::{Error, Result};
use crate::evalhub::report::{EvalReport, ReportRow};
use crate::evalhub::{score, Predictor, Scores};
use crate::fed::{self, partition_domains, Corpus, FedRun, TrainedModel};

pub const LODO: &str = "leave-one-domain-out";
pub const CROSS_DATASET: &str = "cross-dataset";

/// Frozen backbone plus precomputed image embeddings for one dataset.
pub struct Prepared {
    pub dataset: DomainDataset,
    pub encoders: FrozenEncoders,
    pub table: TokenTable,
    pub embeddings: Vec<Vec<f32>>,
}

impl Prepared {
    pub fn new(cfg: &ExperimentConfig, dataset: DomainDataset) -> Result<Self> {
        let encoders = cfg.encoders(dataset.feature_dim)?;
        let embeddings = fed::embed_samples(&encoders, &dataset)?;
        Ok(Prepared {
            dataset,
            table: cfg.token_table(),
            encoders,
            embeddings,
        })
    }

    /// Same backbone, different dataset.
    pub fn with_dataset(&self, dataset: DomainDataset) -> Result<Self> {
        if dataset.feature_dim != self.dataset.feature_dim {
            return Err(Error::Dimension {
                op: "cross-dataset features",
                left: (1, self.dataset.feature_dim),
                right: (1, dataset.feature_dim),
            });
        }
        let embeddings = fed::embed_samples(&self.encoders, &dataset)?;
        Ok(Prepared {
            dataset,
            encoders: self.encoders.clone(),
            table: self.table.clone(),
            embeddings,
        })
    }
}

/// Trains on `sources` of `prep.dataset` under `cfg`.
pub fn train_on(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    sources: &[DomainId],
    observer: &mut fed::trainer::Observer<'_>,
) -> Result<FedRun> {
    let partition = partition_domains(sources, cfg.clients, cfg.overlap, cfg.fed.seed)?;
    let clients = fed::client_data(&prep.dataset, &partition, cfg.fed.seed)?;
    let class_tokens = prep.table.class_tokens(&prep.dataset.classes)?;
    let corpus = Corpus {
        dataset: &prep.dataset,
        embeddings: &prep.embeddings,
        encoders: &prep.encoders,
        class_tokens: &class_tokens,
    };
    fed::train(&cfg.fed, &corpus, &clients, observer)
}

/// Scores `model` on every sample of `target` in `prep.dataset`.
pub fn evaluate(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    model: &TrainedModel,
    target: DomainId,
) -> Result<Scores> {
    let predictor = Predictor::new(
        model,
        &prep.encoders,
        &prep.table,
        &prep.dataset.classes,
        cfg.fed.tau,
        cfg.z_policy,
    )?;
    let idx = prep.dataset.indices_in(target);
    if idx.is_empty() {
        return Err(Error::Contract(format!(
            "target domain {target} has no samples"
        )));
    }
    let images: Vec<&[f32]> = idx.iter().map(|&i| prep.embeddings[i].as_slice()).collect();
    let keys: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
    let labels: Vec<Option<usize>> = idx
        .iter()
        .map(|&i| Some(prep.dataset.samples[i].class))
        .collect();
    let preds = predictor.predict_many(&images, &keys, &labels)?;
    score(&preds, prep.dataset.num_classes())
}

/// Outcome of one held-out domain.
pub struct Fold {
    pub target: DomainId,
    pub run: FedRun,
    pub scores: Scores,
}

/// Holds each domain out in turn, trains on the rest, scores the held-out one.
/// Folds run in parallel; results are ordered by domain id.
pub fn leave_one_domain_out(cfg: &ExperimentConfig) -> Result<(EvalReport, Vec<Fold>)> {
    cfg.validate()?;
    let dataset = cfg.load_dataset()?;
    let hash = cfg.hash(&dataset);
    let prep = Prepared::new(cfg, dataset)?;
    let ids = prep.dataset.domain_ids();
    if ids.len() < 2 {
        return Err(Error::Config(
            "leave-one-domain-out needs at least 2 domains".into(),
        ));
    }
    let folds: Vec<Fold> = ids
        .par_iter()
        .map(|&target| {
            let sources: Vec<DomainId> = ids.iter().copied().filter(|&d| d != target).collect();
            let run = train_on(cfg, &prep, &sources, &mut |_, _| Ok(()))?;
            fed::trainer::assert_unseen(&run, target)?;
            let scores = evaluate(cfg, &prep, &run.model, target)?;
            Ok(Fold {
                target,
                run,
                scores,
            })
        })
        .collect::<Result<_>>()?;
    let rows = folds
        .iter()
        .map(|f| ReportRow {
            target_domain: prep
                .dataset
                .domain_name(f.target)
                .unwrap_or_default()
                .to_string(),
            accuracy: f.scores.accuracy,
            macro_f1: f.scores.macro_f1,
            n: f.scores.n,
        })
        .collect();
    Ok((EvalReport::new(LODO, cfg.seed(), hash, rows)?, folds))
}

/// Config hash of a cross-dataset run: the source config hash combined with
/// the target's content fingerprint.
pub fn cross_dataset_hash(
    cfg: &ExperimentConfig,
    source: &DomainDataset,
    target: &DomainDataset,
) -> String {
    let mut h = crate::checksum::Fnv1a::new();
    h.update(cfg.hash(source).as_bytes());
    h.update(&target.content_fingerprint().to_le_bytes());
    format!("{:016x}", h.finish())
}

/// One report row per domain of `prep.dataset`, in domain order.
pub fn score_all_domains(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    model: &TrainedModel,
) -> Result<Vec<ReportRow>> {
    prep.dataset
        .domain_ids()
        .into_iter()
        .map(|d| {
            let s = evaluate(cfg, prep, model, d)?;
            Ok(ReportRow {
                target_domain: prep.dataset.domain_name(d).unwrap_or_default().to_string(),
                accuracy: s.accuracy,
                macro_f1: s.macro_f1,
                n: s.n,
            })
        })
        .collect()
}

/// Trains on every domain of the source dataset and scores each domain of
/// `target` zero-shot, with class tokens taken from the target's class names.
pub fn cross_dataset(cfg: &ExperimentConfig, target: DomainDataset) -> Result<EvalReport> {
    cfg.validate()?;
    let source = cfg.load_dataset()?;
    let hash = cross_dataset_hash(cfg, &source, &target);
    let prep = Prepared::new(cfg, source)?;
    let run = train_on(cfg, &prep, &prep.dataset.domain_ids(), &mut |_, _| Ok(()))?;
    let tprep = prep.with_dataset(target)?;
    EvalReport::new(
        CROSS_DATASET,
        cfg.seed(),
        hash,
        score_all_domains(cfg, &tprep, &run.model)?,
    )
}
