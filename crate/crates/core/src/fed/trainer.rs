//! Round orchestration for both training stages.
//!
//! Stage 1 tunes each client's prompt context on its own data; stage 2 trains
//! each client's prompt generator against the frozen stage-1 contexts. In both
//! stages clients run in parallel between aggregation events and the server
//! is the only synchronization point. All randomness is keyed by
//! `(seed, stage, client, epoch, batch)`, so results do not depend on
//! scheduling.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{DomainDataset, DomainId};
use crate::dsp::{dsp_train_step, DspParams, Labeled, PromptMode};
use crate::encoder::FrozenEncoders;
use crate::error::{Error, Result};
use crate::fed::aggregate::{name_prefix, Entries, MomentumRule, RoutingCounters, Server};
use crate::fed::message::ParamMessage;
use crate::fed::partition::{ClientId, Partition};
use crate::numcore::{Optimizer, OptimizerSettings, Tensor};
use crate::promptgan::{gan_train_step, GanBatch, GanConfig, GanParams, RealPromptBank};
use crate::rng::{self, stream};

/// Sender id used for server-side checkpoints.
pub const SERVER_ID: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub mode: PromptMode,
    pub m1: usize,
    pub m2: usize,
    pub tau: f32,
    pub alpha: f64,
    pub momentum_rule: MomentumRule,
    /// Stage-1 local epochs.
    pub epochs: usize,
    /// Stage-2 local epochs.
    pub gan_epochs: usize,
    pub epochs_per_round: f64,
    pub batch_size: usize,
    pub stage1: OptimizerSettings,
    pub stage2: OptimizerSettings,
    pub gan: GanConfig,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            mode: PromptMode::Dsp,
            m1: 4,
            m2: 4,
            tau: 0.01,
            alpha: 0.2,
            momentum_rule: MomentumRule::Ema,
            epochs: 100,
            gan_epochs: 100,
            epochs_per_round: 1.0,
            batch_size: 32,
            stage1: OptimizerSettings::adam(1e-5),
            stage2: OptimizerSettings::adamw(1e-4, 2e-5),
            gan: GanConfig::default(),
            seed: 0,
        }
    }
}

impl FedConfig {
    /// Domain-block length actually used by the prompt mode.
    pub fn effective_m2(&self) -> usize {
        if self.mode.has_domain_context() {
            self.m2
        } else {
            0
        }
    }

    pub fn prompt_rows(&self) -> usize {
        self.m1 + self.effective_m2()
    }
}

/// Portion of local training between two aggregation events.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Span {
    pub epochs: Range<usize>,
    /// `(i, m)`: only the `i`-th of `m` equal slices of the epoch's batches.
    pub part: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub spans: Vec<Span>,
}

impl Schedule {
    /// `epochs_per_round` is either a whole number of epochs or `1/m` for a whole `m`.
    pub fn new(epochs: usize, epochs_per_round: f64) -> Result<Self> {
        if !(epochs_per_round > 0.0) || !epochs_per_round.is_finite() {
            return Err(Error::Config(format!(
                "epochs per round must be positive, got {epochs_per_round}"
            )));
        }
        let mut spans = Vec::new();
        if epochs_per_round >= 1.0 {
            let k = epochs_per_round.round();
            if (k - epochs_per_round).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "epochs per round above 1 must be whole, got {epochs_per_round}"
                )));
            }
            let k = k as usize;
            let mut e = 0;
            while e < epochs {
                let end = (e + k).min(epochs);
                spans.push(Span {
                    epochs: e..end,
                    part: None,
                });
                e = end;
            }
        } else {
            let m = (1.0 / epochs_per_round).round();
            if (m * epochs_per_round - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "epochs per round below 1 must be 1/m, got {epochs_per_round}"
                )));
            }
            let m = m as usize;
            for e in 0..epochs {
                for i in 0..m {
                    spans.push(Span {
                        epochs: e..e + 1,
                        part: Some((i, m)),
                    });
                }
            }
        }
        Ok(Schedule { spans })
    }

    pub fn events(&self) -> usize {
        self.spans.len()
    }
}

pub fn aggregation_events(epochs: usize, epochs_per_round: f64) -> Result<usize> {
    Ok(Schedule::new(epochs, epochs_per_round)?.events())
}

/// Samples held by one client.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ClientData {
    pub id: ClientId,
    pub domains: BTreeSet<DomainId>,
    /// Indices into the dataset's samples, ascending.
    pub samples: Vec<usize>,
}

/// Materializes a partition. A domain placed on several clients has each of
/// its classes split disjointly between them by a seeded shuffle.
pub fn client_data(
    ds: &DomainDataset,
    partition: &Partition,
    seed: u64,
) -> Result<Vec<ClientData>> {
    let mut out: BTreeMap<ClientId, ClientData> = partition
        .assignments
        .iter()
        .map(|(&c, ds)| {
            (
                c,
                ClientData {
                    id: c,
                    domains: ds.clone(),
                    samples: Vec::new(),
                },
            )
        })
        .collect();
    for &d in &partition.source_domains {
        if ds.domain_name(d).is_none() {
            return Err(Error::UnknownDomain(d.0));
        }
        let holders = partition.holders(d);
        for k in 0..ds.num_classes() {
            let mut idx: Vec<usize> = ds
                .samples
                .iter()
                .enumerate()
                .filter(|(_, s)| s.domain == d && s.class == k)
                .map(|(i, _)| i)
                .collect();
            if holders.len() > 1 {
                idx.shuffle(&mut rng::seeded(
                    seed,
                    &[stream::SPLIT, u64::from(d.0), k as u64],
                ));
            }
            let n = idx.len();
            for (j, c) in holders.iter().enumerate() {
                let part = &idx[j * n / holders.len()..(j + 1) * n / holders.len()];
                out.get_mut(c)
                    .expect("holder exists")
                    .samples
                    .extend_from_slice(part);
            }
        }
    }
    let mut clients: Vec<ClientData> = out.into_values().collect();
    for c in &mut clients {
        c.samples.sort_unstable();
        if c.samples.is_empty() {
            return Err(Error::InfeasiblePartition(format!(
                "client {} received no samples",
                c.id
            )));
        }
    }
    Ok(clients)
}

/// Unit image embeddings of every sample, in dataset order.
pub fn embed_samples(enc: &FrozenEncoders, ds: &DomainDataset) -> Result<Vec<Vec<f32>>> {
    const CHUNK: usize = 256;
    let mut out = Vec::with_capacity(ds.samples.len());
    for chunk in ds.samples.chunks(CHUNK) {
        let data: Vec<f32> = chunk
            .iter()
            .flat_map(|s| s.features.iter().copied())
            .collect();
        let x = Tensor::from_vec(chunk.len(), ds.feature_dim, data)?;
        let e = enc.encode_image(&x)?;
        out.extend((0..e.rows()).map(|r| e.row(r).to_vec()));
    }
    Ok(out)
}

/// Read-only inputs shared by every client.
pub struct Corpus<'a> {
    pub dataset: &'a DomainDataset,
    pub embeddings: &'a [Vec<f32>],
    pub encoders: &'a FrozenEncoders,
    pub class_tokens: &'a [Tensor],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClientRound {
    pub client: ClientId,
    pub steps: u64,
    /// Mean pre-step prompt loss (stage 1) or discriminator loss (stage 2).
    pub loss: f64,
    /// Mean pre-step generator loss (stage 2 only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g_loss: Option<f64>,
    /// Domains of every sample this client touched during the span.
    pub lineage: BTreeSet<DomainId>,
}

/// One aggregation event.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundLog {
    pub stage: u8,
    pub round: u32,
    pub epochs_done: f64,
    pub clients: Vec<ClientRound>,
    /// L2 norm of the distributed values, per name prefix.
    pub aggregate_norms: BTreeMap<String, f64>,
    pub routing: RoutingCounters,
    /// Optimizer steps applied to prompt parameters in this round.
    pub prompt_updates: u64,
}

/// Everything needed at inference time.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub mode: PromptMode,
    pub source_domains: Vec<DomainId>,
    pub dsp: Option<DspParams>,
    pub gan: Option<GanParams>,
}

impl TrainedModel {
    pub fn entries(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        if let Some(p) = &self.dsp {
            out.extend(p.named().into_iter().map(|(n, t)| (n, t.clone())));
        }
        if let Some(g) = &self.gan {
            out.extend(g.named().into_iter().map(|(n, t)| (n, t.clone())));
        }
        out
    }

    pub fn to_message(&self, round: u32) -> Result<ParamMessage> {
        ParamMessage::new(SERVER_ID, round, self.entries())
    }

    /// Rebuilds a model from a checkpoint; shapes come from `cfg`.
    pub fn from_message(
        cfg: &FedConfig,
        enc: &FrozenEncoders,
        sources: &[DomainId],
        msg: &ParamMessage,
    ) -> Result<Self> {
        let values: Entries = msg.entries().iter().cloned().collect();
        let mut model = blank_model(cfg, enc, sources)?;
        if let Some(p) = &mut model.dsp {
            for (name, _) in p.named() {
                if !values.contains_key(&name) {
                    return Err(Error::Protocol(format!("checkpoint lacks {name}")));
                }
            }
            p.load_named(&values)?;
        }
        if let Some(g) = &mut model.gan {
            for (name, _) in g.named() {
                if !values.contains_key(&name) {
                    return Err(Error::Protocol(format!("checkpoint lacks {name}")));
                }
            }
            g.load_named(&values)?;
        }
        Ok(model)
    }
}

fn blank_model(
    cfg: &FedConfig,
    enc: &FrozenEncoders,
    sources: &[DomainId],
) -> Result<TrainedModel> {
    let dsp = if cfg.mode.trains_prompts() {
        Some(DspParams::new(
            cfg.m1,
            cfg.effective_m2(),
            enc.d_tok(),
            sources,
            cfg.seed,
        )?)
    } else {
        None
    };
    let gan = if cfg.mode.uses_generator() {
        Some(GanParams::new(
            cfg.gan,
            enc.d(),
            cfg.prompt_rows(),
            enc.d_tok(),
            cfg.seed,
        )?)
    } else {
        None
    };
    Ok(TrainedModel {
        mode: cfg.mode,
        source_domains: sources.to_vec(),
        dsp,
        gan,
    })
}

/// Result of a federated training run.
#[derive(Clone, Debug)]
pub struct FedRun {
    pub model: TrainedModel,
    pub logs: Vec<RoundLog>,
    /// Union of the domains of every sample used for training.
    pub lineage: BTreeSet<DomainId>,
    pub prompt_updates: u64,
    pub gan_updates: u64,
}

struct Client {
    data: ClientData,
    dsp: Option<DspParams>,
    opt_prompt: Optimizer,
    gan: Option<GanParams>,
    opt_g: Optimizer,
    opt_d: Optimizer,
    bank: Option<RealPromptBank>,
}

struct SpanResult {
    entries: Vec<(String, Tensor)>,
    summary: ClientRound,
}

fn epoch_batches<T: Copy>(
    items: &[T],
    span: &Span,
    epoch: usize,
    batch: usize,
    seed: u64,
    tags: &[u64],
) -> Vec<Vec<T>> {
    let mut order = items.to_vec();
    let mut t = tags.to_vec();
    t.push(epoch as u64);
    order.shuffle(&mut rng::seeded(seed, &t));
    let batches: Vec<Vec<T>> = order.chunks(batch.max(1)).map(<[T]>::to_vec).collect();
    match span.part {
        None => batches,
        Some((i, m)) => {
            let n = batches.len();
            batches[i * n / m..(i + 1) * n / m].to_vec()
        }
    }
}

impl Client {
    fn stage1(&mut self, span: &Span, cfg: &FedConfig, corpus: &Corpus<'_>) -> Result<SpanResult> {
        let dsp = self.dsp.as_mut().expect("stage 1 runs only with prompts");
        let ds = corpus.dataset;
        let bs = cfg.batch_size.min(self.data.samples.len());
        let mut total = 0.0f64;
        let mut steps = 0u64;
        let mut lineage = BTreeSet::new();
        for epoch in span.epochs.clone() {
            let tags = [stream::SHUFFLE, 1, u64::from(self.data.id)];
            for batch in epoch_batches(&self.data.samples, span, epoch, bs, cfg.seed, &tags) {
                let examples: Vec<Labeled<'_>> = batch
                    .iter()
                    .map(|&i| {
                        lineage.insert(ds.samples[i].domain);
                        Labeled {
                            embedding: &corpus.embeddings[i],
                            domain: ds.samples[i].domain,
                            label: ds.samples[i].class,
                        }
                    })
                    .collect();
                let loss = dsp_train_step(
                    dsp,
                    &examples,
                    corpus.encoders,
                    corpus.class_tokens,
                    &mut self.opt_prompt,
                    cfg.tau,
                )?;
                total += f64::from(loss);
                steps += 1;
            }
        }
        Ok(SpanResult {
            entries: dsp
                .named()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
            summary: ClientRound {
                client: self.data.id,
                steps,
                loss: if steps == 0 {
                    0.0
                } else {
                    total / steps as f64
                },
                g_loss: None,
                lineage,
            },
        })
    }

    fn stage2(&mut self, span: &Span, cfg: &FedConfig, corpus: &Corpus<'_>) -> Result<SpanResult> {
        let ds = corpus.dataset;
        if self.bank.is_none() {
            let dsp = self.dsp.as_ref().expect("stage 2 runs only with prompts");
            let images = self
                .data
                .samples
                .iter()
                .map(|&i| (ds.samples[i].domain, corpus.embeddings[i].clone()))
                .collect();
            self.bank = Some(RealPromptBank::from_params(dsp, images)?);
        }
        let bank = self.bank.as_ref().expect("built above");
        let gan = self
            .gan
            .as_mut()
            .expect("stage 2 runs only with a generator");
        let bs = cfg.batch_size.min(bank.len());
        let indices: Vec<usize> = (0..bank.len()).collect();
        let (mut d_total, mut g_total, mut steps) = (0.0f64, 0.0f64, 0u64);
        for epoch in span.epochs.clone() {
            let tags = [stream::SHUFFLE, 2, u64::from(self.data.id)];
            for (b, batch) in epoch_batches(&indices, span, epoch, bs, cfg.seed, &tags)
                .iter()
                .enumerate()
            {
                let part = span.part.map_or(0, |(i, _)| i as u64);
                let mut r = rng::seeded(
                    cfg.seed,
                    &[
                        stream::GAN_NOISE,
                        u64::from(self.data.id),
                        epoch as u64,
                        part,
                        b as u64,
                    ],
                );
                let gb = GanBatch::draw(bank, batch, gan.config.z_dim, &mut r)?;
                let (d, g) = gan_train_step(gan, &gb, &mut self.opt_g, &mut self.opt_d)?;
                d_total += f64::from(d);
                g_total += f64::from(g);
                steps += 1;
            }
        }
        // Real pairs and fake conditions are all drawn from the local bank.
        let lineage = if steps > 0 {
            bank.images.iter().map(|(d, _)| *d).collect()
        } else {
            BTreeSet::new()
        };
        let n = steps.max(1) as f64;
        Ok(SpanResult {
            entries: gan
                .named()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
            summary: ClientRound {
                client: self.data.id,
                steps,
                loss: d_total / n,
                g_loss: Some(g_total / n),
                lineage,
            },
        })
    }

    fn download(&mut self, stage: u8, values: &Entries) -> Result<()> {
        match stage {
            1 => self
                .dsp
                .as_mut()
                .expect("prompts present")
                .load_named(values),
            _ => self
                .gan
                .as_mut()
                .expect("generator present")
                .load_named(values),
        }
    }
}

fn norms(values: &Entries) -> BTreeMap<String, f64> {
    let mut sq: BTreeMap<String, f64> = BTreeMap::new();
    for (name, t) in values {
        let s: f64 = t.data().iter().map(|&x| f64::from(x) * f64::from(x)).sum();
        *sq.entry(name_prefix(name).to_string()).or_default() += s;
    }
    sq.into_iter().map(|(k, v)| (k, v.sqrt())).collect()
}

/// Callback invoked after every aggregation with the round log and the
/// server's full distributed state.
pub type Observer<'o> = dyn FnMut(&RoundLog, &Entries) -> Result<()> + 'o;

/// Runs stage 1 and, when the mode uses a generator, stage 2.
pub fn train(
    cfg: &FedConfig,
    corpus: &Corpus<'_>,
    clients: &[ClientData],
    observer: &mut Observer<'_>,
) -> Result<FedRun> {
    if clients.is_empty() {
        return Err(Error::Config("no clients".into()));
    }
    if !(cfg.tau > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {}",
            cfg.tau
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let sources: Vec<DomainId> = clients
        .iter()
        .flat_map(|c| c.domains.iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let template = blank_model(cfg, corpus.encoders, &sources)?;
    let mut server = Server::new(cfg.alpha, cfg.momentum_rule)?;
    let mut logs = Vec::new();
    let mut lineage = BTreeSet::new();
    let (mut prompt_updates, mut gan_updates) = (0u64, 0u64);

    let mut states: Vec<Client> = clients
        .iter()
        .map(|c| {
            let domains: Vec<DomainId> = c.domains.iter().copied().collect();
            let dsp = match &template.dsp {
                Some(_) => Some(DspParams::new(
                    cfg.m1,
                    cfg.effective_m2(),
                    corpus.encoders.d_tok(),
                    &domains,
                    cfg.seed,
                )?),
                None => None,
            };
            Ok(Client {
                data: c.clone(),
                dsp,
                opt_prompt: Optimizer::new(cfg.stage1),
                gan: template.gan.clone(),
                opt_g: Optimizer::new(cfg.stage2),
                opt_d: Optimizer::new(cfg.stage2),
                bank: None,
            })
        })
        .collect::<Result<_>>()?;

    let mut stages = Vec::new();
    if cfg.mode.trains_prompts() {
        stages.push((1u8, Schedule::new(cfg.epochs, cfg.epochs_per_round)?));
    }
    if cfg.mode.uses_generator() {
        stages.push((2u8, Schedule::new(cfg.gan_epochs, cfg.epochs_per_round)?));
    }
    let mut epochs_done = 0.0;
    for (stage, schedule) in stages {
        let base = epochs_done;
        for span in &schedule.spans {
            let results: Vec<SpanResult> = states
                .par_iter_mut()
                .map(|c| match stage {
                    1 => c.stage1(span, cfg, corpus),
                    _ => c.stage2(span, cfg, corpus),
                })
                .collect::<Result<_>>()?;
            let round = server.rounds() as u32 + 1;
            let msgs = results
                .iter()
                .map(|r| ParamMessage::new(r.summary.client, round, r.entries.clone()))
                .collect::<Result<Vec<_>>>()?;
            let distributed = server.aggregate(&msgs)?;
            for c in &mut states {
                c.download(stage, &distributed)?;
            }
            let steps: u64 = results.iter().map(|r| r.summary.steps).sum();
            if stage == 1 {
                prompt_updates += steps;
            } else {
                gan_updates += steps;
            }
            for r in &results {
                lineage.extend(r.summary.lineage.iter().copied());
            }
            epochs_done = base
                + match span.part {
                    Some((i, m)) => span.epochs.start as f64 + (i + 1) as f64 / m as f64,
                    None => span.epochs.end as f64,
                };
            let log = RoundLog {
                stage,
                round,
                epochs_done,
                clients: results.into_iter().map(|r| r.summary).collect(),
                aggregate_norms: norms(&distributed),
                routing: server.routing.last().cloned().unwrap_or_default(),
                prompt_updates: if stage == 1 { steps } else { 0 },
            };
            observer(&log, &server.distributed)?;
            logs.push(log);
        }
    }

    let mut model = template;
    if let Some(p) = &mut model.dsp {
        p.load_named(&server.distributed)?;
    }
    if let Some(g) = &mut model.gan {
        g.load_named(&server.distributed)?;
    }
    Ok(FedRun {
        model,
        logs,
        lineage,
        prompt_updates,
        gan_updates,
    })
}

/// Checks a finished run never touched `domain`.
pub fn assert_unseen(run: &FedRun, domain: DomainId) -> Result<()> {
    if run.lineage.contains(&domain) {
        return Err(Error::Contract(format!(
            "domain {domain} leaked into training"
        )));
    }
    Ok(())
}

/// Convenience for callers that do not observe rounds.
pub fn no_observer() -> impl FnMut(&RoundLog, &Entries) -> Result<()> {
    |_, _| Ok(())
}
