//! Server-side merging of client uploads.
//!
//! Every name is first averaged over the senders that hold it. Prompt names
//! (`v`, `u/<id>`) are then smoothed against the previously distributed value;
//! GAN names (`G/...`, `D/...`) are distributed as the plain average.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dsp::{is_prompt_param, DOMAIN_CONTEXT_PREFIX, SHARED_CONTEXT};
use crate::error::{Error, Result};
use crate::fed::message::ParamMessage;
use crate::numcore::Tensor;

pub type Entries = BTreeMap<String, Tensor>;

/// Unweighted mean per name over the senders holding it, summed in sender order.
pub fn fedavg(msgs: &[ParamMessage]) -> Result<Entries> {
    if msgs.is_empty() {
        return Err(Error::Protocol("no messages to aggregate".into()));
    }
    let round = msgs[0].round;
    if let Some(m) = msgs.iter().find(|m| m.round != round) {
        return Err(Error::Protocol(format!(
            "sender {} is at round {} while sender {} is at round {round}",
            m.sender, m.round, msgs[0].sender
        )));
    }
    let mut order: Vec<&ParamMessage> = msgs.iter().collect();
    order.sort_by_key(|m| m.sender);
    for pair in order.windows(2) {
        if pair[0].sender == pair[1].sender {
            return Err(Error::Protocol(format!(
                "two messages from sender {}",
                pair[0].sender
            )));
        }
    }

    let mut sums: BTreeMap<&str, (usize, usize, Vec<f64>, usize)> = BTreeMap::new();
    for m in &order {
        for (name, t) in m.entries() {
            let slot = sums
                .entry(name.as_str())
                .or_insert_with(|| (t.rows(), t.cols(), vec![0.0; t.len()], 0));
            if (slot.0, slot.1) != t.shape() {
                return Err(Error::Protocol(format!(
                    "{name} has shape {:?} from sender {} but {:?} elsewhere",
                    t.shape(),
                    m.sender,
                    (slot.0, slot.1)
                )));
            }
            for (acc, &x) in slot.2.iter_mut().zip(t.data()) {
                *acc += f64::from(x);
            }
            slot.3 += 1;
        }
    }
    sums.into_iter()
        .map(|(name, (r, c, acc, n))| {
            let n = n as f64;
            let data = acc.into_iter().map(|s| (s / n) as f32).collect();
            Ok((name.to_string(), Tensor::from_vec(r, c, data)?))
        })
        .collect()
}

/// How the momentum history is combined with fresh averages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentumRule {
    /// `out_k = α · avg_k + (1 − α) · out_{k−1}`.
    #[default]
    Ema,
    /// `out_k = α · out_{k−1} + (1 − α) · out_{k−2}`, with the first two
    /// rounds passing the average through unchanged.
    TwoHistory,
}

/// Previously distributed prompt values.
#[derive(Clone, Debug, PartialEq)]
pub struct AggHistory {
    alpha: f64,
    pub rule: MomentumRule,
    prev: Entries,
    prev2: Entries,
}

impl AggHistory {
    pub fn new(alpha: f64, rule: MomentumRule) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!(
                "momentum coefficient {alpha} outside [0, 1]"
            )));
        }
        Ok(AggHistory {
            alpha,
            rule,
            prev: Entries::new(),
            prev2: Entries::new(),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn previous(&self, name: &str) -> Option<&Tensor> {
        self.prev.get(name)
    }
}

fn blend(a: &Tensor, wa: f64, b: &Tensor, wb: f64, name: &str) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Protocol(format!(
            "{name} changed shape from {:?} to {:?}",
            b.shape(),
            a.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (wa * f64::from(x) + wb * f64::from(y)) as f32)
        .collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

/// Smooths `avg` against the history and records the result as the new history.
/// A name seen for the first time is passed through unchanged.
pub fn momentum_aggregate(avg: &Entries, hist: &mut AggHistory) -> Result<Entries> {
    let alpha = hist.alpha;
    let mut out = Entries::new();
    for (name, fresh) in avg {
        let value = match (hist.rule, hist.prev.get(name), hist.prev2.get(name)) {
            (_, None, _) => fresh.clone(),
            (MomentumRule::Ema, Some(prev), _) => {
                // The boundaries are copies so they hold bit-exactly, signed zeros included.
                if alpha == 1.0 {
                    if prev.shape() != fresh.shape() {
                        return Err(Error::Protocol(format!("{name} changed shape")));
                    }
                    fresh.clone()
                } else if alpha == 0.0 {
                    prev.clone()
                } else {
                    blend(fresh, alpha, prev, 1.0 - alpha, name)?
                }
            }
            (MomentumRule::TwoHistory, Some(_), None) => fresh.clone(),
            (MomentumRule::TwoHistory, Some(prev), Some(prev2)) => {
                blend(prev, alpha, prev2, 1.0 - alpha, name)?
            }
        };
        out.insert(name.clone(), value);
    }
    for (name, value) in &out {
        if let Some(old) = hist.prev.insert(name.clone(), value.clone()) {
            hist.prev2.insert(name.clone(), old);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Momentum,
    Plain,
}

pub fn route(name: &str) -> Route {
    if is_prompt_param(name) {
        Route::Momentum
    } else {
        Route::Plain
    }
}

/// Name family used for routing statistics: `v`, `u/`, `G/`, `D/` or the full name.
pub fn name_prefix(name: &str) -> &str {
    if name == SHARED_CONTEXT {
        return name;
    }
    if name.starts_with(DOMAIN_CONTEXT_PREFIX) {
        return DOMAIN_CONTEXT_PREFIX;
    }
    match name.find('/') {
        Some(i) => &name[..=i],
        None => name,
    }
}

/// Per-round count of names sent down each path, keyed by name prefix.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingCounters {
    pub momentum: BTreeMap<String, u64>,
    pub plain: BTreeMap<String, u64>,
}

impl RoutingCounters {
    fn record(&mut self, name: &str, r: Route) {
        let map = match r {
            Route::Momentum => &mut self.momentum,
            Route::Plain => &mut self.plain,
        };
        *map.entry(name_prefix(name).to_string()).or_default() += 1;
    }
}

/// Central parameter server.
#[derive(Clone, Debug)]
pub struct Server {
    pub history: AggHistory,
    /// Latest distributed value of every name.
    pub distributed: Entries,
    /// One entry per completed aggregation.
    pub routing: Vec<RoutingCounters>,
}

impl Server {
    pub fn new(alpha: f64, rule: MomentumRule) -> Result<Self> {
        Ok(Server {
            history: AggHistory::new(alpha, rule)?,
            distributed: Entries::new(),
            routing: Vec::new(),
        })
    }

    pub fn rounds(&self) -> usize {
        self.routing.len()
    }

    /// Averages the uploads, smooths prompt names, and returns what is sent back.
    pub fn aggregate(&mut self, msgs: &[ParamMessage]) -> Result<Entries> {
        let avg = fedavg(msgs)?;
        let mut counters = RoutingCounters::default();
        let mut prompt = Entries::new();
        let mut out = Entries::new();
        for (name, t) in avg {
            let r = route(&name);
            counters.record(&name, r);
            match r {
                Route::Momentum => {
                    prompt.insert(name, t);
                }
                Route::Plain => {
                    out.insert(name, t);
                }
            }
        }
        out.extend(momentum_aggregate(&prompt, &mut self.history)?);
        for (name, t) in &out {
            self.distributed.insert(name.clone(), t.clone());
        }
        self.routing.push(counters);
        Ok(out)
    }
}
