//! Domain-specific soft prompts: a shared context `v` plus one context block
//! `u^d` per source domain, assembled as `[v; u^d; class]` and tuned with
//! cross-entropy over the similarity classifier.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checksum::Fnv1a;
use crate::datagen::DomainId;
use crate::encoder::{FrozenEncoders, TokenTable};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Optimizer, Tensor, Var};
use crate::rng::{self, stream};

/// Standard deviation of the initial prompt rows.
pub const PROMPT_INIT_STD: f32 = 0.02;

/// Template words of the hand-crafted prompt, followed by the class token.
pub const HAND_CRAFTED_TEMPLATE: [&str; 4] = ["a", "photo", "of", "a"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    /// Shared plus domain-specific context, followed by a trained generator.
    #[default]
    Dsp,
    /// Fixed "a photo of a [class]" prompt, nothing trained.
    Hdp,
    /// Shared context only, followed by a trained generator.
    Csp,
    /// Domain-specific prompts without the generator stage.
    Wgm,
}

impl PromptMode {
    pub const ALL: [PromptMode; 4] = [
        PromptMode::Dsp,
        PromptMode::Hdp,
        PromptMode::Csp,
        PromptMode::Wgm,
    ];

    pub fn trains_prompts(self) -> bool {
        self != PromptMode::Hdp
    }

    pub fn has_domain_context(self) -> bool {
        matches!(self, PromptMode::Dsp | PromptMode::Wgm)
    }

    pub fn uses_generator(self) -> bool {
        matches!(self, PromptMode::Dsp | PromptMode::Csp)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Dsp => "dsp",
            PromptMode::Hdp => "hdp",
            PromptMode::Csp => "csp",
            PromptMode::Wgm => "wgm",
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dsp" | "full" => Ok(PromptMode::Dsp),
            "hdp" => Ok(PromptMode::Hdp),
            "csp" => Ok(PromptMode::Csp),
            "wgm" => Ok(PromptMode::Wgm),
            other => Err(Error::Config(format!("unknown prompt mode {other:?}"))),
        }
    }
}

/// Name of the shared context tensor in parameter messages.
pub const SHARED_CONTEXT: &str = "v";
/// Prefix of per-domain context tensors in parameter messages.
pub const DOMAIN_CONTEXT_PREFIX: &str = "u/";

pub fn domain_context_name(domain: DomainId) -> String {
    format!("{DOMAIN_CONTEXT_PREFIX}{}", domain.0)
}

/// True for names that belong to prompt parameters (`v`, `u/<id>`).
pub fn is_prompt_param(name: &str) -> bool {
    name == SHARED_CONTEXT || name.starts_with(DOMAIN_CONTEXT_PREFIX)
}

/// Learnable prompt context of one client.
#[derive(Clone, Debug, PartialEq)]
pub struct DspParams {
    m1: usize,
    m2: usize,
    d_tok: usize,
    pub v: Tensor,
    pub u: BTreeMap<DomainId, Tensor>,
}

impl DspParams {
    /// Seeded initialization. Initial values depend only on `seed` and the
    /// domain id, so every client holding a domain starts from the same rows.
    pub fn new(
        m1: usize,
        m2: usize,
        d_tok: usize,
        domains: &[DomainId],
        seed: u64,
    ) -> Result<Self> {
        if m1 + m2 == 0 {
            return Err(Error::Config("soft prompts need M1 + M2 > 0".into()));
        }
        let mut vr = rng::seeded(seed, &[stream::PROMPT_INIT, 0]);
        let v = Tensor::randn(m1, d_tok, PROMPT_INIT_STD, &mut vr);
        let u = if m2 == 0 {
            BTreeMap::new()
        } else {
            domains
                .iter()
                .map(|&d| {
                    let mut ur = rng::seeded(seed, &[stream::PROMPT_INIT, 1, u64::from(d.0)]);
                    (d, Tensor::randn(m2, d_tok, PROMPT_INIT_STD, &mut ur))
                })
                .collect()
        };
        Ok(DspParams {
            m1,
            m2,
            d_tok,
            v,
            u,
        })
    }

    pub fn m1(&self) -> usize {
        self.m1
    }

    pub fn m2(&self) -> usize {
        self.m2
    }

    pub fn d_tok(&self) -> usize {
        self.d_tok
    }

    pub fn context_rows(&self) -> usize {
        self.m1 + self.m2
    }

    pub fn domains(&self) -> impl Iterator<Item = DomainId> + '_ {
        self.u.keys().copied()
    }

    fn domain_block(&self, domain: DomainId) -> Result<Option<&Tensor>> {
        if self.m2 == 0 {
            return Ok(None);
        }
        self.u
            .get(&domain)
            .map(Some)
            .ok_or(Error::UnknownDomain(domain.0))
    }

    /// Context rows `[v; u^domain]` (just `v` without domain tokens).
    pub fn context(&self, domain: DomainId) -> Result<Tensor> {
        match self.domain_block(domain)? {
            Some(u) => Tensor::stack_rows(&[&self.v, u]),
            None => Ok(self.v.clone()),
        }
    }

    /// `[v; u^domain; cls]`.
    pub fn assemble_prompt(&self, domain: DomainId, cls: &Tensor) -> Result<Tensor> {
        let ctx = self.context(domain)?;
        Tensor::stack_rows(&[&ctx, cls])
    }

    /// Context with the domain block replaced by the mean over all held domains.
    pub fn mean_domain_context(&self) -> Result<Tensor> {
        if self.m2 == 0 {
            return Ok(self.v.clone());
        }
        if self.u.is_empty() {
            return Err(Error::Contract(
                "no source domain contexts to average".into(),
            ));
        }
        let n = self.u.len() as f64;
        let mut acc = vec![0.0f64; self.m2 * self.d_tok];
        for t in self.u.values() {
            for (a, &x) in acc.iter_mut().zip(t.data()) {
                *a += f64::from(x);
            }
        }
        let mean = Tensor::from_vec(
            self.m2,
            self.d_tok,
            acc.into_iter().map(|a| (a / n) as f32).collect(),
        )?;
        Tensor::stack_rows(&[&self.v, &mean])
    }

    /// Named tensors in message order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![(SHARED_CONTEXT.to_string(), &self.v)];
        out.extend(self.u.iter().map(|(&d, t)| (domain_context_name(d), t)));
        out
    }

    /// Overwrites any held tensor whose name appears in `values`.
    pub fn load_named(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        if let Some(v) = values.get(SHARED_CONTEXT) {
            if v.shape() != self.v.shape() {
                return Err(Error::Dimension {
                    op: "load v",
                    left: self.v.shape(),
                    right: v.shape(),
                });
            }
            self.v = v.clone();
        }
        for (&d, u) in self.u.iter_mut() {
            if let Some(new) = values.get(&domain_context_name(d)) {
                if new.shape() != u.shape() {
                    return Err(Error::Dimension {
                        op: "load u",
                        left: u.shape(),
                        right: new.shape(),
                    });
                }
                *u = new.clone();
            }
        }
        Ok(())
    }

    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a::new();
        for (name, t) in self.named() {
            h.update(name.as_bytes());
            h.update(&t.checksum().to_le_bytes());
        }
        h.finish()
    }
}

/// Similarity logits `⟨g([context; c_j]), f(x)⟩ / τ` for every class `j`.
///
/// `context` may be `None` (a bare class token), `images` is `B × d` with unit
/// rows, and the result is `B × K`. Text embeddings are unit-norm, so the
/// inner product equals the cosine similarity.
pub fn class_logits_var(
    g: &mut Graph,
    enc: &FrozenEncoders,
    context: Option<Var>,
    class_tokens: &[Var],
    images: Var,
    tau: f32,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let mut prompts = Vec::with_capacity(class_tokens.len());
    for &cls in class_tokens {
        prompts.push(match context {
            Some(ctx) => g.concat_rows(&[ctx, cls])?,
            None => cls,
        });
    }
    let text = enc.encode_text_batch_var(g, &prompts)?;
    let text_t = g.transpose(text);
    let sims = g.matmul(images, text_t)?;
    Ok(g.scale(sims, 1.0 / tau))
}

/// Softmax over each row, in f64.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (r, c) = logits.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = logits.row(i);
        let max = row
            .iter()
            .fold(f64::NEG_INFINITY, |m, &x| m.max(f64::from(x)));
        let exps: Vec<f64> = row.iter().map(|&x| (f64::from(x) - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / z) as f32));
    }
    Tensor::from_vec(r, c, out).expect("same shape")
}

/// Class probabilities for image embeddings under a fixed set of prompts.
pub fn classify_with_prompts(
    enc: &FrozenEncoders,
    prompts: &[Tensor],
    image_emb: &Tensor,
    tau: f32,
) -> Result<Tensor> {
    if prompts.len() < 2 {
        return Err(Error::Contract(format!(
            "need at least 2 classes, got {}",
            prompts.len()
        )));
    }
    let mut g = Graph::new();
    let images = g.constant(image_emb.clone());
    let vars: Vec<Var> = prompts.iter().map(|p| g.constant(p.clone())).collect();
    let logits = class_logits_var(&mut g, enc, None, &vars, images, tau)?;
    Ok(softmax_rows(g.value(logits)))
}

/// Probabilities `P(y = i | x)` under the prompts `[v; u^domain; cls_i]`.
pub fn classify(
    enc: &FrozenEncoders,
    params: &DspParams,
    image_emb: &Tensor,
    domain: DomainId,
    class_tokens: &[Tensor],
    tau: f32,
) -> Result<Tensor> {
    let prompts = class_tokens
        .iter()
        .map(|c| params.assemble_prompt(domain, c))
        .collect::<Result<Vec<_>>>()?;
    classify_with_prompts(enc, &prompts, image_emb, tau)
}

/// One labeled training example, referencing a precomputed image embedding.
#[derive(Clone, Copy, Debug)]
pub struct Labeled<'a> {
    pub embedding: &'a [f32],
    pub domain: DomainId,
    pub label: usize,
}

/// Mean cross-entropy over `batch`, recorded on `g` with `v`/`u` as parameters.
/// Returns the loss node and the parameter handles in message-name order.
pub fn record_prompt_loss(
    g: &mut Graph,
    params: &DspParams,
    batch: &[Labeled<'_>],
    enc: &FrozenEncoders,
    class_tokens: &[Tensor],
    tau: f32,
) -> Result<(Var, Vec<(String, Var)>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let mut by_domain: BTreeMap<DomainId, Vec<&Labeled<'_>>> = BTreeMap::new();
    for ex in batch {
        if params.m2 > 0 && !params.u.contains_key(&ex.domain) {
            return Err(Error::UnknownDomain(ex.domain.0));
        }
        let key = if params.m2 > 0 {
            ex.domain
        } else {
            DomainId(0)
        };
        by_domain.entry(key).or_default().push(ex);
    }

    let mut handles = Vec::new();
    let v = (params.m1 > 0).then(|| g.param(&params.v));
    if let Some(v) = v {
        handles.push((SHARED_CONTEXT.to_string(), v));
    }
    let tokens: Vec<Var> = class_tokens.iter().map(|t| g.constant(t.clone())).collect();
    let mut logits = Vec::new();
    let mut labels = Vec::with_capacity(batch.len());
    for (domain, examples) in &by_domain {
        let mut ctx_parts: Vec<Var> = v.into_iter().collect();
        if params.m2 > 0 {
            let u = g.param(&params.u[domain]);
            handles.push((domain_context_name(*domain), u));
            ctx_parts.push(u);
        }
        let ctx = if ctx_parts.len() == 1 {
            ctx_parts[0]
        } else {
            g.concat_rows(&ctx_parts)?
        };
        let dim = examples[0].embedding.len();
        let mut data = Vec::with_capacity(examples.len() * dim);
        for ex in examples {
            data.extend_from_slice(ex.embedding);
            labels.push(ex.label);
        }
        let images = g.constant(Tensor::from_vec(examples.len(), dim, data)?);
        logits.push(class_logits_var(g, enc, Some(ctx), &tokens, images, tau)?);
    }
    let all = if logits.len() == 1 {
        logits[0]
    } else {
        g.concat_rows(&logits)?
    };
    let loss = g.softmax_cross_entropy(all, &labels)?;
    Ok((loss, handles))
}

/// One optimizer step on `v` and the domain blocks touched by `batch`.
/// Returns the mean cross-entropy before the step.
pub fn dsp_train_step(
    params: &mut DspParams,
    batch: &[Labeled<'_>],
    enc: &FrozenEncoders,
    class_tokens: &[Tensor],
    opt: &mut Optimizer,
    tau: f32,
) -> Result<f32> {
    let mut g = Graph::new();
    let (loss, handles) = record_prompt_loss(&mut g, params, batch, enc, class_tokens, tau)?;
    let value = g.value(loss).data()[0];
    g.backward(loss)?;

    let mut named: Vec<(String, Tensor)> = Vec::with_capacity(handles.len());
    for (name, var) in &handles {
        let mut t = if name == SHARED_CONTEXT {
            params.v.clone()
        } else {
            let id = name[DOMAIN_CONTEXT_PREFIX.len()..]
                .parse::<u32>()
                .map_err(|_| Error::Contract(format!("bad parameter name {name}")))?;
            params.u[&DomainId(id)].clone()
        };
        t.zero_grad();
        g.accumulate_into(*var, &mut t)?;
        named.push((name.clone(), t));
    }
    {
        let mut refs: Vec<(&str, &mut Tensor)> =
            named.iter_mut().map(|(n, t)| (n.as_str(), t)).collect();
        opt.step(&mut refs)?;
    }
    for (name, mut t) in named {
        t.zero_grad();
        if name == SHARED_CONTEXT {
            params.v = t;
        } else {
            let id: u32 = name[DOMAIN_CONTEXT_PREFIX.len()..]
                .parse()
                .expect("validated above");
            params.u.insert(DomainId(id), t);
        }
    }
    Ok(value)
}

/// Fixed "a photo of a [class]" token matrix.
pub fn hand_crafted_prompt(table: &TokenTable, class_name: &str) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(HAND_CRAFTED_TEMPLATE.len() + 1);
    for w in HAND_CRAFTED_TEMPLATE {
        rows.push(table.class_token(w)?);
    }
    rows.push(table.class_token(class_name)?);
    let refs: Vec<&Tensor> = rows.iter().collect();
    Tensor::stack_rows(&refs)
}

pub fn hand_crafted_prompts(table: &TokenTable, classes: &[String]) -> Result<Vec<Tensor>> {
    classes
        .iter()
        .map(|c| hand_crafted_prompt(table, c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::numcore::OptimizerSettings;

    fn enc() -> FrozenEncoders {
        FrozenEncoders::new(EncoderConfig::default()).unwrap()
    }

    fn unit_rows(seed: u64, rows: usize, d: usize) -> Tensor {
        let mut r = rng::seeded(seed, &[5]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(rows, d, 1.0, &mut r));
        let n = g.l2_normalize(x).unwrap();
        g.value(n).clone()
    }

    #[test]
    fn assembles_rows_in_order() {
        let mut p = DspParams::new(1, 1, 2, &[DomainId(0)], 0).unwrap();
        p.v = Tensor::row_vector(&[1.0, 1.0]);
        p.u.insert(DomainId(0), Tensor::row_vector(&[2.0, 2.0]));
        let cls = Tensor::row_vector(&[3.0, 3.0]);
        let prompt = p.assemble_prompt(DomainId(0), &cls).unwrap();
        assert_eq!(prompt.data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert!(matches!(
            p.assemble_prompt(DomainId(9), &cls),
            Err(Error::UnknownDomain(9))
        ));
    }

    #[test]
    fn context_only_prompt_skips_domain_block() {
        let p = DspParams::new(2, 0, 4, &[DomainId(0), DomainId(1)], 0).unwrap();
        assert!(p.u.is_empty());
        let cls = Tensor::row_vector(&[0.5; 4]);
        let prompt = p.assemble_prompt(DomainId(7), &cls).unwrap();
        assert_eq!(prompt.shape(), (3, 4));
    }

    #[test]
    fn default_prompt_shape() {
        let p = DspParams::new(4, 4, 32, &[DomainId(0)], 0).unwrap();
        let cls = Tensor::zeros(1, 32);
        assert_eq!(
            p.assemble_prompt(DomainId(0), &cls).unwrap().shape(),
            (9, 32)
        );
        assert!(DspParams::new(0, 0, 32, &[], 0).is_err());
    }

    #[test]
    fn identical_prompts_give_uniform_probabilities() {
        let e = enc();
        let cls = Tensor::row_vector(&[0.3; 32]);
        let p = DspParams::new(4, 4, 32, &[DomainId(0)], 1).unwrap();
        let img = unit_rows(1, 1, 32);
        let probs = classify(&e, &p, &img, DomainId(0), &[cls.clone(), cls], 0.01).unwrap();
        assert!((probs.data()[0] - 0.5).abs() < 1e-6);
        assert!((probs.data()[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn probabilities_sum_to_one_and_argmax_ignores_tau() {
        let e = enc();
        let table = TokenTable::new(2, 32);
        let names: Vec<String> = ["dog", "cat", "car", "cup", "tree"]
            .map(String::from)
            .to_vec();
        let toks = table.class_tokens(&names).unwrap();
        let p = DspParams::new(4, 4, 32, &[DomainId(0)], 3).unwrap();
        let imgs = unit_rows(4, 20, 32);
        let a = classify(&e, &p, &imgs, DomainId(0), &toks, 0.5).unwrap();
        let b = classify(&e, &p, &imgs, DomainId(0), &toks, 0.25).unwrap();
        for r in 0..20 {
            let s: f64 = a.row(r).iter().map(|&x| f64::from(x)).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(a.row(r).iter().all(|&x| x >= 0.0));
            let argmax = |row: &[f32]| {
                row.iter()
                    .enumerate()
                    .fold(
                        (0, f32::MIN),
                        |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc },
                    )
                    .0
            };
            assert_eq!(argmax(a.row(r)), argmax(b.row(r)));
        }
        assert!(matches!(
            classify(&e, &p, &imgs, DomainId(0), &toks, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn training_reduces_loss_on_repeated_example() {
        let e = enc();
        let table = TokenTable::new(0, 32);
        let names: Vec<String> = ["dog", "cat", "car"].map(String::from).to_vec();
        let toks = table.class_tokens(&names).unwrap();
        let mut p = DspParams::new(4, 4, 32, &[DomainId(0)], 0).unwrap();
        let img = unit_rows(0, 1, 32);
        let batch = vec![
            Labeled {
                embedding: img.data(),
                domain: DomainId(0),
                label: 1,
            };
            4
        ];
        let mut opt = Optimizer::new(OptimizerSettings::adam(1e-2));
        let first = dsp_train_step(&mut p, &batch, &e, &toks, &mut opt, 0.01).unwrap();
        let mut last = first;
        for _ in 0..50 {
            last = dsp_train_step(&mut p, &batch, &e, &toks, &mut opt, 0.01).unwrap();
        }
        assert!(last < first, "{last} !< {first}");
    }

    #[test]
    fn zero_learning_rate_is_a_null_step() {
        let e = enc();
        let table = TokenTable::new(0, 32);
        let toks = table.class_tokens(&["a1".into(), "b2".into()]).unwrap();
        let mut p = DspParams::new(4, 4, 32, &[DomainId(0), DomainId(1)], 0).unwrap();
        let before = p.clone();
        let img = unit_rows(0, 1, 32);
        let batch = [Labeled {
            embedding: img.data(),
            domain: DomainId(1),
            label: 0,
        }];
        let mut opt = Optimizer::new(OptimizerSettings::adam(0.0));
        dsp_train_step(&mut p, &batch, &e, &toks, &mut opt, 0.01).unwrap();
        assert!(p.v.bit_eq(&before.v));
        for (d, u) in &p.u {
            assert!(u.bit_eq(&before.u[d]));
        }
        assert!(dsp_train_step(&mut p, &[], &e, &toks, &mut opt, 0.01).is_err());
    }

    #[test]
    fn untouched_domains_stay_fixed() {
        let e = enc();
        let table = TokenTable::new(0, 32);
        let toks = table.class_tokens(&["a1".into(), "b2".into()]).unwrap();
        let mut p = DspParams::new(4, 4, 32, &[DomainId(0), DomainId(1)], 0).unwrap();
        let before = p.clone();
        let img = unit_rows(0, 1, 32);
        let batch = [Labeled {
            embedding: img.data(),
            domain: DomainId(1),
            label: 0,
        }];
        let mut opt = Optimizer::new(OptimizerSettings::adam(1e-2));
        dsp_train_step(&mut p, &batch, &e, &toks, &mut opt, 0.01).unwrap();
        assert!(p.u[&DomainId(0)].bit_eq(&before.u[&DomainId(0)]));
        assert!(!p.u[&DomainId(1)].bit_eq(&before.u[&DomainId(1)]));
        assert!(!p.v.bit_eq(&before.v));
    }

    #[test]
    fn hand_crafted_prompts_share_template_rows() {
        let table = TokenTable::new(0, 32);
        let dog = hand_crafted_prompt(&table, "dog").unwrap();
        let cat = hand_crafted_prompt(&table, "cat").unwrap();
        assert_eq!(dog.shape(), (5, 32));
        assert!(dog.bit_eq(&hand_crafted_prompt(&table, "dog").unwrap()));
        for r in 0..4 {
            assert_eq!(dog.row(r), cat.row(r));
        }
        assert_ne!(dog.row(4), cat.row(4));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in PromptMode::ALL {
            assert_eq!(m.as_str().parse::<PromptMode>().unwrap(), m);
        }
        assert!("nope".parse::<PromptMode>().is_err());
    }
}
