//! Inference with trained prompts or a trained generator, metrics, and reports.

pub mod protocols;
pub mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{hand_crafted_prompts, softmax_rows, PromptMode};
use crate::encoder::{FrozenEncoders, TokenTable};
use crate::error::{Error, Result};
use crate::fed::TrainedModel;
use crate::numcore::{Graph, Tensor, Var};
use crate::promptgan::{sample_noise, GanParams};
use crate::rng::{self, stream};

pub use protocols::{cross_dataset, leave_one_domain_out, Fold};
pub use report::{EvalReport, ReportRow};

/// How generator noise is chosen at inference time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ZPolicy {
    FixedZero,
    /// One draw per image.
    Seeded {
        seed: u64,
    },
    /// Logits averaged over `samples` draws per image.
    MeanOf {
        samples: usize,
        seed: u64,
    },
}

impl Default for ZPolicy {
    fn default() -> Self {
        ZPolicy::MeanOf {
            samples: 8,
            seed: 0,
        }
    }
}

impl ZPolicy {
    /// Noise rows for the image with stable key `key`.
    fn noise(&self, z_dim: usize, key: u64) -> Tensor {
        match *self {
            ZPolicy::FixedZero => Tensor::zeros(1, z_dim),
            ZPolicy::Seeded { seed } => {
                sample_noise(1, z_dim, &mut rng::seeded(seed, &[stream::EVAL_NOISE, key]))
            }
            ZPolicy::MeanOf { samples, seed } => sample_noise(
                samples.max(1),
                z_dim,
                &mut rng::seeded(seed, &[stream::EVAL_NOISE, key]),
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Tensor,
    pub predicted: usize,
    pub true_label: Option<usize>,
}

impl Prediction {
    fn from_logits(logits: &Tensor, true_label: Option<usize>) -> Self {
        let probs = softmax_rows(logits);
        Prediction {
            predicted: argmax(probs.data()),
            probs,
            true_label,
        }
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Logits `⟨w_j, e⟩ / τ` for one image embedding against every context in
/// `contexts`, averaged over contexts. `w_j = g([context; c_j])`.
fn logits_for_contexts(
    enc: &FrozenEncoders,
    contexts: &[Tensor],
    class_tokens: &[Tensor],
    image_emb: &[f32],
    tau: f32,
) -> Result<Tensor> {
    let k = class_tokens.len();
    let mut g = Graph::new();
    let tokens: Vec<Var> = class_tokens.iter().map(|t| g.constant(t.clone())).collect();
    let mut prompts = Vec::with_capacity(contexts.len() * k);
    for ctx in contexts {
        let c = g.constant(ctx.clone());
        for &t in &tokens {
            prompts.push(g.concat_rows(&[c, t])?);
        }
    }
    let w = enc.encode_text_batch_var(&mut g, &prompts)?;
    let w = g.value(w);
    let mut acc = vec![0.0f64; k];
    for s in 0..contexts.len() {
        for (j, a) in acc.iter_mut().enumerate() {
            let row = w.row(s * k + j);
            let dot: f64 = row
                .iter()
                .zip(image_emb)
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum();
            *a += dot / f64::from(tau);
        }
    }
    let n = contexts.len() as f64;
    Tensor::from_vec(1, k, acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// Everything needed to classify target images.
pub struct Predictor<'a> {
    pub model: &'a TrainedModel,
    pub encoders: &'a FrozenEncoders,
    pub class_tokens: Vec<Tensor>,
    pub hand_crafted: Vec<Tensor>,
    pub tau: f32,
    pub z_policy: ZPolicy,
}

impl<'a> Predictor<'a> {
    pub fn new(
        model: &'a TrainedModel,
        encoders: &'a FrozenEncoders,
        table: &TokenTable,
        classes: &[String],
        tau: f32,
        z_policy: ZPolicy,
    ) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        if classes.len() < 2 {
            return Err(Error::Contract(format!(
                "need at least 2 classes, got {}",
                classes.len()
            )));
        }
        match model.mode {
            PromptMode::Dsp | PromptMode::Csp if model.gan.is_none() => {
                return Err(Error::Contract(format!(
                    "{} inference needs a trained generator",
                    model.mode
                )))
            }
            PromptMode::Wgm if model.dsp.is_none() => {
                return Err(Error::Contract(
                    "wgm inference needs stage-1 prompts".into(),
                ))
            }
            _ => {}
        }
        Ok(Predictor {
            model,
            encoders,
            class_tokens: table.class_tokens(classes)?,
            hand_crafted: if model.mode == PromptMode::Hdp {
                hand_crafted_prompts(table, classes)?
            } else {
                Vec::new()
            },
            tau,
            z_policy,
        })
    }

    /// Logits for one unit image embedding. `key` identifies the image for noise draws.
    pub fn logits(&self, image_emb: &[f32], key: u64) -> Result<Tensor> {
        match self.model.mode {
            PromptMode::Hdp => {
                let e = Tensor::from_vec(1, image_emb.len(), image_emb.to_vec())?;
                let mut g = Graph::new();
                let img = g.constant(e);
                let vars: Vec<Var> = self
                    .hand_crafted
                    .iter()
                    .map(|p| g.constant(p.clone()))
                    .collect();
                let l = crate::dsp::class_logits_var(
                    &mut g,
                    self.encoders,
                    None,
                    &vars,
                    img,
                    self.tau,
                )?;
                Ok(g.value(l).clone())
            }
            PromptMode::Wgm => {
                let ctx = self
                    .model
                    .dsp
                    .as_ref()
                    .expect("checked in new")
                    .mean_domain_context()?;
                logits_for_contexts(
                    self.encoders,
                    &[ctx],
                    &self.class_tokens,
                    image_emb,
                    self.tau,
                )
            }
            PromptMode::Dsp | PromptMode::Csp => {
                let gan = self.model.gan.as_ref().expect("checked in new");
                let contexts = generated_contexts(gan, &self.z_policy, image_emb, key)?;
                logits_for_contexts(
                    self.encoders,
                    &contexts,
                    &self.class_tokens,
                    image_emb,
                    self.tau,
                )
            }
        }
    }

    pub fn predict(
        &self,
        image_emb: &[f32],
        key: u64,
        true_label: Option<usize>,
    ) -> Result<Prediction> {
        Ok(Prediction::from_logits(
            &self.logits(image_emb, key)?,
            true_label,
        ))
    }

    /// Predictions for many images, in input order. `keys[i]` names image `i`.
    pub fn predict_many(
        &self,
        images: &[&[f32]],
        keys: &[u64],
        labels: &[Option<usize>],
    ) -> Result<Vec<Prediction>> {
        images
            .par_iter()
            .zip(keys.par_iter())
            .zip(labels.par_iter())
            .map(|((img, &key), &label)| self.predict(img, key, label))
            .collect()
    }
}

fn generated_contexts(
    gan: &GanParams,
    policy: &ZPolicy,
    image_emb: &[f32],
    key: u64,
) -> Result<Vec<Tensor>> {
    let z = policy.noise(gan.config.z_dim, key);
    let mut e = Vec::with_capacity(z.rows() * image_emb.len());
    for _ in 0..z.rows() {
        e.extend_from_slice(image_emb);
    }
    let e = Tensor::from_vec(z.rows(), image_emb.len(), e)?;
    let flat = gan.generate_flat(&z, &e)?;
    (0..flat.rows())
        .map(|r| flat.row_tensor(r).reshaped(gan.prompt_rows, gan.d_tok))
        .collect()
}

/// Accuracy and macro-F1 of a set of predictions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub n: usize,
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let correct = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / predicted.len() as f64)
}

/// Unweighted mean of per-class F1 over `k` classes. A class with no true
/// positives, false positives or false negatives scores 0.
pub fn macro_f1(predicted: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    accuracy(predicted, truth)?;
    if k == 0 {
        return Err(Error::Contract("macro-F1 over zero classes".into()));
    }
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= k || t >= k {
            return Err(Error::Index {
                what: "class",
                index: p.max(t),
                len: k,
            });
        }
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let total: f64 = (0..k)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / k as f64)
}

pub fn score(predictions: &[Prediction], k: usize) -> Result<Scores> {
    let mut p = Vec::with_capacity(predictions.len());
    let mut t = Vec::with_capacity(predictions.len());
    for pred in predictions {
        p.push(pred.predicted);
        t.push(
            pred.true_label
                .ok_or_else(|| Error::Contract("scoring an unlabeled prediction".into()))?,
        );
    }
    Ok(Scores {
        accuracy: accuracy(&p, &t)?,
        macro_f1: macro_f1(&p, &t, k)?,
        n: p.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let t = [0, 1, 2, 3, 4, 0, 1, 2, 3, 4];
        assert_eq!(accuracy(&t, &t).unwrap(), 1.0);
        assert_eq!(macro_f1(&t, &t, 5).unwrap(), 1.0);
    }

    #[test]
    fn constant_predictor_is_at_chance() {
        let t: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let p = vec![2; 50];
        assert_eq!(accuracy(&p, &t).unwrap(), 0.2);
    }

    #[test]
    fn ties_break_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }

    #[test]
    fn empty_set_is_an_error() {
        assert!(accuracy(&[], &[]).is_err());
    }
}
