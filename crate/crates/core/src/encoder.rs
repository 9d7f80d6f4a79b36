//! Frozen stand-in for a pretrained dual encoder.
//!
//! Both towers are fixed random two-layer tanh maps followed by l2
//! normalization. The image tower embeds raw feature vectors; the text tower
//! mean-pools a token matrix first, so gradients can flow back into soft
//! prompt rows while the weights themselves stay constant.

use std::collections::BTreeMap;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::checksum::{fnv1a, Fnv1a};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};
use crate::rng::{self, stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Shared embedding dimension.
    pub d: usize,
    /// Width of the raw image feature vectors.
    pub feature_dim: usize,
    /// Token embedding width.
    pub d_tok: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d: 32,
            feature_dim: 64,
            d_tok: 32,
            hidden: 64,
            seed: 0,
        }
    }
}

const BIAS_STD: f32 = 0.1;

#[derive(Clone, Debug)]
struct FrozenMlp {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl FrozenMlp {
    fn new(input: usize, hidden: usize, output: usize, rng: &mut rng::Rng) -> Self {
        FrozenMlp {
            w1: Tensor::randn(input, hidden, 1.0 / (input as f32).sqrt(), rng),
            b1: Tensor::randn(1, hidden, BIAS_STD, rng),
            w2: Tensor::randn(hidden, output, 1.0 / (hidden as f32).sqrt(), rng),
            b2: Tensor::randn(1, output, BIAS_STD, rng),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w1 = g.constant(self.w1.clone());
        let b1 = g.constant(self.b1.clone());
        let w2 = g.constant(self.w2.clone());
        let b2 = g.constant(self.b2.clone());
        let h = g.matmul(x, w1)?;
        let h = g.add(h, b1)?;
        let h = g.tanh(h);
        let o = g.matmul(h, w2)?;
        let o = g.add(o, b2)?;
        Ok(g.tanh(o))
    }

    fn hash_into(&self, h: &mut Fnv1a) {
        for t in [&self.w1, &self.b1, &self.w2, &self.b2] {
            h.update(&t.checksum().to_le_bytes());
        }
    }
}

/// Image tower `f` and text tower `g`, immutable after construction.
#[derive(Clone, Debug)]
pub struct FrozenEncoders {
    config: EncoderConfig,
    image: FrozenMlp,
    text: FrozenMlp,
}

impl FrozenEncoders {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        if config.d == 0 || config.feature_dim == 0 || config.d_tok == 0 || config.hidden == 0 {
            return Err(Error::Config(format!(
                "encoder sizes must be positive: {config:?}"
            )));
        }
        let mut img_rng = rng::seeded(config.seed, &[stream::IMAGE_ENCODER]);
        let mut txt_rng = rng::seeded(config.seed, &[stream::TEXT_ENCODER]);
        Ok(FrozenEncoders {
            image: FrozenMlp::new(config.feature_dim, config.hidden, config.d, &mut img_rng),
            text: FrozenMlp::new(config.d_tok, config.hidden, config.d, &mut txt_rng),
            config,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn d_tok(&self) -> usize {
        self.config.d_tok
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// Embeds a `B × feature_dim` node into `B × d` unit rows.
    pub fn encode_image_var(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let shape = g.shape(features);
        if shape.1 != self.config.feature_dim {
            return Err(Error::Dimension {
                op: "encode_image",
                left: shape,
                right: (shape.0, self.config.feature_dim),
            });
        }
        let h = self.image.forward(g, features)?;
        g.l2_normalize(h)
    }

    pub fn encode_image(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let e = self.encode_image_var(&mut g, x)?;
        Ok(g.value(e).clone())
    }

    fn check_tokens(&self, g: &Graph, tokens: Var) -> Result<()> {
        let shape = g.shape(tokens);
        if shape.0 == 0 {
            return Err(Error::Degenerate(
                "encode_text of an empty token sequence".into(),
            ));
        }
        if shape.1 != self.config.d_tok {
            return Err(Error::Dimension {
                op: "encode_text",
                left: shape,
                right: (shape.0, self.config.d_tok),
            });
        }
        Ok(())
    }

    /// Embeds one `T × d_tok` token matrix into a `1 × d` unit row.
    pub fn encode_text_var(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        self.encode_text_batch_var(g, &[tokens])
    }

    /// Embeds several token matrices at once, one output row per prompt.
    pub fn encode_text_batch_var(&self, g: &mut Graph, prompts: &[Var]) -> Result<Var> {
        let mut pooled = Vec::with_capacity(prompts.len());
        for &p in prompts {
            self.check_tokens(g, p)?;
            pooled.push(g.row_mean(p)?);
        }
        let stacked = if pooled.len() == 1 {
            pooled[0]
        } else {
            g.concat_rows(&pooled)?
        };
        let h = self.text.forward(g, stacked)?;
        g.l2_normalize(h)
    }

    pub fn encode_text(&self, tokens: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let t = g.constant(tokens.clone());
        let e = self.encode_text_var(&mut g, t)?;
        Ok(g.value(e).clone())
    }

    /// Image tower weights `[w1, b1, w2, b2]`, read-only.
    pub fn image_weights(&self) -> [&Tensor; 4] {
        let m = &self.image;
        [&m.w1, &m.b1, &m.w2, &m.b2]
    }

    /// Text tower weights `[w1, b1, w2, b2]`, read-only.
    pub fn text_weights(&self) -> [&Tensor; 4] {
        let m = &self.text;
        [&m.w1, &m.b1, &m.w2, &m.b2]
    }

    /// Fingerprint of every frozen weight.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a::new();
        self.image.hash_into(&mut h);
        self.text.hash_into(&mut h);
        h.finish()
    }
}

const CHECKSUM_PROBES: [&str; 4] = ["a", "photo", "of", "class"];

/// Deterministic name → token embedding lookup.
///
/// Each name seeds its own generator from the hash of the full string, so the
/// embedding of a name never depends on which other names were requested.
#[derive(Debug)]
pub struct TokenTable {
    seed: u64,
    d_tok: usize,
    cache: RwLock<BTreeMap<String, Tensor>>,
}

impl Clone for TokenTable {
    fn clone(&self) -> Self {
        TokenTable {
            seed: self.seed,
            d_tok: self.d_tok,
            cache: RwLock::new(self.cache.read().expect("token cache poisoned").clone()),
        }
    }
}

impl TokenTable {
    pub fn new(seed: u64, d_tok: usize) -> Self {
        TokenTable {
            seed,
            d_tok,
            cache: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn d_tok(&self) -> usize {
        self.d_tok
    }

    pub fn class_token(&self, name: &str) -> Result<Tensor> {
        if name.is_empty() {
            return Err(Error::Contract("class token for an empty name".into()));
        }
        if let Some(t) = self.cache.read().expect("token cache poisoned").get(name) {
            return Ok(t.clone());
        }
        let t = self.derive(name);
        self.cache
            .write()
            .expect("token cache poisoned")
            .insert(name.to_string(), t.clone());
        Ok(t)
    }

    fn derive(&self, name: &str) -> Tensor {
        let mut rng = rng::seeded(self.seed, &[stream::TOKEN, fnv1a(name.as_bytes())]);
        Tensor::randn(1, self.d_tok, 1.0, &mut rng)
    }

    pub fn class_tokens(&self, names: &[String]) -> Result<Vec<Tensor>> {
        names.iter().map(|n| self.class_token(n)).collect()
    }

    /// Fingerprint of the lookup: seed, width and a fixed probe vocabulary.
    /// Every cached entry is re-derived too, so a cache that drifted from the
    /// lookup changes the fingerprint while lookups alone never do.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.update(&self.seed.to_le_bytes());
        h.update(&(self.d_tok as u64).to_le_bytes());
        for name in CHECKSUM_PROBES {
            h.update(&self.derive(name).checksum().to_le_bytes());
        }
        for (name, t) in self.cache.read().expect("token cache poisoned").iter() {
            if !t.bit_eq(&self.derive(name)) {
                h.update(name.as_bytes());
                h.update(&t.checksum().to_le_bytes());
            }
        }
        h.finish()
    }
}
