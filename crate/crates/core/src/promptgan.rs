//! Conditional GAN over prompt context rows.
//!
//! The generator maps `[z, f(x)]` to a flattened `(M1+M2) × d_tok` context;
//! the discriminator scores `[context, f(x)]` pairs. Real pairs come from the
//! stage-1 prompts of the image's own domain, fake pairs from the generator
//! conditioned on images drawn from the client's data.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checksum::Fnv1a;
use crate::datagen::DomainId;
use crate::dsp::DspParams;
use crate::error::{Error, Result};
use crate::numcore::{Graph, Optimizer, Tensor, Var};
use crate::rng::{self, stream};

pub const GENERATOR_PREFIX: &str = "G/";
pub const DISCRIMINATOR_PREFIX: &str = "D/";

pub fn is_gan_param(name: &str) -> bool {
    name.starts_with(GENERATOR_PREFIX) || name.starts_with(DISCRIMINATOR_PREFIX)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub z_dim: usize,
    pub hidden: usize,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
    /// Use `log(1 − D(G(z)))` for the generator instead of `−log D(G(z))`.
    pub saturating: bool,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            z_dim: 16,
            hidden: 128,
            d_steps: 1,
            saturating: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Activation {
    Tanh,
    Relu,
}

/// Three affine layers with an activation after the first two.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<(Tensor, Tensor)>,
    activation: Activation,
}

impl Mlp {
    fn new(sizes: [usize; 4], activation: Activation, rng: &mut rng::Rng) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| {
                let std = 1.0 / (w[0] as f32).sqrt();
                (Tensor::randn(w[0], w[1], std, rng), Tensor::zeros(1, w[1]))
            })
            .collect();
        Mlp { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].0.cols()
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, (w, b)) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}l{i}.b"), b));
            out.push((format!("{prefix}l{i}.w"), w));
        }
        out
    }

    fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, (w, b)) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}l{i}.b"), b));
            out.push((format!("{prefix}l{i}.w"), w));
        }
        out
    }

    /// Weight handles on `g`, trainable or constant.
    fn vars(&self, g: &mut Graph, trainable: bool) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|(w, b)| {
                if trainable {
                    (g.param(w), g.param(b))
                } else {
                    (g.constant(w.clone()), g.constant(b.clone()))
                }
            })
            .collect()
    }

    fn forward(&self, g: &mut Graph, vars: &[(Var, Var)], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in vars.iter().enumerate() {
            h = g.matmul(h, w)?;
            h = g.add(h, b)?;
            if i + 1 < vars.len() {
                h = match self.activation {
                    Activation::Tanh => g.tanh(h),
                    Activation::Relu => g.relu(h),
                };
            }
        }
        Ok(h)
    }

    fn checksum_into(&self, h: &mut Fnv1a) {
        for (w, b) in &self.layers {
            h.update(&w.checksum().to_le_bytes());
            h.update(&b.checksum().to_le_bytes());
        }
    }
}

/// Generator and discriminator weights of one client.
#[derive(Clone, Debug, PartialEq)]
pub struct GanParams {
    pub config: GanConfig,
    pub d: usize,
    pub prompt_rows: usize,
    pub d_tok: usize,
    pub generator: Mlp,
    pub discriminator: Mlp,
}

impl GanParams {
    pub fn new(
        config: GanConfig,
        d: usize,
        prompt_rows: usize,
        d_tok: usize,
        seed: u64,
    ) -> Result<Self> {
        if config.z_dim == 0 || config.hidden == 0 || d == 0 || prompt_rows == 0 || d_tok == 0 {
            return Err(Error::Config(format!(
                "GAN sizes must be positive: {config:?}, d={d}, rows={prompt_rows}, d_tok={d_tok}"
            )));
        }
        let flat = prompt_rows * d_tok;
        let h = config.hidden;
        let mut gr = rng::seeded(seed, &[stream::GAN_INIT, 0]);
        let mut dr = rng::seeded(seed, &[stream::GAN_INIT, 1]);
        Ok(GanParams {
            config,
            d,
            prompt_rows,
            d_tok,
            generator: Mlp::new([config.z_dim + d, h, h, flat], Activation::Tanh, &mut gr),
            discriminator: Mlp::new([flat + d, h, h, 1], Activation::Relu, &mut dr),
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_rows * self.d_tok
    }

    /// All weights, generator first, each group sorted by name.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.generator.named(GENERATOR_PREFIX);
        out.extend(self.discriminator.named(DISCRIMINATOR_PREFIX));
        out
    }

    pub fn load_named(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut slots = self.generator.named_mut(GENERATOR_PREFIX);
        slots.extend(self.discriminator.named_mut(DISCRIMINATOR_PREFIX));
        for (name, slot) in slots {
            if let Some(t) = values.get(&name) {
                if t.shape() != slot.shape() {
                    return Err(Error::Dimension {
                        op: "load GAN weight",
                        left: slot.shape(),
                        right: t.shape(),
                    });
                }
                *slot = t.clone();
            }
        }
        Ok(())
    }

    pub fn generator_checksum(&self) -> u64 {
        let mut h = Fnv1a::new();
        self.generator.checksum_into(&mut h);
        h.finish()
    }

    pub fn discriminator_checksum(&self) -> u64 {
        let mut h = Fnv1a::new();
        self.discriminator.checksum_into(&mut h);
        h.finish()
    }

    fn check_cols(&self, t: &Tensor, cols: usize, op: &'static str) -> Result<()> {
        if t.cols() != cols || t.rows() == 0 {
            return Err(Error::Dimension {
                op,
                left: t.shape(),
                right: (t.rows().max(1), cols),
            });
        }
        Ok(())
    }

    /// Flattened contexts for a batch: `B × z_dim` noise, `B × d` embeddings.
    pub fn generate_flat(&self, z: &Tensor, image_emb: &Tensor) -> Result<Tensor> {
        self.check_cols(z, self.config.z_dim, "generate (noise)")?;
        self.check_cols(image_emb, self.d, "generate (embedding)")?;
        if z.rows() != image_emb.rows() {
            return Err(Error::Dimension {
                op: "generate",
                left: z.shape(),
                right: image_emb.shape(),
            });
        }
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let ev = g.constant(image_emb.clone());
        let vars = self.generator.vars(&mut g, false);
        let input = g.concat_cols(&[zv, ev])?;
        let out = self.generator.forward(&mut g, &vars, input)?;
        Ok(g.value(out).clone())
    }

    /// One `(M1+M2) × d_tok` context for a `1 × z_dim` noise row and a `1 × d` embedding.
    pub fn generate(&self, z: &Tensor, image_emb: &Tensor) -> Result<Tensor> {
        if z.rows() != 1 {
            return Err(Error::Dimension {
                op: "generate",
                left: z.shape(),
                right: (1, self.config.z_dim),
            });
        }
        self.generate_flat(z, image_emb)?
            .reshaped(self.prompt_rows, self.d_tok)
    }

    /// Real-vs-fake logits for `B` flattened contexts and their embeddings.
    pub fn discriminate_flat(&self, prompts: &Tensor, image_emb: &Tensor) -> Result<Tensor> {
        self.check_cols(prompts, self.prompt_len(), "discriminate (prompt)")?;
        self.check_cols(image_emb, self.d, "discriminate (embedding)")?;
        let mut g = Graph::new();
        let p = g.constant(prompts.clone());
        let e = g.constant(image_emb.clone());
        let input = g.concat_cols(&[p, e])?;
        let vars = self.discriminator.vars(&mut g, false);
        let out = self.discriminator.forward(&mut g, &vars, input)?;
        Ok(g.value(out).clone())
    }

    /// Logit for one `(M1+M2) × d_tok` context.
    pub fn discriminate(&self, prompt: &Tensor, image_emb: &Tensor) -> Result<f32> {
        if prompt.shape() != (self.prompt_rows, self.d_tok) {
            return Err(Error::Dimension {
                op: "discriminate",
                left: prompt.shape(),
                right: (self.prompt_rows, self.d_tok),
            });
        }
        let flat = prompt.reshaped(1, self.prompt_len())?;
        Ok(self.discriminate_flat(&flat, image_emb)?.data()[0])
    }
}

/// Standard-normal noise matrix.
pub fn sample_noise(rows: usize, z_dim: usize, rng: &mut rng::Rng) -> Tensor {
    let data = (0..rows * z_dim)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    Tensor::from_vec(rows, z_dim, data).expect("sized")
}

/// Frozen stage-1 contexts paired with the embeddings of their domain's images.
#[derive(Clone, Debug)]
pub struct RealPromptBank {
    pub prompts: BTreeMap<DomainId, Tensor>,
    /// `(domain, unit embedding)` for every local sample.
    pub images: Vec<(DomainId, Vec<f32>)>,
}

impl RealPromptBank {
    /// Flattened `[v; u^d]` for every domain held by `params`, or just `v`
    /// when there are no domain blocks.
    pub fn from_params(params: &DspParams, images: Vec<(DomainId, Vec<f32>)>) -> Result<Self> {
        let mut prompts = BTreeMap::new();
        for (d, _) in &images {
            if prompts.contains_key(d) {
                continue;
            }
            let ctx = params.context(*d)?;
            prompts.insert(*d, ctx.reshaped(1, ctx.len())?);
        }
        Ok(RealPromptBank { prompts, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Everything one adversarial step consumes, drawn ahead of time so the step is pure.
#[derive(Clone, Debug)]
pub struct GanBatch {
    /// `B × prompt_len` real contexts.
    pub real_prompts: Tensor,
    /// `B × d` embeddings paired with `real_prompts`.
    pub real_images: Tensor,
    /// `B × d` embeddings conditioning the generator.
    pub fake_images: Tensor,
    /// `B × z_dim` noise.
    pub noise: Tensor,
}

impl GanBatch {
    /// Real pairs at `indices`; fake conditions drawn uniformly from the bank.
    pub fn draw(
        bank: &RealPromptBank,
        indices: &[usize],
        z_dim: usize,
        rng: &mut rng::Rng,
    ) -> Result<Self> {
        if indices.is_empty() || bank.is_empty() {
            return Err(Error::Contract("empty GAN batch".into()));
        }
        let mut prompts = Vec::new();
        let mut real = Vec::new();
        let mut fake = Vec::new();
        for &i in indices {
            let (d, emb) = &bank.images[i];
            prompts.extend_from_slice(bank.prompts[d].data());
            real.extend_from_slice(emb);
        }
        for _ in indices {
            let j = rng.random_range(0..bank.images.len());
            fake.extend_from_slice(&bank.images[j].1);
        }
        let b = indices.len();
        let dim = bank.images[0].1.len();
        let plen = prompts.len() / b;
        let noise = sample_noise(b, z_dim, rng);
        Ok(GanBatch {
            real_prompts: Tensor::from_vec(b, plen, prompts)?,
            real_images: Tensor::from_vec(b, dim, real)?,
            fake_images: Tensor::from_vec(b, dim, fake)?,
            noise,
        })
    }

    pub fn len(&self) -> usize {
        self.real_prompts.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which network receives gradients when a loss is recorded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Generator,
    Discriminator,
}

/// Recorded loss plus handles of the trainable weights, in `named()` order.
pub struct RecordedLoss {
    pub loss: Var,
    pub params: Vec<(String, Var)>,
}

fn handles(prefix: &str, vars: &[(Var, Var)]) -> Vec<(String, Var)> {
    let mut out = Vec::with_capacity(vars.len() * 2);
    for (i, &(w, b)) in vars.iter().enumerate() {
        out.push((format!("{prefix}l{i}.b"), b));
        out.push((format!("{prefix}l{i}.w"), w));
    }
    out
}

/// `bce(D(real), 1) + bce(D(fake), 0)` where fakes are given directly.
pub fn record_discriminator_loss(
    g: &mut Graph,
    gan: &GanParams,
    real_prompts: &Tensor,
    real_images: &Tensor,
    fake_prompts: Var,
    fake_images: &Tensor,
) -> Result<RecordedLoss> {
    let dvars = gan.discriminator.vars(g, true);
    let rp = g.constant(real_prompts.clone());
    let ri = g.constant(real_images.clone());
    let fi = g.constant(fake_images.clone());
    let real_in = g.concat_cols(&[rp, ri])?;
    let fake_in = g.concat_cols(&[fake_prompts, fi])?;
    let real_logits = gan.discriminator.forward(g, &dvars, real_in)?;
    let fake_logits = gan.discriminator.forward(g, &dvars, fake_in)?;
    let real_loss = g.bce_with_logits(real_logits, &vec![1.0; real_prompts.rows()])?;
    let fake_loss = g.bce_with_logits(fake_logits, &vec![0.0; fake_images.rows()])?;
    let loss = g.add(real_loss, fake_loss)?;
    Ok(RecordedLoss {
        loss,
        params: handles(DISCRIMINATOR_PREFIX, &dvars),
    })
}

/// Adversarial loss for `batch` with only the `trainable` network as parameters.
pub fn record_gan_loss(
    g: &mut Graph,
    gan: &GanParams,
    batch: &GanBatch,
    trainable: Trainable,
) -> Result<RecordedLoss> {
    if batch.is_empty() {
        return Err(Error::Contract("empty GAN batch".into()));
    }
    let gvars = gan.generator.vars(g, trainable == Trainable::Generator);
    let z = g.constant(batch.noise.clone());
    let fi = g.constant(batch.fake_images.clone());
    let g_in = g.concat_cols(&[z, fi])?;
    let fake = gan.generator.forward(g, &gvars, g_in)?;
    match trainable {
        Trainable::Discriminator => record_discriminator_loss(
            g,
            gan,
            &batch.real_prompts,
            &batch.real_images,
            fake,
            &batch.fake_images,
        ),
        Trainable::Generator => {
            let dvars = gan.discriminator.vars(g, false);
            let d_in = g.concat_cols(&[fake, fi])?;
            let logits = gan.discriminator.forward(g, &dvars, d_in)?;
            let loss = if gan.config.saturating {
                // Minimizing log(1 − D) is maximizing the fake→0 cross-entropy.
                let l = g.bce_with_logits(logits, &vec![0.0; batch.len()])?;
                g.scale(l, -1.0)
            } else {
                g.bce_with_logits(logits, &vec![1.0; batch.len()])?
            };
            Ok(RecordedLoss {
                loss,
                params: handles(GENERATOR_PREFIX, &gvars),
            })
        }
    }
}

fn apply_step(
    g: &Graph,
    recorded: &RecordedLoss,
    net: &mut Mlp,
    prefix: &str,
    opt: &mut Optimizer,
) -> Result<()> {
    let mut slots = net.named_mut(prefix);
    for ((name, slot), (hname, var)) in slots.iter_mut().zip(&recorded.params) {
        debug_assert_eq!(name, hname);
        slot.zero_grad();
        g.accumulate_into(*var, slot)?;
    }
    let mut refs: Vec<(&str, &mut Tensor)> = slots
        .iter_mut()
        .map(|(n, t)| (n.as_str(), &mut **t))
        .collect();
    opt.step(&mut refs)?;
    for (_, t) in refs {
        t.zero_grad();
    }
    Ok(())
}

/// One discriminator update on explicit real and fake pairs. Returns the pre-step loss.
pub fn discriminator_step(
    gan: &mut GanParams,
    real_prompts: &Tensor,
    real_images: &Tensor,
    fake_prompts: &Tensor,
    fake_images: &Tensor,
    opt: &mut Optimizer,
) -> Result<f32> {
    let mut g = Graph::new();
    let fp = g.constant(fake_prompts.clone());
    let rec = record_discriminator_loss(&mut g, gan, real_prompts, real_images, fp, fake_images)?;
    let value = g.value(rec.loss).data()[0];
    g.backward(rec.loss)?;
    apply_step(&g, &rec, &mut gan.discriminator, DISCRIMINATOR_PREFIX, opt)?;
    Ok(value)
}

/// Discriminator step(s) followed by one generator step on the same batch.
/// Returns the pre-step `(d_loss, g_loss)`.
pub fn gan_train_step(
    gan: &mut GanParams,
    batch: &GanBatch,
    opt_g: &mut Optimizer,
    opt_d: &mut Optimizer,
) -> Result<(f32, f32)> {
    let mut d_loss = f32::NAN;
    for i in 0..gan.config.d_steps.max(1) {
        let mut g = Graph::new();
        let rec = record_gan_loss(&mut g, gan, batch, Trainable::Discriminator)?;
        if i == 0 {
            d_loss = g.value(rec.loss).data()[0];
        }
        g.backward(rec.loss)?;
        apply_step(
            &g,
            &rec,
            &mut gan.discriminator,
            DISCRIMINATOR_PREFIX,
            opt_d,
        )?;
    }
    let mut g = Graph::new();
    let rec = record_gan_loss(&mut g, gan, batch, Trainable::Generator)?;
    let g_loss = g.value(rec.loss).data()[0];
    g.backward(rec.loss)?;
    apply_step(&g, &rec, &mut gan.generator, GENERATOR_PREFIX, opt_g)?;
    Ok((d_loss, g_loss))
}
