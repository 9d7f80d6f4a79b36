// Train the conditional prompt generator against a discriminator on a bank
// of per-domain prompts, then check which domain's prompt each generated
// context lands closest to.
//
// ```sh
// cargo run --example prompt_generator
// ```

use feddspg::datagen::DomainId;
use feddspg::fed::FedConfig;
use feddspg::numcore::{Optimizer, Tensor};
use feddspg::promptgan::{gan_train_step, sample_noise, GanBatch, GanParams, RealPromptBank};
use feddspg::rng;
use rand::seq::IndexedRandom;

/// Unit vectors clustered around one direction per domain.
fn images(domain: u32, n: usize, d: usize, r: &mut rng::Rng) -> Vec<Vec<f32>> {
    let center = Tensor::randn(1, d, 1.0, &mut rng::seeded(u64::from(domain), &[99]));
    (0..n)
        .map(|_| {
            let x: Vec<f32> = center
                .data()
                .iter()
                .zip(Tensor::randn(1, d, 0.3, r).data())
                .map(|(a, b)| a + b)
                .collect();
            let norm = x.iter().map(|v| v * v).sum::<f32>().sqrt();
            x.into_iter().map(|v| v / norm).collect()
        })
        .collect()
}

pub fn run_example() -> feddspg::Result<f64> {
    let cfg = FedConfig::default();
    let (d, rows, d_tok) = (32, 8, 32);
    let mut r = rng::seeded(1, &[]);
    let mut bank = RealPromptBank {
        prompts: Default::default(),
        images: Vec::new(),
    };
    for k in 0..3u32 {
        bank.prompts
            .insert(DomainId(k), Tensor::randn(1, rows * d_tok, 0.5, &mut r));
        bank.images.extend(
            images(k, 40, d, &mut r)
                .into_iter()
                .map(|e| (DomainId(k), e)),
        );
    }

    let mut gan = GanParams::new(cfg.gan, d, rows, d_tok, 1)?;
    let settings = feddspg::numcore::OptimizerSettings::adamw(1e-3, 2e-5);
    let (mut og, mut od) = (Optimizer::new(settings), Optimizer::new(settings));
    let idx: Vec<usize> = (0..bank.len()).collect();
    for step in 1..=600 {
        let pick: Vec<usize> = idx
            .choose_multiple(&mut r, cfg.batch_size)
            .copied()
            .collect();
        let batch = GanBatch::draw(&bank, &pick, cfg.gan.z_dim, &mut r)?;
        let (dl, gl) = gan_train_step(&mut gan, &batch, &mut og, &mut od)?;
        if step % 200 == 0 {
            println!("step {step}: d_loss {dl:.3}, g_loss {gl:.3}");
        }
    }

    // Does a context generated for a domain-k image sit nearest domain k's prompt?
    let mut hits = 0;
    for (k, emb) in &bank.images {
        let z = sample_noise(1, cfg.gan.z_dim, &mut r);
        let out = gan.generate_flat(&z, &Tensor::row_vector(emb))?;
        let nearest = bank
            .prompts
            .iter()
            .min_by(|a, b| {
                out.distance(a.1)
                    .unwrap()
                    .total_cmp(&out.distance(b.1).unwrap())
            })
            .map(|(d, _)| *d)
            .unwrap();
        hits += usize::from(nearest == *k);
    }
    let rate = hits as f64 / bank.len() as f64;
    println!("generated contexts nearest their own domain's prompt: {rate:.2}");
    Ok(rate)
}

fn main() -> feddspg::Result<()> {
    run_example().map(|_| ())
}
