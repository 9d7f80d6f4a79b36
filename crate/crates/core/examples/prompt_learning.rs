// Learn shared and per-domain soft prompts on one machine and compare them
// with the fixed "a photo of a [class]" prompt.
//
// ```sh
// cargo run --example prompt_learning
// ```

use feddspg::dsp::{
    classify, classify_with_prompts, dsp_train_step, hand_crafted_prompts, DspParams, Labeled,
};
use feddspg::evalhub::argmax;
use feddspg::fed::embed_samples;
use feddspg::numcore::{Optimizer, Tensor};
use feddspg::ExperimentConfig;

pub fn run_example() -> feddspg::Result<(f64, f64)> {
    let cfg = ExperimentConfig::desk();
    let ds = cfg.load_dataset()?;
    let enc = cfg.encoders(ds.feature_dim)?;
    let table = cfg.token_table();
    let tokens = table.class_tokens(&ds.classes)?;
    let emb = embed_samples(&enc, &ds)?;
    let domains = ds.domain_ids();

    let mut params = DspParams::new(cfg.fed.m1, cfg.fed.m2, cfg.d_tok, &domains, 0)?;
    let mut opt = Optimizer::new(cfg.fed.stage1);
    let batch: Vec<Labeled<'_>> = ds
        .samples
        .iter()
        .zip(&emb)
        .map(|(s, e)| Labeled {
            embedding: e,
            domain: s.domain,
            label: s.class,
        })
        .collect();
    for epoch in 0..30 {
        let mut total = 0.0;
        for chunk in batch.chunks(cfg.fed.batch_size) {
            total += dsp_train_step(&mut params, chunk, &enc, &tokens, &mut opt, cfg.fed.tau)?;
        }
        if epoch % 10 == 9 {
            println!(
                "epoch {:>2}: mean loss {:.3}",
                epoch + 1,
                total / batch.chunks(cfg.fed.batch_size).len() as f32
            );
        }
    }

    let fixed = hand_crafted_prompts(&table, &ds.classes)?;
    let (mut learned, mut hand) = (0usize, 0usize);
    for (s, e) in ds.samples.iter().zip(&emb) {
        let img = Tensor::row_vector(e);
        learned += usize::from(
            argmax(classify(&enc, &params, &img, s.domain, &tokens, cfg.fed.tau)?.data())
                == s.class,
        );
        hand += usize::from(
            argmax(classify_with_prompts(&enc, &fixed, &img, cfg.fed.tau)?.data()) == s.class,
        );
    }
    let n = ds.samples.len() as f64;
    let (learned, hand) = (learned as f64 / n, hand as f64 / n);
    println!("training accuracy: learned prompts {learned:.3}, hand-crafted {hand:.3}");
    Ok((learned, hand))
}

fn main() -> feddspg::Result<()> {
    run_example().map(|_| ())
}
