// Generate a multi-domain dataset, write it to disk and read it back.
//
// ```sh
// cargo run --example synthetic_domains
// ```

use feddspg::datagen::{self, DomainDataset, GenSpec};

/// Accuracy of a nearest-class-mean rule fit on one domain and applied to another.
fn transfer_accuracy(ds: &DomainDataset, from: usize, to: usize) -> f64 {
    let ids = ds.domain_ids();
    let k = ds.num_classes();
    let mut means = vec![vec![0.0f64; ds.feature_dim]; k];
    let mut counts = vec![0usize; k];
    for i in ds.indices_in(ids[from]) {
        let s = &ds.samples[i];
        counts[s.class] += 1;
        for (m, &x) in means[s.class].iter_mut().zip(&s.features) {
            *m += f64::from(x);
        }
    }
    for (m, c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|x| *x /= *c as f64);
    }
    let target = ds.indices_in(ids[to]);
    let correct = target
        .iter()
        .filter(|&&i| {
            let s = &ds.samples[i];
            let dist = |m: &Vec<f64>| {
                m.iter()
                    .zip(&s.features)
                    .map(|(a, &b)| (a - f64::from(b)).powi(2))
                    .sum::<f64>()
            };
            let best = (0..k)
                .min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b])))
                .unwrap();
            best == s.class
        })
        .count();
    correct as f64 / target.len() as f64
}

pub fn run_example() -> feddspg::Result<()> {
    let dir = std::env::temp_dir().join(format!("fdspg-synthetic-{}", std::process::id()));
    for shift in [0.0, 0.8] {
        let ds = datagen::gen_dataset(&GenSpec {
            shift_strength: shift,
            ..GenSpec::default()
        })?;
        println!(
            "shift {shift}: {} samples, domains {:?}, in-domain {:.2}, cross-domain {:.2}",
            ds.samples.len(),
            ds.domains
                .iter()
                .map(|d| d.name.as_str())
                .collect::<Vec<_>>(),
            transfer_accuracy(&ds, 0, 0),
            transfer_accuracy(&ds, 0, 1),
        );
        let manifest = datagen::save_dataset(&ds, &dir)?;
        let back = datagen::load_dataset(&manifest)?;
        assert_eq!(back.content_fingerprint(), ds.content_fingerprint());
    }
    println!("round trip through {} ok", dir.display());
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}

fn main() -> feddspg::Result<()> {
    run_example()
}
