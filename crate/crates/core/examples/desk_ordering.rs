// Mean leave-one-domain-out accuracy of each prompt mode over seeds 0..3,
// plus the no-momentum variant. Writes `desk_ordering.csv`.
//
// ```sh
// cargo run --release --example desk_ordering            # about 3 minutes on one core
// FDSPG_OUT=results cargo run --release --example desk_ordering
// ```

use std::fmt::Write as _;
use std::path::PathBuf;

use feddspg::dsp::PromptMode;
use feddspg::evalhub::leave_one_domain_out;
use feddspg::ExperimentConfig;

const SEEDS: [u64; 3] = [0, 1, 2];

pub fn run_example(quick: bool) -> feddspg::Result<String> {
    let variants = [
        ("dsp", PromptMode::Dsp, 0.2),
        ("csp", PromptMode::Csp, 0.2),
        ("hdp", PromptMode::Hdp, 0.2),
        ("wgm", PromptMode::Wgm, 0.2),
        ("dsp-alpha1", PromptMode::Dsp, 1.0),
    ];
    let mut csv = String::from("variant,seed,target_domain,accuracy,macro_f1,config_hash\n");
    let mut summary = String::new();
    for (name, mode, alpha) in variants {
        let mut accs = Vec::new();
        for seed in SEEDS {
            let mut cfg = ExperimentConfig::desk().with_seed(seed);
            cfg.fed.mode = mode;
            cfg.fed.alpha = alpha;
            if quick {
                cfg.fed.epochs = 2;
                cfg.fed.gan_epochs = 2;
            }
            let (report, _) = leave_one_domain_out(&cfg)?;
            for r in &report.rows {
                let _ = writeln!(
                    csv,
                    "{name},{seed},{},{:.6},{:.6},{}",
                    r.target_domain, r.accuracy, r.macro_f1, report.config_hash
                );
            }
            accs.push(report.mean_accuracy);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let _ = writeln!(summary, "{name:>10}: mean {mean:.4} per seed {accs:.3?}");
    }
    print!("{summary}");
    let dir = PathBuf::from(
        std::env::var("FDSPG_OUT").unwrap_or_else(|_| std::env::temp_dir().display().to_string()),
    );
    if !quick {
        std::fs::create_dir_all(&dir).ok();
        std::fs::write(dir.join("desk_ordering.csv"), &csv)
            .map_err(|e| feddspg::Error::Malformed(e.to_string()))?;
        println!("wrote {}", dir.join("desk_ordering.csv").display());
    }
    Ok(csv)
}

fn main() -> feddspg::Result<()> {
    run_example(std::env::args().any(|a| a == "quick")).map(|_| ())
}
