// Full two-stage federated training under leave-one-domain-out, written as a
// CSV/JSON report.
//
// ```sh
// cargo run --release --example federated_lodo            # desk preset
// cargo run --release --example federated_lodo -- quick   # a few epochs
// ```

use feddspg::evalhub::leave_one_domain_out;
use feddspg::evalhub::EvalReport;
use feddspg::ExperimentConfig;

pub fn run_example(quick: bool) -> feddspg::Result<EvalReport> {
    let mut cfg = ExperimentConfig::desk();
    if quick {
        cfg.fed.epochs = 3;
        cfg.fed.gan_epochs = 3;
    }
    let (report, folds) = leave_one_domain_out(&cfg)?;
    for f in &folds {
        println!(
            "held out {}: {} aggregation events, {} prompt updates, {} GAN updates, trained on {:?}",
            f.target,
            f.run.logs.len(),
            f.run.prompt_updates,
            f.run.gan_updates,
            f.run.lineage
        );
    }
    print!("{}", report.to_csv());
    println!(
        "mean accuracy {:.3}, mean macro-F1 {:.3}",
        report.mean_accuracy, report.mean_macro_f1
    );
    let out = std::env::temp_dir().join("fdspg-lodo");
    report.write(&out, "lodo")?;
    println!("wrote {}", out.join("lodo.csv").display());
    Ok(report)
}

fn main() -> feddspg::Result<()> {
    run_example(std::env::args().any(|a| a == "quick")).map(|_| ())
}
