// Train on every domain of one dataset family and score the other zero-shot.
//
// ```sh
// cargo run --release --example cross_dataset -- quick
// ```

use feddspg::datagen::{gen_dataset, Family};
use feddspg::evalhub::{cross_dataset, EvalReport};
use feddspg::ExperimentConfig;

pub fn run_example(quick: bool) -> feddspg::Result<EvalReport> {
    let mut cfg = ExperimentConfig::desk();
    if quick {
        cfg.fed.epochs = 3;
        cfg.fed.gan_epochs = 3;
    }
    cfg.data = Family::A.spec(0);
    let target = gen_dataset(&Family::B.spec(0))?;
    let report = cross_dataset(&cfg, target)?;
    print!("{}", report.to_csv());
    Ok(report)
}

fn main() -> feddspg::Result<()> {
    run_example(std::env::args().any(|a| a == "quick")).map(|_| ())
}
