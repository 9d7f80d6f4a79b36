// Server-side averaging: prompt names get momentum, GAN weights plain averages.
//
// ```sh
// cargo run --example aggregation
// ```

use feddspg::fed::{MomentumRule, ParamMessage, Server};
use feddspg::numcore::Tensor;

pub fn run_example() -> feddspg::Result<Vec<f32>> {
    let mut server = Server::new(0.2, MomentumRule::Ema)?;
    let mut shared = Vec::new();
    for round in 1..=5u32 {
        // Two clients; the averaged value jumps from 0 to 1 after round 1.
        let x = if round == 1 { 0.0 } else { 1.0 };
        let msgs = (0..2u32)
            .map(|c| {
                ParamMessage::new(
                    c,
                    round,
                    vec![
                        ("v".into(), Tensor::scalar(x)),
                        (format!("u/{c}"), Tensor::scalar(x)),
                        ("G/l0.w".into(), Tensor::scalar(x)),
                    ],
                )
            })
            .collect::<feddspg::Result<Vec<_>>>()?;
        let out = server.aggregate(&msgs)?;
        println!(
            "round {round}: v = {:.4}, G/l0.w = {:.4}, routes {:?}",
            out["v"].data()[0],
            out["G/l0.w"].data()[0],
            server.routing.last().unwrap()
        );
        shared.push(out["v"].data()[0]);
    }
    Ok(shared)
}

fn main() -> feddspg::Result<()> {
    run_example().map(|_| ())
}
