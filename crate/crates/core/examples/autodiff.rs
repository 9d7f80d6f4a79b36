// Fit a two-layer network on the tape and watch the loss fall.
//
// ```sh
// cargo run --example autodiff
// ```

use feddspg::numcore::{Graph, Optimizer, OptimizerSettings, Tensor};
use feddspg::rng;

pub fn run_example() -> feddspg::Result<(f32, f32)> {
    let mut r = rng::seeded(0, &[]);
    // Two noisy blobs, labels 0 and 1.
    let n = 64;
    let mut xs = Vec::with_capacity(n * 2);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let c = if y == 0 { -1.0 } else { 1.0 };
        let noise = Tensor::randn(1, 2, 0.5, &mut r);
        xs.extend([c + noise.data()[0], -c + noise.data()[1]]);
        ys.push(y);
    }
    let x = Tensor::from_vec(n, 2, xs)?;

    let mut params = [
        ("w1".to_string(), Tensor::randn(2, 8, 0.5, &mut r)),
        ("b1".to_string(), Tensor::zeros(1, 8)),
        ("w2".to_string(), Tensor::randn(8, 2, 0.5, &mut r)),
    ];
    let mut opt = Optimizer::new(OptimizerSettings::adam(0.05));
    let mut first = f32::NAN;
    let mut last = f32::NAN;
    for step in 0..200 {
        let mut g = Graph::new();
        let vars: Vec<_> = params.iter().map(|(_, t)| g.param(t)).collect();
        let input = g.constant(x.clone());
        let h = g.matmul(input, vars[0])?;
        let h = g.add(h, vars[1])?;
        let h = g.tanh(h);
        let logits = g.matmul(h, vars[2])?;
        let loss = g.softmax_cross_entropy(logits, &ys)?;
        last = g.value(loss).data()[0];
        if step == 0 {
            first = last;
        }
        g.backward(loss)?;
        for ((_, t), v) in params.iter_mut().zip(&vars) {
            t.zero_grad();
            g.accumulate_into(*v, t)?;
        }
        let mut refs: Vec<(&str, &mut Tensor)> =
            params.iter_mut().map(|(n, t)| (n.as_str(), t)).collect();
        opt.step(&mut refs)?;
    }
    println!("cross-entropy {first:.4} -> {last:.4} after 200 Adam steps");
    Ok((first, last))
}

fn main() -> feddspg::Result<()> {
    run_example().map(|_| ())
}
