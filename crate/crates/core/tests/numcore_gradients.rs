mod common;

use common::central_differences;
use common::gradcheck::{check_gan_loss, check_op, check_prompt_loss, op_suite, GanLoss, TOL};
use feddspg::numcore::{Graph, Tensor};
use feddspg::rng;
use rand::Rng;

const CASES: u64 = 100;

fn run_op(name: &str) {
    let op = op_suite()
        .into_iter()
        .find(|o| o.name == name)
        .expect("op in suite");
    let worst = check_op(&op, CASES);
    println!("{name:>24}: max relative error {worst:.2e} over {CASES} cases");
    assert!(worst < TOL, "{name} max relative error {worst}");
}

macro_rules! gradcheck {
    ($($op:ident),* $(,)?) => {
        $(
            #[test]
            fn $op() {
                run_op(stringify!($op));
            }
        )*
    };
}

gradcheck!(
    matmul,
    add_same_shape,
    add_broadcast_row,
    scale,
    transpose,
    reshape,
    concat_cols,
    concat_rows,
    row_mean,
    tanh,
    relu,
    sigmoid,
    l2_normalize,
    cosine_sim,
    softmax_cross_entropy,
    bce_with_logits,
    two_layer_tanh_network,
);

#[test]
fn every_suite_op_has_a_test() {
    assert_eq!(op_suite().len(), 17);
}

#[test]
fn prompt_loss_gradients() {
    let worst = check_prompt_loss(40);
    assert!(worst < TOL, "prompt loss max relative error {worst}");
}

#[test]
fn discriminator_loss_gradients() {
    let (worst, _) = check_gan_loss(GanLoss::Discriminator, 40);
    assert!(worst < TOL, "discriminator loss max relative error {worst}");
}

#[test]
fn generator_loss_gradients() {
    for saturating in [false, true] {
        let (worst, _) = check_gan_loss(GanLoss::Generator { saturating }, 40);
        assert!(
            worst < TOL,
            "generator loss (saturating={saturating}) max relative error {worst}"
        );
    }
}

#[test]
fn cross_entropy_at_fixed_logits_matches_differences() {
    let logits = Tensor::row_vector(&[1.0, 2.0, 3.0]);
    let mut g = Graph::new();
    let l = g.param(&logits);
    let loss = g.softmax_cross_entropy(l, &[1]).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<f64> = g.grad(l).unwrap().iter().map(|&x| f64::from(x)).collect();
    let numeric = central_differences(&[logits], |ps| {
        let mut g = Graph::new();
        let l = g.constant(ps[0].clone());
        let loss = g.softmax_cross_entropy(l, &[1]).unwrap();
        f64::from(g.value(loss).data()[0])
    });
    let max_abs = analytic
        .iter()
        .zip(&numeric[0])
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    assert!(max_abs < 1e-4, "max abs diff {max_abs}");
    let sum: f64 = analytic.iter().sum();
    assert!(sum.abs() < 1e-6, "softmax - onehot sums to {sum}");
}

#[test]
fn bce_at_fixed_logit_matches_differences() {
    let x = Tensor::scalar(0.7);
    let mut g = Graph::new();
    let l = g.param(&x);
    let loss = g.bce_with_logits(l, &[0.0]).unwrap();
    g.backward(loss).unwrap();
    let analytic = f64::from(g.grad(l).unwrap()[0]);
    let numeric = central_differences(&[x], |ps| {
        let mut g = Graph::new();
        let l = g.constant(ps[0].clone());
        let loss = g.bce_with_logits(l, &[0.0]).unwrap();
        f64::from(g.value(loss).data()[0])
    });
    assert!((analytic - numeric[0][0]).abs() < 1e-4);
}

#[test]
fn matmul_agrees_with_triple_loop() {
    for case in 0..50u64 {
        let mut r = rng::seeded(case, &[3]);
        let (m, k, n) = (
            r.random_range(1..=8),
            r.random_range(1..=8),
            r.random_range(1..=8),
        );
        let a = Tensor::randn(m, k, 1.0, &mut r);
        let b = Tensor::randn(k, n, 1.0, &mut r);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        let c = g.value(c);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f32;
                for p in 0..k {
                    s += a.get(i, p) * b.get(p, j);
                }
                assert!(
                    (c.get(i, j) - s).abs() < 1e-6 * (1.0 + s.abs()),
                    "{case}: {i},{j}"
                );
            }
        }
    }
}
