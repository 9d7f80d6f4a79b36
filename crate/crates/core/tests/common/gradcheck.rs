//! Finite-difference checks of tape gradients against f64 reference forwards.

use std::collections::BTreeMap;

use feddspg::datagen::DomainId;
use feddspg::dsp::{record_prompt_loss, DspParams, Labeled};
use feddspg::encoder::{EncoderConfig, FrozenEncoders};
use feddspg::numcore::{Graph, Tensor, Var};
use feddspg::promptgan::{record_gan_loss, GanBatch, GanConfig, GanParams, Trainable};
use feddspg::rng;
use rand::Rng;

use super::{central_differences_f64, max_relative_error, M64};

/// Below this magnitude a component is compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;
pub const TOL: f64 = 1e-3;

/// Per-case discrete inputs shared by the tape and the reference.
pub struct Aux {
    pub labels: Vec<usize>,
    pub targets: Vec<f32>,
}

pub type Forward = fn(&mut Graph, &[Var], &Aux) -> Var;
pub type Reference = fn(&[M64], &Aux) -> Out;

pub enum Out {
    Scalar(f64),
    Matrix(M64),
}

use Out::{Matrix, Scalar};

pub struct OpCase {
    pub name: &'static str,
    pub shapes: &'static [(usize, usize)],
    pub forward: Forward,
    pub reference: Reference,
}

/// Worst relative error of one op over `cases` seeded inputs. Matrix outputs
/// are reduced to a scalar by a fixed random projection.
pub fn check_op(op: &OpCase, cases: u64) -> f64 {
    let mut worst = 0.0f64;
    for case in 0..cases {
        let mut prng = rng::seeded(case, &[op.name.len() as u64, 17]);
        let params: Vec<Tensor> = op
            .shapes
            .iter()
            .map(|&(r, c)| {
                let mut t = Tensor::randn(r, c, 1.0, &mut prng);
                // Keep relu inputs away from the kink.
                for x in t.data_mut() {
                    if x.abs() < 0.05 {
                        *x += 0.1f32.copysign(*x);
                    }
                }
                t
            })
            .collect();
        let aux = Aux {
            labels: (0..8).map(|_| prng.random_range(0..4)).collect(),
            targets: (0..8).map(|_| prng.random_range(0..2) as f32).collect(),
        };
        let proj_seed: u64 = prng.random();

        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
        let out = (op.forward)(&mut g, &vars, &aux);
        let (loss, projection) = if g.shape(out) == (1, 1) {
            (out, None)
        } else {
            let (r, c) = g.shape(out);
            let mut pr = rng::seeded(proj_seed, &[]);
            let w = Tensor::randn(r * c, 1, 1.0, &mut pr);
            let flat = g.reshape(out, 1, r * c).unwrap();
            let wv = g.constant(w.clone());
            let l = g.matmul(flat, wv).unwrap();
            (
                l,
                Some(w.data().iter().map(|&x| f64::from(x)).collect::<Vec<f64>>()),
            )
        };
        g.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| g.grad(v).unwrap().iter().map(|&x| f64::from(x)).collect())
            .collect();

        let numeric = central_differences_f64(&params, |ps| match (op.reference)(ps, &aux) {
            Scalar(s) => s,
            Matrix(m) => m.project(projection.as_ref().expect("matrix output projected")),
        });
        worst = worst.max(max_relative_error(&analytic, &numeric, REL_FLOOR));
    }
    worst
}

pub fn op_suite() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            shapes: &[(3, 4), (4, 2)],
            forward: |g, v, _| g.matmul(v[0], v[1]).unwrap(),
            reference: |p, _| Matrix(p[0].matmul(&p[1])),
        },
        OpCase {
            name: "add_same_shape",
            shapes: &[(3, 4), (3, 4)],
            forward: |g, v, _| g.add(v[0], v[1]).unwrap(),
            reference: |p, _| Matrix(p[0].add(&p[1])),
        },
        OpCase {
            name: "add_broadcast_row",
            shapes: &[(3, 4), (1, 4)],
            forward: |g, v, _| g.add(v[0], v[1]).unwrap(),
            reference: |p, _| Matrix(p[0].add(&p[1])),
        },
        OpCase {
            name: "scale",
            shapes: &[(2, 3)],
            forward: |g, v, _| g.scale(v[0], -1.7),
            reference: |p, _| Matrix(p[0].scale(f64::from(-1.7f32))),
        },
        OpCase {
            name: "transpose",
            shapes: &[(2, 5)],
            forward: |g, v, _| g.transpose(v[0]),
            reference: |p, _| Matrix(p[0].transpose()),
        },
        OpCase {
            name: "reshape",
            shapes: &[(2, 6)],
            forward: |g, v, _| g.reshape(v[0], 3, 4).unwrap(),
            reference: |p, _| Matrix(p[0].reshape(3, 4)),
        },
        OpCase {
            name: "concat_cols",
            shapes: &[(2, 3), (2, 1)],
            forward: |g, v, _| g.concat_cols(&[v[0], v[1]]).unwrap(),
            reference: |p, _| Matrix(M64::concat_cols(&[&p[0], &p[1]])),
        },
        OpCase {
            name: "concat_rows",
            shapes: &[(2, 3), (1, 3)],
            forward: |g, v, _| g.concat_rows(&[v[0], v[1]]).unwrap(),
            reference: |p, _| Matrix(M64::concat_rows(&[&p[0], &p[1]])),
        },
        OpCase {
            name: "row_mean",
            shapes: &[(4, 3)],
            forward: |g, v, _| g.row_mean(v[0]).unwrap(),
            reference: |p, _| Matrix(p[0].row_mean()),
        },
        OpCase {
            name: "tanh",
            shapes: &[(3, 3)],
            forward: |g, v, _| g.tanh(v[0]),
            reference: |p, _| Matrix(p[0].map(f64::tanh)),
        },
        OpCase {
            name: "relu",
            shapes: &[(3, 3)],
            forward: |g, v, _| g.relu(v[0]),
            reference: |p, _| Matrix(p[0].map(|x| x.max(0.0))),
        },
        OpCase {
            name: "sigmoid",
            shapes: &[(3, 3)],
            forward: |g, v, _| g.sigmoid(v[0]),
            reference: |p, _| Matrix(p[0].map(M64::sigmoid)),
        },
        OpCase {
            name: "l2_normalize",
            shapes: &[(3, 4)],
            forward: |g, v, _| g.l2_normalize(v[0]).unwrap(),
            reference: |p, _| Matrix(p[0].l2_normalize()),
        },
        OpCase {
            name: "cosine_sim",
            shapes: &[(2, 5), (2, 5)],
            forward: |g, v, _| g.cosine_sim(v[0], v[1]).unwrap(),
            reference: |p, _| Matrix(p[0].cosine_rows(&p[1])),
        },
        OpCase {
            name: "softmax_cross_entropy",
            shapes: &[(3, 4)],
            forward: |g, v, a| g.softmax_cross_entropy(v[0], &a.labels[..3]).unwrap(),
            reference: |p, a| Scalar(p[0].softmax_cross_entropy(&a.labels[..3])),
        },
        OpCase {
            name: "bce_with_logits",
            shapes: &[(4, 1)],
            forward: |g, v, a| g.bce_with_logits(v[0], &a.targets[..4]).unwrap(),
            reference: |p, a| {
                let t: Vec<f64> = a.targets[..4].iter().map(|&x| f64::from(x)).collect();
                Scalar(p[0].bce(&t))
            },
        },
        OpCase {
            name: "two_layer_tanh_network",
            shapes: &[(2, 3), (3, 4), (1, 4), (4, 2), (1, 2)],
            forward: |g, v, _| {
                let h = g.matmul(v[0], v[1]).unwrap();
                let h = g.add(h, v[2]).unwrap();
                let h = g.tanh(h);
                let o = g.matmul(h, v[3]).unwrap();
                let o = g.add(o, v[4]).unwrap();
                g.tanh(o)
            },
            reference: |p, _| {
                Matrix(
                    p[0].matmul(&p[1])
                        .add(&p[2])
                        .map(f64::tanh)
                        .matmul(&p[3])
                        .add(&p[4])
                        .map(f64::tanh),
                )
            },
        },
    ]
}

fn m64s(ts: [&Tensor; 4]) -> [M64; 4] {
    ts.map(M64::from_tensor)
}

/// `l2norm(tanh(tanh(x W1 + b1) W2 + b2))`, the frozen tower in f64.
fn tower(w: &[M64; 4], x: &M64) -> M64 {
    x.matmul(&w[0])
        .add(&w[1])
        .map(f64::tanh)
        .matmul(&w[2])
        .add(&w[3])
        .map(f64::tanh)
        .l2_normalize()
}

fn unit_rows(rows: usize, cols: usize, r: &mut rng::Rng) -> Tensor {
    let t = Tensor::randn(rows, cols, 1.0, r);
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let n = t.row(i).iter().map(|x| x * x).sum::<f32>().sqrt();
        out.extend(t.row(i).iter().map(|x| x / n));
    }
    Tensor::from_vec(rows, cols, out).unwrap()
}

/// Prompt-learning cross-entropy: gradients with respect to the shared context
/// and every domain context, over `cases` seeded tiny problems.
pub fn check_prompt_loss(cases: u64) -> f64 {
    let (k, d, d_tok, m1, m2) = (3, 4, 3, 2, 2);
    let tau = 0.5f32;
    let domains = [DomainId(0), DomainId(1)];
    let mut worst = 0.0f64;
    for case in 0..cases {
        let enc = FrozenEncoders::new(EncoderConfig {
            d,
            feature_dim: 2,
            d_tok,
            hidden: 5,
            seed: case,
        })
        .unwrap();
        let mut r = rng::seeded(case, &[101]);
        let mut params = DspParams::new(m1, m2, d_tok, &domains, case).unwrap();
        params.v = Tensor::randn(m1, d_tok, 1.0, &mut r);
        for dom in domains {
            params.u.insert(dom, Tensor::randn(m2, d_tok, 1.0, &mut r));
        }
        let tokens: Vec<Tensor> = (0..k)
            .map(|_| Tensor::randn(1, d_tok, 1.0, &mut r))
            .collect();
        let images = unit_rows(5, d, &mut r);
        let doms: Vec<DomainId> = (0..5).map(|i| domains[i % 2]).collect();
        let labels: Vec<usize> = (0..5).map(|_| r.random_range(0..k)).collect();
        let batch: Vec<Labeled<'_>> = (0..5)
            .map(|i| Labeled {
                embedding: images.row(i),
                domain: doms[i],
                label: labels[i],
            })
            .collect();

        let mut g = Graph::new();
        let (loss, handles) =
            record_prompt_loss(&mut g, &params, &batch, &enc, &tokens, tau).unwrap();
        g.backward(loss).unwrap();
        let grads: BTreeMap<String, Vec<f64>> = handles
            .iter()
            .map(|(n, v)| {
                (
                    n.clone(),
                    g.grad(*v).unwrap().iter().map(|&x| f64::from(x)).collect(),
                )
            })
            .collect();
        let named: Vec<(String, Tensor)> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let analytic: Vec<Vec<f64>> = named.iter().map(|(n, _)| grads[n].clone()).collect();
        let tensors: Vec<Tensor> = named.into_iter().map(|(_, t)| t).collect();

        let text = m64s(enc.text_weights());
        let tok64: Vec<M64> = tokens.iter().map(M64::from_tensor).collect();
        let img64 = M64::from_tensor(&images);
        let numeric = central_differences_f64(&tensors, |ps| {
            // ps = [v, u/0, u/1] in name order.
            let v = &ps[0];
            let mut logits = Vec::with_capacity(5 * k);
            for i in 0..5 {
                let u = &ps[1 + doms[i].0 as usize];
                for cls in &tok64 {
                    let prompt = M64::concat_rows(&[v, u, cls]);
                    let w = tower(&text, &prompt.row_mean());
                    let dot: f64 = img64.row(i).iter().zip(&w.data).map(|(a, b)| a * b).sum();
                    logits.push(dot / f64::from(tau));
                }
            }
            M64 {
                rows: 5,
                cols: k,
                data: logits,
            }
            .softmax_cross_entropy(&labels)
        });
        worst = worst.max(max_relative_error(&analytic, &numeric, REL_FLOOR));
    }
    worst
}

/// Which adversarial objective to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GanLoss {
    Discriminator,
    Generator { saturating: bool },
}

fn mlp_forward(layers: &[M64], x: &M64, act: fn(f64) -> f64, pre: &mut Vec<f64>) -> M64 {
    let mut h = x.clone();
    let n = layers.len() / 2;
    for i in 0..n {
        // layers are [b0, w0, b1, w1, ...] in name order.
        h = h.matmul(&layers[2 * i + 1]).add(&layers[2 * i]);
        if i + 1 < n {
            pre.extend_from_slice(&h.data);
            h = h.map(act);
        }
    }
    h
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Both adversarial losses, differentiated with respect to the network that
/// owns them. Cases whose relu pre-activations sit within 1e-2 of the kink are
/// redrawn, since central differences are meaningless there; returns the worst
/// error and the number of redraws.
pub fn check_gan_loss(which: GanLoss, cases: usize) -> (f64, usize) {
    let (z_dim, hidden, d, rows, d_tok, b) = (2, 4, 3, 2, 2, 3);
    let mut worst = 0.0f64;
    let (mut done, mut skipped, mut seed) = (0, 0, 0u64);
    while done < cases {
        seed += 1;
        let config = GanConfig {
            z_dim,
            hidden,
            d_steps: 1,
            saturating: matches!(which, GanLoss::Generator { saturating: true }),
        };
        let mut gan = GanParams::new(config, d, rows, d_tok, seed).unwrap();
        let mut r = rng::seeded(seed, &[202]);
        // Non-zero biases so every weight is exercised.
        let mut values = BTreeMap::new();
        for (n, t) in gan.named() {
            values.insert(n, Tensor::randn(t.rows(), t.cols(), 0.8, &mut r));
        }
        gan.load_named(&values).unwrap();
        let batch = GanBatch {
            real_prompts: Tensor::randn(b, rows * d_tok, 1.0, &mut r),
            real_images: unit_rows(b, d, &mut r),
            fake_images: unit_rows(b, d, &mut r),
            noise: Tensor::randn(b, z_dim, 1.0, &mut r),
        };
        let trainable = match which {
            GanLoss::Discriminator => Trainable::Discriminator,
            GanLoss::Generator { .. } => Trainable::Generator,
        };
        let prefix = match which {
            GanLoss::Discriminator => "D/",
            GanLoss::Generator { .. } => "G/",
        };
        let gnamed: Vec<M64> = gan
            .generator
            .named("G/")
            .into_iter()
            .map(|(_, t)| M64::from_tensor(t))
            .collect();
        let dnamed: Vec<M64> = gan
            .discriminator
            .named("D/")
            .into_iter()
            .map(|(_, t)| M64::from_tensor(t))
            .collect();
        let noise = M64::from_tensor(&batch.noise);
        let fi = M64::from_tensor(&batch.fake_images);
        let ri = M64::from_tensor(&batch.real_images);
        let rp = M64::from_tensor(&batch.real_prompts);

        // f64 loss given generator and discriminator weights; collects relu pre-activations.
        let loss64 = |gw: &[M64], dw: &[M64], pre: &mut Vec<f64>| -> f64 {
            let mut unused = Vec::new();
            let fake = mlp_forward(
                gw,
                &M64::concat_cols(&[&noise, &fi]),
                f64::tanh,
                &mut unused,
            );
            let fake_logits = mlp_forward(dw, &M64::concat_cols(&[&fake, &fi]), relu, pre);
            match which {
                GanLoss::Discriminator => {
                    let real_logits = mlp_forward(dw, &M64::concat_cols(&[&rp, &ri]), relu, pre);
                    real_logits.bce(&vec![1.0; b]) + fake_logits.bce(&vec![0.0; b])
                }
                GanLoss::Generator { saturating: false } => fake_logits.bce(&vec![1.0; b]),
                GanLoss::Generator { saturating: true } => -fake_logits.bce(&vec![0.0; b]),
            }
        };
        let mut pre = Vec::new();
        loss64(&gnamed, &dnamed, &mut pre);
        if pre.iter().any(|x| x.abs() < 1e-2) {
            skipped += 1;
            continue;
        }

        let mut g = Graph::new();
        let rec = record_gan_loss(&mut g, &gan, &batch, trainable).unwrap();
        g.backward(rec.loss).unwrap();
        let analytic: Vec<Vec<f64>> = rec
            .params
            .iter()
            .map(|(_, v)| g.grad(*v).unwrap().iter().map(|&x| f64::from(x)).collect())
            .collect();
        let owned: Vec<Tensor> = match which {
            GanLoss::Discriminator => gan.discriminator.named(prefix),
            GanLoss::Generator { .. } => gan.generator.named(prefix),
        }
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
        let numeric = central_differences_f64(&owned, |ps| {
            let mut sink = Vec::new();
            match which {
                GanLoss::Discriminator => loss64(&gnamed, ps, &mut sink),
                GanLoss::Generator { .. } => loss64(ps, &dnamed, &mut sink),
            }
        });
        worst = worst.max(max_relative_error(&analytic, &numeric, REL_FLOOR));
        done += 1;
    }
    (worst, skipped)
}
