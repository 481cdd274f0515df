//! Deterministic property sweeps at the pinned sizes. Every random draw
//! comes from a fixed seed, so a rerun checks exactly the same points.

use dprobe_core::distill::{loss_ce, loss_crd, loss_hint, loss_kl, soft_cross_entropy, BoundHintHead};
use dprobe_core::nn::{build_mnist_net, LayerSpec, Model};
use dprobe_core::probes::{cam_preference, consensus_score, ifgsm_batch, linear_cka, AdvConfig};
use dprobe_core::rng::{rng_for, Rng};
use dprobe_core::tensor::{grad_check, softmax};
use dprobe_core::data::LabeledDataset;
use dprobe_core::{Result, Tape, Tensor, Var};
use rand::Rng as _;

use super::Outcome;

const SEED: u64 = 0x5eed;
const POINTS: usize = 100;
const EPS: f64 = 1e-4;

fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), &v).unwrap()
}

/// Uniform magnitudes in `[0.05, 2)` with random signs: no relu kink or
/// norm singularity within a difference step.
fn away(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    t(shape, (0..n).map(|_| rng.random_range(0.05..2.0) * if rng.random() { 1.0 } else { -1.0 }).collect())
}

/// Pairwise gaps of at least 0.08, so max-pool windows have no ties.
fn distinct(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    t(shape, order.iter().map(|&o| 0.1 * o as f64 - 1.0 + rng.random_range(0.0..0.02)).collect())
}

fn unit_rows(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let mut x = away(rng, shape).into_data();
    for row in x.chunks_mut(shape[1]) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t(shape, x)
}

fn project<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let n: usize = y.shape().iter().product();
    let w = (0..n)
        .map(|i| {
            let h = (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed.wrapping_mul(0xBF58_476D_1CE4_E5B9);
            0.5 + (h >> 40) as f64 / (1u64 << 24) as f64
        })
        .collect();
    let w = y.tape().constant(t(&y.shape(), w));
    Ok(y.mul(w)?.sum())
}

/// Gradient components far below the difference truncation error make the
/// relative metric measure noise; such points are degenerate and get
/// nudged (inputs rescaled, which keeps signs and orderings, and a new
/// projection seed) until every nonzero component is at least `1e-3`.
fn check<F>(f: F, inputs: Vec<Tensor<f64>>) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>], u64) -> Result<Var<'t, f64>>,
{
    let mut xs = inputs;
    let mut seed = 0;
    for attempt in 0..8 {
        seed = attempt;
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let Ok(loss) = f(&tape, &vars, seed) else { break };
        if tape.backward(loss).is_err() {
            break;
        }
        let tiny = vars
            .iter()
            .filter_map(|v| v.grad())
            .any(|g| g.data().iter().any(|&d| d != 0.0 && d.abs() < 1e-3));
        if !tiny {
            break;
        }
        xs.iter_mut().for_each(|x| *x = x.map(|v| v * 1.1));
    }
    grad_check(|tape, v| f(tape, v, seed), &xs, EPS)
}

type Case = (&'static str, Box<dyn Fn(&mut Rng) -> f64>);

fn gradient_cases() -> Vec<Case> {
    let small = |w: usize| -> Model<f64> {
        let layers = vec![
            LayerSpec::Conv2d { in_channels: 1, out_channels: 2, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { window: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::Linear { in_features: 2 * (w / 2) * (w / 2), out_features: 3 },
        ];
        Model::new(layers, &[], [1, w, w], 3, 11).unwrap()
    };
    let net = small(6);
    vec![
        ("add", Box::new(|r| check(|_, v, s| project(v[0].add(v[1])?, s), vec![away(r, &[2, 3]), away(r, &[2, 3])]))),
        ("sub", Box::new(|r| check(|_, v, s| project(v[0].sub(v[1])?, s), vec![away(r, &[2, 3]), away(r, &[2, 3])]))),
        ("mul", Box::new(|r| check(|_, v, s| project(v[0].mul(v[1])?, s), vec![away(r, &[2, 3]), away(r, &[2, 3])]))),
        ("scale", Box::new(|r| check(|_, v, s| project(v[0].scale(-1.3).add_scalar(0.2), s), vec![away(r, &[5])]))),
        ("exp", Box::new(|r| check(|_, v, s| project(v[0].exp(), s), vec![away(r, &[5])]))),
        ("ln", Box::new(|r| check(|_, v, s| project(v[0].ln(), s), vec![away(r, &[5]).map(f64::abs)]))),
        ("relu", Box::new(|r| check(|_, v, s| project(v[0].relu(), s), vec![away(r, &[6])]))),
        ("softplus", Box::new(|r| check(|_, v, s| project(v[0].softplus(), s), vec![away(r, &[6])]))),
        ("sum", Box::new(|r| check(|_, v, _| Ok(v[0].mul(v[0])?.sum()), vec![away(r, &[6])]))),
        ("mean", Box::new(|r| check(|_, v, _| Ok(v[0].mul(v[0])?.mean()), vec![away(r, &[6])]))),
        ("sum_rows", Box::new(|r| check(|_, v, s| project(v[0].exp().sum_rows()?, s), vec![away(r, &[3, 4])]))),
        ("matmul", Box::new(|r| check(|_, v, s| project(v[0].matmul(v[1])?, s), vec![away(r, &[2, 3]), away(r, &[3, 4])]))),
        (
            "matmul_t+add_bias",
            Box::new(|r| {
                check(
                    |_, v, s| project(v[0].matmul_t(v[1])?.add_bias(v[2])?, s),
                    vec![away(r, &[2, 3]), away(r, &[4, 3]), away(r, &[4])],
                )
            }),
        ),
        ("reshape", Box::new(|r| check(|_, v, s| project(v[0].reshape([3, 2])?.exp(), s), vec![away(r, &[2, 3])]))),
        ("flatten", Box::new(|r| check(|_, v, s| project(v[0].flatten()?.exp(), s), vec![away(r, &[2, 1, 2, 2])]))),
        (
            "conv2d",
            Box::new(|r| {
                let stride = r.random_range(1..=2);
                let padding = r.random_range(0..=1);
                check(
                    move |_, v, s| project(v[0].conv2d(v[1], Some(v[2]), stride, padding)?, s),
                    vec![away(r, &[2, 2, 5, 5]), away(r, &[3, 2, 3, 3]), away(r, &[3])],
                )
            }),
        ),
        ("maxpool2d", Box::new(|r| check(|_, v, s| project(v[0].maxpool2d(2, 2)?, s), vec![distinct(r, &[2, 2, 4, 4])]))),
        (
            "dropout",
            Box::new(|r| {
                let mask_seed = r.random();
                check(
                    move |_, v, s| project(v[0].dropout(0.3, &mut rng_for(mask_seed, &[0]))?, s),
                    vec![away(r, &[4, 5])],
                )
            }),
        ),
        ("log_softmax", Box::new(|r| check(|_, v, s| project(v[0].log_softmax()?, s), vec![away(r, &[2, 4])]))),
        ("softmax", Box::new(|r| check(|_, v, s| project(v[0].softmax(2.0)?, s), vec![away(r, &[2, 4])]))),
        ("l2_normalize_rows", Box::new(|r| check(|_, v, s| project(v[0].l2_normalize_rows()?, s), vec![away(r, &[2, 4])]))),
        ("repeat_rows", Box::new(|r| check(|_, v, s| project(v[0].repeat_rows(3)?, s), vec![away(r, &[2, 3])]))),
        (
            "loss_ce",
            Box::new(|r| {
                let mut y = vec![0.0; 8];
                y[r.random_range(0..4)] = 1.0;
                y[4 + r.random_range(0..4)] = 1.0;
                let y = t(&[2, 4], y);
                check(move |_, v, _| loss_ce(v[0], &y), vec![away(r, &[2, 4])])
            }),
        ),
        (
            "loss_kl",
            Box::new(|r| {
                let (zt, tau) = (away(r, &[2, 4]), r.random_range(0.5..8.0));
                check(move |_, v, _| loss_kl(v[0], &zt, tau), vec![away(r, &[2, 4])])
            }),
        ),
        (
            "soft_cross_entropy",
            Box::new(|r| {
                let p = softmax(&away(r, &[2, 4]), 1.0).unwrap();
                check(move |_, v, _| soft_cross_entropy(v[0], &p, 3.0), vec![away(r, &[2, 4])])
            }),
        ),
        (
            "loss_hint",
            Box::new(|r| {
                let ft = away(r, &[2, 3, 2, 2]);
                check(
                    move |_, v, _| loss_hint(v[0], &ft, &BoundHintHead::from_vars(v[1], v[2], true)),
                    vec![away(r, &[2, 2, 2, 2]), away(r, &[3, 2, 1, 1]), away(r, &[3])],
                )
            }),
        ),
        (
            "loss_crd",
            Box::new(|r| {
                let tau = r.random_range(0.5..2.0);
                check(
                    move |_, v, _| loss_crd(v[0], v[1], v[2], tau, 100),
                    vec![unit_rows(r, &[2, 3]), unit_rows(r, &[2, 3]), unit_rows(r, &[4, 3])],
                )
            }),
        ),
        (
            "conv+relu+maxpool+linear",
            Box::new(move |r| {
                let x = distinct(r, &[1, 1, 6, 6]);
                check(
                    |tape, v, s| {
                        let bound = net.bind(tape, false);
                        project(net.forward_tape(&bound, v[0], &[], 0)?.logits, s)
                    },
                    vec![x],
                )
            }),
        ),
    ]
}

fn gradients() -> Outcome {
    let mut worst: (f64, &str) = (0.0, "");
    for (i, (name, case)) in gradient_cases().into_iter().enumerate() {
        let mut rng = rng_for(SEED, &[1, i as u64]);
        for _ in 0..POINTS {
            let err = case(&mut rng);
            // A NaN error becomes the worst case and stays there.
            if err.is_nan() || err > worst.0 {
                worst = (err, name);
            }
        }
    }
    Outcome::new(
        "5a",
        "grad_check <= 1e-4 for every op at 100 random points (f64)",
        worst.0 <= 1e-4,
        format!("max relative error {:.2e} ({})", worst.0, worst.1),
    )
}

fn kl_stationary() -> Outcome {
    let mut rng = rng_for(SEED, &[2]);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let z = t(&[1, 10], (0..10).map(|_| rng.random_range(-8.0..8.0)).collect());
        let tau = rng.random_range(0.5..10.0);
        let tape = Tape::new();
        let zs = tape.leaf(z.clone(), true);
        let loss = loss_kl(zs, &z, tau).unwrap();
        tape.backward(loss).unwrap();
        worst = worst.max(zs.grad().unwrap().data().iter().fold(0.0, |m, g| m.max(g.abs())));
    }
    Outcome::new(
        "5b",
        "loss_kl gradient at z_s = z_t below 1e-7 (100 pairs)",
        worst < 1e-7,
        format!("max |grad| {worst:.2e}"),
    )
}

/// Biased HSIC ratio from explicit `n×n` Gram and centering matrices.
fn hsic_oracle(x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    let n = x.shape()[0];
    let gram = |m: &Tensor<f64>| {
        let p = m.shape()[1];
        let d = m.data();
        (0..n * n).map(|ij| (0..p).map(|c| d[ij / n * p + c] * d[ij % n * p + c]).sum()).collect::<Vec<f64>>()
    };
    let h = |i: usize, j: usize| f64::from(u8::from(i == j)) - 1.0 / n as f64;
    let mul = |a: &dyn Fn(usize, usize) -> f64, b: &dyn Fn(usize, usize) -> f64| {
        (0..n * n).map(|ij| (0..n).map(|k| a(ij / n, k) * b(k, ij % n)).sum()).collect::<Vec<f64>>()
    };
    let center = |k: &[f64]| {
        let hk = mul(&h, &|i, j| k[i * n + j]);
        mul(&|i, j| hk[i * n + j], &h)
    };
    let hsic = |a: &[f64], b: &[f64]| {
        let (ca, cb) = (center(a), center(b));
        (0..n * n).map(|ij| ca[ij] * cb[ij % n * n + ij / n]).sum::<f64>() / ((n - 1) * (n - 1)) as f64
    };
    let (k, l) = (gram(x), gram(y));
    hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
}

/// Product of two Householder reflections: a random orthogonal matrix.
fn orthogonal(rng: &mut Rng, p: usize) -> Tensor<f64> {
    let mut q: Vec<f64> = (0..p * p).map(|ij| f64::from(u8::from(ij / p == ij % p))).collect();
    for _ in 0..2 {
        let w: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm2: f64 = w.iter().map(|x| x * x).sum::<f64>().max(1e-12);
        let mut next = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..p {
                next[i * p + j] = q[i * p + j] - 2.0 * w[j] * (0..p).map(|k| q[i * p + k] * w[k]).sum::<f64>() / norm2;
            }
        }
        q = next;
    }
    t(&[p, p], q)
}

fn matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let tape = Tape::new();
    tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap().value().as_ref().clone()
}

fn cka() -> Outcome {
    let mut rng = rng_for(SEED, &[3]);
    let (mut oracle_err, mut inv_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let n = rng.random_range(3..=10);
        let (p1, p2) = (rng.random_range(1..=10), rng.random_range(1..=10));
        let x = t(&[n, p1], (0..n * p1).map(|_| rng.random_range(-1.0..1.0)).collect());
        let y = t(&[n, p2], (0..n * p2).map(|_| rng.random_range(-1.0..1.0)).collect());
        let v = linear_cka(&x, &y).unwrap().value;
        oracle_err = oracle_err.max((v - hsic_oracle(&x, &y)).abs());
        let c = rng.random_range(0.01..100.0);
        for other in [
            linear_cka(&x, &x).unwrap().value - 1.0 + v,
            linear_cka(&y, &x).unwrap().value,
            linear_cka(&x.map(|e| e * c), &y).unwrap().value,
            linear_cka(&x, &y.map(|e| e * c)).unwrap().value,
            linear_cka(&matmul(&x, &orthogonal(&mut rng, p1)), &y).unwrap().value,
            linear_cka(&x, &matmul(&y, &orthogonal(&mut rng, p2))).unwrap().value,
        ] {
            inv_err = inv_err.max((other - v).abs());
        }
    }
    Outcome::new(
        "5c",
        "linear_cka matches the HSIC oracle within 1e-6 (50 instances); self, scale and orthogonal invariance",
        oracle_err <= 1e-6 && inv_err <= 1e-9,
        format!("oracle error {oracle_err:.2e}, invariance error {inv_err:.2e}"),
    )
}

/// Uniform pixels with about a fifth pinned to exactly 0 or 1, so clamping
/// at both ends of the range is exercised.
fn random_images(rng: &mut Rng, n: usize, channels: usize) -> LabeledDataset {
    let data = (0..n * channels * 784)
        .map(|_| match rng.random_range(0..10) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random::<f32>(),
        })
        .collect();
    let labels = (0..n).map(|_| rng.random_range(0..10)).collect();
    LabeledDataset::new(Tensor::new([n, channels, 28, 28], data).unwrap(), labels, 10).unwrap()
}

fn ifgsm_bound() -> Outcome {
    let mut rng = rng_for(SEED, &[4]);
    let ds = random_images(&mut rng, 1000, 1);
    let model = build_mnist_net(1, 10, 7).unwrap();
    let cfg = AdvConfig::default();
    let (mut violations, mut moved) = (0usize, 0usize);
    let mut worst: f64 = 0.0;
    for start in (0..1000).step_by(100) {
        let idx: Vec<usize> = (start..start + 100).collect();
        let images = ds.batch(&idx, 1).unwrap();
        let adv = ifgsm_batch(&model, &images, &ds.labels()[start..start + 100], &cfg).unwrap();
        for (&a, &x) in adv.data().iter().zip(images.data()) {
            let d = (f64::from(a) - f64::from(x)).abs();
            worst = worst.max(d);
            moved += usize::from(d > 0.0);
            violations += usize::from(d > cfg.epsilon || !(0.0..=1.0).contains(&a));
        }
    }
    Outcome::new(
        "5d",
        "ifgsm L-inf bound and [0,1] range exact on 1000 images",
        violations == 0 && moved > 0,
        format!("max |adv - x| {worst} vs epsilon {}, {violations} violations", cfg.epsilon),
    )
}

fn self_probes() -> Vec<Outcome> {
    let mut rng = rng_for(SEED, &[5]);
    let ds = random_images(&mut rng, 200, 1);
    let (a, b) = (build_mnist_net(1, 10, 1).unwrap(), build_mnist_net(1, 10, 2).unwrap());
    let consensus = consensus_score(&a, &a, &ds).unwrap();
    let cam = cam_preference(&a, &b, &b, &ds, dprobe_core::nn::TAP_CONV2).unwrap();
    let scored = cam.counts.get("preference").copied().unwrap_or(0);
    vec![
        Outcome::new(
            "5e",
            "consensus(m, m) = 100",
            consensus.summary == 100.0,
            format!("{} on {} items", consensus.summary, ds.len()),
        ),
        Outcome::new(
            "5f",
            "cam_preference with identical students = 50",
            cam.summary == 50.0 && scored > 0,
            format!("{} on {scored} scored items", cam.summary),
        ),
    ]
}

fn softmax_argmax() -> Outcome {
    let mut rng = rng_for(SEED, &[6]);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let k = rng.random_range(2..=20);
        let z = t(&[1, k], (0..k).map(|_| rng.random_range(-10.0..10.0)).collect());
        let want = z.argmax_rows();
        for tau in [rng.random_range(0.05..1.0), 1.0, rng.random_range(1.0..20.0)] {
            mismatches += usize::from(softmax(&z, tau).unwrap().argmax_rows() != want);
        }
    }
    Outcome::new(
        "5g",
        "softmax argmax invariant under temperature (1000 logit vectors)",
        mismatches == 0,
        format!("{mismatches} mismatches"),
    )
}

pub fn run() -> Vec<Outcome> {
    let start = std::time::Instant::now();
    let mut out = vec![gradients(), kl_stationary(), cka(), ifgsm_bound()];
    out.extend(self_probes());
    out.push(softmax_argmax());
    let secs = start.elapsed().as_secs_f64();
    out.push(Outcome::new("5h", "property suites finish within 5 minutes", secs < 300.0, format!("{secs:.1} s")));
    out
}
