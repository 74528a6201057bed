//! Central finite differences against back-propagation, in double precision.
//! Each case returns `(name, worst relative error)`.

use ecg_wvd::ingest::ClassLabel;
use ecg_wvd::model::layers::{softmax, BatchNorm2d, Conv2d, Dense, Dropout, Layer, MaxPool2d, Relu, ResidualBlock};
use ecg_wvd::model::{ArchConfig, HeadKind, Mode, Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-6;
pub const TOL: f64 = 1e-4;
/// Coordinates checked per tensor.
pub const SAMPLES: usize = 60;

pub fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Values bounded away from zero, so ReLU kinks are never crossed.
pub fn off_zero_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = random_tensor(shape, rng);
    for v in t.data.iter_mut() {
        *v = v.signum() * (0.05 + v.abs());
    }
    t
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-6)
}

/// Through a whole network the loss carries rounding noise near 1e-9 in its
/// finite differences; the stem conv bias, which feeds batch norm, has an
/// exact gradient of zero and sees only that noise.
pub fn loss_rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-4)
}

pub fn coords(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= SAMPLES {
        (0..len).collect()
    } else {
        (0..SAMPLES).map(|_| rng.random_range(0..len)).collect()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn perturb_param(layer: &mut dyn Layer<f64>, which: usize, at: usize, delta: f64) {
    let mut k = 0;
    layer.visit_params(&mut |p| {
        if k == which {
            p.value[at] += delta;
        }
        k += 1;
    });
}

/// Checks `f(x) = Σ r·layer(x)` for input and every parameter; returns the
/// worst relative error.
pub fn check_layer(layer: &mut dyn Layer<f64>, x: &Tensor<f64>, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = layer.forward_train(x);
    let r = random_tensor(y.shape, &mut rng);
    layer.visit_params(&mut |p| p.grad.iter_mut().for_each(|g| *g = 0.0));
    let dx = layer.backward(&r, true).expect("input gradient");
    let mut grads = Vec::new();
    layer.visit_params(&mut |p| grads.push(p.grad.to_vec()));

    let f = |layer: &mut dyn Layer<f64>, x: &Tensor<f64>| dot(&layer.forward_train(x).data, &r.data);
    let mut worst: f64 = 0.0;
    for i in coords(x.data.len(), &mut rng) {
        let mut xp = x.clone();
        xp.data[i] += H;
        let fp = f(layer, &xp);
        xp.data[i] -= 2.0 * H;
        let fm = f(layer, &xp);
        worst = worst.max(rel_err(dx.data[i], (fp - fm) / (2.0 * H)));
    }
    for (which, g) in grads.iter().enumerate() {
        for i in coords(g.len(), &mut rng) {
            perturb_param(layer, which, i, H);
            let fp = f(layer, x);
            perturb_param(layer, which, i, -2.0 * H);
            let fm = f(layer, x);
            perturb_param(layer, which, i, H);
            worst = worst.max(rel_err(g[i], (fp - fm) / (2.0 * H)));
        }
    }
    worst
}

pub type Case = (String, f64);

pub fn conv_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    [(3, 1, 1, true), (3, 2, 1, false), (7, 2, 3, true), (1, 2, 0, false)]
        .into_iter()
        .map(|(k, stride, pad, bias)| {
            let mut conv = Conv2d::<f64>::new(3, 4, k, stride, pad, bias, &mut rng);
            let x = random_tensor([2, 3, 9, 9], &mut rng);
            (format!("conv k{k} s{stride} p{pad}"), check_layer(&mut conv, &x, 2))
        })
        .collect()
}

pub fn batch_norm_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bn = BatchNorm2d::<f64>::new(3);
    for (g, b) in bn.gamma.iter_mut().zip(bn.beta.iter_mut()) {
        *g = rng.random_range(0.5..1.5);
        *b = rng.random_range(-0.5..0.5);
    }
    let x = random_tensor([4, 3, 5, 5], &mut rng);
    vec![("batch norm".into(), check_layer(&mut bn, &x, 4))]
}

pub fn relu_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = off_zero_tensor([2, 3, 4, 4], &mut rng);
    vec![("relu".into(), check_layer(&mut Relu::new(), &x, 6))]
}

pub fn max_pool_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    [(3, 2, 1), (2, 2, 0)]
        .into_iter()
        .map(|(k, s, p)| {
            // distinct values so the argmax is stable under ±h
            let n = 2 * 2 * 8 * 8;
            let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
            for i in (1..n).rev() {
                values.swap(i, rng.random_range(0..=i));
            }
            let x = Tensor::from_vec([2, 2, 8, 8], values);
            (format!("max pool {k}/{s}"), check_layer(&mut MaxPool2d::new(k, s, p), &x, 8))
        })
        .collect()
}

pub fn dense_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut dense = Dense::<f64>::new(24, 7, &mut rng);
    // spatial input is flattened
    let x = random_tensor([3, 6, 2, 2], &mut rng);
    vec![("dense".into(), check_layer(&mut dense, &x, 10))]
}

pub fn dropout_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut drop = Dropout::<f64>::new(0.5, ChaCha8Rng::seed_from_u64(12));
    drop.freeze_mask(true);
    let x = random_tensor([3, 10, 1, 1], &mut rng);
    vec![("dropout".into(), check_layer(&mut drop, &x, 13))]
}

pub fn residual_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    [(3, 3, 1), (3, 5, 2)]
        .into_iter()
        .map(|(cin, cout, stride)| {
            let mut block = ResidualBlock::<f64>::new(cin, cout, stride, &mut rng);
            let x = random_tensor([3, cin, 6, 6], &mut rng);
            (format!("residual {cin}->{cout} s{stride}"), check_layer(&mut block, &x, 15))
        })
        .collect()
}

fn micro_arch(head: HeadKind) -> ArchConfig {
    ArchConfig {
        input_size: 16,
        stem_filters: 4,
        stem_kernel: 3,
        stem_stride: 1,
        stem_pool: true,
        stage_widths: vec![4],
        blocks_per_stage: 1,
        head_pool: 2,
        head,
        num_classes: 5,
    }
}

fn ce_loss(net: &mut Network<f64>, x: &Tensor<f64>, labels: &[ClassLabel]) -> f64 {
    let p = net.forward(x, Mode::Train).unwrap();
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| -p.sample(i)[l.ordinal()].ln())
        .sum::<f64>()
        / labels.len() as f64
}

/// Cross-entropy through conv, BN, ReLU, pooling, a residual block and the
/// dense head (with and without hidden layers and dropout), 16×16 inputs.
pub fn micro_network_cases() -> Vec<Case> {
    [HeadKind::None, HeadKind::Dense64, HeadKind::Dense1024Drop50Dense64]
        .into_iter()
        .map(|head| {
            let mut net = Network::<f64>::new(micro_arch(head), 21).unwrap();
            net.freeze_dropout_masks(true);
            let mut rng = ChaCha8Rng::seed_from_u64(22);
            let x = random_tensor([3, 1, 16, 16], &mut rng);
            let labels = [ClassLabel::V, ClassLabel::N, ClassLabel::Q];

            let logits = net.logits(&x, Mode::Train).unwrap();
            let mut d = softmax(&logits);
            for (i, l) in labels.iter().enumerate() {
                d.sample_mut(i)[l.ordinal()] -= 1.0;
            }
            d.data.iter_mut().for_each(|v| *v /= labels.len() as f64);
            net.zero_grad();
            let dx = net.backward(&d, true).unwrap();
            let mut grads = Vec::new();
            net.visit_params(&mut |p| grads.push(p.param.grad.to_vec()));

            let mut worst: f64 = 0.0;
            for i in coords(x.data.len(), &mut rng) {
                let mut xp = x.clone();
                xp.data[i] += H;
                let fp = ce_loss(&mut net, &xp, &labels);
                xp.data[i] -= 2.0 * H;
                let fm = ce_loss(&mut net, &xp, &labels);
                worst = worst.max(loss_rel_err(dx.data[i], (fp - fm) / (2.0 * H)));
            }
            for (which, g) in grads.iter().enumerate() {
                for i in coords(g.len(), &mut rng).into_iter().take(12) {
                    let bump = |net: &mut Network<f64>, delta: f64| {
                        let mut k = 0;
                        net.visit_params(&mut |p| {
                            if k == which {
                                p.param.value[i] += delta;
                            }
                            k += 1;
                        });
                    };
                    bump(&mut net, H);
                    let fp = ce_loss(&mut net, &x, &labels);
                    bump(&mut net, -2.0 * H);
                    let fm = ce_loss(&mut net, &x, &labels);
                    bump(&mut net, H);
                    worst = worst.max(loss_rel_err(g[i], (fp - fm) / (2.0 * H)));
                }
            }
            (format!("micro-net {head:?}"), worst)
        })
        .collect()
}

pub fn all_cases() -> Vec<Case> {
    [
        conv_cases(),
        batch_norm_cases(),
        relu_cases(),
        max_pool_cases(),
        dense_cases(),
        dropout_cases(),
        residual_cases(),
        micro_network_cases(),
    ]
    .concat()
}
