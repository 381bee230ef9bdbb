//! Finite-difference checks of every hand-written backward pass in f64.

use dwnas::block::{Block, ConvBn, MbConv, OperatorSpec, Pass};
use dwnas::latency::LatencyModel;
use dwnas::network::Network;
use dwnas::nn::gradcheck::max_rel_error;
use dwnas::nn::loss::{global_avg_pool, global_avg_pool_backward};
use dwnas::nn::{
    conv2d, conv2d_backward, grafted, grafted_backward, kl_divergence, relu6, relu6_backward,
    softmax_cross_entropy, BatchNormState, BnMode, ConvWeights, Linear,
};
use dwnas::space::{operator_space, LayerMix, Supernet, SupernetConfig};
use dwnas::transform::collapse_mbconv;
use dwnas::Tensor;
use std::cell::Cell;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
/// Coordinates probed per tensor list; larger lists are subsampled.
const MAX_COORDS: usize = 48;

pub type T64 = Tensor<f64>;

thread_local! {
    static KINKS: Cell<usize> = const { Cell::new(0) };
}

/// Central differences. A coordinate whose one-sided slopes disagree has a
/// ReLU6 kink inside the stencil; it is counted so the caller can redraw
/// the point, since finite differences say nothing there.
fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let f0 = f(&probe);
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let fp = f(&probe);
            probe[i] = orig - h;
            let fm = f(&probe);
            probe[i] = orig;
            let central = (fp - fm) / (2.0 * h);
            let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
            if (fwd - bwd).abs() > 1e-2 * central.abs().max(1e-3) {
                KINKS.with(|k| k.set(k.get() + 1));
            }
            central
        })
        .collect()
}

/// Runs `case`, redrawing its random point while a kink lies in a stencil.
/// Returns the error and the number of redraws.
fn smooth_point(rng: &mut ChaCha8Rng, mut case: impl FnMut(&mut ChaCha8Rng) -> f64) -> (f64, usize) {
    for redraw in 0..20 {
        KINKS.with(|k| k.set(0));
        let e = case(rng);
        if KINKS.with(Cell::get) == 0 {
            return (e, redraw);
        }
    }
    panic!("no kink-free point found in 20 draws");
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> T64 {
    Tensor::randn(shape, 1.0, rng)
}

/// `sum(out * r)`, the probe loss whose output gradient is `r`.
fn dot(a: &T64, r: &T64) -> f64 {
    a.data().iter().zip(r.data()).map(|(x, y)| x * y).sum()
}

fn coords(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= MAX_COORDS {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, MAX_COORDS).into_vec();
        v.sort_unstable();
        v
    }
}

/// Error of an analytic input gradient against central differences of `f`.
fn input_err(x: &T64, analytic: &T64, mut f: impl FnMut(&T64) -> f64, rng: &mut ChaCha8Rng) -> f64 {
    let idx = coords(x.numel(), rng);
    let base = x.data().to_vec();
    let num = numeric_grad(
        |v| {
            let mut d = base.clone();
            for (k, &i) in idx.iter().enumerate() {
                d[i] = v[k];
            }
            f(&Tensor::new(x.shape(), d).unwrap())
        },
        &idx.iter().map(|&i| base[i]).collect::<Vec<_>>(),
        H,
    );
    let ana: Vec<f64> = idx.iter().map(|&i| analytic.data()[i]).collect();
    max_rel_error(&ana, &num)
}

/// Error of accumulated parameter gradients on `m` against central
/// differences of `loss` on perturbed clones of `fresh`.
fn param_err<M: Clone>(
    fresh: &M,
    with_grads: &mut M,
    params: fn(&mut M) -> Vec<&mut T64>,
    loss: impl Fn(&mut M) -> f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let tensors = params(with_grads);
    let mut flat_grad = Vec::new();
    let mut flat_val = Vec::new();
    for t in &tensors {
        flat_val.extend_from_slice(t.data());
        match t.grad() {
            Some(g) => flat_grad.extend_from_slice(g),
            None => flat_grad.extend(std::iter::repeat(0.0).take(t.numel())),
        }
    }
    let idx = coords(flat_val.len(), rng);
    let num = numeric_grad(
        |v| {
            let mut m = fresh.clone();
            let mut ps = params(&mut m);
            for (k, &i) in idx.iter().enumerate() {
                let mut off = i;
                for p in ps.iter_mut() {
                    if off < p.numel() {
                        p.data_mut()[off] = v[k];
                        break;
                    }
                    off -= p.numel();
                }
            }
            loss(&mut m)
        },
        &idx.iter().map(|&i| flat_val[i]).collect::<Vec<_>>(),
        H,
    );
    let ana: Vec<f64> = idx.iter().map(|&i| flat_grad[i]).collect();
    max_rel_error(&ana, &num)
}

fn randomize_conv(c: &mut ConvWeights<f64>, rng: &mut ChaCha8Rng) {
    c.bias = Tensor::randn(c.bias.shape(), 0.3, rng);
}

fn randomize_convbn(u: &mut ConvBn<f64>, rng: &mut ChaCha8Rng) {
    randomize_conv(&mut u.conv, rng);
    if let Some(bn) = u.bn.as_mut() {
        bn.randomize(rng);
    }
}

fn randomize_mbconv(op: &mut MbConv<f64>, rng: &mut ChaCha8Rng) {
    randomize_convbn(&mut op.expand, rng);
    randomize_convbn(&mut op.depthwise, rng);
    randomize_convbn(&mut op.project, rng);
}

fn conv_params(c: &mut ConvWeights<f64>) -> Vec<&mut T64> {
    c.params_mut().into_iter().collect()
}

fn conv_case(c_in: usize, c_out: usize, k: usize, stride: usize, groups: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut w = ConvWeights::<f64>::he_init(c_in, c_out, k, stride, groups, rng).unwrap();
    randomize_conv(&mut w, rng);
    let x = randn(&[2, c_in, 7, 7], rng);
    let y = conv2d(&x, &w).unwrap();
    let r = randn(y.shape(), rng);
    let fresh = w.clone();
    let gx = conv2d_backward(&x, &mut w, &r).unwrap();
    let ei = input_err(&x, &gx, |x| dot(&conv2d(x, &fresh).unwrap(), &r), rng);
    let ep = param_err(&fresh, &mut w, conv_params, |m| dot(&conv2d(&x, m).unwrap(), &r), rng);
    ei.max(ep)
}

fn bn_params(b: &mut BatchNormState<f64>) -> Vec<&mut T64> {
    b.params_mut().into_iter().collect()
}

fn bn_case(mode: BnMode, rng: &mut ChaCha8Rng) -> f64 {
    let mut bn = BatchNormState::<f64>::new(3);
    bn.randomize(rng);
    let x = randn(&[4, 3, 3, 3], rng);
    let fresh = bn.clone();
    let (y, cache) = bn.clone().forward(&x, mode).unwrap();
    let r = randn(y.shape(), rng);
    let gx = bn.backward(&cache, &r).unwrap();
    let f = |m: &mut BatchNormState<f64>, x: &T64| dot(&m.forward(x, mode).unwrap().0, &r);
    let ei = input_err(&x, &gx, |x| f(&mut fresh.clone(), x), rng);
    let ep = param_err(&fresh, &mut bn, bn_params, |m| f(m, &x), rng);
    ei.max(ep)
}

fn activation_case(eps: Option<f64>, rng: &mut ChaCha8Rng) -> f64 {
    // spread inputs over both kinks of ReLU6
    let x = Tensor::randn(&[2, 3, 4, 4], 4.0, rng).map(|v| v + 3.0);
    let r = randn(x.shape(), rng);
    let fwd = |x: &T64| match eps {
        None => relu6(x),
        Some(e) => grafted(x, e).unwrap(),
    };
    let gx = match eps {
        None => relu6_backward(&x, &r),
        Some(e) => grafted_backward(&x, e, &r).unwrap(),
    };
    input_err(&x, &gx, |x| dot(&fwd(x), &r), rng)
}

fn linear_params(l: &mut Linear<f64>) -> Vec<&mut T64> {
    l.params_mut().into_iter().collect()
}

fn linear_case(rng: &mut ChaCha8Rng) -> f64 {
    let mut l = Linear::<f64>::he_init(6, 4, rng);
    l.bias = randn(&[4], rng);
    let x = randn(&[3, 6], rng);
    let r = randn(&[3, 4], rng);
    let fresh = l.clone();
    let gx = l.backward(&x, &r).unwrap();
    let ei = input_err(&x, &gx, |x| dot(&fresh.forward(x).unwrap(), &r), rng);
    let ep = param_err(&fresh, &mut l, linear_params, |m| dot(&m.forward(&x).unwrap(), &r), rng);
    ei.max(ep)
}

fn pool_case(rng: &mut ChaCha8Rng) -> f64 {
    let x = randn(&[2, 3, 4, 5], rng);
    let r = randn(&[2, 3], rng);
    let gx = global_avg_pool_backward(x.shape(), &r).unwrap();
    input_err(&x, &gx, |x| dot(&global_avg_pool(x).unwrap(), &r), rng)
}

fn loss_case(rng: &mut ChaCha8Rng) -> f64 {
    let logits = Tensor::randn(&[4, 5], 2.0, rng);
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
    let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
    let e_ce = input_err(&logits, &g, |z| softmax_cross_entropy(z, &labels).unwrap().0, rng);
    let teacher = Tensor::randn(&[4, 5], 2.0, rng);
    let (_, g) = kl_divergence(&logits, &teacher).unwrap();
    let e_kl = input_err(&logits, &g, |z| kl_divergence(z, &teacher).unwrap().0, rng);
    e_ce.max(e_kl)
}

fn mbconv_params(op: &mut MbConv<f64>) -> Vec<&mut T64> {
    op.params_mut()
}

fn mbconv_case(spec: OperatorSpec, stride: usize, c_out: usize, pass: Pass, rng: &mut ChaCha8Rng) -> f64 {
    let mut op = MbConv::<f64>::new(spec, 3, c_out, stride, rng).unwrap();
    randomize_mbconv(&mut op, rng);
    let x = randn(&[2, 3, 6, 6], rng);
    let fresh = op.clone();
    let (y, cache) = op.forward(&x, pass).unwrap();
    let r = randn(y.shape(), rng);
    let gx = op.backward(&cache, &r).unwrap();
    let f = |m: &mut MbConv<f64>, x: &T64| dot(&m.forward(x, pass).unwrap().0, &r);
    let ei = input_err(&x, &gx, |x| f(&mut fresh.clone(), x), rng);
    let ep = param_err(&fresh, &mut op, mbconv_params, |m| f(m, &x), rng);
    ei.max(ep)
}

fn collapsed_case(spec: OperatorSpec, rng: &mut ChaCha8Rng) -> f64 {
    let mut op = MbConv::<f64>::new(spec, 3, 3, 1, rng).unwrap();
    randomize_mbconv(&mut op, rng);
    let mut c = collapse_mbconv(&op).unwrap();
    let x = randn(&[2, 3, 6, 6], rng);
    let fresh = c.clone();
    let (y, cache) = c.forward(&x).unwrap();
    let r = randn(y.shape(), rng);
    let gx = c.backward(&cache, &r).unwrap();
    let ei = input_err(&x, &gx, |x| dot(&fresh.forward(x).unwrap().0, &r), rng);
    let ep = param_err(
        &fresh,
        &mut c,
        |m| m.conv.params_mut().into_iter().collect(),
        |m| dot(&m.forward(&x).unwrap().0, &r),
        rng,
    );
    ei.max(ep)
}

fn small_config() -> SupernetConfig {
    serde_json::from_value(serde_json::json!({
        "input": [3, 8, 8],
        "stem_channels": 4,
        "classes": 3,
        "layers": [
            {"c_in": 4, "c_out": 4, "stride": 1},
            {"c_in": 4, "c_out": 6, "stride": 2}
        ]
    }))
    .unwrap()
}

fn network_params(n: &mut Network<f64>) -> Vec<&mut T64> {
    n.params_mut()
}

fn network_case(rng: &mut ChaCha8Rng) -> f64 {
    let cfg = small_config();
    let ops = operator_space();
    let mut sn = Supernet::<f64>::build(&cfg, rng).unwrap();
    let arch: Vec<usize> = (0..2).map(|_| rng.gen_range(0..ops.len())).collect();
    let mut net = sn
        .decode(&dwnas::space::OneHotArch::new(arch, ops.len()).unwrap())
        .unwrap();
    randomize_convbn(&mut net.stem, rng);
    for b in &mut net.blocks {
        if let Block::MbConv(op) = b {
            randomize_mbconv(op, rng);
        }
    }
    let x = randn(&[3, 3, 8, 8], rng);
    let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..3)).collect();
    let fresh = net.clone();
    let (logits, cache) = net.forward(&x, Pass::TRAIN).unwrap();
    let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
    let gx = net.backward(&cache, &g).unwrap();
    let f = |m: &mut Network<f64>, x: &T64| {
        let z = m.forward(x, Pass::TRAIN).unwrap().0;
        softmax_cross_entropy(&z, &labels).unwrap().0
    };
    let ei = input_err(&x, &gx, |x| f(&mut fresh.clone(), x), rng);
    let ep = param_err(&fresh, &mut net, network_params, |m| f(m, &x), rng);
    sn.zero_grad();
    ei.max(ep)
}

/// Gradient with respect to the per-operator mixing weights of a supernet.
fn supernet_mix_case(rng: &mut ChaCha8Rng) -> f64 {
    let cfg = small_config();
    let mut sn = Supernet::<f64>::build(&cfg, rng).unwrap();
    let mix: Vec<LayerMix<f64>> = (0..2)
        .map(|_| {
            let picks = sample(rng, 12, 3).into_vec();
            picks.into_iter().map(|n| (n, rng.gen_range(0.2..1.0))).collect()
        })
        .collect();
    let x = randn(&[2, 3, 8, 8], rng);
    let labels = [0usize, 2];
    let (logits, cache) = sn.forward(&x, &mix, Pass::TRAIN).unwrap();
    let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
    let ana: Vec<f64> = sn.backward(&cache, &g).unwrap().concat();
    let w0: Vec<f64> = mix.iter().flatten().map(|e| e.1).collect();
    let num = numeric_grad(
        |w| {
            let mut k = 0;
            let m: Vec<LayerMix<f64>> = mix
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&(n, _)| {
                            k += 1;
                            (n, w[k - 1])
                        })
                        .collect()
                })
                .collect();
            let z = sn.forward(&x, &m, Pass::TRAIN).unwrap().0;
            softmax_cross_entropy(&z, &labels).unwrap().0
        },
        &w0,
        H,
    );
    max_rel_error(&ana, &num)
}

fn predictor_params(m: &mut LatencyModel) -> Vec<&mut T64> {
    m.params_mut()
}

fn predictor_case(rng: &mut ChaCha8Rng) -> f64 {
    let mut model = LatencyModel::new(3, 4, rng);
    for p in model.params_mut() {
        *p = Tensor::randn(p.shape(), 0.5, rng);
    }
    let x = Tensor::<f64>::from_fn(&[5, 12], |_| rng.gen_range(0.0..1.0));
    let t: Vec<f64> = (0..5).map(|_| rng.gen_range(1.0..3.0)).collect();
    let fresh = model.clone();
    model.mse_backward(&x, &t).unwrap();
    let ep = param_err(
        &fresh,
        &mut model,
        predictor_params,
        |m| {
            let mut m = m.clone();
            m.mse_backward(&x, &t).unwrap()
        },
        rng,
    );
    // input gradient at a relaxed encoding; bias the output positive so the
    // output clamp is inactive
    let mut lifted = fresh.clone();
    lifted.fc[2].bias = Tensor::new(&[1], vec![50.0]).unwrap();
    let enc: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..4).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect();
    let (_, g) = lifted.predict_with_grad(&enc).unwrap();
    let num = numeric_grad(|v| lifted.predict_flat(v).unwrap(), &enc.concat(), H);
    ep.max(max_rel_error(&g.concat(), &num))
}

type Case = Box<dyn FnMut(&mut ChaCha8Rng) -> f64>;

fn cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Case)> {
    let ops = operator_space();
    let nonlinear = ops[rng.gen_range(0..6)];
    let linear = ops[rng.gen_range(6..12)];
    let eps = rng.gen_range(0.05..0.95);
    vec![
        ("conv 3x3 dense", Box::new(|r| conv_case(3, 4, 3, 1, 1, r))),
        ("conv 1x1", Box::new(|r| conv_case(4, 2, 1, 1, 1, r))),
        ("conv 5x5 stride 2", Box::new(|r| conv_case(2, 3, 5, 2, 1, r))),
        ("conv depthwise 3x3 stride 2", Box::new(|r| conv_case(4, 4, 3, 2, 4, r))),
        ("conv depthwise 7x7", Box::new(|r| conv_case(3, 3, 7, 1, 3, r))),
        ("batchnorm train", Box::new(|r| bn_case(BnMode::Train, r))),
        ("batchnorm infer", Box::new(|r| bn_case(BnMode::Infer, r))),
        ("relu6", Box::new(|r| activation_case(None, r))),
        ("grafted activation", Box::new(move |r| activation_case(Some(eps), r))),
        ("linear", Box::new(linear_case)),
        ("global average pool", Box::new(pool_case)),
        ("cross entropy and kl", Box::new(loss_case)),
        ("mbconv relu6 residual", Box::new(move |r| mbconv_case(nonlinear, 1, 3, Pass::TRAIN, r))),
        ("mbconv relu6 stride 2", Box::new(move |r| mbconv_case(nonlinear, 2, 5, Pass::TRAIN, r))),
        ("mbconv linear residual", Box::new(move |r| mbconv_case(linear, 1, 3, Pass::TRAIN, r))),
        (
            "mbconv linear grafted",
            Box::new(move |r| mbconv_case(linear, 2, 4, Pass::TRAIN.with_graft(Some(eps)), r)),
        ),
        ("mbconv linear infer", Box::new(move |r| mbconv_case(linear, 1, 3, Pass::INFER, r))),
        ("collapsed operator", Box::new(move |r| collapsed_case(linear, r))),
        ("network", Box::new(network_case)),
        ("supernet mix weights", Box::new(supernet_mix_case)),
        ("latency predictor", Box::new(predictor_case)),
    ]
}

#[derive(Clone, Debug)]
pub struct GradResult {
    pub name: &'static str,
    /// Worst relative error over the checked points.
    pub err: f64,
    /// Points redrawn because a kink fell inside a stencil.
    pub redraws: usize,
}

/// One random, kink-free point per component.
pub fn gradient_point(seed: u64) -> Vec<GradResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases(&mut rng)
        .into_iter()
        .map(|(name, mut case)| {
            let (err, redraws) = smooth_point(&mut rng, &mut case);
            GradResult { name, err, redraws }
        })
        .collect()
}

/// Worst error per component over `points` random points.
pub fn gradient_suite(points: u64) -> Vec<GradResult> {
    let mut worst: Vec<GradResult> = Vec::new();
    for p in 0..points {
        for (i, r) in gradient_point(1000 + p).into_iter().enumerate() {
            if worst.len() <= i {
                worst.push(r);
            } else {
                worst[i].err = worst[i].err.max(r.err);
                worst[i].redraws += r.redraws;
            }
        }
    }
    worst
}
