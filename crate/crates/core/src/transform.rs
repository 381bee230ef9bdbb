//! Deep-to-shallow structural transformation.
//!
//! Batch norms are folded into their convolutions, and every linear MBConv
//! (1x1 expand, KxK depthwise, 1x1 project, identity activations) collapses
//! into one dense KxK convolution followed by its trailing ReLU6. All weight
//! arithmetic runs in f64 and is cast back at the end.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::{Block, CollapsedConv, ConvBn, MbConv};
use crate::error::{Error, Result};
use crate::network::{BlockLayout, Network, NetworkLayout};
use crate::nn::loss::argmax_rows;
use crate::nn::{BatchNormState, ConvWeights};
use crate::tensor::{Element, Tensor};

/// Absorbs an inference-mode batch norm into the preceding convolution.
pub fn fold_bn<T: Element>(conv: &ConvWeights<T>, bn: &BatchNormState<T>) -> Result<ConvWeights<T>> {
    let geo = conv.geometry()?;
    if bn.channels() != geo.c_out {
        return Err(Error::dim("fold_bn channels", geo.c_out, bn.channels()));
    }
    let (scale, shift) = bn.affine();
    let cog = geo.c_out / geo.groups;
    let cig = geo.c_in / geo.groups;
    let kk = geo.kernel * geo.kernel;
    let w: Vec<T> = conv
        .weight
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ci = i / (cog * kk);
            let j = (i / kk) % cog;
            let co = (ci / cig) * cog + j;
            T::of(v.f64() * scale[co])
        })
        .collect();
    let b: Vec<T> = conv
        .bias
        .data()
        .iter()
        .enumerate()
        .map(|(co, &v)| T::of(v.f64() * scale[co] + shift[co]))
        .collect();
    ConvWeights::from_parts(
        Tensor::new(conv.weight.shape(), w)?,
        Tensor::new(conv.bias.shape(), b)?,
        conv.stride,
        conv.padding,
        conv.groups,
    )
}

fn fold_unit<T: Element>(unit: &ConvBn<T>) -> Result<ConvBn<T>> {
    match &unit.bn {
        Some(bn) => Ok(ConvBn {
            conv: fold_bn(&unit.conv, bn)?,
            bn: None,
        }),
        None => Ok(unit.clone()),
    }
}

/// Merges two stride-1, ungrouped convolutions into one with kernel
/// `K1 + K2 - 1`:
///
/// `W*[ci, co, a + b] = sum_cj W1[ci, cj, a] * W2[cj, co, b]` (per spatial
/// axis), `b*[co] = sum_{cj, b} b1[cj] * W2[cj, co, b] + b2[co]`.
///
/// The result equals the composition on the infinite zero-extended domain.
/// With "same" padding on both layers they agree only away from a border of
/// width `(K* - 1) / 2`.
pub fn merge_conv_pair<T: Element>(w1: &ConvWeights<T>, w2: &ConvWeights<T>) -> Result<ConvWeights<T>> {
    let g1 = w1.geometry()?;
    let g2 = w2.geometry()?;
    for (name, g) in [("first", g1), ("second", g2)] {
        if g.stride != 1 {
            return Err(Error::UnsupportedMerge(format!(
                "{name} conv has stride {}; merge needs stride 1",
                g.stride
            )));
        }
        if g.groups != 1 {
            return Err(Error::UnsupportedMerge(format!(
                "{name} conv is grouped ({} groups); expand it to a dense kernel first",
                g.groups
            )));
        }
    }
    if g1.c_out != g2.c_in {
        return Err(Error::dim("merge intermediate channels", g1.c_out, g2.c_in));
    }
    let (c1, c2, c3) = (g1.c_in, g1.c_out, g2.c_out);
    let (k1, k2) = (g1.kernel, g2.kernel);
    let ks = k1 + k2 - 1;
    let a = w1.weight.data();
    let b = w2.weight.data();
    let mut w = vec![0.0f64; c1 * c3 * ks * ks];
    for ci in 0..c1 {
        for cj in 0..c2 {
            for ah in 0..k1 {
                for aw in 0..k1 {
                    let av = a[((ci * c2 + cj) * k1 + ah) * k1 + aw].f64();
                    if av == 0.0 {
                        continue;
                    }
                    for co in 0..c3 {
                        for bh in 0..k2 {
                            for bw in 0..k2 {
                                let bv = b[((cj * c3 + co) * k2 + bh) * k2 + bw].f64();
                                w[((ci * c3 + co) * ks + ah + bh) * ks + aw + bw] += av * bv;
                            }
                        }
                    }
                }
            }
        }
    }
    let mut bias: Vec<f64> = w2.bias.data().iter().map(|v| v.f64()).collect();
    for cj in 0..c2 {
        let b1 = w1.bias.data()[cj].f64();
        for (co, acc) in bias.iter_mut().enumerate() {
            let tap_sum: f64 = b[(cj * c3 + co) * k2 * k2..(cj * c3 + co + 1) * k2 * k2]
                .iter()
                .map(|v| v.f64())
                .sum();
            *acc += b1 * tap_sum;
        }
    }
    ConvWeights::from_parts(
        Tensor::new(&[c1, c3, ks, ks], w.into_iter().map(T::of).collect())?,
        Tensor::new(&[c3], bias.into_iter().map(T::of).collect())?,
        1,
        (ks - 1) / 2,
        1,
    )
}

/// Dense `[C, C, K, K]` equivalent of a depthwise kernel (zeros off-channel).
pub fn depthwise_to_dense<T: Element>(dw: &ConvWeights<T>) -> Result<ConvWeights<T>> {
    let geo = dw.geometry()?;
    if !geo.is_depthwise() && geo.groups != 1 {
        return Err(Error::InvalidArgument("expected a depthwise or dense conv".into()));
    }
    if geo.groups == 1 {
        return Ok(dw.clone());
    }
    let (c, k) = (geo.c_in, geo.kernel);
    let mut w = vec![T::zero(); c * c * k * k];
    for ch in 0..c {
        w[(ch * c + ch) * k * k..(ch * c + ch + 1) * k * k]
            .copy_from_slice(&dw.weight.data()[ch * k * k..(ch + 1) * k * k]);
    }
    ConvWeights::from_parts(
        Tensor::new(&[c, c, k, k], w)?,
        dw.bias.clone(),
        dw.stride,
        dw.padding,
        1,
    )
}

fn check_collapsible<T: Element>(op: &MbConv<T>) -> Result<()> {
    if !op.spec.linear {
        return Err(Error::InvalidArgument(format!(
            "operator {} is non-linear and cannot be collapsed",
            op.spec.name()
        )));
    }
    let stride = op.stride();
    if op.residual != (stride == 1 && op.c_in() == op.c_out()) {
        return Err(Error::InvalidArgument(
            "residual flag inconsistent with stride and channels".into(),
        ));
    }
    Ok(())
}

fn add_dirac<T: Element>(w: &mut ConvWeights<T>) {
    let (c_in, c_out, k, _) = w.weight.dims4().expect("4-D weight");
    let center = (k - 1) / 2;
    for c in 0..c_in.min(c_out) {
        let i = ((c * c_out + c) * k + center) * k + center;
        w.weight.data_mut()[i] += T::one();
    }
}

/// Collapses a linear MBConv into one convolution with the depthwise kernel
/// size and stride: `W*[ci, co, :, :] = sum_cj E[ci, cj] * D[cj, :, :] * P[cj, co]`
/// over BN-folded weights, plus a centred identity kernel for the residual.
pub fn collapse_mbconv<T: Element>(op: &MbConv<T>) -> Result<CollapsedConv<T>> {
    check_collapsible(op)?;
    let m = op.cast::<f64>();
    let e = fold_unit(&m.expand)?.conv;
    let d = fold_unit(&m.depthwise)?.conv;
    let p = fold_unit(&m.project)?.conv;
    let (c_in, mid) = (e.c_in(), e.c_out());
    let c_out = p.c_out();
    let k = d.kernel();
    let kk = k * k;
    let (ew, dw, pw) = (e.weight.data(), d.weight.data(), p.weight.data());
    let mut w = vec![0.0f64; c_in * c_out * kk];
    for ci in 0..c_in {
        for cj in 0..mid {
            let ev = ew[ci * mid + cj];
            let dk = &dw[cj * kk..(cj + 1) * kk];
            for co in 0..c_out {
                let f = ev * pw[cj * c_out + co];
                let dst = &mut w[(ci * c_out + co) * kk..(ci * c_out + co + 1) * kk];
                for (o, &dv) in dst.iter_mut().zip(dk) {
                    *o += f * dv;
                }
            }
        }
    }
    let mut bias: Vec<f64> = p.bias.data().to_vec();
    for cj in 0..mid {
        let through = d.bias.data()[cj] + e.bias.data()[cj] * dw[cj * kk..(cj + 1) * kk].iter().sum::<f64>();
        for (co, b) in bias.iter_mut().enumerate() {
            *b += through * pw[cj * c_out + co];
        }
    }
    let mut conv = ConvWeights::from_parts(
        Tensor::new(&[c_in, c_out, k, k], w)?,
        Tensor::new(&[c_out], bias)?,
        op.stride(),
        (k - 1) / 2,
        1,
    )?;
    if op.residual {
        add_dirac(&mut conv);
    }
    Ok(CollapsedConv {
        conv: conv.cast(),
        relu6: true,
    })
}

/// Same collapse built from generic pieces: the depthwise kernel expanded to
/// a dense conv, then two pairwise merges. Used to cross-check
/// [`collapse_mbconv`].
pub fn collapse_mbconv_via_merges<T: Element>(op: &MbConv<T>) -> Result<CollapsedConv<T>> {
    check_collapsible(op)?;
    let m = op.cast::<f64>();
    let e = fold_unit(&m.expand)?.conv;
    let mut d = depthwise_to_dense(&fold_unit(&m.depthwise)?.conv)?;
    let p = fold_unit(&m.project)?.conv;
    // Only the 1x1 stages flank the strided conv, so the merged kernel does
    // not depend on the stride; merge at stride 1 and restore it.
    d.stride = 1;
    let mut conv = merge_conv_pair(&merge_conv_pair(&e, &d)?, &p)?;
    conv.stride = op.stride();
    if op.residual {
        add_dirac(&mut conv);
    }
    Ok(CollapsedConv {
        conv: conv.cast(),
        relu6: true,
    })
}

/// Structure [`transform_network`] produces, without touching weights.
pub fn transform_layout(layout: &NetworkLayout) -> NetworkLayout {
    let blocks = layout
        .blocks
        .iter()
        .map(|b| match *b {
            BlockLayout::Mbconv {
                spec,
                c_in,
                c_out,
                stride,
                ..
            } if spec.linear => BlockLayout::Collapsed {
                c_in,
                c_out,
                kernel: spec.kernel,
                stride,
                relu6: true,
            },
            BlockLayout::Mbconv {
                spec,
                c_in,
                c_out,
                stride,
                ..
            } => BlockLayout::Mbconv {
                spec,
                c_in,
                c_out,
                stride,
                folded: true,
            },
            ref c @ BlockLayout::Collapsed { .. } => c.clone(),
        })
        .collect();
    NetworkLayout {
        stem_folded: true,
        blocks,
        ..layout.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformReport {
    pub depth_before: usize,
    pub depth_after: usize,
    pub collapsed: usize,
    pub folded: usize,
}

/// Collapses every linear MBConv and folds the batch norms of the rest.
/// Already-transformed parts pass through untouched, so the transform is
/// idempotent.
pub fn transform_network<T: Element>(net: &Network<T>) -> Result<(Network<T>, TransformReport)> {
    let mut collapsed = 0;
    let mut folded = 0;
    let blocks = net
        .blocks
        .iter()
        .map(|b| match b {
            Block::MbConv(m) if m.spec.linear => {
                collapsed += 1;
                collapse_mbconv(m).map(Block::Collapsed)
            }
            Block::MbConv(m) => {
                if !m.is_folded() {
                    folded += 1;
                }
                Ok(Block::MbConv(MbConv {
                    spec: m.spec,
                    expand: fold_unit(&m.expand)?,
                    depthwise: fold_unit(&m.depthwise)?,
                    project: fold_unit(&m.project)?,
                    residual: m.residual,
                }))
            }
            Block::Collapsed(c) => Ok(Block::Collapsed(c.clone())),
        })
        .collect::<Result<Vec<_>>>()?;
    let out = Network {
        stem: fold_unit(&net.stem)?,
        blocks,
        head: net.head.clone(),
    };
    let report = TransformReport {
        depth_before: net.searchable_depth(),
        depth_after: out.searchable_depth(),
        collapsed,
        folded,
    };
    Ok((out, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub samples: usize,
    pub max_abs: f64,
    pub mean_abs: f64,
    pub argmax_agreement: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Compares inference logits of two networks on seeded Gaussian probes of
/// shape `input = [C, H, W]`.
pub fn verify_equivalence<T: Element>(
    deep: &mut Network<T>,
    shallow: &mut Network<T>,
    input: [usize; 3],
    n_samples: usize,
    tol: f64,
    seed: u64,
) -> Result<EquivalenceReport> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one probe".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut max_abs, mut sum_abs, mut count, mut agree) = (0.0f64, 0.0f64, 0usize, 0usize);
    let mut done = 0;
    while done < n_samples {
        let b = (n_samples - done).min(64);
        let x = Tensor::<T>::randn(&[b, input[0], input[1], input[2]], 1.0, &mut rng);
        let ya = deep.logits(&x)?;
        let yb = shallow.logits(&x)?;
        for (a, c) in ya.data().iter().zip(yb.data()) {
            let d = (a.f64() - c.f64()).abs();
            max_abs = max_abs.max(d);
            sum_abs += d;
            count += 1;
        }
        agree += argmax_rows(&ya)?
            .iter()
            .zip(argmax_rows(&yb)?)
            .filter(|(a, b)| **a == *b)
            .count();
        done += b;
    }
    Ok(EquivalenceReport {
        samples: n_samples,
        max_abs,
        mean_abs: sum_abs / count as f64,
        argmax_agreement: agree as f64 / n_samples as f64,
        tol,
        passed: max_abs <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::{OperatorSpec, Pass};
    use crate::nn::conv::conv2d_padded;
    use crate::nn::BnMode;
    use crate::space::{build_network, operator_space, OneHotArch, SupernetConfig};
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_op(spec: OperatorSpec, c_in: usize, c_out: usize, stride: usize, seed: u64) -> MbConv<f64> {
        let mut r = rng(seed);
        let mut op = MbConv::<f64>::new(spec, c_in, c_out, stride, &mut r).unwrap();
        for bn in op.batch_norms_mut() {
            bn.randomize(&mut r);
        }
        for p in op.params_mut() {
            if p.shape().len() == 1 {
                *p = Tensor::from_fn(p.shape(), |_| r.gen_range(-0.3..0.3));
            }
        }
        op
    }

    #[test]
    fn fold_bn_matches_conv_then_bn() {
        let mut r = rng(1);
        let conv = ConvWeights::<f64>::he_init(3, 5, 3, 1, 1, &mut r).unwrap();
        let mut bn = BatchNormState::<f64>::new(5);
        bn.randomize(&mut r);
        let x = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut r);
        let (y, _) = bn.forward(&conv2d_padded(&x, &conv, 1).unwrap(), BnMode::Infer).unwrap();
        let folded = fold_bn(&conv, &bn).unwrap();
        let z = conv2d_padded(&x, &folded, 1).unwrap();
        assert!(y.max_abs_diff(&z) < 1e-12);
    }

    #[test]
    fn fold_bn_depthwise() {
        let mut r = rng(2);
        let conv = ConvWeights::<f64>::he_init(4, 4, 5, 2, 4, &mut r).unwrap();
        let mut bn = BatchNormState::<f64>::new(4);
        bn.randomize(&mut r);
        let x = Tensor::randn(&[1, 4, 7, 7], 1.0, &mut r);
        let (y, _) = bn.forward(&conv2d_padded(&x, &conv, 2).unwrap(), BnMode::Infer).unwrap();
        let z = conv2d_padded(&x, &fold_bn(&conv, &bn).unwrap(), 2).unwrap();
        assert!(y.max_abs_diff(&z) < 1e-12);
    }

    #[test]
    fn merged_pair_equals_composition_without_padding() {
        let mut r = rng(3);
        for (k1, k2) in [(3, 3), (1, 5), (5, 3), (3, 1)] {
            let mut a = ConvWeights::<f64>::he_init(2, 3, k1, 1, 1, &mut r).unwrap();
            let mut b = ConvWeights::<f64>::he_init(3, 4, k2, 1, 1, &mut r).unwrap();
            a.bias = Tensor::randn(&[3], 0.5, &mut r);
            b.bias = Tensor::randn(&[4], 0.5, &mut r);
            let x = Tensor::randn(&[2, 2, 9, 9], 1.0, &mut r);
            let y = conv2d_padded(&conv2d_padded(&x, &a, 0).unwrap(), &b, 0).unwrap();
            let m = merge_conv_pair(&a, &b).unwrap();
            assert_eq!(m.kernel(), k1 + k2 - 1);
            let z = conv2d_padded(&x, &m, 0).unwrap();
            assert!(y.max_abs_diff(&z) < 1e-12, "k1={k1} k2={k2}");
        }
    }

    #[test]
    fn merge_rejects_stride_and_groups() {
        let mut r = rng(4);
        let a = ConvWeights::<f32>::he_init(2, 2, 3, 2, 1, &mut r).unwrap();
        let b = ConvWeights::<f32>::he_init(2, 2, 3, 1, 1, &mut r).unwrap();
        assert!(matches!(merge_conv_pair(&a, &b), Err(Error::UnsupportedMerge(_))));
        assert!(matches!(merge_conv_pair(&b, &a), Err(Error::UnsupportedMerge(_))));
        let g = ConvWeights::<f32>::he_init(2, 2, 3, 1, 2, &mut r).unwrap();
        assert!(matches!(merge_conv_pair(&g, &b), Err(Error::UnsupportedMerge(_))));
    }

    #[test]
    fn collapsed_mbconv_matches_block_everywhere() {
        let shapes = [(4, 4, 1), (4, 6, 1), (4, 6, 2), (6, 6, 2)];
        for (i, spec) in operator_space().into_iter().filter(|s| s.linear).enumerate() {
            for (j, &(ci, co, s)) in shapes.iter().enumerate() {
                let mut op = random_op(spec, ci, co, s, (10 * i + j) as u64);
                let x = Tensor::randn(&[2, ci, 9, 9], 1.0, &mut rng(99));
                let (y, _) = op.forward(&x, Pass::INFER).unwrap();
                let c = collapse_mbconv(&op).unwrap();
                assert_eq!(c.conv.kernel(), spec.kernel);
                let (z, _) = c.forward(&x).unwrap();
                assert_eq!(y.shape(), z.shape());
                let err = y.max_abs_diff(&z);
                assert!(err < 1e-10, "{} {ci}->{co} s{s}: {err}", spec.name());
            }
        }
    }

    #[test]
    fn closed_form_and_merge_chain_agree() {
        for (i, spec) in operator_space().into_iter().filter(|s| s.linear).enumerate() {
            let op = random_op(spec, 3, 5, 1 + i % 2, 50 + i as u64);
            let a = collapse_mbconv(&op).unwrap();
            let b = collapse_mbconv_via_merges(&op).unwrap();
            assert!(a.conv.weight.max_abs_diff(&b.conv.weight) < 1e-12);
            assert!(a.conv.bias.max_abs_diff(&b.conv.bias) < 1e-12);
            assert_eq!(a.conv.stride, b.conv.stride);
        }
    }

    #[test]
    fn nonlinear_operator_refused() {
        let spec = operator_space()[0];
        assert!(!spec.linear);
        let op = random_op(spec, 4, 4, 1, 7);
        assert!(collapse_mbconv(&op).is_err());
    }

    #[test]
    fn network_transform_is_equivalent_and_idempotent() {
        let config = SupernetConfig {
            input: [3, 16, 16],
            ..SupernetConfig::default()
        };
        let ops = operator_space();
        let idx: Vec<usize> = (0..config.num_layers()).map(|l| (l * 5 + 7) % ops.len()).collect();
        let arch = OneHotArch::new(idx, ops.len()).unwrap();
        let mut r = rng(5);
        let mut net = build_network::<f64, _>(&config, &arch, &mut r).unwrap();
        for bn in net.batch_norms_mut() {
            bn.randomize(&mut r);
        }
        let (mut shallow, report) = transform_network(&net).unwrap();
        let linear = arch.indices.iter().filter(|&&i| ops[i].linear).count();
        assert_eq!(report.collapsed, linear);
        assert_eq!(report.depth_before - report.depth_after, 2 * linear);
        let eq = verify_equivalence(&mut net, &mut shallow, config.input, 8, 1e-9, 0).unwrap();
        assert!(eq.passed, "{eq:?}");
        assert_eq!(eq.argmax_agreement, 1.0);
        assert_eq!(transform_layout(&net.layout()), shallow.layout());
        assert_eq!(
            shallow.layout().layer_costs(16).unwrap(),
            shallow.layer_costs(16).unwrap()
        );
        assert_eq!(net.layout().layer_costs(16).unwrap(), net.layer_costs(16).unwrap());
        let (again, report2) = transform_network(&shallow).unwrap();
        assert_eq!(again, shallow);
        assert_eq!(report2.collapsed, 0);
        assert_eq!(report2.depth_before, report2.depth_after);
    }
}
