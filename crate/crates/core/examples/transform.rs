//! Collapses a linear inverted-residual block into one KxK convolution, then
//! transforms a whole network and checks that its logits are unchanged.
//!
//! cargo run --release --example transform -- [seed]

use dwnas::block::{MbConv, Pass};
use dwnas::network::Network;
use dwnas::space::{build_network, operator_space, OneHotArch, SupernetConfig};
use dwnas::transform::{collapse_mbconv, collapse_mbconv_via_merges, transform_network, verify_equivalence};
use dwnas::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dwnas::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(0, |a| a.parse().expect("seed"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    println!("operator           kernel  params deep -> shallow  max |diff| (f64)");
    for spec in operator_space().into_iter().filter(|s| s.linear) {
        let mut op = MbConv::<f64>::new(spec, 8, 8, 1, &mut rng)?;
        for bn in op.batch_norms_mut() {
            bn.randomize(&mut rng);
        }
        let collapsed = collapse_mbconv(&op)?;
        let via_merges = collapse_mbconv_via_merges(&op)?;
        let x = Tensor::<f64>::randn(&[4, 8, 12, 12], 1.0, &mut rng);
        let (y, _) = op.forward(&x, Pass::INFER)?;
        let (z, _) = collapsed.forward(&x)?;
        let deep: usize = op.clone().params_mut().iter().map(|t| t.numel()).sum();
        let shallow = collapsed.conv.weight.numel() + collapsed.conv.bias.numel();
        println!(
            "{:<18} {:>6}  {deep:>6} -> {shallow:<8}  {:.2e}  (merge chain agrees to {:.1e})",
            spec.name(),
            collapsed.conv.kernel(),
            y.max_abs_diff(&z),
            collapsed.conv.weight.max_abs_diff(&via_merges.conv.weight)
        );
    }

    let config = SupernetConfig::default();
    let arch = OneHotArch::new(vec![6, 2, 9, 11, 0, 7], operator_space().len())?;
    let mut deep: Network<f32> = build_network(&config, &arch, &mut rng)?;
    for bn in deep.batch_norms_mut() {
        bn.randomize(&mut rng);
    }
    let (mut shallow, report) = transform_network(&deep)?;
    println!(
        "\nnetwork {:?}: depth {} -> {}, {} operators collapsed",
        arch.indices, report.depth_before, report.depth_after, report.collapsed
    );
    let eq = verify_equivalence(&mut deep, &mut shallow, config.input, 1000, 1e-3, seed)?;
    println!(
        "logits over {} probes: max |diff| {:.2e}, mean {:.2e}, argmax agreement {:.4}",
        eq.samples, eq.max_abs, eq.mean_abs, eq.argmax_agreement
    );
    Ok(())
}
