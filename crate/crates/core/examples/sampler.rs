//! Gumbel top-k ranking without replacement and the sandwich rule.
//!
//! Compares empirical ranking frequencies for three operators with the
//! Plackett-Luce probabilities, then shows one sandwich draw per layer.
//!
//! cargo run --release --example sampler -- [draws] [seed]

use std::collections::BTreeMap;

use dwnas::sampler::{gumbel_topk_order, sandwich_select};
use dwnas::space::ArchParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dwnas::Result<()> {
    let mut args = std::env::args().skip(1);
    let draws: usize = args.next().map_or(100_000, |a| a.parse().expect("draw count"));
    let seed: u64 = args.next().map_or(0, |a| a.parse().expect("seed"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let alpha = ArchParams {
        alpha: vec![vec![1.0, 0.0, -0.5]],
    };
    let w: Vec<f64> = alpha.alpha[0].iter().map(|a| a.exp()).collect();
    let total: f64 = w.iter().sum();
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for _ in 0..draws {
        let r = gumbel_topk_order(&alpha, 1.0, &mut rng)?;
        *counts.entry(r.order[0].clone()).or_default() += 1;
    }
    println!("ranking    observed  plackett-luce");
    for (perm, c) in &counts {
        let p = w[perm[0]] / total * w[perm[1]] / (w[perm[1]] + w[perm[2]]);
        println!("{perm:?}  {:>8.4}  {p:>13.4}", *c as f64 / draws as f64);
    }

    let alpha = ArchParams {
        alpha: (0..4).map(|l| (0..12).map(|n| 0.1 * ((n * (l + 3)) % 7) as f64).collect()).collect(),
    };
    let ranking = gumbel_topk_order(&alpha, 1.0, &mut rng)?;
    let triple = sandwich_select(&ranking, &mut rng)?;
    println!("\nsandwich paths (operator per layer)");
    for (name, path) in ["most", "random", "least"].iter().zip(triple.paths()) {
        println!("{name:<7} {:?}", path.indices);
    }
    Ok(())
}
