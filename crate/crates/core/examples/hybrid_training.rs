//! Trains one architecture twice from the same initialisation, once with
//! plain linear operators and once with grafted activations that fade out
//! over the first epochs, then collapses both and reports accuracy.
//!
//! cargo run --release --example hybrid_training -- [epochs] [graft_epochs] [seed]

use dwnas::block::Pass;
use dwnas::data::synth_dataset;
use dwnas::network::Network;
use dwnas::space::{build_network, operator_space, OneHotArch, SupernetConfig};
use dwnas::training::{evaluate, train_hybrid_transformable, train_standard, TrainSchedule};
use dwnas::transform::transform_network;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dwnas::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(8, |a| a.parse().expect("epochs"));
    let graft_epochs: usize = args.next().map_or(3, |a| a.parse().expect("graft epochs"));
    let seed: u64 = args.next().map_or(0, |a| a.parse().expect("seed"));

    let config = SupernetConfig {
        input: [3, 24, 24],
        ..SupernetConfig::default()
    };
    let (train, val) = synth_dataset(seed, 10, 800, 3, 24, 24)?.split(0.8)?;
    let arch = OneHotArch::new(vec![7, 10, 6, 11, 9, 8], operator_space().len())?;
    let schedule = TrainSchedule {
        epochs,
        graft_epochs,
        batch_size: 32,
        ..TrainSchedule::default()
    };

    for hybrid in [false, true] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net: Network<f32> = build_network(&config, &arch, &mut rng)?;
        let history = if hybrid {
            train_hybrid_transformable(&mut net, &train, &val, &schedule, &mut rng)?
        } else {
            train_standard(&mut net, &train, &val, &schedule, &mut rng)?
        };
        println!("{}", if hybrid { "hybrid" } else { "standard" });
        for m in &history {
            println!("  epoch {:>2}  eps {:.2}  loss {:.4}  val acc {:.3}", m.epoch, m.eps, m.train_loss, m.val_acc);
        }
        let (mut shallow, report) = transform_network(&net)?;
        println!(
            "  collapsed depth {} -> {}, shallow val acc {:.3}",
            report.depth_before,
            report.depth_after,
            evaluate(&mut shallow, &val, Pass::INFER, 256)?
        );
    }
    Ok(())
}
