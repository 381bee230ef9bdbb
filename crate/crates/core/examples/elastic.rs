//! Multi-resolution fine-tuning with in-place distillation, then per-resolution
//! batch-norm calibration. Prints accuracy at every grid resolution with the
//! training-time running statistics and with calibrated ones.
//!
//! cargo run --release --example elastic -- [epochs] [seed]

use dwnas::data::synth_dataset;
use dwnas::elastic::{calibrate_bn, evaluate_at_resolution, train_elastic, ElasticOptions, ResolutionGrid};
use dwnas::network::Network;
use dwnas::space::{build_network, operator_space, OneHotArch, SupernetConfig};
use dwnas::training::TrainSchedule;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dwnas::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(6, |a| a.parse().expect("epochs"));
    let seed: u64 = args.next().map_or(0, |a| a.parse().expect("seed"));

    let config = SupernetConfig {
        input: [3, 24, 24],
        ..SupernetConfig::default()
    };
    let grid = ResolutionGrid {
        r_min: 8,
        r_max: 24,
        step: 8,
    };
    grid.validate(config.total_stride())?;
    let (train, val) = synth_dataset(seed, 10, 800, 3, 24, 24)?.split(0.8)?;
    let arch = OneHotArch::new(vec![7, 10, 1, 11, 9, 8], operator_space().len())?;
    let schedule = TrainSchedule {
        epochs,
        graft_epochs: 0,
        batch_size: 32,
        ..TrainSchedule::default()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net: Network<f32> = build_network(&config, &arch, &mut rng)?;
    for e in train_elastic(&mut net, &train, &grid, &schedule, ElasticOptions::default(), &mut rng)? {
        println!("epoch {:>2}  ce {:.4}  total {:.4}", e.epoch, e.ce, e.total);
    }
    let stats = calibrate_bn(&net, &train, &grid, 200)?;
    println!("\nresolution  running stats  calibrated");
    for r in grid.resolutions() {
        println!(
            "{r:>10}  {:>13.3}  {:>10.3}",
            evaluate_at_resolution(&net, None, &val, r)?,
            evaluate_at_resolution(&net, Some(&stats), &val, r)?
        );
    }
    Ok(())
}
