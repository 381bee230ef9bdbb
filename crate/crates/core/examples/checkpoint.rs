//! Generates the synthetic dataset, writes it and a network checkpoint to a
//! directory, reads both back and confirms the round trip is exact.
//!
//! cargo run --example checkpoint -- [dir] [seed]

use std::path::PathBuf;

use dwnas::checkpoint::{ArtifactMeta, Checkpoint};
use dwnas::config::ExperimentConfig;
use dwnas::data::{synth_dataset, Dataset};
use dwnas::network::Network;
use dwnas::space::{build_network, operator_space, OneHotArch};
use dwnas::transform::transform_network;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dwnas::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "out/checkpoint_example".into()));
    let seed: u64 = args.next().map_or(0, |a| a.parse().expect("seed"));
    std::fs::create_dir_all(&dir)?;

    let cfg = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    let d = &cfg.dataset;
    let data = synth_dataset(seed, d.classes, d.count, d.channels, d.height, d.width)?;
    let data_path = dir.join("dataset.dwds");
    data.save(&data_path)?;
    let back = Dataset::load(&data_path)?;
    println!(
        "dataset: {} images {:?}, {} bytes, round trip exact: {}",
        data.len(),
        data.image_shape(),
        std::fs::metadata(&data_path)?.len(),
        back.to_bytes() == data.to_bytes()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = OneHotArch::uniform(cfg.supernet.num_layers(), operator_space().len(), &mut rng);
    let net: Network<f32> = build_network(&cfg.supernet, &arch, &mut rng)?;
    let (shallow, _) = transform_network(&net)?;
    for (name, n) in [("network.ckpt", &net), ("network_transformed.ckpt", &shallow)] {
        let path = dir.join(name);
        Checkpoint::from_network(n, cfg.meta(), None).save(&path)?;
        let ck = Checkpoint::load(&path)?;
        let restored = ck.to_network()?;
        let ArtifactMeta { seed, config_hash, .. } = &ck.manifest.meta;
        println!(
            "{name}: {} tensors, transformed {}, seed {seed}, config {}, identical after reload: {}",
            ck.manifest.tensors.len(),
            ck.manifest.transformed,
            &config_hash[..12],
            &restored == n
        );
    }
    Ok(())
}
