//! Fits the MLP latency predictor on noise-free synthetic oracle pairs and
//! reports held-out accuracy.
//!
//! cargo run --example latency_predictor -- [pairs] [seed]

use dwnas::latency::{fit_predictor, generate_pairs, FitConfig, OracleParams};
use dwnas::space::{operator_space, SupernetConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dwnas::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(1000, |a| a.parse().expect("pair count"));
    let seed: u64 = args.next().map_or(0, |a| a.parse().expect("seed"));

    let config = SupernetConfig::default();
    let oracle = OracleParams::default().noiseless();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = std::time::Instant::now();
    let pairs = generate_pairs(&config, n, &oracle, &mut rng)?;
    let (model, report) = fit_predictor(&pairs, operator_space().len(), &FitConfig::default(), &mut rng)?;
    let range = report.latency_max - report.latency_min;
    println!("pairs            {n}");
    println!("latency range    {:.4} .. {:.4} ms", report.latency_min, report.latency_max);
    println!("train rmse       {:.5} ms", report.train_rmse);
    println!("val rmse         {:.5} ms ({:.2}% of range)", report.val_rmse, 100.0 * report.val_rmse / range);
    println!("val spearman     {:.4}", report.val_spearman);
    println!("elapsed          {:.1?}", start.elapsed());

    let probe = dwnas::space::OneHotArch::uniform(config.num_layers(), operator_space().len(), &mut rng);
    let (lat, grad) = model.predict_with_grad(&probe.matrix())?;
    println!("probe {:?} -> {lat:.4} ms, |grad| row 0 = {:?}", probe.indices, &grad[0][..3]);
    Ok(())
}
