//! Hardware-aware search on a desk configuration: fits the latency
//! predictor, runs the bi-level search and prints the multiplier trajectory.
//!
//! The multiplier normally ascends on the latency of the sampled most
//! important path. Passing `argmax` uses the noise-free argmax architecture
//! instead.
//!
//! cargo run --release --example search -- [config.json] [seed] [sampled|argmax]

use dwnas::config::ExperimentConfig;
use dwnas::data::synth_dataset;
use dwnas::latency::{fit_predictor, generate_pairs};
use dwnas::search::{run_search, LambdaSignal};
use dwnas::space::operator_space;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dwnas::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/desk.json").into());
    let mut cfg = ExperimentConfig::load(path.as_ref())?;
    if let Some(s) = args.next() {
        cfg.seed = s.parse().expect("seed");
    }
    if args.next().as_deref() == Some("argmax") {
        cfg.search.lambda_signal = LambdaSignal::Argmax;
    }

    let d = &cfg.dataset;
    let (train, _) = synth_dataset(cfg.seed, d.classes, d.count, d.channels, d.height, d.width)?.split(1.0 - d.val_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lat = &cfg.latency_oracle;
    let pairs = generate_pairs(&cfg.supernet, lat.pairs, &lat.oracle, &mut rng)?;
    let (predictor, fit) = fit_predictor(&pairs, operator_space().len(), &lat.fit, &mut rng)?;
    println!("predictor val rmse {:.4} ms, spearman {:.4}", fit.val_rmse, fit.val_spearman);

    let out = run_search(&cfg.search, &cfg.supernet, &train, &predictor, &lat.oracle, cfg.seed)?;
    let r = &out.result;
    let every = (out.trace.len() / 12).max(1);
    println!("\n iter   lambda    LAT ms  valid loss");
    for rec in out.trace.iter().step_by(every) {
        println!("{:>5} {:>+8.4} {:>9.3} {:>11.3}", rec.iter, rec.lambda, rec.lat_pred_ms, rec.valid_loss);
    }
    let ops = operator_space();
    println!("\nconstraint        {:.3} ms", r.constraint_ms);
    println!(
        "architecture      {}",
        r.arch.iter().map(|&i| ops[i].name()).collect::<Vec<_>>().join(" ")
    );
    println!("predicted         {:.3} ms", r.predicted_latency_ms);
    println!(
        "oracle (sigma 0)  {:.3} ms ({:+.1}% of T)",
        r.oracle_latency_ms,
        100.0 * (r.oracle_latency_ms - r.constraint_ms) / r.constraint_ms
    );
    println!("coverage          {:.0}% (first epoch, worst layer {:.0}%)", r.coverage_pct, r.first_epoch_min_layer_coverage_pct);
    println!("wall time         {:.1} s", out.wall_time_s);
    Ok(())
}
