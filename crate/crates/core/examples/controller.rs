//! The multiplier update in isolation: a one-dimensional problem whose
//! Lagrangian minimiser is known in closed form, so the multiplier is the
//! only moving part.
//!
//! cargo run --example controller -- [eta_lambda] [target_ms]

use dwnas::search::ControllerToy;

fn main() {
    let mut args = std::env::args().skip(1);
    let eta_lambda: f64 = args.next().map_or(0.1, |a| a.parse().expect("eta_lambda"));
    let t: f64 = args.next().map_or(2.5, |a| a.parse().expect("target"));
    let toy = ControllerToy {
        x0: 2.0,
        a: 1.0,
        b: 1.0,
        t,
        eta_lambda,
    };
    println!("unconstrained latency {:.3} ms, target {t:.3} ms", toy.latency(toy.x0));
    println!(" step   lambda   latency");
    for (i, (lambda, lat)) in toy.run(500).into_iter().enumerate() {
        if i % 50 == 0 || i == 499 {
            println!("{i:>5} {lambda:>+8.4} {lat:>9.4}");
        }
    }
}
