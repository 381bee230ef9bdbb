//! Runs every pipeline stage in order on one configuration, exactly as the
//! `dwnas` binary would, and lists the artifacts it leaves behind.
//!
//! cargo run --release --example pipeline -- [config.json] [out_dir]

use std::path::PathBuf;

use dwnas::config::ExperimentConfig;
use dwnas::pipeline::{Command, Run};

fn main() -> dwnas::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/tiny.json").into());
    let cfg = ExperimentConfig::load(path.as_ref())?;
    let run = Run::new(cfg, args.next().map(PathBuf::from));
    for cmd in Command::ALL {
        let start = std::time::Instant::now();
        run.execute(cmd)?;
        println!("{:<12} {:>7.1} s", cmd.name(), start.elapsed().as_secs_f64());
    }
    println!("\nartifacts in {}:", run.out.display());
    let mut entries: Vec<_> = std::fs::read_dir(&run.out)?.filter_map(|e| e.ok()).collect();
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        println!("  {:<28} {:>9} bytes", e.file_name().to_string_lossy(), e.metadata()?.len());
    }
    Ok(())
}
