//! Runs the desk-scale experiment and prints acceptance criteria 8–13.
//!
//! Usage: `cargo run --release --example desk_scale -- OUT_DIR [key=value ...]`
//!
//! Starts from `configs/desk_scale.json`; extra arguments override its keys.

use std::path::{Path, PathBuf};

use mrssm::config::RunConfig;
use mrssm::experiment::{desk_scale_criteria, run_desk_scale};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().ok_or("usage: desk_scale OUT_DIR [key=value ...]")?);
    let sets: Vec<String> = args.collect();
    let base = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk_scale.json");
    let config = RunConfig::load(Some(&base), &sets)?;
    let start = std::time::Instant::now();
    let results = run_desk_scale(&config, &out, |m| eprintln!("[{:>6.0}s] {m}", start.elapsed().as_secs_f64()))?;
    for c in desk_scale_criteria(&results) {
        println!("{c}");
    }
    Ok(())
}
