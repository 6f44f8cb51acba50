//! Regenerates the synthetic datasets under `fixtures/`.
//!
//! cargo run -p tsloop --example make_fixtures -- <fixtures dir>

use std::path::PathBuf;

use tsloop::synth;
use tsloop::task::{save_frame, DataFormat};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    std::fs::create_dir_all(root.join("ar2"))?;
    std::fs::create_dir_all(root.join("gauss"))?;
    save_frame(&synth::ar2(2000, 3, 42)?, &root.join("ar2/ar2.csv"), DataFormat::CsvWide)?;
    save_frame(&synth::gaussian(2000, 3, 7)?, &root.join("gauss/gauss.csv"), DataFormat::CsvWide)?;
    Ok(())
}
