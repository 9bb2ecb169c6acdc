//! The twelve degradation conditions applied to one glyph, with the pixel
//! distance from the original. Images go to `target/example-degrade`.

use std::path::PathBuf;

use glyphdict::degradation::{self, DegradationSpec};
use glyphdict::demo;
use glyphdict::font::FontSource;
use glyphdict::metrics;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from("target/example-degrade");
    std::fs::create_dir_all(&out)?;
    let g = demo::procedural_fonts().renders('森')?.remove(0);
    println!("{:<9} {:>6} {:>7} {:>7}", "condition", "ink", "L1", "SSIM");
    for spec in DegradationSpec::grid(42) {
        let d = degradation::degrade(&g, &spec);
        println!(
            "{:<9} {:>6} {:>7.4} {:>7.3}",
            spec.condition_name(),
            d.ink_count(),
            metrics::l1(&g, &d)?,
            metrics::ssim(&g, &d)?
        );
        d.save_png(&out.join(format!("{}.png", spec.condition_name())))?;
    }
    Ok(())
}
