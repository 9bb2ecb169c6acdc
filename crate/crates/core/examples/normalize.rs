//! Normalize a raw render, then thin and restroke it. Writes PNGs into the
//! directory given as the first argument (default `target/example-normalize`).

use std::path::PathBuf;

use glyphdict::demo;
use glyphdict::glyph;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/example-normalize".into()));
    std::fs::create_dir_all(&out)?;
    let fonts = demo::procedural_fonts();
    for (i, c) in "明林森".chars().enumerate() {
        let raw = fonts.raw_image(i % fonts.fonts().len(), c);
        let g = glyph::normalize(&raw)?;
        let bbox = g.ink_bbox().unwrap();
        let skeleton = glyph::skeletonize(&g);
        let restroked = glyph::restroke(&skeleton, 3);
        println!(
            "{c}: ink {} px, bbox {}×{}, {} component(s), skeleton {} px, restroked {} px",
            g.ink_count(),
            bbox.width(),
            bbox.height(),
            glyph::component_count(&g),
            skeleton.ink_count(),
            restroked.ink_count()
        );
        raw.save(out.join(format!("{c}-raw.png")))?;
        g.save_png(&out.join(format!("{c}-norm.png")))?;
        skeleton.save_png(&out.join(format!("{c}-skeleton.png")))?;
    }
    println!("images in {}", out.display());
    Ok(())
}
