//! Both synthesis stages for one character, across the variant schedule.

use std::path::PathBuf;

use glyphdict::demo;
use glyphdict::synthesis::{self, ProceduralGenerator, SrSchedule};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let label = std::env::args().nth(1).and_then(|s| s.chars().next()).unwrap_or('林');
    let out = PathBuf::from("target/example-synthesize");
    std::fs::create_dir_all(&out)?;
    let fonts = demo::procedural_fonts();
    let spec = synthesis::char_specs(&[label], &demo::ids_table(), &fonts)?.remove(0);
    println!("{label}: {} ({} font renders)", spec.ids, spec.font_renders.len());

    let generator = ProceduralGenerator::default();
    let schedule = SrSchedule::default();
    let k = 8;
    let variants = synthesis::generate_variants(&spec, k, 42, &generator, &schedule)?;
    for v in &variants {
        let t = &v.stage_trace;
        let shares: Vec<String> = t
            .regions
            .iter()
            .map(|r| format!("{:.2}→{:.2}", r.draft_share, r.refined_share))
            .collect();
        println!(
            "  #{} font {} rot {:+.1}° width {} | attrition {:.2} warp {:.1} | region shares {}",
            v.variant_index,
            t.draft.font_index,
            t.draft.rotation_deg,
            t.draft.stroke_width,
            t.sr.attrition_prob,
            t.sr.warp_amplitude,
            shares.join(" ")
        );
        v.glyph.save_png(&out.join(format!("{label}-{}.png", v.variant_index)))?;
    }
    println!("images in {}", out.display());
    Ok(())
}
