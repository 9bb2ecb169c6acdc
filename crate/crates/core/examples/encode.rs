//! Handcrafted embeddings: variants of one character sit closer together
//! than variants of different characters.

use glyphdict::demo;
use glyphdict::encoder::{Encoder, HandcraftedEncoder};
use glyphdict::synthesis::{self, ProceduralGenerator, SrSchedule};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fonts = demo::procedural_fonts();
    let labels: Vec<char> = "木林日明".chars().collect();
    let specs = synthesis::char_specs(&labels, &demo::ids_table(), &fonts)?;
    let enc = HandcraftedEncoder::default();
    println!("encoder {} ({} dims)", enc.id(), enc.dim());

    let mut rows = Vec::new();
    for spec in &specs {
        for v in synthesis::generate_variants(spec, 3, 42, &ProceduralGenerator::default(), &SrSchedule::default())? {
            rows.push((format!("{}#{}", v.label, v.variant_index), enc.embed(&v.glyph)?));
        }
    }
    print!("{:>5}", "");
    for (name, _) in &rows {
        print!("{name:>6}");
    }
    println!();
    for (name, a) in &rows {
        print!("{name:>5}");
        for (_, b) in &rows {
            print!("{:>6.2}", a.cosine(b));
        }
        println!();
    }
    Ok(())
}
