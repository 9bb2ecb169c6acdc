//! Build, save and reload a dictionary for part of the demo charset.
//!
//!     cargo run --release --example build_dictionary -- 60 4

use std::path::PathBuf;
use std::time::Instant;

use glyphdict::demo;
use glyphdict::synthesis::{self, Dictionary, DictionaryConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(Ok(60), |a| a.parse())?;
    let k: usize = args.next().map_or(Ok(4), |a| a.parse())?;
    let fonts = demo::procedural_fonts();
    let labels: Vec<char> = demo::charset().into_iter().take(n).collect();
    let specs = synthesis::char_specs(&labels, &demo::ids_table(), &fonts)?;
    let cfg = DictionaryConfig::new(k, 42, &fonts);

    let t = Instant::now();
    let (dict, report) = synthesis::build_dictionary(&specs, &cfg)?;
    println!(
        "{} entries for {} labels in {:.1}s, {} clean-anchor fallbacks, fingerprint {:016x}",
        dict.len(),
        dict.charset.len(),
        t.elapsed().as_secs_f64(),
        report.fallbacks.len(),
        dict.config_fingerprint
    );
    let dir = PathBuf::from("target/example-dictionary");
    dict.save(&dir)?;
    let back = Dictionary::load(&dir)?;
    println!("saved to {} and reloaded {} entries", dir.display(), back.len());
    for e in dict.variants_of(labels[0]) {
        println!("  {} #{} id {:016x} seed {:016x}", e.label, e.variant_index, e.entry_id, e.seed);
    }
    Ok(())
}
