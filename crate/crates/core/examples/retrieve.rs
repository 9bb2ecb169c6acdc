//! Exact top-k retrieval and label voting over a small dictionary.

use glyphdict::degradation::{self, DegradationKind, DegradationSpec};
use glyphdict::demo;
use glyphdict::font::FontSource;
use glyphdict::encoder::HandcraftedEncoder;
use glyphdict::retrieval::{self, QueryParams, VoteRule};
use glyphdict::synthesis::{self, DictionaryConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fonts = demo::procedural_fonts();
    let labels: Vec<char> = demo::charset().into_iter().take(40).collect();
    let specs = synthesis::char_specs(&labels, &demo::ids_table(), &fonts)?;
    let (dict, _) = synthesis::build_dictionary(&specs, &DictionaryConfig::new(4, 42, &fonts))?;
    let enc = HandcraftedEncoder::default();
    let ix = retrieval::build_index(&dict, &enc)?;
    println!("{} entries, {} labels", ix.len(), ix.label_count());

    // A plain render of one character, partly masked.
    let target = labels[7];
    let query = fonts.renders(target)?.remove(0);
    let masked = degradation::degrade(&query, &DegradationSpec::new(DegradationKind::Mask, 1, 3)?);
    for rule in [VoteRule::Sum, VoteRule::Count] {
        let r = retrieval::decipher_glyph(&ix, &enc, &masked, QueryParams { k: 20, rule }, 0)?;
        let top: Vec<String> = r
            .label_ranking
            .iter()
            .take(5)
            .map(|l| format!("{} {:.2}", l.label, l.score))
            .collect();
        println!("truth {target}, {rule} vote: {}", top.join(" | "));
    }
    let r = retrieval::decipher_glyph(&ix, &enc, &masked, QueryParams::default(), 0)?;
    for m in r.matches.iter().take(5) {
        println!("  rank {} {} {:016x} cos {:.4}", m.rank, m.label, m.entry_id, m.similarity);
    }
    Ok(())
}
