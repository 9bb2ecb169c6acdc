//! The bundled demo data: an IDS table and a 200-character charset.

use crate::font::{ProceduralFont, ProceduralFonts};
use crate::ids::IdsTable;

pub const IDS_TABLE: &str = include_str!("../data/ids.tsv");
pub const CHARSET: &str = include_str!("../data/demo_charset.txt");

pub fn ids_table() -> IdsTable {
    IdsTable::parse_str(IDS_TABLE)
}

/// Demo labels in file order.
pub fn charset() -> Vec<char> {
    CHARSET
        .lines()
        .filter(|l| !l.starts_with('#'))
        .filter_map(|l| l.trim().chars().next())
        .collect()
}

pub fn procedural_fonts() -> ProceduralFonts {
    ProceduralFonts::new(ProceduralFont::demo_set(), ids_table())
}
