//! Parse a few description sequences and lay them out on the canvas.
//!
//!     cargo run --example ids_parse -- '⿰木⿱白木'

use glyphdict::geom::Rect;
use glyphdict::glyph::CANVAS;
use glyphdict::ids::{self, LayoutParams};

fn main() {
    let mut inputs: Vec<String> = std::env::args().skip(1).collect();
    if inputs.is_empty() {
        inputs = ["⿰木木", "⿱⿰木木木", "⿴囗玉", "⿲彳山亍", "⿰木", "⿰木木木"].map(String::from).to_vec();
    }
    for text in &inputs {
        match ids::parse(text) {
            Ok(tree) => {
                println!("{text}: {} leaves, depth {}, round trip {}", tree.leaf_count(), tree.depth(), ids::serialize(&tree));
                let canvas = Rect::square(CANVAS);
                for r in ids::layout(&tree, canvas, &LayoutParams::without_jitter()).unwrap() {
                    let leaf = tree.leaves()[r.leaf_index];
                    println!("  {leaf} → x {}..{}, y {}..{}", r.rect.x0, r.rect.x1, r.rect.y0, r.rect.y1);
                }
            }
            Err(e) => println!("{text}: {e}"),
        }
    }
}
