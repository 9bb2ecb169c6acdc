//! Normalization and morphology checked over rendered demo glyphs.

use std::collections::VecDeque;

use glyphdict::demo;
use glyphdict::geom::Rect;
use glyphdict::glyph::{self, Glyph};

/// 100 raw renders spread over fonts and labels.
fn corpus() -> Vec<image::GrayImage> {
    let fonts = demo::procedural_fonts();
    let n_fonts = fonts.fonts().len();
    demo::charset()
        .iter()
        .step_by(2)
        .enumerate()
        .map(|(i, &c)| fonts.raw_image(i % n_fonts, c))
        .take(100)
        .collect()
}

/// 8-connected flood fill.
fn count_components(g: &Glyph) -> usize {
    let n = g.size();
    let mut seen = vec![false; n * n];
    let mut count = 0;
    for start in 0..n * n {
        if seen[start] || !g.is_ink(start % n, start / n) {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            let (x, y) = ((p % n) as i64, (p / n) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= n as i64 || ny >= n as i64 {
                        continue;
                    }
                    let q = ny as usize * n + nx as usize;
                    if !seen[q] && g.is_ink(nx as usize, ny as usize) {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    count
}

#[test]
fn normalize_is_idempotent_over_corpus() {
    let imgs = corpus();
    assert_eq!(imgs.len(), 100);
    for (i, img) in imgs.iter().enumerate() {
        let once = glyph::normalize(img).unwrap();
        let twice = glyph::normalize(&once.to_image()).unwrap();
        assert_eq!(once, twice, "glyph {i}");
    }
}

#[test]
fn skeleton_keeps_component_count() {
    for (i, img) in corpus().iter().enumerate() {
        let g = glyph::normalize(img).unwrap();
        let sk = glyph::skeletonize(&g);
        let before = count_components(&g);
        assert_eq!(before, count_components(&sk), "glyph {i}");
        assert_eq!(before, glyph::component_count(&g), "glyph {i}");
    }
}

#[test]
fn restroke_round_trip_keeps_area() {
    for (i, img) in corpus().iter().enumerate() {
        let sk = glyph::skeletonize(&glyph::normalize(img).unwrap());
        let stroked = glyph::restroke(&sk, 3);
        let again = glyph::restroke(&glyph::skeletonize(&stroked), 3);
        let (a, b) = (stroked.ink_count() as f64, again.ink_count() as f64);
        assert!((b - a).abs() <= 0.15 * a, "glyph {i}: {a} vs {b}");
    }
}

#[test]
fn left_half_ink_fraction_matches_pixel_count() {
    let table = demo::ids_table();
    let fonts = demo::procedural_fonts();
    let lr: Vec<char> = table
        .records()
        .filter(|r| r.ids.starts_with('⿰'))
        .map(|r| r.label)
        .filter(|c| demo::charset().contains(c))
        .take(20)
        .collect();
    assert!(!lr.is_empty());
    for c in lr {
        let g = glyph::normalize(&fonts.raw_image(0, c)).unwrap();
        let (mut left, mut total) = (0usize, 0usize);
        for y in 0..96 {
            for x in 0..96 {
                if g.get(x, y) >= 0.5 {
                    total += 1;
                    left += (x < 48) as usize;
                }
            }
        }
        let got = glyph::ink_fraction(&g, Rect::new(0, 0, 48, 96));
        assert_eq!(got, left as f64 / total as f64, "{c}");
        assert!(got > 0.2 && got < 0.8, "{c}: {got}");
    }
}
