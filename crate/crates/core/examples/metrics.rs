//! Top-N accuracy, pixel metrics and the embedding-Fréchet distance on toy data.

use glyphdict::demo;
use glyphdict::font::FontSource;
use glyphdict::encoder::{Encoder, HandcraftedEncoder};
use glyphdict::metrics::{self, TopNCurve, TOP_N};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let rankings = vec![vec!['甲', '乙', '丙'], vec!['乙', '甲'], vec!['丙'], vec![]];
    let truths = vec!['甲', '甲', '丁', '乙'];
    let curve = TopNCurve::from_rankings(&rankings, &truths, &TOP_N)?;
    println!("Top-N {:?}", curve.accuracy);

    let fonts = demo::procedural_fonts();
    let a = fonts.renders('木')?;
    let b = fonts.renders('林')?;
    println!("SSIM 木/木 {:.3}, 木 font0/font1 {:.3}, 木/林 {:.3}", metrics::ssim(&a[0], &a[0])?, metrics::ssim(&a[0], &a[1])?, metrics::ssim(&a[0], &b[0])?);
    println!("L1   木/木 {:.3}, 木 font0/font1 {:.3}, 木/林 {:.3}", metrics::l1(&a[0], &a[0])?, metrics::l1(&a[0], &a[1])?, metrics::l1(&a[0], &b[0])?);

    let enc = HandcraftedEncoder::default();
    let embed = |s: &str| -> Vec<_> {
        s.chars()
            .flat_map(|c| fonts.renders(c).unwrap())
            .map(|g| enc.embed(&g).unwrap())
            .collect()
    };
    let (x, y) = (embed("木林森本末"), embed("日明晶昌旦"));
    println!("{}: same set {:.4}, different sets {:.4}", metrics::FRECHET_LABEL, metrics::frechet_diag(&x, &x)?, metrics::frechet_diag(&x, &y)?);
    Ok(())
}
