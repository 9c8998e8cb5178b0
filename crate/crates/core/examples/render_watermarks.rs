//! Renders atlas glyphs at several placements and fits the latent glyph decoder.
//!
//! `cargo run --release --example render_watermarks -- [out-dir]`

use std::path::PathBuf;

use harvim::io::save_png;
use harvim::watermark::{
    decoder::train_decoder, soft_mask, DecoderConfig, DecoderGenerator, GlyphAtlas, GlyphSource, WatermarkGenerator,
    WatermarkParams, ALPHA, BETA,
};
use harvim::SeededRng;

fn main() -> harvim::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "render-out".into()));
    let generator = WatermarkGenerator::<f32>::new(32)?;
    let (lo, hi) = generator.renderer().log_scale_bounds();
    println!("log-scale range [{lo:.3}, {hi:.3}]");

    for (i, (c, pl, pb, ls)) in [('8', 0.0, 0.0, 0.0), ('A', 0.5, 0.5, 0.3), ('X', 1.0, 1.0, -0.3), ('W', 0.2, 0.8, hi)]
        .into_iter()
        .enumerate()
    {
        let p = WatermarkParams::new(GlyphSource::Atlas(c), pl, pb, ls);
        let m = generator.render(&p)?.reshape([32, 32])?;
        let w = soft_mask(&m, ALPHA, BETA)?.coverage;
        let covered = w.data().iter().filter(|v| **v > 0.5).count();
        let scale = generator.renderer().clamp_log_scale(ls).exp();
        println!("'{c}' at ({pl}, {pb}) scale {scale:.2}: {covered} pixels covered");
        save_png(&out.join(format!("mask{i}_{c}.png")), &w)?;
    }

    // latent glyphs: one code per atlas letter, decoded at any placement
    let atlas = GlyphAtlas::bundled();
    let cfg = DecoderConfig::default();
    let mut rng = SeededRng::new(0);
    let mut decoder = DecoderGenerator::init(&cfg, atlas, &mut rng);
    let curve = train_decoder(&mut decoder, atlas, &cfg, &mut rng)?;
    println!("decoder MSE {:.4} -> {:.4}", curve[0], curve[curve.len() - 1]);
    let z = decoder.code(atlas.index_of('H')?)?;
    save_png(&out.join("decoded_H.png"), &decoder.decode(&z, 0.5, 0.5)?)?;
    let generator = generator.with_decoder(decoder)?;
    let m = generator.render(&WatermarkParams::new(GlyphSource::Latent(z), 0.3, 0.6, 0.2))?;
    save_png(&out.join("latent_H.png"), &m.reshape([32, 32])?)?;
    println!("images in {}", out.display());
    Ok(())
}
