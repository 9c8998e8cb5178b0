//! Watermark parameter files: `key = value` lines, written by `learn-wm`
//! and read back by `remove`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::watermark::{GlyphSource, WatermarkParams};

use super::{read_file, write_atomic};

pub fn params_to_text(p: &WatermarkParams) -> String {
    let mut s = String::new();
    match &p.glyph {
        GlyphSource::Atlas(c) => {
            let _ = writeln!(s, "glyph = {c}");
        }
        GlyphSource::Latent(z) => {
            let z: Vec<String> = z.iter().map(f64::to_string).collect();
            let _ = writeln!(s, "latent = {}", z.join(", "));
        }
    }
    let _ = writeln!(s, "raw_left = {}", p.raw_left);
    let _ = writeln!(s, "raw_bottom = {}", p.raw_bottom);
    let _ = writeln!(s, "log_scale = {}", p.log_scale);
    let _ = writeln!(s, "# p_left = {}, p_bottom = {}, scale = {}", p.p_left(), p.p_bottom(), p.log_scale.exp());
    s
}

pub fn params_from_text(text: &str) -> Result<WatermarkParams> {
    let (mut glyph, mut left, mut bottom, mut scale) = (None, None, None, None);
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("params: expected `key = value`, got {raw:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        let num = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::Config(format!("params: {k}: bad number {v:?}")))
        };
        match k {
            "glyph" => {
                let mut cs = v.chars();
                match (cs.next(), cs.next()) {
                    (Some(c), None) => glyph = Some(GlyphSource::Atlas(c)),
                    _ => return Err(Error::Config(format!("params: glyph must be one character, got {v:?}"))),
                }
            }
            "latent" => glyph = Some(GlyphSource::Latent(v.split(',').map(|x| num(x.trim())).collect::<Result<_>>()?)),
            "raw_left" => left = Some(num(v)?),
            "raw_bottom" => bottom = Some(num(v)?),
            "log_scale" => scale = Some(num(v)?),
            _ => return Err(Error::Config(format!("params: unknown key {k:?}"))),
        }
    }
    let missing = |name: &str| Error::Config(format!("params: missing {name}"));
    Ok(WatermarkParams {
        glyph: glyph.ok_or_else(|| missing("glyph"))?,
        raw_left: left.ok_or_else(|| missing("raw_left"))?,
        raw_bottom: bottom.ok_or_else(|| missing("raw_bottom"))?,
        log_scale: scale.ok_or_else(|| missing("log_scale"))?,
    })
}

pub fn save_params_text(path: &Path, p: &WatermarkParams) -> Result<()> {
    write_atomic(path, params_to_text(p).as_bytes())
}

pub fn load_params_text(path: &Path) -> Result<WatermarkParams> {
    let text = String::from_utf8(read_file(path)?).map_err(|_| Error::Config(format!("{}: not UTF-8", path.display())))?;
    params_from_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_exactly() {
        for p in [
            WatermarkParams {
                glyph: GlyphSource::Atlas('8'),
                raw_left: -0.123456789012345,
                raw_bottom: 4.0,
                log_scale: -0.3,
            },
            WatermarkParams {
                glyph: GlyphSource::Latent(vec![0.1, -2.5e-7, 3.0]),
                raw_left: 0.0,
                raw_bottom: -1.0,
                log_scale: 0.25,
            },
        ] {
            assert_eq!(params_from_text(&params_to_text(&p)).unwrap(), p);
        }
        assert!(params_from_text("glyph = 8\nraw_left = 0\nraw_bottom = 0").is_err());
        assert!(params_from_text("glyph = 88\n").is_err());
        assert!(params_from_text("glyph = 8\nraw_left = nan\nraw_bottom = 0\nlog_scale = 0").is_err());
    }
}
