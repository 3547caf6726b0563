use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::font::{glyph, GLYPH_H, GLYPH_W};
use crate::error::{Result, SvtrError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Style {
    /// Largest pixel size of one glyph cell; shrunk until the text fits.
    pub scale: usize,
    /// Maximum horizontal offset from centre, in pixels.
    pub x_jitter: usize,
    pub y_jitter: usize,
    /// Ink darkness relative to the background, in (0, 1].
    pub contrast: f64,
    pub noise_sigma: f64,
}

impl Default for Style {
    fn default() -> Self {
        Self {
            scale: 2,
            x_jitter: 2,
            y_jitter: 1,
            contrast: 0.8,
            noise_sigma: 0.02,
        }
    }
}

impl Style {
    /// No jitter, no noise, full contrast.
    pub fn clean() -> Self {
        Self {
            x_jitter: 0,
            y_jitter: 0,
            contrast: 1.0,
            noise_sigma: 0.0,
            ..Self::default()
        }
    }
}

const ADVANCE: usize = GLYPH_W + 1;

fn text_width(chars: usize, scale: usize) -> usize {
    (chars * ADVANCE).saturating_sub(1) * scale
}

/// Dark glyphs on a light background, `[3, h, w]` with values `k/255`.
pub fn render_text(text: &str, h: usize, w: usize, style: &Style, seed: u64) -> Result<Tensor> {
    if h == 0 || w == 0 {
        return Err(SvtrError::Render(format!("empty canvas {h}x{w}")));
    }
    if !(style.contrast > 0.0 && style.contrast <= 1.0) || !(style.noise_sigma >= 0.0) {
        return Err(SvtrError::Render(format!(
            "contrast {} must be in (0, 1] and noise_sigma {} non-negative",
            style.contrast, style.noise_sigma
        )));
    }
    let glyphs = text
        .chars()
        .map(|c| glyph(c).ok_or_else(|| SvtrError::Render(format!("no glyph for {c:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let fits = |s: usize| text_width(glyphs.len(), s) <= w && GLYPH_H * s <= h;
    let scale = (1..=style.scale.max(1))
        .rev()
        .find(|&s| fits(s))
        .ok_or_else(|| SvtrError::Render(format!("{text:?} does not fit in {h}x{w} even at scale 1")))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = rng.random_range(0.75..=1.0);
    let ink = background * (1.0 - style.contrast);
    let (tw, th) = (text_width(glyphs.len(), scale), GLYPH_H * scale);
    let place = |rng: &mut ChaCha8Rng, free: usize, jitter: usize| -> usize {
        let centre = (free / 2) as i64;
        let j = jitter as i64;
        let off = if j > 0 { rng.random_range(-j..=j) } else { 0 };
        (centre + off).clamp(0, free as i64) as usize
    };
    let x0 = place(&mut rng, w - tw, style.x_jitter);
    let y0 = place(&mut rng, h - th, style.y_jitter);

    let mut plane = vec![background; h * w];
    for (i, g) in glyphs.iter().enumerate() {
        let gx = x0 + i * ADVANCE * scale;
        for (r, row) in g.iter().enumerate() {
            for (c, &on) in row.iter().enumerate() {
                if !on {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        plane[(y0 + r * scale + dy) * w + gx + c * scale + dx] = ink;
                    }
                }
            }
        }
    }
    let noise = (style.noise_sigma > 0.0).then(|| Normal::new(0.0, style.noise_sigma).expect("valid sigma"));
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        for &v in &plane {
            let v = match &noise {
                Some(n) => v + n.sample(&mut rng),
                None => v,
            };
            data.push(quantize(v));
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Clamps to [0, 1] and snaps to the nearest `k/255`.
pub fn quantize(v: f64) -> f32 {
    to_byte(v) as f32 / 255.0
}

pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
