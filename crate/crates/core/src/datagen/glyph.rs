//! Procedural glyph set: each label owns a binary cell pattern, a colour and
//! a motion path across the frame.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MAX_GLYPHS: usize = 64;
pub const CELLS: usize = 6;
pub const CELL_PX: usize = 4;
pub const GLYPH_PX: usize = CELLS * CELL_PX;

const GLYPH_SEED: u64 = 0x5eed_9197_0001;
/// Minimum Hamming distance between any two cell patterns.
const MIN_CELL_DISTANCE: u32 = 14;

#[derive(Clone, Debug, PartialEq)]
pub struct Glyph {
    pub cells: [[bool; CELLS]; CELLS],
    pub color: [f32; 3],
    /// Top-left corner at phase 0 and phase 1, as fractions of free space.
    pub start: (f32, f32),
    pub end: (f32, f32),
}

type Pattern = [[bool; CELLS]; CELLS];

/// Patterns are drawn greedily in label order, rejecting candidates too close
/// to an earlier one.
fn patterns() -> &'static [Pattern; MAX_GLYPHS] {
    static TABLE: OnceLock<[Pattern; MAX_GLYPHS]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(GLYPH_SEED);
        let mut bits: Vec<u64> = Vec::with_capacity(MAX_GLYPHS);
        while bits.len() < MAX_GLYPHS {
            let cand = rng.random::<u64>() & ((1 << (CELLS * CELLS)) - 1);
            if (12..=24).contains(&cand.count_ones())
                && bits.iter().all(|b| (b ^ cand).count_ones() >= MIN_CELL_DISTANCE)
            {
                bits.push(cand);
            }
        }
        std::array::from_fn(|l| {
            let mut p = [[false; CELLS]; CELLS];
            for (i, c) in p.iter_mut().flatten().enumerate() {
                *c = bits[l] >> i & 1 == 1;
            }
            p
        })
    })
}

pub fn glyph(label: usize) -> Glyph {
    assert!(label < MAX_GLYPHS);
    let mut rng = ChaCha8Rng::seed_from_u64(GLYPH_SEED);
    rng.set_stream(label as u64 + 1);
    let cells = patterns()[label];
    // Hue on a wheel indexed by label keeps neighbouring ids apart.
    let hue = (label as f32 * 0.381_966) % 1.0;
    let color = hsv(hue, 0.85, 1.0);
    let angle = label as f32 * 2.399_963 + rng.random_range(-0.3..0.3);
    let (dx, dy) = (angle.cos() * 0.45, angle.sin() * 0.45);
    Glyph {
        cells,
        color,
        start: (0.5 - dx, 0.5 - dy),
        end: (0.5 + dx, 0.5 + dy),
    }
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Signer-specific appearance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SignerStyle {
    pub background: [f32; 3],
    pub brightness: f32,
    pub offset: (i32, i32),
    pub noise: f32,
    pub speed: f64,
}

pub fn signer_style(signer_id: u32) -> SignerStyle {
    let mut rng = ChaCha8Rng::seed_from_u64(GLYPH_SEED ^ 0xa5a5);
    rng.set_stream(1000 + signer_id as u64);
    let base = rng.random_range(0.05f32..0.3);
    SignerStyle {
        background: [
            base + rng.random_range(-0.04f32..0.04),
            base + rng.random_range(-0.04f32..0.04),
            base + rng.random_range(-0.04f32..0.04),
        ],
        brightness: rng.random_range(0.7f32..1.0),
        offset: (rng.random_range(-3..=3), rng.random_range(-3..=3)),
        noise: rng.random_range(0.02f32..0.1),
        speed: rng.random_range(0.85..1.2),
    }
}

/// Draw `g` at motion phase `phase` in `[0, 1]` onto a `(3, size, size)` canvas.
pub fn draw(canvas: &mut [f32], size: usize, g: &Glyph, phase: f32, style: &SignerStyle) {
    let free = (size - GLYPH_PX) as f32;
    let fx = g.start.0 + (g.end.0 - g.start.0) * phase;
    let fy = g.start.1 + (g.end.1 - g.start.1) * phase;
    let x0 = (fx * free).round() as i32 + style.offset.0;
    let y0 = (fy * free).round() as i32 + style.offset.1;
    for (cy, row) in g.cells.iter().enumerate() {
        for (cx, &on) in row.iter().enumerate() {
            // Off cells are dark so the pattern reads on any background.
            let scale = if on { style.brightness } else { 0.0 };
            for py in 0..CELL_PX {
                for px in 0..CELL_PX {
                    let y = y0 + (cy * CELL_PX + py) as i32;
                    let x = x0 + (cx * CELL_PX + px) as i32;
                    if x < 0 || y < 0 || x >= size as i32 || y >= size as i32 {
                        continue;
                    }
                    for (c, &col) in g.color.iter().enumerate() {
                        canvas[(c * size + y as usize) * size + x as usize] = col * scale;
                    }
                }
            }
        }
    }
}
