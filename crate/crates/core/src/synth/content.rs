//! Procedural screen content: luminance gradients, value-noise octaves and
//! rows of glyph-like rectangles, each with a small colour cast. Values are
//! display sRGB in `[0, 1]`.

use crate::tensor::Tensor;
use rand::Rng;

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Bilinearly interpolated lattice noise with `cell`-pixel spacing.
fn value_noise(h: usize, w: usize, cell: usize, rng: &mut impl Rng) -> Vec<f64> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (gy, ty) = (y / cell, (y % cell) as f64 / cell as f64);
        for x in 0..w {
            let (gx, tx) = (x / cell, (x % cell) as f64 / cell as f64);
            let top = lerp(lattice[gy * gw + gx], lattice[gy * gw + gx + 1], tx);
            let bot = lerp(lattice[(gy + 1) * gw + gx], lattice[(gy + 1) * gw + gx + 1], tx);
            out.push(lerp(top, bot, ty));
        }
    }
    out
}

fn tint(rng: &mut impl Rng, spread: f64) -> [f64; 3] {
    [rng.gen_range(-spread..spread), rng.gen_range(-spread..spread), rng.gen_range(-spread..spread)]
}

/// Mostly-luminance content with a mild colour cast, so channels stay
/// strongly correlated as in natural screen material.
pub fn procedural_content(h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    let l0: f64 = rng.gen_range(0.25..0.75);
    let l1: f64 = rng.gen_range(0.25..0.75);
    let (t0, t1) = (tint(rng, 0.08), tint(rng, 0.08));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    let span = (h as f64).hypot(w as f64);
    let mut img = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let t = 0.5 + ((y as f64 - h as f64 / 2.0) * dy + (x as f64 - w as f64 / 2.0) * dx) / span;
            let l = lerp(l0, l1, t);
            for c in 0..3 {
                img[(y * w + x) * 3 + c] = l + lerp(t0[c], t1[c], t);
            }
        }
    }
    let mut cell = (h.min(w) / 2).max(2);
    let mut amp = 0.25;
    while cell >= 2 {
        let n = value_noise(h, w, cell, rng);
        let chroma = tint(rng, 0.15);
        for (i, v) in n.iter().enumerate() {
            for c in 0..3 {
                img[i * 3 + c] += amp * (1.0 + chroma[c]) * v;
            }
        }
        cell /= 2;
        amp *= 0.6;
    }
    let rows = rng.gen_range(2..5);
    for _ in 0..rows {
        let gh = rng.gen_range(2..(h / 8).max(3));
        let y0 = rng.gen_range(0..h.saturating_sub(gh).max(1));
        let level: f64 = if rng.gen_bool(0.5) { rng.gen_range(0.05..0.3) } else { rng.gen_range(0.7..0.95) };
        let cast = tint(rng, 0.05);
        let color = [level + cast[0], level + cast[1], level + cast[2]];
        let mut x = rng.gen_range(0..(w / 4).max(1));
        while x < w {
            let gw = rng.gen_range(1..(gh + 2));
            for yy in y0..(y0 + gh).min(h) {
                for xx in x..(x + gw).min(w) {
                    if rng.gen_bool(0.8) {
                        img[(yy * w + xx) * 3..(yy * w + xx) * 3 + 3].copy_from_slice(&color);
                    }
                }
            }
            x += gw + rng.gen_range(1..4);
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::from_raw(vec![h, w, 3], img)
}
