//! Deterministic synthetic test content.
//!
//! `natural_image` paints a dead-leaves model (occluding soft-edged discs
//! with a scale-invariant size distribution, which gives the roughly 1/f
//! spectrum of photographs) over multi-octave value noise, then adds fine
//! texture and sensor-like noise. It is not a photograph, but its statistics
//! are stationary across seeds and it has the smooth areas, edges and
//! texture that prediction tools are tuned for.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chroma::{self, ChromaInput, ChromaSample};
use crate::error::Result;
use crate::tensor::Plane;

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Bilinearly interpolated random lattice with the given cell size.
fn value_noise(width: usize, height: usize, cell: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gw = (width as f64 / cell).ceil() as usize + 2;
    let gh = (height as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let fy = y as f64 / cell;
        let (iy, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
        for x in 0..width {
            let fx = x as f64 / cell;
            let (ix, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
            let a = lattice[iy * gw + ix];
            let b = lattice[iy * gw + ix + 1];
            let c = lattice[(iy + 1) * gw + ix];
            let d = lattice[(iy + 1) * gw + ix + 1];
            out.push((a * (1.0 - tx) + b * tx) * (1.0 - ty) + (c * (1.0 - tx) + d * tx) * ty);
        }
    }
    out
}

/// An 8-bit natural-looking test image, integer-valued in `[0, 255]`.
pub fn natural_image(width: usize, height: usize, seed: u64) -> Result<Plane> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![128.0; width * height];
    let mut cell = 96.0;
    while cell >= 3.0 {
        let amp = 22.0 * (cell / 96.0f64).powf(0.8);
        for (a, n) in acc.iter_mut().zip(value_noise(width, height, cell, &mut rng)) {
            *a += amp * n;
        }
        cell /= 2.0;
    }
    dead_leaves(&mut acc, width, height, &mut rng);
    let texture = value_noise(width, height, 4.0, &mut rng);
    let samples = acc
        .into_iter()
        .zip(texture)
        .map(|(v, t)| (v + 4.0 * t + rng.gen_range(-1.5..1.5)).round().clamp(0.0, 255.0))
        .collect();
    Plane::new(width, height, 8, samples)
}

/// Occluding soft-edged discs with radius density proportional to `r^-3`,
/// painted back to front until the image is covered several times over.
fn dead_leaves(acc: &mut [f64], width: usize, height: usize, rng: &mut ChaCha8Rng) {
    let r_min = 6.0f64;
    let r_max = (width.min(height) as f64 * 0.25).max(r_min * 2.0);
    let (a, b) = (r_min.powi(-2), r_max.powi(-2));
    let target = 3.0 * (width * height) as f64;
    let mut painted = 0.0;
    while painted < target {
        let r = (a - rng.gen::<f64>() * (a - b)).powf(-0.5);
        let (cx, cy) = (rng.gen_range(-r..width as f64 + r), rng.gen_range(-r..height as f64 + r));
        let level = rng.gen_range(16.0..240.0);
        let (gx, gy) = (rng.gen_range(-1.0..1.0) * 20.0 / r, rng.gen_range(-1.0..1.0) * 20.0 / r);
        let soft = rng.gen_range(0.8..2.5);
        let x0 = (cx - r - soft).floor().max(0.0) as usize;
        let y0 = (cy - r - soft).floor().max(0.0) as usize;
        let x1 = ((cx + r + soft).ceil().max(0.0) as usize).min(width);
        let y1 = ((cy + r + soft).ceil().max(0.0) as usize).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                let (ex, ey) = (x as f64 - cx, y as f64 - cy);
                let alpha = smoothstep((r - (ex * ex + ey * ey).sqrt()) / soft + 0.5);
                if alpha > 0.0 {
                    let v = &mut acc[y * width + x];
                    *v += alpha * (level + gx * ex + gy * ey - *v);
                }
            }
        }
        painted += std::f64::consts::PI * r * r;
    }
}

/// Chroma that is an exact linear function of luma plus noise:
/// `U = slope_u·L + b_u`, `V = slope_v·L + b_v`, with the slopes shared by
/// every block and the offsets drawn per block.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearChromaSpec {
    pub slope_u: f64,
    pub slope_v: f64,
    pub offset_u: (f64, f64),
    pub offset_v: (f64, f64),
    /// Half-width of the uniform noise added to every chroma sample.
    pub noise: f64,
}

impl Default for LinearChromaSpec {
    fn default() -> Self {
        Self {
            slope_u: 0.5,
            slope_v: -0.3,
            offset_u: (40.0, 120.0),
            offset_v: (140.0, 220.0),
            noise: 2.0,
        }
    }
}

/// `per_size` blocks for each size in 4, 8 and 16, with luma cut from
/// [`natural_image`] content and chroma following `spec`.
pub fn linear_chroma_samples(per_size: usize, seed: u64, spec: &LinearChromaSpec) -> Result<Vec<ChromaSample>> {
    let source = natural_image(256, 256, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c4a0);
    let mut out = Vec::with_capacity(3 * per_size);
    for n in chroma::BLOCK_SIZES {
        let side = 2 * n + 1;
        for _ in 0..per_size {
            let (x0, y0) = (rng.gen_range(0..=256 - side), rng.gen_range(0..=256 - side));
            let (bu, bv) = (rng.gen_range(spec.offset_u.0..spec.offset_u.1), rng.gen_range(spec.offset_v.0..spec.offset_v.1));
            let mut window = Vec::with_capacity(side * side);
            for y in 0..side {
                for x in 0..side {
                    let l = source.get(x0 + x, y0 + y);
                    let mut noise = || if spec.noise > 0.0 { rng.gen_range(-spec.noise..spec.noise) } else { 0.0 };
                    let u = spec.slope_u * l + bu + noise();
                    let v = spec.slope_v * l + bv + noise();
                    window.push([l, u, v]);
                }
            }
            let at = |x: usize, y: usize| window[y * side + x];
            let mut boundary = Vec::with_capacity(chroma::boundary_len(n));
            boundary.push(at(0, 0));
            boundary.extend((0..2 * n).map(|i| at(1 + i, 0)));
            boundary.extend((0..2 * n).map(|i| at(0, 1 + i)));
            let plane = |c: usize| Plane::from_fn(n, n, 8, |x, y| at(1 + x, 1 + y)[c]);
            out.push(ChromaSample {
                input: ChromaInput::new(plane(0)?, boundary)?,
                u: plane(1)?,
                v: plane(2)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = natural_image(64, 48, 3).unwrap();
        assert_eq!(a, natural_image(64, 48, 3).unwrap());
        assert_ne!(a, natural_image(64, 48, 4).unwrap());
        assert!(a.samples().iter().all(|v| (0.0..=255.0).contains(v) && v.fract() == 0.0));
        let mean = a.samples().iter().sum::<f64>() / a.samples().len() as f64;
        let var = a.samples().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / a.samples().len() as f64;
        assert!(var > 100.0, "image is too flat: variance {var}");
    }
}
