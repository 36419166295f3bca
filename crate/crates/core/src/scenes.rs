//! Deterministic synthetic scenes for experiments and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imgcore::{gaussian_blur, FloatMap, Image};
use crate::scalar::Real;

/// Random texture in `[0.05, 0.95]`: a dead-leaves layer of overlapping
/// discs (edges at every scale, so contrast survives heavy defocus) blended
/// with multi-scale smoothed noise (fine detail).
pub fn textured_image<T: Real>(height: usize, width: usize, channels: usize, seed: u64) -> Image<T> {
    assert!(channels == 1 || channels == 3, "images have 1 or 3 channels");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = height * width;

    let mut leaves = vec![vec![f64::NAN; n]; channels];
    let mut uncovered = n;
    let mut placed = 0;
    while uncovered > 0 && placed < 20_000 {
        placed += 1;
        // radii follow a 1/r³ law between 2 and 32 pixels
        let u: f64 = rng.random();
        let (r_min, r_max) = (2.0f64, 32.0f64);
        let inv2 = 1.0 / (r_min * r_min) - u * (1.0 / (r_min * r_min) - 1.0 / (r_max * r_max));
        let radius = 1.0 / inv2.sqrt();
        let cy = rng.random::<f64>() * height as f64;
        let cx = rng.random::<f64>() * width as f64;
        let base: f64 = rng.random();
        let tint: Vec<f64> = (0..channels)
            .map(|_| (base + 0.3 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0))
            .collect();
        let y0 = (cy - radius).floor().max(0.0) as usize;
        let y1 = ((cy + radius).ceil() as usize).min(height - 1);
        let x0 = (cx - radius).floor().max(0.0) as usize;
        let x1 = ((cx + radius).ceil() as usize).min(width - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let i = y * width + x;
                // earlier leaves occlude later ones
                if dy * dy + dx * dx <= radius * radius && leaves[0][i].is_nan() {
                    for c in 0..channels {
                        leaves[c][i] = tint[c];
                    }
                    uncovered -= 1;
                }
            }
        }
    }

    let scales = [(0.8, 0.4), (2.0, 0.3), (5.0, 0.3)];
    let planes = (0..channels)
        .map(|c| {
            let mut acc: Vec<f64> = leaves[c].iter().map(|v| if v.is_nan() { 0.5 } else { *v }).collect();
            for &(sigma, amp) in &scales {
                let noise = FloatMap::<f64>::from_fn(height, width, |_, _| rng.random::<f64>() - 0.5);
                let smooth = gaussian_blur(&noise, sigma).expect("positive sigma");
                let (lo, hi) = smooth.min_max();
                let span = (hi - lo).max(1e-12);
                for (a, v) in acc.iter_mut().zip(smooth.as_slice()) {
                    *a += 0.5 * amp * ((v - lo) / span - 0.5);
                }
            }
            let (lo, hi) = acc
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            let span = (hi - lo).max(1e-12);
            FloatMap::from_raw(
                height,
                width,
                acc.into_iter()
                    .map(|v| T::of(0.05 + 0.9 * (v - lo) / span))
                    .collect(),
            )
        })
        .collect();
    Image::from_planes_unchecked(planes)
}

/// COC map made of vertical bands of equal width, one per radius.
pub fn banded_coc<T: Real>(height: usize, width: usize, radii: &[f64]) -> Result<FloatMap<T>> {
    if radii.is_empty() || radii.len() > width {
        return Err(Error::invalid("need between 1 and width bands"));
    }
    let n = radii.len();
    Ok(FloatMap::from_fn(height, width, |_, x| T::of(radii[x * n / width])))
}

/// Distance in pixels (Chebyshev) from each pixel to the nearest pixel with
/// a different value in `map`, capped at `cap`.
pub fn distance_to_boundary<T: Real>(map: &FloatMap<T>, cap: usize) -> Vec<usize> {
    let (h, w) = map.dims();
    let mut out = vec![cap; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = map.get(y, x);
            let mut best = cap;
            'rings: for d in 1..cap {
                let y0 = y.saturating_sub(d);
                let y1 = (y + d).min(h - 1);
                let x0 = x.saturating_sub(d);
                let x1 = (x + d).min(w - 1);
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        let on_ring = yy.abs_diff(y) == d || xx.abs_diff(x) == d;
                        if on_ring && map.get(yy, xx) != v {
                            best = d;
                            break 'rings;
                        }
                    }
                }
            }
            out[y * w + x] = best;
        }
    }
    out
}
