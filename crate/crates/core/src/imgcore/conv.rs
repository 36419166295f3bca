//! Mirror-padded convolution and Gaussian smoothing.
//!
//! Kernels are decomposed into horizontal runs of equal weight. Long runs are
//! summed through per-row prefix sums, which makes the uniform disc kernels
//! used throughout the crate cost `O(side)` per pixel instead of `O(side²)`.

use rayon::prelude::*;

use super::buffer::{FloatMap, Image, Kernel};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Runs shorter than this are summed directly, which keeps identity and
/// small kernels bit-exact.
const DIRECT_RUN_MAX: isize = 4;

/// Half-sample symmetric reflection: `-1 -> 0`, `n -> n - 1`.
#[inline]
pub fn mirror_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Containers that are a stack of same-sized planes.
pub trait Planar<T: Real>: Sized {
    fn plane_dims(&self) -> (usize, usize);
    fn map_each_plane(&self, f: impl Fn(&FloatMap<T>) -> FloatMap<T> + Sync) -> Self;
}

impl<T: Real> Planar<T> for FloatMap<T> {
    fn plane_dims(&self) -> (usize, usize) {
        self.dims()
    }

    fn map_each_plane(&self, f: impl Fn(&FloatMap<T>) -> FloatMap<T> + Sync) -> Self {
        f(self)
    }
}

impl<T: Real> Planar<T> for Image<T> {
    fn plane_dims(&self) -> (usize, usize) {
        self.dims()
    }

    fn map_each_plane(&self, f: impl Fn(&FloatMap<T>) -> FloatMap<T> + Sync) -> Self {
        Image::from_planes_unchecked(self.planes().iter().map(f).collect())
    }
}

/// A horizontal run of equal correlation weight: offsets `dx0..=dx1` on row `dy`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Run {
    pub dy: isize,
    pub dx0: isize,
    pub dx1: isize,
    pub w: f64,
}

/// Correlation taps of a kernel, grouped into runs.
#[derive(Clone, Debug)]
pub(crate) struct Taps {
    pub runs: Vec<Run>,
    pub reach: usize,
}

impl Taps {
    /// Taps such that correlating with them equals convolving with `k`.
    pub fn for_convolution<T: Real>(k: &Kernel<T>) -> Self {
        let r = k.radius() as isize;
        let mut runs = Vec::new();
        for dy in -r..=r {
            let mut dx = -r;
            while dx <= r {
                // correlation weight at (dy, dx) is k(-dy, -dx)
                let w = k.at(-dy, -dx);
                if w == T::zero() {
                    dx += 1;
                    continue;
                }
                let start = dx;
                while dx + 1 <= r && k.at(-dy, -(dx + 1)) == w {
                    dx += 1;
                }
                runs.push(Run {
                    dy,
                    dx0: start,
                    dx1: dx,
                    w: w.as_f64(),
                });
                dx += 1;
            }
        }
        Self {
            runs,
            reach: r as usize,
        }
    }
}

/// A plane padded horizontally by mirroring, with per-row prefix sums.
pub(crate) struct PaddedPlane {
    height: usize,
    pad: usize,
    stride: usize,
    values: Vec<f64>,
    prefix: Vec<f64>,
}

impl PaddedPlane {
    pub fn new<T: Real>(src: &FloatMap<T>, pad: usize) -> Self {
        Self::with_mirror_partner(src, src, pad)
    }

    /// Like [`PaddedPlane::new`], but samples reflected an odd number of
    /// times across a vertical border come from `partner`. For a DP pair the
    /// horizontal mirror image of one view is the other view, so padding a
    /// view with its mirrored partner keeps the pair consistent with the
    /// mirror-padded scene it was rendered from.
    pub fn with_mirror_partner<T: Real>(src: &FloatMap<T>, partner: &FloatMap<T>, pad: usize) -> Self {
        let (h, w) = src.dims();
        debug_assert_eq!(partner.dims(), (h, w));
        let stride = w + 2 * pad;
        let mut values = Vec::with_capacity(h * stride);
        let mut prefix = Vec::with_capacity(h * (stride + 1));
        for y in 0..h {
            let own = &src.as_slice()[y * w..(y + 1) * w];
            let other = &partner.as_slice()[y * w..(y + 1) * w];
            let mut acc = 0.0;
            prefix.push(acc);
            for xp in 0..stride {
                let i = xp as isize - pad as isize;
                let row = if i.div_euclid(w as isize) % 2 == 0 { own } else { other };
                let v = row[mirror_index(i, w)].as_f64();
                values.push(v);
                acc += v;
                prefix.push(acc);
            }
        }
        Self {
            height: h,
            pad,
            stride,
            values,
            prefix,
        }
    }

    /// Sum of `run` weights times samples, for output pixel `(y, x)`.
    #[inline]
    pub fn run_sum(&self, y: usize, x: usize, run: &Run) -> f64 {
        let row = mirror_index(y as isize + run.dy, self.height);
        let a = (x as isize + run.dx0 + self.pad as isize) as usize;
        let b = (x as isize + run.dx1 + self.pad as isize) as usize;
        if run.dx1 - run.dx0 < DIRECT_RUN_MAX {
            let base = row * self.stride;
            let s: f64 = self.values[base + a..=base + b].iter().sum();
            run.w * s
        } else {
            let base = row * (self.stride + 1);
            run.w * (self.prefix[base + b + 1] - self.prefix[base + a])
        }
    }

    #[inline]
    pub fn correlate_at(&self, y: usize, x: usize, taps: &Taps) -> f64 {
        taps.runs.iter().map(|run| self.run_sum(y, x, run)).sum()
    }
}

pub(crate) fn convolve_plane<T: Real>(src: &FloatMap<T>, taps: &Taps) -> FloatMap<T> {
    let (h, w) = src.dims();
    let padded = PaddedPlane::new(src, taps.reach);
    let mut out = vec![T::zero(); h * w];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            *o = T::of(padded.correlate_at(y, x, taps));
        }
    });
    FloatMap::from_raw(h, w, out)
}

/// [`convolve_plane`] with `src` padded horizontally by its mirrored partner.
pub(crate) fn convolve_plane_paired<T: Real>(src: &FloatMap<T>, partner: &FloatMap<T>, taps: &Taps) -> FloatMap<T> {
    let (h, w) = src.dims();
    let padded = PaddedPlane::with_mirror_partner(src, partner, taps.reach);
    let mut out = vec![T::zero(); h * w];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            *o = T::of(padded.correlate_at(y, x, taps));
        }
    });
    FloatMap::from_raw(h, w, out)
}

/// Convolves every plane with `k`, mirror-padding at the borders.
pub fn convolve<T: Real, P: Planar<T>>(input: &P, k: &Kernel<T>) -> Result<P> {
    let (h, w) = input.plane_dims();
    if k.side() > h.min(w) {
        return Err(Error::invalid(format!(
            "kernel side {} exceeds image size {h}x{w}",
            k.side()
        )));
    }
    let taps = Taps::for_convolution(k);
    Ok(input.map_each_plane(|p| convolve_plane(p, &taps)))
}

/// Normalized 1-D Gaussian truncated at `ceil(3 sigma)`.
pub fn gaussian_weights(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

fn blur_plane<T: Real>(src: &FloatMap<T>, weights: &[f64]) -> FloatMap<T> {
    let (h, w) = src.dims();
    let r = (weights.len() / 2) as isize;
    let s = src.as_slice();
    let mut tmp = vec![0.0f64; h * w];
    tmp.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let line = &s[y * w..(y + 1) * w];
        for (x, o) in row.iter_mut().enumerate() {
            *o = weights
                .iter()
                .enumerate()
                .map(|(i, wt)| wt * line[mirror_index(x as isize + i as isize - r, w)].as_f64())
                .sum();
        }
    });
    let mut out = vec![T::zero(); h * w];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let v: f64 = weights
                .iter()
                .enumerate()
                .map(|(i, wt)| wt * tmp[mirror_index(y as isize + i as isize - r, h) * w + x])
                .sum();
            *o = T::of(v);
        }
    });
    FloatMap::from_raw(h, w, out)
}

/// Separable Gaussian blur with mirror padding; `sigma = 0` is the identity.
pub fn gaussian_blur<T: Real, P: Planar<T> + Clone>(input: &P, sigma: f64) -> Result<P> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("gaussian sigma {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(input.clone());
    }
    let weights = gaussian_weights(sigma);
    Ok(input.map_each_plane(|p| blur_plane(p, &weights)))
}
