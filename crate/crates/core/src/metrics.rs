//! Reference-based quality metrics with a peak value of 1.0.
//!
//! Dataset-level figures are the mean of per-image values.

use crate::error::{Error, Result};
use crate::imgcore::{FloatMap, Image};
use crate::scalar::Real;

/// PSNR reported for identical images, and the ceiling for all others.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn abs_diffs<'a, T: Real>(a: &'a Image<T>, b: &'a Image<T>) -> impl Iterator<Item = f64> + 'a {
    a.planes()
        .iter()
        .zip(b.planes())
        .flat_map(|(p, q)| p.as_slice().iter().zip(q.as_slice()))
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
}

fn sample_count<T: Real>(a: &Image<T>) -> f64 {
    (a.height() * a.width() * a.channels()) as f64
}

pub fn mae<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    a.ensure_same_shape(b, "mae")?;
    Ok(abs_diffs(a, b).sum::<f64>() / sample_count(a))
}

pub fn mse<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    a.ensure_same_shape(b, "mse")?;
    Ok(abs_diffs(a, b).map(|d| d * d).sum::<f64>() / sample_count(a))
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    mse(a, b).map(psnr_from_mse)
}

/// PSNR restricted to pixels where `mask` is set (all channels).
pub fn psnr_masked<T: Real>(a: &Image<T>, b: &Image<T>, mask: &[bool]) -> Result<f64> {
    a.ensure_same_shape(b, "psnr")?;
    let n = a.height() * a.width();
    if mask.len() != n {
        return Err(Error::shape(format!("mask of {} for {n} pixels", mask.len())));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, q) in a.planes().iter().zip(b.planes()) {
        for i in (0..n).filter(|&i| mask[i]) {
            let d = p.as_slice()[i].as_f64() - q.as_slice()[i].as_f64();
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("empty mask"));
    }
    Ok(psnr_from_mse(sum / count as f64))
}

fn ssim_gaussian_1d() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let g: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Normalized 2-D Gaussian window used by [`ssim`], row-major.
pub fn ssim_window() -> Vec<f64> {
    let g = ssim_gaussian_1d();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for gy in &g {
        for gx in &g {
            w.push(gy * gx);
        }
    }
    w
}

/// Valid-mode separable filtering with the 1-D Gaussian factor.
fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|i| g[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over all valid 11×11 Gaussian windows of the
/// channel-mean grayscale images.
pub fn ssim<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    a.ensure_same_shape(b, "ssim")?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let to64 = |m: FloatMap<T>| -> Vec<f64> { m.as_slice().iter().map(|v| v.as_f64()).collect() };
    let x = to64(a.luma());
    let y = to64(b.luma());
    let g1 = ssim_gaussian_1d();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mu_x = filter_valid(&x, h, w, &g1);
    let mu_y = filter_valid(&y, h, w, &g1);
    let xx = filter_valid(&prod(&x, &x), h, w, &g1);
    let yy = filter_valid(&prod(&y, &y), h, w, &g1);
    let xy = filter_valid(&prod(&x, &y), h, w, &g1);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cxy = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// `clamp(gain * |a - b|, 0, 1)` per sample.
pub fn residual_map<T: Real>(a: &Image<T>, b: &Image<T>, gain: f64) -> Result<Image<T>> {
    a.ensure_same_shape(b, "residual map")?;
    if !(gain > 0.0) || !gain.is_finite() {
        return Err(Error::invalid(format!("residual gain {gain} must be positive")));
    }
    let planes = a
        .planes()
        .iter()
        .zip(b.planes())
        .map(|(p, q)| {
            let (h, w) = p.dims();
            FloatMap::from_raw(
                h,
                w,
                p.as_slice()
                    .iter()
                    .zip(q.as_slice())
                    .map(|(x, y)| T::of((gain * (x.as_f64() - y.as_f64()).abs()).clamp(0.0, 1.0)))
                    .collect(),
            )
        })
        .collect();
    Ok(Image::from_planes_unchecked(planes))
}

/// PSNR, SSIM and MAE of one result against its reference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityReport {
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
}

impl QualityReport {
    pub fn measure<T: Real>(result: &Image<T>, reference: &Image<T>) -> Result<Self> {
        Ok(Self {
            psnr: psnr(result, reference)?,
            ssim: ssim(result, reference)?,
            mae: mae(result, reference)?,
        })
    }

    /// Per-image average across a dataset.
    pub fn mean(reports: &[QualityReport]) -> Option<QualityReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        Some(QualityReport {
            psnr: reports.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
            mae: reports.iter().map(|r| r.mae).sum::<f64>() / n,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn noise_image(h: usize, w: usize, c: usize, seed: u64) -> Image<f64> {
        let mut s = seed.wrapping_add(0x9E3779B97F4A7C15);
        let planes = (0..c)
            .map(|_| {
                FloatMap::from_fn(h, w, |_, _| {
                    s ^= s << 13;
                    s ^= s >> 7;
                    s ^= s << 17;
                    (s >> 11) as f64 / (1u64 << 53) as f64
                })
            })
            .collect();
        Image::from_planes(planes).unwrap()
    }

    #[test]
    fn identical_images() {
        let a = noise_image(16, 16, 3, 1);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let r = residual_map(&a, &a, 10.0).unwrap();
        assert!(r.planes().iter().all(|p| p.as_slice().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn constant_offset() {
        let a = noise_image(12, 12, 1, 2).map(|v| v * 0.8);
        let b = a.map(|v| v + 0.1);
        assert!((mae(&a, &b).unwrap() - 0.1).abs() < 1e-12);
        // MSE 0.01 -> 10 log10(100) = 20 dB
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn checkerboard_inverse_is_zero_db() {
        let a = Image::gray(FloatMap::<f64>::from_fn(8, 8, |y, x| ((x + y) % 2) as f64));
        let b = a.map(|v| 1.0 - v);
        assert_eq!(psnr(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn mae_matches_nested_loop() {
        let a = noise_image(9, 7, 3, 3);
        let b = noise_image(9, 7, 3, 4);
        let mut s = 0.0;
        for c in 0..3 {
            for y in 0..9 {
                for x in 0..7 {
                    s += (a.get(c, y, x) - b.get(c, y, x)).abs();
                }
            }
        }
        assert!((mae(&a, &b).unwrap() - s / (9.0 * 7.0 * 3.0)).abs() < 1e-9);
    }

    #[test]
    fn ssim_against_flat_image_of_same_mean() {
        let a = noise_image(24, 24, 1, 5);
        let m = a.plane(0).mean();
        let flat = Image::filled(24, 24, 1, m);
        let s = ssim(&a, &flat).unwrap();
        assert!(s > 0.0 && s < 1.0, "{s}");
    }

    #[test]
    fn ssim_matches_per_window_oracle() {
        let a = noise_image(32, 32, 1, 6);
        let n = noise_image(32, 32, 1, 7);
        let b = Image::gray(FloatMap::from_fn(32, 32, |y, x| 0.5 * a.get(0, y, x) + 0.5 * n.get(0, y, x)));
        let win = ssim_window();
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut total = 0.0;
        let mut n = 0;
        for y0 in 0..=32 - 11 {
            for x0 in 0..=32 - 11 {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let w = win[i * 11 + j];
                        mx += w * a.get(0, y0 + i, x0 + j);
                        my += w * b.get(0, y0 + i, x0 + j);
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let w = win[i * 11 + j];
                        let dx = a.get(0, y0 + i, x0 + j) - mx;
                        let dy = b.get(0, y0 + i, x0 + j) - my;
                        vx += w * dx * dx;
                        vy += w * dy * dy;
                        cxy += w * dx * dy;
                    }
                }
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                n += 1;
            }
        }
        assert!((ssim(&a, &b).unwrap() - total / n as f64).abs() < 1e-6);
    }

    #[test]
    fn residual_scaling_and_saturation() {
        let a = Image::gray(FloatMap::<f64>::filled(4, 4, 0.50));
        let b = Image::gray(FloatMap::<f64>::filled(4, 4, 0.52));
        let r = residual_map(&a, &b, 10.0).unwrap();
        assert!((r.get(0, 0, 0) - 0.2).abs() < 1e-9);
        let r = residual_map(&a, &b, 1e4).unwrap();
        assert_eq!(r.get(0, 2, 2), 1.0);
        assert!(residual_map(&a, &b, 0.0).is_err());
    }

    #[test]
    fn shape_errors() {
        let a = noise_image(12, 12, 1, 1);
        let b = noise_image(12, 13, 1, 1);
        assert!(mae(&a, &b).is_err());
        assert!(psnr(&a, &b).is_err());
        let small = noise_image(10, 10, 1, 1);
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let a = noise_image(32, 32, 1, 9).map(|v| 0.25 + 0.5 * v);
        let n = noise_image(32, 32, 1, 10);
        let noisy = |amp: f64| {
            Image::gray(FloatMap::from_fn(32, 32, |y, x| a.get(0, y, x) + amp * (n.get(0, y, x) - 0.5)))
        };
        let p: Vec<f64> = [0.01, 0.05, 0.2].iter().map(|&s| psnr(&a, &noisy(s)).unwrap()).collect();
        assert!(p[0] > p[1] && p[1] > p[2]);
    }

    #[test]
    fn masked_psnr() {
        let a = Image::gray(FloatMap::<f64>::filled(2, 2, 0.5));
        let b = Image::gray(FloatMap::from_fn(2, 2, |_, x| if x == 0 { 0.5 } else { 0.6 }));
        assert_eq!(psnr_masked(&a, &b, &[true, false, true, false]).unwrap(), PSNR_CAP_DB);
        assert!((psnr_masked(&a, &b, &[false, true, false, true]).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr_masked(&a, &b, &[false; 4]).is_err());
    }

    proptest! {
        #[test]
        fn symmetric_and_jensen(seed_a in any::<u64>(), seed_b in any::<u64>()) {
            let a = noise_image(12, 12, 3, seed_a);
            let b = noise_image(12, 12, 3, seed_b);
            prop_assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
            prop_assert!(mae(&a, &b).unwrap() <= mse(&a, &b).unwrap().sqrt() + 1e-12);
        }
    }
}
