//! Dual-pixel point spread functions and forward rendering of DP pairs.
//!
//! A DP kernel of radius `r > 0` is the left half of the uniform disc
//! `x² + y² <= r²`. The center column `x = 0` is shared between the two
//! sub-apertures, so it carries half the weight of the other columns in each
//! view. With that convention the right kernel is the exact mirror of the
//! left one and their average is the uniform full disc, bit for bit. A
//! negative radius swaps the halves (in front of the focus plane).

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imgcore::{FloatMap, Image, Kernel, PaddedPlane, Taps};
use crate::scalar::Real;

/// Largest supported COC radius in pixels.
pub const MAX_RADIUS: i32 = 25;

#[derive(Clone, Debug, PartialEq)]
pub struct DpKernelPair<T> {
    pub radius: i32,
    pub left: Kernel<T>,
    pub right: Kernel<T>,
}

/// Co-registered left and right sub-aperture views.
#[derive(Clone, Debug, PartialEq)]
pub struct DpPair<T> {
    left: Image<T>,
    right: Image<T>,
}

impl<T: Real> DpPair<T> {
    pub fn new(left: Image<T>, right: Image<T>) -> Result<Self> {
        left.ensure_same_shape(&right, "dual-pixel views")?;
        Ok(Self { left, right })
    }

    pub fn left(&self) -> &Image<T> {
        &self.left
    }

    pub fn right(&self) -> &Image<T> {
        &self.right
    }

    pub fn dims(&self) -> (usize, usize) {
        self.left.dims()
    }

    pub fn channels(&self) -> usize {
        self.left.channels()
    }

    /// The pair with its views exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            left: self.right.clone(),
            right: self.left.clone(),
        }
    }

    pub fn into_views(self) -> (Image<T>, Image<T>) {
        (self.left, self.right)
    }

    pub fn map_views(&self, f: impl Fn(&Image<T>) -> Image<T>) -> Self {
        Self {
            left: f(&self.left),
            right: f(&self.right),
        }
    }
}

fn check_radius(radius: i32) -> Result<()> {
    if radius.abs() > MAX_RADIUS {
        return Err(Error::invalid(format!(
            "radius {radius} outside [-{MAX_RADIUS}, {MAX_RADIUS}]"
        )));
    }
    Ok(())
}

fn disc_pixel_count(r: i32) -> usize {
    let mut n = 0;
    for y in -r..=r {
        for x in -r..=r {
            if x * x + y * y <= r * r {
                n += 1;
            }
        }
    }
    n
}

fn left_half_weights(r: i32) -> Vec<f64> {
    let side = (2 * r + 1) as usize;
    let total = disc_pixel_count(r) as f64;
    let mut w = vec![0.0; side * side];
    for y in -r..=r {
        for x in -r..=0 {
            if x * x + y * y <= r * r {
                let share = if x == 0 { 1.0 } else { 2.0 };
                w[((y + r) as usize) * side + (x + r) as usize] = share / total;
            }
        }
    }
    w
}

/// Left/right DP kernels for a signed integer radius.
pub fn make_dp_kernels<T: Real>(radius: i32) -> Result<DpKernelPair<T>> {
    check_radius(radius)?;
    if radius == 0 {
        return Ok(DpKernelPair {
            radius,
            left: Kernel::identity(),
            right: Kernel::identity(),
        });
    }
    let r = radius.abs();
    let side = (2 * r + 1) as usize;
    let half = Kernel::from_raw(side, left_half_weights(r).into_iter().map(T::of).collect());
    let mirrored = half.mirror_horizontal();
    let (left, right) = if radius > 0 {
        (half, mirrored)
    } else {
        (mirrored, half)
    };
    Ok(DpKernelPair {
        radius,
        left,
        right,
    })
}

/// Uniform normalized disc `x² + y² <= r²`, the full-aperture PSF.
pub fn full_disc_kernel<T: Real>(radius: i32) -> Result<Kernel<T>> {
    if radius < 0 {
        return Err(Error::invalid(format!("disc radius {radius} is negative")));
    }
    check_radius(radius)?;
    if radius == 0 {
        return Ok(Kernel::identity());
    }
    let r = radius;
    let side = (2 * r + 1) as usize;
    let weight = 1.0 / disc_pixel_count(r) as f64;
    let mut w = vec![T::zero(); side * side];
    for y in -r..=r {
        for x in -r..=r {
            if x * x + y * y <= r * r {
                w[((y + r) as usize) * side + (x + r) as usize] = T::of(weight);
            }
        }
    }
    Ok(Kernel::from_raw(side, w))
}

/// Precomputed convolution taps for every supported radius.
pub(crate) struct TapBank {
    left: Vec<Taps>,
    right: Vec<Taps>,
    disc: Vec<Taps>,
}

impl TapBank {
    fn build() -> Self {
        let n = (2 * MAX_RADIUS + 1) as usize;
        let mut left = Vec::with_capacity(n);
        let mut right = Vec::with_capacity(n);
        for r in -MAX_RADIUS..=MAX_RADIUS {
            let pair = make_dp_kernels::<f64>(r).expect("radius in range");
            left.push(Taps::for_convolution(&pair.left));
            right.push(Taps::for_convolution(&pair.right));
        }
        let disc = (0..=MAX_RADIUS)
            .map(|r| Taps::for_convolution(&full_disc_kernel::<f64>(r).expect("radius in range")))
            .collect();
        Self { left, right, disc }
    }

    pub fn get() -> &'static TapBank {
        static BANK: OnceLock<TapBank> = OnceLock::new();
        BANK.get_or_init(TapBank::build)
    }

    pub fn left(&self, r: i32) -> &Taps {
        &self.left[(r + MAX_RADIUS) as usize]
    }

    pub fn right(&self, r: i32) -> &Taps {
        &self.right[(r + MAX_RADIUS) as usize]
    }

    pub fn disc(&self, r: i32) -> &Taps {
        &self.disc[r.unsigned_abs() as usize]
    }
}

/// Rounded integer radius of every pixel, validated against the range.
fn rounded_radii<T: Real>(coc: &FloatMap<T>) -> Result<Vec<i32>> {
    coc.as_slice()
        .iter()
        .map(|&c| {
            let c = c.as_f64();
            if c.abs() > MAX_RADIUS as f64 {
                Err(Error::invalid(format!("COC {c} exceeds {MAX_RADIUS} px")))
            } else {
                Ok(c.round() as i32)
            }
        })
        .collect()
}

/// Spatially varying gather: each output pixel uses the kernel selected by
/// its own rounded radius.
fn gather<T: Real>(
    sharp: &Image<T>,
    radii: &[i32],
    taps_for: impl Fn(i32) -> &'static Taps + Sync,
) -> Image<T> {
    let (h, w) = sharp.dims();
    let reach = radii.iter().map(|r| r.unsigned_abs()).max().unwrap_or(0) as usize;
    let planes = sharp
        .planes()
        .iter()
        .map(|plane| {
            let padded = PaddedPlane::new(plane, reach);
            let mut out = vec![T::zero(); h * w];
            out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
                for (x, o) in row.iter_mut().enumerate() {
                    let taps = taps_for(radii[y * w + x]);
                    *o = T::of(padded.correlate_at(y, x, taps));
                }
            });
            FloatMap::from_raw(h, w, out)
        })
        .collect();
    Image::from_planes_unchecked(planes)
}

fn check_coc<T: Real>(sharp: &Image<T>, coc: &FloatMap<T>) -> Result<Vec<i32>> {
    if sharp.dims() != coc.dims() {
        return Err(Error::shape(format!(
            "image {:?} vs COC map {:?}",
            sharp.dims(),
            coc.dims()
        )));
    }
    rounded_radii(coc)
}

/// Renders the left and right DP views of `sharp` under a signed COC map.
///
/// Occlusion is ignored: each output pixel gathers its neighborhood with the
/// kernel of its own rounded radius, with mirror padding at the borders.
pub fn render_dp_pair<T: Real>(sharp: &Image<T>, coc: &FloatMap<T>) -> Result<DpPair<T>> {
    let radii = check_coc(sharp, coc)?;
    let bank = TapBank::get();
    let left = gather(sharp, &radii, |r| bank.left(r));
    let right = gather(sharp, &radii, |r| bank.right(r));
    DpPair::new(left, right)
}

/// Full-aperture rendering with the uniform disc of each pixel's radius.
pub fn render_mono<T: Real>(sharp: &Image<T>, coc: &FloatMap<T>) -> Result<Image<T>> {
    let radii = check_coc(sharp, coc)?;
    let bank = TapBank::get();
    Ok(gather(sharp, &radii, |r| bank.disc(r)))
}

/// Adds i.i.d. Gaussian noise and clamps to `[0, 1]`; fully determined by `seed`.
pub fn add_gaussian_noise<T: Real>(img: &Image<T>, sigma: f64, seed: u64) -> Result<Image<T>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("noise sigma {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planes = img
        .planes()
        .iter()
        .map(|p| {
            p.map_with(|v| {
                T::of((v.as_f64() + normal.sample(&mut rng)).clamp(0.0, 1.0))
            })
        })
        .collect();
    Ok(Image::from_planes_unchecked(planes))
}
