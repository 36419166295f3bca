//! Thin-lens camera model: scene depth to signed COC radius in pixels.
//!
//! The classical blur-circle formula gives a diameter on the sensor,
//! `|d - d_f| / d * f0² / (N (d_f - f0))`. Everywhere else in the crate the
//! COC is a kernel *radius* in pixels, so the pixel conversion halves the
//! diameter. Negative radii are in front of the focus plane.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imgcore::FloatMap;
use crate::kv::KvSection;
use crate::scalar::Real;

pub const DEFAULT_MAX_COC_PX: f64 = 25.0;

pub const CAMERA_KEYS: [&str; 5] = [
    "f0_mm",
    "f_number",
    "focus_mm",
    "pixel_pitch_mm",
    "max_coc_px",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraModel<T> {
    focal_mm: T,
    f_number: T,
    focus_mm: T,
    pixel_pitch_mm: T,
    max_coc_px: T,
}

impl<T: Real> CameraModel<T> {
    pub fn new(focal_mm: T, f_number: T, focus_mm: T, pixel_pitch_mm: T) -> Result<Self> {
        Self::with_max_coc(
            focal_mm,
            f_number,
            focus_mm,
            pixel_pitch_mm,
            T::of(DEFAULT_MAX_COC_PX),
        )
    }

    pub fn with_max_coc(
        focal_mm: T,
        f_number: T,
        focus_mm: T,
        pixel_pitch_mm: T,
        max_coc_px: T,
    ) -> Result<Self> {
        let positive = |v: T, name: &str| {
            if v.is_finite() && v > T::zero() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v:?}")))
            }
        };
        positive(focal_mm, "f0_mm")?;
        positive(f_number, "f_number")?;
        positive(pixel_pitch_mm, "pixel_pitch_mm")?;
        positive(max_coc_px, "max_coc_px")?;
        if !(focus_mm.is_finite() && focus_mm > focal_mm) {
            return Err(Error::invalid(format!(
                "focus distance {focus_mm:?} must exceed the focal length {focal_mm:?}"
            )));
        }
        Ok(Self {
            focal_mm,
            f_number,
            focus_mm,
            pixel_pitch_mm,
            max_coc_px,
        })
    }

    /// Reads the `f0_mm, f_number, focus_mm, pixel_pitch_mm[, max_coc_px]`
    /// keys; any other key is rejected.
    pub fn from_kv(section: &KvSection) -> Result<Self> {
        section.reject_unknown(&CAMERA_KEYS)?;
        let max = section
            .parse::<f64>("max_coc_px")?
            .unwrap_or(DEFAULT_MAX_COC_PX);
        Self::with_max_coc(
            T::of(section.require("f0_mm")?),
            T::of(section.require("f_number")?),
            T::of(section.require("focus_mm")?),
            T::of(section.require("pixel_pitch_mm")?),
            T::of(max),
        )
    }

    pub fn focal_mm(&self) -> T {
        self.focal_mm
    }

    pub fn f_number(&self) -> T {
        self.f_number
    }

    pub fn focus_mm(&self) -> T {
        self.focus_mm
    }

    pub fn pixel_pitch_mm(&self) -> T {
        self.pixel_pitch_mm
    }

    pub fn max_coc_px(&self) -> T {
        self.max_coc_px
    }

    /// Blur-circle diameter on the sensor in millimeters.
    pub fn coc_diameter_mm(&self, depth_mm: T) -> Result<T> {
        check_depth(depth_mm)?;
        let f0 = self.focal_mm;
        Ok((depth_mm - self.focus_mm).abs() / depth_mm * (f0 * f0)
            / (self.f_number * (self.focus_mm - f0)))
    }

    /// Signed COC radius in pixels, clamped to `max_coc_px` in magnitude.
    pub fn coc_signed_px(&self, depth_mm: T) -> Result<T> {
        let diameter = self.coc_diameter_mm(depth_mm)?;
        let radius = (diameter / (T::of(2.0) * self.pixel_pitch_mm)).min(self.max_coc_px);
        Ok(if depth_mm > self.focus_mm {
            radius
        } else if depth_mm < self.focus_mm {
            -radius
        } else {
            T::zero()
        })
    }

    /// Applies [`coc_signed_px`](Self::coc_signed_px) to every pixel.
    pub fn depth_to_coc_map(&self, depth_mm: &FloatMap<T>) -> Result<FloatMap<T>> {
        if let Some(bad) = depth_mm.as_slice().iter().find(|d| !(**d > T::zero())) {
            return Err(Error::invalid(format!("nonpositive depth {bad:?}")));
        }
        let data = depth_mm
            .as_slice()
            .par_iter()
            .map(|&d| self.coc_signed_px(d))
            .collect::<Result<Vec<T>>>()?;
        let (h, w) = depth_mm.dims();
        Ok(FloatMap::from_raw(h, w, data))
    }
}

fn check_depth<T: Real>(d: T) -> Result<()> {
    if d.is_finite() && d > T::zero() {
        Ok(())
    } else {
        Err(Error::invalid(format!("depth must be positive, got {d:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv::KvFile;
    use proptest::prelude::*;

    fn cam() -> CameraModel<f64> {
        CameraModel::new(50.0, 4.0, 2000.0, 0.004).unwrap()
    }

    #[test]
    fn diameter_values() {
        let c = cam();
        assert_eq!(c.coc_diameter_mm(2000.0).unwrap(), 0.0);
        // independent evaluation: 0.5 * 2500 / 7800
        assert!((c.coc_diameter_mm(4000.0).unwrap() - 0.160_256_410_256).abs() < 1e-9);
        let far = c.coc_diameter_mm(1e12).unwrap();
        assert!((far - 2500.0 / 7800.0).abs() < 1e-9);
        assert!(c.coc_diameter_mm(0.0).is_err());
        assert!(c.coc_diameter_mm(-5.0).is_err());
    }

    #[test]
    fn signed_radius_and_clamp() {
        let c = cam();
        assert_eq!(c.coc_signed_px(2000.0).unwrap(), 0.0);
        assert!(c.coc_signed_px(1500.0).unwrap() < 0.0);
        assert!(c.coc_signed_px(2500.0).unwrap() > 0.0);
        // 0.16026 mm diameter / (2 * 0.004) = 20.03 px radius
        assert!((c.coc_signed_px(4000.0).unwrap() - 20.032_051_282).abs() < 1e-6);
        assert_eq!(c.coc_signed_px(1e9).unwrap(), 25.0);
        assert_eq!(c.coc_signed_px(100.0).unwrap(), -25.0);
    }

    #[test]
    fn invalid_models() {
        assert!(CameraModel::new(50.0, 4.0, 40.0, 0.004).is_err());
        assert!(CameraModel::new(0.0, 4.0, 2000.0, 0.004).is_err());
        assert!(CameraModel::new(50.0, -1.0, 2000.0, 0.004).is_err());
        assert!(CameraModel::with_max_coc(50.0, 4.0, 2000.0, 0.004, 0.0).is_err());
    }

    #[test]
    fn coc_maps() {
        let c = cam();
        let flat = FloatMap::filled(4, 5, 2000.0);
        assert!(c.depth_to_coc_map(&flat).unwrap().as_slice().iter().all(|v| *v == 0.0));
        let planes = FloatMap::from_fn(4, 6, |_, x| if x < 3 { 1500.0 } else { 3000.0 });
        let coc = c.depth_to_coc_map(&planes).unwrap();
        assert!(coc.get(0, 0) < 0.0 && coc.get(0, 5) > 0.0);
        let mut vals: Vec<f64> = coc.as_slice().to_vec();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        assert_eq!(vals.len(), 2);
        let depth = FloatMap::from_fn(7, 9, |y, x| 300.0 + 97.0 * (y * 9 + x) as f64);
        let map = c.depth_to_coc_map(&depth).unwrap();
        for y in 0..7 {
            for x in 0..9 {
                assert_eq!(map.get(y, x), c.coc_signed_px(depth.get(y, x)).unwrap());
            }
        }
        let mut bad = depth.clone();
        bad.set(3, 3, 0.0);
        assert!(c.depth_to_coc_map(&bad).is_err());
    }

    #[test]
    fn from_config() {
        let f = KvFile::parse(
            "[camera]\nf0_mm = 50\nf_number = 4\nfocus_mm = 2000\npixel_pitch_mm = 0.004\n",
        )
        .unwrap();
        let c = CameraModel::<f64>::from_kv(f.section("camera").unwrap()).unwrap();
        assert_eq!(c, cam());
        let bad = KvFile::parse("f0_mm = 50\nfnumber = 4\n").unwrap();
        assert!(CameraModel::<f64>::from_kv(bad.root()).is_err());
    }

    proptest! {
        #[test]
        fn diameter_monotone_in_defocus(a in 100.0f64..1e6, b in 100.0f64..1e6) {
            let c = cam();
            let f = c.focus_mm();
            // on the same side of the focus plane, farther from it never blurs less
            if (a - f) * (b - f) >= 0.0 && (a - f).abs() <= (b - f).abs() {
                prop_assert!(c.coc_diameter_mm(a).unwrap() <= c.coc_diameter_mm(b).unwrap() + 1e-15);
            }
        }

        #[test]
        fn sign_and_clamp(d in 1.0f64..1e7) {
            let c = cam();
            let r = c.coc_signed_px(d).unwrap();
            prop_assert!(r.abs() <= c.max_coc_px());
            prop_assert_eq!(r.signum() * (d - 2000.0).signum() >= 0.0, true);
            if d != 2000.0 { prop_assert!(r != 0.0); }
        }
    }
}
