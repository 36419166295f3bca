use crate::error::{Error, Result};
use crate::scalar::Real;

/// Single-channel map of finite samples with unbounded range.
///
/// Used for COC maps, cost slices, confidences and as the per-channel plane
/// storage of [`Image`]. Samples are row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatMap<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> FloatMap<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("map dimensions must be at least 1x1"));
        }
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{} samples for a {height}x{width} map",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        assert!(height > 0 && width > 0, "map dimensions must be at least 1x1");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, T::zero())
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(height > 0 && width > 0, "map dimensions must be at least 1x1");
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Internal constructor for buffers produced by this crate's own kernels.
    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Like [`map`](Self::map) but with a stateful closure, applied in row-major order.
    pub fn map_with(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self::from_raw(self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (T, T) {
        self.data
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Converts between scalar types.
    pub fn cast<U: Real>(&self) -> FloatMap<U> {
        FloatMap::from_raw(
            self.height,
            self.width,
            self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        )
    }

    pub(crate) fn ensure_same_dims(&self, other: &Self, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// Multi-channel image with samples nominally in `[0, 1]`, stored as one
/// [`FloatMap`] plane per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    planes: Vec<FloatMap<T>>,
}

impl<T: Real> Image<T> {
    /// Builds an image from channel planes (1 or 3) of identical dimensions.
    pub fn from_planes(planes: Vec<FloatMap<T>>) -> Result<Self> {
        if planes.len() != 1 && planes.len() != 3 {
            return Err(Error::invalid(format!(
                "images have 1 or 3 channels, got {}",
                planes.len()
            )));
        }
        let dims = planes[0].dims();
        if planes.iter().any(|p| p.dims() != dims) {
            return Err(Error::shape("channel planes differ in size"));
        }
        Ok(Self { planes })
    }

    /// Builds an image from interleaved samples (`HWC` order).
    pub fn from_interleaved(
        height: usize,
        width: usize,
        channels: usize,
        data: &[T],
    ) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{} samples for {height}x{width}x{channels}",
                data.len()
            )));
        }
        let planes = (0..channels)
            .map(|c| {
                FloatMap::new(
                    height,
                    width,
                    data.iter().skip(c).step_by(channels).copied().collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_planes(planes)
    }

    pub fn gray(plane: FloatMap<T>) -> Self {
        Self {
            planes: vec![plane],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        assert!(channels == 1 || channels == 3, "images have 1 or 3 channels");
        Self {
            planes: vec![FloatMap::filled(height, width, value); channels],
        }
    }

    pub(crate) fn from_planes_unchecked(planes: Vec<FloatMap<T>>) -> Self {
        Self { planes }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.planes[0].height()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.planes[0].width()
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        self.planes[0].dims()
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.planes.len()
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &FloatMap<T> {
        &self.planes[c]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut FloatMap<T> {
        &mut self.planes[c]
    }

    pub fn planes(&self) -> &[FloatMap<T>] {
        &self.planes
    }

    pub fn into_planes(self) -> Vec<FloatMap<T>> {
        self.planes
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.planes[c].get(y, x)
    }

    pub fn map_planes(&self, f: impl Fn(&FloatMap<T>) -> FloatMap<T>) -> Self {
        Self {
            planes: self.planes.iter().map(f).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T + Copy) -> Self {
        self.map_planes(|p| p.map(f))
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.max(T::zero()).min(T::one()))
    }

    /// Channel-mean grayscale plane.
    pub fn luma(&self) -> FloatMap<T> {
        if self.planes.len() == 1 {
            return self.planes[0].clone();
        }
        let n = T::of(self.planes.len() as f64);
        let (h, w) = self.dims();
        let data = (0..h * w)
            .map(|i| {
                self.planes
                    .iter()
                    .fold(T::zero(), |acc, p| acc + p.as_slice()[i])
                    / n
            })
            .collect();
        FloatMap::from_raw(h, w, data)
    }

    /// Samples interleaved in `HWC` order.
    pub fn to_interleaved(&self) -> Vec<T> {
        let c = self.channels();
        let n = self.height() * self.width();
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            for p in &self.planes {
                out.push(p.as_slice()[i]);
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image {
            planes: self.planes.iter().map(|p| p.cast()).collect(),
        }
    }

    pub fn is_in_unit_range(&self) -> bool {
        self.planes
            .iter()
            .flat_map(|p| p.as_slice())
            .all(|&v| v >= T::zero() && v <= T::one())
    }

    pub(crate) fn ensure_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.dims() != other.dims() || self.channels() != other.channels() {
            return Err(Error::shape(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.height(),
                self.width(),
                self.channels(),
                other.height(),
                other.width(),
                other.channels()
            )));
        }
        Ok(())
    }
}

/// Square, odd-sided, nonnegative convolution kernel normalized to unit sum.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel<T> {
    side: usize,
    weights: Vec<T>,
}

impl<T: Real> Kernel<T> {
    pub fn new(side: usize, weights: Vec<T>) -> Result<Self> {
        if side % 2 == 0 {
            return Err(Error::invalid(format!("kernel side {side} is not odd")));
        }
        if weights.len() != side * side {
            return Err(Error::shape(format!(
                "{} weights for a {side}x{side} kernel",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < T::zero()) {
            return Err(Error::invalid("kernel weights must be finite and nonnegative"));
        }
        let sum: f64 = weights.iter().map(|w| w.as_f64()).sum();
        if (sum - 1.0).abs() > T::normalization_tolerance(weights.len()) {
            return Err(Error::invalid(format!("kernel weights sum to {sum}, not 1")));
        }
        Ok(Self { side, weights })
    }

    /// Normalizes arbitrary nonnegative weights to unit sum.
    pub fn normalized(side: usize, weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 || !sum.is_finite() {
            return Err(Error::invalid("kernel weights must have a positive sum"));
        }
        Self::new(side, weights.iter().map(|w| T::of(w / sum)).collect())
    }

    pub(crate) fn from_raw(side: usize, weights: Vec<T>) -> Self {
        debug_assert!(side % 2 == 1 && weights.len() == side * side);
        Self { side, weights }
    }

    pub fn identity() -> Self {
        Self {
            side: 1,
            weights: vec![T::one()],
        }
    }

    #[inline]
    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn radius(&self) -> usize {
        self.side / 2
    }

    /// Weight at offset `(dy, dx)` from the center; zero outside the support.
    pub fn at(&self, dy: isize, dx: isize) -> T {
        let r = self.radius() as isize;
        if dy.abs() > r || dx.abs() > r {
            return T::zero();
        }
        self.weights[((dy + r) as usize) * self.side + (dx + r) as usize]
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().map(|w| w.as_f64()).sum()
    }

    /// Mirror about the vertical axis (`x -> -x`).
    pub fn mirror_horizontal(&self) -> Self {
        let s = self.side;
        let mut weights = Vec::with_capacity(s * s);
        for row in self.weights.chunks(s) {
            weights.extend(row.iter().rev());
        }
        Self { side: s, weights }
    }

    /// Point reflection (`(y, x) -> (-y, -x)`).
    pub fn flipped(&self) -> Self {
        Self {
            side: self.side,
            weights: self.weights.iter().rev().copied().collect(),
        }
    }

    /// Offsets `(dy, dx)` with nonzero weight.
    pub fn support(&self) -> Vec<(isize, isize)> {
        let r = self.radius() as isize;
        let mut out = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if self.at(dy, dx) > T::zero() {
                    out.push((dy, dx));
                }
            }
        }
        out
    }

    /// Horizontal center of mass in pixels.
    pub fn centroid_x(&self) -> f64 {
        let r = self.radius() as isize;
        let mut m = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                m += dx as f64 * self.at(dy, dx).as_f64();
            }
        }
        m / self.sum()
    }

    pub fn cast<U: Real>(&self) -> Kernel<U> {
        Kernel {
            side: self.side,
            weights: self.weights.iter().map(|w| U::of(w.as_f64())).collect(),
        }
    }
}
